//! Command-line interface: one subcommand per stage plus the full study.
//!
//! Grammar: `parcelbench <command> [--config FILE] [--seed N] [--out PATH] [inputs...]`.
//! Flags override the matching config keys. Exit codes: 0 success, 1 usage
//! error, 2 data or validation error, 3 numerical failure. Diagnostics go to
//! standard error; results go to files (except the one-line `metrics` report).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cluster::{segment_dti, KMeansConfig, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::fod::{fit_field, isotropic_target, upsample_field, FodConfig, GradientTable, ShField};
use crate::fusion::{fuse, AtlasPrior, FusionConfig};
use crate::icp::{
    dual_regression_maps, group_ica, hard_parcellate, parse_nuisance_csv, preprocess, unfold, IcaConfig,
    PreprocConfig, TimeSeriesStack,
};
use crate::metrics::{
    centroid_scatter, centroids, probability_atlas, regroup, render_labels, render_weighted, OverlapCounts,
};
use crate::phantom::{make_bold, make_dwi, make_priors, make_truth, PhantomSpec};
use crate::pipeline::{run_study, StudyConfig};
use crate::volume::{
    default_label_name, read_label_nifti, read_mask_nifti, read_nifti, write_label_nifti, write_mask_nifti,
    write_nifti, LabelId, LabelVolume, Mask, Volume,
};
use crate::{par, FORMAT_VERSION, VERSION};

fn version_string() -> &'static str {
    Box::leak(format!("{VERSION} (format {FORMAT_VERSION})").into_boxed_str())
}

#[derive(Debug, Parser)]
#[command(name = "parcelbench", version = version_string(), about = "Thalamus parcellation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON config file for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for stochastic commands (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic subject (truth, mask, structural, DWI, BOLD, priors).
    Phantom {
        /// Number of jittered atlas priors to write (0 for none).
        #[arg(long, default_value_t = 0)]
        priors: usize,
        #[arg(long, default_value_t = 1.0)]
        jitter_mm: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Fuse registered priors onto a target image.
    Fuse {
        target: PathBuf,
        mask: PathBuf,
        /// Prior as `INTENSITY,LABELS` (repeatable; adds to the config's priors).
        #[arg(long = "prior")]
        priors: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit SH coefficients to a diffusion volume.
    FodFit {
        dwi: PathBuf,
        grads: PathBuf,
        mask: PathBuf,
        /// Upsample the field to this isotropic voxel size (mm) before writing.
        #[arg(long)]
        upsample_mm: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Cluster an SH field into a labelling.
    DtiSeg {
        field: PathBuf,
        mask: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Preprocess a 4D BOLD volume inside a mask.
    IcpPreproc {
        bold: PathBuf,
        mask: PathBuf,
        /// Nuisance regressors CSV (one row per raw frame).
        #[arg(long)]
        nuisance: Option<PathBuf>,
        #[arg(long, default_value_t = 0.7)]
        tr: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Unfold preprocessed BOLD series into instantaneous connectivity series.
    IcpUnfold {
        bold: PathBuf,
        mask: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Group ICA over unfolded subjects; writes a 4D map volume.
    IcpIca {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        mask: PathBuf,
        /// Treat non-convergence as a numerical failure (exit 3).
        #[arg(long)]
        strict: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Dual regression of group maps into one subject; writes subject maps.
    IcpDualreg {
        subject: PathBuf,
        maps: PathBuf,
        mask: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Argmax parcellation of a 4D map volume.
    IcpParcel {
        maps: PathBuf,
        mask: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Regroup source labellings onto reference labellings by max-prob overlap.
    Regroup {
        #[arg(long, num_args = 1.., required = true)]
        source: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        reference: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Dice and VSI between two labellings.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        /// Single label to report; all labels when omitted.
        #[arg(long)]
        label: Option<LabelId>,
        #[command(flatten)]
        common: Common,
    },
    /// Probability atlas (frequency volumes and max-prob map) of labellings.
    Probmap {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Centroids of one labelling, or centroid spread across several.
    Centroids {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Full cross-method study on a synthetic cohort.
    Study {
        #[command(flatten)]
        common: Common,
    },
    /// Tri-planar PNG of one labelling, or a frequency-weighted blend of several.
    Render {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// Config accepted by `fuse --config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseConfigFile {
    /// `[intensity, labels]` path pairs.
    pub priors: Vec<[PathBuf; 2]>,
    pub fusion: FusionConfig,
}

/// Config accepted by `dti-seg --config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtiSegConfigFile {
    pub kmeans: KMeansConfig,
    pub alpha: f64,
}

impl Default for DtiSegConfigFile {
    fn default() -> Self {
        DtiSegConfigFile {
            kmeans: KMeansConfig::default(),
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    par::init_from_env();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::InvalidInput("--out is required for this command".into()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_stack(path: &Path, mask: &Mask, tr: f64) -> Result<TimeSeriesStack> {
    TimeSeriesStack::from_volume(&read_nifti(path)?, mask.clone(), tr)
}

/// Frames of a 4D volume restricted to the masked voxels.
fn maps_from_volume(vol: &Volume, mask: &Mask) -> Result<Vec<Vec<f64>>> {
    vol.geom().ensure_same(mask.geom(), "map volume vs mask")?;
    let idx = mask.indices();
    Ok((0..vol.nt())
        .map(|t| {
            let f = vol.frame(t);
            idx.iter().map(|&l| f[l]).collect()
        })
        .collect())
}

fn maps_to_volume(maps: &[Vec<f64>], mask: &Mask) -> Result<Volume> {
    let geom = mask.geom().clone();
    let n = geom.n_voxels();
    let idx = mask.indices();
    let mut data = vec![0.0; n * maps.len()];
    for (k, m) in maps.iter().enumerate() {
        for (v, &lin) in idx.iter().enumerate() {
            data[k * n + lin] = m[v];
        }
    }
    Volume::new_4d(geom, maps.len(), data)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom { priors, jitter_mm, common } => cmd_phantom(priors, jitter_mm, &common),
        Command::Fuse {
            target,
            mask,
            priors,
            common,
        } => {
            let mut cfg: FuseConfigFile = load_config(common.config.as_deref())?;
            for p in &priors {
                let (a, b) = p
                    .split_once(',')
                    .ok_or_else(|| Error::InvalidInput(format!("--prior expects INTENSITY,LABELS, got {p:?}")))?;
                cfg.priors.push([PathBuf::from(a), PathBuf::from(b)]);
            }
            let atlas = cfg
                .priors
                .iter()
                .map(|[i, l]| AtlasPrior::new(read_nifti(i)?, read_label_nifti(l)?))
                .collect::<Result<Vec<_>>>()?;
            let out = fuse(&read_nifti(&target)?, &atlas, &read_mask_nifti(&mask)?, &cfg.fusion)?;
            write_label_nifti(&out, require_out(&common)?)
        }
        Command::FodFit {
            dwi,
            grads,
            mask,
            upsample_mm,
            common,
        } => {
            let cfg: FodConfig = load_config(common.config.as_deref())?;
            let mask = read_mask_nifti(&mask)?;
            let mut field = fit_field(&read_nifti(&dwi)?, &GradientTable::read(&grads)?, &mask, &cfg)?;
            if !field.skipped().is_empty() {
                log::warn!("{} voxels with non-positive b=0 signal kept zero coefficients", field.skipped().len());
            }
            let out = require_out(&common)?;
            if let Some(mm) = upsample_mm {
                let target = isotropic_target(&mask, mm)?;
                field = upsample_field(&field, &target);
                let mask_path = out.with_file_name(format!(
                    "{}_mask.nii",
                    out.file_name().map_or("field".into(), |n| n.to_string_lossy().trim_end_matches(".nii").to_string())
                ));
                write_mask_nifti(field.mask(), &mask_path)?;
                log::info!("upsampled mask written to {}", mask_path.display());
            }
            write_nifti(&field.to_volume(), out)
        }
        Command::DtiSeg { field, mask, common } => {
            let mut cfg: DtiSegConfigFile = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.kmeans.seed = s;
            }
            let field = ShField::from_volume(&read_nifti(&field)?, read_mask_nifti(&mask)?)?;
            let seg = segment_dti(&field, &cfg.kmeans, cfg.alpha)?;
            write_label_nifti(&seg.labels, require_out(&common)?)
        }
        Command::IcpPreproc {
            bold,
            mask,
            nuisance,
            tr,
            common,
        } => {
            let cfg: PreprocConfig = load_config(common.config.as_deref())?;
            let stack = read_stack(&bold, &read_mask_nifti(&mask)?, tr)?;
            let nuisance = match nuisance {
                Some(p) => parse_nuisance_csv(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?,
                None => DMatrix::zeros(stack.n_timepoints(), 0),
            };
            let pre = preprocess(&stack, &nuisance, &cfg)?;
            log::info!(
                "{} spike frames, {} drift regressors, design rank {}",
                pre.spikes.len(),
                pre.n_drift,
                pre.design_rank
            );
            write_nifti(&pre.stack.to_volume(), require_out(&common)?)
        }
        Command::IcpUnfold { bold, mask, common } => {
            let stack = read_stack(&bold, &read_mask_nifti(&mask)?, 1.0)?;
            let u = unfold(&stack)?;
            if !u.zero_variance.is_empty() {
                log::warn!("{} voxels with zero variance unfolded to zero", u.zero_variance.len());
            }
            write_nifti(&u.stack.to_volume(), require_out(&common)?)
        }
        Command::IcpIca {
            inputs,
            mask,
            strict,
            common,
        } => {
            let mut cfg: IcaConfig = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let mask = read_mask_nifti(&mask)?;
            let stacks = inputs
                .iter()
                .map(|p| read_stack(p, &mask, 1.0))
                .collect::<Result<Vec<_>>>()?;
            let g = group_ica(&stacks, &cfg)?;
            if !g.converged {
                if strict {
                    return Err(Error::NotConverged { iterations: g.iterations });
                }
                log::warn!("group ICA did not converge after {} iterations", g.iterations);
            }
            write_nifti(&g.to_volume(), require_out(&common)?)
        }
        Command::IcpDualreg {
            subject,
            maps,
            mask,
            common,
        } => {
            let mask = read_mask_nifti(&mask)?;
            let group = maps_from_volume(&read_nifti(&maps)?, &mask)?;
            let dr = dual_regression_maps(&read_stack(&subject, &mask, 1.0)?, &mask, &group)?;
            write_nifti(&maps_to_volume(&dr.maps, &mask)?, require_out(&common)?)
        }
        Command::IcpParcel { maps, mask, common } => {
            let mask = read_mask_nifti(&mask)?;
            let maps = maps_from_volume(&read_nifti(&maps)?, &mask)?;
            write_label_nifti(&hard_parcellate(&maps, &mask)?, require_out(&common)?)
        }
        Command::Regroup {
            source,
            reference,
            common,
        } => {
            let src = read_labels(&source)?;
            let refr = read_labels(&reference)?;
            let r = regroup(&src, &refr)?;
            let out = require_out(&common)?;
            ensure_dir(out)?;
            for (p, seg) in source.iter().zip(&r.segs) {
                let name = p.file_name().ok_or_else(|| Error::InvalidInput(format!("{} has no file name", p.display())))?;
                write_label_nifti(seg, out.join(name))?;
            }
            let mapping: BTreeMap<String, LabelId> = r.mapping.iter().map(|(k, v)| (k.to_string(), *v)).collect();
            write_text(&out.join("mapping.json"), &serde_json::to_string_pretty(&mapping).expect("map serializes"))
        }
        Command::Metrics { a, b, label, .. } => {
            let a = read_label_nifti(&a)?;
            let b = read_label_nifti(&b)?;
            let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
            match label {
                Some(l) => {
                    let c = OverlapCounts::of(&a, &b, l)?;
                    println!("dice={},vsi={}", fmt(c.dice()), fmt(c.vsi()));
                }
                None => {
                    let mut ids: Vec<LabelId> = a.present_ids();
                    ids.extend(b.present_ids());
                    ids.sort_unstable();
                    ids.dedup();
                    for l in ids {
                        let c = OverlapCounts::of(&a, &b, l)?;
                        println!("label={l},dice={},vsi={}", fmt(c.dice()), fmt(c.vsi()));
                    }
                }
            }
            Ok(())
        }
        Command::Probmap { inputs, common } => {
            let atlas = probability_atlas(&read_labels(&inputs)?)?;
            let out = require_out(&common)?;
            ensure_dir(out)?;
            write_label_nifti(atlas.max_prob(), out.join("maxprob.nii"))?;
            for id in atlas.ids() {
                write_nifti(&atlas.frequency_volume(id), out.join(format!("freq_{id:02}.nii")))?;
            }
            Ok(())
        }
        Command::Centroids { inputs, common } => {
            let segs = read_labels(&inputs)?;
            let names = segs[0].labels().clone();
            let name = |id: LabelId| names.get(&id).cloned().unwrap_or_else(|| default_label_name(id));
            let mut text;
            if segs.len() == 1 {
                text = String::from("id,nucleus,x_mm,y_mm,z_mm\n");
                for (id, c) in centroids(&segs[0]) {
                    text.push_str(&format!("{id},{},{:.3},{:.3},{:.3}\n", name(id), c[0], c[1], c[2]));
                }
            } else {
                text = String::from("id,nucleus,x_mm,y_mm,z_mm,rms_mm,n\n");
                for (id, c) in centroid_scatter(&segs)? {
                    text.push_str(&format!(
                        "{id},{},{:.3},{:.3},{:.3},{:.3},{}\n",
                        name(id),
                        c.mean[0],
                        c.mean[1],
                        c.mean[2],
                        c.rms_mm,
                        c.n_subjects
                    ));
                }
            }
            write_text(require_out(&common)?, &text)
        }
        Command::Study { common } => {
            let mut cfg: StudyConfig = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.master_seed = s;
            }
            if let Some(o) = &common.out {
                cfg.out_dir = o.clone();
            }
            let r = run_study(&cfg)?;
            let failed: usize = r.subjects.iter().filter(|s| !s.diagnostics.is_empty()).count();
            if failed > 0 {
                log::warn!("{failed} subjects recorded stage failures; see manifest.json");
            }
            eprintln!("manifest sha256 {}", r.manifest_hash);
            Ok(())
        }
        Command::Render { inputs, common } => {
            let segs = read_labels(&inputs)?;
            let out = require_out(&common)?;
            if segs.len() == 1 {
                render_labels(&segs[0], out)
            } else {
                render_weighted(&probability_atlas(&segs)?, out)
            }
        }
    }
}

fn read_labels(paths: &[PathBuf]) -> Result<Vec<LabelVolume>> {
    paths.iter().map(read_label_nifti).collect()
}

fn cmd_phantom(n_priors: usize, jitter_mm: f64, common: &Common) -> Result<()> {
    let mut spec: PhantomSpec = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    let out = require_out(common)?;
    ensure_dir(out)?;
    let subject = make_truth(&spec)?;
    write_label_nifti(&subject.truth, out.join("truth.nii"))?;
    write_mask_nifti(&subject.mask, out.join("mask.nii"))?;
    write_nifti(&subject.structural, out.join("structural.nii"))?;
    let (dwi, grads) = make_dwi(&subject, &spec)?;
    write_nifti(&dwi, out.join("dwi.nii"))?;
    grads.write(out.join("grads.txt"))?;
    let bold = make_bold(&subject, &spec)?;
    write_nifti(&bold.stack.to_volume(), out.join("bold.nii"))?;
    if n_priors > 0 {
        let dir = out.join("priors");
        ensure_dir(&dir)?;
        for (i, (intensity, labels)) in make_priors(&subject, &spec, n_priors, jitter_mm)?.iter().enumerate() {
            write_nifti(intensity, dir.join(format!("prior_{:02}_intensity.nii", i + 1)))?;
            write_label_nifti(labels, dir.join(format!("prior_{:02}_labels.nii", i + 1)))?;
        }
    }
    write_text(
        &out.join("phantom.json"),
        &serde_json::to_string_pretty(&spec).expect("spec serializes"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["parcelbench"]), 1);
        assert_eq!(run(["parcelbench", "nonsense"]), 1);
        assert_eq!(run(["parcelbench", "metrics", "a.nii"]), 1);
        assert_eq!(run(["parcelbench", "metrics", "a.nii", "b.nii", "--bogus"]), 1);
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run(["parcelbench", "--version"]), 0);
        assert_eq!(run(["parcelbench", "study", "--help"]), 0);
    }

    #[test]
    fn missing_input_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("missing.nii");
        assert_eq!(run(["parcelbench".as_ref(), "metrics".as_ref(), a.as_os_str(), a.as_os_str()]), 2);
    }

    #[test]
    fn every_command_is_registered() {
        use clap::CommandFactory;
        let names: Vec<String> = Cli::command().get_subcommands().map(|c| c.get_name().to_string()).collect();
        for n in [
            "phantom",
            "fuse",
            "fod-fit",
            "dti-seg",
            "icp-preproc",
            "icp-unfold",
            "icp-ica",
            "icp-dualreg",
            "icp-parcel",
            "regroup",
            "metrics",
            "probmap",
            "centroids",
            "study",
            "render",
        ] {
            assert!(names.contains(&n.to_string()), "{n}");
        }
        assert_eq!(names.len(), 15);
    }
}
