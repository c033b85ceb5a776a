//! End-to-end study on a synthetic cohort.
//!
//! Each subject gets a phantom with its own seed. Three segmentations are
//! produced per subject:
//!
//! * `fusion`: jittered priors fused onto the structural image.
//! * `dti`: diffusion signal, SH field, restart-seeded k-means. The raw clusters
//!   are relabelled by Hungarian matching against the subject's fusion output.
//! * `fmri`: BOLD series preprocessed and unfolded per subject, one group ICA
//!   over the cohort, dual regression, argmax parcellation. The raw clusters
//!   are regrouped onto the fusion maximum-probability atlas.
//!
//! Summary tables, probability atlases and centroid spreads follow, and every
//! output file is listed with its SHA-256 in `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{segment_dti, KMeansConfig, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::fod::{fit_field, upsample_field, FodConfig};
use crate::fusion::{fuse, AtlasPrior, FusionConfig};
use crate::icp::{dual_regression, group_ica, hard_parcellate, preprocess, unfold, IcaConfig, PreprocConfig, TimeSeriesStack};
use crate::metrics::{
    self, centroid_scatter, emit_table, hemisphere_masks, match_labels, pair_scores, probability_atlas, regroup,
    restrict, CentroidSpread, MetricsTable, ProbabilityAtlas, ScoreRecord, Side,
};
use crate::par;
use crate::phantom::{self, dwi_from_tensors, make_bold, make_priors, make_truth, region_tensors, PhantomSpec, PhantomSubject};
use crate::volume::{resample_nearest, write_label_nifti, write_nifti, Geometry, LabelId, LabelVolume, Mask};
use crate::{FORMAT_VERSION, VERSION};

/// Method names used for directories, atlases and table names.
pub const TRUTH: &str = "truth";
pub const FUSION: &str = "fusion";
pub const DTI: &str = "dti";
pub const DTI_CLUSTERS: &str = "dti_clusters";
pub const FMRI: &str = "fmri";
pub const FMRI_CLUSTERS: &str = "fmri_clusters";

/// Nuclei-space methods, in output order.
pub const METHODS: [&str; 4] = [TRUTH, FUSION, DTI, FMRI];

/// Method pairs `(a, reference)` that get a summary table named `a_vs_reference`.
pub const TABLE_PAIRS: [(&str, &str); 6] = [
    (DTI, FUSION),
    (FMRI, FUSION),
    (DTI, FMRI),
    (FUSION, TRUTH),
    (DTI, TRUTH),
    (FMRI, TRUTH),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionStudyConfig {
    pub n_priors: usize,
    /// Registration error of every prior, in mm.
    pub jitter_mm: f64,
    pub config: FusionConfig,
}

impl Default for FusionStudyConfig {
    fn default() -> Self {
        FusionStudyConfig {
            n_priors: 20,
            jitter_mm: 1.0,
            config: FusionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtiStudyConfig {
    /// Integer factor by which the diffusion grid is coarser than the structural grid.
    pub downsample: usize,
    pub fod: FodConfig,
    /// `seed` is replaced by the subject seed.
    pub kmeans: KMeansConfig,
    pub alpha: f64,
}

impl Default for DtiStudyConfig {
    fn default() -> Self {
        DtiStudyConfig {
            downsample: 1,
            fod: FodConfig::default(),
            kmeans: KMeansConfig::default(),
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FmriStudyConfig {
    pub preproc: PreprocConfig,
    /// `seed` is replaced by one derived from the master seed.
    pub ica: IcaConfig,
}

/// Study run configuration (the JSON document read by `study --config`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_subjects: usize,
    /// Shared phantom settings; `seed` is replaced by each subject's seed.
    pub phantom: PhantomSpec,
    pub fusion: FusionStudyConfig,
    pub dti: DtiStudyConfig,
    pub fmri: FmriStudyConfig,
    pub out_dir: PathBuf,
    pub master_seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_subjects: 18,
            phantom: PhantomSpec::default(),
            fusion: FusionStudyConfig::default(),
            dti: DtiStudyConfig::default(),
            fmri: FmriStudyConfig::default(),
            out_dir: PathBuf::from("study_out"),
            master_seed: 0,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::Config("n_subjects must be >= 1".into()));
        }
        if self.dti.downsample == 0 {
            return Err(Error::Config("dti.downsample must be >= 1".into()));
        }
        if self.fusion.n_priors == 0 {
            return Err(Error::Config("fusion.n_priors must be >= 1".into()));
        }
        if !(self.fusion.jitter_mm >= 0.0) {
            return Err(Error::Config("fusion.jitter_mm must be >= 0".into()));
        }
        if !(self.dti.alpha > 0.0) {
            return Err(Error::Config("dti.alpha must be > 0".into()));
        }
        if self.fmri.ica.n_components == 0 {
            return Err(Error::Config("fmri.ica.n_components must be >= 1".into()));
        }
        self.phantom.validate()?;
        self.fusion.config.validate()?;
        self.dti.kmeans.validate()?;
        self.fmri.preproc.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Per-subject seeds drawn from the master seed.
    pub fn subject_seeds(&self) -> Vec<u64> {
        let mut rng = phantom::stream(self.master_seed, SUBJECT_SEED_STREAM);
        (0..self.n_subjects).map(|_| rng.random()).collect()
    }

    fn ica_seed(&self) -> u64 {
        phantom::stream(self.master_seed, ICA_SEED_STREAM).random()
    }
}

const SUBJECT_SEED_STREAM: u64 = 0x5EED;
const ICA_SEED_STREAM: u64 = 0x1CA5;

/// One subject's segmentations and any stage failures.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectResult {
    pub name: String,
    pub seed: u64,
    /// Method name → segmentation (missing methods failed).
    pub segmentations: BTreeMap<String, LabelVolume>,
    pub diagnostics: Vec<String>,
}

/// Group-level facts recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupSummary {
    pub ica_subjects: Vec<String>,
    pub ica_converged: Option<bool>,
    pub ica_iterations: Option<usize>,
    /// fMRI cluster id → nucleus id.
    pub regroup_mapping: BTreeMap<LabelId, LabelId>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub name: String,
    pub seed: u64,
    pub methods: Vec<String>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

/// Provenance record: configuration, seeds, versions and output hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub toolkit_version: String,
    pub format_version: String,
    /// The run configuration without `out_dir`.
    pub config: serde_json::Value,
    pub subjects: Vec<ManifestSubject>,
    pub group: GroupSummary,
    pub files: Vec<ManifestFile>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the serialized manifest.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub subjects: Vec<SubjectResult>,
    pub atlases: BTreeMap<String, ProbabilityAtlas>,
    pub tables: BTreeMap<String, MetricsTable>,
    pub scatter: BTreeMap<String, BTreeMap<LabelId, CentroidSpread>>,
    pub manifest: Manifest,
    pub manifest_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Subject phantom spec: the shared spec with the subject's seed.
fn subject_spec(cfg: &StudyConfig, seed: u64) -> PhantomSpec {
    PhantomSpec {
        seed,
        ..cfg.phantom.clone()
    }
}

fn fusion_path(subject: &PhantomSubject, spec: &PhantomSpec, cfg: &FusionStudyConfig) -> Result<LabelVolume> {
    let priors = make_priors(subject, spec, cfg.n_priors, cfg.jitter_mm)?
        .into_iter()
        .map(|(i, l)| AtlasPrior::new(i, l))
        .collect::<Result<Vec<_>>>()?;
    fuse(&subject.structural, &priors, &subject.mask, &cfg.config)
}

/// Grid `factor` times coarser than `fine`, centred the same way.
fn coarse_geometry(fine: &Geometry, factor: usize) -> Result<Geometry> {
    if factor == 1 {
        return Ok(fine.clone());
    }
    let dims = fine.dims.map(|d| (d / factor).max(1));
    let spacing = fine.spacing.map(|s| s * factor as f64);
    Geometry::centered(dims, spacing)
}

/// Raw k-means clusters on the structural grid.
fn dti_path(subject: &PhantomSubject, spec: &PhantomSpec, cfg: &DtiStudyConfig) -> Result<LabelVolume> {
    let fine = subject.truth.geom();
    let coarse = coarse_geometry(fine, cfg.downsample)?;
    let truth = if cfg.downsample == 1 {
        subject.truth.clone()
    } else {
        resample_nearest(&subject.truth, &coarse)
    };
    let mask = truth.to_mask();
    let grads = spec.gradient_table();
    let dwi = dwi_from_tensors(&truth, &region_tensors(spec), &grads, spec.s0, spec.noise_sigma, spec.seed)?;
    let mut field = fit_field(&dwi, &grads, &mask, &cfg.fod)?;
    if cfg.downsample != 1 {
        field = upsample_field(&field, fine);
    }
    let kcfg = KMeansConfig {
        seed: spec.seed,
        ..cfg.kmeans.clone()
    };
    Ok(segment_dti(&field, &kcfg, cfg.alpha)?.labels)
}

/// Hungarian relabelling of data-driven clusters onto a reference labelling;
/// clusters left without a partner take the reference label they overlap most.
pub fn relabel_by_matching(clusters: &LabelVolume, reference: &LabelVolume) -> Result<LabelVolume> {
    let matching = match_labels(clusters, reference)?;
    let mut mapping = matching.map_a_to_b();
    for &c in &matching.unmatched_a {
        let mut overlap: BTreeMap<LabelId, u64> = BTreeMap::new();
        for (&a, &b) in clusters.data().iter().zip(reference.data()) {
            if a == c && b != 0 {
                *overlap.entry(b).or_insert(0) += 1;
            }
        }
        let mut best = (0 as LabelId, 0u64);
        for (&l, &n) in &overlap {
            if n > best.1 {
                best = (l, n);
            }
        }
        mapping.insert(c, best.0);
    }
    metrics::apply_mapping(clusters, &mapping, reference.labels())
}

/// Preprocessed and unfolded BOLD series of one subject.
fn fmri_subject(subject: &PhantomSubject, spec: &PhantomSpec, cfg: &FmriStudyConfig) -> Result<TimeSeriesStack> {
    let bold = make_bold(subject, spec)?;
    let nuisance = DMatrix::zeros(bold.stack.n_timepoints(), 0);
    let pre = preprocess(&bold.stack, &nuisance, &cfg.preproc)?;
    Ok(unfold(&pre.stack)?.stack)
}

fn score_records(
    subjects: &[SubjectResult],
    a: &str,
    b: &str,
    ids: &[LabelId],
    sides: &[(Side, Mask)],
) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for s in subjects {
        let (Some(x), Some(y)) = (s.segmentations.get(a), s.segmentations.get(b)) else {
            continue;
        };
        for (side, mask) in sides {
            out.push(ScoreRecord {
                subject: s.name.clone(),
                side: *side,
                scores: pair_scores(&restrict(x, mask)?, &restrict(y, mask)?, ids)?,
            });
        }
    }
    Ok(out)
}

fn mean_volumes(subjects: &[SubjectResult], method: &str) -> BTreeMap<LabelId, f64> {
    let segs: Vec<&LabelVolume> = subjects.iter().filter_map(|s| s.segmentations.get(method)).collect();
    let mut sums: BTreeMap<LabelId, f64> = BTreeMap::new();
    for seg in &segs {
        let voxel_mm3: f64 = seg.geom().spacing.iter().product();
        for (id, n) in seg.counts() {
            *sums.entry(id).or_insert(0.0) += n as f64 * voxel_mm3;
        }
    }
    sums.values_mut().for_each(|v| *v /= segs.len().max(1) as f64);
    sums
}

/// Collects output files and their hashes.
struct OutputWriter {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl OutputWriter {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(OutputWriter {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.files.push(PathBuf::from(rel));
        Ok(p)
    }

    fn labels(&mut self, rel: &str, seg: &LabelVolume) -> Result<()> {
        let p = self.path(rel)?;
        write_label_nifti(seg, &p)?;
        let sidecar = rel.trim_end_matches(".nii").to_string() + ".labels.json";
        self.files.push(PathBuf::from(sidecar));
        Ok(())
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn hashes(&self) -> Result<Vec<ManifestFile>> {
        let mut rels: Vec<&PathBuf> = self.files.iter().collect();
        rels.sort();
        rels.dedup();
        rels.into_iter()
            .map(|rel| {
                let p = self.root.join(rel);
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                Ok(ManifestFile {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect()
    }
}

fn centroid_csv(scatter: &BTreeMap<LabelId, CentroidSpread>, names: &BTreeMap<LabelId, String>) -> String {
    let mut s = String::from("id,nucleus,x_mm,y_mm,z_mm,rms_mm,n\n");
    for (id, c) in scatter {
        let name = names.get(id).cloned().unwrap_or_else(|| crate::volume::default_label_name(*id));
        s.push_str(&format!(
            "{id},{name},{:.3},{:.3},{:.3},{:.3},{}\n",
            c.mean[0], c.mean[1], c.mean[2], c.rms_mm, c.n_subjects
        ));
    }
    s
}

/// Runs the whole study and writes its outputs under `cfg.out_dir`.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let seeds = cfg.subject_seeds();
    let names: Vec<String> = (0..cfg.n_subjects).map(|i| format!("sub-{:02}", i + 1)).collect();
    let dictionary = cfg.phantom.dictionary();
    let ids: Vec<LabelId> = dictionary.keys().copied().collect();

    log::info!("study: {} subjects, master seed {}", cfg.n_subjects, cfg.master_seed);
    let cohort: Vec<Result<PhantomSubject>> = par::map_slice(&seeds, |&s| make_truth(&subject_spec(cfg, s)));
    let mut subjects: Vec<SubjectResult> = names
        .iter()
        .zip(&seeds)
        .map(|(name, &seed)| SubjectResult {
            name: name.clone(),
            seed,
            segmentations: BTreeMap::new(),
            diagnostics: Vec::new(),
        })
        .collect();
    let mut phantoms: Vec<Option<PhantomSubject>> = Vec::with_capacity(cfg.n_subjects);
    for (s, p) in subjects.iter_mut().zip(cohort) {
        match p {
            Ok(p) => {
                s.segmentations.insert(TRUTH.into(), p.truth.clone());
                phantoms.push(Some(p));
            }
            Err(e) => {
                log::warn!("{}: phantom failed: {e}", s.name);
                s.diagnostics.push(format!("phantom: {e}"));
                phantoms.push(None);
            }
        }
    }
    let jobs: Vec<(usize, u64)> = phantoms
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_some())
        .map(|(i, _)| (i, seeds[i]))
        .collect();

    log::info!("study: structural fusion");
    let fused = par::map_slice(&jobs, |&(i, seed)| {
        fusion_path(phantoms[i].as_ref().expect("filtered"), &subject_spec(cfg, seed), &cfg.fusion)
    });
    log::info!("study: diffusion clustering");
    let dti = par::map_slice(&jobs, |&(i, seed)| {
        dti_path(phantoms[i].as_ref().expect("filtered"), &subject_spec(cfg, seed), &cfg.dti)
    });
    log::info!("study: BOLD preprocessing and unfolding");
    let unfolded = par::map_slice(&jobs, |&(i, seed)| {
        fmri_subject(phantoms[i].as_ref().expect("filtered"), &subject_spec(cfg, seed), &cfg.fmri)
    });

    let mut ica_inputs: Vec<(usize, TimeSeriesStack)> = Vec::new();
    for (((&(i, _), f), d), u) in jobs.iter().zip(fused).zip(dti).zip(unfolded) {
        let s = &mut subjects[i];
        match f {
            Ok(l) => {
                s.segmentations.insert(FUSION.into(), l);
            }
            Err(e) => s.diagnostics.push(format!("{FUSION}: {e}")),
        }
        match d {
            Ok(l) => {
                if let Some(reference) = s.segmentations.get(FUSION) {
                    match relabel_by_matching(&l, reference) {
                        Ok(m) => {
                            s.segmentations.insert(DTI.into(), m);
                        }
                        Err(e) => s.diagnostics.push(format!("{DTI}: relabelling: {e}")),
                    }
                } else {
                    s.diagnostics.push(format!("{DTI}: no fusion reference to relabel against"));
                }
                s.segmentations.insert(DTI_CLUSTERS.into(), l);
            }
            Err(e) => s.diagnostics.push(format!("{DTI}: {e}")),
        }
        match u {
            Ok(stack) => ica_inputs.push((i, stack)),
            Err(e) => s.diagnostics.push(format!("{FMRI}: {e}")),
        }
    }
    for s in &subjects {
        for d in &s.diagnostics {
            log::warn!("{}: {d}", s.name);
        }
    }

    log::info!("study: group ICA over {} subjects", ica_inputs.len());
    let mut group = GroupSummary {
        ica_subjects: ica_inputs.iter().map(|(i, _)| subjects[*i].name.clone()).collect(),
        ..Default::default()
    };
    let mut ica_maps = None;
    if !ica_inputs.is_empty() {
        let stacks: Vec<TimeSeriesStack> = ica_inputs.iter().map(|(_, s)| s.clone()).collect();
        let ica_cfg = IcaConfig {
            seed: cfg.ica_seed(),
            ..cfg.fmri.ica.clone()
        };
        match group_ica(&stacks, &ica_cfg) {
            Ok(g) => {
                group.ica_converged = Some(g.converged);
                group.ica_iterations = Some(g.iterations);
                if !g.converged {
                    group.diagnostics.push("group ICA did not converge; last iterate used".into());
                }
                let parcels = par::map_slice(&ica_inputs, |(_, stack)| {
                    dual_regression(stack, &g).and_then(|dr| hard_parcellate(&dr.maps, stack.mask()))
                });
                for ((i, _), p) in ica_inputs.iter().zip(parcels) {
                    match p {
                        Ok(l) => {
                            subjects[*i].segmentations.insert(FMRI_CLUSTERS.into(), l);
                        }
                        Err(e) => subjects[*i].diagnostics.push(format!("{FMRI}: {e}")),
                    }
                }
                ica_maps = Some(g.to_volume());
            }
            Err(e) => group.diagnostics.push(format!("group ICA: {e}")),
        }
    }

    let with_both: Vec<usize> = (0..subjects.len())
        .filter(|&i| subjects[i].segmentations.contains_key(FMRI_CLUSTERS))
        .collect();
    let fusion_all: Vec<LabelVolume> = subjects.iter().filter_map(|s| s.segmentations.get(FUSION).cloned()).collect();
    if !with_both.is_empty() {
        if fusion_all.is_empty() {
            group.diagnostics.push("regroup: no fusion segmentations to use as reference".into());
        } else {
            let source: Vec<LabelVolume> = with_both
                .iter()
                .map(|&i| subjects[i].segmentations[FMRI_CLUSTERS].clone())
                .collect();
            match regroup(&source, &fusion_all) {
                Ok(r) => {
                    for (&i, seg) in with_both.iter().zip(r.segs) {
                        subjects[i].segmentations.insert(FMRI.into(), seg);
                    }
                    group.regroup_mapping = r.mapping;
                }
                Err(e) => group.diagnostics.push(format!("regroup: {e}")),
            }
        }
    }
    for d in &group.diagnostics {
        log::warn!("group: {d}");
    }

    log::info!("study: metrics");
    let common_mask = phantoms
        .iter()
        .flatten()
        .next()
        .map(|p| p.mask.clone())
        .ok_or_else(|| Error::InvalidInput("every subject phantom failed".into()))?;
    let (left, right) = hemisphere_masks(&common_mask);
    let sides = [(Side::L, left), (Side::R, right)];
    let mut tables = BTreeMap::new();
    for (a, b) in TABLE_PAIRS {
        let records = score_records(&subjects, a, b, &ids, &sides)?;
        if records.is_empty() {
            group.diagnostics.push(format!("table {a}_vs_{b}: no subject has both segmentations"));
            continue;
        }
        let table = emit_table(&records, &dictionary, &mean_volumes(&subjects, b))?;
        tables.insert(format!("{a}_vs_{b}"), table);
    }

    let mut atlases = BTreeMap::new();
    let mut scatter = BTreeMap::new();
    for method in METHODS {
        let segs: Vec<LabelVolume> = subjects
            .iter()
            .filter_map(|s| s.segmentations.get(method).cloned())
            .collect();
        if segs.is_empty() {
            continue;
        }
        atlases.insert(method.to_string(), probability_atlas(&segs)?);
        if segs.len() >= 2 {
            scatter.insert(method.to_string(), centroid_scatter(&segs)?);
        }
    }

    log::info!("study: writing outputs to {}", cfg.out_dir.display());
    let mut w = OutputWriter::new(&cfg.out_dir)?;
    for s in &subjects {
        for (method, seg) in &s.segmentations {
            w.labels(&format!("{}/{method}/labels.nii", s.name), seg)?;
        }
    }
    if let Some(maps) = &ica_maps {
        let p = w.path("atlases/fmri_clusters/group_ica_maps.nii")?;
        write_nifti(maps, p)?;
    }
    for (method, atlas) in &atlases {
        w.labels(&format!("atlases/{method}/maxprob.nii"), atlas.max_prob())?;
        for id in atlas.ids() {
            let p = w.path(&format!("atlases/{method}/freq_{id:02}.nii"))?;
            write_nifti(&atlas.frequency_volume(id), p)?;
        }
        let p = w.path(&format!("atlases/{method}/maxprob.png"))?;
        metrics::render_labels(atlas.max_prob(), p)?;
        let p = w.path(&format!("atlases/{method}/weighted.png"))?;
        metrics::render_weighted(atlas, p)?;
    }
    for (method, sc) in &scatter {
        w.text(&format!("atlases/{method}/centroids.csv"), &centroid_csv(sc, &dictionary))?;
    }
    for (name, table) in &tables {
        w.text(&format!("tables/{name}.csv"), &table.to_csv()?)?;
    }

    let mut config = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(obj) = config.as_object_mut() {
        obj.remove("out_dir");
    }
    let manifest = Manifest {
        toolkit_version: VERSION.to_string(),
        format_version: FORMAT_VERSION.to_string(),
        config,
        subjects: subjects
            .iter()
            .map(|s| ManifestSubject {
                name: s.name.clone(),
                seed: s.seed,
                methods: s.segmentations.keys().cloned().collect(),
                diagnostics: s.diagnostics.clone(),
            })
            .collect(),
        group,
        files: w.hashes()?,
    };
    let manifest_hash = manifest.hash();
    let p = cfg.out_dir.join("manifest.json");
    fs::write(&p, manifest.to_json()).map_err(|e| Error::io(&p, e))?;
    log::info!("study: manifest sha256 {manifest_hash}");
    Ok(StudyResult {
        subjects,
        atlases,
        tables,
        scatter,
        manifest,
        manifest_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path, n: usize) -> StudyConfig {
        StudyConfig {
            n_subjects: n,
            phantom: PhantomSpec {
                grid_dims: [20; 3],
                spacing: 2.0,
                n_timepoints: 120,
                ..Default::default()
            },
            fusion: FusionStudyConfig {
                n_priors: 3,
                jitter_mm: 0.0,
                ..Default::default()
            },
            dti: DtiStudyConfig {
                kmeans: KMeansConfig {
                    n_restarts: 4,
                    ..Default::default()
                },
                ..Default::default()
            },
            fmri: FmriStudyConfig {
                ica: IcaConfig {
                    n_components: 6,
                    n_init: 2,
                    ..Default::default()
                },
                ..Default::default()
            },
            out_dir: out.to_path_buf(),
            master_seed: 3,
        }
    }

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let c = StudyConfig::default();
        assert_eq!(StudyConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = StudyConfig::from_json(r#"{"n_subjects": 2, "dti": {"alpha": 50}}"#).unwrap();
        assert_eq!(partial.n_subjects, 2);
        assert_eq!(partial.dti.alpha, 50.0);
        assert_eq!(partial.dti.kmeans, KMeansConfig::default());
        assert!(StudyConfig::from_json(r#"{"n_subject": 2}"#).is_err());
        assert!(StudyConfig { n_subjects: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn relabel_maps_clusters_onto_reference() {
        let g = Geometry::with_spacing([6, 1, 1], [1.0; 3]).unwrap();
        let reference = LabelVolume::with_default_labels(g.clone(), vec![1, 1, 2, 2, 3, 3]).unwrap();
        let clusters = LabelVolume::new(g, vec![2, 2, 1, 1, 1, 1], crate::volume::cluster_dictionary(2)).unwrap();
        let out = relabel_by_matching(&clusters, &reference).unwrap();
        assert_eq!(out.data(), &[1, 1, 2, 2, 2, 2]);
        assert_eq!(out.labels(), reference.labels());
    }

    #[test]
    fn single_subject_noise_free_fusion_equals_truth() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_study(&tiny(dir.path(), 1)).unwrap();
        let s = &r.subjects[0];
        assert_eq!(s.segmentations[FUSION].data(), s.segmentations[TRUTH].data());
        let t = &r.tables["fusion_vs_truth"];
        for row in &t.rows {
            assert_eq!(row.dice_l.mean.or(row.dice_r.mean), Some(1.0), "{}", row.nucleus);
        }
        assert!(dir.path().join("manifest.json").exists());
        assert!(dir.path().join("tables/fmri_vs_fusion.csv").exists());
    }

    #[test]
    fn rerun_reproduces_manifest_and_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_study(&tiny(a.path(), 2)).unwrap();
        let rb = run_study(&tiny(b.path(), 2)).unwrap();
        assert_eq!(ra.manifest_hash, rb.manifest_hash);
        assert_eq!(
            fs::read(a.path().join("manifest.json")).unwrap(),
            fs::read(b.path().join("manifest.json")).unwrap()
        );
        for s in &ra.subjects {
            assert!(s.diagnostics.is_empty(), "{:?}", s.diagnostics);
            for m in [TRUTH, FUSION, DTI, DTI_CLUSTERS, FMRI, FMRI_CLUSTERS] {
                assert!(s.segmentations.contains_key(m), "{} lacks {m}", s.name);
            }
        }
        assert_eq!(ra.tables.len(), TABLE_PAIRS.len());
    }

    #[test]
    fn emitted_segmentations_partition_the_mask() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_study(&tiny(dir.path(), 2)).unwrap();
        for s in &r.subjects {
            let mask = s.segmentations[TRUTH].to_mask();
            for (m, seg) in &s.segmentations {
                for (lin, &l) in seg.data().iter().enumerate() {
                    if m != FMRI && m != DTI {
                        assert_eq!(l != 0, mask.get(lin), "{m} at {lin}");
                    } else if l != 0 {
                        assert!(mask.get(lin));
                        assert!(seg.labels().contains_key(&l));
                    }
                }
            }
        }
    }
}
