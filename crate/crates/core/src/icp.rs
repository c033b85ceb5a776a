//! Instantaneous-connectivity parcellation of resting-state BOLD data.
//!
//! Stages: [`preprocess`] (frame drop, in-mask Gaussian smoothing, cosine
//! high-pass, spike and nuisance regression), [`unfold`] (standardized voxel
//! series times the standardized mask-mean series), [`group_ica`] (temporal
//! concatenation, PCA whitening and symmetric FastICA yielding spatial maps),
//! [`dual_regression`] and [`hard_parcellate`].

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{column_basis, left_pinv, RANK_TOL, mean_std, quantile, standardize, sym_eigen_desc, zscore};
use crate::par;
use crate::phantom::stream;
use crate::volume::{cluster_dictionary, LabelId, LabelVolume, Mask, Volume};

/// Per-voxel time courses inside a mask, stored voxel-major (`series(v)` is contiguous).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesStack {
    mask: Mask,
    indices: Vec<usize>,
    n_t: usize,
    data: Vec<f64>,
    tr_seconds: f64,
}

impl TimeSeriesStack {
    pub fn new(mask: Mask, n_t: usize, data: Vec<f64>, tr_seconds: f64) -> Result<Self> {
        if n_t < 2 {
            return Err(Error::InvalidInput(format!("time series need T >= 2, got {n_t}")));
        }
        if !(tr_seconds > 0.0) {
            return Err(Error::InvalidInput(format!("TR must be positive, got {tr_seconds}")));
        }
        let indices = mask.indices();
        if data.len() != indices.len() * n_t {
            return Err(Error::InvalidInput(format!(
                "{} samples for {} voxels x {n_t} timepoints",
                data.len(),
                indices.len()
            )));
        }
        Ok(TimeSeriesStack {
            mask,
            indices,
            n_t,
            data,
            tr_seconds,
        })
    }

    /// Same mask and TR, new samples.
    pub fn with_data(&self, n_t: usize, data: Vec<f64>) -> Result<Self> {
        TimeSeriesStack::new(self.mask.clone(), n_t, data, self.tr_seconds)
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// Linear grid index of each row.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn n_voxels(&self) -> usize {
        self.indices.len()
    }

    pub fn n_timepoints(&self) -> usize {
        self.n_t
    }

    pub fn tr_seconds(&self) -> f64 {
        self.tr_seconds
    }

    pub fn series(&self, v: usize) -> &[f64] {
        &self.data[v * self.n_t..(v + 1) * self.n_t]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Voxels × time matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_voxels(), self.n_t, &self.data)
    }

    /// 4D volume with zeros outside the mask.
    pub fn to_volume(&self) -> Volume {
        let geom = self.mask.geom().clone();
        let n = geom.n_voxels();
        let mut data = vec![0.0; n * self.n_t];
        for (v, &lin) in self.indices.iter().enumerate() {
            for t in 0..self.n_t {
                data[t * n + lin] = self.data[v * self.n_t + t];
            }
        }
        Volume::new_4d(geom, self.n_t, data).expect("sized from geometry")
    }

    pub fn from_volume(vol: &Volume, mask: Mask, tr_seconds: f64) -> Result<Self> {
        vol.geom().ensure_same(mask.geom(), "time series volume vs mask")?;
        let n_t = vol.nt();
        let n = vol.geom().n_voxels();
        let indices = mask.indices();
        let mut data = Vec::with_capacity(indices.len() * n_t);
        for &lin in &indices {
            for t in 0..n_t {
                data.push(vol.data()[t * n + lin]);
            }
        }
        TimeSeriesStack::new(mask, n_t, data, tr_seconds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocConfig {
    pub fwhm_mm: f64,
    pub highpass_hz: f64,
    pub n_drop_initial: usize,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        PreprocConfig {
            fwhm_mm: 3.5,
            highpass_hz: 0.01,
            n_drop_initial: 4,
        }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fwhm_mm >= 0.0) || !(self.highpass_hz >= 0.0) {
            return Err(Error::Config("fwhm_mm and highpass_hz must be >= 0".into()));
        }
        Ok(())
    }
}

/// Preprocessed residuals plus what was regressed out.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub stack: TimeSeriesStack,
    /// Spike frames (indices after the initial drop).
    pub spikes: Vec<usize>,
    /// Number of cosine drift regressors (the intercept excluded).
    pub n_drift: usize,
    /// Rank of the joint regressor matrix.
    pub design_rank: usize,
}

/// Cosine drift basis with frequencies below `cutoff_hz` (DCT-II, no constant term).
pub fn dct_drift_basis(n_t: usize, tr: f64, cutoff_hz: f64) -> Vec<Vec<f64>> {
    let span = 2.0 * n_t as f64 * tr;
    (1..n_t)
        .take_while(|&k| (k as f64) / span < cutoff_hz)
        .map(|k| {
            (0..n_t)
                .map(|t| (PI * k as f64 * (t as f64 + 0.5) / n_t as f64).cos())
                .collect()
        })
        .collect()
}

/// Frames whose RMS difference to the middle frame strictly exceeds `Q3 + 1.5·IQR`.
pub fn detect_spikes(stack: &TimeSeriesStack) -> Vec<usize> {
    let n_t = stack.n_timepoints();
    let nv = stack.n_voxels();
    if nv == 0 {
        return Vec::new();
    }
    let rms = rms_to_reference(stack, n_t / 2);
    let mut sorted = rms.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q1 = quantile(&sorted, 0.25);
    let q3 = quantile(&sorted, 0.75);
    let thr = q3 + 1.5 * (q3 - q1);
    (0..n_t).filter(|&t| rms[t] > thr).collect()
}

/// RMS over voxels of each frame's difference to frame `reference`.
pub fn rms_to_reference(stack: &TimeSeriesStack, reference: usize) -> Vec<f64> {
    let n_t = stack.n_timepoints();
    let nv = stack.n_voxels().max(1) as f64;
    let mut acc = vec![0.0; n_t];
    for v in 0..stack.n_voxels() {
        let s = stack.series(v);
        for t in 0..n_t {
            let d = s[t] - s[reference];
            acc[t] += d * d;
        }
    }
    acc.into_iter().map(|a| (a / nv).sqrt()).collect()
}

fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let half = (4.0 * sigma_vox).ceil() as i64;
    (-half..=half)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect()
}

/// Separable Gaussian smoothing restricted to the mask.
///
/// Each pass is a normalized convolution: out-of-mask samples contribute nothing
/// and the kernel weights are renormalized over the in-mask neighbours, so
/// background does not leak into edge voxels.
pub fn smooth_in_mask(stack: &TimeSeriesStack, fwhm_mm: f64) -> TimeSeriesStack {
    if fwhm_mm <= 0.0 || stack.n_voxels() == 0 {
        return stack.clone();
    }
    let geom = stack.mask().geom().clone();
    let dims = geom.dims;
    let n = geom.n_voxels();
    let n_t = stack.n_timepoints();
    let sigma_mm = fwhm_mm / (2.0 * (2.0 * 2f64.ln()).sqrt());
    let mask = stack.mask().data();
    // grid-ordered field for each time point (frame-major), then three passes
    let mut field = stack.to_volume().into_data();
    for axis in 0..3 {
        let kernel = gaussian_kernel(sigma_mm / geom.spacing[axis]);
        let half = (kernel.len() / 2) as i64;
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let mut out = vec![0.0; field.len()];
        par::for_each_chunk_mut(&mut out, n, |t, frame_out| {
            let frame = &field[t * n..(t + 1) * n];
            for lin in 0..n {
                if !mask[lin] {
                    continue;
                }
                let pos = geom.coords(lin)[axis] as i64;
                let (mut num, mut den) = (0.0, 0.0);
                for (ki, w) in kernel.iter().enumerate() {
                    let off = ki as i64 - half;
                    let p = pos + off;
                    if p < 0 || p >= dims[axis] as i64 {
                        continue;
                    }
                    let nb = (lin as i64 + off * stride as i64) as usize;
                    if mask[nb] {
                        num += w * frame[nb];
                        den += w;
                    }
                }
                frame_out[lin] = num / den;
            }
        });
        field = out;
    }
    let mut data = vec![0.0; stack.n_voxels() * n_t];
    for t in 0..n_t {
        for (v, &lin) in stack.indices().iter().enumerate() {
            data[v * n_t + t] = field[t * n + lin];
        }
    }
    stack.with_data(n_t, data).expect("same shape")
}

/// Residualizes every voxel series against the column space of `design` (T×P).
fn residualize(stack: &TimeSeriesStack, design: &DMatrix<f64>) -> Result<(TimeSeriesStack, usize)> {
    let n_t = stack.n_timepoints();
    let basis = column_basis(design);
    let r = basis.ncols();
    if r >= n_t {
        return Err(Error::RankDeficient(format!(
            "regressor matrix rank {r} leaves no residual degrees of freedom for T = {n_t}"
        )));
    }
    let rows: Vec<Vec<f64>> = par::map_range(stack.n_voxels(), |v| {
        let y = DVector::from_column_slice(stack.series(v));
        let fit = &basis * (basis.transpose() * &y);
        (y - fit).iter().copied().collect()
    });
    Ok((stack.with_data(n_t, rows.concat())?, r))
}

/// Parses nuisance regressors: one row per frame, one column per regressor,
/// optional header row (detected by a non-numeric first row).
pub fn parse_nuisance_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Csv(format!("nuisance row {}: {e}", i + 1))),
        }
    }
    let n_cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(Error::Csv("nuisance rows have differing column counts".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), n_cols, |r, c| rows[r][c]))
}

/// BOLD preprocessing ending in joint regression of drift, nuisance and spike regressors.
///
/// `nuisance` has one row per raw frame (before the initial drop) and one column
/// per regressor; pass a `T×0` matrix for none.
pub fn preprocess(raw: &TimeSeriesStack, nuisance: &DMatrix<f64>, cfg: &PreprocConfig) -> Result<Preprocessed> {
    cfg.validate()?;
    let t_raw = raw.n_timepoints();
    if nuisance.nrows() != t_raw {
        return Err(Error::InvalidInput(format!(
            "nuisance matrix has {} rows for {t_raw} frames",
            nuisance.nrows()
        )));
    }
    let r = nuisance.ncols();
    if t_raw <= cfg.n_drop_initial + r {
        return Err(Error::InvalidInput(format!(
            "T = {t_raw} must exceed dropped frames ({}) plus regressors ({r})",
            cfg.n_drop_initial
        )));
    }
    let n_t = t_raw - cfg.n_drop_initial;
    if n_t < 2 {
        return Err(Error::InvalidInput("fewer than 2 frames left after the initial drop".into()));
    }
    let mut data = Vec::with_capacity(raw.n_voxels() * n_t);
    for v in 0..raw.n_voxels() {
        data.extend_from_slice(&raw.series(v)[cfg.n_drop_initial..]);
    }
    let dropped = raw.with_data(n_t, data)?;
    let smoothed = smooth_in_mask(&dropped, cfg.fwhm_mm);

    let drift = dct_drift_basis(n_t, raw.tr_seconds(), cfg.highpass_hz);
    let spikes = detect_spikes(&smoothed);
    let p = 1 + drift.len() + r + spikes.len();
    let mut design = DMatrix::zeros(n_t, p);
    for t in 0..n_t {
        design[(t, 0)] = 1.0;
        for (k, d) in drift.iter().enumerate() {
            design[(t, 1 + k)] = d[t];
        }
        for c in 0..r {
            design[(t, 1 + drift.len() + c)] = nuisance[(t + cfg.n_drop_initial, c)];
        }
    }
    for (s, &t) in spikes.iter().enumerate() {
        design[(t, 1 + drift.len() + r + s)] = 1.0;
    }
    let (stack, design_rank) = residualize(&smoothed, &design)?;
    if !spikes.is_empty() {
        log::info!("preprocess: {} spike frame(s) regressed out: {:?}", spikes.len(), spikes);
    }
    Ok(Preprocessed {
        stack,
        spikes,
        n_drift: drift.len(),
        design_rank,
    })
}

/// Unfolded series plus the rows whose raw series had zero variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Unfolded {
    pub stack: TimeSeriesStack,
    /// Standardized mask-mean series `M`.
    pub mean_series: Vec<f64>,
    pub zero_variance: Vec<usize>,
}

/// Element-wise product of each standardized voxel series with the standardized mask mean.
pub fn unfold(stack: &TimeSeriesStack) -> Result<Unfolded> {
    let nv = stack.n_voxels();
    if nv == 0 {
        return Err(Error::InvalidInput("cannot unfold an empty mask".into()));
    }
    let n_t = stack.n_timepoints();
    let mut m = vec![0.0; n_t];
    for v in 0..nv {
        for (acc, x) in m.iter_mut().zip(stack.series(v)) {
            *acc += x;
        }
    }
    m.iter_mut().for_each(|x| *x /= nv as f64);
    let big_m = standardize(&m)
        .ok_or_else(|| Error::InvalidInput("mask-mean series has zero variance".into()))?;
    let rows: Vec<Option<Vec<f64>>> = par::map_range(nv, |v| {
        standardize(stack.series(v)).map(|z| z.iter().zip(&big_m).map(|(a, b)| a * b).collect())
    });
    let mut zero_variance = Vec::new();
    let mut data = Vec::with_capacity(nv * n_t);
    for (v, row) in rows.into_iter().enumerate() {
        match row {
            Some(r) => data.extend(r),
            None => {
                zero_variance.push(v);
                data.extend(std::iter::repeat_n(0.0, n_t));
            }
        }
    }
    Ok(Unfolded {
        stack: stack.with_data(n_t, data)?,
        mean_series: big_m,
        zero_variance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcaConfig {
    pub n_components: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Standardize each voxel's concatenated series before the decomposition.
    pub variance_normalize: bool,
    /// Independent FastICA starts; the converged run with the largest negentropy
    /// approximation is kept.
    pub n_init: usize,
    /// Remove the spatial mean of every time point, making the maps mutually
    /// uncorrelated rather than merely orthogonal.
    pub spatial_centering: bool,
}

impl Default for IcaConfig {
    fn default() -> Self {
        IcaConfig {
            n_components: 30,
            max_iter: 500,
            tol: 1e-6,
            seed: 0,
            variance_normalize: true,
            n_init: 8,
            spatial_centering: false,
        }
    }
}

/// Spatial maps from group ICA.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupIcaResult {
    pub mask: Mask,
    /// `maps[k][v]`: z-scored map value of component `k` at masked voxel `v`.
    pub maps: Vec<Vec<f64>>,
    /// Concatenated-time courses (ΣT × K), sign-aligned with `maps`.
    pub mixing: DMatrix<f64>,
    /// Unmixing of the whitened data (K × K, orthogonal).
    pub unmixing: DMatrix<f64>,
    /// Leading eigenvalues of the voxel-sample covariance kept by the reduction.
    pub eigenvalues: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl GroupIcaResult {
    pub fn n_components(&self) -> usize {
        self.maps.len()
    }

    /// Maps as a 4D volume (one frame per component, zeros outside the mask).
    pub fn to_volume(&self) -> Volume {
        let geom = self.mask.geom().clone();
        let n = geom.n_voxels();
        let idx = self.mask.indices();
        let mut data = vec![0.0; n * self.maps.len()];
        for (k, map) in self.maps.iter().enumerate() {
            for (v, &lin) in idx.iter().enumerate() {
                data[k * n + lin] = map[v];
            }
        }
        Volume::new_4d(geom, self.maps.len(), data).expect("sized from geometry")
    }
}

fn random_orthogonal(k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream(seed, 0x1CA);
    let g = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    qr.q()
}

/// `(W Wᵀ)^{-1/2} W`.
fn symmetric_decorrelation(w: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(w * w.transpose());
    let inv_sqrt = DMatrix::from_diagonal(&vals.map(|l| 1.0 / l.max(1e-300).sqrt()));
    &vecs * inv_sqrt * vecs.transpose() * w
}

/// Outcome of [`fastica`]: `sources = z · unmixingᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FastIcaOutput {
    pub unmixing: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Symmetric fixed-point ICA with the `tanh` contrast on whitened samples (rows of `z`).
pub fn fastica(z: &DMatrix<f64>, max_iter: usize, tol: f64, seed: u64) -> FastIcaOutput {
    let n = z.nrows() as f64;
    let k = z.ncols();
    let mut w = symmetric_decorrelation(&random_orthogonal(k, seed));
    for it in 1..=max_iter {
        let y = z * w.transpose();
        let g = y.map(f64::tanh);
        let gp_mean: Vec<f64> = (0..k)
            .map(|c| g.column(c).iter().map(|v| 1.0 - v * v).sum::<f64>() / n)
            .collect();
        let mut w_new = g.transpose() * z / n;
        for r in 0..k {
            for c in 0..k {
                w_new[(r, c)] -= gp_mean[r] * w[(r, c)];
            }
        }
        let w_new = symmetric_decorrelation(&w_new);
        let lim = (0..k)
            .map(|r| (w_new.row(r).dot(&w.row(r)).abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = w_new;
        if lim < tol {
            return FastIcaOutput {
                unmixing: w,
                iterations: it,
                converged: true,
            };
        }
    }
    FastIcaOutput {
        unmixing: w,
        iterations: max_iter,
        converged: false,
    }
}

/// `E[log cosh ν]` for a standard normal `ν`.
const LOGCOSH_GAUSS: f64 = 0.374_567_207_5;

/// Sum over columns of `(E[log cosh y] − E[log cosh ν])²`.
pub fn negentropy(y: &DMatrix<f64>) -> f64 {
    let n = y.nrows() as f64;
    y.column_iter()
        .map(|c| {
            let e = c.iter().map(|v| v.cosh().ln()).sum::<f64>() / n;
            (e - LOGCOSH_GAUSS).powi(2)
        })
        .sum()
}

fn skewness(x: &[f64]) -> f64 {
    let (m, sd) = mean_std(x);
    if sd == 0.0 {
        return 0.0;
    }
    x.iter().map(|v| ((v - m) / sd).powi(3)).sum::<f64>() / x.len() as f64
}

/// Spatial group ICA over temporally concatenated subjects.
///
/// Voxels are the samples and concatenated time points the features. The data
/// are reduced to `n_components` by their leading principal directions, whitened
/// and unmixed by [`fastica`]. Maps are z-scored and sign-flipped to non-negative
/// skewness. Non-convergence is reported through `converged = false` (with a
/// warning) and the last iterate is returned.
pub fn group_ica(stacks: &[TimeSeriesStack], cfg: &IcaConfig) -> Result<GroupIcaResult> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::InvalidInput("group ICA needs at least one subject".into()))?;
    for s in &stacks[1..] {
        if s.mask() != first.mask() {
            return Err(Error::GridMismatch("group ICA requires a common mask".into()));
        }
    }
    let k = cfg.n_components;
    if k == 0 {
        return Err(Error::InvalidInput("n_components must be >= 1".into()));
    }
    let nv = first.n_voxels();
    let total_t: usize = stacks.iter().map(|s| s.n_timepoints()).sum();
    if total_t < k || nv < k {
        return Err(Error::RankDeficient(format!(
            "{k} components from {nv} voxels x {total_t} timepoints"
        )));
    }
    let mut x = DMatrix::zeros(nv, total_t);
    let mut col = 0;
    for s in stacks {
        for v in 0..nv {
            for (t, &val) in s.series(v).iter().enumerate() {
                x[(v, col + t)] = val;
            }
        }
        col += s.n_timepoints();
    }
    if cfg.variance_normalize {
        for v in 0..nv {
            let row: Vec<f64> = x.row(v).iter().copied().collect();
            let z = zscore(&row);
            for (t, val) in z.into_iter().enumerate() {
                x[(v, t)] = val;
            }
        }
    }
    if cfg.spatial_centering {
        for t in 0..total_t {
            let m = x.column(t).mean();
            x.column_mut(t).add_scalar_mut(-m);
        }
    }

    // left singular vectors via the smaller Gram matrix
    let (vals, u) = if nv <= total_t {
        let (vals, vecs) = sym_eigen_desc(&x * x.transpose());
        (vals, vecs.columns(0, k).into_owned())
    } else {
        let (vals, vecs) = sym_eigen_desc(x.transpose() * &x);
        let e = vecs.columns(0, k).into_owned();
        let mut u = &x * &e;
        for c in 0..k {
            let s = vals[c].max(0.0).sqrt();
            if s > 0.0 {
                u.column_mut(c).scale_mut(1.0 / s);
            }
        }
        (vals, u)
    };
    let lead = vals[0].max(0.0);
    let cut = lead * 1e-10 * (nv.max(total_t) as f64);
    if lead == 0.0 || vals[k - 1] <= cut {
        return Err(Error::RankDeficient(format!(
            "data rank is below the requested {k} components"
        )));
    }
    let z = &u * (nv as f64).sqrt();
    let mut runs: Vec<FastIcaOutput> = par::map_range(cfg.n_init.max(1), |i| {
        fastica(&z, cfg.max_iter, cfg.tol, cfg.seed.wrapping_add(i as u64))
    });
    let scored: Vec<(bool, f64)> = runs
        .iter()
        .map(|r| (r.converged, negentropy(&(&z * r.unmixing.transpose()))))
        .collect();
    let mut pick = 0;
    for i in 1..runs.len() {
        let (c, j) = scored[i];
        let (bc, bj) = scored[pick];
        if (c && !bc) || (c == bc && j > bj) {
            pick = i;
        }
    }
    let ica = runs.swap_remove(pick);
    if !ica.converged {
        log::warn!("group ICA did not converge after {} iterations", ica.iterations);
    }
    let s = &z * ica.unmixing.transpose();
    // X ≈ S Aᵀ with A = Xᵀ S / n
    let mut mixing = x.transpose() * &s / nv as f64;
    let mut maps = Vec::with_capacity(k);
    for c in 0..k {
        let col: Vec<f64> = s.column(c).iter().copied().collect();
        let mut zmap = zscore(&col);
        if skewness(&zmap) < 0.0 {
            zmap.iter_mut().for_each(|v| *v = -*v);
            mixing.column_mut(c).neg_mut();
        }
        maps.push(zmap);
    }
    Ok(GroupIcaResult {
        mask: first.mask().clone(),
        maps,
        mixing,
        unmixing: ica.unmixing,
        eigenvalues: vals.iter().take(k).copied().collect(),
        iterations: ica.iterations,
        converged: ica.converged,
    })
}

/// Amari distance of a square gain matrix from a scaled permutation, in [0, 1].
pub fn amari_index(p: &DMatrix<f64>) -> f64 {
    let k = p.nrows();
    assert_eq!(k, p.ncols(), "amari index needs a square matrix");
    if k < 2 {
        return 0.0;
    }
    let a = p.abs();
    let mut total = 0.0;
    for i in 0..k {
        let row = a.row(i);
        let m = row.max();
        total += row.sum() / m - 1.0;
    }
    for j in 0..k {
        let c = a.column(j);
        let m = c.max();
        total += c.sum() / m - 1.0;
    }
    total / (2.0 * k as f64 * (k as f64 - 1.0))
}

/// Amari index between true and estimated spatial maps (columns are components),
/// using the least-squares gain `pinv(truth) · estimate`.
pub fn amari_from_maps(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<f64> {
    let p = left_pinv(truth, "true maps")? * estimate;
    Ok(amari_index(&p))
}

/// Subject-specific outputs of dual regression.
#[derive(Debug, Clone, PartialEq)]
pub struct DualRegression {
    /// T × K subject time courses.
    pub time_courses: DMatrix<f64>,
    /// `maps[k][v]`: subject map values.
    pub maps: Vec<Vec<f64>>,
}

/// Two-stage least squares: spatial regression of each frame on the group maps,
/// then temporal regression of each voxel on the resulting courses (both with an intercept).
pub fn dual_regression(subject: &TimeSeriesStack, group: &GroupIcaResult) -> Result<DualRegression> {
    dual_regression_maps(subject, &group.mask, &group.maps)
}

/// [`dual_regression`] from bare group maps (`maps[k][v]` over the masked voxels of `mask`).
pub fn dual_regression_maps(subject: &TimeSeriesStack, mask: &Mask, maps: &[Vec<f64>]) -> Result<DualRegression> {
    if subject.mask() != mask {
        return Err(Error::GridMismatch("subject mask differs from the group mask".into()));
    }
    let nv = subject.n_voxels();
    let k = maps.len();
    if k == 0 {
        return Err(Error::InvalidInput("dual regression needs at least one group map".into()));
    }
    if maps.iter().any(|m| m.len() != nv) {
        return Err(Error::InvalidInput(format!("group maps must have {nv} values each")));
    }
    let n_t = subject.n_timepoints();
    let y = subject.to_matrix();

    let mut d1 = DMatrix::zeros(nv, k + 1);
    for (c, map) in maps.iter().enumerate() {
        for v in 0..nv {
            d1[(v, c)] = map[v];
        }
    }
    d1.column_mut(k).fill(1.0);
    let beta1 = left_pinv(&d1, "dual regression stage 1 (group maps)")? * &y;
    let time_courses = beta1.rows(0, k).transpose();

    let mut d2 = DMatrix::zeros(n_t, k + 1);
    d2.columns_mut(0, k).copy_from(&time_courses);
    d2.column_mut(k).fill(1.0);
    // degenerate courses (e.g. all-zero data) fall back to the minimum-norm solution
    let beta2 = tolerant_pinv(&d2) * y.transpose();
    let maps = (0..k).map(|c| beta2.row(c).iter().copied().collect()).collect();
    Ok(DualRegression { time_courses, maps })
}

fn tolerant_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let eps = RANK_TOL * smax * m.nrows().max(m.ncols()) as f64;
    svd.pseudo_inverse(eps).expect("non-negative tolerance")
}

/// Winner-take-all labelling of z-scored maps; ties go to the lower component.
pub fn hard_parcellate(maps: &[Vec<f64>], mask: &Mask) -> Result<LabelVolume> {
    if maps.is_empty() {
        return Err(Error::InvalidInput("need at least one map".into()));
    }
    if maps.len() > LabelId::MAX as usize {
        return Err(Error::InvalidInput("too many maps for label ids".into()));
    }
    let idx = mask.indices();
    for m in maps {
        if m.len() != idx.len() {
            return Err(Error::InvalidInput(format!(
                "map has {} values for {} masked voxels",
                m.len(),
                idx.len()
            )));
        }
    }
    let z: Vec<Vec<f64>> = maps.iter().map(|m| zscore(m)).collect();
    let geom = mask.geom().clone();
    let mut data = vec![0 as LabelId; geom.n_voxels()];
    for (v, &lin) in idx.iter().enumerate() {
        let mut best = 0;
        for k in 1..z.len() {
            if z[k][v] > z[best][v] {
                best = k;
            }
        }
        data[lin] = best as LabelId + 1;
    }
    let labels = cluster_dictionary(maps.len());
    LabelVolume::new(geom, data, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::pearson;
    use crate::volume::Geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_mask(n: usize) -> Mask {
        Mask::full(Geometry::with_spacing([n, 1, 1], [1.0; 3]).unwrap())
    }

    fn stack_from(rows: &[Vec<f64>]) -> TimeSeriesStack {
        let t = rows[0].len();
        TimeSeriesStack::new(line_mask(rows.len()), t, rows.concat(), 0.7).unwrap()
    }

    #[test]
    fn nuisance_csv_with_and_without_header() {
        let m = parse_nuisance_csv("a,b\n1,2\n3,4\n5,6\n").unwrap();
        assert_eq!((m.nrows(), m.ncols()), (3, 2));
        assert_eq!(m[(2, 1)], 6.0);
        let m = parse_nuisance_csv("1, 2\n3,4\n").unwrap();
        assert_eq!((m.nrows(), m.ncols()), (2, 2));
        assert!(parse_nuisance_csv("1,2\n3\n").is_err());
        assert!(parse_nuisance_csv("1,2\nx,4\n").is_err());
    }

    #[test]
    fn volume_round_trip() {
        let geom = Geometry::with_spacing([3, 2, 2], [1.0; 3]).unwrap();
        let mut m = vec![false; 12];
        m[1] = true;
        m[7] = true;
        let mask = Mask::new(geom, m).unwrap();
        let s = TimeSeriesStack::new(mask.clone(), 3, vec![1., 2., 3., 4., 5., 6.], 0.7).unwrap();
        let back = TimeSeriesStack::from_volume(&s.to_volume(), mask, 0.7).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn constant_series_leave_zero_residual() {
        let s = stack_from(&[vec![5.0; 60], vec![-2.0; 60]]);
        let cfg = PreprocConfig { fwhm_mm: 0.0, ..Default::default() };
        let out = preprocess(&s, &DMatrix::zeros(60, 1), &cfg).unwrap();
        assert_eq!(out.stack.n_timepoints(), 56);
        assert!(out.stack.data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn linear_drift_removed_by_highpass() {
        let tr = 0.7;
        let n = (600.0 / tr) as usize + 4;
        let ramp: Vec<f64> = (0..n).map(|t| t as f64 * tr / 600.0).collect();
        let s = stack_from(&[ramp.clone()]);
        let cfg = PreprocConfig { fwhm_mm: 0.0, ..Default::default() };
        let out = preprocess(&s, &DMatrix::zeros(n, 0), &cfg).unwrap();
        let input_power: f64 = ramp[4..].iter().map(|v| v * v).sum();
        let resid_power: f64 = out.stack.series(0).iter().map(|v| v * v).sum();
        assert!(resid_power < 0.01 * input_power, "{resid_power} vs {input_power}");
        assert!(out.n_drift >= 10);
    }

    #[test]
    fn single_spike_is_flagged_and_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n_t = 80;
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..n_t).map(|_| rng.random::<f64>()).collect())
            .collect();
        let mut rows = rows;
        for r in &mut rows {
            r[30] += 1000.0;
        }
        let s = stack_from(&rows);
        let cfg = PreprocConfig { fwhm_mm: 0.0, ..Default::default() };
        let out = preprocess(&s, &DMatrix::zeros(n_t, 0), &cfg).unwrap();
        assert_eq!(out.spikes, vec![26]);
        for v in 0..20 {
            assert!(out.stack.series(v)[26].abs() < 1e-9);
        }
    }

    #[test]
    fn too_many_regressors_rejected() {
        let s = stack_from(&[vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]);
        let cfg = PreprocConfig { fwhm_mm: 0.0, n_drop_initial: 0, highpass_hz: 0.0 };
        let nuis = DMatrix::from_fn(6, 5, |r, c| ((r + 1) as f64).powi(c as i32 + 1));
        assert!(matches!(preprocess(&s, &nuis, &cfg), Err(Error::RankDeficient(_))));
        let nuis = DMatrix::zeros(6, 6);
        assert!(matches!(preprocess(&s, &nuis, &cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn smoothing_preserves_constants_inside_mask() {
        let geom = Geometry::with_spacing([6, 6, 6], [2.0; 3]).unwrap();
        let mask_data: Vec<bool> = (0..216).map(|i| geom.coords(i)[0] >= 2).collect();
        let mask = Mask::new(geom, mask_data).unwrap();
        let nv = mask.count();
        let s = TimeSeriesStack::new(mask, 2, vec![3.0; nv * 2], 0.7).unwrap();
        let out = smooth_in_mask(&s, 3.5);
        assert!(out.data().iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn identical_voxels_unfold_to_m_squared() {
        let x: Vec<f64> = (0..40).map(|t| ((t * 7) % 11) as f64).collect();
        let u = unfold(&stack_from(&[x.clone(), x.clone(), x])).unwrap();
        for v in 0..3 {
            let mean = u.stack.series(v).iter().sum::<f64>() / 40.0;
            assert!((mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn anticorrelated_voxel_has_mean_minus_one() {
        let a: Vec<f64> = (0..40).map(|t| (t as f64 * 0.3).sin() + 0.1 * t as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| 3.0 * v + 1.0).collect();
        let c: Vec<f64> = a.iter().map(|v| -v).collect();
        // mean of (a, b, c) is a positive multiple of a
        let u = unfold(&stack_from(&[a, b, c])).unwrap();
        let mean = u.stack.series(2).iter().sum::<f64>() / 40.0;
        assert!((mean + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_voxel_unfolds_to_zero() {
        let a: Vec<f64> = (0..10).map(|t| t as f64).collect();
        let u = unfold(&stack_from(&[a, vec![2.0; 10]])).unwrap();
        assert_eq!(u.zero_variance, vec![1]);
        assert!(u.stack.series(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unfold_mean_is_pearson_with_mask_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..30).map(|_| rng.random::<f64>()).collect()).collect();
        let s = stack_from(&rows);
        let u = unfold(&s).unwrap();
        for v in 0..8 {
            let mean = u.stack.series(v).iter().sum::<f64>() / 30.0;
            assert!((mean - pearson(s.series(v), &u.mean_series)).abs() < 1e-9);
        }
    }

    #[test]
    fn amari_of_scaled_permutation_is_zero() {
        let p = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 0.0, 0.0, 0.0, -1.0, 5.0, 0.0, 0.0]);
        assert_eq!(amari_index(&p), 0.0);
        let q = DMatrix::from_element(3, 3, 1.0);
        assert!((amari_index(&q) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_sources_recovered() {
        // each source map is a single active voxel
        let nv = 200;
        let hot = [10usize, 70, 150];
        let k = hot.len();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = 40;
        let courses: Vec<Vec<f64>> = (0..k).map(|_| (0..t).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let rows: Vec<Vec<f64>> = (0..nv)
            .map(|v| hot.iter().position(|&h| h == v).map_or(vec![0.0; t], |r| courses[r].clone()))
            .collect();
        let cfg = IcaConfig { n_components: k, variance_normalize: false, ..Default::default() };
        let res = group_ica(&[stack_from(&rows)], &cfg).unwrap();
        let truth = DMatrix::from_fn(nv, k, |v, c| if hot[c] == v { 1.0 } else { 0.0 });
        let est = DMatrix::from_fn(nv, k, |v, c| res.maps[c][v]);
        let centred = DMatrix::from_fn(nv, k, |v, c| truth[(v, c)] - 1.0 / nv as f64);
        // exact up to the fixed-point tolerance
        assert!(amari_from_maps(&centred, &est).unwrap() < 1e-6);
        let mut peaks: Vec<usize> = res
            .maps
            .iter()
            .map(|m| (0..nv).max_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap())
            .collect();
        peaks.sort();
        assert_eq!(peaks, hot);
    }

    #[test]
    fn ica_maps_are_uncorrelated_and_zscored() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..500).map(|_| (0..20).map(|_| rng.random::<f64>().powi(3)).collect()).collect();
        let cfg = IcaConfig { n_components: 4, spatial_centering: true, ..Default::default() };
        let res = group_ica(&[stack_from(&rows)], &cfg).unwrap();
        for a in 0..4 {
            let (m, sd) = mean_std(&res.maps[a]);
            assert!(m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
            assert!(skewness(&res.maps[a]) >= 0.0);
            for b in 0..a {
                assert!(pearson(&res.maps[a], &res.maps[b]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn too_many_components_is_rank_error() {
        let rows: Vec<Vec<f64>> = (0..10).map(|v| vec![v as f64, 1.0, 0.0]).collect();
        let r = group_ica(&[stack_from(&rows)], &IcaConfig { n_components: 3, variance_normalize: false, ..Default::default() });
        assert!(matches!(r, Err(Error::RankDeficient(_))));
    }

    #[test]
    fn zero_data_dual_regresses_to_zero() {
        let mask = line_mask(5);
        let group = GroupIcaResult {
            mask: mask.clone(),
            maps: vec![vec![1.0, -1.0, 0.5, 0.0, -0.5]],
            mixing: DMatrix::zeros(1, 1),
            unmixing: DMatrix::identity(1, 1),
            eigenvalues: vec![1.0],
            iterations: 0,
            converged: true,
        };
        let s = TimeSeriesStack::new(mask, 4, vec![0.0; 20], 0.7).unwrap();
        let dr = dual_regression(&s, &group).unwrap();
        assert!(dr.time_courses.iter().all(|&v| v == 0.0));
        assert!(dr.maps[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_indicator_recovers_course() {
        let mask = line_mask(6);
        let ind = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let tau = [0.5, -1.0, 2.0, 0.25, 3.0];
        let rows: Vec<Vec<f64>> = ind.iter().map(|&i| tau.iter().map(|t| i * t).collect()).collect();
        let s = TimeSeriesStack::new(mask.clone(), 5, rows.concat(), 0.7).unwrap();
        let group = GroupIcaResult {
            mask,
            maps: vec![ind],
            mixing: DMatrix::zeros(5, 1),
            unmixing: DMatrix::identity(1, 1),
            eigenvalues: vec![1.0],
            iterations: 0,
            converged: true,
        };
        let dr = dual_regression(&s, &group).unwrap();
        let tc: Vec<f64> = dr.time_courses.column(0).iter().copied().collect();
        assert!((pearson(&tc, &tau) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_group_maps_rejected() {
        let mask = line_mask(4);
        let group = GroupIcaResult {
            mask: mask.clone(),
            maps: vec![vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 4.0, 6.0, 8.0]],
            mixing: DMatrix::zeros(3, 2),
            unmixing: DMatrix::identity(2, 2),
            eigenvalues: vec![1.0, 1.0],
            iterations: 0,
            converged: true,
        };
        let s = TimeSeriesStack::new(mask, 3, vec![0.5; 12], 0.7).unwrap();
        assert!(matches!(dual_regression(&s, &group), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn parcellation_ties_and_indicators() {
        let mask = line_mask(4);
        let l = hard_parcellate(&[vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]], &mask).unwrap();
        assert_eq!(l.data(), &[1, 1, 2, 2]);
        // identical maps give identical z-scores everywhere: lower id wins
        let l = hard_parcellate(&[vec![0.3, 0.1, 0.2, 0.0], vec![0.3, 0.1, 0.2, 0.0]], &mask).unwrap();
        assert!(l.data().iter().all(|&x| x == 1));
    }

    #[test]
    fn zscore_is_scale_invariant() {
        let x = vec![0.1, 2.0, -1.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 7.5 * v).collect();
        let (zx, zy) = (zscore(&x), zscore(&y));
        for (a, b) in zx.iter().zip(&zy) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
