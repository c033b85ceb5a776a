//! Synthetic subjects with known ground truth.
//!
//! The "thalamus" is an ellipsoid centred on the world origin, split into
//! angular wedges (and, above eight regions, an inner core ring plus an outer
//! ring of wedges). The ellipsoid depends only on the grid, so every subject
//! generated on one grid shares a mask; the seed jitters the wedge boundaries. Every generator is a pure function of the [`PhantomSpec`]:
//! randomness comes from ChaCha8 streams (`rand_chacha::ChaCha8Rng`, seeded with
//! `seed_from_u64(spec.seed)` and one stream id per purpose), so identical specs
//! give bit-identical output within this implementation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fod::{hemisphere_directions, GradientTable};
use crate::icp::TimeSeriesStack;
use crate::par;
use crate::volume::{
    default_label_name, resample_nearest, thalamic_dictionary, trilinear_resample, Affine, Geometry, LabelId,
    LabelVolume, Mask, Volume,
};

/// Smallest parcel accepted by [`make_truth`].
pub const MIN_PARCEL_VOXELS: usize = 20;

/// Mean diffusivity shared by every region (mm²/s).
pub const MEAN_DIFFUSIVITY: f64 = 0.7e-3;

/// Free-water diffusivity used outside the mask (mm²/s).
const FREE_WATER: f64 = 3.0e-3;

const STREAM_GEOMETRY: u64 = 1;
const BASE_OFFSET: f64 = 0.3;
const STREAM_STRUCTURAL: u64 = 2;
const STREAM_DWI: u64 = 3;
const STREAM_BOLD: u64 = 4;
const STREAM_PRIORS: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub grid_dims: [usize; 3],
    /// Isotropic voxel size in mm.
    pub spacing: f64,
    pub n_regions: usize,
    pub seed: u64,
    /// Noise level relative to each modality's signal scale: Gaussian sd for the
    /// structural image (intensities lie in [0.3, 0.9]), Rician sigma as a fraction
    /// of S0 for diffusion, and Gaussian sd relative to the unit-variance latent
    /// BOLD courses (so BOLD SNR is `1 / noise_sigma`).
    pub noise_sigma: f64,
    pub n_timepoints: usize,
    pub tr_seconds: f64,
    pub n_directions: usize,
    pub n_b0: usize,
    pub b_value: f64,
    pub s0: f64,
    /// Ellipsoid semi-axes as fractions of the half field of view.
    pub ellipsoid: [f64; 3],
    /// Fractional anisotropy range of the per-region tensors.
    pub fa_range: [f64; 2],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid_dims: [48, 48, 48],
            spacing: 2.0,
            n_regions: 11,
            seed: 0,
            noise_sigma: 0.0,
            n_timepoints: 200,
            tr_seconds: 0.7,
            n_directions: 64,
            n_b0: 3,
            b_value: 1000.0,
            s0: 1000.0,
            ellipsoid: [0.6, 0.5, 0.44],
            fa_range: [0.4, 0.6],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions < 2 {
            return Err(Error::InvalidInput(format!("n_regions must be >= 2, got {}", self.n_regions)));
        }
        if self.n_regions > u8::MAX as usize {
            return Err(Error::InvalidInput("n_regions must fit a uint8 label".into()));
        }
        if !(self.spacing > 0.0) || self.grid_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput("grid dims and spacing must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("noise_sigma must be >= 0".into()));
        }
        if self.ellipsoid.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(Error::InvalidInput("ellipsoid fractions must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.fa_range[0]) || self.fa_range[1] < self.fa_range[0] || self.fa_range[1] >= 1.0 {
            return Err(Error::InvalidInput("fa_range must satisfy 0 <= lo <= hi < 1".into()));
        }
        Ok(())
    }

    fn validate_diffusion(&self) -> Result<()> {
        if self.n_directions < 28 {
            return Err(Error::InvalidInput(format!(
                "n_directions must be >= 28 for an order-6 fit, got {}",
                self.n_directions
            )));
        }
        if self.n_b0 == 0 {
            return Err(Error::InvalidInput("at least one b=0 volume is required".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::centered(self.grid_dims, [self.spacing; 3])
    }

    pub fn gradient_table(&self) -> GradientTable {
        GradientTable::standard(self.n_b0, self.n_directions, self.b_value)
    }

    /// Label dictionary: the thalamic nuclei when there are eleven regions.
    pub fn dictionary(&self) -> BTreeMap<LabelId, String> {
        if self.n_regions == 11 {
            thalamic_dictionary()
        } else {
            (1..=self.n_regions as LabelId).map(|i| (i, default_label_name(i))).collect()
        }
    }
}

pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Ground truth, mask and structural image of one synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub truth: LabelVolume,
    pub mask: Mask,
    /// Region-constant intensities in [0.3, 0.9] (0.1 outside) plus Gaussian noise.
    pub structural: Volume,
    /// Region id → mean structural intensity.
    pub intensities: BTreeMap<LabelId, f64>,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    radii: [f64; 3],
    offset: f64,
    core_split: f64,
}

fn region_of(layout: &Layout, n_regions: usize, p: [f64; 3]) -> Option<usize> {
    let q = [p[0] / layout.radii[0], p[1] / layout.radii[1], p[2] / layout.radii[2]];
    let rho2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2];
    if rho2 > 1.0 {
        return None;
    }
    let phi = (q[1].atan2(q[0]) + layout.offset).rem_euclid(2.0 * PI);
    let wedge = |n: usize| ((phi / (2.0 * PI) * n as f64).floor() as usize).min(n - 1);
    if n_regions <= 8 {
        return Some(wedge(n_regions));
    }
    let n_inner = n_regions / 3;
    if rho2.sqrt() < layout.core_split {
        Some(wedge(n_inner))
    } else {
        Some(n_inner + wedge(n_regions - n_inner))
    }
}

/// Ellipsoidal mask split into `n_regions` contiguous parcels plus the structural image.
pub fn make_truth(spec: &PhantomSpec) -> Result<PhantomSubject> {
    spec.validate()?;
    let geom = spec.geometry()?;
    let mut rng = stream(spec.seed, STREAM_GEOMETRY);
    let half_fov = [0, 1, 2].map(|a| spec.grid_dims[a] as f64 * spec.spacing / 2.0);
    // the ellipsoid is shared by every seed so subjects have a common mask;
    // the seed only moves the internal boundaries
    let radii = [0, 1, 2].map(|a| spec.ellipsoid[a] * half_fov[a]);

    const ATTEMPTS: usize = 10;
    let mut labels = None;
    for _ in 0..ATTEMPTS {
        let layout = Layout {
            radii,
            offset: BASE_OFFSET + rng.random_range(-0.1..0.1),
            core_split: rng.random_range(0.52..0.58),
        };
        let mut data: Vec<LabelId> = (0..geom.n_voxels())
            .map(|lin| {
                region_of(&layout, spec.n_regions, geom.world(lin))
                    .map(|r| r as LabelId + 1)
                    .unwrap_or(0)
            })
            .collect();
        enforce_contiguity(&geom, &mut data);
        let mut counts = vec![0usize; spec.n_regions + 1];
        for &v in &data {
            counts[v as usize] += 1;
        }
        if counts[1..].iter().all(|&c| c >= MIN_PARCEL_VOXELS) {
            labels = Some(data);
            break;
        }
    }
    let data = labels.ok_or_else(|| {
        Error::InvalidInput(format!(
            "grid {:?} at {} mm is too small for {} parcels of >= {MIN_PARCEL_VOXELS} voxels",
            spec.grid_dims, spec.spacing, spec.n_regions
        ))
    })?;
    let truth = LabelVolume::new(geom.clone(), data, spec.dictionary())?;
    let mask = truth.to_mask();

    let mut srng = stream(spec.seed, STREAM_STRUCTURAL);
    let mut levels: Vec<f64> = (0..spec.n_regions)
        .map(|i| 0.3 + 0.6 * i as f64 / (spec.n_regions - 1) as f64)
        .collect();
    levels.shuffle(&mut srng);
    let intensities: BTreeMap<LabelId, f64> = levels
        .iter()
        .enumerate()
        .map(|(i, &v)| (i as LabelId + 1, v))
        .collect();
    let structural_data: Vec<f64> = truth
        .data()
        .iter()
        .map(|&l| {
            let base = if l == 0 { 0.1 } else { intensities[&l] };
            base + spec.noise_sigma * normal(&mut srng)
        })
        .collect();
    let structural = Volume::new(geom, structural_data)?;
    Ok(PhantomSubject {
        truth,
        mask,
        structural,
        intensities,
    })
}

const NEIGHBOURS: [[i64; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// 6-connected components of the nonzero labels: `(label, voxels)` per component.
fn label_components(geom: &Geometry, data: &[LabelId]) -> Vec<(LabelId, Vec<usize>)> {
    let mut seen = vec![false; data.len()];
    let mut comps = Vec::new();
    for start in 0..data.len() {
        if data[start] == 0 || seen[start] {
            continue;
        }
        let label = data[start];
        let mut members = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            members.push(v);
            let c = geom.coords(v);
            for d in NEIGHBOURS {
                let (i, j, k) = (c[0] as i64 + d[0], c[1] as i64 + d[1], c[2] as i64 + d[2]);
                if geom.contains(i, j, k) {
                    let n = geom.linear_index(i as usize, j as usize, k as usize);
                    if !seen[n] && data[n] == label {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        comps.push((label, members));
    }
    comps
}

/// Merges every fragment smaller than its label's main component into the
/// neighbouring label it touches most, until each label is one 6-connected piece.
fn enforce_contiguity(geom: &Geometry, data: &mut [LabelId]) {
    loop {
        let comps = label_components(geom, data);
        let mut largest: BTreeMap<LabelId, usize> = BTreeMap::new();
        for (ci, (l, m)) in comps.iter().enumerate() {
            let e = largest.entry(*l).or_insert(ci);
            if m.len() > comps[*e].1.len() {
                *e = ci;
            }
        }
        let mut changed = false;
        for (ci, (l, members)) in comps.iter().enumerate() {
            if largest[l] == ci {
                continue;
            }
            let mut touch: BTreeMap<LabelId, usize> = BTreeMap::new();
            for &v in members {
                let c = geom.coords(v);
                for d in NEIGHBOURS {
                    let (i, j, k) = (c[0] as i64 + d[0], c[1] as i64 + d[1], c[2] as i64 + d[2]);
                    if geom.contains(i, j, k) {
                        let n = data[geom.linear_index(i as usize, j as usize, k as usize)];
                        if n != 0 && n != *l {
                            *touch.entry(n).or_default() += 1;
                        }
                    }
                }
            }
            // first maximum in id order
            if let Some((&to, _)) = touch.iter().rev().max_by_key(|(_, &c)| c) {
                for &v in members {
                    data[v] = to;
                }
                changed = true;
            }
        }
        if !changed {
            return;
        }
    }
}

/// Axially symmetric diffusion tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tensor(pub Matrix3<f64>);

impl Tensor {
    pub fn isotropic(d: f64) -> Self {
        Tensor(Matrix3::identity() * d)
    }

    /// Cylindrical tensor with principal `axis`, mean diffusivity `md` and anisotropy `fa`.
    pub fn cylindrical(axis: [f64; 3], md: f64, fa: f64) -> Self {
        let k = fa * (3.0 / (9.0 - 6.0 * fa * fa)).sqrt();
        let l1 = md * (1.0 + 2.0 * k);
        let l2 = md * (1.0 - k);
        let e = Vector3::from(axis).normalize();
        Tensor(Matrix3::identity() * l2 + e * e.transpose() * (l1 - l2))
    }

    pub fn quad(&self, g: [f64; 3]) -> f64 {
        let v = Vector3::from(g);
        (v.transpose() * self.0 * v)[(0, 0)]
    }

    pub fn fa(&self) -> f64 {
        let ev = self.0.symmetric_eigenvalues();
        let md = ev.sum() / 3.0;
        let num: f64 = ev.iter().map(|l| (l - md) * (l - md)).sum();
        let den: f64 = ev.iter().map(|l| l * l).sum();
        (1.5 * num / den).sqrt()
    }
}

/// Noise-free tensor signal `S0 · exp(−b gᵀDg)`.
pub fn tensor_signal(s0: f64, b: f64, g: [f64; 3], d: &Tensor) -> f64 {
    s0 * (-b * d.quad(g)).exp()
}

/// Principal axes assigned to regions: the three coordinate axes, the four body
/// diagonals, then quasi-uniform hemisphere directions.
pub fn region_axes(n: usize) -> Vec<[f64; 3]> {
    let s = 1.0 / 3f64.sqrt();
    let mut axes = vec![
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [s, s, s],
        [s, -s, s],
        [-s, s, s],
        [s, s, -s],
    ];
    if n > axes.len() {
        axes.extend(hemisphere_directions(n - axes.len() + 2).into_iter().skip(1).take(n - 7));
    }
    axes.truncate(n);
    axes
}

/// Per-region tensors drawn for `spec` (region id `r` at index `r − 1`).
pub fn region_tensors(spec: &PhantomSpec) -> Vec<Tensor> {
    let mut rng = stream(spec.seed, STREAM_DWI);
    region_axes(spec.n_regions)
        .into_iter()
        .map(|axis| {
            let fa = if spec.fa_range[1] > spec.fa_range[0] {
                rng.random_range(spec.fa_range[0]..spec.fa_range[1])
            } else {
                spec.fa_range[0]
            };
            Tensor::cylindrical(axis, MEAN_DIFFUSIVITY, fa)
        })
        .collect()
}

/// Diffusion-weighted 4D volume for `truth`, one tensor per region.
///
/// Background voxels carry isotropic free water. Rician noise with
/// `sigma = noise_sigma · s0` is added to every sample.
pub fn dwi_from_tensors(
    truth: &LabelVolume,
    tensors: &[Tensor],
    grads: &GradientTable,
    s0: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Volume> {
    if let Some(&max) = truth.data().iter().max() {
        if max as usize > tensors.len() {
            return Err(Error::InvalidInput(format!("no tensor for region {max}")));
        }
    }
    let geom = truth.geom().clone();
    let n = geom.n_voxels();
    let nt = grads.len();
    let water = Tensor::isotropic(FREE_WATER);
    let sigma = noise_sigma * s0;
    let mut data = vec![0.0; n * nt];
    par::for_each_chunk_mut(&mut data, n, |t, frame| {
        let g = grads.directions()[t];
        let b = grads.bvals()[t];
        let mut rng = stream(seed, STREAM_DWI.wrapping_mul(1 << 20) + t as u64 + 1);
        for (lin, out) in frame.iter_mut().enumerate() {
            let l = truth.data()[lin];
            let d = if l == 0 { &water } else { &tensors[l as usize - 1] };
            let s = tensor_signal(s0, b, g, d);
            *out = if sigma > 0.0 {
                let re = s + sigma * normal(&mut rng);
                let im = sigma * normal(&mut rng);
                (re * re + im * im).sqrt()
            } else {
                s
            };
        }
    });
    Volume::new_4d(geom, nt, data)
}

/// Diffusion volume and gradient table (b=0 volumes first) for a subject.
pub fn make_dwi(subject: &PhantomSubject, spec: &PhantomSpec) -> Result<(Volume, GradientTable)> {
    spec.validate_diffusion()?;
    let grads = spec.gradient_table();
    let tensors = region_tensors(spec);
    let dwi = dwi_from_tensors(&subject.truth, &tensors, &grads, spec.s0, spec.noise_sigma, spec.seed)?;
    Ok((dwi, grads))
}

/// BOLD phantom: voxel series plus the latent per-region courses that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct BoldPhantom {
    pub stack: TimeSeriesStack,
    /// `latent[r]` is the unit-variance course of region id `r + 1`.
    pub latent: Vec<Vec<f64>>,
}

/// Lower edge of the latent BOLD band (Hz).
pub const BOLD_BAND_LO: f64 = 0.012;
/// Upper edge of the latent BOLD band (Hz).
pub const BOLD_BAND_HI: f64 = 0.15;

/// Band-limited, mutually orthogonal, zero-mean unit-variance courses.
pub fn latent_courses(n_regions: usize, n_t: usize, tr: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let span = 2.0 * n_t as f64 * tr;
    let ks: Vec<usize> = (1..n_t)
        .filter(|&k| {
            let f = k as f64 / span;
            (BOLD_BAND_LO..=BOLD_BAND_HI).contains(&f)
        })
        .collect();
    if ks.len() < n_regions {
        return Err(Error::InvalidInput(format!(
            "{n_t} timepoints at TR {tr}s leave only {} band frequencies for {n_regions} regions",
            ks.len()
        )));
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n_regions);
    for _ in 0..n_regions {
        let amps: Vec<f64> = ks.iter().map(|_| normal(rng)).collect();
        let mut x: Vec<f64> = (0..n_t)
            .map(|t| {
                ks.iter()
                    .zip(&amps)
                    .map(|(&k, a)| a * (PI * k as f64 * (t as f64 + 0.5) / n_t as f64).cos())
                    .sum()
            })
            .collect();
        // Gram–Schmidt against earlier courses (cosines with k >= 1 are already zero-mean)
        for prev in &out {
            let dot: f64 = x.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>() / n_t as f64;
            for (xi, pi) in x.iter_mut().zip(prev) {
                *xi -= dot * pi;
            }
        }
        let z = crate::linalg::standardize(&x)
            .ok_or_else(|| Error::InvalidInput("degenerate latent course".into()))?;
        out.push(z);
    }
    Ok(out)
}

/// Voxel series `τ_r(v) + noise_sigma · white noise` over the subject mask.
pub fn make_bold(subject: &PhantomSubject, spec: &PhantomSpec) -> Result<BoldPhantom> {
    spec.validate()?;
    if spec.n_timepoints < 100 {
        return Err(Error::InvalidInput(format!(
            "BOLD phantom needs >= 100 timepoints, got {}",
            spec.n_timepoints
        )));
    }
    let mut rng = stream(spec.seed, STREAM_BOLD);
    let latent = latent_courses(spec.n_regions, spec.n_timepoints, spec.tr_seconds, &mut rng)?;
    let indices = subject.mask.indices();
    let n_t = spec.n_timepoints;
    let mut data = Vec::with_capacity(indices.len() * n_t);
    for &lin in &indices {
        let r = subject.truth.data()[lin] as usize - 1;
        for t in 0..n_t {
            let noise = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * normal(&mut rng)
            } else {
                0.0
            };
            data.push(latent[r][t] + noise);
        }
    }
    let stack = TimeSeriesStack::new(subject.mask.clone(), n_t, data, spec.tr_seconds)?;
    Ok(BoldPhantom { stack, latent })
}

/// Uniformly distributed unit vector.
fn random_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [normal(rng), normal(rng), normal(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Imperfectly aligned atlas priors: `(intensity, labels)` pairs on the subject grid.
///
/// Each prior is the subject sampled through a rigid translation of exactly
/// `jitter_mm` in a uniformly random direction (nearest neighbour for labels,
/// trilinear for intensities) plus fresh Gaussian intensity noise.
pub fn make_priors(
    subject: &PhantomSubject,
    spec: &PhantomSpec,
    n_priors: usize,
    jitter_mm: f64,
) -> Result<Vec<(Volume, LabelVolume)>> {
    if n_priors == 0 {
        return Err(Error::InvalidInput("n_priors must be >= 1".into()));
    }
    if !(jitter_mm >= 0.0) {
        return Err(Error::InvalidInput("jitter_mm must be >= 0".into()));
    }
    let geom = subject.truth.geom().clone();
    let mut rng = stream(spec.seed, STREAM_PRIORS);
    let mut priors = Vec::with_capacity(n_priors);
    for _ in 0..n_priors {
        let dir = random_direction(&mut rng);
        let shift = dir.map(|d| d * jitter_mm);
        let mut m = *geom.affine.matrix();
        for a in 0..3 {
            m[(a, 3)] -= shift[a];
        }
        let shifted = Geometry::new(geom.dims, geom.spacing, Affine::new(m)?)?;
        let (_, label_data, dict) = resample_nearest(&subject.truth, &shifted).into_parts();
        let labels = LabelVolume::new(geom.clone(), label_data, dict)?;
        let mut intensity = trilinear_resample(&subject.structural, &shifted).into_data();
        // voxels sampled from beyond the grid edge read as background
        for (v, &lin_ok) in intensity.iter_mut().zip(
            (0..geom.n_voxels())
                .map(|lin| {
                    let w = shifted.world(lin);
                    let x = subject.structural.geom().affine.inverse().apply(w);
                    (0..3).all(|a| x[a] >= -1e-9 && x[a] <= (geom.dims[a] - 1) as f64 + 1e-9)
                })
                .collect::<Vec<_>>()
                .iter(),
        ) {
            if !lin_ok {
                *v = 0.1;
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in &mut intensity {
                *v += spec.noise_sigma * normal(&mut rng);
            }
        }
        priors.push((Volume::new(geom.clone(), intensity)?, labels));
    }
    Ok(priors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::pearson;

    fn small(n_regions: usize, dims: usize) -> PhantomSpec {
        PhantomSpec {
            grid_dims: [dims; 3],
            spacing: 1.0,
            n_regions,
            ..Default::default()
        }
    }

    #[test]
    fn two_regions_tile_the_mask() {
        let s = make_truth(&small(2, 32)).unwrap();
        let counts = s.truth.counts();
        assert_eq!(counts.len(), 2);
        assert!(counts.values().all(|&c| c > 0));
        assert_eq!(counts.values().sum::<usize>(), s.mask.count());
        for (l, m) in s.truth.data().iter().zip(s.mask.data()) {
            assert_eq!(*l != 0, *m);
        }
    }

    #[test]
    fn eleven_regions_each_at_least_twenty_voxels() {
        let s = make_truth(&small(11, 64)).unwrap();
        let counts = s.truth.counts();
        assert_eq!(counts.len(), 11);
        assert!(counts.values().all(|&c| c >= 20), "{counts:?}");
        assert_eq!(s.truth.labels()[&7], "Pul");
    }

    #[test]
    fn parcels_are_contiguous() {
        let s = make_truth(&small(11, 48)).unwrap();
        let g = s.truth.geom();
        for id in s.truth.present_ids() {
            let members: Vec<usize> = (0..g.n_voxels()).filter(|&i| s.truth.data()[i] == id).collect();
            let mut seen = vec![false; g.n_voxels()];
            let mut stack = vec![members[0]];
            seen[members[0]] = true;
            let mut reached = 0;
            while let Some(v) = stack.pop() {
                reached += 1;
                let c = g.coords(v);
                for (dx, dy, dz) in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                    let (i, j, k) = (c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz);
                    if g.contains(i, j, k) {
                        let n = g.linear_index(i as usize, j as usize, k as usize);
                        if !seen[n] && s.truth.data()[n] == id {
                            seen[n] = true;
                            stack.push(n);
                        }
                    }
                }
            }
            assert_eq!(reached, members.len(), "region {id} is not 6-connected");
        }
    }

    #[test]
    fn truth_is_deterministic_and_seed_dependent() {
        let a = make_truth(&small(4, 24)).unwrap();
        let b = make_truth(&small(4, 24)).unwrap();
        assert_eq!(a, b);
        let c = make_truth(&PhantomSpec { seed: 9, ..small(4, 24) }).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn tiny_grid_is_rejected() {
        assert!(make_truth(&small(11, 6)).is_err());
        assert!(make_truth(&small(1, 32)).is_err());
    }

    #[test]
    fn b0_volumes_equal_s0_without_noise() {
        let spec = PhantomSpec { grid_dims: [16; 3], n_regions: 3, ..Default::default() };
        let s = make_truth(&spec).unwrap();
        let (dwi, grads) = make_dwi(&s, &spec).unwrap();
        assert_eq!(grads.len(), 67);
        assert_eq!(grads.b0_indices(), vec![0, 1, 2]);
        for t in 0..3 {
            for &lin in &s.mask.indices() {
                assert_eq!(dwi.frame(t)[lin], spec.s0);
            }
        }
    }

    #[test]
    fn isotropic_tensor_attenuates_equally() {
        let d = Tensor::isotropic(MEAN_DIFFUSIVITY);
        let vals: Vec<f64> = hemisphere_directions(64).iter().map(|&g| tensor_signal(1.0, 1000.0, g, &d)).collect();
        assert!(vals.iter().all(|v| (v - vals[0]).abs() < 1e-15));
    }

    #[test]
    fn axial_tensor_attenuation_ratio() {
        let d = Tensor::cylindrical([0.0, 0.0, 1.0], MEAN_DIFFUSIVITY, 0.5);
        let b = 1000.0;
        let ratio = tensor_signal(1.0, b, [0.0, 0.0, 1.0], &d) / tensor_signal(1.0, b, [1.0, 0.0, 0.0], &d);
        let want = (-b * (d.0[(2, 2)] - d.0[(0, 0)])).exp();
        assert!((ratio - want).abs() < 1e-9 * want);
        assert!((d.fa() - 0.5).abs() < 1e-12);
        assert!((d.0.trace() / 3.0 - MEAN_DIFFUSIVITY).abs() < 1e-18);
    }

    #[test]
    fn noiseless_dwi_matches_closed_form_everywhere() {
        let spec = PhantomSpec { grid_dims: [12; 3], n_regions: 4, ..Default::default() };
        let s = make_truth(&spec).unwrap();
        let (dwi, grads) = make_dwi(&s, &spec).unwrap();
        let tensors = region_tensors(&spec);
        for &lin in &s.mask.indices() {
            let d = &tensors[s.truth.data()[lin] as usize - 1];
            for t in 0..grads.len() {
                let want = tensor_signal(spec.s0, grads.bvals()[t], grads.directions()[t], d);
                assert!((dwi.frame(t)[lin] - want).abs() <= 1e-9 * want);
            }
        }
        assert!(tensors.iter().all(|t| (0.2..=0.6).contains(&t.fa())));
    }

    #[test]
    fn too_few_directions_rejected() {
        let spec = PhantomSpec { grid_dims: [12; 3], n_regions: 2, n_directions: 20, ..Default::default() };
        let s = make_truth(&spec).unwrap();
        assert!(make_dwi(&s, &spec).is_err());
    }

    #[test]
    fn bold_correlation_structure_without_noise() {
        let spec = PhantomSpec { grid_dims: [16; 3], n_regions: 2, ..Default::default() };
        let s = make_truth(&spec).unwrap();
        let bold = make_bold(&s, &spec).unwrap();
        let idx = s.mask.indices();
        let region = |v: usize| s.truth.data()[idx[v]];
        let first = (0..idx.len()).find(|&v| region(v) == 1).unwrap();
        let other = (0..idx.len()).find(|&v| region(v) == 2).unwrap();
        for v in 0..idx.len() {
            if region(v) == 1 {
                assert!((pearson(bold.stack.series(first), bold.stack.series(v)) - 1.0).abs() < 1e-12);
            }
        }
        assert!(pearson(bold.stack.series(first), bold.stack.series(other)).abs() < 0.3);
        assert_eq!(make_bold(&s, &spec).unwrap(), bold);
    }

    #[test]
    fn bold_latent_courses_pairwise_decorrelated() {
        let mut rng = stream(3, 0);
        let l = latent_courses(6, 200, 0.7, &mut rng).unwrap();
        for i in 0..6 {
            for j in 0..i {
                assert!(pearson(&l[i], &l[j]).abs() < 0.3);
            }
        }
    }

    #[test]
    fn bold_requires_one_hundred_timepoints() {
        let spec = PhantomSpec { grid_dims: [16; 3], n_regions: 2, n_timepoints: 50, ..Default::default() };
        let s = make_truth(&spec).unwrap();
        assert!(make_bold(&s, &spec).is_err());
    }

    #[test]
    fn zero_jitter_priors_equal_subject() {
        let spec = small(3, 20);
        let s = make_truth(&spec).unwrap();
        let priors = make_priors(&s, &spec, 20, 0.0).unwrap();
        assert_eq!(priors.len(), 20);
        for (img, lab) in &priors {
            assert_eq!(lab, &s.truth);
            assert_eq!(img, &s.structural);
        }
    }
}
