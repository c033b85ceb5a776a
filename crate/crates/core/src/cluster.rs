//! Joint spatial and spectral k-means for the diffusion pipeline.
//!
//! Each masked voxel becomes `f = [p; α·c]`: its world position in mm followed
//! by its SH coefficients scaled by `α`. Plain Euclidean distance on `f` then
//! mixes spatial and spectral proximity. Final seeds come from pooling the
//! centroids of many randomly initialised runs and clustering that pool.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fod::ShField;
use crate::par;
use crate::phantom::stream;
use crate::volume::{cluster_dictionary, LabelId, LabelVolume, Mask};

/// Default coefficient scale.
pub const DEFAULT_ALPHA: f64 = 100.0;

/// Row-major points of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::InvalidInput(format!("{} values do not form rows of {dim}", data.len())));
        }
        Ok(Points { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidInput("rows differ in length".into()));
        }
        Points::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Feature vectors of a field's voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    mask: Mask,
    alpha: f64,
    points: Points,
}

impl FeatureSet {
    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn points(&self) -> &Points {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `f_v = [world position of v; α·c_v]` for every voxel of `field`.
pub fn build_features(field: &ShField, alpha: f64) -> Result<FeatureSet> {
    if field.is_empty() {
        return Err(Error::InvalidInput("cannot cluster an empty field".into()));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidInput(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let nc = field.n_coeffs();
    let dim = 3 + nc;
    let mut data = Vec::with_capacity(field.len() * dim);
    for (row, &lin) in field.indices().iter().enumerate() {
        data.extend_from_slice(&field.geom().world(lin));
        data.extend(field.coeffs(row).iter().map(|c| alpha * c));
    }
    Ok(FeatureSet {
        mask: field.mask().clone(),
        alpha,
        points: Points::new(dim, data)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_restarts: usize,
    pub max_iter: usize,
    /// Relative centroid movement below which Lloyd iterations stop.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 7,
            n_restarts: 5000,
            max_iter: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_restarts == 0 || self.max_iter == 0 {
            return Err(Error::Config("k, n_restarts and max_iter must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Result of one Lloyd run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step, first to last.
    pub history: Vec<f64>,
    pub iterations: usize,
}

/// Nearest centroid of every point (ties to the lower index) and the inertia.
pub fn assign(points: &Points, centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut labels = Vec::with_capacity(points.len());
    let mut inertia = 0.0;
    for i in 0..points.len() {
        let p = points.row(i);
        let mut best = (0, f64::INFINITY);
        for (c, cen) in centroids.iter().enumerate() {
            let d = dist2(p, cen);
            if d < best.1 {
                best = (c, d);
            }
        }
        labels.push(best.0);
        inertia += best.1;
    }
    (labels, inertia)
}

fn update(points: &Points, labels: &[usize], centroids: &mut [Vec<f64>]) -> Vec<usize> {
    let k = centroids.len();
    let dim = points.dim();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    }
    (0..k).filter(|&c| counts[c] == 0).collect()
}

/// Moves each empty cluster onto the point farthest from its own centroid.
fn repair_empty(points: &Points, labels: &mut [usize], centroids: &mut [Vec<f64>], empty: &[usize]) {
    let mut taken = vec![false; points.len()];
    for &c in empty {
        let mut far = (usize::MAX, -1.0);
        for i in 0..points.len() {
            if taken[i] {
                continue;
            }
            let d = dist2(points.row(i), &centroids[labels[i]]);
            if d > far.1 {
                far = (i, d);
            }
        }
        if far.0 == usize::MAX {
            return;
        }
        taken[far.0] = true;
        centroids[c] = points.row(far.0).to_vec();
        labels[far.0] = c;
    }
}

/// Lloyd iterations from `init` until the assignment is stable, the relative
/// centroid movement drops below `tol`, or `max_iter` is reached. The returned
/// assignment is always the nearest-centroid assignment for the returned centroids.
pub fn kmeans_once(points: &Points, init: &[Vec<f64>], max_iter: usize, tol: f64) -> Result<KMeansRun> {
    let k = init.len();
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if k > points.len() {
        return Err(Error::InvalidInput(format!("k = {k} exceeds {} points", points.len())));
    }
    if init.iter().any(|c| c.len() != points.dim()) {
        return Err(Error::InvalidInput("initial centroid dimension mismatch".into()));
    }
    let mut centroids = init.to_vec();
    let (mut labels, inertia) = assign(points, &centroids);
    let mut history = vec![inertia];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let old = centroids.clone();
        let empty = update(points, &labels, &mut centroids);
        if !empty.is_empty() {
            repair_empty(points, &mut labels, &mut centroids, &empty);
        }
        let (new_labels, inertia) = assign(points, &centroids);
        history.push(inertia);
        let moved: f64 = old.iter().zip(&centroids).map(|(a, b)| dist2(a, b)).sum::<f64>().sqrt();
        let scale: f64 = old.iter().map(|a| a.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let stable = new_labels == labels;
        labels = new_labels;
        if stable || moved <= tol * scale.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let inertia = *history.last().expect("at least one assignment");
    Ok(KMeansRun {
        assignment: labels,
        centroids,
        inertia,
        history,
        iterations,
    })
}

/// `k` distinct points chosen uniformly at random as initial centroids.
fn random_init(points: &Points, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    sample(rng, points.len(), k)
        .into_iter()
        .map(|i| points.row(i).to_vec())
        .collect()
}

/// Distinct-valued points, first occurrence kept.
fn distinct_rows(points: &Points) -> Points {
    let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(points.len());
    let mut data = Vec::new();
    for i in 0..points.len() {
        let r = points.row(i);
        if seen.insert(r.iter().map(|v| v.to_bits()).collect()) {
            data.extend_from_slice(r);
        }
    }
    Points::new(points.dim(), data).expect("same dimension")
}

/// Number of random initialisations tried when clustering the pooled centroids.
pub const POOL_INITS: usize = 10;

/// Seeds from `n_restarts` random-init runs.
///
/// The centroids of the runs whose inertia is at or below the median are pooled
/// and clustered (best of [`POOL_INITS`] random inits); that clustering's
/// centroids are returned. With a single restart its centroids are returned directly.
pub fn seed_by_restarts(points: &Points, cfg: &KMeansConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if cfg.k > points.len() {
        return Err(Error::InvalidInput(format!("k = {} exceeds {} points", cfg.k, points.len())));
    }
    let distinct = distinct_rows(points);
    if distinct.len() < cfg.k {
        return Err(Error::InvalidInput(format!(
            "only {} distinct feature vectors for k = {}",
            distinct.len(),
            cfg.k
        )));
    }
    let runs: Vec<Result<KMeansRun>> = par::map_range(cfg.n_restarts, |r| {
        let mut rng = stream(cfg.seed, 1 + r as u64);
        let init = random_init(&distinct, cfg.k, &mut rng);
        kmeans_once(points, &init, cfg.max_iter, cfg.tol)
    });
    let runs: Vec<KMeansRun> = runs.into_iter().collect::<Result<_>>()?;
    if cfg.n_restarts == 1 {
        return Ok(runs.into_iter().next().expect("one run").centroids);
    }
    // runs stuck in poor local optima park centroids between true clusters;
    // only the better half (inertia at or below the median) is pooled
    let mut inertias: Vec<f64> = runs.iter().map(|r| r.inertia).collect();
    inertias.sort_by(f64::total_cmp);
    let median = inertias[(inertias.len() - 1) / 2];
    let runs: Vec<Vec<Vec<f64>>> = runs
        .into_iter()
        .filter(|r| r.inertia <= median)
        .map(|r| r.centroids)
        .collect();
    let pool = Points::from_rows(&runs.concat())?;
    let pool_distinct = distinct_rows(&pool);
    if pool_distinct.len() < cfg.k {
        // every restart converged to the same fewer-than-k distinct centroids
        return Ok(runs.into_iter().next().expect("one run"));
    }
    let mut rng = stream(cfg.seed, 0);
    let mut best: Option<KMeansRun> = None;
    for _ in 0..POOL_INITS {
        let init = random_init(&pool_distinct, cfg.k, &mut rng);
        let run = kmeans_once(&pool, &init, cfg.max_iter, cfg.tol)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("POOL_INITS >= 1").centroids)
}

/// Clustering of a diffusion field.
#[derive(Debug, Clone, PartialEq)]
pub struct DtiSegmentation {
    pub labels: LabelVolume,
    /// Centroid of label id `i + 1` at index `i`.
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

/// Features → pooled-restart seeds → final k-means → labels `1..=k`.
///
/// Ids are ordered by descending cluster size, ties by the lower centroid x.
pub fn segment_dti(field: &ShField, cfg: &KMeansConfig, alpha: f64) -> Result<DtiSegmentation> {
    let features = build_features(field, alpha)?;
    let points = features.points();
    let seeds = seed_by_restarts(points, cfg)?;
    let run = kmeans_once(points, &seeds, cfg.max_iter, cfg.tol)?;
    let k = run.centroids.len();
    let mut sizes = vec![0usize; k];
    for &l in &run.assignment {
        sizes[l] += 1;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        sizes[b]
            .cmp(&sizes[a])
            .then(run.centroids[a][0].total_cmp(&run.centroids[b][0]))
            .then(a.cmp(&b))
    });
    let mut id_of = vec![0 as LabelId; k];
    for (rank, &c) in order.iter().enumerate() {
        id_of[c] = rank as LabelId + 1;
    }
    let geom = field.geom().clone();
    let mut data = vec![0 as LabelId; geom.n_voxels()];
    for (&lin, &l) in field.indices().iter().zip(&run.assignment) {
        data[lin] = id_of[l];
    }
    let names = cluster_dictionary(k);
    Ok(DtiSegmentation {
        labels: LabelVolume::new(geom, data, names)?,
        centroids: order.iter().map(|&c| run.centroids[c].clone()).collect(),
        inertia: run.inertia,
        iterations: run.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use rand::{Rng, SeedableRng};

    fn pts(rows: &[[f64; 2]]) -> Points {
        Points::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn field(dims: [usize; 3], coeffs: impl Fn([usize; 3]) -> Vec<f64>) -> ShField {
        let geom = Geometry::with_spacing(dims, [1.0; 3]).unwrap();
        let mask = Mask::full(geom.clone());
        let nc = coeffs([0, 0, 0]).len();
        let data: Vec<f64> = (0..geom.n_voxels()).flat_map(|lin| coeffs(geom.coords(lin))).collect();
        ShField::new(mask, nc, data).unwrap()
    }

    #[test]
    fn feature_metric_decomposes() {
        let f = field([2, 1, 1], |c| vec![if c[0] == 0 { 0.0 } else { 0.05 }, 0.0]);
        let fs = build_features(&f, 100.0).unwrap();
        let d = dist2(fs.points().row(0), fs.points().row(1)).sqrt();
        assert!((d - (1.0f64 + 25.0).sqrt()).abs() < 1e-12);
        let fs0 = build_features(&f, 0.0).unwrap();
        assert_eq!(&fs0.points().row(1)[..3], &[1.0, 0.0, 0.0]);
        assert!(fs0.points().row(1)[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_mm_and_coefficient_gap_give_sqrt_34() {
        let geom = Geometry::with_spacing([4, 1, 1], [1.0; 3]).unwrap();
        let mut m = vec![false; 4];
        m[0] = true;
        m[3] = true;
        let f = ShField::new(Mask::new(geom, m).unwrap(), 1, vec![0.0, 0.05]).unwrap();
        let fs = build_features(&f, 100.0).unwrap();
        let d = dist2(fs.points().row(0), fs.points().row(1));
        assert!((d - 34.0).abs() < 1e-9);
    }

    #[test]
    fn k1_centroid_is_mean() {
        let p = pts(&[[0.0, 0.0], [2.0, 0.0], [4.0, 6.0]]);
        let run = kmeans_once(&p, &[vec![0.0, 0.0]], 50, 1e-9).unwrap();
        assert_eq!(run.assignment, vec![0, 0, 0]);
        assert!((run.centroids[0][0] - 2.0).abs() < 1e-12 && (run.centroids[0][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn k_larger_than_n_rejected() {
        let p = pts(&[[0.0, 0.0]]);
        assert!(kmeans_once(&p, &[vec![0.0, 0.0], vec![1.0, 1.0]], 10, 0.0).is_err());
    }

    #[test]
    fn inertia_never_increases_and_fixed_point() {
        let mut rng = stream(4, 0);
        let rows: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.random::<f64>(), rng.random::<f64>() * 3.0]).collect();
        let p = Points::from_rows(&rows).unwrap();
        for s in 0..20 {
            let mut r = stream(s, 9);
            let init = random_init(&p, 5, &mut r);
            let run = kmeans_once(&p, &init, 300, 0.0).unwrap();
            for w in run.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * w[0]);
            }
            let (again, _) = assign(&p, &run.centroids);
            assert_eq!(again, run.assignment);
        }
    }

    #[test]
    fn empty_cluster_is_repaired() {
        let p = pts(&[[0.0, 0.0], [0.1, 0.0], [10.0, 0.0]]);
        // the third centroid is far from everything and starts empty
        let init = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![100.0, 100.0]];
        let run = kmeans_once(&p, &init, 10, 0.0).unwrap();
        let mut used = run.assignment.clone();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), 3);
    }

    #[test]
    fn separated_blobs_split() {
        let f = field([60, 2, 2], |_| vec![1.0, 2.0]);
        let mut mask = vec![false; 240];
        let g = f.geom().clone();
        for lin in 0..240 {
            let x = g.coords(lin)[0];
            mask[lin] = x < 5 || x >= 55;
        }
        let mask = Mask::new(g.clone(), mask).unwrap();
        let nc = mask.count();
        let f = ShField::new(mask, 2, [1.0, 2.0].repeat(nc)).unwrap();
        let cfg = KMeansConfig { k: 2, n_restarts: 10, ..Default::default() };
        let seg = segment_dti(&f, &cfg, 100.0).unwrap();
        for lin in f.indices() {
            let x = g.coords(*lin)[0];
            let l = seg.labels.data()[*lin];
            // equal sizes: id 1 is the cluster with the lower centroid x
            assert_eq!(l, if x < 5 { 1 } else { 2 });
        }
    }

    #[test]
    fn interleaved_coefficient_classes_win_over_space() {
        // checkerboard classes; α·Δc = 1000 vs spatial diameter ≈ 17
        let f = field([10, 10, 1], |c| vec![if (c[0] + c[1]) % 2 == 0 { 0.0 } else { 10.0 }]);
        let cfg = KMeansConfig { k: 2, n_restarts: 20, ..Default::default() };
        let seg = segment_dti(&f, &cfg, 100.0).unwrap();
        let g = f.geom();
        let first = seg.labels.data()[0];
        for lin in 0..g.n_voxels() {
            let c = g.coords(lin);
            assert_eq!(seg.labels.data()[lin] == first, (c[0] + c[1]) % 2 == 0);
        }
    }

    #[test]
    fn single_restart_seeds_are_that_run() {
        let p = pts(&[[0.0, 0.0], [1.0, 0.0], [9.0, 9.0], [10.0, 9.0], [5.0, 1.0]]);
        let cfg = KMeansConfig { k: 2, n_restarts: 1, seed: 3, ..Default::default() };
        let seeds = seed_by_restarts(&p, &cfg).unwrap();
        let mut rng = stream(3, 1);
        let init = random_init(&distinct_rows(&p), 2, &mut rng);
        let run = kmeans_once(&p, &init, cfg.max_iter, cfg.tol).unwrap();
        assert_eq!(seeds, run.centroids);
        assert_eq!(seed_by_restarts(&p, &cfg).unwrap(), seeds);
    }

    #[test]
    fn pooled_seeds_find_three_centres() {
        let centres = [[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut rows = Vec::new();
        for c in &centres {
            for _ in 0..100 {
                rows.push(vec![c[0] + rng.random::<f64>() - 0.5, c[1] + rng.random::<f64>() - 0.5]);
            }
        }
        let p = Points::from_rows(&rows).unwrap();
        let cfg = KMeansConfig { k: 3, n_restarts: 50, seed: 1, ..Default::default() };
        let seeds = seed_by_restarts(&p, &cfg).unwrap();
        for c in &centres {
            let near = seeds.iter().map(|s| dist2(s, c).sqrt()).fold(f64::INFINITY, f64::min);
            assert!(near < 0.01 * 20.0, "{seeds:?}");
        }
    }

    #[test]
    fn uniform_scaling_keeps_partition() {
        let mut rng = stream(11, 0);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * 8.0).collect()).collect();
        let (a, b) = (Points::from_rows(&rows).unwrap(), Points::from_rows(&scaled).unwrap());
        let init: Vec<Vec<f64>> = rows[..4].to_vec();
        let init_s: Vec<Vec<f64>> = scaled[..4].to_vec();
        let ra = kmeans_once(&a, &init, 100, 0.0).unwrap();
        let rb = kmeans_once(&b, &init_s, 100, 0.0).unwrap();
        assert_eq!(ra.assignment, rb.assignment);
    }

    #[test]
    fn k1_segmentation_is_whole_mask() {
        let f = field([3, 3, 3], |c| vec![c[0] as f64]);
        let cfg = KMeansConfig { k: 1, n_restarts: 3, ..Default::default() };
        let seg = segment_dti(&f, &cfg, 100.0).unwrap();
        assert!(seg.labels.data().iter().all(|&l| l == 1));
    }
}
