//! Agreement metrics and group summaries.
//!
//! Dice and VSI per label, probability atlases (per-label frequency volumes plus
//! a maximum-probability labelling), centroids and their spread across subjects,
//! overlap-based regrouping of one label set onto another, optimal one-to-one
//! label matching, and the mean ± sd summary tables with their CSV form.
//!
//! Every tie (maximum probability, regrouping, matching order) resolves to the
//! lower label id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelId, LabelVolume, Mask, Volume};

/// Voxel counts behind Dice and VSI for one label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlapCounts {
    pub a: u64,
    pub b: u64,
    pub both: u64,
}

impl OverlapCounts {
    pub fn of(a: &LabelVolume, b: &LabelVolume, label: LabelId) -> Result<Self> {
        a.geom().ensure_same(b.geom(), "overlap operands")?;
        let mut c = OverlapCounts { a: 0, b: 0, both: 0 };
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let (ia, ib) = (x == label, y == label);
            c.a += ia as u64;
            c.b += ib as u64;
            c.both += (ia && ib) as u64;
        }
        Ok(c)
    }

    /// Dice as an exact fraction `(2|A∩B|, |A|+|B|)`; `None` when both are empty.
    pub fn dice_ratio(&self) -> Option<(u64, u64)> {
        let den = self.a + self.b;
        (den > 0).then_some((2 * self.both, den))
    }

    /// VSI as an exact fraction `(|A|+|B| − ||A|−|B||, |A|+|B|)`; `None` when both are empty.
    pub fn vsi_ratio(&self) -> Option<(u64, u64)> {
        let den = self.a + self.b;
        (den > 0).then_some((den - self.a.abs_diff(self.b), den))
    }

    pub fn dice(&self) -> Option<f64> {
        self.dice_ratio().map(|(n, d)| n as f64 / d as f64)
    }

    pub fn vsi(&self) -> Option<f64> {
        self.vsi_ratio().map(|(n, d)| n as f64 / d as f64)
    }
}

/// `2|A∩B| / (|A|+|B|)`, missing when the label is absent from both.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: LabelId) -> Result<Option<f64>> {
    Ok(OverlapCounts::of(a, b, label)?.dice())
}

/// `1 − ||A|−|B|| / (|A|+|B|)`, missing when the label is absent from both.
pub fn vsi(a: &LabelVolume, b: &LabelVolume, label: LabelId) -> Result<Option<f64>> {
    Ok(OverlapCounts::of(a, b, label)?.vsi())
}

/// Dice and VSI of one nucleus for one comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id: LabelId,
    pub dice: Option<f64>,
    pub vsi: Option<f64>,
}

/// Scores for every id in `ids`.
pub fn pair_scores(a: &LabelVolume, b: &LabelVolume, ids: &[LabelId]) -> Result<Vec<PairScore>> {
    ids.iter()
        .map(|&id| {
            let c = OverlapCounts::of(a, b, id)?;
            Ok(PairScore {
                id,
                dice: c.dice(),
                vsi: c.vsi(),
            })
        })
        .collect()
}

/// Per-label frequencies across subjects and the modal labelling.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityAtlas {
    geom: Geometry,
    labels: BTreeMap<LabelId, String>,
    n_subjects: usize,
    counts: BTreeMap<LabelId, Vec<u32>>,
    max_prob: LabelVolume,
}

impl ProbabilityAtlas {
    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn geom(&self) -> &Geometry {
        &self.geom
    }

    /// Ids that occur in at least one subject.
    pub fn ids(&self) -> Vec<LabelId> {
        self.counts.keys().copied().collect()
    }

    /// `p_ℓ(v)`: fraction of subjects carrying `label` at linear index `lin`.
    pub fn probability(&self, label: LabelId, lin: usize) -> f64 {
        self.counts
            .get(&label)
            .map_or(0.0, |c| c[lin] as f64 / self.n_subjects as f64)
    }

    /// Number of subjects carrying `label` at linear index `lin`.
    pub fn count(&self, label: LabelId, lin: usize) -> u32 {
        self.counts.get(&label).map_or(0, |c| c[lin])
    }

    /// Frequency volume of one label (zeros if it never occurs).
    pub fn frequency_volume(&self, label: LabelId) -> Volume {
        let n = self.geom.n_voxels();
        let data = (0..n).map(|lin| self.probability(label, lin)).collect();
        Volume::new(self.geom.clone(), data).expect("sized from geometry")
    }

    pub fn max_prob(&self) -> &LabelVolume {
        &self.max_prob
    }

    pub fn labels(&self) -> &BTreeMap<LabelId, String> {
        &self.labels
    }
}

/// Builds per-label frequencies and the maximum-probability map of `segs`.
pub fn probability_atlas(segs: &[LabelVolume]) -> Result<ProbabilityAtlas> {
    let first = segs
        .first()
        .ok_or_else(|| Error::InvalidInput("probability atlas needs at least one segmentation".into()))?;
    let geom = first.geom().clone();
    for (i, s) in segs.iter().enumerate().skip(1) {
        geom.ensure_same(s.geom(), &format!("segmentation {i} vs segmentation 0"))?;
        if s.labels() != first.labels() {
            return Err(Error::InvalidInput(format!(
                "segmentation {i} has a different label dictionary"
            )));
        }
    }
    let n = geom.n_voxels();
    let mut counts: BTreeMap<LabelId, Vec<u32>> = BTreeMap::new();
    for s in segs {
        for (lin, &l) in s.data().iter().enumerate() {
            if l != 0 {
                counts.entry(l).or_insert_with(|| vec![0; n])[lin] += 1;
            }
        }
    }
    let mut data = vec![0 as LabelId; n];
    for (lin, out) in data.iter_mut().enumerate() {
        let mut best = (0 as LabelId, 0u32);
        // ascending ids with strict comparison keep the lower id on ties
        for (&id, c) in &counts {
            if c[lin] > best.1 {
                best = (id, c[lin]);
            }
        }
        *out = best.0;
    }
    let max_prob = LabelVolume::new(geom.clone(), data, first.labels().clone())?;
    Ok(ProbabilityAtlas {
        geom,
        labels: first.labels().clone(),
        n_subjects: segs.len(),
        counts,
        max_prob,
    })
}

/// Unweighted mean world position of each label's voxel centres.
pub fn centroids(seg: &LabelVolume) -> BTreeMap<LabelId, [f64; 3]> {
    let mut acc: BTreeMap<LabelId, ([f64; 3], usize)> = BTreeMap::new();
    let geom = seg.geom();
    for (lin, &l) in seg.data().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let w = geom.world(lin);
        let e = acc.entry(l).or_insert(([0.0; 3], 0));
        for a in 0..3 {
            e.0[a] += w[a];
        }
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(l, (s, n))| (l, s.map(|v| v / n as f64)))
        .collect()
}

/// Mean position and RMS distance to it of one label's per-subject centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSpread {
    pub mean: [f64; 3],
    pub rms_mm: f64,
    pub n_subjects: usize,
}

/// Per-label spread of centroids across subjects; labels found in fewer than two
/// subjects are omitted with a warning.
pub fn centroid_scatter(segs: &[LabelVolume]) -> Result<BTreeMap<LabelId, CentroidSpread>> {
    if segs.len() < 2 {
        return Err(Error::InvalidInput("centroid scatter needs at least two segmentations".into()));
    }
    let mut per_label: BTreeMap<LabelId, Vec<[f64; 3]>> = BTreeMap::new();
    for s in segs {
        for (l, c) in centroids(s) {
            per_label.entry(l).or_default().push(c);
        }
    }
    let mut out = BTreeMap::new();
    for (l, cs) in per_label {
        if cs.len() < 2 {
            log::warn!("label {l} present in only one segmentation; omitted from centroid scatter");
            continue;
        }
        let n = cs.len() as f64;
        let mean = [0, 1, 2].map(|a| cs.iter().map(|c| c[a]).sum::<f64>() / n);
        let ms = cs
            .iter()
            .map(|c| (0..3).map(|a| (c[a] - mean[a]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        out.insert(
            l,
            CentroidSpread {
                mean,
                rms_mm: ms.sqrt(),
                n_subjects: cs.len(),
            },
        );
    }
    Ok(out)
}

/// Source-to-reference label mapping and the mapped source segmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct Regrouping {
    /// Source id → reference id (0 when the source label overlaps no reference label).
    pub mapping: BTreeMap<LabelId, LabelId>,
    pub segs: Vec<LabelVolume>,
}

/// Maps each source label to the reference label it overlaps most in the two
/// maximum-probability maps, then applies that mapping to every source segmentation.
pub fn regroup(source: &[LabelVolume], reference: &[LabelVolume]) -> Result<Regrouping> {
    let src = probability_atlas(source)?;
    let refr = probability_atlas(reference)?;
    src.geom()
        .ensure_same(refr.geom(), "regroup source vs reference")?;
    let mut overlap: BTreeMap<LabelId, BTreeMap<LabelId, u64>> = BTreeMap::new();
    for (&s, &r) in src.max_prob().data().iter().zip(refr.max_prob().data()) {
        if s != 0 && r != 0 {
            *overlap.entry(s).or_default().entry(r).or_insert(0) += 1;
        }
    }
    let mut source_ids: BTreeSet<LabelId> = src.labels().keys().copied().collect();
    source_ids.extend(src.ids());
    let mapping: BTreeMap<LabelId, LabelId> = source_ids
        .into_iter()
        .map(|j| {
            let mut best = (0 as LabelId, 0u64);
            if let Some(row) = overlap.get(&j) {
                for (&l, &c) in row {
                    if c > best.1 {
                        best = (l, c);
                    }
                }
            }
            (j, best.0)
        })
        .collect();
    let segs = source
        .iter()
        .map(|s| apply_mapping(s, &mapping, refr.labels()))
        .collect::<Result<_>>()?;
    Ok(Regrouping { mapping, segs })
}

/// Relabels `seg` through `mapping` (unmapped ids become background).
pub fn apply_mapping(
    seg: &LabelVolume,
    mapping: &BTreeMap<LabelId, LabelId>,
    labels: &BTreeMap<LabelId, String>,
) -> Result<LabelVolume> {
    let data = seg
        .data()
        .iter()
        .map(|l| if *l == 0 { 0 } else { mapping.get(l).copied().unwrap_or(0) })
        .collect();
    LabelVolume::new(seg.geom().clone(), data, labels.clone())
}

/// Minimum-cost assignment on a square cost matrix (Hungarian method, O(n³)).
///
/// Returns `assignment[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(cost.iter().all(|r| r.len() == n), "cost matrix must be square");
    // potentials u (rows), v (columns); p[j] = row matched to column j (1-based, 0 = none)
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// One-to-one correspondence between the labels of two segmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatching {
    /// `(label in a, label in b, dice)`, ordered by the label in `a`.
    pub pairs: Vec<(LabelId, LabelId, f64)>,
    pub unmatched_a: Vec<LabelId>,
    pub unmatched_b: Vec<LabelId>,
    pub total_dice: f64,
}

impl LabelMatching {
    pub fn map_a_to_b(&self) -> BTreeMap<LabelId, LabelId> {
        self.pairs.iter().map(|&(a, b, _)| (a, b)).collect()
    }
}

/// Dice matrix between the present labels of `a` (rows) and `b` (columns).
pub fn dice_matrix(a: &LabelVolume, b: &LabelVolume) -> Result<(Vec<LabelId>, Vec<LabelId>, Vec<Vec<f64>>)> {
    a.geom().ensure_same(b.geom(), "label matching operands")?;
    let ca = a.counts();
    let cb = b.counts();
    let ia: Vec<LabelId> = ca.keys().copied().collect();
    let ib: Vec<LabelId> = cb.keys().copied().collect();
    let pos_a: BTreeMap<LabelId, usize> = ia.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let pos_b: BTreeMap<LabelId, usize> = ib.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut inter = vec![vec![0u64; ib.len()]; ia.len()];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        if x != 0 && y != 0 {
            inter[pos_a[&x]][pos_b[&y]] += 1;
        }
    }
    let m = ia
        .iter()
        .enumerate()
        .map(|(r, la)| {
            ib.iter()
                .enumerate()
                .map(|(c, lb)| 2.0 * inter[r][c] as f64 / (ca[la] + cb[lb]) as f64)
                .collect()
        })
        .collect();
    Ok((ia, ib, m))
}

/// Hungarian matching that maximizes the summed pairwise Dice.
///
/// Pairs with zero overlap are not reported as matches; their labels are listed
/// as unmatched instead.
pub fn match_labels(a: &LabelVolume, b: &LabelVolume) -> Result<LabelMatching> {
    let (ia, ib, m) = dice_matrix(a, b)?;
    let n = ia.len().max(ib.len());
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            (0..n)
                .map(|c| if r < ia.len() && c < ib.len() { -m[r][c] } else { 0.0 })
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    let mut pairs = Vec::new();
    let mut used_b = vec![false; ib.len()];
    for (r, &c) in assignment.iter().enumerate() {
        if r < ia.len() && c < ib.len() && m[r][c] > 0.0 {
            pairs.push((ia[r], ib[c], m[r][c]));
            used_b[c] = true;
        }
    }
    let matched_a: BTreeSet<LabelId> = pairs.iter().map(|p| p.0).collect();
    let total_dice = pairs.iter().map(|p| p.2).sum();
    Ok(LabelMatching {
        unmatched_a: ia.iter().copied().filter(|l| !matched_a.contains(l)).collect(),
        unmatched_b: ib.iter().zip(&used_b).filter(|(_, &u)| !u).map(|(&l, _)| l).collect(),
        pairs,
        total_dice,
    })
}

/// Mean over the labels of `truth` of the Dice achieved by their Hungarian
/// partner in `estimate` (zero for unmatched truth labels).
pub fn matched_mean_dice(truth: &LabelVolume, estimate: &LabelVolume) -> Result<f64> {
    let m = match_labels(truth, estimate)?;
    let n = truth.present_ids().len();
    if n == 0 {
        return Err(Error::InvalidInput("truth has no labels".into()));
    }
    Ok(m.total_dice / n as f64)
}

/// Hemisphere of a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    L,
    R,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::L => "L",
            Side::R => "R",
        })
    }
}

/// Splits a mask at the world-x plane through its centroid: `x < plane` is left.
pub fn hemisphere_masks(mask: &Mask) -> (Mask, Mask) {
    let geom = mask.geom();
    let idx = mask.indices();
    let plane = if idx.is_empty() {
        0.0
    } else {
        idx.iter().map(|&l| geom.world(l)[0]).sum::<f64>() / idx.len() as f64
    };
    let left: Vec<bool> = (0..geom.n_voxels())
        .map(|l| mask.get(l) && geom.world(l)[0] < plane)
        .collect();
    let right: Vec<bool> = (0..geom.n_voxels())
        .map(|l| mask.get(l) && !left[l])
        .collect();
    (
        Mask::new(geom.clone(), left).expect("same grid"),
        Mask::new(geom.clone(), right).expect("same grid"),
    )
}

/// Labels of `seg` inside `region`, background elsewhere.
pub fn restrict(seg: &LabelVolume, region: &Mask) -> Result<LabelVolume> {
    seg.geom().ensure_same(region.geom(), "restriction mask")?;
    let data = seg
        .data()
        .iter()
        .zip(region.data())
        .map(|(&l, &m)| if m { l } else { 0 })
        .collect();
    LabelVolume::new(seg.geom().clone(), data, seg.labels().clone())
}

/// One subject-side worth of scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub subject: String,
    pub side: Side,
    pub scores: Vec<PairScore>,
}

/// Mean and sample standard deviation (divisor n − 1) of the present values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Summary::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (n > 1).then(|| {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Summary { mean: Some(mean), sd }
    }
}

/// One row of a summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub nucleus: String,
    pub dice_l: Summary,
    pub dice_r: Summary,
    pub vsi_l: Summary,
    pub vsi_r: Summary,
    /// Subjects contributing at least one present score to the row.
    pub n: usize,
}

/// Mean ± sd Dice and VSI per nucleus and side.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<TableRow>,
}

/// Column names of the CSV form.
pub const TABLE_HEADER: [&str; 10] = [
    "nucleus",
    "dice_L_mean",
    "dice_L_sd",
    "dice_R_mean",
    "dice_R_sd",
    "vsi_L_mean",
    "vsi_L_sd",
    "vsi_R_mean",
    "vsi_R_sd",
    "n",
];

/// Decimal places written to CSV.
pub const TABLE_DECIMALS: usize = 2;

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.prec$}", prec = TABLE_DECIMALS))
}

fn parse_cell(s: &str, column: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    f64::from_str(s)
        .map(Some)
        .map_err(|e| Error::Csv(format!("column {column}: {s:?}: {e}")))
}

impl MetricsTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TABLE_HEADER).map_err(|e| Error::Csv(e.to_string()))?;
        for r in &self.rows {
            let rec = [
                r.nucleus.clone(),
                fmt_cell(r.dice_l.mean),
                fmt_cell(r.dice_l.sd),
                fmt_cell(r.dice_r.mean),
                fmt_cell(r.dice_r.sd),
                fmt_cell(r.vsi_l.mean),
                fmt_cell(r.vsi_l.sd),
                fmt_cell(r.vsi_r.mean),
                fmt_cell(r.vsi_r.sd),
                r.n.to_string(),
            ];
            w.write_record(&rec).map_err(|e| Error::Csv(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
    }

    /// Parses the CSV form; the header must match [`TABLE_HEADER`] exactly.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
        if header.iter().ne(TABLE_HEADER.iter().copied()) {
            return Err(Error::Csv(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            if rec.len() != TABLE_HEADER.len() {
                return Err(Error::Csv(format!("row with {} fields", rec.len())));
            }
            let cell = |i: usize| parse_cell(&rec[i], TABLE_HEADER[i]);
            let summary = |i: usize| -> Result<Summary> {
                Ok(Summary {
                    mean: cell(i)?,
                    sd: cell(i + 1)?,
                })
            };
            rows.push(TableRow {
                nucleus: rec[0].to_string(),
                dice_l: summary(1)?,
                dice_r: summary(3)?,
                vsi_l: summary(5)?,
                vsi_r: summary(7)?,
                n: rec[9]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Csv(format!("column n: {e}")))?,
            });
        }
        Ok(MetricsTable { rows })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Summarizes score records per nucleus and side.
///
/// Rows cover every id in `names`, ordered by descending `reference_volume`
/// (ids without a volume last, then ascending id).
pub fn emit_table(
    records: &[ScoreRecord],
    names: &BTreeMap<LabelId, String>,
    reference_volume: &BTreeMap<LabelId, f64>,
) -> Result<MetricsTable> {
    if records.is_empty() {
        return Err(Error::InvalidInput("summary table needs at least one subject".into()));
    }
    let mut ids: Vec<LabelId> = names.keys().copied().collect();
    ids.sort_by(|a, b| {
        let va = reference_volume.get(a).copied().unwrap_or(f64::NEG_INFINITY);
        let vb = reference_volume.get(b).copied().unwrap_or(f64::NEG_INFINITY);
        vb.total_cmp(&va).then(a.cmp(b))
    });
    let rows = ids
        .into_iter()
        .map(|id| {
            let mut cols: BTreeMap<(bool, Side), Vec<f64>> = BTreeMap::new();
            let mut subjects: BTreeSet<&str> = BTreeSet::new();
            for rec in records {
                for s in rec.scores.iter().filter(|s| s.id == id) {
                    if let Some(d) = s.dice {
                        cols.entry((true, rec.side)).or_default().push(d);
                        subjects.insert(&rec.subject);
                    }
                    if let Some(v) = s.vsi {
                        cols.entry((false, rec.side)).or_default().push(v);
                        subjects.insert(&rec.subject);
                    }
                }
            }
            let get = |k: (bool, Side)| Summary::of(cols.get(&k).map_or(&[][..], |v| &v[..]));
            TableRow {
                nucleus: names[&id].clone(),
                dice_l: get((true, Side::L)),
                dice_r: get((true, Side::R)),
                vsi_l: get((false, Side::L)),
                vsi_r: get((false, Side::R)),
                n: subjects.len(),
            }
        })
        .collect();
    Ok(MetricsTable { rows })
}

/// Fixed 12-entry palette: background then eleven label colours (ids wrap).
pub const PALETTE: [[u8; 3]; 12] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
];

pub fn palette_color(id: LabelId) -> [u8; 3] {
    if id == 0 {
        PALETTE[0]
    } else {
        PALETTE[1 + (id as usize - 1) % (PALETTE.len() - 1)]
    }
}

/// Axial, coronal and sagittal mid-slices side by side, as RGB rows.
fn triplanar(dims: [usize; 3], pixel: impl Fn(usize, usize, usize) -> [u8; 3]) -> (u32, u32, Vec<u8>) {
    let [nx, ny, nz] = dims;
    let (cx, cy, cz) = (nx / 2, ny / 2, nz / 2);
    let width = nx + nx + ny;
    let height = ny.max(nz);
    let mut img = vec![0u8; width * height * 3];
    let mut put = |x: usize, y: usize, c: [u8; 3]| {
        let o = (y * width + x) * 3;
        img[o..o + 3].copy_from_slice(&c);
    };
    // rows run top-down, so flip the vertical axis of each panel
    for j in 0..ny {
        for i in 0..nx {
            put(i, ny - 1 - j, pixel(i, j, cz));
        }
    }
    for k in 0..nz {
        for i in 0..nx {
            put(nx + i, nz - 1 - k, pixel(i, cy, k));
        }
    }
    for k in 0..nz {
        for j in 0..ny {
            put(2 * nx + j, nz - 1 - k, pixel(cx, j, k));
        }
    }
    (width as u32, height as u32, img)
}

fn write_png(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_image_data(rgb)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.finish().map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Tri-planar PNG of a labelling in palette colours.
pub fn render_labels(seg: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let g = seg.geom();
    let (w, h, img) = triplanar(g.dims, |i, j, k| palette_color(seg.data()[g.linear_index(i, j, k)]));
    write_png(path.as_ref(), w, h, &img)
}

/// Tri-planar PNG of a probability atlas: palette colours blended by frequency.
pub fn render_weighted(atlas: &ProbabilityAtlas, path: impl AsRef<Path>) -> Result<()> {
    let g = atlas.geom();
    let ids = atlas.ids();
    let (w, h, img) = triplanar(g.dims, |i, j, k| {
        let lin = g.linear_index(i, j, k);
        let mut rgb = [0.0f64; 3];
        for &id in &ids {
            let p = atlas.probability(id, lin);
            let c = palette_color(id);
            for a in 0..3 {
                rgb[a] += p * c[a] as f64;
            }
        }
        rgb.map(|v| v.round().clamp(0.0, 255.0) as u8)
    });
    write_png(path.as_ref(), w, h, &img)
}
