//! Multi-atlas label fusion with per-voxel inverse patch-MSE weighting.
//!
//! Every prior is assumed to be registered to the target grid already. At each
//! masked voxel `v`, prior `p` votes for its own label with weight
//! `1 / (MSE_patch(target, prior_p, v)^β + ε)`; the label with the largest
//! summed weight wins, ties going to the lower id.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{LabelId, LabelVolume, Mask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Patch half-width in voxels (1 gives a 3×3×3 patch).
    pub patch_radius: usize,
    /// Exponent β applied to the patch MSE.
    pub weight_exponent: f64,
    pub epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            patch_radius: 1,
            weight_exponent: 2.0,
            epsilon: 1e-6,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight_exponent > 0.0) {
            return Err(Error::Config(format!("weight_exponent must be > 0, got {}", self.weight_exponent)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// A registered atlas: intensity image and its manual labels on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasPrior {
    intensity: Volume,
    labels: LabelVolume,
}

impl AtlasPrior {
    pub fn new(intensity: Volume, labels: LabelVolume) -> Result<Self> {
        if intensity.is_4d() {
            return Err(Error::InvalidInput("prior intensity must be 3D".into()));
        }
        intensity.geom().ensure_same(labels.geom(), "prior intensity vs labels")?;
        Ok(AtlasPrior { intensity, labels })
    }

    pub fn intensity(&self) -> &Volume {
        &self.intensity
    }

    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }
}

/// Mean squared difference over the `(2r+1)³` patch around `center`, clipped at the grid bounds.
pub fn patch_mse(a: &Volume, b: &Volume, center: [usize; 3], radius: usize) -> Result<f64> {
    a.geom().ensure_same(b.geom(), "patch_mse operands")?;
    let d = a.geom().dims;
    if (0..3).any(|ax| center[ax] >= d[ax]) {
        return Err(Error::InvalidInput(format!("patch center {center:?} outside grid {d:?}")));
    }
    let lo = [0, 1, 2].map(|ax| center[ax].saturating_sub(radius));
    let hi = [0, 1, 2].map(|ax| (center[ax] + radius).min(d[ax] - 1));
    let (mut sum, mut count) = (0.0, 0usize);
    for k in lo[2]..=hi[2] {
        for j in lo[1]..=hi[1] {
            for i in lo[0]..=hi[0] {
                let diff = a.get(i, j, k) - b.get(i, j, k);
                sum += diff * diff;
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Box sum of `field` along one axis with half-width `r`, clipped at the bounds.
fn box_sum_axis(field: &[f64], dims: [usize; 3], axis: usize, r: usize) -> Vec<f64> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let len = dims[axis];
    let mut out = vec![0.0; field.len()];
    let mut prefix = vec![0.0; len + 1];
    for base in 0..field.len() {
        let pos = (base / stride) % len;
        if pos != 0 {
            continue;
        }
        for p in 0..len {
            prefix[p + 1] = prefix[p] + field[base + p * stride];
        }
        for p in 0..len {
            let lo = p.saturating_sub(r);
            let hi = (p + r).min(len - 1);
            out[base + p * stride] = prefix[hi + 1] - prefix[lo];
        }
    }
    out
}

/// Patch MSE of `a` against `b` at every voxel (same semantics as [`patch_mse`]).
pub fn patch_mse_map(a: &Volume, b: &Volume, radius: usize) -> Result<Vec<f64>> {
    a.geom().ensure_same(b.geom(), "patch_mse operands")?;
    let dims = a.geom().dims;
    let sq: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).collect();
    let mut s = sq;
    for axis in 0..3 {
        s = box_sum_axis(&s, dims, axis, radius);
    }
    let geom = a.geom();
    Ok(s.iter()
        .enumerate()
        .map(|(lin, &v)| {
            let c = geom.coords(lin);
            let count: usize = (0..3)
                .map(|ax| (c[ax] + radius).min(dims[ax] - 1) - c[ax].saturating_sub(radius) + 1)
                .product();
            (v / count as f64).max(0.0)
        })
        .collect())
}

/// Similarity-weighted voting over the priors inside `mask`.
///
/// Background votes are ignored inside the mask so every masked voxel gets a
/// nucleus label; a voxel where no prior has a nonzero label stays 0.
pub fn fuse(target: &Volume, priors: &[AtlasPrior], mask: &Mask, cfg: &FusionConfig) -> Result<LabelVolume> {
    cfg.validate()?;
    if priors.is_empty() {
        return Err(Error::InvalidInput("label fusion needs at least one prior".into()));
    }
    if target.is_4d() {
        return Err(Error::InvalidInput("fusion target must be 3D".into()));
    }
    let geom = target.geom();
    geom.ensure_same(mask.geom(), "fusion target vs mask")?;
    let mut dictionary: BTreeMap<LabelId, String> = BTreeMap::new();
    for (i, p) in priors.iter().enumerate() {
        geom.ensure_same(p.intensity.geom(), &format!("fusion target vs prior {i}"))?;
        for (id, name) in p.labels.labels() {
            dictionary.entry(*id).or_insert_with(|| name.clone());
        }
    }
    let weights: Vec<Vec<f64>> = par::map_slice(priors, |p| {
        patch_mse_map(target, &p.intensity, cfg.patch_radius).map(|mse| {
            mse.into_iter()
                .map(|m| 1.0 / (m.powf(cfg.weight_exponent) + cfg.epsilon))
                .collect()
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let indices = mask.indices();
    let voted: Vec<LabelId> = par::map_slice(&indices, |&lin| {
        let mut votes: Vec<(LabelId, f64)> = priors
            .iter()
            .zip(&weights)
            .map(|(p, w)| (p.labels.data()[lin], w[lin]))
            .filter(|&(l, _)| l != 0)
            .collect();
        // order-independent accumulation: sort by (label, weight) before summing
        votes.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut best: (LabelId, f64) = (0, f64::NEG_INFINITY);
        let mut i = 0;
        while i < votes.len() {
            let label = votes[i].0;
            let mut total = 0.0;
            while i < votes.len() && votes[i].0 == label {
                total += votes[i].1;
                i += 1;
            }
            if total > best.1 {
                best = (label, total);
            }
        }
        best.0
    });
    let mut data = vec![0 as LabelId; geom.n_voxels()];
    for (&lin, l) in indices.iter().zip(voted) {
        data[lin] = l;
    }
    LabelVolume::new(geom.clone(), data, dictionary)
}
