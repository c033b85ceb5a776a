//! Q-ball orientation functions: real symmetric spherical-harmonic fitting with
//! Laplace–Beltrami regularisation, the Funk–Radon transform, and coefficient
//! field upsampling.
//!
//! Basis index `j` enumerates even degrees `l = 0, 2, .., L` and orders
//! `m = -l..=l` in ascending order, `j = l(l+1)/2 + m`. With `L = 6` there are 28
//! coefficients. The real basis is built from the orthonormal complex harmonics
//! (Condon–Shortley phase included):
//!
//! * `m < 0`: `√2 · Im(Y_l^|m|)`
//! * `m = 0`: `Y_l^0`
//! * `m > 0`: `√2 · Re(Y_l^m)`

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{resample_mask, trilinear_resample, Affine, Geometry, Mask, Volume};

/// Diffusion encoding: one direction and b-value per acquired volume.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    directions: Vec<[f64; 3]>,
    bvals: Vec<f64>,
}

/// b-values at or below this are treated as unweighted (b=0) volumes.
pub const B0_THRESHOLD: f64 = 1.0;

impl GradientTable {
    pub fn new(directions: Vec<[f64; 3]>, bvals: Vec<f64>) -> Result<Self> {
        if directions.len() != bvals.len() {
            return Err(Error::InvalidInput(format!(
                "{} directions for {} b-values",
                directions.len(),
                bvals.len()
            )));
        }
        for (d, &b) in directions.iter().zip(&bvals) {
            if b > B0_THRESHOLD {
                let n = norm3(*d);
                if (n - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidInput(format!("gradient direction {d:?} has norm {n}")));
                }
            } else if b < 0.0 {
                return Err(Error::InvalidInput(format!("negative b-value {b}")));
            }
        }
        Ok(GradientTable { directions, bvals })
    }

    /// `n_b0` unweighted volumes followed by `n_dirs` hemisphere directions at `bval`.
    pub fn standard(n_b0: usize, n_dirs: usize, bval: f64) -> Self {
        let mut directions = vec![[0.0, 0.0, 0.0]; n_b0];
        let mut bvals = vec![0.0; n_b0];
        directions.extend(hemisphere_directions(n_dirs));
        bvals.extend(std::iter::repeat_n(bval, n_dirs));
        GradientTable { directions, bvals }
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn directions(&self) -> &[[f64; 3]] {
        &self.directions
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bvals[i] <= B0_THRESHOLD).collect()
    }

    pub fn weighted_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bvals[i] > B0_THRESHOLD).collect()
    }

    /// Parses whitespace-separated `gx gy gz b` lines; blank lines and `#` comments skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dirs = Vec::new();
        let mut bvals = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidInput(format!("gradient table line {}: {e}", lineno + 1)))?;
            if vals.len() != 4 {
                return Err(Error::InvalidInput(format!(
                    "gradient table line {}: expected 4 fields, found {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            dirs.push([vals[0], vals[1], vals[2]]);
            bvals.push(vals[3]);
        }
        Self::new(dirs, bvals)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (d, b) in self.directions.iter().zip(&self.bvals) {
            // {:?} on f64 prints the shortest round-tripping representation
            let _ = writeln!(s, "{:?} {:?} {:?} {:?}", d[0], d[1], d[2], b);
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        fs::write(p, self.to_text()).map_err(|e| Error::io(p, e))
    }

    /// Same table with entries reordered by `perm` (entry `i` of the result is `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        GradientTable {
            directions: perm.iter().map(|&i| self.directions[i]).collect(),
            bvals: perm.iter().map(|&i| self.bvals[i]).collect(),
        }
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Quasi-uniform unit vectors on the upper hemisphere (golden-angle spiral).
pub fn hemisphere_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Quasi-uniform unit vectors over the whole sphere.
pub fn sphere_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Even-degree real spherical-harmonic basis up to `order`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShBasis {
    order: usize,
}

impl Default for ShBasis {
    fn default() -> Self {
        ShBasis { order: 6 }
    }
}

impl ShBasis {
    pub fn new(order: usize) -> Result<Self> {
        if order % 2 != 0 {
            return Err(Error::InvalidInput(format!("SH order must be even, got {order}")));
        }
        Ok(ShBasis { order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_coeffs(&self) -> usize {
        (self.order + 1) * (self.order + 2) / 2
    }

    pub fn index(l: usize, m: i64) -> usize {
        debug_assert!(l % 2 == 0 && m.unsigned_abs() as usize <= l);
        ((l * (l + 1) / 2) as i64 + m) as usize
    }

    /// `(l, m)` of coefficient `j`.
    pub fn degree_order(&self, j: usize) -> (usize, i64) {
        let mut l = 0;
        while (l + 2) * (l + 1) / 2 <= j {
            l += 2;
        }
        (l, j as i64 - (l * (l + 1) / 2) as i64)
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n_coeffs()).map(|j| self.degree_order(j).0).collect()
    }

    /// All basis functions evaluated at one unit direction.
    pub fn eval(&self, dir: [f64; 3]) -> Vec<f64> {
        let n = norm3(dir);
        let (x, y, z) = (dir[0] / n, dir[1] / n, dir[2] / n);
        let cos_t = z.clamp(-1.0, 1.0);
        let phi = y.atan2(x);
        let plm = legendre_table(self.order, cos_t);
        let mut out = vec![0.0; self.n_coeffs()];
        for l in (0..=self.order).step_by(2) {
            for m in -(l as i64)..=(l as i64) {
                let am = m.unsigned_abs() as usize;
                let base = norm_factor(l, am) * plm[l][am];
                let v = match m.cmp(&0) {
                    std::cmp::Ordering::Less => 2f64.sqrt() * base * (am as f64 * phi).sin(),
                    std::cmp::Ordering::Equal => base,
                    std::cmp::Ordering::Greater => 2f64.sqrt() * base * (am as f64 * phi).cos(),
                };
                out[Self::index(l, m)] = v;
            }
        }
        out
    }
}

/// Associated Legendre `P_l^m(x)` (Condon–Shortley phase) for `0 <= m <= l <= order`.
fn legendre_table(order: usize, x: f64) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; order + 1]; order + 1];
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for m in 0..=order {
        if m > 0 {
            pmm *= -((2 * m - 1) as f64) * s;
        }
        p[m][m] = pmm;
        if m < order {
            p[m + 1][m] = x * (2 * m + 1) as f64 * pmm;
        }
        for l in (m + 2)..=order {
            p[l][m] = ((2 * l - 1) as f64 * x * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m]) / (l - m) as f64;
        }
    }
    p
}

fn norm_factor(l: usize, m: usize) -> f64 {
    // (l-m)!/(l+m)! as a running product
    let ratio: f64 = ((l - m + 1)..=(l + m)).map(|k| 1.0 / k as f64).product();
    ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt()
}

/// `P_l(0)`: zero for odd `l`, `(-1)^(l/2) (l-1)!! / l!!` for even `l`.
pub fn legendre_at_zero(l: usize) -> f64 {
    if l % 2 == 1 {
        return 0.0;
    }
    let mut v = 1.0;
    let mut k = 2;
    while k <= l {
        v *= -((k - 1) as f64) / k as f64;
        k += 2;
    }
    v
}

/// `N × n_coeffs` matrix of basis values at each direction.
pub fn sh_design_matrix(basis: &ShBasis, dirs: &[[f64; 3]]) -> Result<DMatrix<f64>> {
    let nc = basis.n_coeffs();
    if dirs.len() < nc {
        return Err(Error::InvalidInput(format!(
            "{} directions cannot determine {nc} SH coefficients",
            dirs.len()
        )));
    }
    let mut b = DMatrix::zeros(dirs.len(), nc);
    for (i, d) in dirs.iter().enumerate() {
        for (j, v) in basis.eval(*d).into_iter().enumerate() {
            b[(i, j)] = v;
        }
    }
    Ok(b)
}

/// Precomputed regularised least-squares projector `(BᵀB + λ LᵀL)⁻¹ Bᵀ`.
#[derive(Debug, Clone)]
pub struct ShFitter {
    basis: ShBasis,
    projector: DMatrix<f64>,
}

impl ShFitter {
    pub fn new(basis: ShBasis, dirs: &[[f64; 3]], lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
        }
        let b = sh_design_matrix(&basis, dirs)?;
        let mut normal = b.transpose() * &b;
        for (j, l) in basis.degrees().into_iter().enumerate() {
            let lb = (l * (l + 1)) as f64;
            normal[(j, j)] += lambda * lb * lb;
        }
        let chol = normal
            .cholesky()
            .ok_or_else(|| Error::Singular("SH normal matrix is not positive definite".into()))?;
        let projector = chol.solve(&b.transpose());
        Ok(ShFitter { basis, projector })
    }

    pub fn basis(&self) -> &ShBasis {
        &self.basis
    }

    pub fn fit(&self, signal: &[f64]) -> Vec<f64> {
        assert_eq!(signal.len(), self.projector.ncols());
        (&self.projector * DVector::from_column_slice(signal))
            .iter()
            .copied()
            .collect()
    }
}

/// One-shot regularised SH fit of `signal` sampled at `dirs`.
pub fn fit_sh(signal: &[f64], dirs: &[[f64; 3]], basis: &ShBasis, lambda: f64) -> Result<Vec<f64>> {
    if signal.len() != dirs.len() {
        return Err(Error::InvalidInput(format!(
            "{} samples for {} directions",
            signal.len(),
            dirs.len()
        )));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite signal".into()));
    }
    Ok(ShFitter::new(*basis, dirs, lambda)?.fit(signal))
}

/// Funk–Radon transform in SH space: `c'_lm = 2π P_l(0) c_lm`.
pub fn funk_radon(c: &[f64]) -> Vec<f64> {
    let mut l = 0;
    let mut out = Vec::with_capacity(c.len());
    let mut next_block = 1;
    for (j, &v) in c.iter().enumerate() {
        if j == next_block {
            l += 2;
            next_block = (l + 1) * (l + 2) / 2;
        }
        out.push(2.0 * PI * legendre_at_zero(l) * v);
    }
    out
}

/// SH reconstruction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FodConfig {
    pub order: usize,
    pub lambda: f64,
    /// Apply the Funk–Radon transform after fitting (ODF coefficients) or keep
    /// the raw signal coefficients.
    pub use_frt: bool,
}

impl Default for FodConfig {
    fn default() -> Self {
        FodConfig {
            order: 6,
            lambda: 0.006,
            use_frt: true,
        }
    }
}

/// Per-voxel SH coefficients over a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ShField {
    mask: Mask,
    indices: Vec<usize>,
    n_coeffs: usize,
    coeffs: Vec<f64>,
    skipped: Vec<usize>,
}

impl ShField {
    pub fn new(mask: Mask, n_coeffs: usize, coeffs: Vec<f64>) -> Result<Self> {
        let indices = mask.indices();
        if coeffs.len() != indices.len() * n_coeffs {
            return Err(Error::InvalidInput(format!(
                "{} coefficients for {} voxels x {n_coeffs}",
                coeffs.len(),
                indices.len()
            )));
        }
        Ok(ShField {
            mask,
            indices,
            n_coeffs,
            coeffs,
            skipped: Vec::new(),
        })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn geom(&self) -> &Geometry {
        self.mask.geom()
    }

    /// Linear grid indices of the voxels, in coefficient-row order.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn coeffs(&self, row: usize) -> &[f64] {
        &self.coeffs[row * self.n_coeffs..(row + 1) * self.n_coeffs]
    }

    pub fn all_coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Linear indices of voxels whose b=0 signal was not positive (left at zero).
    pub fn skipped(&self) -> &[usize] {
        &self.skipped
    }

    /// 4D volume with one frame per coefficient; zero outside the mask.
    pub fn to_volume(&self) -> Volume {
        let n = self.geom().n_voxels();
        let mut data = vec![0.0; n * self.n_coeffs];
        for (row, &lin) in self.indices.iter().enumerate() {
            for j in 0..self.n_coeffs {
                data[j * n + lin] = self.coeffs[row * self.n_coeffs + j];
            }
        }
        Volume::new_4d(self.geom().clone(), self.n_coeffs, data).expect("sized to grid")
    }

    pub fn from_volume(vol: &Volume, mask: Mask) -> Result<Self> {
        vol.geom().ensure_same(mask.geom(), "SH volume vs mask")?;
        let nc = vol.nt();
        let n = vol.geom().n_voxels();
        let indices = mask.indices();
        let mut coeffs = Vec::with_capacity(indices.len() * nc);
        for &lin in &indices {
            for j in 0..nc {
                coeffs.push(vol.data()[j * n + lin]);
            }
        }
        Self::new(mask, nc, coeffs)
    }
}

/// Fits SH coefficients at every masked voxel of a 4D diffusion volume.
///
/// The signal is normalised by the mean of the b=0 volumes; voxels whose mean
/// b=0 value is not positive keep zero coefficients and are listed in
/// [`ShField::skipped`].
pub fn fit_field(dwi: &Volume, grads: &GradientTable, mask: &Mask, cfg: &FodConfig) -> Result<ShField> {
    if dwi.nt() != grads.len() {
        return Err(Error::InvalidInput(format!(
            "diffusion volume has {} frames but gradient table has {} entries",
            dwi.nt(),
            grads.len()
        )));
    }
    dwi.geom().ensure_same(mask.geom(), "diffusion volume vs mask")?;
    let basis = ShBasis::new(cfg.order)?;
    let nc = basis.n_coeffs();
    let indices = mask.indices();
    if indices.is_empty() {
        return ShField::new(mask.clone(), nc, Vec::new());
    }
    let b0 = grads.b0_indices();
    if b0.is_empty() {
        return Err(Error::InvalidInput("gradient table has no b=0 volume".into()));
    }
    let weighted = grads.weighted_indices();
    let dirs: Vec<[f64; 3]> = weighted.iter().map(|&i| grads.directions()[i]).collect();
    let fitter = ShFitter::new(basis, &dirs, cfg.lambda)?;

    let per_voxel: Vec<Option<Vec<f64>>> = par::map_slice(&indices, |&lin| {
        let s0 = b0.iter().map(|&t| dwi.frame(t)[lin]).sum::<f64>() / b0.len() as f64;
        if !(s0 > 0.0) {
            return None;
        }
        let signal: Vec<f64> = weighted.iter().map(|&t| dwi.frame(t)[lin] / s0).collect();
        let c = fitter.fit(&signal);
        Some(if cfg.use_frt { funk_radon(&c) } else { c })
    });

    let mut coeffs = Vec::with_capacity(indices.len() * nc);
    let mut skipped = Vec::new();
    for (lin, c) in indices.iter().zip(per_voxel) {
        match c {
            Some(c) => coeffs.extend(c),
            None => {
                skipped.push(*lin);
                coeffs.extend(std::iter::repeat_n(0.0, nc));
            }
        }
    }
    let mut field = ShField::new(mask.clone(), nc, coeffs)?;
    field.skipped = skipped;
    Ok(field)
}

/// Grid with the source's axis directions and `spacing` mm voxels, covering the
/// bounding box of the mask.
pub fn isotropic_target(mask: &Mask, spacing: f64) -> Result<Geometry> {
    let g = mask.geom();
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::InvalidInput("empty mask has no bounding box".into()));
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &lin in &idx {
        let c = g.coords(lin);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let mut dims = [0usize; 3];
    let mut m = *g.affine.matrix();
    let start = g.affine.apply([lo[0] as f64, lo[1] as f64, lo[2] as f64]);
    for a in 0..3 {
        let step = spacing / g.spacing[a];
        dims[a] = (((hi[a] - lo[a]) as f64 / step) + 1e-9).floor() as usize + 1;
        for r in 0..3 {
            m[(r, a)] *= step;
        }
    }
    for r in 0..3 {
        m[(r, 3)] = start[r];
    }
    Geometry::new(dims, [spacing; 3], Affine::new(m)?)
}

/// Trilinear per-coefficient interpolation onto `target`; the mask follows by
/// nearest neighbour and coefficients outside the new mask are dropped.
///
/// Interpolation is normalized by the interpolated mask, so voxels near the
/// mask edge average only in-mask neighbours instead of blending in zeros. In
/// the interior (all eight neighbours masked) this is plain trilinear weighting.
pub fn upsample_field(field: &ShField, target: &Geometry) -> ShField {
    let nc = field.n_coeffs();
    let src = field.to_volume();
    let nvox = field.geom().n_voxels();
    let mut data = src.into_data();
    data.extend(field.mask().data().iter().map(|&m| if m { 1.0 } else { 0.0 }));
    let stacked = Volume::new_4d(field.geom().clone(), nc + 1, data).expect("stacked channels");
    debug_assert_eq!(stacked.data().len(), nvox * (nc + 1));
    let up = trilinear_resample(&stacked, target);
    let mask = resample_mask(field.mask(), target);
    let n = target.n_voxels();
    let weight = up.frame(nc);
    let indices = mask.indices();
    let mut coeffs = Vec::with_capacity(indices.len() * nc);
    for &lin in &indices {
        let w = weight[lin];
        for j in 0..nc {
            let v = up.data()[j * n + lin];
            coeffs.push(if w > 0.0 { v / w } else { 0.0 });
        }
    }
    ShField::new(mask, nc, coeffs).expect("coefficients sized from mask")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis() -> ShBasis {
        ShBasis::default()
    }

    #[test]
    fn twenty_eight_coefficients_at_order_six() {
        assert_eq!(basis().n_coeffs(), 28);
        assert_eq!(ShBasis::index(6, 6), 27);
        assert_eq!(basis().degree_order(5), (2, 2));
        assert_eq!(basis().degree_order(6), (4, -4));
        assert!(ShBasis::new(5).is_err());
    }

    #[test]
    fn y00_is_constant() {
        let want = 1.0 / (4.0 * PI).sqrt();
        for d in sphere_directions(50) {
            assert!((basis().eval(d)[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn antipodal_rows_match() {
        for d in sphere_directions(20) {
            let a = basis().eval(d);
            let b = basis().eval([-d[0], -d[1], -d[2]]);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_low_degree_harmonics() {
        // Y_2^0 = sqrt(5/16π)(3cos²θ − 1); √2 Re Y_2^2 = sqrt(15/16π) sin²θ cos 2φ
        for d in sphere_directions(30) {
            let v = basis().eval(d);
            let y20 = (5.0 / (16.0 * PI)).sqrt() * (3.0 * d[2] * d[2] - 1.0);
            let y22 = (15.0 / (16.0 * PI)).sqrt() * (d[0] * d[0] - d[1] * d[1]);
            let y2m2 = (15.0 / (16.0 * PI)).sqrt() * 2.0 * d[0] * d[1];
            assert!((v[ShBasis::index(2, 0)] - y20).abs() < 1e-12);
            assert!((v[ShBasis::index(2, 2)] - y22).abs() < 1e-12);
            assert!((v[ShBasis::index(2, -2)] - y2m2).abs() < 1e-12);
        }
    }

    #[test]
    fn quasi_uniform_gram_is_near_identity() {
        let dirs = sphere_directions(256);
        let b = sh_design_matrix(&basis(), &dirs).unwrap();
        let gram = b.transpose() * &b * (4.0 * PI / dirs.len() as f64);
        for i in 0..28 {
            for j in 0..28 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - want).abs() < 5e-2, "({i},{j}) {}", gram[(i, j)]);
            }
        }
    }

    #[test]
    fn underdetermined_design_rejected() {
        assert!(sh_design_matrix(&basis(), &hemisphere_directions(27)).is_err());
    }

    #[test]
    fn constant_signal_fits_c0_only() {
        let dirs = hemisphere_directions(64);
        let c = fit_sh(&vec![0.7; 64], &dirs, &basis(), 0.0).unwrap();
        assert!((c[0] - 0.7 * (4.0 * PI).sqrt()).abs() < 1e-9);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn single_basis_function_recovered() {
        let dirs = hemisphere_directions(64);
        let s: Vec<f64> = dirs.iter().map(|&d| basis().eval(d)[5]).collect();
        let c = fit_sh(&s, &dirs, &basis(), 0.0).unwrap();
        for (j, v) in c.iter().enumerate() {
            let want = if j == 5 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-6, "{j}: {v}");
        }
    }

    #[test]
    fn laplace_beltrami_shrinks_high_degrees_monotonically() {
        let dirs = hemisphere_directions(64);
        let s: Vec<f64> = dirs
            .iter()
            .map(|d| (-1000.0 * (0.3e-3 + 1.2e-3 * d[0] * d[0])).exp())
            .collect();
        let energy = |lambda: f64| {
            let c = fit_sh(&s, &dirs, &basis(), lambda).unwrap();
            (c[0].abs(), c[1..].iter().map(|v| v * v).sum::<f64>())
        };
        let sweep: Vec<_> = [0.0, 0.01, 0.1, 1.0].iter().map(|&l| energy(l)).collect();
        for w in sweep.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-15);
        }
        // l = 0 is unpenalized; it moves only through the slight non-orthogonality
        // of the discrete sampling
        for w in &sweep {
            assert!((w.0 - sweep[0].0).abs() < 1e-3 * sweep[0].0);
        }
        assert!(sweep[3].1 < 0.02 * sweep[0].1);
    }

    #[test]
    fn funk_radon_factors() {
        let mut c = vec![0.0; 28];
        c[0] = 1.0;
        assert!((funk_radon(&c)[0] - 2.0 * PI).abs() < 1e-15);
        let mut c2 = vec![0.0; 28];
        c2[3] = 1.0;
        assert!((funk_radon(&c2)[3] + PI).abs() < 1e-15);
        let mut c6 = vec![0.0; 28];
        c6[20] = 1.0;
        assert!((funk_radon(&c6)[20] + 5.0 * PI / 8.0).abs() < 1e-15);
        assert_eq!(legendre_at_zero(4), 3.0 / 8.0);
    }

    #[test]
    fn gradient_table_text_round_trip() {
        let g = GradientTable::standard(3, 30, 1000.0);
        let back = GradientTable::parse(&g.to_text()).unwrap();
        assert_eq!(back, g);
        assert_eq!(g.b0_indices(), vec![0, 1, 2]);
        assert!(GradientTable::parse("1 0 0").is_err());
        assert!(GradientTable::parse("0.5 0 0 1000").is_err());
    }

    #[test]
    fn empty_mask_gives_empty_field() {
        let g = Geometry::with_spacing([2, 2, 2], [2.0; 3]).unwrap();
        let grads = GradientTable::standard(1, 30, 1000.0);
        let dwi = Volume::new_4d(g.clone(), 31, vec![1.0; 8 * 31]).unwrap();
        let mask = Mask::new(g, vec![false; 8]).unwrap();
        let f = fit_field(&dwi, &grads, &mask, &FodConfig::default()).unwrap();
        assert!(f.is_empty());
    }

    #[test]
    fn frame_count_mismatch_rejected() {
        let g = Geometry::with_spacing([1, 1, 1], [2.0; 3]).unwrap();
        let grads = GradientTable::standard(1, 30, 1000.0);
        let dwi = Volume::new_4d(g.clone(), 30, vec![1.0; 30]).unwrap();
        assert!(fit_field(&dwi, &grads, &Mask::full(g), &FodConfig::default()).is_err());
    }

    #[test]
    fn nonpositive_s0_voxels_are_skipped() {
        let g = Geometry::with_spacing([2, 1, 1], [2.0; 3]).unwrap();
        let grads = GradientTable::standard(1, 30, 1000.0);
        let mut data = vec![0.5; 2 * 31];
        data[1] = 0.0;
        let dwi = Volume::new_4d(g.clone(), 31, data).unwrap();
        let f = fit_field(&dwi, &grads, &Mask::full(g), &FodConfig::default()).unwrap();
        assert_eq!(f.skipped(), &[1]);
        assert!(f.coeffs(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn field_volume_round_trip() {
        let g = Geometry::with_spacing([3, 1, 1], [1.0; 3]).unwrap();
        let mask = Mask::new(g, vec![true, false, true]).unwrap();
        let f = ShField::new(mask.clone(), 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(ShField::from_volume(&f.to_volume(), mask).unwrap(), f);
    }

    #[test]
    fn isotropic_target_covers_mask() {
        let g = Geometry::centered([10, 10, 10], [2.0; 3]).unwrap();
        let mut m = vec![false; 1000];
        m[g.linear_index(2, 3, 4)] = true;
        m[g.linear_index(6, 5, 4)] = true;
        let mask = Mask::new(g.clone(), m).unwrap();
        let t = isotropic_target(&mask, 1.0).unwrap();
        assert_eq!(t.dims, [9, 5, 1]);
        assert_eq!(t.world(0), g.world(g.linear_index(2, 3, 4)));
    }
}
