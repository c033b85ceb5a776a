//! Small dense linear-algebra and statistics helpers shared by the pipelines.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for rank decisions.
pub const RANK_TOL: f64 = 1e-10;

/// Numerical rank of `m` from its singular values.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * smax * (m.nrows().max(m.ncols()) as f64)).count()
}

/// Orthonormal basis (as columns) of the column space of `m`.
pub fn column_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("svd u requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = RANK_TOL * smax * (m.nrows().max(m.ncols()) as f64);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| smax > 0.0 && svd.singular_values[i] > cut)
        .collect();
    DMatrix::from_fn(m.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}

/// Left pseudo-inverse `(AᵀA)⁻¹Aᵀ` of a full-column-rank design.
pub fn left_pinv(design: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let p = design.ncols();
    if design.nrows() < p {
        return Err(Error::RankDeficient(format!(
            "{what}: {} rows for {p} columns",
            design.nrows()
        )));
    }
    let r = rank(design);
    if r < p {
        return Err(Error::RankDeficient(format!("{what}: rank {r} < {p} columns")));
    }
    let svd = design.clone().svd(true, true);
    svd.pseudo_inverse(0.0)
        .map_err(|e| Error::Singular(format!("{what}: {e}")))
}

/// Arithmetic mean; zero for an empty slice.
pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Mean and standard deviation with divisor `n`.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let m = mean(x);
    let var = if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
    };
    (m, var.sqrt())
}

/// Zero mean, unit variance (divisor `n`). `None` when the variance is zero.
pub fn standardize(x: &[f64]) -> Option<Vec<f64>> {
    let (m, sd) = mean_std(x);
    if sd <= 0.0 || !sd.is_finite() {
        return None;
    }
    Some(x.iter().map(|v| (v - m) / sd).collect())
}

/// Standardizes, mapping zero-variance input to all zeros.
pub fn zscore(x: &[f64]) -> Vec<f64> {
    standardize(x).unwrap_or_else(|| vec![0.0; x.len()])
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    cov / (sa * sb)
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn sym_eigen_desc(m: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let vals = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Linear-interpolated quantile (the `numpy.percentile` default), `q` in [0, 1].
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_matches_numpy_linear() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.75), 3.25);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 0.0), 1.0);
    }

    #[test]
    fn pinv_rejects_collinear_columns() {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(left_pinv(&d, "t"), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn standardize_divisor_n() {
        let z = standardize(&[1.0, 3.0]).unwrap();
        assert_eq!(z, vec![-1.0, 1.0]);
        assert!(standardize(&[2.0, 2.0]).is_none());
    }

    #[test]
    fn column_basis_spans() {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert_eq!(column_basis(&d).ncols(), 1);
    }
}
