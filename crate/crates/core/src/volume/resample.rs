//! Nearest-neighbour and trilinear resampling between grids.

use super::{Geometry, LabelVolume, Mask, Volume};
use crate::par;

// Exact half-voxel ties round toward the lower index.
const TIE_EPS: f64 = 1e-9;
// Continuous indices this close outside the grid still count as inside.
const EDGE_EPS: f64 = 1e-9;

/// Continuous source index of every target voxel center.
fn source_coords<'a>(src: &Geometry, target: &'a Geometry) -> impl Fn(usize) -> [f64; 3] + Sync + 'a {
    let to_src = src.affine.inverse().matrix() * target.affine.matrix();
    move |lin| {
        let c = target.coords(lin);
        let v = to_src * nalgebra::Vector4::new(c[0] as f64, c[1] as f64, c[2] as f64, 1.0);
        [v[0], v[1], v[2]]
    }
}

fn nearest_index(src: &Geometry, x: [f64; 3]) -> Option<usize> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = (x[a] - 0.5 - TIE_EPS).ceil();
        if r < 0.0 || r > (src.dims[a] - 1) as f64 {
            return None;
        }
        idx[a] = r as usize;
    }
    Some(src.linear_index(idx[0], idx[1], idx[2]))
}

/// Each target voxel takes the label of the nearest source voxel center; outside → 0.
pub fn resample_nearest(src: &LabelVolume, target: &Geometry) -> LabelVolume {
    let coords = source_coords(src.geom(), target);
    let data = par::map_range(target.n_voxels(), |lin| {
        nearest_index(src.geom(), coords(lin))
            .map(|s| src.data()[s])
            .unwrap_or(0)
    });
    LabelVolume::new(target.clone(), data, src.labels().clone())
        .expect("resampling only copies source ids")
}

pub fn resample_mask(src: &Mask, target: &Geometry) -> Mask {
    let coords = source_coords(src.geom(), target);
    let data = par::map_range(target.n_voxels(), |lin| {
        nearest_index(src.geom(), coords(lin))
            .map(|s| src.data()[s])
            .unwrap_or(false)
    });
    Mask::new(target.clone(), data).expect("target-sized mask")
}

/// Eight source indices and weights, or `None` when outside the source grid.
fn stencil(src: &Geometry, x: [f64; 3]) -> Option<[(usize, f64); 8]> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let n = src.dims[a];
        let max = (n - 1) as f64;
        if x[a] < -EDGE_EPS || x[a] > max + EDGE_EPS {
            return None;
        }
        let xc = x[a].clamp(0.0, max);
        let f = xc.floor();
        let i0 = (f as usize).min(n.saturating_sub(2));
        lo[a] = i0;
        hi[a] = (i0 + 1).min(n - 1);
        frac[a] = if n == 1 { 0.0 } else { xc - i0 as f64 };
    }
    let mut out = [(0usize, 0.0); 8];
    for (c, slot) in out.iter_mut().enumerate() {
        let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let i = if bx == 1 { hi[0] } else { lo[0] };
        let j = if by == 1 { hi[1] } else { lo[1] };
        let k = if bz == 1 { hi[2] } else { lo[2] };
        let w = (if bx == 1 { frac[0] } else { 1.0 - frac[0] })
            * (if by == 1 { frac[1] } else { 1.0 - frac[1] })
            * (if bz == 1 { frac[2] } else { 1.0 - frac[2] });
        *slot = (src.linear_index(i, j, k), w);
    }
    Some(out)
}

/// Trilinear interpolation applied independently to every frame; outside → 0.
pub fn trilinear_resample(src: &Volume, target: &Geometry) -> Volume {
    let coords = source_coords(src.geom(), target);
    let stencils: Vec<Option<[(usize, f64); 8]>> =
        par::map_range(target.n_voxels(), |lin| stencil(src.geom(), coords(lin)));
    let nt = src.nt();
    let n = target.n_voxels();
    let mut data = vec![0.0; n * nt];
    par::for_each_chunk_mut(&mut data, n, |t, out| {
        let frame = src.frame(t);
        for (o, s) in out.iter_mut().zip(&stencils) {
            if let Some(st) = s {
                *o = st.iter().map(|&(i, w)| w * frame[i]).sum();
            }
        }
    });
    if src.is_4d() {
        Volume::new_4d(target.clone(), nt, data).expect("sized to target")
    } else {
        Volume::new(target.clone(), data).expect("sized to target")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Affine;

    #[test]
    fn nearest_identity_geometry() {
        let g = Geometry::with_spacing([3, 2, 2], [1.0; 3]).unwrap();
        let l = LabelVolume::with_default_labels(g.clone(), (0..12).map(|i| (i % 4) as u16).collect()).unwrap();
        assert_eq!(resample_nearest(&l, &g), l);
    }

    #[test]
    fn nearest_upsampling_single_voxel_gives_2x2x2_block() {
        let src_g = Geometry::with_spacing([3, 3, 3], [2.0; 3]).unwrap();
        let mut data = vec![0u16; 27];
        data[src_g.linear_index(1, 1, 1)] = 5;
        let src = LabelVolume::with_default_labels(src_g, data).unwrap();
        let tgt = Geometry::with_spacing([6, 6, 6], [1.0; 3]).unwrap();
        let out = resample_nearest(&src, &tgt);
        // brute force: fine voxel f maps to coarse index nearest to f/2, ties low
        let mut expected = Vec::new();
        for k in 0..6 {
            for j in 0..6 {
                for i in 0..6 {
                    let near = |f: usize| -> usize {
                        let x = f as f64 / 2.0;
                        let lo = x.floor();
                        if x - lo > 0.5 { lo as usize + 1 } else { lo as usize }
                    };
                    expected.push(if (near(i), near(j), near(k)) == (1, 1, 1) { 5 } else { 0 });
                }
            }
        }
        assert_eq!(out.data(), &expected[..]);
        assert_eq!(out.data().iter().filter(|&&v| v == 5).count(), 8);
    }

    #[test]
    fn nearest_outside_is_background() {
        let src_g = Geometry::with_spacing([2, 2, 2], [1.0; 3]).unwrap();
        let src = LabelVolume::with_default_labels(src_g, vec![3; 8]).unwrap();
        let tgt = Geometry::new([2, 2, 2], [1.0; 3], Affine::from_spacing_origin([1.0; 3], [100.0, 0.0, 0.0])).unwrap();
        assert!(resample_nearest(&src, &tgt).data().iter().all(|&v| v == 0));
    }

    #[test]
    fn trilinear_identity_and_midpoint() {
        let g = Geometry::with_spacing([2, 1, 1], [1.0; 3]).unwrap();
        let v = Volume::new(g.clone(), vec![0.0, 1.0]).unwrap();
        assert_eq!(trilinear_resample(&v, &g), v);
        let mid = Geometry::new([1, 1, 1], [1.0; 3], Affine::from_spacing_origin([1.0; 3], [0.5, 0.0, 0.0])).unwrap();
        assert_eq!(trilinear_resample(&v, &mid).data(), &[0.5]);
    }

    #[test]
    fn trilinear_preserves_linear_ramp() {
        let src_g = Geometry::with_spacing([6, 5, 4], [2.0; 3]).unwrap();
        let ramp = |p: [f64; 3]| 0.3 * p[0] - 0.7 * p[1] + 1.1 * p[2] + 2.0;
        let data = (0..src_g.n_voxels()).map(|i| ramp(src_g.world(i))).collect();
        let src = Volume::new(src_g, data).unwrap();
        let tgt = Geometry::with_spacing([11, 9, 7], [1.0; 3]).unwrap();
        let out = trilinear_resample(&src, &tgt);
        let err = (0..tgt.n_voxels())
            .map(|i| (out.data()[i] - ramp(tgt.world(i))).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn trilinear_constant_stays_constant_per_frame() {
        let src_g = Geometry::with_spacing([4, 4, 4], [2.0; 3]).unwrap();
        let n = src_g.n_voxels();
        let mut data = vec![3.0; n];
        data.extend(vec![-1.5; n]);
        let src = Volume::new_4d(src_g, 2, data).unwrap();
        let tgt = Geometry::with_spacing([7, 7, 7], [1.0; 3]).unwrap();
        let out = trilinear_resample(&src, &tgt);
        assert!(out.frame(0).iter().all(|&x| (x - 3.0).abs() < 1e-12));
        assert!(out.frame(1).iter().all(|&x| (x + 1.5).abs() < 1e-12));
    }
}
