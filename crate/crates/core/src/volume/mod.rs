//! Voxel-grid data model: geometry, scalar/label/mask volumes and NIfTI-1 I/O.
//!
//! All volumes store data in x-fastest order: linear index `i + nx*(j + ny*k)`,
//! with the time axis (if any) outermost.

mod nifti;
mod resample;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix4, Vector4};

use crate::error::{Error, Result};

pub use nifti::{read_label_nifti, read_mask_nifti, read_nifti, write_label_nifti, write_mask_nifti, write_nifti, NiftiImage};
pub use resample::{resample_mask, resample_nearest, trilinear_resample};

/// Integer label id. Zero is background.
pub type LabelId = u16;

/// Abbreviations of the eleven thalamic nuclei, in dictionary id order 1..=11.
pub const THALAMIC_NUCLEI: [&str; 11] = [
    "AV", "CM", "Hb", "LGN", "MGN", "Md", "Pul", "VA", "VL", "VLa", "VPL",
];

/// Canonical label dictionary: ids 1..=11 mapped to the thalamic nuclei.
pub fn thalamic_dictionary() -> BTreeMap<LabelId, String> {
    THALAMIC_NUCLEI
        .iter()
        .enumerate()
        .map(|(i, s)| (i as LabelId + 1, s.to_string()))
        .collect()
}

/// Name used for an id that has no entry in a dictionary.
pub fn default_label_name(id: LabelId) -> String {
    match id {
        0 => "background".to_string(),
        1..=11 => THALAMIC_NUCLEI[id as usize - 1].to_string(),
        _ => format!("label{id}"),
    }
}

/// Name for data-driven clusters, which carry no anatomical meaning.
pub fn cluster_label_name(id: LabelId) -> String {
    format!("cluster{id}")
}

/// Dictionary `1..=k → cluster{i}`.
pub fn cluster_dictionary(k: usize) -> BTreeMap<LabelId, String> {
    (1..=k as LabelId).map(|i| (i, cluster_label_name(i))).collect()
}

/// Homogeneous voxel-index to world-mm map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine(Matrix4<f64>);

impl Affine {
    pub fn new(m: Matrix4<f64>) -> Result<Self> {
        if m.row(3) != Vector4::new(0.0, 0.0, 0.0, 1.0).transpose() {
            return Err(Error::InvalidInput(format!(
                "affine bottom row must be [0,0,0,1], got {:?}",
                m.row(3).iter().collect::<Vec<_>>()
            )));
        }
        let det = m.fixed_view::<3, 3>(0, 0).determinant();
        if !det.is_finite() || det == 0.0 {
            return Err(Error::InvalidInput("affine 3x3 block is singular".into()));
        }
        Ok(Affine(m))
    }

    pub fn identity() -> Self {
        Affine(Matrix4::identity())
    }

    pub fn from_spacing(spacing: [f64; 3]) -> Self {
        Self::from_spacing_origin(spacing, [0.0; 3])
    }

    pub fn from_spacing_origin(spacing: [f64; 3], origin: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        for a in 0..3 {
            m[(a, a)] = spacing[a];
            m[(a, 3)] = origin[a];
        }
        Affine(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn inverse(&self) -> Affine {
        Affine(self.0.try_inverse().expect("validated affine is invertible"))
    }

    /// Column norms of the 3x3 block (the voxel spacing it implies).
    pub fn column_norms(&self) -> [f64; 3] {
        let l = self.linear();
        [l.column(0).norm(), l.column(1).norm(), l.column(2).norm()]
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.0 * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }

    pub fn approx_eq(&self, other: &Affine, tol: f64) -> bool {
        self.0
            .iter()
            .zip(other.0.iter())
            .all(|(a, b)| (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs())))
    }
}

/// World position of the voxel center at integer index `idx`.
pub fn voxel_to_world(a: &Affine, idx: [i64; 3]) -> [f64; 3] {
    a.apply([idx[0] as f64, idx[1] as f64, idx[2] as f64])
}

/// Spatial grid shared by every volume type.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], affine: Affine) -> Result<Self> {
        for (i, &d) in dims.iter().enumerate() {
            if d == 0 {
                return Err(Error::InvalidDim {
                    index: i + 1,
                    value: 0,
                });
            }
        }
        for &s in &spacing {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidInput(format!("spacing must be positive, got {spacing:?}")));
            }
        }
        let norms = affine.column_norms();
        for a in 0..3 {
            if ((norms[a] - spacing[a]) / spacing[a]).abs() > 1e-4 {
                return Err(Error::InvalidInput(format!(
                    "spacing {spacing:?} inconsistent with affine column norms {norms:?}"
                )));
            }
        }
        Ok(Geometry {
            dims,
            spacing,
            affine,
        })
    }

    /// Axis-aligned grid with the voxel at index 0 sitting on the world origin.
    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, Affine::from_spacing(spacing))
    }

    /// Axis-aligned grid whose center lies on the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| -(dims[a] as f64 - 1.0) * spacing[a] / 2.0);
        Self::new(dims, spacing, Affine::from_spacing_origin(spacing, origin))
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, lin: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [lin % nx, (lin / nx) % ny, lin / (nx * ny)]
    }

    pub fn contains(&self, i: i64, j: i64, k: i64) -> bool {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < self.dims[0]
            && (j as usize) < self.dims[1]
            && (k as usize) < self.dims[2]
    }

    pub fn world(&self, lin: usize) -> [f64; 3] {
        let c = self.coords(lin);
        self.affine.apply([c[0] as f64, c[1] as f64, c[2] as f64])
    }

    /// Same dims and (to 1e-6 relative) the same affine.
    pub fn same_grid(&self, other: &Geometry) -> bool {
        self.dims == other.dims && self.affine.approx_eq(&other.affine, 1e-6)
    }

    pub fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }
}

/// 3D or 4D real-valued grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geom: Geometry,
    frames: Option<usize>,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geom.n_voxels() {
            return Err(Error::InvalidInput(format!(
                "data length {} != product of dims {}",
                data.len(),
                geom.n_voxels()
            )));
        }
        Ok(Volume {
            geom,
            frames: None,
            data,
        })
    }

    pub fn new_4d(geom: Geometry, nt: usize, data: Vec<f64>) -> Result<Self> {
        if nt == 0 {
            return Err(Error::InvalidDim { index: 4, value: 0 });
        }
        if data.len() != geom.n_voxels() * nt {
            return Err(Error::InvalidInput(format!(
                "data length {} != product of dims {}",
                data.len(),
                geom.n_voxels() * nt
            )));
        }
        Ok(Volume {
            geom,
            frames: Some(nt),
            data,
        })
    }

    pub fn zeros(geom: Geometry) -> Self {
        let n = geom.n_voxels();
        Volume {
            geom,
            frames: None,
            data: vec![0.0; n],
        }
    }

    pub fn geom(&self) -> &Geometry {
        &self.geom
    }

    pub fn is_4d(&self) -> bool {
        self.frames.is_some()
    }

    /// Number of frames; 1 for a 3D volume.
    pub fn nt(&self) -> usize {
        self.frames.unwrap_or(1)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.geom.n_voxels();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geom.linear_index(i, j, k)]
    }
}

/// Integer-labeled grid with an id → name dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geom: Geometry,
    data: Vec<LabelId>,
    labels: BTreeMap<LabelId, String>,
}

impl LabelVolume {
    pub fn new(geom: Geometry, data: Vec<LabelId>, labels: BTreeMap<LabelId, String>) -> Result<Self> {
        if data.len() != geom.n_voxels() {
            return Err(Error::InvalidInput(format!(
                "label data length {} != product of dims {}",
                data.len(),
                geom.n_voxels()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v != 0 && !labels.contains_key(&v)) {
            return Err(Error::InvalidInput(format!("label id {bad} missing from dictionary")));
        }
        Ok(LabelVolume { geom, data, labels })
    }

    /// Builds a volume whose dictionary covers exactly the ids present, with default names.
    pub fn with_default_labels(geom: Geometry, data: Vec<LabelId>) -> Result<Self> {
        let mut labels = BTreeMap::new();
        for &v in &data {
            if v != 0 {
                labels.entry(v).or_insert_with(|| default_label_name(v));
            }
        }
        Self::new(geom, data, labels)
    }

    pub fn background(geom: Geometry, labels: BTreeMap<LabelId, String>) -> Self {
        let n = geom.n_voxels();
        LabelVolume {
            geom,
            data: vec![0; n],
            labels,
        }
    }

    pub fn geom(&self) -> &Geometry {
        &self.geom
    }

    pub fn data(&self) -> &[LabelId] {
        &self.data
    }

    pub fn labels(&self) -> &BTreeMap<LabelId, String> {
        &self.labels
    }

    pub fn into_parts(self) -> (Geometry, Vec<LabelId>, BTreeMap<LabelId, String>) {
        (self.geom, self.data, self.labels)
    }

    /// Nonzero ids that occur in the data, ascending.
    pub fn present_ids(&self) -> Vec<LabelId> {
        self.counts().into_keys().collect()
    }

    /// Voxel count per nonzero id that occurs in the data.
    pub fn counts(&self) -> BTreeMap<LabelId, usize> {
        let mut c = BTreeMap::new();
        for &v in &self.data {
            if v != 0 {
                *c.entry(v).or_insert(0) += 1;
            }
        }
        c
    }

    pub fn to_mask(&self) -> Mask {
        Mask {
            geom: self.geom.clone(),
            data: self.data.iter().map(|&v| v != 0).collect(),
        }
    }

    /// Replaces the dictionary; fails if a present id would be left unnamed.
    pub fn with_labels(self, labels: BTreeMap<LabelId, String>) -> Result<Self> {
        Self::new(self.geom, self.data, labels)
    }
}

/// Binary grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    geom: Geometry,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(geom: Geometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geom.n_voxels() {
            return Err(Error::InvalidInput(format!(
                "mask length {} != product of dims {}",
                data.len(),
                geom.n_voxels()
            )));
        }
        Ok(Mask { geom, data })
    }

    /// Mask of voxels whose value is nonzero; rejects values outside {0, 1}.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        if v.is_4d() {
            return Err(Error::InvalidInput("mask must be 3D".into()));
        }
        let mut data = Vec::with_capacity(v.data().len());
        for &x in v.data() {
            if x == 0.0 {
                data.push(false);
            } else if x == 1.0 {
                data.push(true);
            } else {
                return Err(Error::InvalidInput(format!("mask value {x} not in {{0,1}}")));
            }
        }
        Ok(Mask {
            geom: v.geom().clone(),
            data,
        })
    }

    pub fn full(geom: Geometry) -> Self {
        let n = geom.n_voxels();
        Mask {
            geom,
            data: vec![true; n],
        }
    }

    pub fn geom(&self) -> &Geometry {
        &self.geom
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, lin: usize) -> bool {
        self.data[lin]
    }

    /// Linear indices of masked voxels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            geom: self.geom.clone(),
            frames: None,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}
