//! Single-file little-endian NIfTI-1 reader and writer (`.nii`, `.nii.gz`).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian as LE};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix4, Quaternion, UnitQuaternion};

use super::{default_label_name, Affine, Geometry, LabelId, LabelVolume, Mask, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: [u8; 4] = *b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

mod off {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// Either kind of image a NIfTI file can be loaded as.
#[derive(Debug, Clone, PartialEq)]
pub enum NiftiImage {
    Scalar(Volume),
    Labels(LabelVolume),
}

impl NiftiImage {
    /// Loads `path`, promoting integer-typed files to labels when `as_labels` is set.
    pub fn read(path: impl AsRef<Path>, as_labels: bool) -> Result<Self> {
        let raw = RawImage::load(path.as_ref())?;
        if as_labels && raw.datatype != DT_FLOAT32 && raw.datatype != DT_FLOAT64 {
            Ok(NiftiImage::Labels(raw.into_labels(path.as_ref())?))
        } else {
            Ok(NiftiImage::Scalar(raw.into_volume()?))
        }
    }
}

struct RawImage {
    dims: [usize; 3],
    nt: Option<usize>,
    spacing: [f64; 3],
    affine: Affine,
    datatype: i16,
    values: Vec<f64>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        let out = enc.finish().map_err(|e| Error::io(path, e))?;
        fs::write(path, out).map_err(|e| Error::io(path, e))
    } else {
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn quaternion_affine(h: &[u8], pixdim: &[f32; 8]) -> Result<Affine> {
    let b = LE::read_f32(&h[off::QUATERN_B..]) as f64;
    let c = LE::read_f32(&h[off::QUATERN_B + 4..]) as f64;
    let d = LE::read_f32(&h[off::QUATERN_B + 8..]) as f64;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let rot = UnitQuaternion::from_quaternion(Quaternion::new(a, b, c, d)).to_rotation_matrix();
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let scale = [pixdim[1].abs() as f64, pixdim[2].abs() as f64, qfac * pixdim[3].abs() as f64];
    let mut m = Matrix4::identity();
    for r in 0..3 {
        for col in 0..3 {
            m[(r, col)] = rot[(r, col)] * scale[col];
        }
        m[(r, 3)] = LE::read_f32(&h[off::QOFFSET_X + 4 * r..]) as f64;
    }
    Affine::new(m)
}

impl RawImage {
    fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Truncated {
                expected: HEADER_SIZE,
                found: bytes.len(),
            });
        }
        let h = &bytes[..HEADER_SIZE];
        let sizeof_hdr = LE::read_i32(&h[off::SIZEOF_HDR..]);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(Error::BadHeaderSize(sizeof_hdr));
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&h[off::MAGIC..off::MAGIC + 4]);
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }

        let mut dim = [0i16; 8];
        LE::read_i16_into(&h[off::DIM..off::DIM + 16], &mut dim);
        let ndim = dim[0] as i64;
        if !(1..=7).contains(&ndim) {
            return Err(Error::InvalidDim {
                index: 0,
                value: ndim,
            });
        }
        let mut extent = [1usize; 7];
        for i in 1..=ndim as usize {
            if dim[i] < 1 {
                return Err(Error::InvalidDim {
                    index: i,
                    value: dim[i] as i64,
                });
            }
            extent[i - 1] = dim[i] as usize;
        }
        if let Some(i) = (4..7).find(|&i| extent[i] != 1) {
            return Err(Error::InvalidDim {
                index: i + 1,
                value: extent[i] as i64,
            });
        }
        let dims = [extent[0], extent[1], extent[2]];
        let nt = (ndim >= 4).then_some(extent[3]);

        let datatype = LE::read_i16(&h[off::DATATYPE..]);
        let width = match datatype {
            DT_UINT8 => 1,
            DT_INT16 => 2,
            DT_FLOAT32 => 4,
            DT_FLOAT64 => 8,
            other => return Err(Error::UnsupportedDatatype(other)),
        };

        let vox_offset = LE::read_f32(&h[off::VOX_OFFSET..]).max(HEADER_SIZE as f32) as usize;
        let count = dims.iter().product::<usize>() * nt.unwrap_or(1);
        let need = count * width;
        let available = bytes.len().saturating_sub(vox_offset);
        if available < need {
            return Err(Error::Truncated {
                expected: need,
                found: available,
            });
        }
        let payload = &bytes[vox_offset..vox_offset + need];
        let mut values: Vec<f64> = match datatype {
            DT_UINT8 => payload.iter().map(|&b| b as f64).collect(),
            DT_INT16 => payload.chunks_exact(2).map(|c| LE::read_i16(c) as f64).collect(),
            DT_FLOAT32 => payload.chunks_exact(4).map(|c| LE::read_f32(c) as f64).collect(),
            _ => payload.chunks_exact(8).map(LE::read_f64).collect(),
        };
        let slope = LE::read_f32(&h[off::SCL_SLOPE..]);
        let inter = LE::read_f32(&h[off::SCL_INTER..]);
        if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
            for v in &mut values {
                *v = *v * slope as f64 + inter as f64;
            }
        }

        let mut pixdim = [0f32; 8];
        LE::read_f32_into(&h[off::PIXDIM..off::PIXDIM + 32], &mut pixdim);
        let pix_spacing = [1, 2, 3].map(|i| {
            let p = pixdim[i].abs() as f64;
            if p > 0.0 {
                p
            } else {
                1.0
            }
        });

        let sform_code = LE::read_i16(&h[off::SFORM_CODE..]);
        let qform_code = LE::read_i16(&h[off::QFORM_CODE..]);
        let sform = (sform_code > 0)
            .then(|| {
                let mut m = Matrix4::identity();
                for r in 0..3 {
                    for c in 0..4 {
                        m[(r, c)] = LE::read_f32(&h[off::SROW_X + 16 * r + 4 * c..]) as f64;
                    }
                }
                Affine::new(m).ok()
            })
            .flatten();
        let affine = match sform {
            Some(a) => a,
            None if qform_code > 0 => quaternion_affine(h, &pixdim)?,
            None => Affine::from_spacing(pix_spacing),
        };
        let norms = affine.column_norms();
        let consistent = (0..3).all(|a| ((norms[a] - pix_spacing[a]) / pix_spacing[a]).abs() <= 1e-4);
        let spacing = if consistent { pix_spacing } else { norms };

        Ok(RawImage {
            dims,
            nt,
            spacing,
            affine,
            datatype,
            values,
        })
    }

    fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, self.affine)
    }

    fn into_volume(self) -> Result<Volume> {
        let geom = self.geometry()?;
        match self.nt {
            Some(nt) => Volume::new_4d(geom, nt, self.values),
            None => Volume::new(geom, self.values),
        }
    }

    fn into_labels(self, path: &Path) -> Result<LabelVolume> {
        if self.nt.map(|n| n > 1).unwrap_or(false) {
            return Err(Error::InvalidInput("label volume must be 3D".into()));
        }
        let geom = self.geometry()?;
        let mut data = Vec::with_capacity(self.values.len());
        for &v in &self.values {
            if v < 0.0 || v.fract() != 0.0 || v > LabelId::MAX as f64 {
                return Err(Error::InvalidInput(format!("value {v} is not a label id")));
            }
            data.push(v as LabelId);
        }
        let sidecar = sidecar_path(path);
        let labels = if sidecar.exists() {
            let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            let named: BTreeMap<String, String> =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", sidecar.display())))?;
            named
                .into_iter()
                .map(|(k, v)| {
                    k.parse::<LabelId>()
                        .map(|id| (id, v))
                        .map_err(|_| Error::Config(format!("{}: bad label id {k:?}", sidecar.display())))
                })
                .collect::<Result<BTreeMap<_, _>>>()?
        } else {
            let mut d = BTreeMap::new();
            for &v in &data {
                if v != 0 {
                    d.entry(v).or_insert_with(|| default_label_name(v));
                }
            }
            d
        };
        LabelVolume::new(geom, data, labels)
    }
}

/// `seg.nii` / `seg.nii.gz` → `seg.labels.json`.
pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    path.with_file_name(format!("{stem}.labels.json"))
}

fn build_header(geom: &Geometry, nt: Option<usize>, datatype: i16, bitpix: i16) -> Result<Vec<u8>> {
    let mut h = vec![0u8; VOX_OFFSET];
    LE::write_i32(&mut h[off::SIZEOF_HDR..], HEADER_SIZE as i32);
    let mut dim = [1i16; 8];
    dim[0] = if nt.is_some() { 4 } else { 3 };
    let extents = [geom.dims[0], geom.dims[1], geom.dims[2], nt.unwrap_or(1)];
    for (i, &e) in extents.iter().enumerate() {
        if e > i16::MAX as usize {
            return Err(Error::DimOverflow(e));
        }
        dim[i + 1] = e as i16;
    }
    LE::write_i16_into(&dim, &mut h[off::DIM..off::DIM + 16]);
    LE::write_i16(&mut h[off::DATATYPE..], datatype);
    LE::write_i16(&mut h[off::BITPIX..], bitpix);
    let pixdim = [
        1.0f32,
        geom.spacing[0] as f32,
        geom.spacing[1] as f32,
        geom.spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    LE::write_f32_into(&pixdim, &mut h[off::PIXDIM..off::PIXDIM + 32]);
    LE::write_f32(&mut h[off::VOX_OFFSET..], VOX_OFFSET as f32);
    LE::write_f32(&mut h[off::SCL_SLOPE..], 1.0);
    LE::write_f32(&mut h[off::SCL_INTER..], 0.0);
    // mm, seconds
    h[off::XYZT_UNITS] = 2 | 8;
    let descrip = b"parcelbench";
    h[off::DESCRIP..off::DESCRIP + descrip.len()].copy_from_slice(descrip);
    LE::write_i16(&mut h[off::QFORM_CODE..], 0);
    LE::write_i16(&mut h[off::SFORM_CODE..], 1);
    let m = geom.affine.matrix();
    for r in 0..3 {
        for c in 0..4 {
            LE::write_f32(&mut h[off::SROW_X + 16 * r + 4 * c..], m[(r, c)] as f32);
        }
    }
    h[off::MAGIC..off::MAGIC + 4].copy_from_slice(&MAGIC);
    Ok(h)
}

/// Reads a scalar volume (any supported datatype, scaled by `scl_slope`/`scl_inter`).
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    RawImage::load(path.as_ref())?.into_volume()
}

/// Reads an integer-valued file as labels, using a `.labels.json` sidecar when present.
pub fn read_label_nifti(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let p = path.as_ref();
    RawImage::load(p)?.into_labels(p)
}

pub fn read_mask_nifti(path: impl AsRef<Path>) -> Result<Mask> {
    let v = read_nifti(path)?;
    Mask::from_volume(&v)
}

/// Writes float32, or float64 when some value is not exactly representable in f32.
pub fn write_nifti(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let exact_f32 = v.data().iter().all(|&x| (x as f32) as f64 == x || x.is_nan());
    let nt = v.is_4d().then(|| v.nt());
    let mut bytes = if exact_f32 {
        let mut b = build_header(v.geom(), nt, DT_FLOAT32, 32)?;
        b.reserve(v.data().len() * 4);
        let mut buf = [0u8; 4];
        for &x in v.data() {
            LE::write_f32(&mut buf, x as f32);
            b.extend_from_slice(&buf);
        }
        b
    } else {
        let mut b = build_header(v.geom(), nt, DT_FLOAT64, 64)?;
        b.reserve(v.data().len() * 8);
        let mut buf = [0u8; 8];
        for &x in v.data() {
            LE::write_f64(&mut buf, x);
            b.extend_from_slice(&buf);
        }
        b
    };
    bytes.shrink_to_fit();
    write_bytes(path.as_ref(), &bytes)
}

/// Writes uint8 labels (int16 when an id exceeds 255) plus the dictionary sidecar.
pub fn write_label_nifti(l: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let max = l.data().iter().copied().max().unwrap_or(0);
    let bytes = if max <= u8::MAX as LabelId {
        let mut b = build_header(l.geom(), None, DT_UINT8, 8)?;
        b.extend(l.data().iter().map(|&v| v as u8));
        b
    } else if max <= i16::MAX as LabelId {
        let mut b = build_header(l.geom(), None, DT_INT16, 16)?;
        let mut buf = [0u8; 2];
        for &v in l.data() {
            LE::write_i16(&mut buf, v as i16);
            b.extend_from_slice(&buf);
        }
        b
    } else {
        return Err(Error::InvalidInput(format!("label id {max} exceeds int16 range")));
    };
    write_bytes(path, &bytes)?;
    let named: BTreeMap<String, &String> = l.labels().iter().map(|(k, v)| (k.to_string(), v)).collect();
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(&named).expect("string map serializes");
    fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
}

pub fn write_mask_nifti(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let mut b = build_header(m.geom(), None, DT_UINT8, 8)?;
    b.extend(m.data().iter().map(|&v| v as u8));
    write_bytes(path.as_ref(), &b)
}
