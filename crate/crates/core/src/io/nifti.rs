//! NIfTI-1 volumes (`.nii`, `.nii.gz`) and 4D displacement fields.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array3, Array4, Axis, IxDyn};
use nifti::volume::ndarray::IntoNdArray;
use nifti::writer::WriterOptions;
use nifti::{InMemNiftiObject, NiftiHeader, NiftiObject};

use crate::error::{Error, Result};
use crate::volume::{DisplacementField, Volume};

const INTENT_VECTOR: i16 = 1007;
const UNITS_MM: u8 = 2;

fn format_err<T>(path: &Path, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Format(format!("{}: {msg}", path.display())))
}

fn read_object(path: &Path) -> Result<InMemNiftiObject> {
    let bytes = fs::read(path)?;
    let raw = if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        out
    } else {
        bytes
    };
    InMemNiftiObject::from_reader(Cursor::new(raw)).or_else(|e| format_err(path, e))
}

/// Spacing and origin from the header, warning on (and dropping) any
/// rotation or axis flip.
fn geometry(h: &NiftiHeader, path: &Path) -> Result<([f64; 3], [f64; 3])> {
    let spacing = [h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64];
    if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return format_err(path, format!("non-positive voxel spacing {spacing:?}"));
    }
    if h.sform_code > 0 {
        let rows = [h.srow_x, h.srow_y, h.srow_z];
        let rotated = (0..3).any(|i| (0..3).any(|j| if i == j { rows[i][j] < 0.0 } else { rows[i][j].abs() > 1e-6 }));
        if rotated {
            log::warn!("{}: sform has rotation or flip components; they are ignored", path.display());
        }
        return Ok((spacing, [rows[0][3] as f64, rows[1][3] as f64, rows[2][3] as f64]));
    }
    if h.qform_code > 0 {
        if h.quatern_b != 0.0 || h.quatern_c != 0.0 || h.quatern_d != 0.0 || h.pixdim[0] < 0.0 {
            log::warn!("{}: qform has rotation or flip components; they are ignored", path.display());
        }
        return Ok((spacing, [h.quatern_x as f64, h.quatern_y as f64, h.quatern_z as f64]));
    }
    Ok((spacing, [0.0; 3]))
}

fn dims(h: &NiftiHeader) -> Vec<usize> {
    let n = (h.dim[0] as usize).min(7);
    h.dim[1..=n].iter().map(|&d| d as usize).collect()
}

fn header_for(spacing: [f64; 3], origin: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader { xyzt_units: UNITS_MM, qform_code: 1, sform_code: 1, ..NiftiHeader::default() };
    h.pixdim = [1.0; 8];
    for a in 0..3 {
        h.pixdim[a + 1] = spacing[a] as f32;
    }
    h.srow_x = [spacing[0] as f32, 0.0, 0.0, origin[0] as f32];
    h.srow_y = [0.0, spacing[1] as f32, 0.0, origin[1] as f32];
    h.srow_z = [0.0, 0.0, spacing[2] as f32, origin[2] as f32];
    h.quatern_x = origin[0] as f32;
    h.quatern_y = origin[1] as f32;
    h.quatern_z = origin[2] as f32;
    h
}

fn to_f64_dyn(obj: InMemNiftiObject, path: &Path) -> Result<ndarray::Array<f64, IxDyn>> {
    obj.into_volume().into_ndarray::<f64>().or_else(|e| format_err(path, e))
}

/// Reads a 3D scalar volume. Trailing singleton dimensions are accepted;
/// anything else beyond three axes is a format error.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let obj = read_object(path)?;
    let h = obj.header().clone();
    let d = dims(&h);
    if d.len() < 3 || d[3..].iter().any(|&n| n != 1) {
        return format_err(path, format!("expected a 3D volume, found dimensions {d:?}"));
    }
    let (spacing, origin) = geometry(&h, path)?;
    let mut arr = to_f64_dyn(obj, path)?;
    while arr.ndim() > 3 {
        arr = arr.index_axis_move(Axis(3), 0);
    }
    let shape = [d[0], d[1], d[2]];
    // logical (row-major) iteration of an [x, y, z] array matches the crate's layout
    let data: Vec<f64> = arr.iter().copied().collect();
    Volume::new(shape, spacing, origin, data).or_else(|e| format_err(path, e))
}

/// Writes FLOAT64 data, gzip-compressed when the path ends in `.gz`.
pub fn write_volume(vol: &Volume, path: &Path) -> Result<()> {
    let s = vol.shape();
    let arr = Array3::from_shape_vec((s[0], s[1], s[2]), vol.data().to_vec()).expect("volume length matches shape");
    let header = header_for(vol.spacing(), vol.origin());
    WriterOptions::new(path).reference_header(&header).write_nifti(&arr).or_else(|e| format_err(path, e))
}

/// Reads a displacement field stored as `[X, Y, Z, 3]` or the
/// `[X, Y, Z, 1, 3]` vector-intent layout. Components are voxel units in
/// x/y/z order.
pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let obj = read_object(path)?;
    let h = obj.header().clone();
    let d = dims(&h);
    let ok = (d.len() == 4 && d[3] == 3) || (d.len() == 5 && d[3] == 1 && d[4] == 3);
    if !ok {
        return format_err(path, format!("expected a [X, Y, Z, 3] displacement field, found dimensions {d:?}"));
    }
    let shape = [d[0], d[1], d[2]];
    let mut arr = to_f64_dyn(obj, path)?;
    if arr.ndim() == 5 {
        arr = arr.index_axis_move(Axis(3), 0);
    }
    let data: Vec<f64> = arr.iter().copied().collect();
    if data.iter().any(|v| !v.is_finite()) {
        return format_err(path, "displacement field contains non-finite values");
    }
    DisplacementField::new(shape, data).or_else(|e| format_err(path, e))
}

pub fn write_field(field: &DisplacementField, path: &Path, spacing: [f64; 3], origin: [f64; 3]) -> Result<()> {
    let s = field.shape();
    let arr = Array4::from_shape_vec((s[0], s[1], s[2], 3), field.data().to_vec()).expect("field length matches shape");
    let mut header = header_for(spacing, origin);
    header.intent_code = INTENT_VECTOR;
    WriterOptions::new(path).reference_header(&header).write_nifti(&arr).or_else(|e| format_err(path, e))
}
