//! `ONHV` label volume files.
//!
//! Layout, little-endian: magic `ONHV`, version u32, dims 3×u32,
//! spacing 3×f32 (µm), label count u8, labels u8 z-fastest, then optionally
//! the byte `0xB0`, a point count u32 and count×3 f32 BMO coordinates in the
//! volume frame (µm).

use std::fs;
use std::path::Path;

use onh_core::geometry::{LabelVolume, Point3, LABEL_COUNT};

use crate::bytes::Reader;
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"ONHV";
pub const VERSION: u32 = 1;
const BMO_MARKER: u8 = 0xB0;

/// Spacing and BMO coordinates are stored as f32, so values that are not
/// exactly representable are rounded.
pub fn encode_volume(vol: &LabelVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(33 + vol.labels().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in vol.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in vol.spacing() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out.push(LABEL_COUNT);
    out.extend_from_slice(vol.labels());
    if let Some(bmo) = vol.bmo_points() {
        out.push(BMO_MARKER);
        out.extend_from_slice(&(bmo.len() as u32).to_le_bytes());
        for c in bmo.iter().flatten() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_volume(buf: &[u8]) -> Result<LabelVolume> {
    let mut r = Reader::new(buf);
    r.header(MAGIC, VERSION)?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.u32("dims")? as usize;
    }
    let mut spacing = [0f64; 3];
    for s in &mut spacing {
        let at = r.offset();
        let v = r.f32("spacing")?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Format {
                offset: at,
                message: format!("voxel spacing must be positive, got {v}"),
            });
        }
        *s = v as f64;
    }
    let at = r.offset();
    let label_count = r.u8("label count")?;
    if label_count == 0 || label_count > LABEL_COUNT {
        return Err(Error::Format {
            offset: at,
            message: format!("label count {label_count} outside 1..={LABEL_COUNT}"),
        });
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format {
            offset: 4,
            message: format!("dims {dims:?} overflow"),
        })?;
    let start = r.offset();
    let labels = r.take(n, "label payload")?;
    if let Some(i) = labels.iter().position(|&l| l >= label_count) {
        return Err(Error::Format {
            offset: start + i as u64,
            message: format!("label {} not below label count {label_count}", labels[i]),
        });
    }
    let mut bmo = None;
    if r.remaining() > 0 {
        let at = r.offset();
        let marker = r.u8("BMO marker")?;
        if marker != BMO_MARKER {
            return Err(Error::Format {
                offset: at,
                message: format!("unexpected byte {marker:#04x} after label payload"),
            });
        }
        let count = r.u32("BMO count")? as usize;
        if r.remaining() != count * 12 {
            return r.fail(format!(
                "BMO block holds {} bytes, {count} points need {}",
                r.remaining(),
                count * 12
            ));
        }
        let mut pts: Vec<Point3> = Vec::with_capacity(count);
        for _ in 0..count {
            pts.push([
                r.f32("BMO")? as f64,
                r.f32("BMO")? as f64,
                r.f32("BMO")? as f64,
            ]);
        }
        bmo = Some(pts);
    }
    LabelVolume::new(dims, spacing, labels.to_vec(), bmo).map_err(Error::from)
}

pub fn write_volume(path: &Path, vol: &LabelVolume) -> Result<()> {
    fs::write(path, encode_volume(vol)).map_err(io_err(path))
}

pub fn read_volume(path: &Path) -> Result<LabelVolume> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode_volume(&buf)
}
