//! NIfTI-1 import for single-file `.nii` / `.nii.gz` images, plus a plain
//! float32 export.
//!
//! The importer honors `dim`, `pixdim`, `scl_slope`/`scl_inter` and the integer/float
//! datatypes that clinical CT/PET exports use. Orientation beyond the voxel
//! origin (qform/sform rotation) is not applied.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Geometry, IntensityUnit, Modality, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;

#[derive(Debug, Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn raw<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        if matches!(self.endian, Endian::Big) {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.raw(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.raw(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.raw(at))
    }
}

struct Parsed {
    geometry: Geometry,
    values: Vec<f64>,
}

fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(
            "sizeof_hdr",
            format!("file has {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        ));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let endian = if le == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::format(
            "sizeof_hdr",
            format!("expected 348, found {le}"),
        ));
    };
    let r = Reader { bytes, endian };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::format(
            "magic",
            "only single-file NIfTI-1 (n+1) is supported",
        ));
    }

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(
            "dim",
            format!("dim[0] = {ndim} out of range"),
        ));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let n = r.i16(42 + 2 * a as usize);
        if n < 1 {
            return Err(Error::format("dim", format!("dim[{}] = {n}", a + 1)));
        }
        *d = n as usize;
    }
    for a in 3..ndim as usize {
        if r.i16(42 + 2 * a) > 1 {
            return Err(Error::format("dim", "only 3D images are supported"));
        }
    }
    let mut spacing = [1.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let p = r.f32(80 + 4 * a).abs() as f64;
        if p > 0.0 {
            *s = p;
        }
    }
    let qform = r.i16(252);
    let sform = r.i16(254);
    let origin = if qform > 0 {
        [r.f32(268) as f64, r.f32(272) as f64, r.f32(276) as f64]
    } else if sform > 0 {
        [r.f32(292) as f64, r.f32(308) as f64, r.f32(324) as f64]
    } else {
        [0.0; 3]
    };

    let datatype = r.i16(70);
    let width = match datatype {
        2 => 1,
        4 | 512 => 2,
        8 | 16 => 4,
        64 => 8,
        other => {
            return Err(Error::format(
                "datatype",
                format!("unsupported NIfTI datatype {other}"),
            ))
        }
    };
    let offset = r.f32(108) as usize;
    let n = dims.iter().product::<usize>();
    let need = offset.max(HEADER_SIZE) + n * width;
    if bytes.len() < need {
        return Err(Error::format(
            "payload",
            format!("expected at least {need} bytes, found {}", bytes.len()),
        ));
    }
    let body = Reader {
        bytes: &bytes[offset.max(HEADER_SIZE)..],
        endian,
    };
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let at = i * width;
            match datatype {
                2 => body.bytes[at] as f64,
                4 => body.i16(at) as f64,
                512 => u16::from_le_bytes(body.raw(at)) as f64,
                8 => body.i32(at) as f64,
                16 => body.f32(at) as f64,
                _ => f64::from_le_bytes(body.raw(at)),
            }
        })
        .collect();

    let mut slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let values = raw.into_iter().map(|v| v * slope + inter).collect();
    let geometry =
        Geometry::new(dims, spacing, origin).map_err(|e| Error::format("pixdim", e.to_string()))?;
    Ok(Parsed { geometry, values })
}

/// Imports a scalar NIfTI-1 image, applying `scl_slope`/`scl_inter`.
pub fn read_nifti(
    path: impl AsRef<Path>,
    modality: Modality,
    unit: IntensityUnit,
) -> Result<Volume> {
    let parsed = parse(&load_bytes(path.as_ref())?)?;
    let data = parsed.values.into_iter().map(|v| v as f32).collect();
    Volume::new(parsed.geometry, modality, unit, data)
}

/// Imports an integer segmentation image as raw source labels.
pub fn read_nifti_labels(path: impl AsRef<Path>) -> Result<(Geometry, Vec<i64>)> {
    let parsed = parse(&load_bytes(path.as_ref())?)?;
    let labels = parsed.values.iter().map(|v| v.round() as i64).collect();
    Ok((parsed.geometry, labels))
}

/// Writes `values` on `geometry` as an uncompressed float32 NIfTI-1 file
/// (`qform_code` 1, origin in the quaternion offsets, no rotation).
pub fn write_nifti_f32(geometry: &Geometry, values: &[f32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if values.len() != geometry.len() {
        return Err(Error::Shape(format!(
            "{} values for dims {:?}",
            values.len(),
            geometry.dims
        )));
    }
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    h[76..80].copy_from_slice(&1f32.to_le_bytes());
    for a in 0..3 {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&(geometry.dims[a] as i16).to_le_bytes());
        h[80 + 4 * a..84 + 4 * a].copy_from_slice(&(geometry.spacing[a] as f32).to_le_bytes());
        h[268 + 4 * a..272 + 4 * a].copy_from_slice(&(geometry.origin[a] as f32).to_le_bytes());
    }
    h[70..72].copy_from_slice(&16i16.to_le_bytes());
    h[72..74].copy_from_slice(&32i16.to_le_bytes());
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[112..116].copy_from_slice(&1f32.to_le_bytes());
    h[252..254].copy_from_slice(&1i16.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(values.len() * 4);
    for v in values {
        h.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, h).map_err(|e| Error::io(path, e))
}
