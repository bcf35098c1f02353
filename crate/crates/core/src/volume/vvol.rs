//! Native `.vvol` format: a JSON header file next to a raw little-endian
//! payload (`<stem>.raw`) stored x-fastest. Layout is documented in
//! `docs/formats.md`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Geometry, IntensityUnit, Modality, Volume};
use crate::error::{Error, Result};

const FORMAT_TAG: &str = "vvol";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: String,
    endianness: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    modality: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unit: Option<IntensityUnit>,
    payload: String,
}

fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

fn write_header(path: &Path, header: &Header) -> Result<()> {
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_header(path: &Path) -> Result<(Header, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::format("header", e.to_string()))?;
    if header.format != FORMAT_TAG {
        return Err(Error::format(
            "format",
            format!("expected \"vvol\", found {:?}", header.format),
        ));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::format(
            "version",
            format!(
                "unsupported version {} (supported: {FORMAT_VERSION})",
                header.version
            ),
        ));
    }
    if header.endianness != "little" {
        return Err(Error::format(
            "endianness",
            format!("unsupported {:?}", header.endianness),
        ));
    }
    let raw_path = path
        .parent()
        .map(|d| d.join(&header.payload))
        .unwrap_or_else(|| PathBuf::from(&header.payload));
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    Ok((header, bytes))
}

fn expect_bytes(header: &Header, width: usize, actual: usize) -> Result<()> {
    let expected = header.dims.iter().product::<usize>() * width;
    if expected != actual {
        return Err(Error::format(
            "payload",
            format!(
                "expected {expected} bytes for dims {:?}, found {actual}",
                header.dims
            ),
        ));
    }
    Ok(())
}

fn geometry_of(header: &Header) -> Result<Geometry> {
    Geometry::new(header.dims, header.spacing, header.origin)
        .map_err(|e| Error::format("dims/spacing", e.to_string()))
}

/// Writes `v` to `path` (the header) and `path.with_extension("raw")`.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = payload_path(path);
    let g = v.geometry();
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        dims: g.dims,
        spacing: g.spacing,
        origin: g.origin,
        dtype: "f32".into(),
        endianness: "little".into(),
        modality: Some(v.modality()),
        unit: Some(v.unit()),
        payload: raw.file_name().unwrap().to_string_lossy().into_owned(),
    };
    write_header(path, &header)?;
    let mut bytes = Vec::with_capacity(v.data().len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (header, bytes) = read_header(path.as_ref())?;
    if header.dtype != "f32" {
        return Err(Error::format(
            "dtype",
            format!("expected \"f32\", found {:?}", header.dtype),
        ));
    }
    expect_bytes(&header, 4, bytes.len())?;
    let geometry = geometry_of(&header)?;
    let modality = header
        .modality
        .ok_or_else(|| Error::format("modality", "missing"))?;
    let unit = header
        .unit
        .ok_or_else(|| Error::format("unit", "missing"))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(geometry, modality, unit, data).map_err(|e| Error::format("payload", e.to_string()))
}

/// Writes an 8-bit label grid (district labels or a binary mask).
pub fn write_labels(geometry: &Geometry, labels: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if labels.len() != geometry.len() {
        return Err(Error::Shape(format!(
            "label payload has {} voxels, dims {:?} need {}",
            labels.len(),
            geometry.dims,
            geometry.len()
        )));
    }
    let raw = payload_path(path);
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        dims: geometry.dims,
        spacing: geometry.spacing,
        origin: geometry.origin,
        dtype: "u8".into(),
        endianness: "little".into(),
        modality: None,
        unit: None,
        payload: raw.file_name().unwrap().to_string_lossy().into_owned(),
    };
    write_header(path, &header)?;
    fs::write(&raw, labels).map_err(|e| Error::io(&raw, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<(Geometry, Vec<u8>)> {
    let (header, bytes) = read_header(path.as_ref())?;
    if header.dtype != "u8" {
        return Err(Error::format(
            "dtype",
            format!("expected \"u8\", found {:?}", header.dtype),
        ));
    }
    expect_bytes(&header, 1, bytes.len())?;
    Ok((geometry_of(&header)?, bytes))
}
