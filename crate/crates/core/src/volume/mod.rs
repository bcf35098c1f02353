//! Volumetric data model shared by every stage of the pipeline.
//!
//! Voxel storage is x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Intensities are `f32`; anything that reduces a
//! volume to a statistic accumulates in `f64`.

mod nifti;
mod vvol;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use nifti::{read_nifti, read_nifti_labels, write_nifti_f32};
pub use vvol::{read_labels, read_volume, write_labels, write_volume};

pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

#[inline]
pub fn voxel_coords(dims: Dims, index: usize) -> [usize; 3] {
    let x = index % dims[0];
    let rest = index / dims[0];
    [x, rest % dims[1], rest / dims[1]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "PET")]
    Pet,
    #[serde(rename = "SYNTH_PET")]
    SynthPet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntensityUnit {
    #[serde(rename = "HU")]
    Hu,
    #[serde(rename = "BQ_PER_ML")]
    BqPerMl,
    #[serde(rename = "SUV")]
    Suv,
    #[serde(rename = "NORMALIZED")]
    Normalized,
}

impl std::fmt::Display for IntensityUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            IntensityUnit::Hu => "HU",
            IntensityUnit::BqPerMl => "BQ_PER_ML",
            IntensityUnit::Suv => "SUV",
            IntensityUnit::Normalized => "NORMALIZED",
        };
        f.write_str(s)
    }
}

/// Voxel grid placement in patient space (millimetres). `origin` is the
/// physical position of the centre of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: Dims, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Parameter(format!(
                "grid dims must be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!(
                "grid spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Parameter(format!(
                "grid origin must be finite, got {origin:?}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: Dims) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn len(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Physical position of a voxel centre.
    pub fn position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel index of a physical point.
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }
}

/// A scalar 3D image: CT, PET, or synthetic PET.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    modality: Modality,
    unit: IntensityUnit,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        geometry: Geometry,
        modality: Modality,
        unit: IntensityUnit,
        data: Vec<f32>,
    ) -> Result<Self> {
        let geometry = Geometry::new(geometry.dims, geometry.spacing, geometry.origin)?;
        if data.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "payload has {} voxels but dims {:?} need {}",
                data.len(),
                geometry.dims,
                geometry.len()
            )));
        }
        check_unit_range(unit, &data)?;
        Ok(Self {
            geometry,
            modality,
            unit,
            data,
        })
    }

    pub fn filled(
        geometry: Geometry,
        modality: Modality,
        unit: IntensityUnit,
        value: f32,
    ) -> Result<Self> {
        Self::new(geometry, modality, unit, vec![value; geometry.len()])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> Dims {
        self.geometry.dims
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn unit(&self) -> IntensityUnit {
        self.unit
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear_index(self.dims(), x, y, z)]
    }

    /// New volume with this volume's metadata and a replacement payload.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.geometry, self.modality, self.unit, data)
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub(crate) fn relabel(mut self, modality: Modality, unit: IntensityUnit) -> Result<Self> {
        check_unit_range(unit, &self.data)?;
        self.modality = modality;
        self.unit = unit;
        Ok(self)
    }

    pub fn require_unit(&self, unit: IntensityUnit) -> Result<()> {
        if self.unit != unit {
            return Err(Error::Unit {
                expected: unit.to_string(),
                found: self.unit.to_string(),
            });
        }
        Ok(())
    }
}

fn check_unit_range(unit: IntensityUnit, data: &[f32]) -> Result<()> {
    match unit {
        IntensityUnit::Normalized => {
            if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Parameter(format!(
                    "normalized volume contains {bad}, outside [0, 1]"
                )));
            }
        }
        IntensityUnit::Suv => {
            if let Some(bad) = data.iter().find(|v| !(**v >= 0.0)) {
                return Err(Error::Parameter(format!("SUV volume contains {bad} < 0")));
            }
        }
        _ => {}
    }
    Ok(())
}

/// One of the four anatomical districts. The discriminant is the label id
/// used in district label masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum District {
    Head = 1,
    Trunk = 2,
    Arms = 3,
    Legs = 4,
}

impl District {
    pub const ALL: [District; 4] = [
        District::Head,
        District::Trunk,
        District::Arms,
        District::Legs,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(District::Head),
            2 => Some(District::Trunk),
            3 => Some(District::Arms),
            4 => Some(District::Legs),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            District::Head => "head",
            District::Trunk => "trunk",
            District::Arms => "arms",
            District::Legs => "legs",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        District::ALL.into_iter().find(|d| d.name() == name)
    }
}

impl std::fmt::Display for District {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Voxel-wise district labels: 0 is background, 1..=4 are [`District`] ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistrictLabelMask {
    dims: Dims,
    labels: Vec<u8>,
}

impl DistrictLabelMask {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "label payload has {} voxels, dims {dims:?} need {}",
                labels.len(),
                voxel_count(dims)
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 4) {
            return Err(Error::Parameter(format!(
                "district label {bad} outside 0..=4"
            )));
        }
        Ok(Self { dims, labels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Indicator of all non-background voxels.
    pub fn body_mask(&self) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            scope: MaskScope::WholeBody,
            indicator: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    District(District),
    WholeBody,
    Lesion,
}

impl std::fmt::Display for MaskScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskScope::District(d) => write!(f, "{d}"),
            MaskScope::WholeBody => f.write_str("whole_body"),
            MaskScope::Lesion => f.write_str("lesion"),
        }
    }
}

/// A 0/1 voxel indicator on some grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    scope: MaskScope,
    indicator: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, scope: MaskScope, indicator: Vec<bool>) -> Result<Self> {
        if indicator.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "mask has {} voxels, dims {dims:?} need {}",
                indicator.len(),
                voxel_count(dims)
            )));
        }
        Ok(Self {
            dims,
            scope,
            indicator,
        })
    }

    pub fn filled(dims: Dims, scope: MaskScope, value: bool) -> Self {
        Self {
            dims,
            scope,
            indicator: vec![value; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn scope(&self) -> MaskScope {
        self.scope
    }

    pub fn indicator(&self) -> &[bool] {
        &self.indicator
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.indicator[linear_index(self.dims, x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.indicator.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.indicator.iter().any(|&b| b)
    }

    /// Inclusive bounding box `(min, max)` of set voxels, `None` if empty.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, _) in self.indicator.iter().enumerate().filter(|(_, &b)| b) {
            any = true;
            let c = voxel_coords(self.dims, i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        any.then_some((lo, hi))
    }

    pub(crate) fn from_parts_unchecked(dims: Dims, scope: MaskScope, indicator: Vec<bool>) -> Self {
        debug_assert_eq!(indicator.len(), voxel_count(dims));
        Self {
            dims,
            scope,
            indicator,
        }
    }
}

fn check_same_dims(a: Dims, b: Dims, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Element-wise product of a volume with a 0/1 mask.
pub fn mask_apply(v: &Volume, m: &BinaryMask) -> Result<Volume> {
    check_same_dims(v.dims(), m.dims(), "mask_apply")?;
    let data = v
        .data
        .iter()
        .zip(&m.indicator)
        .map(|(&x, &keep)| if keep { x } else { 0.0 })
        .collect();
    v.with_data(data)
}

/// Takes `src` where the mask is set and `dst` everywhere else. Metadata
/// comes from `dst`.
pub fn volume_union_overwrite(dst: &Volume, src: &Volume, m: &BinaryMask) -> Result<Volume> {
    check_same_dims(dst.dims(), src.dims(), "volume_union_overwrite")?;
    check_same_dims(dst.dims(), m.dims(), "volume_union_overwrite")?;
    let data = dst
        .data
        .iter()
        .zip(&src.data)
        .zip(&m.indicator)
        .map(|((&d, &s), &take)| if take { s } else { d })
        .collect();
    dst.with_data(data)
}
