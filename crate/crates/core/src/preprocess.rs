//! CT/PET preparation: trilinear resampling, rigid-transform application,
//! SUV conversion and intensity normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{linear_index, Dims, Geometry, IntensityUnit, Modality, Volume};

/// Upper end of the PET SUV window mapped onto [0, 1].
pub const SUV_WINDOW_MAX: f32 = 20.0;

const EXTENT_EPS: f64 = 1e-6;

/// Trilinear sample at a continuous voxel index; `None` outside the grid.
pub(crate) fn sample_trilinear(data: &[f32], dims: Dims, c: [f64; 3]) -> Option<f64> {
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        if c[a] < -EXTENT_EPS || c[a] > hi + EXTENT_EPS {
            return None;
        }
        let ca = c[a].clamp(0.0, hi);
        if dims[a] == 1 {
            continue;
        }
        let i0 = (ca.floor() as usize).min(dims[a] - 2);
        base[a] = i0;
        frac[a] = ca - i0 as f64;
    }
    let mut acc = 0.0;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
        if wz == 0.0 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            if wy == 0.0 {
                continue;
            }
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                if wx == 0.0 {
                    continue;
                }
                let i = linear_index(dims, base[0] + dx, base[1] + dy, base[2] + dz);
                acc += wx * wy * wz * data[i] as f64;
            }
        }
    }
    Some(acc)
}

/// Nearest-neighbour sample at a continuous voxel index; `None` outside.
pub(crate) fn sample_nearest<T: Copy>(data: &[T], dims: Dims, c: [f64; 3]) -> Option<T> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = c[a].round();
        if r < 0.0 || r > (dims[a] - 1) as f64 {
            return None;
        }
        idx[a] = r as usize;
    }
    Some(data[linear_index(dims, idx[0], idx[1], idx[2])])
}

/// Resamples `v` onto `target`; samples outside the source extent are 0.
pub fn resample_trilinear(v: &Volume, target: &Geometry) -> Result<Volume> {
    let target = Geometry::new(target.dims, target.spacing, target.origin)?;
    let src = v.geometry();
    let mut out = Vec::with_capacity(target.len());
    for z in 0..target.dims[2] {
        for y in 0..target.dims[1] {
            for x in 0..target.dims[0] {
                let c = src.continuous_index(target.position(x, y, z));
                out.push(sample_trilinear(v.data(), src.dims, c).unwrap_or(0.0) as f32);
            }
        }
    }
    Volume::new(target, v.modality(), v.unit(), out)
}

/// Maps moving-image physical points onto reference space: `p = R q + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl RigidTransform {
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        const TOL: f64 = 1e-5;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > TOL {
                    return Err(Error::Parameter(format!(
                        "rotation is not orthonormal (RᵀR[{i}][{j}] = {dot})"
                    )));
                }
            }
        }
        let r = &rotation;
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > TOL {
            return Err(Error::Parameter(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::Parameter("translation must be finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation by `angle` radians about the z axis through `center`.
    pub fn rotation_z(angle: f64, center: [f64; 3]) -> Self {
        let (s, c) = angle.sin_cos();
        let rotation = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let rc = mat_vec(&rotation, center);
        Self {
            rotation,
            translation: [center[0] - rc[0], center[1] - rc[1], center[2] - rc[2]],
        }
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        self.rotation
    }

    pub fn translation_vector(&self) -> [f64; 3] {
        self.translation
    }

    /// Moving-space point that lands on reference point `p`.
    pub fn inverse_apply(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Resamples `v` onto `reference` after moving it by `t`.
pub fn apply_rigid(v: &Volume, t: &RigidTransform, reference: &Geometry) -> Result<Volume> {
    // Re-validate: a transform deserialized from disk bypasses `new`.
    let t = RigidTransform::new(t.rotation, t.translation)?;
    let reference = Geometry::new(reference.dims, reference.spacing, reference.origin)?;
    let src = v.geometry();
    let mut out = Vec::with_capacity(reference.len());
    for z in 0..reference.dims[2] {
        for y in 0..reference.dims[1] {
            for x in 0..reference.dims[0] {
                let q = t.inverse_apply(reference.position(x, y, z));
                let c = src.continuous_index(q);
                out.push(sample_trilinear(v.data(), src.dims, c).unwrap_or(0.0) as f32);
            }
        }
    }
    Volume::new(reference, v.modality(), v.unit(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuvParams {
    pub body_weight_kg: f64,
    /// Decay-corrected to scan start.
    pub injected_dose_bq: f64,
}

impl SuvParams {
    pub fn new(body_weight_kg: f64, injected_dose_bq: f64) -> Result<Self> {
        let p = Self {
            body_weight_kg,
            injected_dose_bq,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.body_weight_kg > 0.0 && self.body_weight_kg.is_finite()) {
            return Err(Error::Parameter(format!(
                "body weight must be > 0, got {}",
                self.body_weight_kg
            )));
        }
        if !(self.injected_dose_bq > 0.0 && self.injected_dose_bq.is_finite()) {
            return Err(Error::Parameter(format!(
                "injected dose must be > 0, got {}",
                self.injected_dose_bq
            )));
        }
        Ok(())
    }
}

/// Body-weight SUV assuming 1 g/mL tissue density.
pub fn suv_convert(v: &Volume, p: &SuvParams) -> Result<Volume> {
    p.validate()?;
    v.require_unit(IntensityUnit::BqPerMl)?;
    let factor = p.body_weight_kg * 1000.0 / p.injected_dose_bq;
    let data = v
        .data()
        .iter()
        .map(|&c| (c as f64 * factor) as f32)
        .collect();
    Volume::new(*v.geometry(), v.modality(), v.unit(), data)?
        .relabel(v.modality(), IntensityUnit::Suv)
}

/// Clamps SUV to [0, 20] and divides by 20.
pub fn clamp_normalize_pet(v: &Volume) -> Result<Volume> {
    v.require_unit(IntensityUnit::Suv)?;
    let data = v
        .data()
        .iter()
        .map(|&s| s.clamp(0.0, SUV_WINDOW_MAX) / SUV_WINDOW_MAX)
        .collect();
    Volume::new(*v.geometry(), v.modality(), IntensityUnit::Normalized, data)
}

/// Per-volume min-max scaling of a CT in HU. Constant volumes map to 0.
pub fn normalize_ct(v: &Volume) -> Result<Volume> {
    v.require_unit(IntensityUnit::Hu)?;
    let (lo, hi) = v
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let range = hi as f64 - lo as f64;
    let data = if range > 0.0 {
        v.data()
            .iter()
            .map(|&x| (((x as f64 - lo as f64) / range) as f32).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; v.data().len()]
    };
    Volume::new(*v.geometry(), Modality::Ct, IntensityUnit::Normalized, data)
}
