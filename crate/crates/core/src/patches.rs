//! Sliding-window geometry, training-patch sampling, overlap-averaged
//! stitching and assembly of district outputs into one body.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::districts::{overlap_count, DistrictBundle};
use crate::error::{Error, Result};
use crate::volume::{linear_index, voxel_count, BinaryMask, Dims, Geometry, MaskScope, Volume};

pub const DEFAULT_PATCH_SIZE: usize = 32;
pub const DEFAULT_OVERLAP: usize = 16;
pub const DEFAULT_MIN_IN_DISTRICT_FRACTION: f64 = 0.05;
pub const REJECTION_BUDGET: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub dims: Dims,
    pub patch_size: usize,
    pub overlap: usize,
    pub starts: Vec<[usize; 3]>,
}

/// Window starts along one axis: multiples of `s - o` that fit, plus a final
/// start clamped to `dim - s` if the strided ones leave a tail uncovered.
pub fn axis_starts(dim: usize, s: usize, o: usize) -> Vec<usize> {
    let stride = s - o;
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&st| st + s <= dim)
        .collect();
    if let Some(&last) = starts.last() {
        if last + s < dim {
            starts.push(dim - s);
        }
    }
    starts
}

pub fn patch_grid(dims: Dims, s: usize, o: usize) -> Result<PatchGrid> {
    if s == 0 || o >= s {
        return Err(Error::Parameter(format!(
            "need 0 <= overlap < patch size, got s={s}, o={o}"
        )));
    }
    if let Some(a) = (0..3).find(|&a| dims[a] < s) {
        return Err(Error::Size(format!(
            "axis {a} has {} voxels, fewer than the patch size {s}; pad the volume first",
            dims[a]
        )));
    }
    let per_axis: Vec<Vec<usize>> = (0..3).map(|a| axis_starts(dims[a], s, o)).collect();
    let mut starts = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &k in &per_axis[2] {
        for &j in &per_axis[1] {
            for &i in &per_axis[0] {
                starts.push([i, j, k]);
            }
        }
    }
    Ok(PatchGrid {
        dims,
        patch_size: s,
        overlap: o,
        starts,
    })
}

/// Copies the `s`³ block at `origin` out of an x-fastest grid.
pub fn extract_patch<T: Copy>(data: &[T], dims: Dims, origin: [usize; 3], s: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(s * s * s);
    for z in origin[2]..origin[2] + s {
        for y in origin[1]..origin[1] + s {
            let row = linear_index(dims, origin[0], y, z);
            out.extend_from_slice(&data[row..row + s]);
        }
    }
    out
}

/// A paired training sample. `mask` marks in-region voxels of the patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub ct: Vec<f32>,
    pub pet: Vec<f32>,
    pub mask: Vec<bool>,
    pub origin: [usize; 3],
    pub scope: MaskScope,
}

/// Summed-volume table for O(1) box counts of set mask voxels.
struct BoxCounter {
    dims: Dims,
    table: Vec<u32>,
}

impl BoxCounter {
    fn new(mask: &BinaryMask) -> Self {
        let d = mask.dims();
        let td = [d[0] + 1, d[1] + 1, d[2] + 1];
        let mut table = vec![0u32; voxel_count(td)];
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let v = mask.get(x, y, z) as u32;
                    let at = |a: usize, b: usize, c: usize| table[linear_index(td, a, b, c)];
                    let s = v + at(x, y + 1, z + 1) + at(x + 1, y, z + 1) + at(x + 1, y + 1, z)
                        - at(x, y, z + 1)
                        - at(x, y + 1, z)
                        - at(x + 1, y, z)
                        + at(x, y, z);
                    table[linear_index(td, x + 1, y + 1, z + 1)] = s;
                }
            }
        }
        Self { dims: td, table }
    }

    fn count(&self, o: [usize; 3], s: usize) -> u32 {
        let at = |a: usize, b: usize, c: usize| self.table[linear_index(self.dims, a, b, c)] as i64;
        let [x0, y0, z0] = o;
        let [x1, y1, z1] = [x0 + s, y0 + s, z0 + s];
        (at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0)
            + at(x0, y0, z1)
            + at(x0, y1, z0)
            + at(x1, y0, z0)
            - at(x0, y0, z0)) as u32
    }
}

/// Draws `count` patch origins uniformly over valid positions, rejecting
/// windows whose in-mask fraction is below `min_fraction`.
pub fn sample_origins(
    mask: &BinaryMask,
    s: usize,
    count: usize,
    min_fraction: f64,
    rng: &mut impl Rng,
) -> Result<Vec<[usize; 3]>> {
    if !(0.0..=1.0).contains(&min_fraction) {
        return Err(Error::Parameter(format!(
            "min in-district fraction {min_fraction} outside [0, 1]"
        )));
    }
    let dims = mask.dims();
    if dims.iter().any(|&d| d < s) {
        return Err(Error::Size(format!(
            "grid {dims:?} smaller than patch size {s}; pad first"
        )));
    }
    let counter = BoxCounter::new(mask);
    let need = (min_fraction * (s * s * s) as f64).ceil() as u32;
    let mut origins = Vec::with_capacity(count);
    for _ in 0..count {
        let mut found = None;
        for _ in 0..REJECTION_BUDGET {
            let o = [
                rng.random_range(0..=dims[0] - s),
                rng.random_range(0..=dims[1] - s),
                rng.random_range(0..=dims[2] - s),
            ];
            if counter.count(o, s) >= need {
                found = Some(o);
                break;
            }
        }
        match found {
            Some(o) => origins.push(o),
            None => {
                return Err(Error::Sampling(format!(
                    "no {s}³ window with >= {min_fraction} in-region voxels after {REJECTION_BUDGET} draws"
                )))
            }
        }
    }
    Ok(origins)
}

pub fn cut_pair(b: &DistrictBundle, pet: &Volume, origin: [usize; 3], s: usize) -> PatchPair {
    let dims = b.ct.dims();
    PatchPair {
        ct: extract_patch(b.ct.data(), dims, origin, s),
        pet: extract_patch(pet.data(), dims, origin, s),
        mask: extract_patch(b.mask.indicator(), dims, origin, s),
        origin,
        scope: b.scope,
    }
}

/// Random paired patches from a bundle, deterministic in `seed`.
pub fn sample_training_patches(
    b: &DistrictBundle,
    s: usize,
    count: usize,
    min_fraction: f64,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    let pet = b
        .pet
        .as_ref()
        .ok_or_else(|| Error::Sampling("bundle has no PET volume to pair with".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origins = sample_origins(&b.mask, s, count, min_fraction, &mut rng)?;
    Ok(origins
        .into_iter()
        .map(|o| cut_pair(b, pet, o, s))
        .collect())
}

/// Overlap-averaging accumulator: 64-bit sums plus integer coverage counts.
#[derive(Debug, Clone)]
pub struct Stitcher {
    dims: Dims,
    patch_size: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl Stitcher {
    pub fn new(dims: Dims, patch_size: usize) -> Self {
        let n = voxel_count(dims);
        Self {
            dims,
            patch_size,
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn add(&mut self, origin: [usize; 3], values: &[f32]) -> Result<()> {
        let s = self.patch_size;
        if values.len() != s * s * s {
            return Err(Error::Shape(format!(
                "patch has {} values, expected {}",
                values.len(),
                s * s * s
            )));
        }
        if (0..3).any(|a| origin[a] + s > self.dims[a]) {
            return Err(Error::Shape(format!(
                "patch at {origin:?} exceeds grid {:?}",
                self.dims
            )));
        }
        let mut it = values.iter();
        for z in origin[2]..origin[2] + s {
            for y in origin[1]..origin[1] + s {
                let row = linear_index(self.dims, origin[0], y, z);
                for i in row..row + s {
                    self.sum[i] += *it.next().unwrap() as f64;
                    self.count[i] += 1;
                }
            }
        }
        Ok(())
    }

    /// Merges another accumulator over the same grid (for partitioned,
    /// parallel accumulation).
    pub fn merge(&mut self, other: &Stitcher) -> Result<()> {
        if other.dims != self.dims || other.patch_size != self.patch_size {
            return Err(Error::Shape("stitchers over different grids".into()));
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        Ok(())
    }

    /// Averages covered voxels. With `fill = None` an uncovered voxel is an
    /// error; otherwise it takes the fill value.
    pub fn finish_with(self, fill: Option<f32>) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.sum.len());
        for (i, (&s, &c)) in self.sum.iter().zip(&self.count).enumerate() {
            if c == 0 {
                match fill {
                    Some(v) => out.push(v),
                    None => {
                        return Err(Error::Coverage {
                            index: crate::volume::voxel_coords(self.dims, i),
                        })
                    }
                }
            } else {
                out.push((s / c as f64) as f32);
            }
        }
        Ok(out)
    }

    pub fn finish(self) -> Result<Vec<f32>> {
        self.finish_with(None)
    }
}

/// Averages overlapping patches back onto a `dims` grid.
pub fn stitch(patches: &[(Vec<f32>, [usize; 3])], dims: Dims, s: usize) -> Result<Vec<f32>> {
    let mut st = Stitcher::new(dims, s);
    for (values, origin) in patches {
        st.add(*origin, values)?;
    }
    st.finish()
}

/// Places each district output inside its mask; background is 0.
pub fn assemble(districts: &[(&Volume, &BinaryMask)], geometry: &Volume) -> Result<Volume> {
    let dims = geometry.dims();
    for (v, m) in districts {
        if v.dims() != dims || m.dims() != dims {
            return Err(Error::Shape(format!(
                "district grid {:?}/{:?} vs {dims:?}",
                v.dims(),
                m.dims()
            )));
        }
    }
    let masks: Vec<&BinaryMask> = districts.iter().map(|(_, m)| *m).collect();
    let overlap = overlap_count(&masks)?;
    if overlap > 0 {
        return Err(Error::Partition(format!(
            "{overlap} voxels belong to more than one district"
        )));
    }
    let mut out = vec![0.0f32; voxel_count(dims)];
    for (v, m) in districts {
        for ((o, &x), &inside) in out.iter_mut().zip(v.data()).zip(m.indicator()) {
            if inside {
                *o = x;
            }
        }
    }
    geometry.with_data(out)
}

/// Zero-padding applied on each axis: `before` leading, `after` trailing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadRecord {
    pub original: Dims,
    pub before: [usize; 3],
    pub after: [usize; 3],
}

impl PadRecord {
    pub fn for_min(dims: Dims, s: usize) -> Self {
        let mut before = [0; 3];
        let mut after = [0; 3];
        for a in 0..3 {
            let total = s.saturating_sub(dims[a]);
            before[a] = total / 2;
            after[a] = total - before[a];
        }
        Self {
            original: dims,
            before,
            after,
        }
    }

    pub fn padded_dims(&self) -> Dims {
        [0, 1, 2].map(|a| self.original[a] + self.before[a] + self.after[a])
    }

    pub fn is_identity(&self) -> bool {
        self.before == [0; 3] && self.after == [0; 3]
    }

    pub fn pad<T: Copy>(&self, data: &[T], zero: T) -> Vec<T> {
        let pd = self.padded_dims();
        let d = self.original;
        let mut out = vec![zero; voxel_count(pd)];
        for z in 0..d[2] {
            for y in 0..d[1] {
                let src = linear_index(d, 0, y, z);
                let dst = linear_index(pd, self.before[0], y + self.before[1], z + self.before[2]);
                out[dst..dst + d[0]].copy_from_slice(&data[src..src + d[0]]);
            }
        }
        out
    }

    pub fn unpad<T: Copy>(&self, data: &[T]) -> Vec<T> {
        let pd = self.padded_dims();
        let d = self.original;
        let mut out = Vec::with_capacity(voxel_count(d));
        for z in 0..d[2] {
            for y in 0..d[1] {
                let src = linear_index(pd, self.before[0], y + self.before[1], z + self.before[2]);
                out.extend_from_slice(&data[src..src + d[0]]);
            }
        }
        out
    }
}

/// Zero-pads a volume so every axis is at least `s`. The origin shifts so
/// original voxels keep their physical positions.
pub fn pad_to_min(v: &Volume, s: usize) -> Result<(Volume, PadRecord)> {
    let rec = PadRecord::for_min(v.dims(), s);
    if rec.is_identity() {
        return Ok((v.clone(), rec));
    }
    let g = v.geometry();
    let origin = [0, 1, 2].map(|a| g.origin[a] - rec.before[a] as f64 * g.spacing[a]);
    let geometry = Geometry::new(rec.padded_dims(), g.spacing, origin)?;
    let padded = Volume::new(geometry, v.modality(), v.unit(), rec.pad(v.data(), 0.0))?;
    Ok((padded, rec))
}

pub fn pad_mask_to_min(m: &BinaryMask, s: usize) -> (BinaryMask, PadRecord) {
    let rec = PadRecord::for_min(m.dims(), s);
    let padded = BinaryMask::from_parts_unchecked(
        rec.padded_dims(),
        m.scope(),
        rec.pad(m.indicator(), false),
    );
    (padded, rec)
}

pub fn unpad(v: &Volume, rec: &PadRecord) -> Result<Volume> {
    if v.dims() != rec.padded_dims() {
        return Err(Error::Shape(format!(
            "volume {:?} is not the padded grid {:?}",
            v.dims(),
            rec.padded_dims()
        )));
    }
    if rec.is_identity() {
        return Ok(v.clone());
    }
    let g = v.geometry();
    let origin = [0, 1, 2].map(|a| g.origin[a] + rec.before[a] as f64 * g.spacing[a]);
    let geometry = Geometry::new(rec.original, g.spacing, origin)?;
    Volume::new(geometry, v.modality(), v.unit(), rec.unpad(v.data()))
}
