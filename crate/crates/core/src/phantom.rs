//! Synthetic whole-body CT/PET phantoms with district-dependent CT→PET
//! transfer functions and trunk lesions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{save_patient, Condition, Manifest, PatientRecord, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::preprocess::SuvParams;
use crate::volume::{
    linear_index, BinaryMask, District, DistrictLabelMask, Dims, Geometry, IntensityUnit,
    MaskScope, Modality, Volume,
};

/// `T(x) = clamp(scale·x^power + offset, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transfer {
    pub scale: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "one")]
    pub power: f64,
}

fn one() -> f64 {
    1.0
}

impl Transfer {
    pub const fn linear(scale: f64, offset: f64) -> Self {
        Self {
            scale,
            offset,
            power: 1.0,
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        let p = if self.power == 1.0 { x } else { x.max(0.0).powf(self.power) };
        (self.scale * p + self.offset).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistrictTransfers {
    pub head: Transfer,
    pub trunk: Transfer,
    pub arms: Transfer,
    pub legs: Transfer,
}

impl Default for DistrictTransfers {
    fn default() -> Self {
        Self {
            head: Transfer::linear(0.8, 0.1),
            trunk: Transfer {
                scale: 1.0,
                offset: 0.0,
                power: 2.0,
            },
            arms: Transfer::linear(0.5, 0.0),
            legs: Transfer::linear(0.3, 0.15),
        }
    }
}

impl DistrictTransfers {
    /// The same map in every district.
    pub fn uniform(t: Transfer) -> Self {
        Self {
            head: t,
            trunk: t,
            arms: t,
            legs: t,
        }
    }

    pub fn get(&self, d: District) -> Transfer {
        match d {
            District::Head => self.head,
            District::Trunk => self.trunk,
            District::Arms => self.arms,
            District::Legs => self.legs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    pub transfers: DistrictTransfers,
    /// Per-district CT base intensity: head, trunk, arms, legs.
    pub ct_base: [f64; 4],
    /// Peak amplitude of the smooth CT texture.
    pub ct_texture: f64,
    pub ct_noise_sigma: f64,
    pub pet_noise_sigma: f64,
    /// Lesions per positive patient, inclusive range.
    pub lesion_count: [usize; 2],
    /// Lesion radius range in voxels.
    pub lesion_radius: [f64; 2],
    /// Added to CT inside lesions.
    pub lesion_ct_contrast: f64,
    /// Added to PET inside lesions.
    pub lesion_boost: f64,
    /// Every `negative_every`-th patient (index ≡ negative_every − 1) has no lesions.
    pub negative_every: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 160],
            spacing_mm: [4.0, 4.0, 4.0],
            transfers: DistrictTransfers::default(),
            ct_base: [0.55, 0.5, 0.45, 0.5],
            ct_texture: 0.12,
            ct_noise_sigma: 0.01,
            pet_noise_sigma: 0.005,
            lesion_count: [1, 3],
            lesion_radius: [3.0, 5.0],
            lesion_ct_contrast: 0.2,
            lesion_boost: 0.3,
            negative_every: 4,
            seed: 7,
        }
    }
}

/// Body parts in voxel units, derived from the grid size.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Body {
    c: [f64; 2],
    leg_x: [f64; 2],
    leg_r: f64,
    leg_z: [f64; 2],
    trunk_c: [f64; 3],
    trunk_ax: [f64; 3],
    head_c: [f64; 3],
    head_r: f64,
    arm_x: [f64; 2],
    arm_r: f64,
    arm_z: [f64; 2],
}

impl Body {
    fn new(d: Dims) -> Self {
        let [nx, ny, nz] = d.map(|v| v as f64);
        let c = [(nx - 1.0) / 2.0, (ny - 1.0) / 2.0];
        let trunk_c = [c[0], c[1], 0.60 * nz];
        let trunk_ax = [0.22 * nx, 0.17 * ny, 0.19 * nz];
        let head_r = 0.17 * nx;
        Self {
            c,
            leg_x: [c[0] - 0.12 * nx, c[0] + 0.12 * nx],
            leg_r: 0.09 * nx,
            leg_z: [0.03 * nz, 0.42 * nz],
            trunk_c,
            trunk_ax,
            head_c: [c[0], c[1], trunk_c[2] + trunk_ax[2] + 0.8 * head_r],
            head_r,
            arm_x: [c[0] - 0.36 * nx, c[0] + 0.36 * nx],
            arm_r: 0.09 * nx,
            arm_z: [0.38 * nz, 0.76 * nz],
        }
    }

    fn check(&self, d: Dims) -> Result<()> {
        if d.iter().any(|&v| v < 32) {
            return Err(Error::Config(format!("phantom dims {d:?} must be at least 32 per axis")));
        }
        let [nx, ny, nz] = d.map(|v| v as f64 - 1.0);
        let fits = self.arm_x[0] - self.arm_r >= 0.0
            && self.arm_x[1] + self.arm_r <= nx
            && self.c[1] - self.trunk_ax[1].max(self.head_r) >= 0.0
            && self.c[1] + self.trunk_ax[1].max(self.head_r) <= ny
            && self.head_c[2] + self.head_r <= nz;
        if !fits {
            return Err(Error::Config(format!("districts do not fit in {d:?}")));
        }
        Ok(())
    }

    /// District at a voxel centre; overlaps resolve head > trunk > arms > legs.
    fn district(&self, x: f64, y: f64, z: f64) -> Option<District> {
        let sq = |v: f64| v * v;
        let head = sq(x - self.head_c[0]) + sq(y - self.head_c[1]) + sq(z - self.head_c[2]) <= sq(self.head_r);
        if head {
            return Some(District::Head);
        }
        let t = sq((x - self.trunk_c[0]) / self.trunk_ax[0])
            + sq((y - self.trunk_c[1]) / self.trunk_ax[1])
            + sq((z - self.trunk_c[2]) / self.trunk_ax[2]);
        if t <= 1.0 {
            return Some(District::Trunk);
        }
        let in_limb = |cx: f64, r: f64, zr: [f64; 2]| z >= zr[0] && z <= zr[1] && sq(x - cx) + sq(y - self.c[1]) <= sq(r);
        if self.arm_x.iter().any(|&cx| in_limb(cx, self.arm_r, self.arm_z)) {
            return Some(District::Arms);
        }
        if self.leg_x.iter().any(|&cx| in_limb(cx, self.leg_r, self.leg_z)) {
            return Some(District::Legs);
        }
        None
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        Body::new(self.dims).check(self.dims)?;
        for (name, v) in [
            ("ct_texture", self.ct_texture),
            ("ct_noise_sigma", self.ct_noise_sigma),
            ("pet_noise_sigma", self.pet_noise_sigma),
            ("lesion_ct_contrast", self.lesion_ct_contrast),
            ("lesion_boost", self.lesion_boost),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.ct_base.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return bad("ct_base values must lie in [0, 1]".into());
        }
        if self.lesion_count[0] > self.lesion_count[1] {
            return bad(format!("lesion_count range {:?} is reversed", self.lesion_count));
        }
        let [r0, r1] = self.lesion_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!("lesion_radius range {:?} is invalid", self.lesion_radius));
        }
        if r1 >= Body::new(self.dims).trunk_ax.iter().cloned().fold(f64::INFINITY, f64::min) {
            return bad(format!("lesion radius {r1} does not fit inside the trunk"));
        }
        if self.negative_every == 0 {
            return bad("negative_every must be positive".into());
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return bad("spacing_mm must be positive".into());
        }
        Ok(())
    }

    fn is_negative(&self, index: usize) -> bool {
        index % self.negative_every == self.negative_every - 1
    }

    /// Condition implied by the lesion plan for `index`.
    pub fn condition(&self, index: usize) -> Condition {
        if self.is_negative(index) || self.lesion_count[1] == 0 {
            return Condition::NegativeControl;
        }
        let positives_before = index - index / self.negative_every;
        Condition::MALIGNANT[positives_before % 3]
    }
}

/// Smooth texture: a sum of three plane waves with random orientation,
/// wavelength (12–32 voxels) and phase, scaled to peak `amp`.
struct Texture {
    waves: Vec<([f64; 3], f64)>,
    amp: f64,
}

impl Texture {
    fn new(amp: f64, rng: &mut impl Rng) -> Self {
        let waves = (0..3)
            .map(|_| {
                let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
                let k = std::f64::consts::TAU / rng.random_range(12.0..32.0);
                (dir.map(|v| v / n * k), rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { waves, amp }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin())
            .sum();
        self.amp * s / self.waves.len() as f64
    }
}

fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn patient_id(index: usize) -> String {
    format!("phantom_{index:03}")
}

/// One phantom patient; deterministic in `(c.seed, index)`. The split is
/// set to `Train` and assigned later by [`phantom_records`].
pub fn generate_phantom(c: &PhantomConfig, index: usize) -> Result<PatientRecord> {
    c.validate()?;
    let dims = c.dims;
    let body = Body::new(dims);
    let mut rng = patient_rng(c.seed, index);
    let n = dims.iter().product::<usize>();

    let mut labels = vec![0u8; n];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if let Some(d) = body.district(x as f64, y as f64, z as f64) {
                    labels[linear_index(dims, x, y, z)] = d.id();
                }
            }
        }
    }

    // Lesions: spheres fully inside the trunk.
    let n_lesions = if c.is_negative(index) {
        0
    } else {
        rng.random_range(c.lesion_count[0]..=c.lesion_count[1])
    };
    let mut lesions: Vec<([f64; 3], f64)> = Vec::with_capacity(n_lesions);
    let trunk_id = District::Trunk.id();
    for _ in 0..n_lesions {
        let r = rng.random_range(c.lesion_radius[0]..=c.lesion_radius[1]);
        let mut placed = None;
        for _ in 0..1000 {
            // Sample inside the ellipsoid shrunk by r along each axis.
            let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if u.iter().map(|v| v * v).sum::<f64>() > 1.0 {
                continue;
            }
            let ctr: [f64; 3] = std::array::from_fn(|a| body.trunk_c[a] + u[a] * (body.trunk_ax[a] - r - 1.0).max(0.0));
            let ri = r.ceil() as i64;
            let inside = (-ri..=ri).all(|dz| {
                (-ri..=ri).all(|dy| {
                    (-ri..=ri).all(|dx| {
                        let (fx, fy, fz) = (dx as f64, dy as f64, dz as f64);
                        if fx * fx + fy * fy + fz * fz > r * r {
                            return true;
                        }
                        let p = [ctr[0] + fx, ctr[1] + fy, ctr[2] + fz].map(|v| v.round());
                        body.district(p[0], p[1], p[2]) == Some(District::Trunk)
                    })
                })
            });
            if inside {
                placed = Some(ctr);
                break;
            }
        }
        let ctr = placed.ok_or_else(|| Error::Config(format!("could not place a radius-{r:.1} lesion in the trunk")))?;
        lesions.push((ctr, r));
    }

    let texture = Texture::new(c.ct_texture, &mut rng);
    let ct_noise = Normal::new(0.0, c.ct_noise_sigma).expect("finite sigma");
    let pet_noise = Normal::new(0.0, c.pet_noise_sigma).expect("finite sigma");
    let mut ct = vec![0f32; n];
    let mut pet = vec![0f32; n];
    let mut lesion = vec![false; n];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = linear_index(dims, x, y, z);
                let Some(d) = District::from_id(labels[i]) else { continue };
                let p = [x as f64, y as f64, z as f64];
                let in_lesion = labels[i] == trunk_id
                    && lesions.iter().any(|(q, r)| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>() <= r * r);
                let base = c.ct_base[d.id() as usize - 1] + texture.at(p);
                let mut v = base + ct_noise.sample(&mut rng);
                if in_lesion {
                    v += c.lesion_ct_contrast;
                }
                // PET derives from the stored (f32) CT so the transfer is exact on disk.
                let v = v.clamp(0.0, 1.0) as f32 as f64;
                let mut y_val = c.transfers.get(d).apply(v) + pet_noise.sample(&mut rng);
                if in_lesion {
                    y_val += c.lesion_boost;
                }
                ct[i] = v as f32;
                pet[i] = y_val.clamp(0.0, 1.0) as f32;
                lesion[i] = in_lesion;
            }
        }
    }

    let geometry = Geometry::new(dims, c.spacing_mm, [0.0; 3])?;
    let weight = rng.random_range(50.0..100.0);
    let dose = rng.random_range(3.0e8..4.0e8);
    Ok(PatientRecord {
        patient_id: patient_id(index),
        ct: Volume::new(geometry, Modality::Ct, IntensityUnit::Normalized, ct)?,
        pet: Some(Volume::new(geometry, Modality::Pet, IntensityUnit::Normalized, pet)?),
        district_mask: DistrictLabelMask::new(dims, labels)?,
        lesion_mask: Some(BinaryMask::new(dims, MaskScope::Lesion, lesion)?),
        condition: c.condition(index),
        suv: SuvParams::new(weight, dose)?,
        split: Split::Train,
    })
}

pub const MIN_PATIENTS: usize = 5;

/// Split sizes: `floor(f·n)` for validation and test, raised to one when the
/// fraction is nonzero, and the rest to training.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if n < MIN_PATIENTS {
        return Err(Error::Config(format!("need at least {MIN_PATIENTS} patients, got {n}")));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let size = |f: f64| {
        let k = (f * n as f64 + 1e-9).floor() as usize;
        if f > 0.0 { k.max(1) } else { k }
    };
    let (val, test) = (size(fractions[1]), size(fractions[2]));
    let sizes = [n.saturating_sub(val + test), val, test];
    if sizes.contains(&0) {
        return Err(Error::Config(format!(
            "{n} patients give split sizes {sizes:?}; every split must be nonempty"
        )));
    }
    Ok(sizes)
}

/// Stratified split assignment: patients ordered by condition are dealt a
/// label sequence in which each split is spread evenly, so every condition
/// receives a near-proportional share of each split.
pub fn assign_splits(conditions: &[Condition], fractions: [f64; 3]) -> Result<Vec<Split>> {
    let n = conditions.len();
    let sizes = split_sizes(n, fractions)?;
    let splits = [Split::Train, Split::Val, Split::Test];
    let mut seq = Vec::with_capacity(n);
    let mut used = [0usize; 3];
    for i in 0..n {
        let deficit = |s: usize| sizes[s] as f64 * (i + 1) as f64 / n as f64 - used[s] as f64;
        let s = (0..3)
            .filter(|&s| used[s] < sizes[s])
            .max_by(|&a, &b| deficit(a).total_cmp(&deficit(b)).then(b.cmp(&a)))
            .expect("remaining capacity");
        used[s] += 1;
        seq.push(splits[s]);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (conditions[i], i));
    let mut out = vec![Split::Train; n];
    for (k, &i) in order.iter().enumerate() {
        out[i] = seq[k];
    }
    Ok(out)
}

pub const DEFAULT_SPLIT_FRACTIONS: [f64; 3] = [0.7, 0.1, 0.2];

/// `n` phantom patients with stratified splits, in memory.
pub fn phantom_records(c: &PhantomConfig, n: usize, fractions: [f64; 3]) -> Result<Vec<PatientRecord>> {
    let conditions: Vec<Condition> = (0..n).map(|i| c.condition(i)).collect();
    let splits = assign_splits(&conditions, fractions)?;
    (0..n)
        .map(|i| {
            let mut p = generate_phantom(c, i)?;
            p.split = splits[i];
            Ok(p)
        })
        .collect()
}

/// Generates `n` patients under `out_dir` and writes `manifest.jsonl`.
pub fn phantom_dataset(c: &PhantomConfig, n: usize, fractions: [f64; 3], out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let conditions: Vec<Condition> = (0..n).map(|i| c.condition(i)).collect();
    let splits = assign_splits(&conditions, fractions)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for (i, split) in splits.into_iter().enumerate() {
        let mut p = generate_phantom(c, i)?;
        p.split = split;
        entries.push(save_patient(out_dir, &p)?);
    }
    let manifest = Manifest {
        dir: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
