//! Training loop for district-specific and whole-body translation models.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::PatientRecord;
use crate::districts::{extract_bundles, whole_body_bundle, DistrictBundle};
use crate::error::{Error, Result};
use crate::evaluation::mae;
use crate::inference::translate_district;
use crate::models::{
    clip_grad_norm, cyclegan_generator_grads, load_checkpoint, lsgan_discriminator_grads,
    pix2pix_discriminator_grads, pix2pix_generator_grads_from, save_checkpoint, Arch, ModelBundle,
    ModelScope, ModelSpec, Tensor, LAMBDA_CYCLE, LAMBDA_L1,
};
use crate::patches::{sample_training_patches, PatchPair, DEFAULT_MIN_IN_DISTRICT_FRACTION};
use crate::preprocess::{sample_nearest, sample_trilinear};
use crate::volume::Dims;

pub const SEEDS: [u64; 3] = [17, 23, 42];
/// Patches per training patient per epoch when not set explicitly.
pub const PATCHES_PER_PATIENT: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Maximum absolute rotation per axis, degrees.
    pub max_rotation_deg: f64,
    pub flips: bool,
    /// Std of the Gaussian noise added to the CT patch.
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_rotation_deg: 10.0,
            flips: true,
            noise_sigma: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub decay_start_epoch: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub grad_clip_max_norm: f64,
    pub lambda_l1: f64,
    pub lambda_cycle: f64,
    /// `None`: 64 × number of training patients.
    pub patches_per_epoch: Option<usize>,
    pub seed: u64,
    pub min_in_district_fraction: f64,
    pub validate_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 150,
            decay_start_epoch: 101,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 1,
            grad_clip_max_norm: 5.0,
            lambda_l1: LAMBDA_L1,
            lambda_cycle: LAMBDA_CYCLE,
            patches_per_epoch: None,
            seed: SEEDS[0],
            min_in_district_fraction: DEFAULT_MIN_IN_DISTRICT_FRACTION,
            validate_every: 10,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_epochs == 0 || self.decay_start_epoch == 0 {
            return bad("epoch counts must be positive".into());
        }
        if self.decay_start_epoch > self.total_epochs {
            return bad(format!(
                "decay_start_epoch {} > total_epochs {}",
                self.decay_start_epoch, self.total_epochs
            ));
        }
        if self.batch_size != 1 {
            return bad(format!("batch_size must be 1, got {}", self.batch_size));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("grad_clip_max_norm", self.grad_clip_max_norm),
            ("lambda_l1", self.lambda_l1),
            ("lambda_cycle", self.lambda_cycle),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if self.patches_per_epoch == Some(0) || self.validate_every == 0 {
            return bad("patches_per_epoch and validate_every must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.min_in_district_fraction) {
            return bad("min_in_district_fraction must be in [0, 1]".into());
        }
        let a = &self.augment;
        if a.max_rotation_deg < 0.0 || a.noise_sigma < 0.0 {
            return bad("augmentation magnitudes must be non-negative".into());
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: constant, then a linear decay
/// reaching zero at the last epoch.
pub fn lr_at(epoch: usize, c: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > c.total_epochs {
        return Err(Error::Parameter(format!(
            "epoch {epoch} outside 1..={}",
            c.total_epochs
        )));
    }
    if epoch < c.decay_start_epoch {
        return Ok(c.lr);
    }
    let span = (c.total_epochs - c.decay_start_epoch + 1) as f64;
    Ok(c.lr * (c.total_epochs - epoch) as f64 / span)
}

/// One jointly sampled spatial transform plus CT noise.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub angles_deg: [f64; 3],
    pub flips: [bool; 3],
    pub noise_sigma: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            angles_deg: [0.0; 3],
            flips: [false; 3],
            noise_sigma: 0.0,
        }
    }

    pub fn sample(c: &AugmentConfig, rng: &mut impl Rng) -> Self {
        if !c.enabled {
            return Self::identity();
        }
        let m = c.max_rotation_deg;
        let angles_deg = std::array::from_fn(|_| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 });
        let flips = std::array::from_fn(|_| c.flips && rng.random_bool(0.5));
        Self {
            angles_deg,
            flips,
            noise_sigma: c.noise_sigma,
        }
    }
}

/// Rotation about x, then y, then z, as a row-major 3×3 matrix.
fn rotation(angles_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, g] = angles_deg.map(f64::to_radians);
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[g.cos(), -g.sin(), 0.0], [g.sin(), g.cos(), 0.0], [0.0, 0.0, 1.0]];
    let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| -> [[f64; 3]; 3] {
        std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| p[i][k] * q[k][j]).sum()))
    };
    mul(rz, mul(ry, rx))
}

fn rotate<T: Copy>(
    data: &[T],
    dims: Dims,
    inv: &[[f64; 3]; 3],
    sample: impl Fn(&[T], Dims, [f64; 3]) -> Option<T>,
    fill: T,
) -> Vec<T> {
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(data.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                let src: [f64; 3] =
                    std::array::from_fn(|i| inv[i][0] * p[0] + inv[i][1] * p[1] + inv[i][2] * p[2] + c[i]);
                out.push(sample(data, dims, src).unwrap_or(fill));
            }
        }
    }
    out
}

fn flip<T: Copy>(data: &mut [T], dims: Dims, axis: usize) {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let len = dims[axis];
    for i in 0..data.len() {
        let pos = (i / stride) % len;
        let mirror = len - 1 - pos;
        if pos < mirror {
            data.swap(i, i + (mirror - pos) * stride);
        }
    }
}

/// Applies `draw` to an aligned CT/PET/mask patch triple. Intensities are
/// resampled trilinearly and the mask by nearest neighbour; voxels rotated
/// in from outside the patch are zero. Noise touches the CT only.
pub fn apply_augment(
    ct: &[f32],
    pet: &[f32],
    mask: &[bool],
    dims: Dims,
    draw: &AugmentDraw,
    rng: &mut impl Rng,
) -> (Vec<f32>, Vec<f32>, Vec<bool>) {
    let (mut ct, mut pet, mut mask) = if draw.angles_deg.iter().any(|&a| a != 0.0) {
        let r = rotation(draw.angles_deg);
        // Pull-back through the inverse (transpose) rotation.
        let inv: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| r[j][i]));
        let tri = |d: &[f32], dims, c| sample_trilinear(d, dims, c).map(|v| v as f32);
        (
            rotate(ct, dims, &inv, tri, 0.0),
            rotate(pet, dims, &inv, tri, 0.0),
            rotate(mask, dims, &inv, sample_nearest, false),
        )
    } else {
        (ct.to_vec(), pet.to_vec(), mask.to_vec())
    };
    for axis in 0..3 {
        if draw.flips[axis] {
            flip(&mut ct, dims, axis);
            flip(&mut pet, dims, axis);
            flip(&mut mask, dims, axis);
        }
    }
    if draw.noise_sigma > 0.0 {
        let n = Normal::new(0.0, draw.noise_sigma).expect("finite sigma");
        for v in ct.iter_mut() {
            *v = (*v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    (ct, pet, mask)
}

/// Samples one augmentation from `seed` and applies it.
pub fn augment_pair(
    ct: &[f32],
    pet: &[f32],
    mask: &[bool],
    dims: Dims,
    c: &AugmentConfig,
    seed: u64,
) -> (Vec<f32>, Vec<f32>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = AugmentDraw::sample(c, &mut rng);
    apply_augment(ct, pet, mask, dims, &draw, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// Global 0-based optimizer step.
    pub step: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    /// Unweighted L1 (Pix2Pix) or cycle term (CycleGAN).
    pub l1: f64,
    pub lr: f64,
    pub grad_norm_g_pre: f64,
    pub grad_norm_g: f64,
    pub grad_norm_d_pre: f64,
    pub grad_norm_d: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// (epoch, mean validation MAE).
    pub validation: Vec<(usize, f64)>,
}

impl TrainLog {
    pub fn epoch_mean_l1(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for s in &self.steps {
            match out.last_mut() {
                Some((e, sum, n)) if *e == s.epoch => {
                    *sum += s.l1;
                    *n += 1;
                }
                _ => out.push((s.epoch, s.l1, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }
}

pub const LOG_HEADER: &str = "epoch,step,loss_G,loss_D,l1,lr,grad_norm";

fn step_line(s: &StepRecord) -> String {
    format!(
        "{},{},{:.8},{:.8},{:.8},{:.6e},{:.8}",
        s.epoch, s.step, s.loss_g, s.loss_d, s.l1, s.lr, s.grad_norm_g
    )
}

/// Where a model's checkpoints and logs live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// `<models_root>/<arch>/<scope>/`.
    pub fn new(models_root: impl AsRef<Path>, arch: Arch, scope: ModelScope) -> Self {
        Self {
            root: models_root.as_ref().join(arch.name()).join(scope.name()),
        }
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("best.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.root.join("last.ckpt")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn validation_log(&self) -> PathBuf {
        self.root.join("validation.csv")
    }
}

fn scope_bundle(p: &PatientRecord, scope: ModelScope) -> Result<DistrictBundle> {
    match scope {
        ModelScope::WholeBody => whole_body_bundle(p),
        ModelScope::District(d) => {
            let i = crate::volume::District::ALL.iter().position(|&x| x == d).expect("known district");
            Ok(extract_bundles(p)?.swap_remove(i))
        }
    }
}

fn scope_bundles(patients: &[PatientRecord], scope: ModelScope) -> Result<Vec<DistrictBundle>> {
    let mut out = Vec::new();
    for p in patients {
        let b = scope_bundle(p, scope)?;
        if b.mask.is_empty() {
            log::info!("{}: empty {} mask, not used for {scope}", p.patient_id, b.scope);
            continue;
        }
        if b.pet.is_none() {
            return Err(Error::Config(format!("{} has no PET to train on", p.patient_id)));
        }
        out.push(b);
    }
    Ok(out)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Draws `count` training patches for one epoch: patients are picked
/// uniformly per patch, then patches are cut from each patient's bundle and
/// shuffled together.
fn epoch_patches(
    bundles: &[DistrictBundle],
    s: usize,
    count: usize,
    min_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PatchPair>> {
    let mut per = vec![0usize; bundles.len()];
    for _ in 0..count {
        per[rng.random_range(0..bundles.len())] += 1;
    }
    let mut out = Vec::with_capacity(count);
    for (b, &k) in bundles.iter().zip(&per) {
        if k > 0 {
            out.extend(sample_training_patches(b, s, k, min_fraction, rng.random())?);
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Mean whole-district MAE over validation patients, via sliding-window
/// inference.
pub fn validation_mae(model: &ModelBundle, val: &[DistrictBundle]) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for b in val {
        let pred = translate_district(model, b)?;
        let pet = b.pet.as_ref().expect("validation bundles carry PET");
        total += mae(&pred, pet, &b.mask)?;
    }
    Ok(Some(total / val.len() as f64))
}

/// What to do when the run directory already holds a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resume {
    /// Continue from `last.ckpt` if its configuration matches.
    Continue,
    /// Start over, replacing previous checkpoints with the same configuration.
    Restart,
}

pub struct TrainOutput {
    pub model: ModelBundle,
    pub log: TrainLog,
}

fn pix2pix_step(
    m: &mut ModelBundle,
    pair: &PatchPair,
    c: &TrainConfig,
    lr: f64,
    step: usize,
    epoch: usize,
) -> Result<StepRecord> {
    let s = m.patch_size();
    let x = Tensor::<f32>::from_f32([s; 3], &pair.ct);
    let y = Tensor::<f32>::from_f32([s; 3], &pair.pet);
    let (fake, g_tape) = m.g.forward(&x)?;

    let (loss_d, mut gd) = pix2pix_discriminator_grads(&m.d, &x, &y, &fake, step)?;
    let (d_pre, d_post) = clip_grad_norm(&mut gd.iter_mut().collect::<Vec<_>>(), c.grad_clip_max_norm);
    m.opt_d.update(&mut m.d.params.iter_mut().collect::<Vec<_>>(), &gd.iter().collect::<Vec<_>>(), lr);

    let (losses, mut gg) = pix2pix_generator_grads_from(&m.g, &g_tape, &fake, &m.d, &x, &y, c.lambda_l1, step)?;
    let (g_pre, g_post) = clip_grad_norm(&mut gg.iter_mut().collect::<Vec<_>>(), c.grad_clip_max_norm);
    check_finite(step, g_pre, d_pre)?;
    m.opt_g.update(&mut m.g.params.iter_mut().collect::<Vec<_>>(), &gg.iter().collect::<Vec<_>>(), lr);
    Ok(StepRecord {
        epoch,
        step,
        loss_g: losses.loss_g,
        loss_d,
        l1: losses.l1_term,
        lr,
        grad_norm_g_pre: g_pre,
        grad_norm_g: g_post,
        grad_norm_d_pre: d_pre,
        grad_norm_d: d_post,
    })
}

fn check_finite(step: usize, g: f64, d: f64) -> Result<()> {
    for (what, v) in [("generator gradient norm", g), ("discriminator gradient norm", d)] {
        if !v.is_finite() {
            return Err(Error::Numeric { step, what: what.into() });
        }
    }
    Ok(())
}

fn cyclegan_step(
    m: &mut ModelBundle,
    pair: &PatchPair,
    unpaired_pet: &[f32],
    c: &TrainConfig,
    lr: f64,
    step: usize,
    epoch: usize,
) -> Result<StepRecord> {
    let s = m.patch_size();
    let x = Tensor::<f32>::from_f32([s; 3], &pair.ct);
    let y = Tensor::<f32>::from_f32([s; 3], unpaired_pet);
    let f = m.f.as_mut().expect("cyclegan bundle has F");
    let d_x = m.d_x.as_mut().expect("cyclegan bundle has D_X");

    let mut cg = cyclegan_generator_grads(&m.g, f, d_x, &m.d, &x, &y, c.lambda_cycle, step)?;
    let (g_pre, g_post) = clip_grad_norm(
        &mut cg.g.iter_mut().chain(cg.f.iter_mut()).collect::<Vec<_>>(),
        c.grad_clip_max_norm,
    );
    m.opt_g.update(
        &mut m.g.params.iter_mut().chain(f.params.iter_mut()).collect::<Vec<_>>(),
        &cg.g.iter().chain(cg.f.iter()).collect::<Vec<_>>(),
        lr,
    );

    let (ly, mut gy) = lsgan_discriminator_grads(&m.d, &y, &cg.fake_y, step)?;
    let (lx, mut gx) = lsgan_discriminator_grads(d_x, &x, &cg.fake_x, step)?;
    let (d_pre, d_post) = clip_grad_norm(
        &mut gy.iter_mut().chain(gx.iter_mut()).collect::<Vec<_>>(),
        c.grad_clip_max_norm,
    );
    check_finite(step, g_pre, d_pre)?;
    m.opt_d.update(
        &mut m.d.params.iter_mut().chain(d_x.params.iter_mut()).collect::<Vec<_>>(),
        &gy.iter().chain(gx.iter()).collect::<Vec<_>>(),
        lr,
    );
    Ok(StepRecord {
        epoch,
        step,
        loss_g: cg.losses.loss_g,
        loss_d: ly + lx,
        l1: cg.losses.cycle_term,
        lr,
        grad_norm_g_pre: g_pre,
        grad_norm_g: g_post,
        grad_norm_d_pre: d_pre,
        grad_norm_d: d_post,
    })
}

fn append(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut body = String::new();
    if fresh {
        body.push_str(header);
        body.push('\n');
    }
    for l in lines {
        body.push_str(l);
        body.push('\n');
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Opens the run directory, returning a bundle to continue from when one
/// matches `spec`.
fn prepare_run_dir(dir: &RunDir, spec: &ModelSpec, c: &TrainConfig, resume: Resume) -> Result<Option<ModelBundle>> {
    fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
    let last = dir.last();
    if !last.exists() {
        return Ok(None);
    }
    let prev = load_checkpoint(&last)?;
    if prev.spec.config_hash() != spec.config_hash() || prev.spec.scope != spec.scope {
        return Err(Error::Config(format!(
            "{} holds a different model configuration (hash {}, expected {})",
            dir.root.display(),
            prev.spec.config_hash(),
            spec.config_hash()
        )));
    }
    match resume {
        Resume::Continue if prev.seed == c.seed && prev.epoch <= c.total_epochs => Ok(Some(prev)),
        Resume::Continue => Err(Error::Config(format!(
            "{} was trained with seed {} for {} epochs; cannot continue with seed {} and {} epochs",
            dir.root.display(),
            prev.seed,
            prev.epoch,
            c.seed,
            c.total_epochs
        ))),
        Resume::Restart => {
            for p in [dir.last(), dir.best(), dir.log(), dir.validation_log()] {
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
            Ok(None)
        }
    }
}

/// Trains one model on the train split, validating on `val`.
///
/// With `out` set, writes `last.ckpt` after every epoch, `best.ckpt` on
/// each validation improvement, and appends to the CSV logs. Training is a
/// single deterministic stream: epoch `e` draws from a generator seeded by
/// `(seed, e)`, so a resumed run matches an uninterrupted one bit for bit.
pub fn train_model(
    spec: ModelSpec,
    train: &[PatientRecord],
    val: &[PatientRecord],
    c: &TrainConfig,
    out: Option<(&RunDir, Resume)>,
) -> Result<TrainOutput> {
    train_until(spec, train, val, c, out, c.total_epochs)
}

/// `train_model` that stops after epoch `until`, as an interrupted run would.
fn train_until(
    spec: ModelSpec,
    train: &[PatientRecord],
    val: &[PatientRecord],
    c: &TrainConfig,
    out: Option<(&RunDir, Resume)>,
    until: usize,
) -> Result<TrainOutput> {
    c.validate()?;
    spec.validate()?;
    let scope = spec.scope;
    let bundles = scope_bundles(train, scope)?;
    if bundles.is_empty() {
        return Err(Error::Config(format!("no training patients with a nonempty {scope} mask")));
    }
    let val_bundles = scope_bundles(val, scope)?;
    let s = spec.generator.patch_size;
    let per_epoch = c.patches_per_epoch.unwrap_or(PATCHES_PER_PATIENT * train.len());

    let resumed = match out {
        Some((dir, resume)) => prepare_run_dir(dir, &spec, c, resume)?,
        None => None,
    };
    let mut m = match resumed {
        Some(m) => {
            log::info!("resuming {scope} from epoch {}", m.epoch);
            m
        }
        None => ModelBundle::init(spec, c.seed, c.adam_beta1, c.adam_beta2)?,
    };
    let mut log = TrainLog::default();

    for epoch in m.epoch + 1..=until.min(c.total_epochs) {
        let lr = lr_at(epoch, c)?;
        let mut rng = epoch_rng(c.seed, epoch);
        let patches = epoch_patches(&bundles, s, per_epoch, c.min_in_district_fraction, &mut rng)?;
        // CycleGAN pairs each CT patch with an independently drawn PET patch.
        let unpaired: Vec<usize> = match m.spec.arch {
            Arch::Pix2pix => Vec::new(),
            Arch::Cyclegan => {
                let mut idx: Vec<usize> = (0..patches.len()).collect();
                idx.shuffle(&mut rng);
                idx
            }
        };
        let mut records = Vec::with_capacity(patches.len());
        for (k, p) in patches.iter().enumerate() {
            let step = (epoch - 1) * per_epoch + k;
            let draw = AugmentDraw::sample(&c.augment, &mut rng);
            let (ct, pet, mask) = apply_augment(&p.ct, &p.pet, &p.mask, [s; 3], &draw, &mut rng);
            let pair = PatchPair { ct, pet, mask, ..p.clone() };
            let rec = match m.spec.arch {
                Arch::Pix2pix => pix2pix_step(&mut m, &pair, c, lr, step, epoch)?,
                Arch::Cyclegan => {
                    let q = &patches[unpaired[k]];
                    let other = augment_pair(&q.ct, &q.pet, &q.mask, [s; 3], &c.augment, rng.random());
                    cyclegan_step(&mut m, &pair, &other.1, c, lr, step, epoch)?
                }
            };
            records.push(rec);
        }
        m.epoch = epoch;
        let mean_g = records.iter().map(|r| r.loss_g).sum::<f64>() / records.len() as f64;
        let mean_l1 = records.iter().map(|r| r.l1).sum::<f64>() / records.len() as f64;
        log::info!("{scope} epoch {epoch}: loss_G {mean_g:.4}, l1 {mean_l1:.4}, lr {lr:.2e}");

        let mut improved = false;
        if epoch % c.validate_every == 0 || epoch == c.total_epochs {
            if let Some(v) = validation_mae(&m, &val_bundles)? {
                log::info!("{scope} epoch {epoch}: validation MAE {v:.5}");
                log.validation.push((epoch, v));
                if m.best_val_mae.is_none_or(|b| v < b) {
                    m.best_val_mae = Some(v);
                    improved = true;
                }
                if let Some((dir, _)) = out {
                    append(&dir.validation_log(), "epoch,val_mae", &[format!("{epoch},{v:.8}")])?;
                }
            }
        }
        if let Some((dir, _)) = out {
            append(&dir.log(), LOG_HEADER, &records.iter().map(step_line).collect::<Vec<_>>())?;
            save_checkpoint(&m, dir.last())?;
            // Without a validation split the final model is the best one.
            if improved || (val_bundles.is_empty() && epoch == c.total_epochs) {
                save_checkpoint(&m, dir.best())?;
            }
        }
        log.steps.extend(records);
    }
    Ok(TrainOutput { model: m, log })
}
