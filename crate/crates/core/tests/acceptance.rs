//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line, even on success.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use districtgan::config::ExperimentConfig;
use districtgan::dataset::{PatientRecord, Split};
use districtgan::districts::{binary_masks, extract_bundles, partition_check};
use districtgan::evaluation::{mae, paired_ttest, psnr, ssim3d, Method};
use districtgan::inference::{translate_patient, translate_patient_wholebody, PatchTranslator};
use districtgan::models::{
    clip_grad_norm, pix2pix_generator_grads, pix2pix_losses, Arch, Discriminator,
    DiscriminatorConfig, Generator, GeneratorConfig, ModelScope, ModelSpec, Tensor, LAMBDA_L1,
};
use districtgan::patches::{assemble, extract_patch, patch_grid, stitch};
use districtgan::phantom::{generate_phantom, phantom_records, PhantomConfig, DEFAULT_SPLIT_FRACTIONS};
use districtgan::pipeline::{cmd_evaluate, cmd_phantom, cmd_train, cmd_translate, TrainTarget};
use districtgan::training::{lr_at, train_model, Resume, TrainConfig, SEEDS};
use districtgan::volume::{
    linear_index, mask_apply, BinaryMask, District, Geometry, IntensityUnit, MaskScope, Modality, Volume,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pet_volume(dims: [usize; 3], data: Vec<f32>) -> Volume {
    Volume::new(Geometry::unit(dims), Modality::Pet, IntensityUnit::Normalized, data).unwrap()
}

// 1. Cutting on the default grid and stitching back is the identity.
fn stitch_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (s, o) = (32, 16);
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let dims = [0; 3].map(|_| rng.random_range(32..=96usize));
        let n = dims.iter().product::<usize>();
        let data: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let grid = patch_grid(dims, s, o).map_err(|e| e.to_string())?;
        let patches: Vec<_> = grid
            .starts
            .iter()
            .map(|&st| (extract_patch(&data, dims, st, s), st))
            .collect();
        let back = stitch(&patches, dims, s).map_err(|e| e.to_string())?;
        for (a, b) in back.iter().zip(&data) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-6, format!("max |stitch - original| = {worst:.3e} over 50 volumes"))
}

// 2. District masks partition the body; extracts and assembly are exact.
fn partition_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let levels = [0.2f32, 0.4, 0.6, 0.8];
    for k in 0..50 {
        let c = PhantomConfig {
            dims: [rng.random_range(40..=64), rng.random_range(40..=64), rng.random_range(96..=160)],
            seed: rng.random(),
            ..PhantomConfig::default()
        };
        let p = generate_phantom(&c, k).map_err(|e| e.to_string())?;
        let masks = binary_masks(&p.district_mask);
        let report = partition_check(&masks, &p.district_mask).map_err(|e| e.to_string())?;
        if !report.passed() {
            return Err(format!("phantom {k}: {report:?}"));
        }
        let body = p.district_mask.body_mask();
        let bundles = extract_bundles(&p).map_err(|e| e.to_string())?;
        let pet = p.pet.as_ref().unwrap();
        for (v, bv) in [(&p.ct, bundles.iter().map(|b| &b.ct).collect::<Vec<_>>()), (pet, bundles.iter().map(|b| b.pet.as_ref().unwrap()).collect())] {
            let want = mask_apply(v, &body).unwrap();
            let mut sum = vec![0f32; want.data().len()];
            for b in bv {
                for (s, x) in sum.iter_mut().zip(b.data()) {
                    *s += x;
                }
            }
            if sum != want.data() {
                return Err(format!("phantom {k}: district extracts do not sum to the body"));
            }
        }
        let constants: Vec<Volume> = levels
            .iter()
            .map(|&l| Volume::filled(*p.ct.geometry(), Modality::SynthPet, IntensityUnit::Normalized, l).unwrap())
            .collect();
        let parts: Vec<(&Volume, &BinaryMask)> = constants.iter().zip(&masks).collect();
        let out = assemble(&parts, &p.ct).map_err(|e| e.to_string())?;
        let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
        for v in out.data() {
            *hist.entry(v.to_bits()).or_default() += 1;
        }
        let mut want: BTreeMap<u32, usize> = BTreeMap::new();
        want.insert(0f32.to_bits(), p.district_mask.count(0));
        for (d, l) in District::ALL.iter().zip(levels) {
            let n = p.district_mask.count(d.id());
            if n > 0 {
                want.insert(l.to_bits(), n);
            }
        }
        if hist != want {
            return Err(format!("phantom {k}: assembled histogram {hist:?} vs masks {want:?}"));
        }
    }
    check(true, "50 phantoms: partition, extract sums and assembly histograms exact".into())
}

fn oracle_mae_psnr(a: &[f32], b: &[f32], m: &[bool]) -> (f64, f64) {
    let (mut s1, mut s2, mut n) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        if m[i] {
            let d = a[i] as f64 - b[i] as f64;
            s1 += d.abs();
            s2 += d * d;
            n += 1.0;
        }
    }
    (s1 / n, if s2 == 0.0 { f64::INFINITY } else { -10.0 * (s2 / n).log10() })
}

/// Per-voxel SSIM with the full 7³ Gaussian evaluated directly, weights
/// renormalized over in-volume taps.
fn oracle_ssim(a: &[f32], b: &[f32], m: &[bool], d: [usize; 3]) -> f64 {
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0.0;
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if !m[linear_index(d, x, y, z)] {
                    continue;
                }
                let mut acc = [0.0f64; 6];
                for dz in -3i64..=3 {
                    for dy in -3i64..=3 {
                        for dx in -3i64..=3 {
                            let q = [x as i64 + dx, y as i64 + dy, z as i64 + dz];
                            if (0..3).any(|k| q[k] < 0 || q[k] >= d[k] as i64) {
                                continue;
                            }
                            let w = (-((dx * dx + dy * dy + dz * dz) as f64) / 4.5).exp();
                            let i = linear_index(d, q[0] as usize, q[1] as usize, q[2] as usize);
                            let (u, v) = (a[i] as f64, b[i] as f64);
                            for (s, t) in acc.iter_mut().zip([1.0, u, v, u * u, v * v, u * v]) {
                                *s += w * t;
                            }
                        }
                    }
                }
                let mu = acc[1] / acc[0];
                let mv = acc[2] / acc[0];
                let vu = acc[3] / acc[0] - mu * mu;
                let vv = acc[4] / acc[0] - mv * mv;
                let cov = acc[5] / acc[0] - mu * mv;
                total += (2.0 * mu * mv + c1) * (2.0 * cov + c2) / ((mu * mu + mv * mv + c1) * (vu + vv + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

// 3. Metrics agree with brute-force oracles.
fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut e_mae, mut e_psnr, mut e_ssim) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..200 {
        let d = [0; 3].map(|_| rng.random_range(8..=16usize));
        let n = d.iter().product::<usize>();
        let a: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        // Mostly correlated pairs, with one identical pair for the PSNR sentinel.
        let b: Vec<f32> = if k == 0 {
            a.clone()
        } else {
            a.iter().map(|&v| (0.7 * v + 0.3 * rng.random::<f32>()).clamp(0.0, 1.0)).collect()
        };
        let lo = [0; 3].map(|_| 0);
        let size = [0, 1, 2].map(|i| rng.random_range(7..=d[i]));
        let off = [0, 1, 2].map(|i| lo[i] + rng.random_range(0..=d[i] - size[i]));
        let mut m = vec![false; n];
        for z in off[2]..off[2] + size[2] {
            for y in off[1]..off[1] + size[1] {
                for x in off[0]..off[0] + size[0] {
                    let corner = [x, y, z].iter().zip(off.iter().zip(size)).all(|(&c, (&o, s))| c == o || c == o + s - 1);
                    m[linear_index(d, x, y, z)] = corner || rng.random_bool(0.7);
                }
            }
        }
        let (pa, pb) = (pet_volume(d, a.clone()), pet_volume(d, b.clone()));
        let region = BinaryMask::new(d, MaskScope::WholeBody, m.clone()).unwrap();
        let (om, op) = oracle_mae_psnr(&a, &b, &m);
        let os = oracle_ssim(&a, &b, &m, d);
        let gm = mae(&pa, &pb, &region).map_err(|e| e.to_string())?;
        let gp = psnr(&pa, &pb, &region).map_err(|e| e.to_string())?;
        let gs = ssim3d(&pa, &pb, &region).map_err(|e| e.to_string())?;
        e_mae = e_mae.max((gm - om).abs());
        e_psnr = e_psnr.max(if op.is_infinite() { if gp == op { 0.0 } else { f64::INFINITY } } else { (gp - op).abs() });
        e_ssim = e_ssim.max((gs - os).abs());
    }
    check(
        e_mae <= 1e-6 && e_psnr <= 1e-6 && e_ssim <= 1e-5,
        format!("200 pairs: max error mae {e_mae:.2e}, psnr {e_psnr:.2e}, ssim {e_ssim:.2e}"),
    )
}

// 4. Analytic generator gradients against central differences.
//
// The target sits ±0.25 away from the initial output so no voxel is at an
// L1 kink, and the step is small enough that ReLU kinks behind instance
// norm are rarely crossed. Relative error uses an absolute floor of 1e-4:
// biases feeding instance norm have exactly zero gradient and their
// differences are pure rounding noise.
fn gradient_check() -> Outcome {
    let s = 16;
    let cfg = GeneratorConfig { base_channels: 4, ..GeneratorConfig::toy(s) };
    let g = Generator::<f32>::seeded(cfg, 4).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = Discriminator::<f32>::new(DiscriminatorConfig::paired(4), &mut rng).unwrap().cast::<f64>();
    let n = s * s * s;
    let x = Tensor::from_vec(1, [s; 3], (0..n).map(|_| rng.random::<f64>()).collect());
    // Offsetting the target from the output keeps L1 residuals off their kink.
    let fake = g.infer(&x).unwrap();
    let y = Tensor::from_vec(
        1,
        [s; 3],
        fake.data.iter().map(|v| v + if rng.random::<bool>() { 0.25 } else { -0.25 }).collect(),
    );
    let (_, grads) = pix2pix_generator_grads(&g, &d, &x, &y, LAMBDA_L1, 0).map_err(|e| e.to_string())?;
    let loss = |p: &Generator<f64>| pix2pix_losses(p, &d, &x, &y, LAMBDA_L1).unwrap().loss_g;
    let l0 = loss(&g);
    // Central, forward and backward differences at step h.
    let diffs = |t: usize, j: usize, h: f64| {
        let mut gp = g.clone();
        gp.params[t][j] += h;
        let mut gm = g.clone();
        gm.params[t][j] -= h;
        let (lp, lm) = (loss(&gp), loss(&gm));
        ((lp - lm) / (2.0 * h), (lp - l0) / h, (l0 - lm) / h)
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
    let h = 1e-5;
    let (mut worst, mut valid, mut tries) = (0.0f64, 0, 0);
    while valid < 96 && tries < 400 {
        tries += 1;
        let t = rng.random_range(0..g.params.len());
        let j = rng.random_range(0..g.params[t].len());
        let ((c1, fw, bw), (c2, _, _)) = (diffs(t, j, h), diffs(t, j, h / 2.0));
        // A ReLU or L1 kink inside the stencil makes the differences disagree.
        if rel(c1, c2) > 1e-4 || rel(fw, bw) > 1e-2 {
            continue;
        }
        valid += 1;
        worst = worst.max(rel(grads[t][j], c1));
    }
    check(
        valid >= 64 && worst <= 1e-3,
        format!("{valid} parameters ({} skipped at kinks), max relative error {worst:.2e}", tries - valid),
    )
}

fn tiny_phantoms() -> Vec<PatientRecord> {
    let c = PhantomConfig { dims: [32, 32, 64], lesion_radius: [2.0, 3.0], ..PhantomConfig::default() };
    phantom_records(&c, 5, DEFAULT_SPLIT_FRACTIONS)
        .unwrap()
        .into_iter()
        .filter(|p| p.split == Split::Train)
        .collect()
}

// 5. Learning-rate schedule and gradient clipping.
fn schedule_and_clipping() -> Outcome {
    let c = TrainConfig::default();
    let got: Vec<f64> = [1, 100, 125, 150].iter().map(|&e| lr_at(e, &c).unwrap()).collect();
    if got != [2e-4, 2e-4, 1e-4, 0.0] {
        return Err(format!("lr_at(1, 100, 125, 150) = {got:?}"));
    }
    let mut v = vec![vec![3.0f64; 4], vec![4.0; 4]];
    let (pre, post) = clip_grad_norm(&mut v.iter_mut().collect::<Vec<_>>(), 5.0);
    if (pre - 10.0).abs() > 1e-12 || post > 5.0 + 1e-6 || post < 5.0 - 1e-5 {
        return Err(format!("clip of a norm-10 gradient gave {pre} -> {post}"));
    }
    let train = tiny_phantoms();
    let c = TrainConfig { total_epochs: 2, decay_start_epoch: 2, patches_per_epoch: Some(50), seed: 5, ..TrainConfig::default() };
    let g = GeneratorConfig { base_channels: 4, depth: 2, ..GeneratorConfig::toy(16) };
    let spec = ModelSpec::new(ModelScope::District(District::Trunk), Arch::Pix2pix, g);
    let out = train_model(spec, &train, &[], &c, None).map_err(|e| e.to_string())?;
    let steps = &out.log.steps;
    let max_post = steps.iter().map(|r| r.grad_norm_g.max(r.grad_norm_d)).fold(0.0, f64::max);
    let clipped = steps.iter().filter(|r| r.grad_norm_g_pre > 5.0 || r.grad_norm_d_pre > 5.0).count();
    check(
        steps.len() == 100 && max_post <= 5.0 + 1e-6,
        format!("lr_at exact; {} steps, {clipped} clipped, max post-clip norm {max_post:.6}", steps.len()),
    )
}

fn analytic_prediction(c: &PhantomConfig, p: &PatientRecord) -> Volume {
    let data = p
        .ct
        .data()
        .iter()
        .zip(p.district_mask.labels())
        .map(|(&v, &l)| match District::from_id(l) {
            Some(d) => c.transfers.get(d).apply(v as f64) as f32,
            None => 0.0,
        })
        .collect();
    p.ct.with_data(data).unwrap().with_modality(Modality::SynthPet)
}

fn trunk_without_lesion(p: &PatientRecord) -> BinaryMask {
    let lesion = p.lesion_mask.as_ref().unwrap();
    let ind = p
        .district_mask
        .labels()
        .iter()
        .zip(lesion.indicator())
        .map(|(&l, &les)| l == District::Trunk.id() && !les)
        .collect();
    BinaryMask::new(p.ct.dims(), MaskScope::District(District::Trunk), ind).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// 6 and 7. District models against an equal-step whole-body model on the
// 20-phantom cohort, three seeds; lesion-restricted errors on the same run.
fn replication() -> (Outcome, Outcome) {
    let pc = PhantomConfig::default();
    let recs = phantom_records(&pc, 20, DEFAULT_SPLIT_FRACTIONS).unwrap();
    let train: Vec<_> = recs.iter().filter(|p| p.split == Split::Train).cloned().collect();
    let test: Vec<_> = recs.iter().filter(|p| p.split == Split::Test).cloned().collect();
    let g = GeneratorConfig { base_channels: 8, ..GeneratorConfig::toy(32) };

    let mut per_seed = Vec::new();
    let mut mae_prop = vec![Vec::new(); test.len()];
    let mut mae_wb = vec![Vec::new(); test.len()];
    let mut lesion_model = Vec::new();
    let mut first_models = Vec::new();
    for seed in SEEDS {
        let c = TrainConfig {
            total_epochs: 10,
            decay_start_epoch: 6,
            patches_per_epoch: Some(40),
            seed,
            ..TrainConfig::default()
        };
        let models: Vec<_> = ModelScope::ALL
            .iter()
            .map(|&scope| train_model(ModelSpec::new(scope, Arch::Pix2pix, g), &train, &[], &c, None).unwrap().model)
            .collect();
        let district: Vec<&dyn PatchTranslator> = models[..4].iter().map(|m| m as &dyn PatchTranslator).collect();
        let whole = models.iter().find(|m| m.spec.scope == ModelScope::WholeBody).unwrap();
        let (mut mp, mut sp, mut mw, mut sw) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, p) in test.iter().enumerate() {
            let body = p.district_mask.body_mask();
            let pet = p.pet.as_ref().unwrap();
            let a = translate_patient(&district, p).unwrap();
            let b = translate_patient_wholebody(whole, p).unwrap();
            mp.push(mae(&a, pet, &body).unwrap());
            sp.push(ssim3d(&a, pet, &body).unwrap());
            mw.push(mae(&b, pet, &body).unwrap());
            sw.push(ssim3d(&b, pet, &body).unwrap());
            mae_prop[i].push(mp[i]);
            mae_wb[i].push(mw[i]);
            let lesion = p.lesion_mask.as_ref().unwrap();
            if !lesion.is_empty() {
                lesion_model.push(mae(&a, pet, lesion).unwrap());
            }
        }
        per_seed.push((seed, mean(&mp), mean(&sp), mean(&mw), mean(&sw)));
        if first_models.is_empty() {
            first_models = models;
        }
    }
    let wins = per_seed.iter().filter(|(_, mp, sp, mw, sw)| mp < mw && sp > sw).count();
    let a: Vec<f64> = mae_prop.iter().map(|v| mean(v)).collect();
    let b: Vec<f64> = mae_wb.iter().map(|v| mean(v)).collect();
    let tt = paired_ttest(&a, &b);
    let detail = per_seed
        .iter()
        .map(|(s, mp, sp, mw, sw)| format!("seed {s}: MAE {mp:.4} vs {mw:.4}, SSIM {sp:.4} vs {sw:.4}"))
        .collect::<Vec<_>>()
        .join("; ");
    let c6 = match tt {
        Ok(t) => check(
            wins == SEEDS.len() && t.p < 0.05,
            format!("{wins}/{} seeds won; {detail}; paired t on {} patients t = {:.3}, p = {:.2e}", SEEDS.len(), t.n, t.t, t.p),
        ),
        Err(e) => Err(format!("{detail}; t-test failed: {e}")),
    };

    // Lesions cover about 1% of the trunk, so their uptake is learned well
    // after the bulk transfer. The lesion check swaps in a trunk model trained
    // for 6400 steps; the other districts keep their seed-17 models.
    let lc = TrainConfig {
        total_epochs: 80,
        decay_start_epoch: 48,
        patches_per_epoch: Some(80),
        seed: SEEDS[0],
        ..TrainConfig::default()
    };
    let long_trunk = train_model(
        ModelSpec::new(ModelScope::District(District::Trunk), Arch::Pix2pix, g),
        &train,
        &[],
        &lc,
        None,
    )
    .unwrap()
    .model;
    let district: Vec<&dyn PatchTranslator> = first_models[..4]
        .iter()
        .map(|m| {
            if m.spec.scope == ModelScope::District(District::Trunk) {
                &long_trunk as &dyn PatchTranslator
            } else {
                m as &dyn PatchTranslator
            }
        })
        .collect();
    let (mut les, mut trunk, mut trained) = (Vec::new(), Vec::new(), Vec::new());
    for p in &test {
        let lesion = p.lesion_mask.as_ref().unwrap();
        if lesion.is_empty() {
            continue;
        }
        let pred = analytic_prediction(&pc, p);
        let pet = p.pet.as_ref().unwrap();
        les.push(mae(&pred, pet, lesion).unwrap());
        trained.push(mae(&translate_patient(&district, p).unwrap(), pet, lesion).unwrap());
        trunk.push(mae(&pred, pet, &trunk_without_lesion(p)).unwrap());
    }
    let c7 = if les.is_empty() {
        Err("no lesion patients in the test split".into())
    } else {
        let (l, t, m, short) = (mean(&les), mean(&trunk), mean(&trained), mean(&lesion_model));
        check(
            l - t >= 0.1 && m < l,
            format!(
                "analytic lesion MAE {l:.4} vs non-lesion trunk {t:.4} (gap {:.4}); trained lesion MAE {m:.4} at 6400 trunk steps ({short:.4} at 400) over {} patients",
                l - t,
                les.len()
            ),
        )
    };
    (c6, c7)
}

// 8. Paired t-test against scipy reference values and the degenerate cases.
fn ttest_oracle() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ttest_scipy.json");
    let fixture: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let cases = fixture["cases"].as_array().unwrap();
    let (mut et, mut ep) = (0.0f64, 0.0f64);
    for case in cases {
        let get = |k: &str| -> Vec<f64> { case[k].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect() };
        let r = paired_ttest(&get("a"), &get("b")).map_err(|e| e.to_string())?;
        et = et.max((r.t - case["t"].as_f64().unwrap()).abs());
        ep = ep.max((r.p - case["p"].as_f64().unwrap()).abs());
    }
    let same = paired_ttest(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
    let shift = paired_ttest(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap();
    let sentinels = (same.t, same.p) == (0.0, 1.0)
        && (shift.t, shift.p) == (f64::INFINITY, 0.0)
        && paired_ttest(&[1.0], &[2.0]).is_err()
        && paired_ttest(&[1.0, 2.0], &[1.0]).is_err();
    check(
        cases.len() == 20 && et <= 1e-6 && ep <= 1e-9 && sentinels,
        format!("{} cases: max |dt| {et:.2e}, max |dp| {ep:.2e}; sentinels {}", cases.len(), if sentinels { "ok" } else { "wrong" }),
    )
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn full_run(root: &Path) -> districtgan::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let cfg = ExperimentConfig::from_toml(
        "[phantom]\ndims = [32, 32, 64]\nlesion_radius = [2.0, 3.0]\n\
         [dataset]\nn_patients = 5\n\
         [model]\npatch_size = 16\nbase_channels = 4\ndepth = 2\n\
         [train]\ntotal_epochs = 2\ndecay_start_epoch = 2\npatches_per_epoch = 4\nvalidate_every = 1\n",
        &[],
    )?;
    let m = cmd_phantom(&cfg, &root.join("data"))?.manifest;
    cmd_train(&cfg, &m, TrainTarget::All, &root.join("models"), Resume::Continue, false)?;
    let mut preds = Vec::new();
    for (method, dir) in [(Method::Proposed, "prop"), (Method::Competitor, "comp")] {
        cmd_translate(&m, &root.join("models"), method, Arch::Pix2pix, &root.join(dir), true)?;
        preds.push(root.join(dir));
    }
    cmd_evaluate(&m, &preds, &root.join("eval"))?;
    Ok(files(root))
}

// 9. The whole workflow is bit-reproducible.
fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = full_run(a.path()).map_err(|e| e.to_string())?;
    let fb = full_run(b.path()).map_err(|e| e.to_string())?;
    if fa.keys().ne(fb.keys()) {
        return Err("runs produced different file sets".into());
    }
    let differ: Vec<_> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    let volumes = fa.keys().filter(|k| k.extension().is_some_and(|e| e == "vvol" || e == "nii")).count();
    check(
        differ.is_empty(),
        if differ.is_empty() {
            format!("{} files identical across two runs ({volumes} volumes)", fa.len())
        } else {
            format!("differing files: {}", differ.join(", "))
        },
    )
}

fn main() -> ExitCode {
    // libtest-style flags (e.g. `--list`, filters) are accepted and ignored
    // except for listing.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, r: Outcome, secs: f64| {
        match &r {
            Ok(d) => println!("[PASS] {name} ({secs:.1}s): {d}"),
            Err(d) => println!("[FAIL] {name} ({secs:.1}s): {d}"),
        }
        results.push((name, r));
    };
    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let r = f();
        (r, t.elapsed().as_secs_f64())
    };
    let (r, secs) = timed(&stitch_identity);
    report("1 stitch identity", r, secs);
    let (r, secs) = timed(&partition_exactness);
    report("2 partition and assembly", r, secs);
    let (r, secs) = timed(&metric_oracles);
    report("3 metric oracles", r, secs);
    let (r, secs) = timed(&gradient_check);
    report("4 gradient check", r, secs);
    let (r, secs) = timed(&schedule_and_clipping);
    report("5 schedule and clipping", r, secs);
    let t = Instant::now();
    let (c6, c7) = replication();
    let secs = t.elapsed().as_secs_f64();
    report("6 district vs whole-body", c6, secs);
    report("7 lesion protocol", c7, secs);
    let (r, secs) = timed(&ttest_oracle);
    report("8 t-test oracle", r, secs);
    let (r, secs) = timed(&determinism);
    report("9 determinism", r, secs);
    let failed = results.iter().filter(|r| r.1.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
