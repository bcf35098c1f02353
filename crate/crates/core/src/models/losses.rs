//! Adversarial and reconstruction objectives. Each term returns its mean
//! value and the gradient with respect to its first argument.

use super::networks::{zero_grads, Discriminator, Generator};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAMBDA_L1: f64 = 100.0;
pub const LAMBDA_CYCLE: f64 = 10.0;

/// Mean binary cross-entropy of `sigmoid(logits)` against a constant label.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, target: f64) -> (f64, Tensor<T>) {
    let n = logits.data.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.channels, logits.dims);
    for (g, &z) in grad.data.iter_mut().zip(&logits.data) {
        let z = z.as_f64();
        loss += z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        let sig = 1.0 / (1.0 + (-z).exp());
        *g = T::from_f64((sig - target) / n);
    }
    (loss / n, grad)
}

/// Mean squared distance of raw scores to a constant target.
pub fn least_squares<T: Real>(scores: &Tensor<T>, target: f64) -> (f64, Tensor<T>) {
    let n = scores.data.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(scores.channels, scores.dims);
    for (g, &s) in grad.data.iter_mut().zip(&scores.data) {
        let r = s.as_f64() - target;
        loss += r * r;
        *g = T::from_f64(2.0 * r / n);
    }
    (loss / n, grad)
}

/// Mean absolute difference; the gradient uses sign(0) = 0.
pub fn l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> (f64, Tensor<T>) {
    assert_eq!(a.data.len(), b.data.len(), "l1 operand sizes");
    let n = a.data.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(a.channels, a.dims);
    for ((g, &x), &y) in grad.data.iter_mut().zip(&a.data).zip(&b.data) {
        let d = x.as_f64() - y.as_f64();
        loss += d.abs();
        *g = T::from_f64(if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        });
    }
    (loss / n, grad)
}

fn scale<T: Real>(t: &mut Tensor<T>, k: f64) {
    let k = T::from_f64(k);
    t.data.iter_mut().for_each(|v| *v = *v * k);
}

fn finite(step: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            step,
            what: format!("{what} = {v}"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pix2PixLosses {
    pub loss_g: f64,
    pub loss_d: f64,
    /// Unweighted mean |G(x) − y|.
    pub l1_term: f64,
    pub adv_term: f64,
}

/// Evaluates both paired objectives without computing gradients.
pub fn pix2pix_losses<T: Real>(
    g: &Generator<T>,
    d: &Discriminator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    lambda: f64,
) -> Result<Pix2PixLosses> {
    let fake = g.infer(x)?;
    let real_scores = d.infer(&Tensor::concat(x, y))?;
    let fake_scores = d.infer(&Tensor::concat(x, &fake))?;
    let adv_term = bce_with_logits(&fake_scores, 1.0).0;
    let l1_term = l1(&fake, y).0;
    let loss_d =
        0.5 * (bce_with_logits(&real_scores, 1.0).0 + bce_with_logits(&fake_scores, 0.0).0);
    let out = Pix2PixLosses {
        loss_g: adv_term + lambda * l1_term,
        loss_d,
        l1_term,
        adv_term,
    };
    finite(0, "loss_G", out.loss_g)?;
    finite(0, "loss_D", out.loss_d)?;
    Ok(out)
}

/// Discriminator gradient on one real and one (detached) fake pair.
pub fn pix2pix_discriminator_grads<T: Real>(
    d: &Discriminator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    fake: &Tensor<T>,
    step: usize,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut grads = zero_grads(&d.params);
    let (real_scores, real_tape) = d.forward(&Tensor::concat(x, y))?;
    let (fake_scores, fake_tape) = d.forward(&Tensor::concat(x, fake))?;
    let (lr, mut gr) = bce_with_logits(&real_scores, 1.0);
    let (lf, mut gf) = bce_with_logits(&fake_scores, 0.0);
    let loss = finite(step, "loss_D", 0.5 * (lr + lf))?;
    scale(&mut gr, 0.5);
    scale(&mut gf, 0.5);
    d.backward(&real_tape, &gr, &mut grads, false);
    d.backward(&fake_tape, &gf, &mut grads, false);
    Ok((loss, grads))
}

/// Generator gradient of `adv + λ·L1`, backpropagated through the
/// discriminator into the generator.
pub fn pix2pix_generator_grads<T: Real>(
    g: &Generator<T>,
    d: &Discriminator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    lambda: f64,
    step: usize,
) -> Result<(Pix2PixLosses, Vec<Vec<T>>)> {
    let (fake, g_tape) = g.forward(x)?;
    let (losses, grads) = pix2pix_generator_grads_from(g, &g_tape, &fake, d, x, y, lambda, step)?;
    Ok((losses, grads))
}

/// As [`pix2pix_generator_grads`], reusing an existing generator pass.
#[allow(clippy::too_many_arguments)]
pub fn pix2pix_generator_grads_from<T: Real>(
    g: &Generator<T>,
    g_tape: &super::networks::GeneratorTape<T>,
    fake: &Tensor<T>,
    d: &Discriminator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    lambda: f64,
    step: usize,
) -> Result<(Pix2PixLosses, Vec<Vec<T>>)> {
    let (scores, d_tape) = d.forward(&Tensor::concat(x, fake))?;
    let (adv_term, g_scores) = bce_with_logits(&scores, 1.0);
    let (l1_term, mut g_l1) = l1(fake, y);
    let loss_g = finite(step, "loss_G", adv_term + lambda * l1_term)?;
    let mut d_scratch = zero_grads(&d.params);
    let g_in = d
        .backward(&d_tape, &g_scores, &mut d_scratch, true)
        .expect("input gradient requested");
    let (_, mut g_fake) = g_in.split(x.channels);
    scale(&mut g_l1, lambda);
    g_fake.add_assign(&g_l1);
    let mut grads = zero_grads(&g.params);
    g.backward(g_tape, &g_fake, &mut grads, false);
    Ok((
        Pix2PixLosses {
            loss_g,
            loss_d: f64::NAN,
            l1_term,
            adv_term,
        },
        grads,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleGanLosses {
    pub loss_g: f64,
    pub loss_d: f64,
    pub adv_g: f64,
    pub adv_f: f64,
    /// Unweighted mean |F(G(x)) − x| + mean |G(F(y)) − y|.
    pub cycle_term: f64,
}

/// Evaluates the unpaired objective without gradients.
pub fn cyclegan_losses<T: Real>(
    g: &Generator<T>,
    f: &Generator<T>,
    d_x: &Discriminator<T>,
    d_y: &Discriminator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    lambda_cyc: f64,
) -> Result<CycleGanLosses> {
    let fake_y = g.infer(x)?;
    let fake_x = f.infer(y)?;
    let rec_x = f.infer(&fake_y)?;
    let rec_y = g.infer(&fake_x)?;
    let adv_g = least_squares(&d_y.infer(&fake_y)?, 1.0).0;
    let adv_f = least_squares(&d_x.infer(&fake_x)?, 1.0).0;
    let cycle_term = l1(&rec_x, x).0 + l1(&rec_y, y).0;
    let loss_d = 0.5
        * (least_squares(&d_y.infer(y)?, 1.0).0 + least_squares(&d_y.infer(&fake_y)?, 0.0).0)
        + 0.5 * (least_squares(&d_x.infer(x)?, 1.0).0 + least_squares(&d_x.infer(&fake_x)?, 0.0).0);
    let out = CycleGanLosses {
        loss_g: adv_g + adv_f + lambda_cyc * cycle_term,
        loss_d,
        adv_g,
        adv_f,
        cycle_term,
    };
    finite(0, "loss_G", out.loss_g)?;
    finite(0, "loss_D", out.loss_d)?;
    Ok(out)
}

pub struct CycleGanGrads<T> {
    pub losses: CycleGanLosses,
    pub g: Vec<Vec<T>>,
    pub f: Vec<Vec<T>>,
    pub fake_x: Tensor<T>,
    pub fake_y: Tensor<T>,
}

/// Joint generator gradients for G: X→Y and F: Y→X.
#[allow(clippy::too_many_arguments)]
pub fn cyclegan_generator_grads<T: Real>(
    g: &Generator<T>,
    f: &Generator<T>,
    d_x: &Discriminator<T>,
    d_y: &Discriminator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    lambda_cyc: f64,
    step: usize,
) -> Result<CycleGanGrads<T>> {
    let (fake_y, t_gx) = g.forward(x)?;
    let (rec_x, t_f_fake) = f.forward(&fake_y)?;
    let (fake_x, t_fy) = f.forward(y)?;
    let (rec_y, t_g_fake) = g.forward(&fake_x)?;
    let (sy, t_dy) = d_y.forward(&fake_y)?;
    let (sx, t_dx) = d_x.forward(&fake_x)?;
    let (adv_g, gsy) = least_squares(&sy, 1.0);
    let (adv_f, gsx) = least_squares(&sx, 1.0);
    let (cx, mut g_rec_x) = l1(&rec_x, x);
    let (cy, mut g_rec_y) = l1(&rec_y, y);
    scale(&mut g_rec_x, lambda_cyc);
    scale(&mut g_rec_y, lambda_cyc);
    let cycle_term = cx + cy;
    let loss_g = finite(step, "loss_G", adv_g + adv_f + lambda_cyc * cycle_term)?;

    let mut gg = zero_grads(&g.params);
    let mut gf = zero_grads(&f.params);
    let mut scratch_y = zero_grads(&d_y.params);
    let mut scratch_x = zero_grads(&d_x.params);
    // x → G → F → rec_x
    let mut g_fake_y = d_y.backward(&t_dy, &gsy, &mut scratch_y, true).unwrap();
    g_fake_y.add_assign(&f.backward(&t_f_fake, &g_rec_x, &mut gf, true).unwrap());
    g.backward(&t_gx, &g_fake_y, &mut gg, false);
    // y → F → G → rec_y
    let mut g_fake_x = d_x.backward(&t_dx, &gsx, &mut scratch_x, true).unwrap();
    g_fake_x.add_assign(&g.backward(&t_g_fake, &g_rec_y, &mut gg, true).unwrap());
    f.backward(&t_fy, &g_fake_x, &mut gf, false);

    Ok(CycleGanGrads {
        losses: CycleGanLosses {
            loss_g,
            loss_d: f64::NAN,
            adv_g,
            adv_f,
            cycle_term,
        },
        g: gg,
        f: gf,
        fake_x,
        fake_y,
    })
}

/// Least-squares discriminator gradient for one real/fake pair.
pub fn lsgan_discriminator_grads<T: Real>(
    d: &Discriminator<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    step: usize,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut grads = zero_grads(&d.params);
    let (rs, rt) = d.forward(real)?;
    let (fs, ft) = d.forward(fake)?;
    let (lr, mut gr) = least_squares(&rs, 1.0);
    let (lf, mut gf) = least_squares(&fs, 0.0);
    let loss = finite(step, "loss_D", 0.5 * (lr + lf))?;
    scale(&mut gr, 0.5);
    scale(&mut gf, 0.5);
    d.backward(&rt, &gr, &mut grads, false);
    d.backward(&ft, &gf, &mut grads, false);
    Ok((loss, grads))
}
