//! Convolution, normalization and activation primitives with hand-written
//! backward passes. Convolutions lower to GEMM via im2col.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm_view, matmul, Real, Tensor, View};
use crate::volume::{voxel_count, Dims};

const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    /// 3×3×3, stride 1, zero padding 1.
    Same3,
    /// 2×2×2, stride 2: halves each axis.
    Down2,
    /// Transposed 2×2×2, stride 2: doubles each axis.
    Up2,
    /// 1×1×1.
    Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    fan_in: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Registers parameters in a fixed order while a network is being laid out.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    pub specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn conv(&mut self, name: &str, kind: ConvKind, ci: usize, co: usize) -> Conv {
        let (shape, fan_in) = match kind {
            ConvKind::Same3 => (vec![co, ci * 27], ci * 27),
            ConvKind::Down2 => (vec![co, ci * 8], ci * 8),
            ConvKind::Up2 => (vec![co * 8, ci], ci),
            ConvKind::Point => (vec![co, ci], ci),
        };
        let w = self.specs.len();
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape,
            fan_in,
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![co],
            fan_in,
        });
        Conv {
            kind,
            ci,
            co,
            w,
            b: w + 1,
        }
    }

    /// Uniform(±1/√fan_in) for weights and biases.
    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> Vec<Vec<T>> {
        self.specs
            .iter()
            .map(|s| {
                let bound = 1.0 / (s.fan_in as f64).sqrt();
                (0..s.len())
                    .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub kind: ConvKind,
    pub ci: usize,
    pub co: usize,
    w: usize,
    b: usize,
}

/// Target size of one im2col block, in elements. Working on z-slabs keeps
/// the unfolded block cache-resident instead of streaming it through memory.
const IM2COL_BLOCK: usize = 1 << 18;

fn slab_planes(dims: Dims, rows: usize) -> usize {
    let plane = dims[0] * dims[1];
    (IM2COL_BLOCK / (rows * plane).max(1)).clamp(1, dims[2])
}

/// Unfolds output planes `z0..z1` of a same-padded 3³ convolution into
/// `cols` (rows `c*27 + k`, `(z1-z0)·nx·ny` columns). `cols` must be zeroed.
fn im2col3<T: Real>(x: &Tensor<T>, z0: usize, z1: usize, cols: &mut [T]) {
    let [nx, ny, nz] = x.dims;
    let w = (z1 - z0) * nx * ny;
    for c in 0..x.channels {
        let src = x.channel(c);
        for k in 0..27 {
            let (dx, dy, dz) = (
                (k % 3) as isize - 1,
                ((k / 3) % 3) as isize - 1,
                (k / 9) as isize - 1,
            );
            let row = (c * 27 + k) * w;
            let x_lo = (-dx).max(0) as usize;
            let x_hi = (nx as isize - dx).min(nx as isize).max(0) as usize;
            if x_lo >= x_hi {
                continue;
            }
            for z in z0..z1 {
                let sz = z as isize + dz;
                if sz < 0 || sz >= nz as isize {
                    continue;
                }
                for y in 0..ny {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= ny as isize {
                        continue;
                    }
                    let dst = row + ((z - z0) * ny + y) * nx;
                    let s = ((sz as usize * ny + sy as usize) * nx) as isize + dx;
                    let s_lo = (s + x_lo as isize) as usize;
                    cols[dst + x_lo..dst + x_hi].copy_from_slice(&src[s_lo..s_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Calls `f(z0, z1, cols)` for each z-slab with a freshly zeroed im2col block.
fn for_each_slab<T: Real>(x: &Tensor<T>, mut f: impl FnMut(usize, usize, &[T])) {
    let rows = x.channels * 27;
    let planes = slab_planes(x.dims, rows);
    let plane = x.dims[0] * x.dims[1];
    let mut buf = vec![T::zero(); rows * planes * plane];
    let mut z0 = 0;
    while z0 < x.dims[2] {
        let z1 = (z0 + planes).min(x.dims[2]);
        let cols = &mut buf[..rows * (z1 - z0) * plane];
        cols.iter_mut().for_each(|v| *v = T::zero());
        im2col3(x, z0, z1, cols);
        f(z0, z1, cols);
        z0 = z1;
    }
}

/// Same-padded 3³ convolution without bias; `w` is `co × (ci·27)`.
fn conv3<T: Real>(w: &[T], co: usize, x: &Tensor<T>) -> Tensor<T> {
    let mut o = Tensor::zeros(co, x.dims);
    let (n, plane, k) = (x.spatial(), x.dims[0] * x.dims[1], x.channels * 27);
    for_each_slab(x, |z0, z1, cols| {
        let nc = (z1 - z0) * plane;
        gemm_view(
            co,
            k,
            nc,
            View::rows(w, k),
            View::rows(cols, nc),
            &mut o.data[z0 * plane..],
            n,
            false,
        );
    });
    o
}

/// Kernel of the adjoint convolution: swaps in/out channels and mirrors
/// every tap, so that `conv3(flip(w), ci, g)` is the input gradient.
fn flip3<T: Real>(w: &[T], ci: usize, co: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for o in 0..co {
        for c in 0..ci {
            for k in 0..27 {
                out[c * co * 27 + o * 27 + (26 - k)] = w[o * ci * 27 + c * 27 + k];
            }
        }
    }
    out
}

fn half(dims: Dims) -> Dims {
    assert!(
        dims.iter().all(|d| d % 2 == 0),
        "stride-2 layer needs even dims, got {dims:?}"
    );
    dims.map(|d| d / 2)
}

/// Gathers non-overlapping 2³ blocks: rows `c*8 + k`, one column per block.
fn im2col_down<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let [nx, ny, _] = x.dims;
    let od = half(x.dims);
    let on = voxel_count(od);
    let mut cols = vec![T::zero(); x.channels * 8 * on];
    for c in 0..x.channels {
        let src = x.channel(c);
        for k in 0..8 {
            let (kx, ky, kz) = (k % 2, (k / 2) % 2, k / 4);
            let row = &mut cols[(c * 8 + k) * on..(c * 8 + k + 1) * on];
            let mut i = 0;
            for oz in 0..od[2] {
                for oy in 0..od[1] {
                    let base = ((2 * oz + kz) * ny + 2 * oy + ky) * nx + kx;
                    for ox in 0..od[0] {
                        row[i] = src[base + 2 * ox];
                        i += 1;
                    }
                }
            }
        }
    }
    cols
}

/// Inverse of [`im2col_down`]: scatters block columns onto a grid of `dims`.
fn col2im_down<T: Real>(cols: &[T], channels: usize, dims: Dims) -> Tensor<T> {
    let [nx, ny, _] = dims;
    let od = half(dims);
    let on = voxel_count(od);
    let mut out = Tensor::zeros(channels, dims);
    let n = voxel_count(dims);
    for c in 0..channels {
        let dst = &mut out.data[c * n..(c + 1) * n];
        for k in 0..8 {
            let (kx, ky, kz) = (k % 2, (k / 2) % 2, k / 4);
            let row = &cols[(c * 8 + k) * on..(c * 8 + k + 1) * on];
            let mut i = 0;
            for oz in 0..od[2] {
                for oy in 0..od[1] {
                    let base = ((2 * oz + kz) * ny + 2 * oy + ky) * nx + kx;
                    for ox in 0..od[0] {
                        dst[base + 2 * ox] = row[i];
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

fn add_bias<T: Real>(t: &mut Tensor<T>, bias: &[T]) {
    let n = t.spatial();
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut t.data[c * n..(c + 1) * n] {
            *v += b;
        }
    }
}

fn bias_grad<T: Real>(g: &Tensor<T>, out: &mut [T]) {
    for (c, o) in out.iter_mut().enumerate() {
        let s: f64 = g.channel(c).iter().map(|v| v.as_f64()).sum();
        *o += T::from_f64(s);
    }
}

impl Conv {
    pub fn out_dims(&self, d: Dims) -> Dims {
        match self.kind {
            ConvKind::Same3 | ConvKind::Point => d,
            ConvKind::Down2 => half(d),
            ConvKind::Up2 => d.map(|v| v * 2),
        }
    }

    pub fn forward<T: Real>(&self, p: &[Vec<T>], x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels, self.ci, "conv input channels");
        let w = &p[self.w];
        let od = self.out_dims(x.dims);
        let mut out = match self.kind {
            ConvKind::Same3 => conv3(w, self.co, x),
            ConvKind::Down2 => {
                let cols = im2col_down(x);
                let mut o = Tensor::zeros(self.co, od);
                let on = o.spatial();
                matmul(
                    self.co,
                    self.ci * 8,
                    on,
                    w,
                    false,
                    &cols,
                    false,
                    &mut o.data,
                    false,
                );
                o
            }
            ConvKind::Up2 => {
                let n = x.spatial();
                let mut cols = vec![T::zero(); self.co * 8 * n];
                matmul(
                    self.co * 8,
                    self.ci,
                    n,
                    w,
                    false,
                    &x.data,
                    false,
                    &mut cols,
                    false,
                );
                col2im_down(&cols, self.co, od)
            }
            ConvKind::Point => {
                let mut o = Tensor::zeros(self.co, od);
                matmul(
                    self.co,
                    self.ci,
                    x.spatial(),
                    w,
                    false,
                    &x.data,
                    false,
                    &mut o.data,
                    false,
                );
                o
            }
        };
        add_bias(&mut out, &p[self.b]);
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_input` is set.
    pub fn backward<T: Real>(
        &self,
        p: &[Vec<T>],
        x: &Tensor<T>,
        gout: &Tensor<T>,
        grads: &mut [Vec<T>],
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let w = &p[self.w];
        bias_grad(gout, &mut grads[self.b]);
        match self.kind {
            ConvKind::Same3 => {
                let (n, plane, k) = (x.spatial(), x.dims[0] * x.dims[1], self.ci * 27);
                let gw = &mut grads[self.w];
                for_each_slab(x, |z0, z1, cols| {
                    let nc = (z1 - z0) * plane;
                    let g = &gout.data[z0 * plane..];
                    gemm_view(
                        self.co,
                        nc,
                        k,
                        View::rows(g, n),
                        View::transposed(cols, nc),
                        gw,
                        k,
                        true,
                    );
                });
                need_input.then(|| conv3(&flip3(w, self.ci, self.co), self.ci, gout))
            }
            ConvKind::Down2 => {
                let on = gout.spatial();
                let k = self.ci * 8;
                let cols = im2col_down(x);
                matmul(
                    self.co,
                    on,
                    k,
                    &gout.data,
                    false,
                    &cols,
                    true,
                    &mut grads[self.w],
                    true,
                );
                need_input.then(|| {
                    let mut gcols = cols;
                    matmul(
                        k, self.co, on, w, true, &gout.data, false, &mut gcols, false,
                    );
                    col2im_down(&gcols, self.ci, x.dims)
                })
            }
            ConvKind::Up2 => {
                let n = x.spatial();
                let gcols = im2col_down(gout);
                matmul(
                    self.co * 8,
                    n,
                    self.ci,
                    &gcols,
                    false,
                    &x.data,
                    true,
                    &mut grads[self.w],
                    true,
                );
                need_input.then(|| {
                    let mut gx = Tensor::zeros(self.ci, x.dims);
                    matmul(
                        self.ci,
                        self.co * 8,
                        n,
                        w,
                        true,
                        &gcols,
                        false,
                        &mut gx.data,
                        false,
                    );
                    gx
                })
            }
            ConvKind::Point => {
                let n = x.spatial();
                matmul(
                    self.co,
                    n,
                    self.ci,
                    &gout.data,
                    false,
                    &x.data,
                    true,
                    &mut grads[self.w],
                    true,
                );
                need_input.then(|| {
                    let mut gx = Tensor::zeros(self.ci, x.dims);
                    matmul(
                        self.ci,
                        self.co,
                        n,
                        w,
                        true,
                        &gout.data,
                        false,
                        &mut gx.data,
                        false,
                    );
                    gx
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

/// Per-channel instance normalization without affine parameters.
pub fn instance_norm<T: Real>(x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
    let n = x.spatial();
    let mut y = Tensor::zeros(x.channels, x.dims);
    let mut inv_std = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let src = x.channel(c);
        let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        let var = src.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        for (o, &v) in y.data[c * n..(c + 1) * n].iter_mut().zip(src) {
            *o = T::from_f64((v.as_f64() - mean) * is);
        }
        inv_std.push(T::from_f64(is));
    }
    let cache = NormCache {
        xhat: y.clone(),
        inv_std,
    };
    (y, cache)
}

pub fn instance_norm_backward<T: Real>(g: &Tensor<T>, cache: &NormCache<T>) -> Tensor<T> {
    let n = g.spatial();
    let mut out = Tensor::zeros(g.channels, g.dims);
    for c in 0..g.channels {
        let gc = g.channel(c);
        let xh = cache.xhat.channel(c);
        let mean_g = gc.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        let mean_gx = gc
            .iter()
            .zip(xh)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum::<f64>()
            / n as f64;
        let is = cache.inv_std[c].as_f64();
        for ((o, &gv), &xv) in out.data[c * n..(c + 1) * n].iter_mut().zip(gc).zip(xh) {
            *o = T::from_f64(is * (gv.as_f64() - mean_g - xv.as_f64() * mean_gx));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Identity,
    Relu,
    LeakyRelu,
    Sigmoid,
}

impl Act {
    fn apply<T: Real>(self, t: &mut Tensor<T>) {
        let slope = T::from_f64(LEAKY_SLOPE);
        match self {
            Act::Identity => {}
            Act::Relu => t.data.iter_mut().for_each(|v| *v = v.max(T::zero())),
            Act::LeakyRelu => t.data.iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = *v * slope
                }
            }),
            Act::Sigmoid => t
                .data
                .iter_mut()
                .for_each(|v| *v = T::one() / (T::one() + (-*v).exp())),
        }
    }

    /// Gradient through the activation, expressed in terms of its output.
    fn backward<T: Real>(self, g: &mut Tensor<T>, out: &Tensor<T>) {
        let slope = T::from_f64(LEAKY_SLOPE);
        match self {
            Act::Identity => {}
            Act::Relu => g.data.iter_mut().zip(&out.data).for_each(|(gv, &o)| {
                if o <= T::zero() {
                    *gv = T::zero()
                }
            }),
            Act::LeakyRelu => g.data.iter_mut().zip(&out.data).for_each(|(gv, &o)| {
                if o < T::zero() {
                    *gv = *gv * slope
                }
            }),
            Act::Sigmoid => g
                .data
                .iter_mut()
                .zip(&out.data)
                .for_each(|(gv, &o)| *gv = *gv * o * (T::one() - o)),
        }
    }
}

/// Convolution, optional instance norm, activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub conv: Conv,
    pub norm: bool,
    pub act: Act,
}

#[derive(Debug, Clone)]
pub struct BlockTape<T> {
    input: Tensor<T>,
    norm: Option<NormCache<T>>,
    output: Tensor<T>,
}

impl Block {
    fn normalize(&self, dims: Dims) -> bool {
        // A single-voxel map normalizes to exactly zero; skip it.
        self.norm && voxel_count(self.conv.out_dims(dims)) > 1
    }

    pub fn infer<T: Real>(&self, p: &[Vec<T>], x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.conv.forward(p, x);
        if self.normalize(x.dims) {
            y = instance_norm(&y).0;
        }
        self.act.apply(&mut y);
        y
    }

    pub fn forward<T: Real>(&self, p: &[Vec<T>], x: &Tensor<T>) -> (Tensor<T>, BlockTape<T>) {
        let mut y = self.conv.forward(p, x);
        let norm = if self.normalize(x.dims) {
            let (yn, cache) = instance_norm(&y);
            y = yn;
            Some(cache)
        } else {
            None
        };
        self.act.apply(&mut y);
        let tape = BlockTape {
            input: x.clone(),
            norm,
            output: y.clone(),
        };
        (y, tape)
    }

    pub fn backward<T: Real>(
        &self,
        p: &[Vec<T>],
        tape: &BlockTape<T>,
        gout: &Tensor<T>,
        grads: &mut [Vec<T>],
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let mut g = gout.clone();
        self.act.backward(&mut g, &tape.output);
        if let Some(cache) = &tape.norm {
            g = instance_norm_backward(&g, cache);
        }
        self.conv.backward(p, &tape.input, &g, grads, need_input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_tensor(c: usize, dims: Dims, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            c,
            dims,
            (0..c * voxel_count(dims))
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    /// Direct (non-GEMM) 3×3×3 same-padded convolution.
    fn naive_same3(x: &Tensor<f64>, w: &[f64], b: &[f64], co: usize) -> Tensor<f64> {
        let [nx, ny, nz] = x.dims;
        let mut out = Tensor::zeros(co, x.dims);
        for o in 0..co {
            for z in 0..nz {
                for y in 0..ny {
                    for xx in 0..nx {
                        let mut acc = b[o];
                        for c in 0..x.channels {
                            for k in 0..27 {
                                let (dx, dy, dz) = (
                                    (k % 3) as isize - 1,
                                    ((k / 3) % 3) as isize - 1,
                                    (k / 9) as isize - 1,
                                );
                                let (sx, sy, sz) =
                                    (xx as isize + dx, y as isize + dy, z as isize + dz);
                                if sx < 0
                                    || sy < 0
                                    || sz < 0
                                    || sx >= nx as isize
                                    || sy >= ny as isize
                                    || sz >= nz as isize
                                {
                                    continue;
                                }
                                let v = x.data[c * nx * ny * nz
                                    + (sz as usize * ny + sy as usize) * nx
                                    + sx as usize];
                                acc += w[o * x.channels * 27 + c * 27 + k] * v;
                            }
                        }
                        out.data[o * nx * ny * nz + (z * ny + y) * nx + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn same3_matches_direct_convolution() {
        let mut pb = ParamBuilder::default();
        let conv = pb.conv("c", ConvKind::Same3, 2, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p: Vec<Vec<f64>> = pb.init(&mut rng);
        let x = rand_tensor(2, [4, 3, 5], 2);
        let fast = conv.forward(&p, &x);
        let slow = naive_same3(&x, &p[0], &p[1], 3);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Inputs large enough to be split into several z-slabs: forward against
    /// the direct form, backward through the adjoint identities
    /// ⟨conv(x), g⟩ = ⟨x, ∂x⟩ = ⟨w, ∂w⟩ (bias zeroed).
    #[test]
    fn slabbed_same3_forward_and_adjoint() {
        let dims = [24, 20, 9];
        let ci = 5;
        assert!(slab_planes(dims, ci * 27) < dims[2]);
        let mut pb = ParamBuilder::default();
        let conv = pb.conv("c", ConvKind::Same3, ci, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut p: Vec<Vec<f64>> = pb.init(&mut rng);
        p[1].iter_mut().for_each(|b| *b = 0.0);
        let x = rand_tensor(ci, dims, 6);
        let y = conv.forward(&p, &x);
        let slow = naive_same3(&x, &p[0], &p[1], 3);
        for (a, b) in y.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let g = rand_tensor(3, dims, 7);
        let mut grads: Vec<Vec<f64>> = p.iter().map(|v| vec![0.0; v.len()]).collect();
        let gx = conv.backward(&p, &x, &g, &mut grads, true).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let lhs = dot(&y.data, &g.data);
        assert!((lhs - dot(&x.data, &gx.data)).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - dot(&p[0], &grads[0])).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn down_then_up_shapes() {
        let mut pb = ParamBuilder::default();
        let down = pb.conv("d", ConvKind::Down2, 1, 4);
        let up = pb.conv("u", ConvKind::Up2, 4, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p: Vec<Vec<f64>> = pb.init(&mut rng);
        let x = rand_tensor(1, [4, 6, 2], 3);
        let h = down.forward(&p, &x);
        assert_eq!((h.channels, h.dims), (4, [2, 3, 1]));
        let y = up.forward(&p, &h);
        assert_eq!((y.channels, y.dims), (2, [4, 6, 2]));
    }

    /// Finite-difference check of every layer kind's input and weight
    /// gradients against a random linear functional of the output.
    #[test]
    fn layer_gradients_match_finite_differences() {
        for (kind, dims) in [
            (ConvKind::Same3, [3, 4, 2]),
            (ConvKind::Down2, [4, 2, 4]),
            (ConvKind::Up2, [2, 3, 1]),
            (ConvKind::Point, [3, 2, 2]),
        ] {
            for (norm, act) in [
                (false, Act::Identity),
                (true, Act::LeakyRelu),
                (false, Act::Sigmoid),
                (true, Act::Relu),
            ] {
                let mut pb = ParamBuilder::default();
                let block = Block {
                    conv: pb.conv("c", kind, 2, 3),
                    norm,
                    act,
                };
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
                let mut p: Vec<Vec<f64>> = pb.init(&mut rng);
                let x = rand_tensor(2, dims, 5);
                let (y, tape) = block.forward(&p, &x);
                let probe = rand_tensor(y.channels, y.dims, 9);
                let objective = |p: &[Vec<f64>], x: &Tensor<f64>| -> f64 {
                    block
                        .infer(p, x)
                        .data
                        .iter()
                        .zip(&probe.data)
                        .map(|(a, b)| a * b)
                        .sum()
                };
                let mut grads: Vec<Vec<f64>> = p.iter().map(|v| vec![0.0; v.len()]).collect();
                let gx = block.backward(&p, &tape, &probe, &mut grads, true).unwrap();
                let h = 1e-6;
                for i in 0..x.data.len() {
                    let mut xp = x.clone();
                    xp.data[i] += h;
                    let mut xm = x.clone();
                    xm.data[i] -= h;
                    let fd = (objective(&p, &xp) - objective(&p, &xm)) / (2.0 * h);
                    assert!(
                        (fd - gx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                        "{kind:?} {act:?} input {i}: {fd} vs {}",
                        gx.data[i]
                    );
                }
                for t in 0..p.len() {
                    for i in 0..p[t].len() {
                        let orig = p[t][i];
                        p[t][i] = orig + h;
                        let fp = objective(&p, &x);
                        p[t][i] = orig - h;
                        let fm = objective(&p, &x);
                        p[t][i] = orig;
                        let fd = (fp - fm) / (2.0 * h);
                        assert!(
                            (fd - grads[t][i]).abs() < 1e-6 * (1.0 + fd.abs()),
                            "{kind:?} param {t}/{i}: {fd} vs {}",
                            grads[t][i]
                        );
                    }
                }
            }
        }
    }
}
