//! U-Net generator and PatchGAN discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Act, Block, BlockTape, ConvKind, ParamBuilder, ParamSpec};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::volume::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub patch_size: usize,
}

impl GeneratorConfig {
    pub fn toy(patch_size: usize) -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_channels: 16,
            depth: 3,
            patch_size,
        }
    }

    pub fn standard(patch_size: usize) -> Self {
        Self {
            base_channels: 32,
            ..Self::toy(patch_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(Error::Parameter(
                "generator channel counts must be positive".into(),
            ));
        }
        if self.depth == 0 {
            return Err(Error::Parameter(
                "generator depth must be at least 1".into(),
            ));
        }
        let f = 1usize << self.depth.min(30);
        if self.depth > 30 || f > self.patch_size || self.patch_size % f != 0 {
            return Err(Error::Parameter(format!(
                "patch size {} is not a multiple of 2^{} (bottleneck must be at least 1 voxel)",
                self.patch_size, self.depth
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
}

impl DiscriminatorConfig {
    /// Conditional discriminator seeing CT and PET stacked.
    pub fn paired(base_channels: usize) -> Self {
        Self {
            in_channels: 2,
            base_channels,
            levels: 3,
        }
    }

    pub fn unpaired(base_channels: usize) -> Self {
        Self {
            in_channels: 1,
            ..Self::paired(base_channels)
        }
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.levels == 0 {
            return Err(Error::Parameter(
                "discriminator sizes must be positive".into(),
            ));
        }
        let f = 1usize << self.levels.min(30);
        if self.levels > 30 || f > patch_size || patch_size % f != 0 {
            return Err(Error::Parameter(format!(
                "patch size {patch_size} cannot be downsampled {} times",
                self.levels
            )));
        }
        Ok(())
    }
}

fn cast_params<T: Real, U: Real>(p: &[Vec<T>]) -> Vec<Vec<U>> {
    p.iter()
        .map(|v| v.iter().map(|x| U::from_f64(x.as_f64())).collect())
        .collect()
}

pub fn zero_grads<T: Real>(p: &[Vec<T>]) -> Vec<Vec<T>> {
    p.iter().map(|v| vec![T::zero(); v.len()]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub specs: Vec<ParamSpec>,
    pub params: Vec<Vec<T>>,
    enc0: Block,
    /// Per level 1..=depth: strided downsampling block, then a 3³ block.
    down: Vec<(Block, Block)>,
    /// Per level 1..=depth: upsampling block, then the 3³ block after the skip concat.
    up: Vec<(Block, Block)>,
    head: Block,
}

#[derive(Debug, Clone)]
pub struct GeneratorTape<T> {
    enc0: BlockTape<T>,
    down: Vec<(BlockTape<T>, BlockTape<T>)>,
    up: Vec<(BlockTape<T>, BlockTape<T>)>,
    head: BlockTape<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(config: GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::default();
        let block = |pb: &mut ParamBuilder, name: &str, kind, ci, co, norm, act| Block {
            conv: pb.conv(name, kind, ci, co),
            norm,
            act,
        };
        let b = config.base_channels;
        let enc0 = block(
            &mut pb,
            "enc0",
            ConvKind::Same3,
            config.in_channels,
            b,
            false,
            Act::LeakyRelu,
        );
        let mut down = Vec::new();
        for l in 1..=config.depth {
            let (ci, co) = (config.channels(l - 1), config.channels(l));
            down.push((
                block(
                    &mut pb,
                    &format!("down{l}.pool"),
                    ConvKind::Down2,
                    ci,
                    co,
                    true,
                    Act::LeakyRelu,
                ),
                block(
                    &mut pb,
                    &format!("down{l}.conv"),
                    ConvKind::Same3,
                    co,
                    co,
                    true,
                    Act::LeakyRelu,
                ),
            ));
        }
        let mut up = Vec::new();
        for l in 1..=config.depth {
            let (ci, co) = (config.channels(l), config.channels(l - 1));
            up.push((
                block(
                    &mut pb,
                    &format!("up{l}.unpool"),
                    ConvKind::Up2,
                    ci,
                    co,
                    true,
                    Act::Relu,
                ),
                block(
                    &mut pb,
                    &format!("up{l}.conv"),
                    ConvKind::Same3,
                    2 * co,
                    co,
                    l > 1,
                    Act::Relu,
                ),
            ));
        }
        let head = block(
            &mut pb,
            "head",
            ConvKind::Point,
            b,
            config.out_channels,
            false,
            Act::Sigmoid,
        );
        let params = pb.init(rng);
        Ok(Self {
            config,
            specs: pb.specs,
            params,
            enc0,
            down,
            up,
            head,
        })
    }

    pub fn seeded(config: GeneratorConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config,
            specs: self.specs.clone(),
            params: cast_params(&self.params),
            enc0: self.enc0,
            down: self.down.clone(),
            up: self.up.clone(),
            head: self.head,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.patch_size;
        if x.channels != self.config.in_channels || x.dims != [s, s, s] {
            return Err(Error::Shape(format!(
                "generator expects {}×{s}³, got {}×{:?}",
                self.config.in_channels, x.channels, x.dims
            )));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let p = &self.params;
        let mut h = self.enc0.infer(p, x);
        let mut skips = Vec::with_capacity(self.config.depth);
        for (pool, conv) in &self.down {
            let d = pool.infer(p, &h);
            skips.push(std::mem::replace(&mut h, conv.infer(p, &d)));
        }
        for (l, (unpool, conv)) in self.up.iter().enumerate().rev() {
            let u = unpool.infer(p, &h);
            h = conv.infer(p, &Tensor::concat(&u, &skips[l]));
        }
        Ok(self.head.infer(p, &h))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, GeneratorTape<T>)> {
        self.check_input(x)?;
        let p = &self.params;
        let (mut h, enc0) = self.enc0.forward(p, x);
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut down = Vec::with_capacity(self.config.depth);
        for (pool, conv) in &self.down {
            let (d, ta) = pool.forward(p, &h);
            let (c, tb) = conv.forward(p, &d);
            skips.push(std::mem::replace(&mut h, c));
            down.push((ta, tb));
        }
        let mut up = Vec::with_capacity(self.config.depth);
        for (l, (unpool, conv)) in self.up.iter().enumerate().rev() {
            let (u, ta) = unpool.forward(p, &h);
            let (c, tb) = conv.forward(p, &Tensor::concat(&u, &skips[l]));
            h = c;
            up.push((ta, tb));
        }
        up.reverse();
        let (out, head) = self.head.forward(p, &h);
        Ok((
            out,
            GeneratorTape {
                enc0,
                down,
                up,
                head,
            },
        ))
    }

    /// Backpropagates `gout` (gradient w.r.t. the output), accumulating into
    /// `grads`. Returns the input gradient when requested.
    pub fn backward(
        &self,
        tape: &GeneratorTape<T>,
        gout: &Tensor<T>,
        grads: &mut [Vec<T>],
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let p = &self.params;
        let mut g = self
            .head
            .backward(p, &tape.head, gout, grads, true)
            .unwrap();
        let mut skip_grads: Vec<Tensor<T>> = Vec::with_capacity(self.config.depth);
        for (l, (unpool, conv)) in self.up.iter().enumerate() {
            let gc = conv.backward(p, &tape.up[l].1, &g, grads, true).unwrap();
            let co = self.config.channels(l);
            let (gu, gs) = gc.split(co);
            skip_grads.push(gs);
            g = unpool.backward(p, &tape.up[l].0, &gu, grads, true).unwrap();
        }
        for (l, (pool, conv)) in self.down.iter().enumerate().rev() {
            let gd = conv.backward(p, &tape.down[l].1, &g, grads, true).unwrap();
            g = pool.backward(p, &tape.down[l].0, &gd, grads, true).unwrap();
            g.add_assign(&skip_grads[l]);
        }
        self.enc0.backward(p, &tape.enc0, &g, grads, need_input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub specs: Vec<ParamSpec>,
    pub params: Vec<Vec<T>>,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorTape<T> {
    blocks: Vec<BlockTape<T>>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.in_channels == 0 || config.base_channels == 0 || config.levels == 0 {
            return Err(Error::Parameter(
                "discriminator sizes must be positive".into(),
            ));
        }
        let mut pb = ParamBuilder::default();
        let mut blocks = Vec::new();
        let mut ci = config.in_channels;
        for l in 0..config.levels {
            let co = config.base_channels << l;
            blocks.push(Block {
                conv: pb.conv(&format!("down{l}"), ConvKind::Down2, ci, co),
                norm: l > 0,
                act: Act::LeakyRelu,
            });
            ci = co;
        }
        blocks.push(Block {
            conv: pb.conv("score", ConvKind::Same3, ci, 1),
            norm: false,
            act: Act::Identity,
        });
        let params = pb.init(rng);
        Ok(Self {
            config,
            specs: pb.specs,
            params,
            blocks,
        })
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config,
            specs: self.specs.clone(),
            params: cast_params(&self.params),
            blocks: self.blocks.clone(),
        }
    }

    pub fn output_dims(&self, d: Dims) -> Dims {
        d.map(|v| v >> self.config.levels)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let f = 1usize << self.config.levels;
        if x.channels != self.config.in_channels || x.dims.iter().any(|&d| d < f || d % f != 0) {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels with dims divisible by {f}, got {}×{:?}",
                self.config.in_channels, x.channels, x.dims
            )));
        }
        Ok(())
    }

    /// Patch-level logits.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.infer(&self.params, &h);
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DiscriminatorTape<T>)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, t) = b.forward(&self.params, &h);
            tapes.push(t);
            h = y;
        }
        Ok((h, DiscriminatorTape { blocks: tapes }))
    }

    pub fn backward(
        &self,
        tape: &DiscriminatorTape<T>,
        gout: &Tensor<T>,
        grads: &mut [Vec<T>],
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let mut g = gout.clone();
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let need = i > 0 || need_input;
            match b.backward(&self.params, &tape.blocks[i], &g, grads, need) {
                Some(next) => g = next,
                None => return None,
            }
        }
        Some(g)
    }
}
