//! Generator/discriminator networks, objectives and model bundles.
//!
//! Everything here runs on the CPU with hand-written backward passes; the
//! element type is generic so gradient checks can run in `f64`.

mod checkpoint;
pub mod layers;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod tensor;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
pub use losses::{
    cyclegan_generator_grads, lsgan_discriminator_grads, pix2pix_discriminator_grads,
    pix2pix_generator_grads, pix2pix_generator_grads_from, pix2pix_losses, LAMBDA_CYCLE, LAMBDA_L1,
};
pub use optim::{clip_grad_norm, global_norm, Adam};
pub use tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::volume::{District, MaskScope};

/// What a model was trained on: one district, or whole-body patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelScope {
    District(District),
    WholeBody,
}

impl ModelScope {
    pub const ALL: [ModelScope; 5] = [
        ModelScope::District(District::Head),
        ModelScope::District(District::Trunk),
        ModelScope::District(District::Arms),
        ModelScope::District(District::Legs),
        ModelScope::WholeBody,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelScope::District(d) => d.name(),
            ModelScope::WholeBody => "whole_body",
        }
    }

    pub fn mask_scope(self) -> MaskScope {
        match self {
            ModelScope::District(d) => MaskScope::District(d),
            ModelScope::WholeBody => MaskScope::WholeBody,
        }
    }
}

impl fmt::Display for ModelScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "whole_body" {
            return Ok(ModelScope::WholeBody);
        }
        District::from_name(s)
            .map(ModelScope::District)
            .ok_or_else(|| Error::Parameter(format!("unknown model scope '{s}'")))
    }
}

impl Serialize for ModelScope {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ModelScope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Pix2pix,
    Cyclegan,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Pix2pix => "pix2pix",
            Arch::Cyclegan => "cyclegan",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pix2pix" => Ok(Arch::Pix2pix),
            "cyclegan" => Ok(Arch::Cyclegan),
            _ => Err(Error::Parameter(format!("unknown architecture '{s}'"))),
        }
    }
}

/// Everything that determines parameter shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub scope: ModelScope,
    pub arch: Arch,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelSpec {
    /// Toy preset for a given patch size and architecture.
    pub fn toy(scope: ModelScope, arch: Arch, patch_size: usize) -> Self {
        Self::new(scope, arch, GeneratorConfig::toy(patch_size))
    }

    /// Pairs `generator` with the matching discriminator (same base width).
    pub fn new(scope: ModelScope, arch: Arch, generator: GeneratorConfig) -> Self {
        let discriminator = match arch {
            Arch::Pix2pix => DiscriminatorConfig::paired(generator.base_channels),
            Arch::Cyclegan => DiscriminatorConfig::unpaired(generator.base_channels),
        };
        Self {
            scope,
            arch,
            generator,
            discriminator,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate(self.generator.patch_size)?;
        let want = match self.arch {
            Arch::Pix2pix => self.generator.in_channels + self.generator.out_channels,
            Arch::Cyclegan => self.generator.out_channels,
        };
        if self.discriminator.in_channels != want {
            return Err(Error::Parameter(format!(
                "{} discriminator needs {want} input channels, got {}",
                self.arch, self.discriminator.in_channels
            )));
        }
        if self.arch == Arch::Cyclegan && self.generator.in_channels != self.generator.out_channels
        {
            return Err(Error::Parameter(
                "cyclegan generators must map between equal channel counts".into(),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding of the architecture.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(&(self.arch, self.generator, self.discriminator))
            .expect("spec serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameters and optimizer state of one trained translation model.
///
/// Pix2Pix: `g` and `d`. CycleGAN: `g` (CT→PET), `f` (PET→CT), `d` (judges
/// PET) and `d_x` (judges CT).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub spec: ModelSpec,
    pub g: Generator<f32>,
    pub d: Discriminator<f32>,
    pub f: Option<Generator<f32>>,
    pub d_x: Option<Discriminator<f32>>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub best_val_mae: Option<f64>,
}

fn shapes<'a>(specs: impl Iterator<Item = &'a layers::ParamSpec>) -> Vec<usize> {
    specs.map(|s| s.len()).collect()
}

impl ModelBundle {
    /// Fresh parameters; deterministic in `seed`.
    pub fn init(spec: ModelSpec, seed: u64, beta1: f64, beta2: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Generator::new(spec.generator, &mut rng)?;
        let d = Discriminator::new(spec.discriminator, &mut rng)?;
        let (f, d_x) = match spec.arch {
            Arch::Pix2pix => (None, None),
            Arch::Cyclegan => (
                Some(Generator::new(spec.generator, &mut rng)?),
                Some(Discriminator::new(spec.discriminator, &mut rng)?),
            ),
        };
        let opt_g = Adam::new(
            &shapes(g.specs.iter().chain(f.iter().flat_map(|f| f.specs.iter()))),
            beta1,
            beta2,
        );
        let opt_d = Adam::new(
            &shapes(
                d.specs
                    .iter()
                    .chain(d_x.iter().flat_map(|d| d.specs.iter())),
            ),
            beta1,
            beta2,
        );
        Ok(Self {
            spec,
            g,
            d,
            f,
            d_x,
            opt_g,
            opt_d,
            epoch: 0,
            seed,
            best_val_mae: None,
        })
    }

    pub fn scope(&self) -> ModelScope {
        self.spec.scope
    }

    pub fn patch_size(&self) -> usize {
        self.spec.generator.patch_size
    }

    /// CT patch → synthetic PET patch.
    pub fn generate(&self, ct: &[f32]) -> Result<Vec<f32>> {
        let s = self.patch_size();
        if ct.len() != s * s * s {
            return Err(Error::Shape(format!(
                "expected {s}³ patch, got {} voxels",
                ct.len()
            )));
        }
        Ok(self.g.infer(&Tensor::from_f32([s, s, s], ct))?.to_f32())
    }

    /// Order-sensitive FNV-1a checksum over all parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let nets = [
            Some(&self.g.params),
            Some(&self.d.params),
            self.f.as_ref().map(|f| &f.params),
            self.d_x.as_ref().map(|d| &d.params),
        ];
        for p in nets.into_iter().flatten() {
            for v in p.iter().flatten() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }
}
