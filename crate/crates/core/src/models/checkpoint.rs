//! Binary checkpoint container: magic, version, a JSON header describing
//! every tensor, then the tensors as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::ParamSpec;
use super::{ModelBundle, ModelSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DGANCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    config_hash: String,
    epoch: usize,
    seed: u64,
    best_val_mae: Option<f64>,
    adam_step_g: u64,
    adam_step_d: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    len: usize,
}

/// Flattens a bundle into `(name, data)` in canonical order.
fn tensors(b: &ModelBundle) -> Vec<(String, &Vec<f32>)> {
    fn net<'a>(
        tag: &str,
        specs: &[ParamSpec],
        params: &'a [Vec<f32>],
        out: &mut Vec<(String, &'a Vec<f32>)>,
    ) {
        for (s, p) in specs.iter().zip(params) {
            out.push((format!("{tag}/{}", s.name), p));
        }
    }
    let mut out = Vec::new();
    net("g", &b.g.specs, &b.g.params, &mut out);
    if let Some(f) = &b.f {
        net("f", &f.specs, &f.params, &mut out);
    }
    net("d", &b.d.specs, &b.d.params, &mut out);
    if let Some(d) = &b.d_x {
        net("d_x", &d.specs, &d.params, &mut out);
    }
    for (tag, adam) in [("opt_g", &b.opt_g), ("opt_d", &b.opt_d)] {
        out.extend(
            adam.m
                .iter()
                .enumerate()
                .map(|(i, m)| (format!("{tag}/m{i}"), m)),
        );
        out.extend(
            adam.v
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("{tag}/v{i}"), v)),
        );
    }
    out
}

fn tensors_mut(b: &mut ModelBundle) -> Vec<&mut Vec<f32>> {
    let mut out: Vec<&mut Vec<f32>> = Vec::new();
    out.extend(b.g.params.iter_mut());
    if let Some(f) = &mut b.f {
        out.extend(f.params.iter_mut());
    }
    out.extend(b.d.params.iter_mut());
    if let Some(d) = &mut b.d_x {
        out.extend(d.params.iter_mut());
    }
    for adam in [&mut b.opt_g, &mut b.opt_d] {
        out.extend(adam.m.iter_mut());
        out.extend(adam.v.iter_mut());
    }
    out
}

pub fn save_checkpoint(b: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let list = tensors(b);
    let header = Header {
        spec: b.spec,
        config_hash: b.spec.config_hash(),
        epoch: b.epoch,
        seed: b.seed,
        best_val_mae: b.best_val_mae,
        adam_step_g: b.opt_g.step,
        adam_step_d: b.opt_d.step,
        adam_beta1: b.opt_g.beta1,
        adam_beta2: b.opt_g.beta2,
        tensors: list
            .iter()
            .map(|(name, p)| TensorEntry {
                name: name.clone(),
                len: p.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = list.iter().map(|(_, p)| p.len() * 4).sum();
    let mut bytes = Vec::with_capacity(20 + json.len() + payload);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, p) in &list {
        for v in p.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(err("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(err(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if hlen > body.len() {
        return Err(err("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| err(format!("malformed header: {e}")))?;
    let expected_hash = header.spec.config_hash();
    if header.config_hash != expected_hash {
        return Err(err(format!(
            "config hash mismatch: file says {}, architecture hashes to {expected_hash}",
            header.config_hash
        )));
    }
    let mut b = ModelBundle::init(
        header.spec,
        header.seed,
        header.adam_beta1,
        header.adam_beta2,
    )
    .map_err(|e| err(format!("invalid architecture: {e}")))?;
    let want: Vec<TensorEntry> = tensors(&b)
        .iter()
        .map(|(name, p)| TensorEntry {
            name: name.clone(),
            len: p.len(),
        })
        .collect();
    if want != header.tensors {
        return Err(err("tensor list does not match the architecture".into()));
    }
    let payload = &body[hlen..];
    let total: usize = want.iter().map(|t| t.len * 4).sum();
    if payload.len() != total {
        return Err(err(format!(
            "payload is {} bytes, expected {total}",
            payload.len()
        )));
    }
    let mut off = 0;
    for t in tensors_mut(&mut b) {
        for v in t.iter_mut() {
            *v = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
            off += 4;
        }
    }
    b.epoch = header.epoch;
    b.best_val_mae = header.best_val_mae;
    b.opt_g.step = header.adam_step_g;
    b.opt_d.step = header.adam_step_d;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, DiscriminatorConfig, GeneratorConfig, ModelScope, Tensor};
    use crate::volume::District;

    fn tiny(arch: Arch) -> ModelSpec {
        let generator = GeneratorConfig {
            base_channels: 2,
            depth: 2,
            ..GeneratorConfig::toy(8)
        };
        let discriminator = match arch {
            Arch::Pix2pix => DiscriminatorConfig::paired(2),
            Arch::Cyclegan => DiscriminatorConfig::unpaired(2),
        };
        ModelSpec {
            scope: ModelScope::District(District::Arms),
            arch,
            generator,
            discriminator,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [Arch::Pix2pix, Arch::Cyclegan] {
            let mut b = ModelBundle::init(tiny(arch), 5, 0.5, 0.999).unwrap();
            b.epoch = 7;
            b.opt_g.step = 3;
            b.opt_g.m[0][0] = 0.125;
            b.best_val_mae = Some(0.03);
            let path = dir.path().join(format!("{arch}.ckpt"));
            save_checkpoint(&b, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, b);
            let probe: Vec<f32> = (0..512).map(|i| (i % 9) as f32 / 9.0).collect();
            let x = Tensor::from_f32([8; 3], &probe);
            assert_eq!(b.g.infer(&x).unwrap(), back.g.infer(&x).unwrap());
        }
    }

    #[test]
    fn altered_hash_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(
            &ModelBundle::init(tiny(Arch::Pix2pix), 1, 0.5, 0.999).unwrap(),
            &path,
        )
        .unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let pos = bytes
            .windows(13)
            .position(|w| w == b"config_hash\":")
            .unwrap()
            + 14;
        bytes[pos] = if bytes[pos] == b'0' { b'1' } else { b'0' };
        fs::write(&path, &bytes).unwrap();
        let e = load_checkpoint(&path).unwrap_err();
        assert!(
            matches!(e, Error::Checkpoint(ref m) if m.contains("hash")),
            "{e}"
        );
    }

    #[test]
    fn bad_version_and_truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(
            &ModelBundle::init(tiny(Arch::Pix2pix), 1, 0.5, 0.999).unwrap(),
            &path,
        )
        .unwrap();
        let good = fs::read(&path).unwrap();
        let mut bad = good.clone();
        bad[8] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(
            matches!(load_checkpoint(&path), Err(Error::Checkpoint(m)) if m.contains("version"))
        );
        fs::write(&path, &good[..good.len() - 4]).unwrap();
        assert!(
            matches!(load_checkpoint(&path), Err(Error::Checkpoint(m)) if m.contains("payload"))
        );
        fs::write(&path, b"hello").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
