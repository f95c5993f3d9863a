//! Binary checkpoint format.
//!
//! Layout: magic `HYLG`, u32 version, u32 entry count, then per entry a
//! u16 name length, the name bytes, a u8 rank, `rank` u32 extents, and
//! the raw little-endian f32 payload. Entries are written sorted by
//! name, so save -> load -> save is byte-identical. Values are not
//! checksummed in version 1.
//!
//! Model parameters are stored under their hierarchical names; optimizer
//! state lives under `__opt.*`, the architecture snapshot under
//! `__cfg.*`, and run metadata under `__meta.*`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{BlockKind, VitHyper};
use crate::error::{Error, Result};
use crate::net::{DecoderMode, DehazeNet, FusionMode, ModelConfig};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HYLG";
pub const VERSION: u32 = 1;

/// Named arrays plus shapes; the in-memory form of a checkpoint file.
#[derive(Clone, Debug, Default)]
pub struct CheckpointBundle {
    pub entries: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl CheckpointBundle {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.entries.insert(name.into(), (shape, data));
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f32) {
        self.insert(name, vec![1], vec![value]);
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        let (_, data) = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing entry `{name}`")))?;
        if data.len() != 1 {
            return Err(Error::Format(format!("entry `{name}` is not a scalar")));
        }
        Ok(data[0])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, (shape, data)) in &self.entries {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::Format(format!("entry name too long: `{name}`")));
            }
            bytes.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            bytes.extend_from_slice(name_bytes);
            if shape.len() > u8::MAX as usize {
                return Err(Error::Format(format!("entry rank too large: `{name}`")));
            }
            bytes.push(shape.len() as u8);
            for &d in shape {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format("truncated checkpoint".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::Format("non-utf8 entry name".into()))?
                .to_string();
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = take(&mut pos, numel * 4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if entries.insert(name.clone(), (shape, data)).is_some() {
                return Err(Error::Format(format!("duplicate entry `{name}`")));
            }
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(CheckpointBundle { entries })
    }
}

fn kind_ordinal(k: BlockKind) -> f32 {
    BlockKind::ALL.iter().position(|&x| x == k).unwrap() as f32
}

fn decoder_ordinal(d: DecoderMode) -> f32 {
    DecoderMode::ALL.iter().position(|&x| x == d).unwrap() as f32
}

fn fusion_ordinal(fu: FusionMode) -> f32 {
    FusionMode::ALL.iter().position(|&x| x == fu).unwrap() as f32
}

fn ordinal<T: Copy>(bundle: &CheckpointBundle, name: &str, all: &[T]) -> Result<T> {
    let idx = bundle.scalar(name)? as usize;
    all.get(idx)
        .copied()
        .ok_or_else(|| Error::Format(format!("entry `{name}` out of range")))
}

fn config_entries(bundle: &mut CheckpointBundle, cfg: &ModelConfig) {
    bundle.insert_scalar("__cfg.stages", cfg.stages as f32);
    bundle.insert_scalar("__cfg.base_channels", cfg.base_channels as f32);
    bundle.insert_scalar("__cfg.input_channels", cfg.input_channels as f32);
    bundle.insert_scalar("__cfg.grid_per_side", cfg.grid_per_side as f32);
    bundle.insert_scalar("__cfg.window", cfg.window.unwrap_or(0) as f32);
    bundle.insert_scalar("__cfg.global_downscale", cfg.global_downscale as f32);
    bundle.insert_scalar("__cfg.backbone", kind_ordinal(cfg.backbone));
    bundle.insert_scalar("__cfg.decoders", decoder_ordinal(cfg.decoders));
    bundle.insert_scalar("__cfg.fusion", fusion_ordinal(cfg.fusion));
    bundle.insert_scalar("__cfg.cfsm_reduction", cfg.cfsm_reduction as f32);
    bundle.insert_scalar("__cfg.vit_depth", cfg.vit.depth as f32);
    bundle.insert_scalar("__cfg.heads", cfg.vit.heads as f32);
    bundle.insert_scalar("__cfg.mlp_ratio", cfg.vit.mlp_ratio as f32);
    bundle.insert_scalar("__cfg.pos_encoding", cfg.vit.pos_encoding as u8 as f32);
}

fn config_from_entries(bundle: &CheckpointBundle) -> Result<ModelConfig> {
    let window = bundle.scalar("__cfg.window")? as usize;
    Ok(ModelConfig {
        stages: bundle.scalar("__cfg.stages")? as usize,
        base_channels: bundle.scalar("__cfg.base_channels")? as usize,
        input_channels: bundle.scalar("__cfg.input_channels")? as usize,
        grid_per_side: bundle.scalar("__cfg.grid_per_side")? as usize,
        window: (window > 0).then_some(window),
        global_downscale: bundle.scalar("__cfg.global_downscale")? as usize,
        backbone: ordinal(bundle, "__cfg.backbone", &BlockKind::ALL)?,
        decoders: ordinal(bundle, "__cfg.decoders", &DecoderMode::ALL)?,
        fusion: ordinal(bundle, "__cfg.fusion", &FusionMode::ALL)?,
        cfsm_reduction: bundle.scalar("__cfg.cfsm_reduction")? as usize,
        vit: VitHyper {
            depth: bundle.scalar("__cfg.vit_depth")? as usize,
            heads: bundle.scalar("__cfg.heads")? as usize,
            mlp_ratio: bundle.scalar("__cfg.mlp_ratio")? as usize,
            pos_encoding: bundle.scalar("__cfg.pos_encoding")? != 0.0,
        },
    })
}

/// Serialize model parameters, optimizer state (when given), config and
/// run metadata into one file.
pub fn save_checkpoint(
    path: &Path,
    model: &mut DehazeNet<f32>,
    optimizer: Option<&AdamState<f32>>,
    global_step: u64,
) -> Result<()> {
    let mut bundle = CheckpointBundle::default();
    model.for_each_param(&mut |name, p| {
        bundle.insert(name, p.shape().to_vec(), p.data().to_vec());
    });
    config_entries(&mut bundle, &model.config.clone());
    bundle.insert_scalar("__meta.global_step", global_step as f32);
    bundle.insert_scalar(
        "__meta.actnorm_initialized",
        model.actnorms_initialized() as u8 as f32,
    );
    bundle.insert_scalar("__meta.input_h", model.input_size.0 as f32);
    bundle.insert_scalar("__meta.input_w", model.input_size.1 as f32);
    if let Some(opt) = optimizer {
        bundle.insert_scalar("__opt.t", opt.t as f32);
        for (name, m) in opt.first_moments() {
            bundle.insert(format!("__opt.m.{name}"), vec![m.len()], m.clone());
        }
        for (name, v) in opt.second_moments() {
            bundle.insert(format!("__opt.v.{name}"), vec![v.len()], v.clone());
        }
    }
    bundle.write(path)
}

/// Rebuild the model a checkpoint was saved from, at its stored input
/// size. Returns the model and the stored global step.
pub fn model_from_bundle(bundle: &CheckpointBundle) -> Result<(DehazeNet<f32>, u64)> {
    let h = bundle.scalar("__meta.input_h")? as usize;
    let w = bundle.scalar("__meta.input_w")? as usize;
    let model = model_from_bundle_for_size(bundle, (h, w))?;
    let step = bundle.scalar("__meta.global_step")? as u64;
    Ok((model, step))
}

/// Rebuild the checkpointed model with its geometry resolved for a new
/// input extent. Works because parameter shapes are extent independent
/// (the learnable position table being the exception).
pub fn model_from_bundle_for_size(
    bundle: &CheckpointBundle,
    input_hw: (usize, usize),
) -> Result<DehazeNet<f32>> {
    let cfg = config_from_entries(bundle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = DehazeNet::<f32>::init(&cfg, input_hw, &mut rng)?;
    let mut missing = Vec::new();
    model.for_each_param(&mut |name, p| {
        match bundle.entries.get(&name) {
            Some((shape, data)) if shape == p.shape() => {
                *p = Tensor::param(data.clone(), shape).expect("shape checked");
            }
            Some((shape, _)) => missing.push(format!(
                "`{name}`: shape {:?} in file, {:?} in model",
                shape,
                p.shape()
            )),
            None => missing.push(format!("`{name}`: absent from file")),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint does not match the architecture: {}",
            missing.join("; ")
        )));
    }
    if bundle.scalar("__meta.actnorm_initialized")? != 0.0 {
        model.mark_actnorms_initialized();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;

    fn tiny_model() -> DehazeNet<f32> {
        let cfg = ModelConfig {
            stages: 1,
            base_channels: 4,
            grid_per_side: 2,
            cfsm_reduction: 2,
            vit: VitHyper {
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                pos_encoding: false,
            },
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        DehazeNet::init(&cfg, (8, 8), &mut rng).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model();
        let image = Tensor::from_fn(&[8, 8, 3], |i| (i % 7) as f32 / 7.0);
        model.forward(&image, Mode::Train).unwrap();

        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_checkpoint(&p1, &mut model, None, 17).unwrap();
        let bundle = CheckpointBundle::read(&p1).unwrap();
        bundle.write(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn restored_model_reproduces_outputs_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model();
        let image = Tensor::from_fn(&[8, 8, 3], |i| ((i * 13) % 11) as f32 / 11.0);
        model.forward(&image, Mode::Train).unwrap();
        let before = model.forward(&image, Mode::Eval).unwrap();

        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &mut model, None, 3).unwrap();
        let bundle = CheckpointBundle::read(&path).unwrap();
        let (mut restored, step) = model_from_bundle(&bundle).unwrap();
        assert_eq!(step, 3);
        let after = restored.forward(&image, Mode::Eval).unwrap();
        assert_eq!(before.dehazed.data(), after.dehazed.data());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            CheckpointBundle::read(&path),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &mut model, None, 0).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            CheckpointBundle::read(&path),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn flipping_one_payload_byte_loads_but_changes_a_value() {
        // Values are not checksummed in v1: structure survives, data differs.
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &mut model, None, 0).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(CheckpointBundle::read(&path).is_ok());
    }
}
