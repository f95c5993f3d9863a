//! Run configuration: the architecture plus training settings, loadable
//! from a flat `key=value` file or its JSON mirror.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ModelConfig;
use crate::optim::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Every field as `key=value` lines, one key per line, fixed order.
    pub fn to_key_value(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("stages", m.stages.to_string());
        kv("base_channels", m.base_channels.to_string());
        kv("input_channels", m.input_channels.to_string());
        kv("grid_per_side", m.grid_per_side.to_string());
        kv("window", m.window.unwrap_or(0).to_string());
        kv("global_downscale", m.global_downscale.to_string());
        kv("backbone", m.backbone.as_str().to_string());
        kv("decoders", m.decoders.as_str().to_string());
        kv("fusion", m.fusion.as_str().to_string());
        kv("cfsm_reduction", m.cfsm_reduction.to_string());
        kv("vit_depth", m.vit.depth.to_string());
        kv("heads", m.vit.heads.to_string());
        kv("mlp_ratio", m.vit.mlp_ratio.to_string());
        kv("pos_encoding", m.vit.pos_encoding.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", format!("{}", t.lr));
        kv("steps", t.steps.to_string());
        kv("epochs", t.epochs.to_string());
        kv("seed", t.seed.to_string());
        kv("log_every", t.log_every.to_string());
        kv("lambda_r", format!("{}", t.weights.lambda_r));
        kv("lambda_s", format!("{}", t.weights.lambda_s));
        kv("lambda_d", format!("{}", t.weights.lambda_d));
        s
    }

    /// Parse `key=value` lines; `#` starts a comment, unknown keys are
    /// errors, missing keys keep their defaults.
    pub fn from_key_value(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{raw}`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "stages" => self.model.stages = num(key, value)?,
            "base_channels" => self.model.base_channels = num(key, value)?,
            "input_channels" => self.model.input_channels = num(key, value)?,
            "grid_per_side" => self.model.grid_per_side = num(key, value)?,
            "window" => {
                let w: usize = num(key, value)?;
                self.model.window = (w > 0).then_some(w);
            }
            "global_downscale" => self.model.global_downscale = num(key, value)?,
            "backbone" => self.model.backbone = value.parse()?,
            "decoders" => self.model.decoders = value.parse()?,
            "fusion" => self.model.fusion = value.parse()?,
            "cfsm_reduction" => self.model.cfsm_reduction = num(key, value)?,
            "vit_depth" => self.model.vit.depth = num(key, value)?,
            "heads" => self.model.vit.heads = num(key, value)?,
            "mlp_ratio" => self.model.vit.mlp_ratio = num(key, value)?,
            "pos_encoding" => self.model.vit.pos_encoding = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "lr" => self.train.lr = num(key, value)?,
            "steps" => self.train.steps = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "log_every" => self.train.log_every = num(key, value)?,
            "lambda_r" => self.train.weights.lambda_r = num(key, value)?,
            "lambda_s" => self.train.weights.lambda_s = num(key, value)?,
            "lambda_d" => self.train.weights.lambda_d = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad JSON config: {e}")))
    }

    /// Load from a file, sniffing JSON (leading `{`) vs `key=value`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if text.trim_start().starts_with('{') {
            Self::from_json(&text)
        } else {
            Self::from_key_value(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockKind;
    use crate::net::{DecoderMode, FusionMode};

    #[test]
    fn key_value_roundtrip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.model.backbone = BlockKind::Sequential;
        cfg.model.decoders = DecoderMode::WithR;
        cfg.model.fusion = FusionMode::Sum;
        cfg.model.window = Some(4);
        cfg.train.lr = 5e-4;
        cfg.train.steps = 123;
        let text = cfg.to_key_value();
        let back = RunConfig::from_key_value(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn json_mirror_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.model.decoders = DecoderMode::WithoutRs;
        cfg.train.seed = 9;
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_partial_files_parse() {
        let cfg = RunConfig::from_key_value(
            "# toy setup\nstages=2\nbase_channels=8 # narrow\ndecoders=w/o-RS\n",
        )
        .unwrap();
        assert_eq!(cfg.model.stages, 2);
        assert_eq!(cfg.model.base_channels, 8);
        assert_eq!(cfg.model.decoders, DecoderMode::WithoutRs);
        assert_eq!(cfg.train.batch_size, 4); // default preserved
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_key_value("stagez=3\n").is_err());
    }
}
