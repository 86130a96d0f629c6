//! Flat run configuration with a `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::data::PatchSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, LossWeights};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub patch: PatchSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate is divided by this factor after every epoch.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub split_ratio: f64,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            patch: PatchSpec::default(),
            batch_size: 8,
            epochs: 200,
            lr: 1e-3,
            lr_decay: 1.0,
            weight_decay: 5e-4,
            momentum: 0.9,
            split_ratio: 0.8,
            seed: None,
        }
    }
}

/// Every recognised key, in the order used when printing.
pub const KEYS: &[&str] = &[
    "channels",
    "convs_per_stage",
    "kernel_size",
    "dropout",
    "eps_norm",
    "hamming_len",
    "pool_stride",
    "num_layers",
    "num_heads",
    "d_model",
    "ffn_hidden",
    "query_stride",
    "conv_dim",
    "head_hidden",
    "theta1",
    "theta2",
    "theta3",
    "patch_edge",
    "n_patch",
    "batch_size",
    "epochs",
    "lr",
    "lr_decay",
    "weight_decay",
    "momentum",
    "split_ratio",
    "seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = '{value}'")))
}

impl RunConfig {
    /// Tiny network used for gradient checking: 8×8 inputs, two stages,
    /// two encoder layers with two heads.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig {
                in_channels: 3,
                backbone: BackboneConfig {
                    channels: vec![4, 8],
                    hamming_len: 3,
                    dropout: 0.0,
                    ..Default::default()
                },
                encoder: EncoderConfig {
                    num_layers: 2,
                    num_heads: 2,
                    d_model: 8,
                    ffn_hidden: 16,
                    query_stride: 2,
                },
                head: HeadConfig { conv_dim: 6, hidden: 8 },
            },
            patch: PatchSpec { edge: 8, n_patch: 1 },
            batch_size: 5,
            ..Self::default()
        }
    }

    /// Normalise `-` to `_` and apply one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let m = &mut self.model;
        match key.as_str() {
            "channels" => {
                m.backbone.channels = v
                    .split(',')
                    .map(|c| parse(&key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "convs_per_stage" => m.backbone.convs_per_stage = parse(&key, v)?,
            "kernel_size" => m.backbone.kernel_size = parse(&key, v)?,
            "dropout" => m.backbone.dropout = parse(&key, v)?,
            "eps_norm" => m.backbone.eps_norm = parse(&key, v)?,
            "hamming_len" => m.backbone.hamming_len = parse(&key, v)?,
            "pool_stride" => m.backbone.pool_stride = parse(&key, v)?,
            "num_layers" => m.encoder.num_layers = parse(&key, v)?,
            "num_heads" => m.encoder.num_heads = parse(&key, v)?,
            "d_model" => m.encoder.d_model = parse(&key, v)?,
            "ffn_hidden" => m.encoder.ffn_hidden = parse(&key, v)?,
            "query_stride" => m.encoder.query_stride = parse(&key, v)?,
            "conv_dim" => m.head.conv_dim = parse(&key, v)?,
            "head_hidden" => m.head.hidden = parse(&key, v)?,
            "theta1" => self.loss.theta1 = parse(&key, v)?,
            "theta2" => self.loss.theta2 = parse(&key, v)?,
            "theta3" => self.loss.theta3 = parse(&key, v)?,
            "patch_edge" => self.patch.edge = parse(&key, v)?,
            "n_patch" => self.patch.n_patch = parse(&key, v)?,
            "batch_size" => self.batch_size = parse(&key, v)?,
            "epochs" => self.epochs = parse(&key, v)?,
            "lr" => self.lr = parse(&key, v)?,
            "lr_decay" => self.lr_decay = parse(&key, v)?,
            "weight_decay" => self.weight_decay = parse(&key, v)?,
            "momentum" => self.momentum = parse(&key, v)?,
            "split_ratio" => self.split_ratio = parse(&key, v)?,
            "seed" => self.seed = if v == "none" { None } else { Some(parse(&key, v)?) },
            _ => return Err(Error::Config(format!("unknown setting '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "channels" => m
                .backbone
                .channels
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "convs_per_stage" => m.backbone.convs_per_stage.to_string(),
            "kernel_size" => m.backbone.kernel_size.to_string(),
            "dropout" => m.backbone.dropout.to_string(),
            "eps_norm" => m.backbone.eps_norm.to_string(),
            "hamming_len" => m.backbone.hamming_len.to_string(),
            "pool_stride" => m.backbone.pool_stride.to_string(),
            "num_layers" => m.encoder.num_layers.to_string(),
            "num_heads" => m.encoder.num_heads.to_string(),
            "d_model" => m.encoder.d_model.to_string(),
            "ffn_hidden" => m.encoder.ffn_hidden.to_string(),
            "query_stride" => m.encoder.query_stride.to_string(),
            "conv_dim" => m.head.conv_dim.to_string(),
            "head_hidden" => m.head.hidden.to_string(),
            "theta1" => self.loss.theta1.to_string(),
            "theta2" => self.loss.theta2.to_string(),
            "theta3" => self.loss.theta3.to_string(),
            "patch_edge" => self.patch.edge.to_string(),
            "n_patch" => self.patch.n_patch.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "momentum" => self.momentum.to_string(),
            "split_ratio" => self.split_ratio.to_string(),
            "seed" => self.seed.map_or_else(|| "none".into(), |s| s.to_string()),
            _ => return None,
        })
    }

    /// Apply `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and ≥ 0, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config(format!("lr decay must be positive, got {}", self.lr_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be ≥ 0".into()));
        }
        if self.patch.edge < self.model.backbone.min_input_edge() {
            return Err(Error::Config(format!(
                "patch edge {} is below the network minimum {}",
                self.patch.edge,
                self.model.backbone.min_input_edge()
            )));
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (set --seed or 'seed = N')".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::tiny();
        cfg.seed = Some(42);
        cfg.lr = 2e-5;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn kebab_keys_and_comments() {
        let cfg = RunConfig::parse("# run\nbatch-size = 16 # big\n\nchannels = 8, 16,32\n").unwrap();
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.model.backbone.channels, vec![8, 16, 32]);
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse("lr = 1\nbogus = 3\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        assert!(RunConfig::parse("lr 1").is_err());
        assert!(RunConfig::parse("epochs = -1").is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig::tiny().validate().is_ok());
        let bad = RunConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(RunConfig::default().require_seed().is_err());
        assert!(KEYS.iter().all(|k| RunConfig::default().get(k).is_some()));
    }
}
