//! Full scoring network: backbone → tokens → encoder → fusion head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, TokenAssembler};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{FusionHead, HeadConfig};
use crate::session::Session;
use crate::tensor::{ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("input channel count must be positive".into()));
        }
        self.backbone.validate()?;
        self.encoder.validate()
    }
}

/// Forward-pass results for one image batch.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `[b]` predicted quality.
    pub scores: Var,
    /// `[b, conv_dim]` pooled convolutional logits.
    pub conv: Var,
    /// `[b, d_model]` token-mean encoder logits.
    pub atten: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    backbone: Backbone,
    tokens: TokenAssembler,
    encoder: Encoder,
    head: FusionHead,
}

impl Model {
    /// Build the network and initialise its parameters from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&cfg.backbone, cfg.in_channels, &mut store, &mut rng)?;
        let tokens = TokenAssembler::new(&cfg.backbone.channels, cfg.encoder.d_model, &mut store, &mut rng)?;
        let encoder = Encoder::new(&cfg.encoder, &mut store, &mut rng)?;
        let last = *cfg.backbone.channels.last().expect("validated stage list");
        let head = FusionHead::new(last, cfg.encoder.d_model, &cfg.head, &mut store, &mut rng)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                backbone,
                tokens,
                encoder,
                head,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Score an NCHW batch. Passing `rng` enables dropout (training mode).
    pub fn forward(&self, sess: &mut Session<'_>, images: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Outputs> {
        let s = sess.tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "expected [b, {}, h, w] images, got {s:?}",
                self.cfg.in_channels
            )));
        }
        let centered = sess.tape.add_scalar(images, -0.5);
        let centered = sess.tape.scale(centered, 2.0);
        let feats = self.backbone.extract_features(sess, centered)?;
        let pooled = self.backbone.preprocess(&mut sess.tape, &feats, rng)?;
        let (tokens, layout) = self.tokens.assemble(sess, &pooled)?;
        let encoded = self.encoder.encode(sess, tokens, &layout)?;
        let last = *feats.last().expect("at least two stages");
        let conv = self.head.conv_logits(sess, last)?;
        let atten = self.head.atten_logits(sess, encoded)?;
        let scores = self.head.fuse_and_score(sess, conv, atten)?;
        Ok(Outputs { scores, conv, atten })
    }
}
