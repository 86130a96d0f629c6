//! Fusion head and training objectives.

pub mod losses;

use rand::Rng;

use crate::error::{Error, Result};
use crate::session::Session;
use crate::tensor::{glorot_uniform, ParamId, ParamStore, Tensor, Var};

pub use losses::{LossWeights, QualityBatch, RankingExtremes};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Width of the projected pooled convolutional features.
    pub conv_dim: usize,
    /// Width of the hidden fusion layer.
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            conv_dim: 64,
            hidden: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionHead {
    conv_proj: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

fn affine<R: Rng>(
    name: &str,
    din: usize,
    dout: usize,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    Ok((
        store.insert(format!("{name}.weight"), glorot_uniform(rng, &[din, dout], din, dout))?,
        store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]))?,
    ))
}

fn apply(sess: &mut Session<'_>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let (w, b) = (sess.param(w), sess.param(b));
    sess.tape.linear(x, w, Some(b))
}

impl FusionHead {
    pub fn new<R: Rng>(
        conv_channels: usize,
        d_model: usize,
        cfg: &HeadConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.conv_dim == 0 || cfg.hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(Self {
            conv_proj: affine("head.conv_proj", conv_channels, cfg.conv_dim, store, rng)?,
            fc1: affine("head.fc1", cfg.conv_dim + d_model, cfg.hidden, store, rng)?,
            fc2: affine("head.fc2", cfg.hidden, 1, store, rng)?,
        })
    }

    /// Parameter ids of the final layer (weight `[hidden, 1]`, bias `[1]`).
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        self.fc2
    }

    /// Global average pool of an NCHW map followed by the learnable
    /// projection: `[b, c, h, w] → [b, conv_dim]`.
    pub fn conv_logits(&self, sess: &mut Session<'_>, features: Var) -> Result<Var> {
        let s = sess.tape.shape(features).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("conv_logits", &s, &[0, 0, 0, 0]));
        }
        let flat = sess.tape.reshape(features, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = sess.tape.mean_axis(flat, 2)?;
        apply(sess, pooled, self.conv_proj)
    }

    /// Token mean of encoder output: `[b, t, d] → [b, d]`.
    pub fn atten_logits(&self, sess: &mut Session<'_>, encoded: Var) -> Result<Var> {
        sess.tape.mean_axis(encoded, 1)
    }

    /// Concatenate both logits and regress one score per image.
    pub fn fuse_and_score(&self, sess: &mut Session<'_>, conv: Var, atten: Var) -> Result<Var> {
        let (sc, sa) = (sess.tape.shape(conv).to_vec(), sess.tape.shape(atten).to_vec());
        if sc.len() != 2 || sa.len() != 2 || sc[0] != sa[0] {
            return Err(Error::shape("fuse_and_score", &sc, &sa));
        }
        let x = sess.tape.concat(&[conv, atten], 1)?;
        let h = apply(sess, x, self.fc1)?;
        let h = sess.tape.relu(h);
        let y = apply(sess, h, self.fc2)?;
        sess.tape.reshape(y, &[sc[0]])
    }
}
