//! Convolutional feature extractor and per-stage feature pre-processing.
//!
//! Each stage is a plain conv–ReLU stack; stages after the first halve the
//! spatial extent with a stride-2 convolution. Stage outputs are then
//! L2-normalized per location, L2-pooled with a Hamming window, passed
//! through dropout and projected to a common width before being flattened
//! into one token sequence.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::session::Session;
use crate::tensor::{glorot_uniform, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub kernel_size: usize,
    pub dropout: f64,
    pub eps_norm: f64,
    pub hamming_len: usize,
    pub pool_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            convs_per_stage: 2,
            kernel_size: 3,
            dropout: 0.1,
            eps_norm: 1e-10,
            hamming_len: 5,
            pool_stride: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Config(format!(
                "backbone needs at least 2 stages, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.convs_per_stage == 0 {
            return Err(Error::Config("stage channels and conv counts must be positive".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.eps_norm <= 0.0 {
            return Err(Error::Config("normalization epsilon must be positive".into()));
        }
        if self.hamming_len == 0 || self.pool_stride == 0 {
            return Err(Error::Config("pooling window and stride must be positive".into()));
        }
        Ok(())
    }

    /// Smallest input edge whose last stage still covers one pooling window.
    pub fn min_input_edge(&self) -> usize {
        (self.hamming_len.max(1) - 1) * (1 << (self.channels.len() - 1)) + 1
    }

    /// Spatial extents of each stage output for an `h × w` input.
    pub fn stage_extents(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.channels.len());
        let (mut h, mut w) = (h, w);
        for s in 0..self.channels.len() {
            if s > 0 {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
            out.push((h, w));
        }
        out
    }

    /// Token grid of each stage after L2 pooling; fails if any stage is
    /// too small for the input.
    pub fn token_grids(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let min = self.min_input_edge();
        if h < min || w < min {
            return Err(Error::Config(format!(
                "input {h}x{w} is too small: minimum edge is {min} for {} stages with pooling window {}",
                self.channels.len(),
                self.hamming_len
            )));
        }
        self.stage_extents(h, w)
            .into_iter()
            .enumerate()
            .map(|(i, (sh, sw))| {
                if sh < self.hamming_len || sw < self.hamming_len {
                    Err(Error::Config(format!(
                        "stage {i} extent {sh}x{sw} is smaller than the pooling window {}",
                        self.hamming_len
                    )))
                } else {
                    Ok((
                        (sh - self.hamming_len) / self.pool_stride + 1,
                        (sw - self.hamming_len) / self.pool_stride + 1,
                    ))
                }
            })
            .collect()
    }
}

/// Normalized Hamming window used as the L2-pooling blur.
#[derive(Clone, Debug, PartialEq)]
pub struct HammingKernel {
    taps: Arc<[f64]>,
}

impl HammingKernel {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("Hamming window length must be positive".into()));
        }
        let raw: Vec<f64> = if len == 1 {
            vec![1.0]
        } else {
            (0..len)
                .map(|n| {
                    0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos()
                })
                .collect()
        };
        let total: f64 = raw.iter().sum();
        Ok(Self {
            taps: raw.iter().map(|v| v / total).collect(),
        })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// `F / max(‖F‖₂, ε)` with the norm of each location's channel vector.
pub fn l2_normalize(tape: &mut Tape, features: Var, eps_norm: f64) -> Result<Var> {
    if tape.shape(features).len() != 4 {
        return Err(Error::shape("l2_normalize", tape.shape(features), &[0, 0, 0, 0]));
    }
    tape.l2_normalize(features, 1, eps_norm)
}

/// `sqrt(g ∗ (x ⊙ x))` per channel, subsampled by `stride`.
pub fn l2_pool(tape: &mut Tape, features: Var, kernel: &HammingKernel, stride: usize) -> Result<Var> {
    let sq = tape.mul(features, features)?;
    let blurred = tape.blur2d(sq, kernel.taps.clone(), stride)?;
    tape.sqrt(blurred)
}

/// Inverted dropout: kept units are scaled by `1/(1−p)`. Identity when
/// `rng` is `None` (evaluation) or `p == 0`.
pub fn dropout<R: Rng>(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout must lie in [0, 1), got {p}")));
    }
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, mask)
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Vec<ConvLayer>>,
}

impl Backbone {
    pub fn new<R: Rng>(
        cfg: &BackboneConfig,
        in_channels: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let mut cin = in_channels;
        let mut stages = Vec::new();
        for (s, &cout) in cfg.channels.iter().enumerate() {
            let mut layers = Vec::new();
            for c in 0..cfg.convs_per_stage {
                let weight = store.insert(
                    format!("backbone.stage{s}.conv{c}.weight"),
                    glorot_uniform(rng, &[cout, cin, k, k], cin * k * k, cout * k * k),
                )?;
                let bias = store.insert(format!("backbone.stage{s}.conv{c}.bias"), Tensor::zeros(&[cout]))?;
                let stride = if s > 0 && c == 0 { 2 } else { 1 };
                layers.push(ConvLayer { weight, bias, stride });
                cin = cout;
            }
            stages.push(layers);
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// One activation block per stage for an NCHW image batch.
    pub fn extract_features(&self, sess: &mut Session<'_>, image: Var) -> Result<Vec<Var>> {
        let shape = sess.tape.shape(image).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("extract_features", &shape, &[0, 3, 0, 0]));
        }
        self.cfg.token_grids(shape[2], shape[3])?;
        let pad = self.cfg.kernel_size / 2;
        let mut x = image;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for layer in stage {
                let w = sess.param(layer.weight);
                let b = sess.param(layer.bias);
                let y = sess.tape.conv2d(x, w, layer.stride, pad)?;
                let y = sess.tape.add_channel(y, b)?;
                x = sess.tape.relu(y);
            }
            out.push(x);
        }
        Ok(out)
    }

    /// Normalize, pool and (in training) drop out each stage's features.
    pub fn preprocess<R: Rng>(
        &self,
        tape: &mut Tape,
        features: &[Var],
        mut rng: Option<&mut R>,
    ) -> Result<Vec<Var>> {
        let kernel = HammingKernel::new(self.cfg.hamming_len)?;
        features
            .iter()
            .map(|&f| {
                let n = l2_normalize(tape, f, self.cfg.eps_norm)?;
                let p = l2_pool(tape, n, &kernel, self.cfg.pool_stride)?;
                dropout(tape, p, self.cfg.dropout, rng.as_deref_mut())
            })
            .collect()
    }
}

/// Spatial grid of each stage's tokens, in concatenation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub grids: Vec<(usize, usize)>,
}

impl TokenLayout {
    pub fn tokens(&self) -> usize {
        self.grids.iter().map(|(h, w)| h * w).sum()
    }

    /// A single stage laid out as a `1 × t` strip.
    pub fn sequence(t: usize) -> Self {
        Self { grids: vec![(1, t)] }
    }
}

/// Learnable per-stage 1×1 projections to `d_model` followed by
/// stage-major, row-major flattening.
#[derive(Clone, Debug)]
pub struct TokenAssembler {
    proj: Vec<(ParamId, ParamId)>,
    d_model: usize,
}

impl TokenAssembler {
    pub fn new<R: Rng>(
        stage_channels: &[usize],
        d_model: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let mut proj = Vec::new();
        for (s, &c) in stage_channels.iter().enumerate() {
            let w = store.insert(
                format!("tokens.stage{s}.weight"),
                glorot_uniform(rng, &[c, d_model], c, d_model),
            )?;
            let b = store.insert(format!("tokens.stage{s}.bias"), Tensor::zeros(&[d_model]))?;
            proj.push((w, b));
        }
        Ok(Self { proj, d_model })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// `[b, T, d_model]` tokens from per-stage NCHW maps.
    pub fn assemble(&self, sess: &mut Session<'_>, features: &[Var]) -> Result<(Var, TokenLayout)> {
        if features.len() != self.proj.len() {
            return Err(Error::Config(format!(
                "expected {} feature stages, got {}",
                self.proj.len(),
                features.len()
            )));
        }
        let mut parts = Vec::with_capacity(features.len());
        let mut grids = Vec::with_capacity(features.len());
        for (&f, &(w, b)) in features.iter().zip(&self.proj) {
            let s = sess.tape.shape(f).to_vec();
            let expected = sess.store().get(w).shape()[0];
            if s.len() != 4 || s[1] != expected {
                return Err(Error::Config(format!(
                    "stage feature shape {s:?} does not match projection input width {expected}"
                )));
            }
            grids.push((s[2], s[3]));
            let tokens = sess.tape.nchw_to_tokens(f)?;
            let (w, b) = (sess.param(w), sess.param(b));
            parts.push(sess.tape.linear(tokens, w, Some(b))?);
        }
        let out = sess.tape.concat(&parts, 1)?;
        Ok((out, TokenLayout { grids }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn hamming_taps_are_positive_and_normalized() {
        for len in 1..9 {
            let k = HammingKernel::new(len).unwrap();
            assert!(k.taps().iter().all(|&v| v > 0.0));
            assert!((k.taps().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(HammingKernel::new(2).unwrap().taps(), &[0.5, 0.5]);
    }

    #[test]
    fn normalize_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![3.0, 4.0]).unwrap());
        let y = l2_normalize(&mut tape, x, 1e-10).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);

        let z = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let y = l2_normalize(&mut tape, z, 1e-10).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let eps = 1e-3;
        let small = [0.3e-3, 0.4e-3]; // norm 0.5·eps
        let x = tape.constant(Tensor::new(&[1, 2, 1, 1], small.to_vec()).unwrap());
        let y = l2_normalize(&mut tape, x, eps).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(small) {
            assert!((o - i / eps).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_hand_value_and_constant() {
        let mut tape = Tape::new();
        // The slice [3, 4] repeated on two rows: the vertical pass is a no-op,
        // leaving the 1-D evaluation sqrt(0.5·9 + 0.5·16).
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![3.0, 4.0, 3.0, 4.0]).unwrap());
        let y = l2_pool(&mut tape, x, &HammingKernel::new(2).unwrap(), 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert!((tape.value(y).item() - 12.5f64.sqrt()).abs() < 1e-12);

        let x = tape.constant(Tensor::full(&[1, 2, 9, 9], -0.7));
        let y = l2_pool(&mut tape, x, &HammingKernel::new(5).unwrap(), 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 3, 3]);
        assert!(tape.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn pool_rejects_small_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let err = l2_pool(&mut tape, x, &HammingKernel::new(5).unwrap(), 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn default_feature_shapes() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&BackboneConfig::default(), 3, &mut store, &mut rng()).unwrap();
        let mut sess = Session::new(&store, false);
        let img = sess.constant(Tensor::full(&[2, 3, 32, 32], 0.5));
        let feats = bb.extract_features(&mut sess, img).unwrap();
        let shapes: Vec<Vec<usize>> = feats.iter().map(|&f| sess.tape.shape(f).to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 16, 32, 32], vec![2, 32, 16, 16], vec![2, 64, 8, 8]]);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&BackboneConfig::default(), 3, &mut store, &mut rng()).unwrap();
        let mut sess = Session::new(&store, false);
        let img = sess.constant(Tensor::zeros(&[1, 3, 20, 20]));
        for f in bb.extract_features(&mut sess, img).unwrap() {
            assert!(sess.tape.value(f).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn too_small_input_lists_minimum() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&BackboneConfig::default(), 3, &mut store, &mut rng()).unwrap();
        let mut sess = Session::new(&store, false);
        let img = sess.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let msg = bb.extract_features(&mut sess, img).unwrap_err().to_string();
        assert!(msg.contains("minimum edge is 17"), "{msg}");
    }

    #[test]
    fn config_rejects_single_stage() {
        let cfg = BackboneConfig {
            channels: vec![8],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn token_count_is_sum_of_grids() {
        let mut store = ParamStore::new();
        let asm = TokenAssembler::new(&[4, 6], 8, &mut store, &mut rng()).unwrap();
        let mut sess = Session::new(&store, false);
        let a = sess.constant(Tensor::full(&[2, 4, 4, 4], 0.1));
        let b = sess.constant(Tensor::full(&[2, 6, 2, 2], 0.2));
        let (tokens, layout) = asm.assemble(&mut sess, &[a, b]).unwrap();
        assert_eq!(layout.tokens(), 20);
        assert_eq!(sess.tape.shape(tokens), &[2, 20, 8]);

        let mut store = ParamStore::new();
        let asm = TokenAssembler::new(&[3], 5, &mut store, &mut rng()).unwrap();
        let mut sess = Session::new(&store, false);
        let a = sess.constant(Tensor::full(&[1, 3, 1, 1], 1.0));
        let (tokens, _) = asm.assemble(&mut sess, &[a]).unwrap();
        assert_eq!(sess.tape.shape(tokens), &[1, 1, 5]);
    }

    #[test]
    fn token_order_is_stage_then_row_major() {
        // Identity projections expose the raw ordering.
        let mut store = ParamStore::new();
        let asm = TokenAssembler::new(&[1, 1], 1, &mut store, &mut rng()).unwrap();
        for s in 0..2 {
            let id = store.find(&format!("tokens.stage{s}.weight")).unwrap();
            store.get_mut(id).data_mut()[0] = 1.0;
        }
        let mut sess = Session::new(&store, false);
        let a = sess.constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let b = sess.constant(Tensor::new(&[1, 1, 1, 2], vec![4.0, 5.0]).unwrap());
        let (tokens, _) = asm.assemble(&mut sess, &[a, b]).unwrap();
        assert_eq!(sess.tape.value(tokens).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scales_in_train() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1000], 1.0));
        let y = dropout::<ChaCha8Rng>(&mut tape, x, 0.5, None).unwrap();
        assert_eq!(y, x);
        let mut r = rng();
        let y = dropout(&mut tape, x, 0.5, Some(&mut r)).unwrap();
        let d = tape.value(y).data();
        assert!(d.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = d.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept), "{kept}");
    }
}
