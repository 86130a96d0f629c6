//! Dual-path downsampling transformer encoder.
//!
//! Each layer runs a downsampling attention block followed by add & norm, a
//! ReLU feed-forward network and a second add & norm. Inside the block the
//! input is projected and normalized once; that stream feeds keys and
//! values directly, while queries come from the sum of a spatially pooled
//! copy and a strided 1×1 convolution of it. The attention result is
//! upsampled back to the full token grid by nearest-neighbour duplication,
//! projected and normalized, and added to a 1×1 convolutional bypass of the
//! block input.

use std::sync::Arc;

use rand::Rng;

use crate::backbone::TokenLayout;
use crate::error::{Error, Result};
use crate::session::Session;
use crate::tensor::{glorot_uniform, ParamId, ParamStore, Tape, Tensor, TokenMap, Var};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub ffn_hidden: usize,
    pub query_stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            d_model: 64,
            ffn_hidden: 256,
            query_stride: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.ffn_hidden == 0 || self.query_stride == 0 {
            return Err(Error::Config("ffn width and query stride must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Fixed sinusoidal table: `sin(pos/10000^(2i/d))` in even channels,
/// `cos` of the same angle in odd channels.
pub fn positional_encoding(tokens: usize, d_model: usize) -> Result<Tensor> {
    if tokens == 0 || d_model == 0 {
        return Err(Error::Config("positional encoding needs T ≥ 1 and d ≥ 1".into()));
    }
    let mut data = vec![0.0; tokens * d_model];
    for pos in 0..tokens {
        for c in 0..d_model {
            let pair = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            data[pos * d_model + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[tokens, d_model], data)
}

/// Scaled dot-product attention on `[n, t, d_k]` tensors:
/// `softmax(Q Kᵀ / √d_k) V`, normalized over keys.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sq[2] != sk[2] {
        return Err(Error::shape("attention (query/key width)", &sq, &sk));
    }
    if sv.len() != 3 || sv[1] != sk[1] || sv[0] != sk[0] {
        return Err(Error::shape("attention (key/value tokens)", &sk, &sv));
    }
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (sq[2] as f64).sqrt());
    let attn = tape.softmax(scores, 2)?;
    tape.batch_matmul(attn, v, false)
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    fn new<R: Rng>(
        name: &str,
        din: usize,
        dout: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.insert(format!("{name}.weight"), glorot_uniform(rng, &[din, dout], din, dout))?,
            b: store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]))?,
        })
    }

    fn apply(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let (w, b) = (sess.param(self.w), sess.param(self.b));
        sess.tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(name: &str, d: usize, store: &mut ParamStore) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[d], 1.0))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    fn apply(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = sess.tape.layer_norm(x, LAYER_NORM_EPS)?;
        let (g, b) = (sess.param(self.gamma), sess.param(self.beta));
        let y = sess.tape.mul_last(y, g)?;
        sess.tape.add_last(y, b)
    }
}

/// Query, key, value and output projections of one attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    q: Affine,
    k: Affine,
    v: Affine,
    out: Affine,
}

impl AttentionWeights {
    pub fn new<R: Rng>(name: &str, d_model: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        Ok(Self {
            q: Affine::new(&format!("{name}.q"), d_model, d_model, store, rng)?,
            k: Affine::new(&format!("{name}.k"), d_model, d_model, store, rng)?,
            v: Affine::new(&format!("{name}.v"), d_model, d_model, store, rng)?,
            out: Affine::new(&format!("{name}.out"), d_model, d_model, store, rng)?,
        })
    }

    /// Parameter id of the output projection matrix.
    pub fn output_weight(&self) -> ParamId {
        self.out.w
    }
}

/// Multi-head attention of `queries [b, tq, d]` over `context [b, tk, d]`:
/// heads attend on `d/h`-wide slices, results are concatenated and
/// projected by the output matrix.
pub fn multi_head(
    sess: &mut Session<'_>,
    queries: Var,
    context: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Var> {
    let (sq, sc) = (sess.tape.shape(queries).to_vec(), sess.tape.shape(context).to_vec());
    if sq.len() != 3 || sc.len() != 3 || sq[0] != sc[0] || sq[2] != sc[2] {
        return Err(Error::shape("multi_head", &sq, &sc));
    }
    let q = w.q.apply(sess, queries)?;
    let k = w.k.apply(sess, context)?;
    let v = w.v.apply(sess, context)?;
    let q = sess.tape.split_heads(q, heads)?;
    let k = sess.tape.split_heads(k, heads)?;
    let v = sess.tape.split_heads(v, heads)?;
    let h = attention(&mut sess.tape, q, k, v)?;
    let h = sess.tape.merge_heads(h, heads)?;
    w.out.apply(sess, h)
}

/// Token maps that pool each stage grid by `stride`, take its strided
/// samples, and duplicate pooled tokens back onto the full grid.
#[derive(Clone, Debug)]
pub struct QueryMaps {
    pub pool: Arc<TokenMap>,
    pub subsample: Arc<TokenMap>,
    pub upsample: Arc<TokenMap>,
}

impl QueryMaps {
    pub fn new(layout: &TokenLayout, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("query stride must be positive".into()));
        }
        let total = layout.tokens();
        let mut pool = Vec::new();
        let mut subsample = Vec::new();
        let mut upsample = vec![Vec::new(); total];
        let mut in_off = 0;
        for &(h, w) in &layout.grids {
            let (ph, pw) = (h.div_ceil(stride), w.div_ceil(stride));
            let out_off = pool.len();
            for i in 0..ph {
                for j in 0..pw {
                    let rows = i * stride..((i + 1) * stride).min(h);
                    let cols = j * stride..((j + 1) * stride).min(w);
                    let count = (rows.len() * cols.len()) as f64;
                    let mut cell = Vec::new();
                    for r in rows {
                        for c in cols.clone() {
                            cell.push((in_off + r * w + c, 1.0 / count));
                        }
                    }
                    pool.push(cell);
                    subsample.push(vec![(in_off + i * stride * w + j * stride, 1.0)]);
                }
            }
            for r in 0..h {
                for c in 0..w {
                    upsample[in_off + r * w + c] = vec![(out_off + (r / stride) * pw + c / stride, 1.0)];
                }
            }
            in_off += h * w;
        }
        let pooled = pool.len();
        Ok(Self {
            pool: Arc::new(TokenMap { inputs: total, rows: pool }),
            subsample: Arc::new(TokenMap {
                inputs: total,
                rows: subsample,
            }),
            upsample: Arc::new(TokenMap {
                inputs: pooled,
                rows: upsample,
            }),
        })
    }

    pub fn query_tokens(&self) -> usize {
        self.pool.rows.len()
    }
}

#[derive(Clone, Debug)]
pub struct DownsampleBlock {
    proj_in: Affine,
    norm_in: Norm,
    query_conv: Affine,
    attn: AttentionWeights,
    proj_out: Affine,
    norm_out: Norm,
    bypass: Affine,
    heads: usize,
}

impl DownsampleBlock {
    pub fn new<R: Rng>(name: &str, cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            proj_in: Affine::new(&format!("{name}.proj_in"), d, d, store, rng)?,
            norm_in: Norm::new(&format!("{name}.norm_in"), d, store)?,
            query_conv: Affine::new(&format!("{name}.query_conv"), d, d, store, rng)?,
            attn: AttentionWeights::new(&format!("{name}.attn"), d, store, rng)?,
            proj_out: Affine::new(&format!("{name}.proj_out"), d, d, store, rng)?,
            norm_out: Norm::new(&format!("{name}.norm_out"), d, store)?,
            bypass: Affine::new(&format!("{name}.bypass"), d, d, store, rng)?,
            heads: cfg.num_heads,
        })
    }

    pub fn attention_weights(&self) -> &AttentionWeights {
        &self.attn
    }

    /// Parameter ids of the closing projection (weight, bias).
    pub fn output_projection(&self) -> (ParamId, ParamId) {
        (self.proj_out.w, self.proj_out.b)
    }

    /// Parameter ids of the query-path convolution (weight, bias).
    pub fn query_conv(&self) -> (ParamId, ParamId) {
        (self.query_conv.w, self.query_conv.b)
    }

    /// Parameter ids of the bypass convolution (weight, bias).
    pub fn bypass(&self) -> (ParamId, ParamId) {
        (self.bypass.w, self.bypass.b)
    }

    pub fn forward(&self, sess: &mut Session<'_>, x: Var, maps: &QueryMaps) -> Result<Var> {
        let s = sess.tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != maps.pool.inputs {
            return Err(Error::Config(format!(
                "token count of {s:?} does not match the query pooling layout ({} tokens)",
                maps.pool.inputs
            )));
        }
        let y = self.proj_in.apply(sess, x)?;
        let y = self.norm_in.apply(sess, y)?;

        let pooled = sess.tape.token_mix(y, maps.pool.clone())?;
        let strided = sess.tape.token_mix(y, maps.subsample.clone())?;
        let conv = self.query_conv.apply(sess, strided)?;
        let queries = sess.tape.add(pooled, conv)?;

        let a = multi_head(sess, queries, y, &self.attn, self.heads)?;
        let a = sess.tape.token_mix(a, maps.upsample.clone())?;
        let a = self.proj_out.apply(sess, a)?;
        let a = self.norm_out.apply(sess, a)?;

        let skip = self.bypass.apply(sess, x)?;
        sess.tape.add(a, skip)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    block: DownsampleBlock,
    norm1: Norm,
    ffn_in: Affine,
    ffn_out: Affine,
    norm2: Norm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let name = format!("encoder.layer{l}");
                Ok(EncoderLayer {
                    block: DownsampleBlock::new(&format!("{name}.block"), cfg, store, rng)?,
                    norm1: Norm::new(&format!("{name}.norm1"), d, store)?,
                    ffn_in: Affine::new(&format!("{name}.ffn_in"), d, cfg.ffn_hidden, store, rng)?,
                    ffn_out: Affine::new(&format!("{name}.ffn_out"), cfg.ffn_hidden, d, store, rng)?,
                    norm2: Norm::new(&format!("{name}.norm2"), d, store)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn block(&self, layer: usize) -> &DownsampleBlock {
        &self.layers[layer].block
    }

    /// Scale tokens by √d_model, add positional encoding, then run every layer. Shape is preserved.
    pub fn encode(&self, sess: &mut Session<'_>, tokens: Var, layout: &TokenLayout) -> Result<Var> {
        let s = sess.tape.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.cfg.d_model {
            return Err(Error::Config(format!(
                "encoder expects [b, T, {}] tokens, got {s:?}",
                self.cfg.d_model
            )));
        }
        if layout.tokens() != s[1] {
            return Err(Error::Config(format!(
                "token layout covers {} tokens but input has {}",
                layout.tokens(),
                s[1]
            )));
        }
        let maps = QueryMaps::new(layout, self.cfg.query_stride)?;
        let pe = positional_encoding(s[1], s[2])?;
        let pe = Tensor::stack(&vec![pe; s[0]])?;
        let pe = sess.constant(pe);
        let scaled = sess.tape.scale(tokens, (s[2] as f64).sqrt());
        let mut x = sess.tape.add(scaled, pe)?;
        for layer in &self.layers {
            let a = layer.block.forward(sess, x, &maps)?;
            let h = sess.tape.add(x, a)?;
            let h = layer.norm1.apply(sess, h)?;
            let f = layer.ffn_in.apply(sess, h)?;
            let f = sess.tape.relu(f);
            let f = layer.ffn_out.apply(sess, f)?;
            let o = sess.tape.add(h, f)?;
            x = layer.norm2.apply(sess, o)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn positional_table_cases() {
        let pe = positional_encoding(4, 8).unwrap();
        for c in 0..8 {
            assert_eq!(pe.at(&[0, c]), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        for pos in 0..4 {
            for i in 0..4 {
                let freq = 1.0 / 10000f64.powf((2 * i) as f64 / 8.0);
                let a = pos as f64 * freq;
                assert!((pe.at(&[pos, 2 * i]) - a.sin()).abs() < 1e-15);
                assert!((pe.at(&[pos, 2 * i + 1]) - a.cos()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_key_returns_value() {
        let mut tape = Tape::new();
        let q = tape.constant(random(&[1, 3, 2], 1));
        let k = tape.constant(random(&[1, 1, 2], 2));
        let v = tape.constant(random(&[1, 1, 2], 3));
        let o = attention(&mut tape, q, k, v).unwrap();
        for row in tape.value(o).data().chunks(2) {
            assert_eq!(row, tape.value(v).data());
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut tape = Tape::new();
        let q = tape.constant(random(&[1, 2, 2], 1));
        let k = tape.constant(Tensor::new(&[1, 2, 2], vec![0.3, -0.2, 0.3, -0.2]).unwrap());
        let v = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let o = attention(&mut tape, q, k, v).unwrap();
        for row in tape.value(o).data().chunks(2) {
            assert!((row[0] - 2.0).abs() < 1e-15 && (row[1] - 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_token_hand_value() {
        let mut tape = Tape::new();
        let eye = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = tape.constant(eye.clone());
        let k = tape.constant(eye.clone());
        let v = tape.constant(eye);
        let o = attention(&mut tape, q, k, v).unwrap();
        // With V = I the output rows are the attention map rows.
        let e = (1.0 / 2f64.sqrt()).exp();
        let sigma = e / (e + 1.0);
        let d = tape.value(o).data();
        let want = [sigma, 1.0 - sigma, 1.0 - sigma, sigma];
        for (a, b) in d.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rejects_width_mismatch() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[1, 2, 3]));
        let k = tape.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(attention(&mut tape, q, k, k).is_err());
    }

    #[test]
    fn query_maps_for_four_by_four() {
        let maps = QueryMaps::new(&TokenLayout { grids: vec![(4, 4)] }, 2).unwrap();
        assert_eq!(maps.query_tokens(), 4);
        assert_eq!(maps.upsample.rows.len(), 16);
        assert_eq!(maps.pool.rows[0].len(), 4);
        // Token (3, 3) is covered by the last pooled cell.
        assert_eq!(maps.upsample.rows[15], vec![(3, 1.0)]);
        // Odd extents keep partial windows.
        let maps = QueryMaps::new(&TokenLayout { grids: vec![(3, 3), (1, 1)] }, 2).unwrap();
        assert_eq!(maps.query_tokens(), 5);
        assert_eq!(maps.pool.rows[3].len(), 1);
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            num_heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            num_layers: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(EncoderConfig::default().head_dim(), 16);
    }
}
