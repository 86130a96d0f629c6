//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node holding its output value
//! and the handles of its inputs. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid reverse topological order
//! because a node can only reference nodes recorded before it.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map between token sequences: output token `j` is
/// `Σ weight · input[i]` over `rows[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMap {
    pub inputs: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Reshape(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    AddLast(Var, Var),
    MulLast(Var, Var),
    AddChannel(Var, Var),
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    Softmax { axis: usize },
    LayerNorm { inv_std: Vec<f64> },
    L2Normalize { x: Var, axis: usize, eps: f64, norms: Vec<f64> },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Blur { x: Var, taps: Arc<[f64]>, stride: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    NchwToTokens(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    TokenMix { x: Var, map: Arc<TokenMap> },
    IndexSelect { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    /// Inputs of ops whose backward needs more than the output value.
    src: Option<Var>,
}

/// Recorded computation. Single-threaded; create one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves that required them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn strides3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient will be reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, true, Op::Leaf, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, false, Op::Leaf, None)
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op, src: Option<Var>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            src,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, rg, op, None)
    }

    fn push_with_src(&mut self, value: Tensor, op: Op, x: Var) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push_raw(value, rg, op, Some(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = &self.nodes[x.0].value;
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
        }
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    // ---- shape ops -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `[b, c, h, w] → [b, h·w, c]`, tokens in row-major spatial order.
    pub fn nchw_to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("nchw_to_tokens", &s, &[0, 0, 0, 0]));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = &self.value(x).data;
        let mut data = vec![0.0; b * c * hw];
        for n in 0..b {
            for ci in 0..c {
                for p in 0..hw {
                    data[(n * hw + p) * c + ci] = src[(n * c + ci) * hw + p];
                }
            }
        }
        let out = Tensor::new(&[b, hw, c], data)?;
        Ok(self.push(out, Op::NchwToTokens(x), &[x]))
    }

    /// `[b, t, h·dk] → [b·h, t, dk]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::Config(format!(
                "cannot split shape {s:?} into {heads} heads"
            )));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dk = d / heads;
        let src = &self.value(x).data;
        let mut data = vec![0.0; b * t * d];
        for n in 0..b {
            for hd in 0..heads {
                for i in 0..t {
                    let from = (n * t + i) * d + hd * dk;
                    let to = ((n * heads + hd) * t + i) * dk;
                    data[to..to + dk].copy_from_slice(&src[from..from + dk]);
                }
            }
        }
        let out = Tensor::new(&[b * heads, t, dk], data)?;
        Ok(self.push(out, Op::SplitHeads { x, heads }, &[x]))
    }

    /// `[b·h, t, dk] → [b, t, h·dk]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(Error::Config(format!(
                "cannot merge shape {s:?} from {heads} heads"
            )));
        }
        let (b, t, dk) = (s[0] / heads, s[1], s[2]);
        let d = dk * heads;
        let src = &self.value(x).data;
        let mut data = vec![0.0; b * t * d];
        for n in 0..b {
            for hd in 0..heads {
                for i in 0..t {
                    let from = ((n * heads + hd) * t + i) * dk;
                    let to = (n * t + i) * d + hd * dk;
                    data[to..to + dk].copy_from_slice(&src[from..from + dk]);
                }
            }
        }
        let out = Tensor::new(&[b, t, d], data)?;
        Ok(self.push(out, Op::MergeHeads { x, heads }, &[x]))
    }

    /// Apply a [`TokenMap`] along axis 1 of a `[b, t, d]` tensor.
    pub fn token_mix(&mut self, x: Var, map: Arc<TokenMap>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != map.inputs {
            return Err(Error::shape("token_mix", &s, &[map.inputs]));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let to = map.rows.len();
        let src = &self.value(x).data;
        let mut data = vec![0.0; b * to * d];
        for n in 0..b {
            for (j, row) in map.rows.iter().enumerate() {
                let dst = &mut data[(n * to + j) * d..(n * to + j + 1) * d];
                for &(i, wgt) in row {
                    let xi = &src[(n * t + i) * d..(n * t + i + 1) * d];
                    dst.iter_mut().zip(xi).for_each(|(o, v)| *o += wgt * v);
                }
            }
        }
        let out = Tensor::new(&[b, to, d], data)?;
        Ok(self.push(out, Op::TokenMix { x, map }, &[x]))
    }

    /// Gather entries of a 1-D tensor.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || idx.iter().any(|&i| i >= s[0]) || idx.is_empty() {
            return Err(Error::Contract(format!(
                "index_select {idx:?} out of range for {s:?}"
            )));
        }
        let src = &self.value(x).data;
        let out = Tensor::from_slice(&idx.iter().map(|&i| src[i]).collect::<Vec<_>>());
        Ok(self.push(
            out,
            Op::IndexSelect {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    // ---- linear algebra --------------------------------------------------

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, &mut c, false);
        let out = Tensor::new(&[m, n], c)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched `[b, m, k] · [b, k, n]`, or `· [b, n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (da, db) = (&self.value(a).data, &self.value(b).data);
        let mut c = vec![0.0; bs * m * n];
        crate::par::chunks_mut(&mut c, m * n, |i, ci| {
            kernels::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                ci,
                false,
            )
        });
        let out = Tensor::new(&[bs, m, n], c)?;
        Ok(self.push(out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Affine map over the last axis: `x[.., k] · w[k, n] + bias[n]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| Error::shape("linear", &s, self.shape(w)))?;
        let rows = self.value(x).len() / k;
        let flat = self.reshape(x, &[rows, k])?;
        let y = self.matmul(flat, w)?;
        let y = match bias {
            Some(b) => self.add_last(y, b)?,
            None => y,
        };
        let mut out_shape = s;
        *out_shape.last_mut().unwrap() = self.shape(w)[1];
        self.reshape(y, &out_shape)
    }

    /// Batched 2-D cross-correlation with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (h, wd) = (sx[2] + 2 * pad, sx[3] + 2 * pad);
        if h < sw[2] || wd < sw[3] {
            return Err(Error::Config(format!(
                "conv2d output extent is not positive: input {sx:?}, kernel {sw:?}, padding {pad}"
            )));
        }
        let geom = ConvGeom {
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh: (h - sw[2]) / stride + 1,
            ow: (wd - sw[3]) / stride + 1,
        };
        let data = kernels::conv2d_forward(&self.value(x).data, sx[0], &self.value(w).data, &geom);
        let out = Tensor::new(&[sx[0], geom.cout, geom.oh, geom.ow], data)?;
        Ok(self.push(out, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Separable blur over the spatial axes of an NCHW tensor (valid region),
    /// subsampled by `stride`.
    pub fn blur2d(&mut self, x: Var, taps: Arc<[f64]>, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("blur2d", &s, &[0, 0, 0, 0]));
        }
        if stride == 0 || taps.is_empty() {
            return Err(Error::Config("blur needs a positive stride and taps".into()));
        }
        if s[2] < taps.len() || s[3] < taps.len() {
            return Err(Error::Config(format!(
                "spatial extent {}x{} is smaller than the window length {}",
                s[2],
                s[3],
                taps.len()
            )));
        }
        let data = kernels::blur_forward(&self.value(x).data, s[0] * s[1], s[2], s[3], &taps, stride);
        let oh = (s[2] - taps.len()) / stride + 1;
        let ow = (s[3] - taps.len()) / stride + 1;
        let out = Tensor::new(&[s[0], s[1], oh, ow], data)?;
        Ok(self.push(out, Op::Blur { x, taps, stride }, &[x]))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.binary(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.binary(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.binary(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.unary(x, |a| a * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.unary(x, |a| a + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.unary(x, |a| if a <= 0.0 { 0.0 } else { a });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.unary(x, f64::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    /// Square root; the gradient at an exact zero is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data.iter().find(|v| **v < 0.0) {
            return Err(Error::Contract(format!("sqrt of negative value {v}")));
        }
        let out = self.unary(x, f64::sqrt);
        Ok(self.push(out, Op::Sqrt(x), &[x]))
    }

    /// Add `v[n]` along the last axis of `x[.., n]`.
    pub fn add_last(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        if sv.len() != 1 || sx.last() != Some(&sv[0]) {
            return Err(Error::shape("add_last", &sx, &sv));
        }
        let n = sv[0];
        let vv = self.value(v).data.clone();
        let mut out = self.value(x).clone();
        out.data.chunks_mut(n).for_each(|r| r.iter_mut().zip(&vv).for_each(|(a, b)| *a += b));
        Ok(self.push(out, Op::AddLast(x, v), &[x, v]))
    }

    /// Multiply by `v[n]` along the last axis of `x[.., n]`.
    pub fn mul_last(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        if sv.len() != 1 || sx.last() != Some(&sv[0]) {
            return Err(Error::shape("mul_last", &sx, &sv));
        }
        let n = sv[0];
        let vv = self.value(v).data.clone();
        let mut out = self.value(x).clone();
        out.data.chunks_mut(n).for_each(|r| r.iter_mut().zip(&vv).for_each(|(a, b)| *a *= b));
        Ok(self.push(out, Op::MulLast(x, v), &[x, v]))
    }

    /// Add a per-channel bias `b[c]` to an NCHW tensor.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("add_channel", &sx, &sb));
        }
        let hw = sx[2] * sx[3];
        let bv = self.value(b).data.clone();
        let mut out = self.value(x).clone();
        for (i, plane) in out.data.chunks_mut(hw).enumerate() {
            let c = bv[i % sx[1]];
            plane.iter_mut().for_each(|a| *a += c);
        }
        Ok(self.push(out, Op::AddChannel(x, b), &[x, b]))
    }

    // ---- reductions and normalizations -----------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Contract(format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = strides3(&s, axis);
        let src = &self.value(x).data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(d, v)| *d += v);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::Contract(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Contract(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = strides3(&s, axis);
        let mut out = self.value(x).clone();
        let d = &mut out.data;
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (d[at(a)] - m).exp();
                    d[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    d[at(a)] /= z;
                }
            }
        }
        Ok(self.push_with_src(out, Op::Softmax { axis }, x))
    }

    /// Normalize each vector along the last axis to zero mean and unit
    /// variance (no affine parameters).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::Contract("layer_norm of a scalar".into()))?;
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for row in out.data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        Ok(self.push_with_src(out, Op::LayerNorm { inv_std }, x))
    }

    /// `x / max(‖x‖₂, eps)` with the norm taken along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Contract(format!("axis {axis} out of range for {s:?}")));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("normalization epsilon must be positive, got {eps}")));
        }
        let (outer, len, inner) = strides3(&s, axis);
        let mut out = self.value(x).clone();
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let n = (0..len).map(|a| out.data[at(a)].powi(2)).sum::<f64>().sqrt();
                norms[o * inner + i] = n;
                let d = n.max(eps);
                for a in 0..len {
                    out.data[at(a)] /= d;
                }
            }
        }
        Ok(self.push(out, Op::L2Normalize { x, axis, eps, norms }, &[x]))
    }

    // ---- diagnostics -------------------------------------------------------

    /// Hash of the sign pattern at every non-smooth point (ReLU and |·|
    /// inputs). Two evaluations with equal signatures lie in the same smooth
    /// piece of the recorded function.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            let x = match node.op {
                Op::Relu(x) | Op::Abs(x) => x,
                _ => continue,
            };
            for &v in &self.nodes[x.0].value.data {
                mix(if v > 0.0 {
                    1
                } else if v < 0.0 {
                    2
                } else {
                    3
                });
            }
        }
        h
    }

    // ---- reverse pass ------------------------------------------------------

    /// Backpropagate from a one-element `loss`, returning gradients for every
    /// leaf created with [`Tape::leaf`] that the loss depends on. Clears the
    /// tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; n];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                });
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        self.nodes.clear();
        Ok(Gradients { grads: leaves })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let out = &node.value.data;
        let val = |v: Var| &nodes[v.0].value;
        // Accumulate into an input's gradient buffer, allocating on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let add_into = |buf: &mut [f64], src: &[f64]| buf.iter_mut().zip(src).for_each(|(b, s)| *b += s);

        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Reshape(x) => acc(*x, &mut |b| add_into(b, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (&val(*a).data, &val(*b).data);
                acc(*a, &mut |buf| kernels::gemm(m, n, k, g, false, db, true, buf, true));
                acc(*b, &mut |buf| kernels::gemm(k, m, n, da, true, g, false, buf, true));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (_, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (da, db) = (&val(*a).data, &val(*b).data);
                acc(*a, &mut |buf| {
                    crate::par::chunks_mut(buf, m * k, |j, bj| {
                        let gj = &g[j * m * n..(j + 1) * m * n];
                        let bb = &db[j * k * n..(j + 1) * k * n];
                        // dA = dC · Bᵀ (or dC · B when B was used transposed)
                        kernels::gemm(m, n, k, gj, false, bb, !*trans_b, bj, true);
                    });
                });
                acc(*b, &mut |buf| {
                    crate::par::chunks_mut(buf, k * n, |j, bj| {
                        let gj = &g[j * m * n..(j + 1) * m * n];
                        let aa = &da[j * m * k..(j + 1) * m * k];
                        if *trans_b {
                            // B stored [n, k]: dB = dCᵀ · A
                            kernels::gemm(n, m, k, gj, true, aa, false, bj, true);
                        } else {
                            kernels::gemm(k, m, n, aa, true, gj, false, bj, true);
                        }
                    });
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                acc(*a, &mut |buf| {
                    buf.iter_mut().zip(g).zip(vb).for_each(|((o, gv), y)| *o += gv * y)
                });
                acc(*b, &mut |buf| {
                    buf.iter_mut().zip(g).zip(va).for_each(|((o, gv), x)| *o += gv * x)
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += c * v)),
            Op::AddScalar(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::Relu(x) => {
                let xv = &val(*x).data;
                acc(*x, &mut |buf| {
                    for ((o, gv), v) in buf.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let xv = &val(*x).data;
                acc(*x, &mut |buf| {
                    for ((o, gv), v) in buf.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *o += gv;
                        } else if *v < 0.0 {
                            *o -= gv;
                        }
                    }
                });
            }
            Op::Sqrt(x) => acc(*x, &mut |buf| {
                for ((o, gv), y) in buf.iter_mut().zip(g).zip(out) {
                    if *y > 0.0 {
                        *o += gv * 0.5 / y;
                    }
                }
            }),
            Op::AddLast(x, v) => {
                let n = val(*v).len();
                acc(*x, &mut |buf| add_into(buf, g));
                acc(*v, &mut |buf| g.chunks(n).for_each(|r| add_into(buf, r)));
            }
            Op::MulLast(x, v) => {
                let n = val(*v).len();
                let (xv, vv) = (&val(*x).data, &val(*v).data);
                acc(*x, &mut |buf| {
                    for (bo, go) in buf.chunks_mut(n).zip(g.chunks(n)) {
                        bo.iter_mut().zip(go).zip(vv).for_each(|((o, gv), s)| *o += gv * s);
                    }
                });
                acc(*v, &mut |buf| {
                    for (go, xo) in g.chunks(n).zip(xv.chunks(n)) {
                        buf.iter_mut().zip(go).zip(xo).for_each(|((o, gv), a)| *o += gv * a);
                    }
                });
            }
            Op::AddChannel(x, b) => {
                let s = val(*x).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                acc(*x, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    for (p, plane) in g.chunks(hw).enumerate() {
                        buf[p % c] += plane.iter().sum::<f64>();
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = strides3(val(*x).shape(), *axis);
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        let gr = &g[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            add_into(&mut buf[(o * len + a) * inner..(o * len + a + 1) * inner], gr);
                        }
                    }
                });
            }
            Op::Softmax { axis } => {
                let x = node.src.expect("softmax keeps its input");
                let (outer, len, inner) = strides3(node.value.shape(), *axis);
                acc(x, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let dot: f64 = (0..len).map(|a| g[at(a)] * out[at(a)]).sum();
                            for a in 0..len {
                                buf[at(a)] += out[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { inv_std } => {
                let x = node.src.expect("layer_norm keeps its input");
                let n = *node.value.shape().last().unwrap();
                acc(x, &mut |buf| {
                    for (r, ((bo, go), yo)) in buf
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(out.chunks(n))
                        .enumerate()
                    {
                        let mg = go.iter().sum::<f64>() / n as f64;
                        let mgy = go.iter().zip(yo).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((o, gv), y) in bo.iter_mut().zip(go).zip(yo) {
                            *o += inv_std[r] * (gv - mg - y * mgy);
                        }
                    }
                });
            }
            Op::L2Normalize { x, axis, eps, norms } => {
                let (outer, len, inner) = strides3(node.value.shape(), *axis);
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let nrm = norms[o * inner + i];
                            if nrm > *eps {
                                let dot: f64 = (0..len).map(|a| out[at(a)] * g[at(a)]).sum();
                                for a in 0..len {
                                    buf[at(a)] += (g[at(a)] - out[at(a)] * dot) / nrm;
                                }
                            } else {
                                for a in 0..len {
                                    buf[at(a)] += g[at(a)] / eps;
                                }
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, geom } => {
                let want_dx = nodes[x.0].requires_grad;
                let want_dw = nodes[w.0].requires_grad;
                let batch = val(*x).shape()[0];
                let (dx, dw) = kernels::conv2d_backward(
                    &val(*x).data,
                    batch,
                    &val(*w).data,
                    g,
                    geom,
                    want_dx,
                    want_dw,
                );
                if let Some(dx) = dx {
                    acc(*x, &mut |buf| add_into(buf, &dx));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |buf| add_into(buf, &dw));
                }
            }
            Op::Blur { x, taps, stride } => {
                let s = val(*x).shape();
                let dx = kernels::blur_backward(g, s[0] * s[1], s[2], s[3], taps, *stride);
                acc(*x, &mut |buf| add_into(buf, &dx));
            }
            Op::Concat { inputs, axis } => {
                let base = node.value.shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = base[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).shape()[*axis] * inner;
                    acc(v, &mut |buf| {
                        for o in 0..outer {
                            add_into(
                                &mut buf[o * len..(o + 1) * len],
                                &g[o * total + offset..o * total + offset + len],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::NchwToTokens(x) => {
                let s = val(*x).shape();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                acc(*x, &mut |buf| {
                    for n in 0..b {
                        for ci in 0..c {
                            for p in 0..hw {
                                buf[(n * c + ci) * hw + p] += g[(n * hw + p) * c + ci];
                            }
                        }
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let s = val(*x).shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let dk = d / heads;
                acc(*x, &mut |buf| {
                    for n in 0..b {
                        for hd in 0..*heads {
                            for i in 0..t {
                                let to = (n * t + i) * d + hd * dk;
                                let from = ((n * heads + hd) * t + i) * dk;
                                add_into(&mut buf[to..to + dk], &g[from..from + dk]);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads } => {
                let s = val(*x).shape();
                let (b, t, dk) = (s[0] / heads, s[1], s[2]);
                let d = dk * heads;
                acc(*x, &mut |buf| {
                    for n in 0..b {
                        for hd in 0..*heads {
                            for i in 0..t {
                                let to = ((n * heads + hd) * t + i) * dk;
                                let from = (n * t + i) * d + hd * dk;
                                add_into(&mut buf[to..to + dk], &g[from..from + dk]);
                            }
                        }
                    }
                });
            }
            Op::TokenMix { x, map } => {
                let s = val(*x).shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let to = map.rows.len();
                acc(*x, &mut |buf| {
                    for n in 0..b {
                        for (j, row) in map.rows.iter().enumerate() {
                            let gj = &g[(n * to + j) * d..(n * to + j + 1) * d];
                            for &(i, wgt) in row {
                                buf[(n * t + i) * d..(n * t + i + 1) * d]
                                    .iter_mut()
                                    .zip(gj)
                                    .for_each(|(o, v)| *o += wgt * v);
                            }
                        }
                    }
                });
            }
            Op::IndexSelect { x, idx } => acc(*x, &mut |buf| {
                for (k, &i) in idx.iter().enumerate() {
                    buf[i] += g[k];
                }
            }),
        }
    }
}
