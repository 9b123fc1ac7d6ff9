//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded node stores its
//! value and the operation that produced it; [`Tape::backward`] replays the
//! nodes in reverse order. Inputs always precede their consumers, so reverse
//! insertion order is a valid topological order.

use std::collections::BTreeMap;

use crate::checkpoint::Fnv1a;
use crate::error::{contract, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{matmul_into, ConvGeometry, Scalar, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour for a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Normalize with batch statistics and emit running-stat updates.
    Train,
    /// Normalize with running statistics only.
    #[default]
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Max(Var, Var),
    Min(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MulRowGate(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Index {
        x: Var,
        idx: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferUpdate<T> {
    pub name: String,
    pub value: Tensor<T>,
}

pub struct Tape<'p, T: Scalar> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: BTreeMap<String, Var>,
    norm_mode: NormMode,
    macs: u64,
    buffer_updates: Vec<BufferUpdate<T>>,
    branches: Fnv1a,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// A tape without parameters, for free-standing computations.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            norm_mode: NormMode::Eval,
            macs: 0,
            buffer_updates: Vec::new(),
            branches: Fnv1a::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode
    }

    pub fn set_norm_mode(&mut self, mode: NormMode) {
        self.norm_mode = mode;
    }

    /// Multiply-accumulates performed by matmul and convolution nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn buffer_updates(&self) -> &[BufferUpdate<T>] {
        &self.buffer_updates
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn push_buffer_update(&mut self, name: &str, value: Tensor<T>) {
        self.buffer_updates.push(BufferUpdate {
            name: name.to_string(),
            value,
        });
    }

    /// Parameters touched during this pass, by name.
    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.param_vars
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a named parameter; repeated requests return the same node so
    /// shared weights accumulate one gradient.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| contract(format!("tape has no parameter store (asked for {name})")))?;
        let value = store.get(name)?.clone();
        let v = self.variable(value);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Read-only parameter value, not recorded.
    pub fn param_value(&self, name: &str) -> Result<&'p Tensor<T>> {
        self.store
            .ok_or_else(|| contract(format!("tape has no parameter store (asked for {name})")))?
            .get(name)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: fn(Var, Var) -> Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self.value(a).zip_map(self.value(b), op, f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, mk(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let (m, k) = self.value(a).dims2("matmul")?;
        self.macs += (m * k * value.shape()[1]) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Hash of every branch taken by piecewise ops so far. Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches.finish()
    }

    fn note_branches(&mut self, x: Var, pick: impl Fn(T) -> u8) {
        let bytes: Vec<u8> = self.nodes[x.0].value.data().iter().map(|&v| pick(v)).collect();
        self.branches.update(&bytes);
    }

    fn note_pair_branches(&mut self, a: Var, b: Var, pick: impl Fn(T, T) -> bool) {
        let bytes: Vec<u8> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| pick(x, y) as u8).collect();
        self.branches.update(&bytes);
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let r = self.binary("max", a, b, |x, y| if x >= y { x } else { y }, Op::Max)?;
        self.note_pair_branches(a, b, |x, y| x >= y);
        Ok(r)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let r = self.binary("min", a, b, |x, y| if x <= y { x } else { y }, Op::Min)?;
        self.note_pair_branches(a, b, |x, y| x <= y);
        Ok(r)
    }

    /// `x[.., C] + b[C]`, broadcast over all leading positions.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(b).len();
        let xs = self.shape(x);
        if *xs.last().unwrap() != c {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: xs.to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bd = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&bd) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddRowBias(x, b), rg))
    }

    /// `x[C, ..] + b[C]`, one bias per leading channel.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(b).len();
        let xs = self.shape(x);
        if xs[0] != c {
            return Err(Error::Dimension {
                op: "add_channel_bias",
                lhs: xs.to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let plane = self.value(x).len() / c;
        let bd = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for (ch, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bd[ch]);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddChannelBias(x, b), rg))
    }

    /// `x[R, C] * gate[C]`, the gate broadcast over rows.
    pub fn mul_row_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let c = self.value(gate).len();
        let xs = self.shape(x);
        if *xs.last().unwrap() != c {
            return Err(Error::Dimension {
                op: "mul_row_gate",
                lhs: xs.to_vec(),
                rhs: self.shape(gate).to_vec(),
            });
        }
        let gd = self.value(gate).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, &s) in row.iter_mut().zip(&gd) {
                *v *= s;
            }
        }
        let rg = self.rg(&[x, gate]);
        Ok(self.push(value, Op::MulRowGate(x, gate), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.note_branches(x, |v| (v > T::zero()) as u8);
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, T::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.note_branches(x, |v| (v >= T::zero()) as u8);
        self.unary(x, T::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.note_branches(x, |v| (v < lo) as u8 + 2 * (v > hi) as u8);
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).softmax_rows()?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Normalizes each row of `x[.., C]` and applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(gamma).len();
        let xs = self.shape(x).to_vec();
        if *xs.last().unwrap() != c || self.value(beta).len() != c {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: xs,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::of(eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xd = self.value(x).data();
        let rows = xd.len() / c;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        let n = T::of(c as f64);
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::raw(xs, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// Per-channel normalization of `x[C, ..]`. In [`NormMode::Eval`] the
    /// running statistics are used; in [`NormMode::Train`] the statistics of
    /// `x` itself are used and the returned pair holds `(mean, unbiased var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>)> {
        let c = self.value(gamma).len();
        let xs = self.shape(x).to_vec();
        if xs[0] != c || running_mean.len() != c || running_var.len() != c || self.value(beta).len() != c {
            return Err(Error::Dimension {
                op: "batch_norm",
                lhs: xs,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::of(eps);
        let xd = self.value(x).data();
        let plane = xd.len() / c;
        let batch_stats = self.norm_mode == NormMode::Train;
        let mut means = running_mean.data().to_vec();
        let mut vars = running_var.data().to_vec();
        let mut unbiased = vars.clone();
        if batch_stats {
            let n = T::of(plane as f64);
            for ch in 0..c {
                let p = &xd[ch * plane..(ch + 1) * plane];
                let m = p.iter().copied().sum::<T>() / n;
                let ss = p.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                means[ch] = m;
                vars[ch] = ss / n;
                unbiased[ch] = if plane > 1 { ss / T::of((plane - 1) as f64) } else { ss };
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for ch in 0..c {
            for i in ch * plane..(ch + 1) * plane {
                let h = (xd[i] - means[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = h * g[ch] + b[ch];
            }
        }
        let stats = batch_stats.then(|| (Tensor::raw(vec![c], means), Tensor::raw(vec![c], unbiased)));
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::raw(xs, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), groups, padding)?;
        let value = self
            .value(x)
            .conv2d(self.value(w), b.map(|b| self.value(b)), groups, padding)?;
        self.macs += geom.macs();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Concatenates rank-2 tensors along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let (r, c) = self.value(v).dims2("concat_cols")?;
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(v).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &c) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::raw(vec![rows, total], out), Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: vec![rows, cols],
                rhs: vec![start, len],
            });
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::raw(vec![rows, len], out), Op::SliceCols { x, start }, rg))
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s[1..] != tail[..] {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(xs);
        Ok(self.push(Tensor::raw(shape, out), Op::ConcatRows(xs.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let width = self.value(x).len() / s[0];
        let out = self.value(x).data()[start * width..(start + len) * width].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::raw(shape, out), Op::SliceRows { x, start }, rg))
    }

    /// Column means of `x[R, C]`, shaped `[1, C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("mean_rows")?;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); c];
        for row in d.chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = T::of(r as f64);
        out.iter_mut().for_each(|v| *v /= n);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::raw(vec![1, c], out), Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / T::of(v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Element at a flat index, as a scalar node.
    pub fn index(&mut self, x: Var, idx: usize) -> Result<Var> {
        let v = self.value(x);
        if idx >= v.len() {
            return Err(Error::Dimension {
                op: "index",
                lhs: v.shape().to_vec(),
                rhs: vec![idx],
            });
        }
        let s = v.data()[idx];
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Index { x, idx }, rg))
    }

    /// Gradients of a scalar node with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            self.backprop(node, g, lower);
        }
        Ok(Gradients {
            grads,
            params: self.param_vars.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::raw(self.nodes[v.0].value.shape().to_vec(), data));
            }
        }
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let zip = |a: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> { gd.iter().zip(a).map(|(&g, &x)| f(g, x)).collect() };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2("matmul").unwrap();
                let n = val(*b).shape()[1];
                if self.nodes[a.0].requires_grad {
                    let bt = val(*b).transpose().unwrap();
                    let mut ga = vec![T::zero(); m * k];
                    matmul_into(gd, bt.data(), &mut ga, m, n, k);
                    self.acc(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let at = val(*a).transpose().unwrap();
                    let mut gb = vec![T::zero(); k * n];
                    matmul_into(at.data(), gd, &mut gb, k, m, n);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Transpose(x) => {
                let gt = g.transpose().unwrap();
                self.acc(grads, *x, gt.into_data());
            }
            Op::Reshape(x) => self.acc(grads, *x, gd.to_vec()),
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, zip(val(*b).data(), &|g, y| g * y));
                self.acc(grads, *b, zip(val(*a).data(), &|g, x| g * x));
            }
            Op::Div(a, b) => {
                let bd = val(*b).data();
                self.acc(grads, *a, zip(bd, &|g, y| g / y));
                let ad = val(*a).data();
                let gb = gd
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect();
                self.acc(grads, *b, gb);
            }
            Op::Max(a, b) | Op::Min(a, b) => {
                let is_max = matches!(node.op, Op::Max(..));
                let ad = val(*a).data();
                let bd = val(*b).data();
                let pick_a: Vec<bool> = ad
                    .iter()
                    .zip(bd)
                    .map(|(&x, &y)| if is_max { x >= y } else { x <= y })
                    .collect();
                let ga = gd.iter().zip(&pick_a).map(|(&g, &p)| if p { g } else { T::zero() }).collect();
                let gb = gd.iter().zip(&pick_a).map(|(&g, &p)| if p { T::zero() } else { g }).collect();
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::AddRowBias(x, b) => {
                self.acc(grads, *x, gd.to_vec());
                let c = val(*b).len();
                let mut gb = vec![T::zero(); c];
                for row in gd.chunks(c) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.acc(grads, *b, gb);
            }
            Op::AddChannelBias(x, b) => {
                self.acc(grads, *x, gd.to_vec());
                let c = val(*b).len();
                let plane = gd.len() / c;
                let gb = gd.chunks(plane).map(|p| p.iter().copied().sum()).collect();
                self.acc(grads, *b, gb);
            }
            Op::MulRowGate(x, s) => {
                let c = val(*s).len();
                let sd = val(*s).data();
                let xd = val(*x).data();
                let mut gx = gd.to_vec();
                let mut gs = vec![T::zero(); c];
                for (r, row) in gx.chunks_mut(c).enumerate() {
                    for j in 0..c {
                        gs[j] += row[j] * xd[r * c + j];
                        row[j] *= sd[j];
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *s, gs);
            }
            Op::Scale(x, c) => self.acc(grads, *x, gd.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(x, _) => self.acc(grads, *x, gd.to_vec()),
            Op::Relu(x) => self.acc(grads, *x, zip(val(*x).data(), &|g, x| if x > T::zero() { g } else { T::zero() })),
            Op::Gelu(x) => self.acc(grads, *x, zip(val(*x).data(), &|g, x| g * gelu_grad(x))),
            Op::Sigmoid(_) | Op::Exp(_) => {
                let (x, y) = match node.op {
                    Op::Sigmoid(x) => (x, true),
                    Op::Exp(x) => (x, false),
                    _ => unreachable!(),
                };
                let out = node.value.data();
                let f: &dyn Fn(T, T) -> T = if y { &|g, s| g * s * (T::one() - s) } else { &|g, e| g * e };
                self.acc(grads, x, zip(out, f));
            }
            Op::Log(x) => self.acc(grads, *x, zip(val(*x).data(), &|g, x| g / x)),
            Op::Abs(x) => self.acc(
                grads,
                *x,
                zip(val(*x).data(), &|g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Square(x) => self.acc(grads, *x, zip(val(*x).data(), &|g, x| g * (x + x))),
            Op::Softmax(x) => {
                let (r, c) = node.value.dims2("softmax").unwrap();
                let y = node.value.data();
                let mut gx = vec![T::zero(); r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &gd[row * c..(row + 1) * c];
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = val(*gamma).len();
                let gam = val(*gamma).data();
                let mut gx = vec![T::zero(); gd.len()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                let n = T::of(c as f64);
                for (r, &rs) in rstd.iter().enumerate() {
                    let base = r * c;
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        let dh = gd[base + j] * gam[j];
                        m1 += dh;
                        m2 += dh * xhat[base + j];
                        gg[j] += gd[base + j] * xhat[base + j];
                        gb[j] += gd[base + j];
                    }
                    m1 /= n;
                    m2 /= n;
                    for j in 0..c {
                        let dh = gd[base + j] * gam[j];
                        gx[base + j] = rs * (dh - m1 - xhat[base + j] * m2);
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = val(*gamma).len();
                let gam = val(*gamma).data();
                let plane = gd.len() / c;
                let n = T::of(plane as f64);
                let mut gx = vec![T::zero(); gd.len()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for ch in 0..c {
                    let rng = ch * plane..(ch + 1) * plane;
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in rng.clone() {
                        gg[ch] += gd[i] * xhat[i];
                        gb[ch] += gd[i];
                        let dh = gd[i] * gam[ch];
                        m1 += dh;
                        m2 += dh * xhat[i];
                    }
                    m1 /= n;
                    m2 /= n;
                    for i in rng {
                        let dh = gd[i] * gam[ch];
                        gx[i] = if *batch_stats {
                            inv_std[ch] * (dh - m1 - xhat[i] * m2)
                        } else {
                            dh * inv_std[ch]
                        };
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = geom.backward(val(*x).data(), val(*w).data(), gd);
                self.acc(grads, *x, gx);
                self.acc(grads, *w, gw);
                if let Some(b) = b {
                    self.acc(grads, *b, gb);
                }
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = g.dims2("concat_cols").unwrap();
                let mut off = 0;
                for &v in xs {
                    let c = val(v).shape()[1];
                    let mut part = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        part.extend_from_slice(&gd[r * total + off..r * total + off + c]);
                    }
                    self.acc(grads, v, part);
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = val(*x).dims2("slice_cols").unwrap();
                let len = node.value.shape()[1];
                let mut gx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = val(v).len();
                    self.acc(grads, v, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let width = xv.len() / xv.shape()[0];
                let mut gx = vec![T::zero(); xv.len()];
                gx[start * width..start * width + gd.len()].copy_from_slice(gd);
                self.acc(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let (r, _) = val(*x).dims2("mean_rows").unwrap();
                let n = T::of(r as f64);
                let row: Vec<T> = gd.iter().map(|&v| v / n).collect();
                let gx = (0..r).flat_map(|_| row.iter().copied()).collect();
                self.acc(grads, *x, gx);
            }
            Op::Sum(x) => self.acc(grads, *x, vec![gd[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                self.acc(grads, *x, vec![gd[0] / T::of(n as f64); n]);
            }
            Op::Clamp { x, lo, hi } => self.acc(
                grads,
                *x,
                zip(val(*x).data(), &|g, x| if x >= *lo && x <= *hi { g } else { T::zero() }),
            ),
            Op::Index { x, idx } => {
                let mut gx = vec![T::zero(); val(*x).len()];
                gx[*idx] = gd[0];
                self.acc(grads, *x, gx);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub(crate) fn gelu<T: Scalar>(v: T) -> T {
    v * T::of(0.5) * (T::one() + (v / T::of(std::f64::consts::SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(v: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (v / T::of(std::f64::consts::SQRT_2)).erf());
    let pdf = (-v * v / T::of(2.0)).exp() / T::of((2.0 * std::f64::consts::PI).sqrt());
    cdf + v * pdf
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// Gradients of every parameter reached by the pass, by name.
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(k, &v)| self.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    /// Names of parameters touched by the pass.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, d).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(t(&[2], &[1.0, 2.0]));
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_param_accumulates_once_per_consumer() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("w", t(&[1], &[3.0]), crate::params::ParamKind::Trainable)
            .unwrap();
        let mut tape = Tape::with_params(&store);
        let a = tape.param("w").unwrap();
        let b = tape.param("w").unwrap();
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let q = tape.add(p, a).unwrap();
        let g = tape.backward(q).unwrap();
        // d/dw (w^2 + w) = 2w + 1
        assert_eq!(g.param("w").unwrap().data(), &[7.0]);
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, -1.0, 1.0]));
        let ge = tape.gelu(x);
        let re = tape.relu(x);
        let si = tape.sigmoid(x);
        assert_eq!(tape.value(ge).data()[0], 0.0);
        assert_eq!(tape.value(re).data()[1], 0.0);
        assert_eq!(tape.value(si).data()[0], 0.5);
        let rr = tape.relu(re);
        assert_eq!(tape.value(rr), tape.value(re));
        // Phi(1) = 0.841344746068543 from the error function.
        assert!((tape.value(ge).data()[2] - 0.841_344_746_068_543).abs() < 1e-6);
    }

    #[test]
    fn macs_are_counted() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[5, 4]).unwrap());
        let b = tape.constant(Tensor::zeros(&[4, 3]).unwrap());
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.macs(), 60);
    }
}
