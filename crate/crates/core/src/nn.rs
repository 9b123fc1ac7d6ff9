//! Parametric layers. Each layer is a descriptor holding parameter names and
//! extents; values live in the model's [`ParamStore`](crate::params::ParamStore)
//! and are pulled onto the tape on use.

use crate::autodiff::{NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamKind, ParamSpec};
use crate::tensor::Scalar;

pub const WEIGHT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn spec(name: &str, shape: &[usize], init: Init, kind: ParamKind) -> ParamSpec {
    ParamSpec {
        name: name.to_string(),
        shape: shape.to_vec(),
        init,
        kind,
    }
}

fn check_cols<T: Scalar>(tape: &Tape<'_, T>, x: Var, want: usize, op: &'static str) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != want {
        return Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![want],
        });
    }
    Ok(s[0])
}

/// `y = x W^T + b` over the rows of a token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_dim,
            out_dim,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(spec(&self.weight, &[self.out_dim, self.in_dim], Init::TruncNormal(WEIGHT_STD), ParamKind::Trainable));
        out.push(spec(&self.bias, &[self.out_dim], Init::Zeros, ParamKind::Trainable));
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        check_cols(tape, x, self.in_dim, "linear")?;
        let w = tape.param(&self.weight)?;
        let b = tape.param(&self.bias)?;
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        tape.add_row_bias(y, b)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.in_dim * self.out_dim) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub weight: String,
    pub bias: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            dim,
            eps: LN_EPS,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(spec(&self.weight, &[self.dim], Init::Ones, ParamKind::Trainable));
        out.push(spec(&self.bias, &[self.dim], Init::Zeros, ParamKind::Trainable));
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.weight)?;
        let b = tape.param(&self.bias)?;
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Batch norm over a single `C x H x W` map. Training mode uses the spatial
/// statistics of that map and records running-stat updates on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub weight: String,
    pub bias: String,
    pub running_mean: String,
    pub running_var: String,
    pub dim: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            running_mean: format!("{prefix}.running_mean"),
            running_var: format!("{prefix}.running_var"),
            dim,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(spec(&self.weight, &[self.dim], Init::Ones, ParamKind::Trainable));
        out.push(spec(&self.bias, &[self.dim], Init::Zeros, ParamKind::Trainable));
        out.push(spec(&self.running_mean, &[self.dim], Init::Zeros, ParamKind::Buffer));
        out.push(spec(&self.running_var, &[self.dim], Init::Ones, ParamKind::Buffer));
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.weight)?;
        let b = tape.param(&self.bias)?;
        let rm = tape.param_value(&self.running_mean)?;
        let rv = tape.param_value(&self.running_var)?;
        let (y, stats) = tape.batch_norm(x, g, b, rm, rv, self.eps)?;
        if let (NormMode::Train, Some((mean, var))) = (tape.norm_mode(), stats) {
            let m = T::of(self.momentum);
            let keep = T::one() - m;
            let nm = rm.zip_map(&mean, "bn update", |old, new| keep * old + m * new)?;
            let nv = rv.zip_map(&var, "bn update", |old, new| keep * old + m * new)?;
            tape.push_buffer_update(&self.running_mean, nm);
            tape.push_buffer_update(&self.running_var, nv);
        }
        Ok(y)
    }
}

/// Stride-1 convolution with "same" zero padding on a `C x H x W` map.
/// `groups == in_ch == out_ch` gives a depthwise convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new(prefix: &str, in_ch: usize, out_ch: usize, kernel: usize, groups: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_ch,
            out_ch,
            kernel,
            groups,
        }
    }

    pub fn depthwise(prefix: &str, ch: usize, kernel: usize) -> Self {
        Self::new(prefix, ch, ch, kernel, ch)
    }

    pub fn pointwise(prefix: &str, in_ch: usize, out_ch: usize) -> Self {
        Self::new(prefix, in_ch, out_ch, 1, 1)
    }

    /// Weights and bias uniform in `+-1/sqrt(fan_in)`.
    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let fan_in = self.in_ch / self.groups * self.kernel * self.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        out.push(spec(
            &self.weight,
            &[self.out_ch, self.in_ch / self.groups, self.kernel, self.kernel],
            Init::Uniform(bound),
            ParamKind::Trainable,
        ));
        out.push(spec(&self.bias, &[self.out_ch], Init::Uniform(bound), ParamKind::Trainable));
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight)?;
        let b = tape.param(&self.bias)?;
        tape.conv2d(x, w, Some(b), self.groups, (self.kernel - 1) / 2)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.out_ch * (self.in_ch / self.groups) * self.kernel * self.kernel * h * w) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
}

pub fn activate<T: Scalar>(tape: &mut Tape<'_, T>, kind: Activation, x: Var) -> Var {
    match kind {
        Activation::Gelu => tape.gelu(x),
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}

/// Per-channel mean over the tokens of `x[N, C]`, shaped `[1, C]`.
pub fn adaptive_avg_pool<T: Scalar>(tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    tape.mean_rows(x)
}

/// Softmax scaling convention for attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttnScaling {
    /// `1/sqrt(d)` with `d = C / heads`.
    #[default]
    PerHead,
    /// `1/sqrt(C)` regardless of the head count.
    Global,
}

impl AttnScaling {
    pub fn factor(self, dim: usize, heads: usize) -> f64 {
        match self {
            AttnScaling::PerHead => 1.0 / ((dim / heads) as f64).sqrt(),
            AttnScaling::Global => 1.0 / (dim as f64).sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttnScaling::PerHead => "per-head",
            AttnScaling::Global => "global",
        }
    }
}

/// Per-head attention probabilities `softmax(q_h k_h^T * scale)`.
pub fn attention_probs<T: Scalar>(tape: &mut Tape<'_, T>, q: Var, k: Var, heads: usize, scale: f64) -> Result<Vec<Var>> {
    let c = tape.shape(q)[1];
    if c % heads != 0 || tape.shape(k)[1] != c {
        return Err(Error::Config(format!("attention width {c} not divisible by {heads} heads")));
    }
    let d = c / heads;
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh) = if heads == 1 {
            (q, k)
        } else {
            (tape.slice_cols(q, h * d, d)?, tape.slice_cols(k, h * d, d)?)
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, T::of(scale));
        probs.push(tape.softmax_rows(logits)?);
    }
    Ok(probs)
}

/// Multi-head scaled dot-product attention; heads concatenated along channels.
pub fn attention<T: Scalar>(tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
    let c = tape.shape(v)[1];
    let d = c / heads;
    let probs = attention_probs(tape, q, k, heads, scale)?;
    let mut outs = Vec::with_capacity(heads);
    for (h, p) in probs.into_iter().enumerate() {
        let vh = if heads == 1 { v } else { tape.slice_cols(v, h * d, d)? };
        outs.push(tape.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Attention MACs for `nq` queries against `nk` keys at width `c`.
pub fn attention_macs(nq: usize, nk: usize, c: usize) -> u64 {
    2 * (nq * nk * c) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub dim: usize,
    pub heads: usize,
    pub scaling: AttnScaling,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize, scaling: AttnScaling) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("embedding width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&format!("{prefix}.q"), dim, dim),
            k: Linear::new(&format!("{prefix}.k"), dim, dim),
            v: Linear::new(&format!("{prefix}.v"), dim, dim),
            proj: Linear::new(&format!("{prefix}.proj"), dim, dim),
            dim,
            heads,
            scaling,
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for l in [&self.q, &self.k, &self.v, &self.proj] {
            l.specs(out);
        }
    }

    pub fn scale(&self) -> f64 {
        self.scaling.factor(self.dim, self.heads)
    }

    /// Attention probabilities per head for `x[N, C]`.
    pub fn probs<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Vec<Var>> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        attention_probs(tape, q, k, self.heads, self.scale())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let a = attention(tape, q, k, v, self.heads, self.scale())?;
        self.proj.forward(tape, a)
    }

    pub fn macs(&self, n: usize) -> u64 {
        4 * self.q.macs(n) + attention_macs(n, n, self.dim)
    }
}

/// `[N, C]` tokens to a `C x rows x cols` map (row-major token order).
pub fn tokens_to_grid<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, rows: usize, cols: usize) -> Result<Var> {
    let n = tape.shape(x)[0];
    if rows * cols != n {
        return Err(Error::Layout { rows, cols, tokens: n });
    }
    let c = tape.shape(x)[1];
    let t = tape.transpose(x)?;
    tape.reshape(t, &[c, rows, cols])
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens<T: Scalar>(tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| StandardNormal.sample(rng)).unwrap()
    }

    fn store_for(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for sp in specs {
            let v = if sp.kind == ParamKind::Buffer && sp.name.ends_with("var") {
                Tensor::from_fn(&sp.shape, |_| 0.5 + rand::Rng::random::<f64>(rng)).unwrap()
            } else {
                randn(&sp.shape, rng)
            };
            s.insert(&sp.name, v, sp.kind).unwrap();
        }
        s
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let lin = Linear::new("l", 3, 3);
        let mut s = ParamStore::<f64>::new();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        s.insert("l.weight", eye, ParamKind::Trainable).unwrap();
        s.insert("l.bias", Tensor::zeros(&[3]).unwrap(), ParamKind::Trainable).unwrap();
        let x = Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, -4.0, 5.0, 0.5]).unwrap();
        let mut tape = Tape::with_params(&s);
        let xv = tape.constant(x.clone());
        let y = lin.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &x);

        s.set("l.weight", Tensor::zeros(&[3, 3]).unwrap()).unwrap();
        s.set("l.bias", Tensor::from_f64(&[3], &[7.0, 8.0, 9.0]).unwrap()).unwrap();
        let mut tape = Tape::with_params(&s);
        let xv = tape.constant(x);
        let y = lin.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn linear_matches_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lin = Linear::new("l", 3, 2);
        let mut specs = Vec::new();
        lin.specs(&mut specs);
        let s = store_for(&specs, &mut rng);
        let x = randn(&[4, 3], &mut rng);
        let mut tape = Tape::with_params(&s);
        let xv = tape.constant(x.clone());
        let y = lin.forward(&mut tape, xv).unwrap();
        let w = s.get("l.weight").unwrap().data();
        let b = s.get("l.bias").unwrap().data();
        for r in 0..4 {
            for o in 0..2 {
                let dot: f64 = (0..3).map(|i| x.data()[r * 3 + i] * w[o * 3 + i]).sum::<f64>() + b[o];
                assert!((tape.value(y).data()[r * 2 + o] - dot).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_rejects_width_mismatch() {
        let lin = Linear::new("l", 3, 2);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]).unwrap());
        assert!(matches!(lin.forward(&mut tape, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn layer_norm_definition_and_shift_invariance() {
        let ln = LayerNorm::new("n", 3);
        let mut specs = Vec::new();
        ln.specs(&mut specs);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ParamStore::<f64>::from_specs(&specs, &mut rng).unwrap();
        let mut tape = Tape::with_params(&s);
        let x = tape.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 101.0, 102.0, 103.0]).unwrap());
        let y = ln.forward(&mut tape, x).unwrap();
        let d = tape.value(y).data();
        let mean: f64 = d[..3].iter().sum::<f64>() / 3.0;
        let var: f64 = d[..3].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
        for j in 0..3 {
            assert!((d[j] - d[3 + j]).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ln = LayerNorm::new("n", 5);
        let mut specs = Vec::new();
        ln.specs(&mut specs);
        let s = store_for(&specs, &mut rng);
        let x = randn(&[3, 5], &mut rng);
        let mut tape = Tape::with_params(&s);
        let xv = tape.constant(x.clone());
        let y = ln.forward(&mut tape, xv).unwrap();
        let g = s.get("n.weight").unwrap().data();
        let b = s.get("n.bias").unwrap().data();
        for r in 0..3 {
            let row = &x.data()[r * 5..(r + 1) * 5];
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            for j in 0..5 {
                let want = (row[j] - mean) / (var + 1e-6).sqrt() * g[j] + b[j];
                assert!((tape.value(y).data()[r * 5 + j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn eval_batch_norm_is_closed_form_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bn = BatchNorm::new("bn", 2);
        let mut specs = Vec::new();
        bn.specs(&mut specs);
        let s = store_for(&specs, &mut rng);
        let x = randn(&[2, 3, 3], &mut rng);
        let mut tape = Tape::with_params(&s);
        let xv = tape.constant(x.clone());
        let y = bn.forward(&mut tape, xv).unwrap();
        let (g, b) = (s.get("bn.weight").unwrap().data(), s.get("bn.bias").unwrap().data());
        let (m, v) = (s.get("bn.running_mean").unwrap().data(), s.get("bn.running_var").unwrap().data());
        for c in 0..2 {
            for i in 0..9 {
                let want = (x.data()[c * 9 + i] - m[c]) / (v[c] + 1e-5).sqrt() * g[c] + b[c];
                assert!((tape.value(y).data()[c * 9 + i] - want).abs() < 1e-12);
            }
        }
        assert!(tape.buffer_updates().is_empty());
    }

    #[test]
    fn train_batch_norm_records_running_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bn = BatchNorm::new("bn", 2);
        let mut specs = Vec::new();
        bn.specs(&mut specs);
        let s = ParamStore::<f64>::from_specs(&specs, &mut rng).unwrap();
        let mut tape = Tape::with_params(&s);
        tape.set_norm_mode(NormMode::Train);
        let x = tape.constant(Tensor::from_f64(&[2, 1, 2], &[1.0, 3.0, -2.0, -2.0]).unwrap());
        let y = bn.forward(&mut tape, x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + d[1]).abs() < 1e-12 && d[2] == 0.0 && d[3] == 0.0);
        let ups = tape.buffer_updates();
        assert_eq!(ups.len(), 2);
        // mean 2 -> 0.9*0 + 0.1*2; unbiased var 2 -> 0.9*1 + 0.1*2
        assert!((ups[0].value.data()[0] - 0.2).abs() < 1e-12);
        assert!((ups[1].value.data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 3], &[0.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap());
        let p = adaptive_avg_pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = randn(&[7, 4], &mut rng);
        let x = tape.constant(r.clone());
        let p = adaptive_avg_pool(&mut tape, x).unwrap();
        for c in 0..4 {
            let s: f64 = (0..7).map(|i| r.data()[i * 4 + c]).sum::<f64>() / 7.0;
            assert!((tape.value(p).data()[c] - s).abs() < 1e-6);
        }
    }

    #[test]
    fn mhsa_single_token_and_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let attn = MultiHeadAttention::new("a", 8, 2, AttnScaling::PerHead).unwrap();
        let mut specs = Vec::new();
        attn.specs(&mut specs);
        let s = store_for(&specs, &mut rng);
        let x = randn(&[1, 8], &mut rng);
        let mut tape = Tape::with_params(&s);
        let xv = tape.constant(x);
        let y = attn.forward(&mut tape, xv).unwrap();
        let v = attn.v.forward(&mut tape, xv).unwrap();
        let pv = attn.proj.forward(&mut tape, v).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(pv)).unwrap() < 1e-12);

        let row = randn(&[1, 8], &mut rng);
        let other = randn(&[1, 8], &mut rng);
        let mut d = row.data().to_vec();
        d.extend_from_slice(other.data());
        d.extend_from_slice(row.data());
        let mut tape = Tape::with_params(&s);
        let xv = tape.constant(Tensor::from_f64(&[3, 8], &d).unwrap());
        let y = attn.forward(&mut tape, xv).unwrap();
        let out = tape.value(y).data();
        assert_eq!(&out[..8], &out[16..]);
    }

    #[test]
    fn mhsa_rejects_indivisible_heads() {
        assert!(matches!(
            MultiHeadAttention::new("a", 10, 3, AttnScaling::PerHead),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grid_round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[6, 4], &mut rng);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let g = tokens_to_grid(&mut tape, xv, 2, 3).unwrap();
        assert_eq!(tape.shape(g), &[4, 2, 3]);
        // channel 1 at grid (1, 2) is token 5
        assert_eq!(tape.value(g).data()[6 + 5], x.data()[5 * 4 + 1]);
        let back = grid_to_tokens(&mut tape, g).unwrap();
        assert_eq!(tape.value(back), &x);
        assert!(matches!(tokens_to_grid(&mut tape, xv, 2, 2), Err(Error::Layout { .. })));
    }
}
