#![allow(dead_code)]

//! Brute-force reference implementations: plain nested loops over `f64`,
//! reading parameters by name. Nothing here goes through the tape.

use cstnet::fusion::FusionBlock;
use cstnet::params::{ParamKind, ParamSpec, ParamStore};
use cstnet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Token rows.
pub type Mat = Vec<Vec<f64>>;
/// `[c][y][x]`.
pub type Grid = Vec<Vec<Vec<f64>>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn rand_mat(r: &mut ChaCha8Rng, n: usize, c: usize) -> Mat {
    (0..n).map(|_| (0..c).map(|_| randn(r)).collect()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor<f64> {
    let c = m[0].len();
    Tensor::new(vec![m.len(), c], m.iter().flatten().copied().collect()).unwrap()
}

pub fn from_tensor(t: &Tensor<f64>) -> Mat {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Store with every trainable moved off its init and BN statistics
/// randomised. Weight noise is `1/sqrt(fan_in)` so activations stay O(1)
/// and softmaxes stay away from one-hot.
pub fn noisy_store(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut s = ParamStore::from_specs(specs, &mut r).unwrap();
    for (name, e) in s.iter_mut() {
        let var = name.ends_with("running_var");
        let shape = e.value.shape().to_vec();
        let std = if shape.len() >= 2 { 1.0 / ((e.value.len() / shape[0]) as f64).sqrt() } else { 0.3 };
        for v in e.value.data_mut() {
            if var {
                *v = 0.5 + r.random::<f64>();
            } else if e.kind == ParamKind::Trainable || name.ends_with("running_mean") {
                *v += std * randn(&mut r);
            }
        }
    }
    s
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn map(m: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    m.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn concat(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

pub fn cols(m: &Mat, start: usize, len: usize) -> Mat {
    m.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn to_grid(m: &Mat, rows: usize, cols: usize) -> Grid {
    let c = m[0].len();
    (0..c)
        .map(|ch| (0..rows).map(|y| (0..cols).map(|x| m[y * cols + x][ch]).collect()).collect())
        .collect()
}

pub fn from_grid(g: &Grid) -> Mat {
    let (h, w) = (g[0].len(), g[0][0].len());
    (0..h * w).map(|n| g.iter().map(|ch| ch[n / w][n % w]).collect()).collect()
}

pub fn grid_add(a: &Grid, b: &Grid) -> Grid {
    a.iter()
        .zip(b)
        .map(|(p, q)| p.iter().zip(q).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect()).collect())
        .collect()
}

/// Direct cross-correlation, stride 1, zero padding `(k-1)/2`.
pub fn conv(x: &Grid, w: &[f64], w_shape: &[usize], bias: Option<&[f64]>, groups: usize) -> Grid {
    let (c_out, c_per, k) = (w_shape[0], w_shape[1], w_shape[2]);
    let (h, wd) = (x[0].len(), x[0][0].len());
    let pad = (k - 1) as isize / 2;
    let out_per = c_out / groups;
    let mut out = vec![vec![vec![0.0; wd]; h]; c_out];
    for o in 0..c_out {
        let g = o / out_per;
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for ci in 0..c_per {
                    let ch = g * c_per + ci;
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            acc += w[((o * c_per + ci) * k + ky) * k + kx] * x[ch][sy as usize][sx as usize];
                        }
                    }
                }
                out[o][y][xx] = acc;
            }
        }
    }
    out
}

/// Multi-head attention, one query row and one head at a time.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, scale: f64) -> Mat {
    let c = q[0].len();
    let d = c / heads;
    let mut out = vec![vec![0.0; v[0].len()]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| (0..d).map(|t| qi[h * d + t] * kj[h * d + t]).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                out[i][h * d + t] = e.iter().zip(v).map(|(p, vj)| p / z * vj[h * d + t]).sum();
            }
        }
    }
    out
}

/// Parameter lookups by name against a store.
pub struct P<'a>(pub &'a ParamStore<f64>);

impl P<'_> {
    pub fn t(&self, name: &str) -> &Tensor<f64> {
        self.0.get(name).unwrap_or_else(|_| panic!("missing parameter {name}"))
    }

    pub fn linear(&self, prefix: &str, x: &Mat) -> Mat {
        let w = self.t(&format!("{prefix}.weight"));
        let b = self.t(&format!("{prefix}.bias")).data();
        let (o, i) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                assert_eq!(row.len(), i);
                (0..o).map(|j| b[j] + (0..i).map(|t| w.data()[j * i + t] * row[t]).sum::<f64>()).collect()
            })
            .collect()
    }

    pub fn conv(&self, prefix: &str, x: &Grid, groups: usize) -> Grid {
        let w = self.t(&format!("{prefix}.weight"));
        let b = self.t(&format!("{prefix}.bias"));
        conv(x, w.data(), w.shape(), Some(b.data()), groups)
    }

    pub fn depthwise(&self, prefix: &str, x: &Grid) -> Grid {
        self.conv(prefix, x, x.len())
    }

    pub fn bn(&self, prefix: &str, x: &Grid) -> Grid {
        let g = self.t(&format!("{prefix}.weight")).data();
        let b = self.t(&format!("{prefix}.bias")).data();
        let m = self.t(&format!("{prefix}.running_mean")).data();
        let v = self.t(&format!("{prefix}.running_var")).data();
        x.iter()
            .enumerate()
            .map(|(c, ch)| {
                let s = g[c] / (v[c] + 1e-5).sqrt();
                ch.iter().map(|row| row.iter().map(|&u| (u - m[c]) * s + b[c]).collect()).collect()
            })
            .collect()
    }

    pub fn ln(&self, prefix: &str, x: &Mat) -> Mat {
        let g = self.t(&format!("{prefix}.weight")).data();
        let b = self.t(&format!("{prefix}.bias")).data();
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-6).sqrt();
                row.iter().enumerate().map(|(c, u)| (u - mean) * inv * g[c] + b[c]).collect()
            })
            .collect()
    }

    pub fn mhsa(&self, prefix: &str, x: &Mat, heads: usize) -> Mat {
        let q = self.linear(&format!("{prefix}.q"), x);
        let k = self.linear(&format!("{prefix}.k"), x);
        let v = self.linear(&format!("{prefix}.v"), x);
        let d = x[0].len() / heads;
        let a = attention(&q, &k, &v, heads, 1.0 / (d as f64).sqrt());
        self.linear(&format!("{prefix}.proj"), &a)
    }
}

/// Every intermediate of one fusion block.
#[derive(Clone, Debug)]
pub struct FusionTrace {
    pub xc: Mat,
    pub se: Mat,
    pub lsa: Mat,
    pub cfm: [Mat; 2],
    pub lpu: [Mat; 2],
    pub cam: [Mat; 2],
    pub adj: Mat,
    pub out: [Mat; 2],
}

/// Staged reference for channel fusion, spatial fusion and the final
/// residual, written from the module equations.
pub fn fusion_oracle(p: &P<'_>, layer: usize, template: bool, heads: usize, xr: &Mat, xt: &Mat, g: usize) -> FusionTrace {
    let j = format!("fusion.layer{layer}.jscfm");
    let s = format!("fusion.layer{layer}.sfm");
    let c = xr[0].len();

    let xc = p.linear(&format!("{j}.fuse"), &concat(xr, xt));

    // channel gate
    let n = xc.len() as f64;
    let pooled: Vec<f64> = (0..c).map(|ch| xc.iter().map(|r| r[ch]).sum::<f64>() / n).collect();
    let h = map(&p.linear(&format!("{j}.se.fc1"), &vec![pooled]), relu);
    let gate = map(&p.linear(&format!("{j}.se.fc2"), &h), sigmoid);
    let se: Mat = xc.iter().map(|r| r.iter().enumerate().map(|(ch, v)| v * gate[0][ch]).collect()).collect();

    // local aggregation
    let fc = to_grid(&p.linear(&format!("{j}.lsa.fc_in"), &xc), g, g);
    let mut acc = p.bn(&format!("{j}.lsa.bn1"), &p.conv(&format!("{j}.lsa.conv1"), &fc, 1));
    for k in [3, 5, 7] {
        let d = p.bn(&format!("{j}.lsa.bn{k}"), &p.depthwise(&format!("{j}.lsa.dw{k}"), &fc));
        acc = grid_add(&acc, &d);
    }
    let mixed = p.conv(&format!("{j}.lsa.mix"), &acc, 1);
    let mixed: Grid = mixed.iter().map(|ch| ch.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect()).collect();
    let lsa = p.linear(&format!("{j}.lsa.fc_out"), &from_grid(&mixed));

    let sum = add(&se, &lsa);
    let cat = concat(&add(xr, &sum), &add(xt, &sum));
    let gim = format!("{j}.{}_gim", if template { "template" } else { "search" });
    let mlp = p.linear(&format!("{gim}.fc2"), &map(&p.linear(&format!("{gim}.fc1"), &cat), gelu));
    let y = add(&cat, &mlp);
    let cfm = [cols(&y, 0, c), cols(&y, c, c)];

    // local perception
    let lpu = [0, 1].map(|m| add(&cfm[m], &from_grid(&p.depthwise(&format!("{s}.lpu"), &to_grid(&cfm[m], g, g)))));

    // cross attention with swapped keys and values
    let names = ["rgb", "tir"];
    let mut res = Vec::new();
    let mut q = Vec::new();
    let mut kv = Vec::new();
    for m in 0..2 {
        let e = map(&p.linear(&format!("{s}.cam.expand"), &lpu[m]), relu);
        res.push(cols(&e, 0, c));
        let a = cols(&e, c, c);
        q.push(p.linear(&format!("{s}.cam.q_{}", names[m]), &a));
        let kvm = p.linear(&format!("{s}.cam.kv_{}", names[m]), &a);
        kv.push((cols(&kvm, 0, c), cols(&kvm, c, c)));
    }
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let cross = [
        attention(&q[0], &kv[1].0, &kv[1].1, heads, scale),
        attention(&q[1], &kv[0].0, &kv[0].1, heads, scale),
    ];
    let cam = [0, 1].map(|m| {
        let o = p.linear(&format!("{s}.cam.out"), &add(&cross[m], &res[m]));
        p.ln(&format!("{s}.cam.ln_{}", names[m]), &add(&cfm[m], &o))
    });

    // convolutional feed-forward on the summed modalities
    let x = to_grid(&add(&cam[0], &cam[1]), g, g);
    let f = format!("{s}.cfn");
    let local = grid_add(&grid_add(&x, &p.depthwise(&format!("{f}.dw1"), &x)), &p.depthwise(&format!("{f}.dw3"), &x));
    let up = p.conv(&format!("{f}.up"), &local, 1);
    let up: Grid = up.iter().map(|ch| ch.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect()).collect();
    let act = grid_add(&local, &p.conv(&format!("{f}.down"), &up, 1));
    let adj = from_grid(&p.bn(
        &format!("{f}.bn"),
        &grid_add(&p.conv(&format!("{f}.adj"), &act, 1), &p.conv(&format!("{f}.res"), &act, 1)),
    ));

    let out = [add(&adj, xr), add(&adj, xt)];
    FusionTrace { xc, se, lsa, cfm, lpu, cam, adj, out }
}

pub fn fusion_store(fb: &FusionBlock, seed: u64) -> ParamStore<f64> {
    let mut specs = Vec::new();
    fb.specs(&mut specs);
    noisy_store(&specs, seed)
}

pub fn rand_grid(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Grid {
    (0..c).map(|_| (0..h).map(|_| (0..w).map(|_| randn(r)).collect()).collect()).collect()
}

fn grid_tensor(g: &Grid) -> Tensor<f64> {
    let shape = vec![g.len(), g[0].len(), g[0][0].len()];
    Tensor::new(shape, g.iter().flatten().flatten().copied().collect()).unwrap()
}

/// Largest deviation of the library convolution from [`conv`], on both the
/// tensor kernel and the tape op.
pub fn conv_case_error(seed: u64, c_in: usize, c_out: usize, hw: (usize, usize), k: usize, groups: usize) -> f64 {
    let mut r = rng(seed);
    let x = rand_grid(&mut r, c_in, hw.0, hw.1);
    let shape = [c_out, c_in / groups, k, k];
    let w: Vec<f64> = (0..shape.iter().product()).map(|_| randn(&mut r)).collect();
    let b: Vec<f64> = (0..c_out).map(|_| randn(&mut r)).collect();
    let want = conv(&x, &w, &shape, Some(&b), groups);

    let xt = grid_tensor(&x);
    let wt = Tensor::new(shape.to_vec(), w).unwrap();
    let bt = Tensor::new(vec![c_out], b).unwrap();
    let direct = xt.conv2d(&wt, Some(&bt), groups, (k - 1) / 2).unwrap();
    let mut tape = cstnet::autodiff::Tape::<f64>::new();
    let (xv, wv, bv) = (tape.constant(xt), tape.constant(wt), tape.constant(bt));
    let taped = tape.conv2d(xv, wv, Some(bv), groups, (k - 1) / 2).unwrap();
    let flat: Vec<f64> = want.iter().flatten().flatten().copied().collect();
    let err = |t: &Tensor<f64>| {
        assert_eq!(t.shape(), &[c_out, hw.0, hw.1]);
        t.data().iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    err(&direct).max(err(tape.value(taped)))
}

pub fn mhsa_case_error(seed: u64, n: usize, c: usize, heads: usize) -> f64 {
    use cstnet::nn::{AttnScaling, MultiHeadAttention};
    let attn = MultiHeadAttention::new("attn", c, heads, AttnScaling::PerHead).unwrap();
    let mut specs = Vec::new();
    attn.specs(&mut specs);
    let store = noisy_store(&specs, seed);
    let x = rand_mat(&mut rng(seed ^ 0x5eed), n, c);
    let want = P(&store).mhsa("attn", &x, heads);
    let mut tape = cstnet::autodiff::Tape::with_params(&store);
    let xv = tape.constant(to_tensor(&x));
    let y = attn.forward(&mut tape, xv).unwrap();
    max_diff(&from_tensor(tape.value(y)), &want)
}

/// Queries from one token set attending over a different one.
pub fn cross_case_error(seed: u64, nq: usize, nk: usize, c: usize, heads: usize) -> f64 {
    let mut r = rng(seed);
    let (q, k, v) = (rand_mat(&mut r, nq, c), rand_mat(&mut r, nk, c), rand_mat(&mut r, nk, c));
    let scale = 1.0 / (c as f64).sqrt();
    let want = attention(&q, &k, &v, heads, scale);
    let mut tape = cstnet::autodiff::Tape::<f64>::new();
    let (qv, kv, vv) = (tape.constant(to_tensor(&q)), tape.constant(to_tensor(&k)), tape.constant(to_tensor(&v)));
    let y = cstnet::nn::attention(&mut tape, qv, kv, vv, heads, scale).unwrap();
    max_diff(&from_tensor(tape.value(y)), &want)
}

/// Per-stage deviation of one library fusion block from [`fusion_oracle`].
pub fn fusion_case_errors(cfg: &cstnet::config::ModelConfig, seed: u64, template: bool) -> Vec<(&'static str, f64)> {
    use cstnet::autodiff::Tape;
    use cstnet::backbone::{Region, Stream, TokenMatrix};
    let fb = FusionBlock::new(1, cfg);
    let store = fusion_store(&fb, seed);
    let g = if template { cfg.template_grid() } else { cfg.search_grid() };
    let region = if template { Region::Template } else { Region::Search };
    let mut r = rng(seed.wrapping_add(1000));
    let (xr, xt) = (rand_mat(&mut r, g * g, cfg.dim), rand_mat(&mut r, g * g, cfg.dim));
    let want = fusion_oracle(&P(&store), 1, template, cfg.cam_heads, &xr, &xt, g);

    let mut tape = Tape::with_params(&store);
    let vr = tape.constant(to_tensor(&xr));
    let vt = tape.constant(to_tensor(&xt));
    let tr = TokenMatrix::new(&tape, vr, g, g, Stream::Rgb, region).unwrap();
    let tt = TokenMatrix::new(&tape, vt, g, g, Stream::Tir, region).unwrap();
    let xc = fb.jscfm.fused(&mut tape, &tr, &tt).unwrap();
    let se = fb.jscfm.se.forward(&mut tape, xc).unwrap();
    let lsa = fb.jscfm.lsa.forward(&mut tape, &tr.with_var(xc)).unwrap();
    let (cr, ct) = fb.jscfm.forward(&mut tape, &tr, &tt).unwrap();
    let lpu = [fb.sfm.lpu(&mut tape, &cr).unwrap(), fb.sfm.lpu(&mut tape, &ct).unwrap()];
    let (ar, at) = fb.sfm.cam(&mut tape, &cr, &ct).unwrap();
    let adj = fb.sfm.shared_adjustment(&mut tape, &cr, &ct).unwrap();
    let (or, ot) = fb.forward(&mut tape, &tr, &tt).unwrap();

    let d = |v, m: &Mat| max_diff(&from_tensor(tape.value(v)), m);
    vec![
        ("fuse", d(xc, &want.xc)),
        ("se", d(se, &want.se)),
        ("lsa", d(lsa, &want.lsa)),
        ("gim_rgb", d(cr.var, &want.cfm[0])),
        ("gim_tir", d(ct.var, &want.cfm[1])),
        ("lpu_rgb", d(lpu[0], &want.lpu[0])),
        ("lpu_tir", d(lpu[1], &want.lpu[1])),
        ("cam_rgb", d(ar, &want.cam[0])),
        ("cam_tir", d(at, &want.cam[1])),
        ("cfn", d(adj, &want.adj)),
        ("out_rgb", d(or.var, &want.out[0])),
        ("out_tir", d(ot.var, &want.out[1])),
    ]
}

/// Monolithic per-head attention over the joint `[X; Z]` sequence of a
/// random model's first block against the four-block assembly.
pub fn block_structure_residual(cfg: &cstnet::config::ModelConfig, seed: u64) -> f64 {
    use cstnet::autodiff::Tape;
    use cstnet::backbone::block_attention_structure;
    use cstnet::model::Architecture;
    let arch = Architecture::new(cfg).unwrap();
    let params = noisy_store(&arch.specs(), seed);
    let blk = &arch.backbone.blocks[0];
    let nx = cfg.search_grid().pow(2);
    let nz = cfg.template_grid().pow(2);
    let mut r = rng(seed);
    let mut tape = Tape::with_params(&params);
    let x = tape.constant(to_tensor(&rand_mat(&mut r, nx + nz, cfg.dim)));
    let h = blk.norm1.forward(&mut tape, x).unwrap();
    let probs = blk.attn.probs(&mut tape, h).unwrap();
    let q = blk.attn.q.forward(&mut tape, h).unwrap();
    let k = blk.attn.k.forward(&mut tape, h).unwrap();
    let d = cfg.dim / cfg.heads;
    let mut worst = 0.0f64;
    for (i, p) in probs.iter().enumerate() {
        let qh = tape.slice_cols(q, i * d, d).unwrap();
        let kh = tape.slice_cols(k, i * d, d).unwrap();
        let assembled = block_attention_structure(tape.value(qh), tape.value(kh), nx, blk.attn.scale()).unwrap();
        worst = worst.max(tape.value(*p).max_abs_diff(&assembled).unwrap());
    }
    worst
}
