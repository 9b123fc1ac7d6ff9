//! Cross-modal fusion applied to aligned RGB/TIR token matrices of one region:
//! joint spatial-channel fusion (linear fuse, SE gate, multi-kernel local
//! aggregation, global integration) followed by spatial fusion (local
//! perception, cross attention, convolutional feedforward).

use crate::autodiff::{Tape, Var};
use crate::backbone::{grid_of, Region, Stream, TokenMatrix};
use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::nn::{self, AttnScaling, BatchNorm, Conv2d, LayerNorm, Linear};
use crate::params::ParamSpec;
use crate::tensor::Scalar;

fn check_pair(a: &TokenMatrix, b: &TokenMatrix, op: &str) -> Result<()> {
    if a.region != b.region || a.region == Region::Joint {
        return Err(contract(format!("{op}: inputs must share a template or search region")));
    }
    if a.stream != Stream::Rgb || b.stream != Stream::Tir {
        return Err(contract(format!("{op}: expected (rgb, tir) inputs")));
    }
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(contract(format!("{op}: grids differ")));
    }
    Ok(())
}

fn to_tokens<T: Scalar>(tape: &mut Tape<'_, T>, g: Var) -> Result<Var> {
    nn::grid_to_tokens(tape, g)
}

/// Squeeze-and-excitation gate over token channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Se {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Se {
    pub fn new(prefix: &str, c: usize, ratio: usize) -> Self {
        Self {
            fc1: Linear::new(&format!("{prefix}.fc1"), c, c / ratio),
            fc2: Linear::new(&format!("{prefix}.fc2"), c / ratio, c),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.fc1.specs(out);
        self.fc2.specs(out);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, xc: Var) -> Result<Var> {
        let pooled = nn::adaptive_avg_pool(tape, xc)?;
        let h = self.fc1.forward(tape, pooled)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, h)?;
        let gate = tape.sigmoid(h);
        let gate = tape.reshape(gate, &[self.fc2.out_dim])?;
        tape.mul_row_gate(xc, gate)
    }

    pub fn macs(&self) -> u64 {
        self.fc1.macs(1) + self.fc2.macs(1)
    }
}

/// Local spatial aggregation: pointwise and depthwise {3,5,7} branches on the
/// token grid, summed, mixed by a pointwise conv.
#[derive(Clone, Debug, PartialEq)]
pub struct Lsa {
    pub fc_in: Linear,
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub dw: Vec<(Conv2d, BatchNorm)>,
    pub mix: Conv2d,
    pub fc_out: Linear,
}

impl Lsa {
    pub const KERNELS: [usize; 3] = [3, 5, 7];

    pub fn new(prefix: &str, c: usize) -> Self {
        Self {
            fc_in: Linear::new(&format!("{prefix}.fc_in"), c, c),
            conv1: Conv2d::pointwise(&format!("{prefix}.conv1"), c, c),
            bn1: BatchNorm::new(&format!("{prefix}.bn1"), c),
            dw: Self::KERNELS
                .iter()
                .map(|k| {
                    (
                        Conv2d::depthwise(&format!("{prefix}.dw{k}"), c, *k),
                        BatchNorm::new(&format!("{prefix}.bn{k}"), c),
                    )
                })
                .collect(),
            mix: Conv2d::pointwise(&format!("{prefix}.mix"), c, c),
            fc_out: Linear::new(&format!("{prefix}.fc_out"), c, c),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.fc_in.specs(out);
        self.conv1.specs(out);
        self.bn1.specs(out);
        for (conv, bn) in &self.dw {
            conv.specs(out);
            bn.specs(out);
        }
        self.mix.specs(out);
        self.fc_out.specs(out);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, xc: &TokenMatrix) -> Result<Var> {
        let fc = self.fc_in.forward(tape, xc.var)?;
        let g = grid_of(tape, &xc.with_var(fc))?;
        let b = self.conv1.forward(tape, g)?;
        let mut acc = self.bn1.forward(tape, b)?;
        for (conv, bn) in &self.dw {
            let d = conv.forward(tape, g)?;
            let d = bn.forward(tape, d)?;
            acc = tape.add(acc, d)?;
        }
        let m = self.mix.forward(tape, acc)?;
        let m = tape.gelu(m);
        let t = to_tokens(tape, m)?;
        self.fc_out.forward(tape, t)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let n = h * w;
        self.fc_in.macs(n)
            + self.conv1.macs(h, w)
            + self.dw.iter().map(|(c, _)| c.macs(h, w)).sum::<u64>()
            + self.mix.macs(h, w)
            + self.fc_out.macs(n)
    }
}

/// Global integration: residual MLP over the channel concat, then split.
#[derive(Clone, Debug, PartialEq)]
pub struct Gim {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Gim {
    pub fn new(prefix: &str, c: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(&format!("{prefix}.fc1"), 2 * c, hidden),
            fc2: Linear::new(&format!("{prefix}.fc2"), hidden, 2 * c),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.fc1.specs(out);
        self.fc2.specs(out);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, xr: Var, xt: Var) -> Result<(Var, Var)> {
        let c = tape.shape(xr)[1];
        let cat = tape.concat_cols(&[xr, xt])?;
        let h = self.fc1.forward(tape, cat)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h)?;
        let y = tape.add(cat, h)?;
        Ok((tape.slice_cols(y, 0, c)?, tape.slice_cols(y, c, c)?))
    }

    pub fn macs(&self, n: usize) -> u64 {
        self.fc1.macs(n) + self.fc2.macs(n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Jscfm {
    pub fuse: Linear,
    pub se: Se,
    pub lsa: Lsa,
    pub template_gim: Gim,
    pub search_gim: Gim,
}

impl Jscfm {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.dim;
        Self {
            fuse: Linear::new(&format!("{prefix}.fuse"), 2 * c, c),
            se: Se::new(&format!("{prefix}.se"), c, cfg.se_ratio),
            lsa: Lsa::new(&format!("{prefix}.lsa"), c),
            template_gim: Gim::new(&format!("{prefix}.template_gim"), c, cfg.gim_hidden()),
            search_gim: Gim::new(&format!("{prefix}.search_gim"), c, cfg.gim_hidden()),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.fuse.specs(out);
        self.se.specs(out);
        self.lsa.specs(out);
        self.template_gim.specs(out);
        self.search_gim.specs(out);
    }

    pub fn gim_for(&self, region: Region) -> Result<&Gim> {
        match region {
            Region::Template => Ok(&self.template_gim),
            Region::Search => Ok(&self.search_gim),
            Region::Joint => Err(contract("GIM needs a template or search region")),
        }
    }

    /// `X_c = Linear([X_r, X_t])`.
    pub fn fused<T: Scalar>(&self, tape: &mut Tape<'_, T>, xr: &TokenMatrix, xt: &TokenMatrix) -> Result<Var> {
        let cat = tape.concat_cols(&[xr.var, xt.var])?;
        self.fuse.forward(tape, cat)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, xr: &TokenMatrix, xt: &TokenMatrix) -> Result<(TokenMatrix, TokenMatrix)> {
        check_pair(xr, xt, "jscfm")?;
        let xc = self.fused(tape, xr, xt)?;
        let se = self.se.forward(tape, xc)?;
        let lsa = self.lsa.forward(tape, &xr.with_var(xc))?;
        let add = tape.add(se, lsa)?;
        let rr = tape.add(xr.var, add)?;
        let rt = tape.add(xt.var, add)?;
        let (or, ot) = self.gim_for(xr.region)?.forward(tape, rr, rt)?;
        Ok((xr.with_var(or), xt.with_var(ot)))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let n = h * w;
        self.fuse.macs(n) + self.se.macs() + self.lsa.macs(h, w) + self.template_gim.macs(n)
    }
}

/// Intermediate values of the cross-attention stage.
#[derive(Clone, Copy, Debug)]
pub struct CamParts {
    pub res: [Var; 2],
    pub q: [Var; 2],
    pub k: [Var; 2],
    pub v: [Var; 2],
    pub cross: [Var; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cfn {
    pub dw1: Conv2d,
    pub dw3: Conv2d,
    pub up: Conv2d,
    pub down: Conv2d,
    pub adj: Conv2d,
    pub res: Conv2d,
    pub bn: BatchNorm,
}

impl Cfn {
    pub fn new(prefix: &str, c: usize) -> Self {
        Self {
            dw1: Conv2d::depthwise(&format!("{prefix}.dw1"), c, 1),
            dw3: Conv2d::depthwise(&format!("{prefix}.dw3"), c, 3),
            up: Conv2d::pointwise(&format!("{prefix}.up"), c, 2 * c),
            down: Conv2d::pointwise(&format!("{prefix}.down"), 2 * c, c),
            adj: Conv2d::pointwise(&format!("{prefix}.adj"), c, c),
            res: Conv2d::pointwise(&format!("{prefix}.res"), c, c),
            bn: BatchNorm::new(&format!("{prefix}.bn"), c),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for conv in [&self.dw1, &self.dw3, &self.up, &self.down, &self.adj, &self.res] {
            conv.specs(out);
        }
        self.bn.specs(out);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: &TokenMatrix) -> Result<Var> {
        let g = grid_of(tape, x)?;
        let d1 = self.dw1.forward(tape, g)?;
        let d3 = self.dw3.forward(tape, g)?;
        let local = tape.add(g, d1)?;
        let local = tape.add(local, d3)?;
        let u = self.up.forward(tape, local)?;
        let u = tape.gelu(u);
        let d = self.down.forward(tape, u)?;
        let act = tape.add(local, d)?;
        let a = self.adj.forward(tape, act)?;
        let r = self.res.forward(tape, act)?;
        let s = tape.add(a, r)?;
        let adj = self.bn.forward(tape, s)?;
        to_tokens(tape, adj)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        [&self.dw1, &self.dw3, &self.up, &self.down, &self.adj, &self.res]
            .iter()
            .map(|c| c.macs(h, w))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sfm {
    pub lpu: Conv2d,
    pub expand: Linear,
    pub q: [Linear; 2],
    pub kv: [Linear; 2],
    pub out: Linear,
    pub ln: [LayerNorm; 2],
    pub cfn: Cfn,
    pub dim: usize,
    pub cam_heads: usize,
}

impl Sfm {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.dim;
        let cam = |s: &str| format!("{prefix}.cam.{s}");
        Self {
            lpu: Conv2d::depthwise(&format!("{prefix}.lpu"), c, 3),
            expand: Linear::new(&cam("expand"), c, 2 * c),
            q: [Linear::new(&cam("q_rgb"), c, c), Linear::new(&cam("q_tir"), c, c)],
            kv: [Linear::new(&cam("kv_rgb"), c, 2 * c), Linear::new(&cam("kv_tir"), c, 2 * c)],
            out: Linear::new(&cam("out"), c, c),
            ln: [LayerNorm::new(&cam("ln_rgb"), c), LayerNorm::new(&cam("ln_tir"), c)],
            cfn: Cfn::new(&format!("{prefix}.cfn"), c),
            dim: c,
            cam_heads: cfg.cam_heads,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.lpu.specs(out);
        self.expand.specs(out);
        for l in self.q.iter().chain(&self.kv) {
            l.specs(out);
        }
        self.out.specs(out);
        for ln in &self.ln {
            ln.specs(out);
        }
        self.cfn.specs(out);
    }

    pub fn cam_scale(&self) -> f64 {
        AttnScaling::PerHead.factor(self.dim, self.cam_heads)
    }

    /// `x + DWConv3x3(x)`.
    pub fn lpu<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: &TokenMatrix) -> Result<Var> {
        let g = grid_of(tape, x)?;
        let d = self.lpu.forward(tape, g)?;
        let d = to_tokens(tape, d)?;
        tape.add(x.var, d)
    }

    /// Expansion, projections and the two swapped cross attentions.
    pub fn cross_attention<T: Scalar>(&self, tape: &mut Tape<'_, T>, lpu: [Var; 2]) -> Result<CamParts> {
        let c = self.dim;
        let mut res = [lpu[0]; 2];
        let mut q = res;
        let mut k = res;
        let mut v = res;
        for m in 0..2 {
            let e = self.expand.forward(tape, lpu[m])?;
            let e = tape.relu(e);
            res[m] = tape.slice_cols(e, 0, c)?;
            let attn = tape.slice_cols(e, c, c)?;
            q[m] = self.q[m].forward(tape, attn)?;
            let kv = self.kv[m].forward(tape, attn)?;
            k[m] = tape.slice_cols(kv, 0, c)?;
            v[m] = tape.slice_cols(kv, c, c)?;
        }
        let scale = self.cam_scale();
        let cross = [
            nn::attention(tape, q[0], k[1], v[1], self.cam_heads, scale)?,
            nn::attention(tape, q[1], k[0], v[0], self.cam_heads, scale)?,
        ];
        Ok(CamParts { res, q, k, v, cross })
    }

    /// Per-modality `LN_m(x_m + Linear_out(cross_m + res_m))`, LPU applied first.
    pub fn cam<T: Scalar>(&self, tape: &mut Tape<'_, T>, xr: &TokenMatrix, xt: &TokenMatrix) -> Result<(Var, Var)> {
        check_pair(xr, xt, "cam")?;
        let lpu = [self.lpu(tape, xr)?, self.lpu(tape, xt)?];
        let parts = self.cross_attention(tape, lpu)?;
        let mut outs = [xr.var; 2];
        for (m, x) in [xr.var, xt.var].into_iter().enumerate() {
            let s = tape.add(parts.cross[m], parts.res[m])?;
            let o = self.out.forward(tape, s)?;
            let o = tape.add(x, o)?;
            outs[m] = self.ln[m].forward(tape, o)?;
        }
        Ok((outs[0], outs[1]))
    }

    /// Shared adjustment term `X_rt^adj` from the JSCFM outputs.
    pub fn shared_adjustment<T: Scalar>(&self, tape: &mut Tape<'_, T>, xr_cfm: &TokenMatrix, xt_cfm: &TokenMatrix) -> Result<Var> {
        let (ar, at) = self.cam(tape, xr_cfm, xt_cfm)?;
        let sum = tape.add(ar, at)?;
        self.cfn.forward(tape, &xr_cfm.with_var(sum))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        xr_cfm: &TokenMatrix,
        xt_cfm: &TokenMatrix,
        xr: &TokenMatrix,
        xt: &TokenMatrix,
    ) -> Result<(TokenMatrix, TokenMatrix)> {
        check_pair(xr, xt, "sfm")?;
        if xr_cfm.region != xr.region || (xr_cfm.rows, xr_cfm.cols) != (xr.rows, xr.cols) {
            return Err(contract("sfm: fused and original tokens differ in region or grid"));
        }
        let adj = self.shared_adjustment(tape, xr_cfm, xt_cfm)?;
        let or = tape.add(adj, xr.var)?;
        let ot = tape.add(adj, xt.var)?;
        Ok((xr.with_var(or), xt.with_var(ot)))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let n = h * w;
        let per_modality = self.lpu.macs(h, w)
            + self.expand.macs(n)
            + self.q[0].macs(n)
            + self.kv[0].macs(n)
            + nn::attention_macs(n, n, self.dim)
            + self.out.macs(n);
        2 * per_modality + self.cfn.macs(h, w)
    }
}

/// JSCFM followed by SFM at one insertion point.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBlock {
    pub layer: usize,
    pub jscfm: Jscfm,
    pub sfm: Sfm,
}

impl FusionBlock {
    pub fn new(layer: usize, cfg: &ModelConfig) -> Self {
        let prefix = format!("fusion.layer{layer}");
        Self {
            layer,
            jscfm: Jscfm::new(&format!("{prefix}.jscfm"), cfg),
            sfm: Sfm::new(&format!("{prefix}.sfm"), cfg),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.jscfm.specs(out);
        self.sfm.specs(out);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, xr: &TokenMatrix, xt: &TokenMatrix) -> Result<(TokenMatrix, TokenMatrix)> {
        let (cr, ct) = self.jscfm.forward(tape, xr, xt)?;
        self.sfm.forward(tape, &cr, &ct, xr, xt)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.jscfm.macs(h, w) + self.sfm.macs(h, w)
    }
}
