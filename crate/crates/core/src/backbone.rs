//! Shared-weight ViT over per-modality `[search; template]` token sequences.

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{contract, Error, Result};
use crate::nn::{self, LayerNorm, Linear, MultiHeadAttention, WEIGHT_STD};
use crate::params::{Init, ParamKind, ParamSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Rgb,
    Tir,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Template,
    Search,
    Joint,
}

/// A `[N, C]` tape value together with its token grid and tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenMatrix {
    pub var: Var,
    pub rows: usize,
    pub cols: usize,
    pub stream: Stream,
    pub region: Region,
}

impl TokenMatrix {
    pub fn new<T: Scalar>(tape: &Tape<'_, T>, var: Var, rows: usize, cols: usize, stream: Stream, region: Region) -> Result<Self> {
        let s = tape.shape(var);
        if s.len() != 2 || (region != Region::Joint && s[0] != rows * cols) {
            return Err(Error::Layout { rows, cols, tokens: s[0] });
        }
        Ok(Self {
            var,
            rows,
            cols,
            stream,
            region,
        })
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn with_var(self, var: Var) -> Self {
        Self { var, ..self }
    }
}

/// Splits a `3 x H x W` image into row-major `p x p` patches, one row per
/// patch, each flattened channel-major.
pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(s.to_vec()));
    }
    let (h, w) = (s[1], s[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("image {h}x{w} not divisible by patch {p}")));
    }
    let (gr, gc) = (h / p, w / p);
    let width = 3 * p * p;
    let d = image.data();
    let mut out = Vec::with_capacity(gr * gc * width);
    for r in 0..gr {
        for c in 0..gc {
            for ch in 0..3 {
                for dy in 0..p {
                    let row = ch * h * w + (r * p + dy) * w + c * p;
                    out.extend_from_slice(&d[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![gr * gc, width], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ViTBlock {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.dim;
        Ok(Self {
            norm1: LayerNorm::new(&format!("{prefix}.norm1"), c),
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), c, cfg.heads, cfg.scaling)?,
            norm2: LayerNorm::new(&format!("{prefix}.norm2"), c),
            fc1: Linear::new(&format!("{prefix}.mlp.fc1"), c, c * cfg.mlp_ratio),
            fc2: Linear::new(&format!("{prefix}.mlp.fc2"), c * cfg.mlp_ratio, c),
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm1.specs(out);
        self.attn.specs(out);
        self.norm2.specs(out);
        self.fc1.specs(out);
        self.fc2.specs(out);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let a = self.attn.forward(tape, h)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h)?;
        tape.add(x, h)
    }

    pub fn macs(&self, n: usize) -> u64 {
        self.attn.macs(n) + self.fc1.macs(n) + self.fc2.macs(n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub patch: usize,
    pub dim: usize,
    pub template_grid: usize,
    pub search_grid: usize,
    pub patch_embed: Linear,
    pub pos_template: String,
    pub pos_search: String,
    pub blocks: Vec<ViTBlock>,
}

impl Backbone {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let blocks = (1..=cfg.depth)
            .map(|i| ViTBlock::new(&format!("backbone.block{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch: cfg.patch,
            dim: cfg.dim,
            template_grid: cfg.template_grid(),
            search_grid: cfg.search_grid(),
            patch_embed: Linear::new("backbone.patch_embed", 3 * cfg.patch * cfg.patch, cfg.dim),
            pos_template: "backbone.pos_embed_template".into(),
            pos_search: "backbone.pos_embed_search".into(),
            blocks,
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.patch_embed.specs(out);
        for (name, n) in [(&self.pos_template, self.template_grid.pow(2)), (&self.pos_search, self.search_grid.pow(2))] {
            out.push(ParamSpec {
                name: name.clone(),
                shape: vec![n, self.dim],
                init: Init::TruncNormal(WEIGHT_STD),
                kind: ParamKind::Trainable,
            });
        }
        for b in &self.blocks {
            b.specs(out);
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Patch embedding without positional terms.
    pub fn patch_embed<T: Scalar>(&self, tape: &mut Tape<'_, T>, image: &Tensor<T>) -> Result<Var> {
        let patches = tape.constant(patchify(image, self.patch)?);
        self.patch_embed.forward(tape, patches)
    }

    /// Adds the template or search positional embedding.
    pub fn add_positional<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var, region: Region) -> Result<Var> {
        let name = match region {
            Region::Template => &self.pos_template,
            Region::Search => &self.pos_search,
            Region::Joint => return Err(contract("positional embedding needs a template or search region")),
        };
        let pe = tape.param(name)?;
        tape.add(tokens, pe)
    }

    pub fn embed<T: Scalar>(&self, tape: &mut Tape<'_, T>, image: &Tensor<T>, region: Region, stream: Stream) -> Result<TokenMatrix> {
        let t = self.patch_embed(tape, image)?;
        let t = self.add_positional(tape, t, region)?;
        let g = match region {
            Region::Template => self.template_grid,
            _ => self.search_grid,
        };
        TokenMatrix::new(tape, t, g, g, stream, region)
    }

    /// `H = [X; Z]`.
    pub fn join<T: Scalar>(&self, tape: &mut Tape<'_, T>, search: TokenMatrix, template: TokenMatrix) -> Result<TokenMatrix> {
        if search.region != Region::Search || template.region != Region::Template || search.stream != template.stream {
            return Err(contract("join expects search and template tokens of one stream"));
        }
        let v = tape.concat_rows(&[search.var, template.var])?;
        Ok(TokenMatrix {
            var: v,
            rows: search.tokens() + template.tokens(),
            cols: 1,
            stream: search.stream,
            region: Region::Joint,
        })
    }

    /// Inverse of [`Backbone::join`]: `(search, template)`.
    pub fn split<T: Scalar>(&self, tape: &mut Tape<'_, T>, joint: TokenMatrix) -> Result<(TokenMatrix, TokenMatrix)> {
        let (nx, nz) = (self.search_grid.pow(2), self.template_grid.pow(2));
        if tape.shape(joint.var)[0] != nx + nz {
            return Err(Error::Layout {
                rows: nx + nz,
                cols: 1,
                tokens: tape.shape(joint.var)[0],
            });
        }
        let x = tape.slice_rows(joint.var, 0, nx)?;
        let z = tape.slice_rows(joint.var, nx, nz)?;
        Ok((
            TokenMatrix::new(tape, x, self.search_grid, self.search_grid, joint.stream, Region::Search)?,
            TokenMatrix::new(tape, z, self.template_grid, self.template_grid, joint.stream, Region::Template)?,
        ))
    }

    /// Runs block `i` (1-based).
    pub fn block<T: Scalar>(&self, tape: &mut Tape<'_, T>, i: usize, h: TokenMatrix) -> Result<TokenMatrix> {
        let b = self
            .blocks
            .get(i.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("block {i} outside [1, {}]", self.depth())))?;
        Ok(h.with_var(b.forward(tape, h.var)?))
    }

    pub fn macs(&self) -> u64 {
        let (nz, nx) = (self.template_grid.pow(2), self.search_grid.pow(2));
        let per_stream = self.patch_embed.macs(nz + nx) + self.blocks.iter().map(|b| b.macs(nz + nx)).sum::<u64>();
        2 * per_stream
    }
}

/// Attention matrix of a single-head block assembled from the four
/// region-pair logit blocks `[XX^T, XZ^T; ZX^T, ZZ^T]`.
pub fn block_attention_structure<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, nx: usize, scale: f64) -> Result<Tensor<T>> {
    let (n, c) = q.dims2("block attention")?;
    if k.shape() != q.shape() || nx > n {
        return Err(Error::Dimension {
            op: "block attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let rows = |t: &Tensor<T>, a: usize, b: usize| Tensor::new(vec![b - a, c], t.data()[a * c..b * c].to_vec());
    let (qx, qz) = (rows(q, 0, nx)?, rows(q, nx, n)?);
    let (kx, kz) = (rows(k, 0, nx)?, rows(k, nx, n)?);
    let blocks = [
        [qx.matmul(&kx.transpose()?)?, qx.matmul(&kz.transpose()?)?],
        [qz.matmul(&kx.transpose()?)?, qz.matmul(&kz.transpose()?)?],
    ];
    let mut logits = vec![T::zero(); n * n];
    for (bi, row_blocks) in blocks.iter().enumerate() {
        let r0 = if bi == 0 { 0 } else { nx };
        for (bj, blk) in row_blocks.iter().enumerate() {
            let c0 = if bj == 0 { 0 } else { nx };
            let bc = blk.shape()[1];
            for (r, row) in blk.data().chunks(bc.max(1)).enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    logits[(r0 + r) * n + c0 + j] = v * T::of(scale);
                }
            }
        }
    }
    Tensor::new(vec![n, n], logits)?.softmax_rows()
}

pub(crate) fn grid_of<T: Scalar>(tape: &mut Tape<'_, T>, t: &TokenMatrix) -> Result<Var> {
    nn::tokens_to_grid(tape, t.var, t.rows, t.cols)
}
