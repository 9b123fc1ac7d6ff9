//! Modality summation, the fully convolutional center head, and box
//! decoding/encoding on its `S x S` grid.

use crate::autodiff::{Tape, Var};
use crate::backbone::{grid_of, Region, TokenMatrix};
use crate::bbox::BoundingBox;
use crate::config::ModelConfig;
use crate::error::{contract, Error, Result};
use crate::nn::{BatchNorm, Conv2d};
use crate::params::ParamSpec;
use crate::tensor::{Scalar, Tensor};

/// `X_r + X_t` over the final search tokens.
pub fn fuse_search_outputs<T: Scalar>(tape: &mut Tape<'_, T>, xr: &TokenMatrix, xt: &TokenMatrix) -> Result<TokenMatrix> {
    if xr.region != Region::Search || xt.region != Region::Search {
        return Err(contract("head input must be search-region tokens"));
    }
    let v = tape.add(xr.var, xt.var)?;
    Ok(xr.with_var(v))
}

/// Stacked 3x3 Conv-BN-ReLU stages followed by a 1x1 projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub stages: Vec<(Conv2d, BatchNorm)>,
    pub out: Conv2d,
}

impl Branch {
    pub fn new(prefix: &str, schedule: &[usize], out_ch: usize) -> Self {
        let stages = schedule
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    Conv2d::new(&format!("{prefix}.conv{}", i + 1), w[0], w[1], 3, 1),
                    BatchNorm::new(&format!("{prefix}.bn{}", i + 1), w[1]),
                )
            })
            .collect();
        Self {
            stages,
            out: Conv2d::pointwise(&format!("{prefix}.out"), *schedule.last().unwrap(), out_ch),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for (c, b) in &self.stages {
            c.specs(out);
            b.specs(out);
        }
        self.out.specs(out);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, mut x: Var) -> Result<Var> {
        for (c, b) in &self.stages {
            x = c.forward(tape, x)?;
            x = b.forward(tape, x)?;
            x = tape.relu(x);
        }
        self.out.forward(tape, x)
    }

    pub fn macs(&self, s: usize) -> u64 {
        self.stages.iter().map(|(c, _)| c.macs(s, s)).sum::<u64>() + self.out.macs(s, s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterHead {
    pub grid: usize,
    pub score: Branch,
    pub offset: Branch,
    pub size: Branch,
}

/// Head maps on the tape: sigmoid score `[1,S,S]`, raw offset `[2,S,S]`,
/// sigmoid size `[2,S,S]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub score: Var,
    pub offset: Var,
    pub size: Var,
}

impl CenterHead {
    pub fn new(cfg: &ModelConfig) -> Self {
        let sched = cfg.head_schedule();
        Self {
            grid: cfg.search_grid(),
            score: Branch::new("head.score", &sched, 1),
            offset: Branch::new("head.offset", &sched, 2),
            size: Branch::new("head.size", &sched, 2),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.score.specs(out);
        self.offset.specs(out);
        self.size.specs(out);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, mixed: &TokenMatrix) -> Result<HeadVars> {
        if (mixed.rows, mixed.cols) != (self.grid, self.grid) {
            return Err(Error::Layout {
                rows: self.grid,
                cols: self.grid,
                tokens: mixed.tokens(),
            });
        }
        let g = grid_of(tape, mixed)?;
        let s = self.score.forward(tape, g)?;
        let score = tape.sigmoid(s);
        let offset = self.offset.forward(tape, g)?;
        let z = self.size.forward(tape, g)?;
        let size = tape.sigmoid(z);
        Ok(HeadVars { score, offset, size })
    }

    pub fn macs(&self) -> u64 {
        self.score.macs(self.grid) + self.offset.macs(self.grid) + self.size.macs(self.grid)
    }
}

/// Materialized head maps.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs<T = f32> {
    pub score: Tensor<T>,
    pub offset: Tensor<T>,
    pub size: Tensor<T>,
}

impl<T: Scalar> HeadOutputs<T> {
    pub fn from_tape(tape: &Tape<'_, T>, h: &HeadVars) -> Self {
        Self {
            score: tape.value(h.score).clone(),
            offset: tape.value(h.offset).clone(),
            size: tape.value(h.size).clone(),
        }
    }

    pub fn grid(&self) -> usize {
        self.score.shape()[1]
    }

    pub fn validate(&self) -> Result<usize> {
        let s = self.grid();
        if self.score.shape() != [1, s, s] || self.offset.shape() != [2, s, s] || self.size.shape() != [2, s, s] {
            return Err(Error::Shape(self.offset.shape().to_vec()));
        }
        Ok(s)
    }
}

/// Flat index of the maximum; ties resolve to the smallest index.
pub fn argmax<T: Scalar>(data: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    best
}

const OFFSET_MAX: f64 = 1.0 - f64::EPSILON;

/// Box at the highest-scoring cell, in search-crop pixels, and its score.
pub fn decode_box<T: Scalar>(h: &HeadOutputs<T>, search_side: f64) -> Result<(BoundingBox, f64)> {
    let s = h.validate()?;
    let plane = s * s;
    let idx = argmax(h.score.data());
    let (i, j) = (idx / s, idx % s);
    let at = |t: &Tensor<T>, ch: usize| t.data()[ch * plane + idx].f64();
    let ox = at(&h.offset, 0).clamp(0.0, OFFSET_MAX);
    let oy = at(&h.offset, 1).clamp(0.0, OFFSET_MAX);
    let sf = s as f64;
    let cx = (j as f64 + ox) / sf * search_side;
    let cy = (i as f64 + oy) / sf * search_side;
    let w = at(&h.size, 0) * search_side;
    let hh = at(&h.size, 1) * search_side;
    Ok((BoundingBox::from_center(cx, cy, w, hh), at(&h.score, 0)))
}

/// Grid cell `(row, col)` that owns a normalized center.
pub fn center_cell(cx: f64, cy: f64, s: usize) -> (usize, usize) {
    let cell = |v: f64| ((v * s as f64).floor().max(0.0) as usize).min(s - 1);
    (cell(cy), cell(cx))
}

/// Maps that decode exactly to `gt` (crop pixels): one-hot score, and the
/// offset/size of the owning cell.
pub fn encode_box<T: Scalar>(gt: &BoundingBox, s: usize, search_side: f64) -> Result<HeadOutputs<T>> {
    gt.validate()?;
    let (cx, cy) = gt.center();
    let (nx, ny) = (cx / search_side, cy / search_side);
    let (i, j) = center_cell(nx, ny, s);
    let plane = s * s;
    let idx = i * s + j;
    let mut score = Tensor::zeros(&[1, s, s])?;
    score.data_mut()[idx] = T::one();
    let mut offset = Tensor::zeros(&[2, s, s])?;
    offset.data_mut()[idx] = T::of(nx * s as f64 - j as f64);
    offset.data_mut()[plane + idx] = T::of(ny * s as f64 - i as f64);
    let mut size = Tensor::zeros(&[2, s, s])?;
    size.data_mut()[idx] = T::of(gt.w / search_side);
    size.data_mut()[plane + idx] = T::of(gt.h / search_side);
    Ok(HeadOutputs { score, offset, size })
}
