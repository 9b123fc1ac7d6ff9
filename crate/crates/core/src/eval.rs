//! PR / NPR / SR tracking metrics and the plain-text box format.

use std::fmt::Write as _;
use std::path::Path;

use crate::bbox::BoundingBox;
use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub summary: f64,
}

impl MetricCurve {
    pub fn is_nondecreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn is_nonincreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[0] >= w[1])
    }

    pub fn at(&self, tau: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| t == tau).map(|i| self.values[i])
    }

    /// `tau,value` lines.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (t, v) in self.thresholds.iter().zip(&self.values) {
            writeln!(s, "{t},{v}").unwrap();
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuccessCompare {
    AtLeast,
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub pr_threshold: f64,
    pub success: SuccessCompare,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pr_threshold: 20.0,
            success: SuccessCompare::AtLeast,
        }
    }
}

fn aligned(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(contract(format!("prediction has {} frames, ground truth {}", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(contract("no frames to evaluate"));
    }
    Ok(())
}

pub fn center_error(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

pub fn normalized_center_error(pred: &BoundingBox, gt: &BoundingBox) -> Result<f64> {
    gt.validate()?;
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    Ok(((px - gx) / gt.w).hypot((py - gy) / gt.h))
}

fn fraction(errs: &[f64], pass: impl Fn(f64) -> bool) -> f64 {
    errs.iter().filter(|&&e| pass(e)).count() as f64 / errs.len() as f64
}

pub fn pr_thresholds() -> Vec<f64> {
    (0..=50).map(|k| k as f64).collect()
}

pub fn npr_thresholds() -> Vec<f64> {
    (0..=50).map(|k| k as f64 / 100.0).collect()
}

pub fn sr_thresholds() -> Vec<f64> {
    (0..=20).map(|k| k as f64 / 20.0).collect()
}

/// Fraction of frames with center distance `<= tau` pixels.
pub fn precision_curve(pred: &[BoundingBox], gt: &[BoundingBox], summary_at: f64) -> Result<MetricCurve> {
    aligned(pred, gt)?;
    let errs: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| center_error(p, g)).collect();
    let thresholds = pr_thresholds();
    let values = thresholds.iter().map(|&t| fraction(&errs, |e| e <= t)).collect();
    Ok(MetricCurve {
        summary: fraction(&errs, |e| e <= summary_at),
        thresholds,
        values,
    })
}

pub const NPR_MAX: f64 = 0.5;

/// Size-normalized precision; summary is the exact area under the
/// continuous curve on `[0, 0.5]`, divided by 0.5.
pub fn normalized_precision_curve(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<MetricCurve> {
    aligned(pred, gt)?;
    let errs: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| normalized_center_error(p, g)).collect::<Result<_>>()?;
    let thresholds = npr_thresholds();
    let values = thresholds.iter().map(|&t| fraction(&errs, |e| e <= t)).collect();
    let summary = errs.iter().map(|&e| (NPR_MAX - e.min(NPR_MAX)) / NPR_MAX).sum::<f64>() / errs.len() as f64;
    Ok(MetricCurve { thresholds, values, summary })
}

/// Fraction of frames whose IoU passes each overlap threshold; summary is
/// the plain mean over the 21 thresholds.
pub fn success_curve(pred: &[BoundingBox], gt: &[BoundingBox], cmp: SuccessCompare) -> Result<MetricCurve> {
    aligned(pred, gt)?;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let thresholds = sr_thresholds();
    let values: Vec<f64> = thresholds
        .iter()
        .map(|&t| match cmp {
            SuccessCompare::AtLeast => fraction(&ious, |v| v >= t),
            SuccessCompare::Strict => fraction(&ious, |v| v > t),
        })
        .collect();
    let summary = values.iter().sum::<f64>() / values.len() as f64;
    Ok(MetricCurve { thresholds, values, summary })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub config: EvalConfig,
    pub pr: MetricCurve,
    pub npr: MetricCurve,
    pub sr: MetricCurve,
}

pub fn evaluate(pred: &[BoundingBox], gt: &[BoundingBox], config: EvalConfig) -> Result<EvalReport> {
    let pr = precision_curve(pred, gt, config.pr_threshold)?;
    let npr = normalized_precision_curve(pred, gt)?;
    let sr = success_curve(pred, gt, config.success)?;
    if !pr.is_nondecreasing() || !npr.is_nondecreasing() || !sr.is_nonincreasing() {
        return Err(Error::NumericDomain("metric curve lost monotonicity".into()));
    }
    Ok(EvalReport {
        frames: gt.len(),
        config,
        pr,
        npr,
        sr,
    })
}

impl EvalReport {
    pub fn text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "frames={}", self.frames).unwrap();
        writeln!(s, "pr={:.6}", self.pr.summary).unwrap();
        writeln!(s, "npr={:.6}", self.npr.summary).unwrap();
        writeln!(s, "sr={:.6}", self.sr.summary).unwrap();
        writeln!(s, "pr.threshold_px={}", self.config.pr_threshold).unwrap();
        writeln!(s, "pr.compare=le").unwrap();
        writeln!(s, "npr.normalization=gt_wh").unwrap();
        writeln!(s, "npr.summary=auc_0_0.5").unwrap();
        let cmp = match self.config.success {
            SuccessCompare::AtLeast => "ge",
            SuccessCompare::Strict => "gt",
        };
        writeln!(s, "sr.compare={cmp}").unwrap();
        writeln!(s, "sr.summary=mean_21").unwrap();
        s
    }
}

pub fn parse_boxes(text: &str) -> Result<Vec<BoundingBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse(format!("line {}: not a number in {line:?}", n + 1)))?;
        if v.len() != 4 {
            return Err(Error::Parse(format!("line {}: expected x,y,w,h", n + 1)));
        }
        out.push(BoundingBox::new(v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

pub fn format_boxes(boxes: &[BoundingBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        writeln!(s, "{},{},{},{}", b.x, b.y, b.w, b.h).unwrap();
    }
    s
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoundingBox>> {
    parse_boxes(&std::fs::read_to_string(path)?)
}

pub fn write_boxes(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    std::fs::write(path, format_boxes(boxes))?;
    Ok(())
}
