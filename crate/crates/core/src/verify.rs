//! Model-level verification: the 64-bit gradient check, structural
//! identities of the fusion path, and the quick self-test battery.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tape;
use crate::backbone::{Region, Stream, TokenMatrix};
use crate::bbox::BoundingBox;
use crate::checkpoint::{transfer_to_small, Checkpoint};
use crate::config::{ModelConfig, Variant};
use crate::cost::CostReport;
use crate::error::{contract, Result};
use crate::eval::{evaluate, success_curve, EvalConfig, SuccessCompare};
use crate::fusion::FusionBlock;
use crate::gradcheck::{finite_diff_check_piecewise, sample_coords, GradCheckReport, SampleResult};
use crate::loss::total_loss_graph_with;
use crate::model::{build_model, Model};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::train::{overfit_scene, synthetic_batch};

/// Name fragments the gradient check must sample at least once.
pub const GRADCHECK_COVER: [&str; 8] = [".se.", ".lsa.", "_gim.", ".lpu.", ".cam.", ".cfn.", "head.", "backbone."];

pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Central differences of the total loss against tape gradients, in f64,
/// on one synthetic training pair. Coordinates whose probes cross a kink
/// are redrawn from the same pool.
pub fn model_gradcheck(cfg: &ModelConfig, samples: usize, seed: u64, step: f64) -> Result<GradCheckReport> {
    let mut model = build_model::<f64>(cfg, seed)?;
    perturb_trainables(&mut model.params, GRADCHECK_JITTER, seed);
    let (_, batch) = synthetic_batch(cfg, &overfit_scene(), seed, 1)?;
    let sample = &batch[0];
    let input = sample.input.cast::<f64>();
    let heat = sample.heatmap.cast::<f64>();
    let cover: Vec<&str> = GRADCHECK_COVER
        .iter()
        .copied()
        .filter(|p| cfg.variant == Variant::Full || !FUSION_ONLY.contains(p))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let dim = cfg.dim;
    let keep = |n: &str, i: usize| !shift_invariant(n, i, dim);
    let mut params = model.params.clone();
    // D is a constant of the differentiated function; pin it at the base point
    let mut fixed_d = None;
    let mut objective = |store: &ParamStore<f64>, want: bool| {
        let mut tape = Tape::with_params(store);
        let out = model.forward(&mut tape, &input)?;
        let l = total_loss_graph_with(&mut tape, &out.head, &sample.target, &heat, Default::default(), fixed_d)?;
        fixed_d.get_or_insert(l.wiou_d);
        let loss = tape.value(l.total).item();
        let sig = tape.branch_signature();
        Ok((loss, sig, if want { Some(tape.backward(l.total)?.params()) } else { None }))
    };

    let coords = sample_coords(&model.params, samples, &cover, &mut rng, keep)?;
    let mut report = finite_diff_check_piecewise(&mut params, &coords, step, &mut objective)?;
    let mut smooth: Vec<SampleResult> = Vec::with_capacity(samples);
    let mut kinked = Vec::new();
    for (k, s) in report.samples.drain(..).enumerate() {
        if s.smooth {
            smooth.push(s);
        } else {
            kinked.push((k, s));
        }
    }
    for (k, s) in kinked {
        // coverage slots redraw from their own group
        let pats: Vec<&str> = cover.get(k).into_iter().copied().collect();
        let mut redrawn = None;
        for _ in 0..MAX_REDRAWS {
            let c = sample_coords(&model.params, 1, &pats, &mut rng, keep)?;
            let r = finite_diff_check_piecewise(&mut params, &c, step, &mut objective)?;
            if let Some(x) = r.samples.into_iter().find(|x| x.smooth) {
                redrawn = Some(x);
                break;
            }
        }
        smooth.push(redrawn.unwrap_or(s));
    }
    let max_rel_error = smooth.iter().filter(|s| s.smooth).map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        samples: smooth,
        max_rel_error,
    })
}

const MAX_REDRAWS: usize = 20;

const FUSION_ONLY: [&str; 6] = [".se.", ".lsa.", "_gim.", ".lpu.", ".cam.", ".cfn."];

/// Key-projection biases add the same amount to every logit of a softmax
/// row, so their gradient is identically zero.
pub fn shift_invariant(name: &str, index: usize, dim: usize) -> bool {
    name.ends_with(".attn.k.bias") || ((name.ends_with(".cam.kv_rgb.bias") || name.ends_with(".cam.kv_tir.bias")) && index < dim)
}

/// Relative noise added to every trainable before checking, so no path
/// sits at a symmetric initial point.
pub const GRADCHECK_JITTER: f64 = 0.5;
/// Noise scale for tensors that start at zero.
pub const GRADCHECK_JITTER_FLOOR: f64 = 0.02;

/// `v += scale * max(rms, floor) * z` per tensor, with `rms` the tensor's
/// own root mean square.
pub fn perturb_trainables<T: Scalar>(store: &mut ParamStore<T>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(17));
    for (_, e) in store.iter_mut() {
        if e.kind == ParamKind::Trainable {
            let rms = (e.value.data().iter().map(|v| v.f64().powi(2)).sum::<f64>() / e.value.len() as f64).sqrt();
            let s = scale * rms.max(GRADCHECK_JITTER_FLOOR);
            e.value.data_mut().iter_mut().for_each(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += T::of(s * z);
            });
        }
    }
}

/// Random fusion block, its parameters, and one pair of token matrices.
pub fn random_fusion_instance<T: Scalar>(
    cfg: &ModelConfig,
    seed: u64,
    region: Region,
) -> Result<(FusionBlock, ParamStore<T>, [Tensor<T>; 2], usize)> {
    let fb = FusionBlock::new(1, cfg);
    let mut specs = Vec::new();
    fb.specs(&mut specs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<T>::from_specs(&specs, &mut rng)?;
    for (_, e) in store.iter_mut() {
        if e.kind == ParamKind::Trainable {
            e.value.data_mut().iter_mut().for_each(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += T::of(0.3 * z);
            });
        }
    }
    let g = match region {
        Region::Template => cfg.template_grid(),
        _ => cfg.search_grid(),
    };
    let mut x = || Tensor::from_fn(&[g * g, cfg.dim], |_| T::of(StandardNormal.sample(&mut rng)));
    let xs = [x()?, x()?];
    Ok((fb, store, xs, g))
}

/// Runs one fusion block; returns `(out_rgb, out_tir, shared_adj)`.
pub fn fusion_outputs<T: Scalar>(fb: &FusionBlock, store: &ParamStore<T>, xs: &[Tensor<T>; 2], g: usize, region: Region) -> Result<[Tensor<T>; 3]> {
    let run = |adj_only: bool| -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::with_params(store);
        let vr = tape.constant(xs[0].clone());
        let vt = tape.constant(xs[1].clone());
        let xr = TokenMatrix::new(&tape, vr, g, g, Stream::Rgb, region)?;
        let xt = TokenMatrix::new(&tape, vt, g, g, Stream::Tir, region)?;
        if adj_only {
            let (cr, ct) = fb.jscfm.forward(&mut tape, &xr, &xt)?;
            let a = fb.sfm.shared_adjustment(&mut tape, &cr, &ct)?;
            Ok(vec![tape.value(a).clone()])
        } else {
            let (or, ot) = fb.forward(&mut tape, &xr, &xt)?;
            Ok(vec![tape.value(or.var).clone(), tape.value(ot.var).clone()])
        }
    };
    let mut o = run(false)?;
    let a = run(true)?.remove(0);
    let ot = o.pop().unwrap();
    let or = o.pop().unwrap();
    Ok([or, ot, a])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DifferenceCheck {
    /// Largest `|(out_r - out_t) - (x_r - x_t)|` over all entries.
    pub max_abs: f64,
    /// Entries where the two differences are not bit-identical.
    pub mismatched: usize,
    pub total: usize,
    /// `out_m == adj + x_m` bit-for-bit for both streams.
    pub structural: bool,
}

impl DifferenceCheck {
    pub fn exact(&self) -> bool {
        self.mismatched == 0
    }
}

/// Compares the modality difference before and after a fusion block, in
/// the scalar type the block runs in.
pub fn difference_preservation<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<DifferenceCheck> {
    let (fb, store, xs, g) = random_fusion_instance::<T>(cfg, seed, Region::Search)?;
    let [or, ot, adj] = fusion_outputs(&fb, &store, &xs, g, Region::Search)?;
    let d_out = or.sub(&ot)?;
    let d_in = xs[0].sub(&xs[1])?;
    let mismatched = d_out.data().iter().zip(d_in.data()).filter(|(a, b)| a.f64().to_bits() != b.f64().to_bits()).count();
    let structural = adj.add(&xs[0])? == or && adj.add(&xs[1])? == ot;
    Ok(DifferenceCheck {
        max_abs: d_out.max_abs_diff(&d_in)?,
        mismatched,
        total: d_out.len(),
        structural,
    })
}

/// With the second GIM projection zeroed, GIM is concat then split and
/// must return its inputs bit-for-bit.
pub fn gim_split_concat_identity(cfg: &ModelConfig, seed: u64) -> Result<bool> {
    let (fb, mut store, xs, _) = random_fusion_instance::<f32>(cfg, seed, Region::Template)?;
    let gim = &fb.jscfm.template_gim;
    for n in [&gim.fc2.weight, &gim.fc2.bias] {
        store.get_mut(n)?.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::with_params(&store);
    let a = tape.constant(xs[0].clone());
    let b = tape.constant(xs[1].clone());
    let (ra, rb) = gim.forward(&mut tape, a, b)?;
    let cat = tape.concat_cols(&[a, b])?;
    let sa = tape.slice_cols(cat, 0, cfg.dim)?;
    let sb = tape.slice_cols(cat, cfg.dim, cfg.dim)?;
    Ok(tape.value(ra) == &xs[0] && tape.value(rb) == &xs[1] && tape.value(sa) == &xs[0] && tape.value(sb) == &xs[1])
}

/// Full model converted to small vs. the full model run with no fusion.
pub fn transfer_matches_empty_insertion(cfg: &ModelConfig, seed: u64) -> Result<bool> {
    let full_cfg = cfg.clone().with_variant(Variant::Full);
    let full = build_model::<f32>(&full_cfg, seed)?;
    let (small_ck, _) = transfer_to_small(&full.checkpoint());
    let mut small: Model = build_model(&full_cfg.clone().with_variant(Variant::Small), seed.wrapping_add(1))?;
    small.load_checkpoint(&small_ck, true)?;
    let (_, batch) = synthetic_batch(cfg, &overfit_scene(), seed, 1)?;
    let input = &batch[0].input;
    let mut ta = full.tape();
    let a = full.forward_with_insertions(&mut ta, input, &BTreeSet::new())?;
    let mut tb = small.tape();
    let b = small.forward(&mut tb, input)?;
    let same = |x, y| ta.value(x) == tb.value(y);
    Ok(same(a.head.score, b.head.score) && same(a.head.offset, b.head.offset) && same(a.head.size, b.head.size))
}

pub fn checkpoint_round_trip(cfg: &ModelConfig, seed: u64) -> Result<bool> {
    let m = build_model::<f32>(cfg, seed)?;
    let ck = m.checkpoint();
    let back = Checkpoint::from_bytes(&ck.to_bytes())?;
    let mut m2 = build_model::<f32>(cfg, seed.wrapping_add(1))?;
    m2.load_checkpoint(&back, true)?;
    Ok(back == ck && m2.params.checksum() == m.params.checksum() && back.to_bytes() == ck.to_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Cheap invariants that hold by construction.
pub fn selftest(cfg: &ModelConfig, seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    out.push(outcome("iou_reference", {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        let v = a.iou(&BoundingBox::new(1.0, 1.0, 2.0, 2.0));
        Ok((a.iou(&a) == 1.0 && a.iou(&BoundingBox::new(3.0, 3.0, 1.0, 1.0)) == 0.0 && (v - 1.0 / 7.0).abs() < 1e-15, format!("iou={v}")))
    }));
    out.push(outcome("self_evaluation", {
        let g: Vec<_> = (0..10).map(|i| BoundingBox::new(i as f64, 3.0, 10.0 + i as f64, 8.0)).collect();
        evaluate(&g, &g, EvalConfig::default()).map(|r| {
            let s = (r.pr.summary, r.npr.summary, r.sr.summary);
            (s == (1.0, 1.0, 1.0), format!("pr={} npr={} sr={}", s.0, s.1, s.2))
        })
    }));
    out.push(outcome("success_half_overlap", {
        let g = vec![BoundingBox::new(0.0, 0.0, 8.0, 4.0); 3];
        let p = vec![BoundingBox::new(0.0, 0.0, 4.0, 4.0); 3];
        success_curve(&p, &g, SuccessCompare::AtLeast).map(|c| (c.summary == 11.0 / 21.0, format!("sr={}", c.summary)))
    }));
    out.push(outcome("param_difference_is_fusion", {
        CostReport::for_config(&cfg.clone().with_variant(Variant::Full)).and_then(|f| {
            let s = CostReport::for_config(&cfg.clone().with_variant(Variant::Small))?;
            let d = f.total_params - s.total_params;
            Ok((d == f.module_params("fusion"), format!("full-small={d} fusion={}", f.module_params("fusion"))))
        })
    }));
    out.push(outcome("gim_split_concat_identity", gim_split_concat_identity(cfg, seed).map(|b| (b, String::new()))));
    out.push(outcome("shared_adjustment_structure", {
        difference_preservation::<f32>(cfg, seed).map(|d| (d.structural, format!("max_abs_diff_residual={:e}", d.max_abs)))
    }));
    out.push(outcome("checkpoint_round_trip", checkpoint_round_trip(cfg, seed).map(|b| (b, String::new()))));
    out.push(outcome("transfer_equals_no_fusion", transfer_matches_empty_insertion(cfg, seed).map(|b| (b, String::new()))));
    out.push(outcome("strict_load_rejects_fusion_weights", {
        build_model::<f32>(&cfg.clone().with_variant(Variant::Full), seed).and_then(|full| {
            let mut small = build_model::<f32>(&cfg.clone().with_variant(Variant::Small), seed)?;
            let r = small.load_checkpoint(&full.checkpoint(), true);
            Ok((r.is_err(), r.err().map(|e| e.to_string().chars().take(80).collect()).unwrap_or_default()))
        })
    }));
    out
}

pub fn require(outcomes: &[CheckOutcome]) -> Result<()> {
    match outcomes.iter().find(|o| !o.passed) {
        Some(o) => Err(contract(format!("check {} failed: {}", o.name, o.detail))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes_on_tiny() {
        let r = selftest(&ModelConfig::tiny(), 0);
        for o in &r {
            assert!(o.passed, "{} {}", o.name, o.detail);
        }
    }

    #[test]
    fn small_model_gradcheck_skips_fusion_patterns() {
        let cfg = ModelConfig::tiny().with_variant(Variant::Small);
        let r = model_gradcheck(&cfg, 4, 1, GRADCHECK_STEP).unwrap();
        assert_eq!(r.samples.len(), 4);
        assert!(r.samples.iter().all(|s| !s.coord.name.starts_with("fusion")));
    }

    #[test]
    fn difference_residual_is_rounding_sized() {
        let d = difference_preservation::<f64>(&ModelConfig::tiny(), 3).unwrap();
        assert!(d.structural);
        assert!(d.max_abs < 1e-12, "{d:?}");
    }
}
