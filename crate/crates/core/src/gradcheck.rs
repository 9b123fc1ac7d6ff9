//! Central-difference verification of tape gradients, run in 64-bit mode.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// One scalar coordinate of a named parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coord {
    pub name: String,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct SampleResult {
    pub coord: Coord,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Both probes took the same branches as the base point.
    pub smooth: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub samples: Vec<SampleResult>,
    /// Over smooth samples only.
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&SampleResult> {
        self.samples
            .iter()
            .filter(|s| s.smooth)
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn kinked(&self) -> usize {
        self.samples.iter().filter(|s| !s.smooth).count()
    }
}

pub type ParamGrads = BTreeMap<String, Tensor<f64>>;

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against central differences.
///
/// `f(params, want_grads)` returns the loss and, when asked, the analytic
/// gradient of every parameter it touched. Coordinates missing from the
/// returned map are treated as having zero analytic gradient.
pub fn finite_diff_check<F>(params: &mut ParamStore<f64>, coords: &[Coord], step: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, bool) -> Result<(f64, Option<ParamGrads>)>,
{
    finite_diff_check_piecewise(params, coords, step, |p, w| f(p, w).map(|(l, g)| (l, 0, g)))
}

/// As [`finite_diff_check`], for objectives that also report a branch
/// signature; a probe whose signature differs from the base point crossed a
/// kink and its sample is marked non-smooth.
pub fn finite_diff_check_piecewise<F>(params: &mut ParamStore<f64>, coords: &[Coord], step: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, bool) -> Result<(f64, u64, Option<ParamGrads>)>,
{
    if !(step > 0.0) {
        return Err(contract(format!("finite-difference step must be positive, got {step}")));
    }
    let (base, sig, grads) = f(params, true)?;
    let (again, _, _) = f(params, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Determinism(base, again));
    }
    let grads = grads.ok_or_else(|| contract("objective returned no gradients"))?;

    let mut samples = Vec::with_capacity(coords.len());
    for coord in coords {
        let orig = params.get(&coord.name)?.data()[coord.index];
        params.get_mut(&coord.name)?.data_mut()[coord.index] = orig + step;
        let (plus, sp, _) = f(params, false)?;
        params.get_mut(&coord.name)?.data_mut()[coord.index] = orig - step;
        let (minus, sm, _) = f(params, false)?;
        params.get_mut(&coord.name)?.data_mut()[coord.index] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads
            .get(&coord.name)
            .map(|g| g.data()[coord.index])
            .unwrap_or(0.0);
        samples.push(SampleResult {
            coord: coord.clone(),
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
            smooth: sp == sig && sm == sig,
        });
    }
    let max_rel_error = samples.iter().filter(|s| s.smooth).map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        samples,
        max_rel_error,
    })
}

/// Draws `count` trainable coordinates accepted by `keep`. One coordinate
/// is taken from each group whose name contains the corresponding pattern;
/// the rest pick a tensor uniformly, then an element uniformly.
pub fn sample_coords<R: Rng>(
    store: &ParamStore<f64>,
    count: usize,
    must_cover: &[&str],
    rng: &mut R,
    keep: impl Fn(&str, usize) -> bool,
) -> Result<Vec<Coord>> {
    let names: Vec<(&str, usize)> = store
        .iter()
        .filter(|(_, e)| e.kind == ParamKind::Trainable)
        .map(|(n, e)| (n, e.value.len()))
        .filter(|&(n, len)| (0..len).any(|i| keep(n, i)))
        .collect();
    if names.is_empty() {
        return Err(contract("no trainable parameters to sample"));
    }
    let mut draw = |pool: &[&(&str, usize)]| loop {
        let (n, len) = *pool[rng.random_range(0..pool.len())];
        let index = rng.random_range(0..len);
        if keep(n, index) {
            break Coord { name: n.to_string(), index };
        }
    };
    let mut coords = Vec::with_capacity(count);
    for pat in must_cover {
        let group: Vec<_> = names.iter().filter(|(n, _)| n.contains(pat)).collect();
        if group.is_empty() {
            return Err(contract(format!("no trainable parameter matches {pat}")));
        }
        coords.push(draw(&group));
    }
    let all: Vec<_> = names.iter().collect();
    while coords.len() < count {
        coords.push(draw(&all));
    }
    coords.truncate(count.max(must_cover.len()));
    Ok(coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::from_f64(&[values.len()], values).unwrap(), ParamKind::Trainable)
            .unwrap();
        s
    }

    fn all_coords(n: usize) -> Vec<Coord> {
        (0..n).map(|i| Coord { name: "x".into(), index: i }).collect()
    }

    // f(x) = sum_ij A_ij x_i x_j with A = [[2, 1, 0], [1, 3, -1], [0, -1, 1]]
    fn quadratic(p: &ParamStore<f64>, want: bool, flip: bool) -> Result<(f64, Option<ParamGrads>)> {
        let a = Tensor::from_f64(&[3, 3], &[2.0, 1.0, 0.0, 1.0, 3.0, -1.0, 0.0, -1.0, 1.0])?;
        let mut tape = Tape::with_params(p);
        let x = tape.param("x")?;
        let col = tape.reshape(x, &[3, 1])?;
        let row = tape.reshape(x, &[1, 3])?;
        let am = tape.constant(a);
        let ax = tape.matmul(am, col)?;
        let q = tape.matmul(row, ax)?;
        let loss = tape.sum(q);
        let v = tape.value(loss).item();
        let g = if want {
            let mut g = tape.backward(loss)?.params();
            if flip {
                for t in g.values_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
            }
            Some(g)
        } else {
            None
        };
        Ok((v, g))
    }

    #[test]
    fn quadratic_form_is_exact() {
        let mut p = store(&[0.3, -1.2, 2.0]);
        let r = finite_diff_check(&mut p, &all_coords(3), 1e-4, |p, w| quadratic(p, w, false)).unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn sign_flipped_backward_gives_error_two() {
        let mut p = store(&[0.3, -1.2, 2.0]);
        let r = finite_diff_check(&mut p, &all_coords(3), 1e-4, |p, w| quadratic(p, w, true)).unwrap();
        assert!((r.max_rel_error - 2.0).abs() < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn layer_norm_sum_passes() {
        let mut p = ParamStore::new();
        let vals = [0.4, -1.0, 2.5, 0.1, 0.7, -0.3, 1.9, -2.2];
        p.insert("x", Tensor::from_f64(&[2, 4], &vals).unwrap(), ParamKind::Trainable)
            .unwrap();
        p.insert("g", Tensor::from_f64(&[4], &[1.0, 0.5, -2.0, 1.5]).unwrap(), ParamKind::Trainable)
            .unwrap();
        p.insert("b", Tensor::from_f64(&[4], &[0.1, 0.0, 0.3, -0.2]).unwrap(), ParamKind::Trainable)
            .unwrap();
        // weight the output so the gradient w.r.t. x is not identically zero
        let w = Tensor::from_f64(&[2, 4], &[1.0, -2.0, 0.5, 3.0, -1.5, 0.25, 2.0, -0.75]).unwrap();
        let coords: Vec<Coord> = ["x", "g", "b"]
            .iter()
            .flat_map(|n| {
                let len = p.get(n).unwrap().len();
                (0..len).map(move |i| Coord { name: n.to_string(), index: i })
            })
            .collect();
        let r = finite_diff_check(&mut p, &coords, 1e-4, |p, want| {
            let mut tape = Tape::with_params(p);
            let x = tape.param("x")?;
            let g = tape.param("g")?;
            let b = tape.param("b")?;
            let y = tape.layer_norm(x, g, b, 1e-6)?;
            let wv = tape.constant(w.clone());
            let yw = tape.mul(y, wv)?;
            let loss = tape.sum(yw);
            let v = tape.value(loss).item();
            Ok((v, want.then(|| tape.backward(loss).unwrap().params())))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{:?}", r.worst());
    }

    #[test]
    fn nondeterministic_objective_is_detected() {
        let mut p = store(&[1.0]);
        let mut calls = 0.0;
        let err = finite_diff_check(&mut p, &all_coords(1), 1e-4, |_, _| {
            calls += 1.0;
            Ok((calls, Some(ParamGrads::new())))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Determinism(..)));
    }

    #[test]
    fn kink_crossing_is_flagged() {
        let mut p = store(&[1e-5, 0.5]);
        let r = finite_diff_check_piecewise(&mut p, &all_coords(2), 1e-4, |p, want| {
            let mut tape = Tape::with_params(p);
            let x = tape.param("x")?;
            let y = tape.relu(x);
            let loss = tape.sum(y);
            let v = tape.value(loss).item();
            let sig = tape.branch_signature();
            Ok((v, sig, want.then(|| tape.backward(loss).unwrap().params())))
        })
        .unwrap();
        assert!(!r.samples[0].smooth && r.samples[1].smooth);
        assert_eq!(r.kinked(), 1);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        let mut p = store(&[1.0]);
        assert!(finite_diff_check(&mut p, &all_coords(1), 0.0, |p, w| quadratic(p, w, false)).is_err());
    }
}
