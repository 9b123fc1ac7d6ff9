//! Desk-scale training: AdamW with two learning-rate groups, per-sample
//! gradient accumulation, and the synthetic overfit run.

use std::collections::BTreeMap;

use crate::autodiff::{BufferUpdate, NormMode};
use crate::bbox::BoundingBox;
use crate::checkpoint::FUSION_PREFIX;
use crate::config::ModelConfig;
use crate::error::{contract, Error, Result};
use crate::loss::{gaussian_heatmap, total_loss_graph, LossBreakdown, LossWeights, NormBox};
use crate::model::{build_model, Model, PairInput};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::tracking::{crop_pair, synth_sequence, track_init, track_update, FramePair, SceneSpec, SEARCH_FACTOR, TEMPLATE_FACTOR};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_fusion: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub norm_mode: NormMode,
    pub threads: usize,
}

impl Default for TrainConfig {
    /// Published optimizer settings; far too slow for a 200-step run.
    fn default() -> Self {
        Self {
            lr_backbone: 2e-5,
            lr_fusion: 2e-6,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            steps: 200,
            seed: 0,
            weights: LossWeights::default(),
            norm_mode: NormMode::Eval,
            threads: threads_from_env(),
        }
    }
}

impl TrainConfig {
    /// Settings for the synthetic overfit run: same 10x group gap, larger rates.
    pub fn overfit() -> Self {
        Self {
            lr_backbone: 1e-3,
            lr_fusion: 1e-4,
            seed: 7,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_backbone >= 0.0 && self.lr_fusion >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::Config("learning rates and decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        if name.starts_with(FUSION_PREFIX) {
            self.lr_fusion
        } else {
            self.lr_backbone
        }
    }
}

/// Worker cap from `CSTNET_THREADS`, defaulting to the machine's parallelism.
pub fn threads_from_env() -> usize {
    std::env::var("CSTNET_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Decoupled weight decay Adam, in the order PyTorch applies it.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

pub type GradMap = BTreeMap<String, Vec<f64>>;

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters without a gradient are left untouched, decay included.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &GradMap, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let lr = cfg.lr_for(name);
            let entry = store.get_mut(name)?;
            if entry.len() != g.len() {
                return Err(Error::Shape(entry.shape().to_vec()));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (k, p) in entry.data_mut().iter_mut().enumerate() {
                let mut x = p.f64();
                x -= lr * cfg.weight_decay * x;
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                x -= lr * mh / (vh.sqrt() + cfg.eps);
                *p = T::of(x);
            }
        }
        Ok(())
    }
}

/// One training pair: crops, normalized target and its heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T = f32> {
    pub input: PairInput<T>,
    pub target: NormBox,
    pub heatmap: Tensor<T>,
    /// Target in search-crop pixels.
    pub crop_box: BoundingBox,
}

/// Template from `(tf, tb)`, search cropped from `sf` around `prev`, target `gt`.
pub fn make_sample(cfg: &ModelConfig, tf: &FramePair, tb: &BoundingBox, sf: &FramePair, prev: &BoundingBox, gt: &BoundingBox) -> Result<TrainSample> {
    let (template, _) = crop_pair(tf, tb, TEMPLATE_FACTOR, cfg.template_side)?;
    let (search, map) = crop_pair(sf, prev, SEARCH_FACTOR, cfg.search_side)?;
    let crop_box = map.box_to_patch(gt);
    let target = NormBox::from_pixels(&crop_box, cfg.search_side as f64);
    let heatmap = gaussian_heatmap(&target, cfg.search_grid())?;
    Ok(TrainSample {
        input: PairInput { template, search },
        target,
        heatmap,
        crop_box,
    })
}

/// Frame 0 as template; frames `1..=n` as searches around the previous gt.
pub fn synthetic_batch(cfg: &ModelConfig, scene: &SceneSpec, seed: u64, n: usize) -> Result<(Vec<(FramePair, BoundingBox)>, Vec<TrainSample>)> {
    if scene.frames < n + 1 {
        return Err(contract(format!("scene has {} frames, need {}", scene.frames, n + 1)));
    }
    let seq = synth_sequence(scene, seed)?;
    let (tf, tb) = &seq[0];
    let batch = (1..=n)
        .map(|k| make_sample(cfg, tf, tb, &seq[k].0, &seq[k - 1].1, &seq[k].1))
        .collect::<Result<_>>()?;
    Ok((seq, batch))
}

pub struct SampleGrad {
    pub loss: LossBreakdown,
    pub grads: GradMap,
    pub buffers: Vec<BufferUpdate<f64>>,
}

pub fn sample_grad<T: Scalar>(model: &Model<T>, s: &TrainSample<f32>, cfg: &TrainConfig) -> Result<SampleGrad> {
    let input = s.input.cast::<T>();
    let heat = s.heatmap.cast::<T>();
    let mut tape = model.tape();
    tape.set_norm_mode(cfg.norm_mode);
    let out = model.forward(&mut tape, &input)?;
    let l = total_loss_graph(&mut tape, &out.head, &s.target, &heat, cfg.weights)?;
    let loss = l.breakdown(&tape);
    let g = tape.backward(l.total)?;
    let grads = g
        .params()
        .into_iter()
        .filter(|(n, _)| model.params.entry(n).is_some_and(|e| e.kind == ParamKind::Trainable))
        .map(|(n, t)| (n, t.data().iter().map(|v| v.f64()).collect()))
        .collect();
    let buffers = tape
        .take_buffer_updates()
        .into_iter()
        .map(|u| BufferUpdate {
            name: u.name,
            value: u.value.cast(),
        })
        .collect();
    Ok(SampleGrad { loss, grads, buffers })
}

/// Per-sample gradients, computed on up to `threads` workers; results come
/// back in batch order so every later reduction is order-fixed.
pub fn batch_grads<T: Scalar>(model: &Model<T>, batch: &[TrainSample], cfg: &TrainConfig) -> Result<Vec<SampleGrad>> {
    let workers = cfg.threads.min(batch.len()).max(1);
    if workers == 1 {
        return batch.iter().map(|s| sample_grad(model, s, cfg)).collect();
    }
    let chunk = batch.len().div_ceil(workers);
    std::thread::scope(|sc| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| sc.spawn(move || part.iter().map(|s| sample_grad(model, s, cfg)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(batch.len());
        for h in handles {
            out.extend(h.join().map_err(|_| contract("gradient worker panicked"))??);
        }
        Ok(out)
    })
}

fn mean_breakdown(xs: &[LossBreakdown]) -> LossBreakdown {
    let n = xs.len() as f64;
    let mut m = LossBreakdown::default();
    for x in xs {
        m.total += x.total;
        m.cls += x.cls;
        m.iou += x.iou;
        m.l1 += x.l1;
    }
    LossBreakdown {
        total: m.total / n,
        cls: m.cls / n,
        iou: m.iou / n,
        l1: m.l1 / n,
    }
}

/// Batch-mean loss and gradient, without updating anything.
pub fn batch_loss_and_grads<T: Scalar>(model: &Model<T>, batch: &[TrainSample], cfg: &TrainConfig) -> Result<(LossBreakdown, GradMap, Vec<SampleGrad>)> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let per = batch_grads(model, batch, cfg)?;
    let loss = mean_breakdown(&per.iter().map(|p| p.loss).collect::<Vec<_>>());
    let mut sum: GradMap = BTreeMap::new();
    for p in &per {
        for (n, g) in &p.grads {
            let acc = sum.entry(n.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    let n = batch.len() as f64;
    for g in sum.values_mut() {
        g.iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss, sum, per))
}

/// Forward, loss, backward, one optimizer update. Returns the pre-update loss.
pub fn train_step<T: Scalar>(model: &mut Model<T>, opt: &mut AdamW, batch: &[TrainSample], cfg: &TrainConfig, step: usize) -> Result<LossBreakdown> {
    let (loss, grads, per) = match batch_loss_and_grads(model, batch, cfg) {
        // a NaN caught mid-graph is the same failure as a NaN loss
        Err(Error::NumericDomain(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
        r => r?,
    };
    if !loss.total.is_finite() {
        return Err(Error::Divergence { step, loss: loss.total });
    }
    opt.step(&mut model.params, &grads, cfg)?;
    if cfg.norm_mode == NormMode::Train {
        let mut avg: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut shapes = BTreeMap::new();
        for p in &per {
            for u in &p.buffers {
                let acc = avg.entry(u.name.clone()).or_insert_with(|| vec![0.0; u.value.len()]);
                shapes.insert(u.name.clone(), u.value.shape().to_vec());
                for (a, b) in acc.iter_mut().zip(u.value.data()) {
                    *a += b / per.len() as f64;
                }
            }
        }
        let ups = avg
            .into_iter()
            .map(|(name, v)| Ok(BufferUpdate { value: Tensor::from_f64(&shapes[&name], &v)?, name }))
            .collect::<Result<Vec<_>>>()?;
        model.apply_buffer_updates(ups)?;
    }
    Ok(loss)
}

/// Per-namespace gradient norms from one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradFlow {
    pub norms: BTreeMap<String, f64>,
}

impl GradFlow {
    pub fn zeros(&self) -> Vec<&str> {
        self.norms.iter().filter(|(_, &v)| v == 0.0).map(|(k, _)| k.as_str()).collect()
    }

    pub fn text(&self) -> String {
        self.norms
            .iter()
            .map(|(k, v)| format!("grad.{k}={v:e}{}\n", if *v == 0.0 { " ZERO" } else { "" }))
            .collect()
    }
}

/// Sub-module a parameter belongs to: `fusion.layerL.<module>.<part>` or
/// `<top>.<part>` elsewhere.
pub fn namespace(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let keep = if name.starts_with(FUSION_PREFIX) { 4 } else { 2 };
    parts[..keep.min(parts.len().saturating_sub(1)).max(1)].join(".")
}

/// Every trainable namespace appears, with norm 0 if no gradient reached it.
pub fn grad_flow_report<T: Scalar>(model: &Model<T>, batch: &[TrainSample], cfg: &TrainConfig) -> Result<GradFlow> {
    let (_, grads, _) = batch_loss_and_grads(model, batch, cfg)?;
    let mut sq: BTreeMap<String, f64> = BTreeMap::new();
    for (name, e) in model.params.iter() {
        if e.kind == ParamKind::Trainable {
            let s = grads.get(name).map_or(0.0, |g| g.iter().map(|v| v * v).sum());
            *sq.entry(namespace(name)).or_insert(0.0) += s;
        }
    }
    Ok(GradFlow {
        norms: sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect(),
    })
}

/// Trailing averages over consecutive windows never rise by more than `tol`.
pub fn trailing_average_decreases(losses: &[f64], window: usize, tol: f64) -> bool {
    let avgs: Vec<f64> = losses.chunks_exact(window).map(|c| c.iter().sum::<f64>() / window as f64).collect();
    avgs.windows(2).all(|w| w[1] <= w[0] * (1.0 + tol))
}

pub const LOG_HEADER: &str = "step,total,cls,iou,l1";

#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub losses: Vec<LossBreakdown>,
    pub initial: LossBreakdown,
    /// Batch loss after the last update.
    pub last: LossBreakdown,
    pub iou: f64,
    pub tracked: BoundingBox,
    pub gt: BoundingBox,
    pub checksum: u64,
}

impl OverfitReport {
    pub fn ratio(&self) -> f64 {
        self.last.total / self.initial.total
    }

    pub fn log_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{}\n", l.csv()));
        }
        s
    }
}

pub fn overfit_scene() -> SceneSpec {
    SceneSpec {
        frames: 5,
        velocity: (2.0, 1.0),
        ..SceneSpec::default()
    }
}

/// Trains a fresh model on four synthetic pairs, then tracks frame 1.
pub fn overfit(model_cfg: &ModelConfig, cfg: &TrainConfig, mut on_step: impl FnMut(usize, &LossBreakdown)) -> Result<(Model, OverfitReport)> {
    cfg.validate()?;
    let mut model = build_model::<f32>(model_cfg, cfg.seed)?;
    let (seq, batch) = synthetic_batch(model_cfg, &overfit_scene(), cfg.seed, 4)?;
    let mut opt = AdamW::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let l = train_step(&mut model, &mut opt, &batch, cfg, step)?;
        on_step(step, &l);
        losses.push(l);
    }
    let (last, _, _) = batch_loss_and_grads(&model, &batch, cfg)?;
    let initial = losses.first().copied().unwrap_or(last);
    let mut st = track_init(&model, &seq[0].0, &seq[0].1)?;
    let (tracked, _) = track_update(&model, &mut st, &seq[1].0)?;
    let gt = seq[1].1;
    let checksum = model.params.checksum();
    Ok((
        model,
        OverfitReport {
            losses,
            initial,
            last,
            iou: tracked.iou(&gt),
            tracked,
            gt,
            checksum,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_store(x: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[x.len()], x).unwrap(), ParamKind::Trainable).unwrap();
        s.insert("fusion.a", Tensor::from_f64(&[1], &[2.0]).unwrap(), ParamKind::Trainable).unwrap();
        s
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        // f = 0.5 * sum x^2, so g = x
        let cfg = TrainConfig {
            lr_backbone: 0.1,
            lr_fusion: 0.01,
            weight_decay: 0.5,
            threads: 1,
            ..TrainConfig::default()
        };
        let mut s = quad_store(&[1.0, -3.0]);
        let mut g = GradMap::new();
        g.insert("w".into(), vec![1.0, -3.0]);
        g.insert("fusion.a".into(), vec![2.0]);
        AdamW::new().step(&mut s, &g, &cfg).unwrap();
        // decay then m/(sqrt v) = sign(g) at t=1
        let expect = |x: f64, lr: f64| {
            let d = x - lr * 0.5 * x;
            d - lr * (x.abs() / (x.abs() + 1e-8)) * x.signum()
        };
        let w = s.get("w").unwrap().data();
        assert!((w[0] - expect(1.0, 0.1)).abs() < 1e-15);
        assert!((w[1] - expect(-3.0, 0.1)).abs() < 1e-15);
        assert!((s.get("fusion.a").unwrap().data()[0] - expect(2.0, 0.01)).abs() < 1e-15);
    }

    #[test]
    fn adamw_second_step_uses_bias_correction() {
        let cfg = TrainConfig {
            lr_backbone: 0.1,
            weight_decay: 0.0,
            threads: 1,
            ..TrainConfig::default()
        };
        let mut s = quad_store(&[1.0]);
        let mut opt = AdamW::new();
        for g in [1.0, 0.5] {
            let mut gm = GradMap::new();
            gm.insert("w".into(), vec![g]);
            opt.step(&mut s, &gm, &cfg).unwrap();
        }
        let (b1, b2) = cfg.betas;
        let m = b1 * (1.0 - b1) * 1.0 + (1.0 - b1) * 0.5;
        let v = b2 * (1.0 - b2) * 1.0 + (1.0 - b2) * 0.25;
        let x2 = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * (m / (1.0 - b1 * b1)) / ((v / (1.0 - b2 * b2)).sqrt() + 1e-8);
        assert!((s.get("w").unwrap().data()[0] - x2).abs() < 1e-14);
    }

    fn tiny_batch() -> (ModelConfig, Vec<TrainSample>) {
        let cfg = ModelConfig::tiny();
        let (_, b) = synthetic_batch(&cfg, &overfit_scene(), 3, 2).unwrap();
        (cfg, b)
    }

    #[test]
    fn zero_learning_rate_repeats_loss_exactly() {
        let (mc, batch) = tiny_batch();
        let cfg = TrainConfig {
            lr_backbone: 0.0,
            lr_fusion: 0.0,
            threads: 1,
            ..TrainConfig::default()
        };
        let mut model = build_model::<f32>(&mc, 1).unwrap();
        let before = model.params.checksum();
        let mut opt = AdamW::new();
        let a = train_step(&mut model, &mut opt, &batch, &cfg, 0).unwrap();
        let b = train_step(&mut model, &mut opt, &batch, &cfg, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, model.params.checksum());
    }

    #[test]
    fn thread_count_does_not_change_the_update() {
        let (mc, batch) = tiny_batch();
        let run = |threads| {
            let cfg = TrainConfig { threads, ..TrainConfig::overfit() };
            let mut model = build_model::<f32>(&mc, 1).unwrap();
            let mut opt = AdamW::new();
            train_step(&mut model, &mut opt, &batch, &cfg, 0).unwrap();
            model.params.checksum()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn samples_center_the_target_in_the_search_crop() {
        let (mc, batch) = tiny_batch();
        for s in &batch {
            assert!((s.target.cx - 0.5).abs() < 0.1 && (s.target.cy - 0.5).abs() < 0.1);
            assert_eq!(s.heatmap.shape(), &[1, mc.search_grid(), mc.search_grid()]);
        }
    }

    #[test]
    fn grad_flow_reaches_every_fusion_namespace() {
        let (mc, batch) = tiny_batch();
        let cfg = TrainConfig { threads: 1, ..TrainConfig::default() };
        let model = build_model::<f32>(&mc, 2).unwrap();
        let r = grad_flow_report(&model, &batch, &cfg).unwrap();
        let fusion: Vec<_> = r.norms.keys().filter(|k| k.starts_with("fusion.")).collect();
        assert!(fusion.len() >= 8, "{fusion:?}");
        assert!(r.zeros().is_empty(), "{}", r.text());

        let small = build_model::<f32>(&mc.clone().with_variant(crate::config::Variant::Small), 2).unwrap();
        let r = grad_flow_report(&small, &batch, &cfg).unwrap();
        assert!(r.norms.keys().all(|k| !k.starts_with("fusion")));
    }

    #[test]
    fn namespaces() {
        assert_eq!(namespace("fusion.layer2.sfm.cam.q_rgb.weight"), "fusion.layer2.sfm.cam");
        assert_eq!(namespace("backbone.block3.attn.qkv.weight"), "backbone.block3");
        assert_eq!(namespace("backbone.pos_embed_search"), "backbone");
        assert_eq!(namespace("head.score.out.bias"), "head.score");
    }

    #[test]
    fn trailing_average_rule() {
        let down: Vec<f64> = (0..60).map(|i| 10.0 - i as f64 * 0.1).collect();
        assert!(trailing_average_decreases(&down, 20, 0.05));
        let up: Vec<f64> = (0..60).map(|i| 1.0 + i as f64).collect();
        assert!(!trailing_average_decreases(&up, 20, 0.05));
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let (mc, mut batch) = tiny_batch();
        batch[0].input.search[0].data_mut()[0] = f32::NAN;
        let cfg = TrainConfig { threads: 1, ..TrainConfig::default() };
        let mut model = build_model::<f32>(&mc, 1).unwrap();
        let e = train_step(&mut model, &mut AdamW::new(), &batch, &cfg, 4).unwrap_err();
        assert!(matches!(e, Error::Divergence { step: 4, .. }), "{e}");
    }
}
