//! Full network assembly: backbone, per-layer fusion blocks, and head.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::backbone::{Backbone, Region, Stream, TokenMatrix};
use crate::checkpoint::{Checkpoint, FUSION_PREFIX};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionBlock;
use crate::head::{fuse_search_outputs, CenterHead, HeadVars};
use crate::params::{ParamSpec, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Parameter-free description of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub fusion: BTreeMap<usize, FusionBlock>,
    pub head: CenterHead,
}

impl Architecture {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(cfg)?,
            fusion: cfg.active_insertion().into_iter().map(|l| (l, FusionBlock::new(l, cfg))).collect(),
            head: CenterHead::new(cfg),
        })
    }

    /// Every parameter and buffer, in registration order.
    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.backbone.specs(&mut out);
        for f in self.fusion.values() {
            f.specs(&mut out);
        }
        self.head.specs(&mut out);
        out
    }
}

/// Images for one forward pass; index 0 is RGB, 1 is TIR, each `3 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInput<T = f32> {
    pub template: [Tensor<T>; 2],
    pub search: [Tensor<T>; 2],
}

impl<T: Scalar> PairInput<T> {
    pub fn cast<U: Scalar>(&self) -> PairInput<U> {
        PairInput {
            template: [self.template[0].cast(), self.template[1].cast()],
            search: [self.search[0].cast(), self.search[1].cast()],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    /// Final joint sequences `[X; Z]`, RGB then TIR.
    pub joint: [TokenMatrix; 2],
    pub search: [TokenMatrix; 2],
    pub head: HeadVars,
}

pub const STREAMS: [Stream; 2] = [Stream::Rgb, Stream::Tir];

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let arch = Architecture::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParamStore::from_specs(&arch.specs(), &mut rng)?;
    Ok(Model { arch, params })
}

impl<T: Scalar> Model<T> {
    pub fn cfg(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    pub fn tape(&self) -> Tape<'_, T> {
        Tape::with_params(&self.params)
    }

    pub fn fusion_layers(&self) -> BTreeSet<usize> {
        self.arch.fusion.keys().copied().collect()
    }

    /// Embedded template tokens per stream (patch embed plus positions).
    pub fn embed_templates(&self, tape: &mut Tape<'_, T>, template: &[Tensor<T>; 2]) -> Result<[TokenMatrix; 2]> {
        let bb = &self.arch.backbone;
        Ok([
            bb.embed(tape, &template[0], Region::Template, Stream::Rgb)?,
            bb.embed(tape, &template[1], Region::Template, Stream::Tir)?,
        ])
    }

    pub fn embed_search(&self, tape: &mut Tape<'_, T>, search: &[Tensor<T>; 2]) -> Result<[TokenMatrix; 2]> {
        let bb = &self.arch.backbone;
        Ok([
            bb.embed(tape, &search[0], Region::Search, Stream::Rgb)?,
            bb.embed(tape, &search[1], Region::Search, Stream::Tir)?,
        ])
    }

    /// Runs fusion at `layer` on the joint sequences of both streams.
    pub fn fuse_at(&self, tape: &mut Tape<'_, T>, layer: usize, h: [TokenMatrix; 2]) -> Result<[TokenMatrix; 2]> {
        let fb = self
            .arch
            .fusion
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("no fusion module at layer {layer}")))?;
        let bb = &self.arch.backbone;
        let (xr, zr) = bb.split(tape, h[0])?;
        let (xt, zt) = bb.split(tape, h[1])?;
        let (zr, zt) = fb.forward(tape, &zr, &zt)?;
        let (xr, xt) = fb.forward(tape, &xr, &xt)?;
        Ok([bb.join(tape, xr, zr)?, bb.join(tape, xt, zt)?])
    }

    /// Blocks and fusion from embedded tokens; `insertion` must be a subset
    /// of the instantiated fusion layers.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape<'_, T>,
        template: [TokenMatrix; 2],
        search: [TokenMatrix; 2],
        insertion: &BTreeSet<usize>,
    ) -> Result<ForwardOut> {
        if let Some(l) = insertion.iter().find(|l| !self.arch.fusion.contains_key(l)) {
            return Err(Error::Config(format!("insertion layer {l} has no fusion module")));
        }
        let bb = &self.arch.backbone;
        let mut h = [bb.join(tape, search[0], template[0])?, bb.join(tape, search[1], template[1])?];
        for i in 1..=bb.depth() {
            for m in &mut h {
                *m = bb.block(tape, i, *m)?;
            }
            if insertion.contains(&i) {
                h = self.fuse_at(tape, i, h)?;
            }
        }
        let (xr, _) = bb.split(tape, h[0])?;
        let (xt, _) = bb.split(tape, h[1])?;
        let mixed = fuse_search_outputs(tape, &xr, &xt)?;
        let head = self.arch.head.forward(tape, &mixed)?;
        Ok(ForwardOut {
            joint: h,
            search: [xr, xt],
            head,
        })
    }

    pub fn forward_with_insertions(&self, tape: &mut Tape<'_, T>, input: &PairInput<T>, insertion: &BTreeSet<usize>) -> Result<ForwardOut> {
        let z = self.embed_templates(tape, &input.template)?;
        let x = self.embed_search(tape, &input.search)?;
        self.forward_tokens(tape, z, x, insertion)
    }

    pub fn forward(&self, tape: &mut Tape<'_, T>, input: &PairInput<T>) -> Result<ForwardOut> {
        let ins = self.fusion_layers();
        self.forward_with_insertions(tape, input, &ins)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint, strict: bool) -> Result<()> {
        ck.apply_to(&mut self.params, strict)
    }

    /// Builds the architecture for `cfg` and fills it strictly from `path`.
    pub fn load(cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let mut m = build_model(cfg, 0)?;
        m.load_checkpoint(&ck, true)?;
        Ok(m)
    }

    pub fn fusion_param_names(&self) -> Vec<&str> {
        self.params.names().filter(|n| n.starts_with(FUSION_PREFIX)).collect()
    }

    /// Applies running-statistic updates recorded by a training-mode tape.
    pub fn apply_buffer_updates(&mut self, updates: Vec<crate::autodiff::BufferUpdate<T>>) -> Result<()> {
        for u in updates {
            self.params.set(&u.name, u.value)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::params::ParamKind;
    use rand::Rng;

    fn image(side: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(&[3, side, side], |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    pub(crate) fn input(cfg: &ModelConfig, seed: u64) -> PairInput<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PairInput {
            template: [image(cfg.template_side, &mut rng), image(cfg.template_side, &mut rng)],
            search: [image(cfg.search_side, &mut rng), image(cfg.search_side, &mut rng)],
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model::<f32>(&ModelConfig::tiny(), 3).unwrap();
        let b = build_model::<f32>(&ModelConfig::tiny(), 3).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_model::<f32>(&ModelConfig::tiny(), 4).unwrap();
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn small_variant_has_no_fusion_parameters() {
        let m = build_model::<f32>(&ModelConfig::tiny().with_variant(Variant::Small), 0).unwrap();
        assert!(m.fusion_param_names().is_empty());
        assert!(m.params.names().all(|n| !n.contains("fusion")));
    }

    #[test]
    fn identical_streams_without_fusion_give_identical_outputs() {
        let cfg = ModelConfig::tiny().with_variant(Variant::Small);
        let m = build_model::<f32>(&cfg, 1).unwrap();
        let mut inp = input(&cfg, 2);
        inp.template[1] = inp.template[0].clone();
        inp.search[1] = inp.search[0].clone();
        let mut tape = m.tape();
        let out = m.forward(&mut tape, &inp).unwrap();
        assert_eq!(tape.value(out.joint[0].var), tape.value(out.joint[1].var));
    }

    #[test]
    fn swapping_streams_without_fusion_swaps_outputs() {
        let cfg = ModelConfig::tiny().with_variant(Variant::Small);
        let m = build_model::<f32>(&cfg, 5).unwrap();
        let inp = input(&cfg, 6);
        let swapped = PairInput {
            template: [inp.template[1].clone(), inp.template[0].clone()],
            search: [inp.search[1].clone(), inp.search[0].clone()],
        };
        let mut tape = m.tape();
        let a = m.forward(&mut tape, &inp).unwrap();
        let b = m.forward(&mut tape, &swapped).unwrap();
        assert_eq!(tape.value(a.joint[0].var), tape.value(b.joint[1].var));
        assert_eq!(tape.value(a.joint[1].var), tape.value(b.joint[0].var));
    }

    #[test]
    fn token_counts_are_conserved() {
        let cfg = ModelConfig::tiny();
        let m = build_model::<f32>(&cfg, 7).unwrap();
        let mut tape = m.tape();
        let out = m.forward(&mut tape, &input(&cfg, 8)).unwrap();
        for j in out.joint {
            assert_eq!(tape.shape(j.var), &[cfg.search_tokens() + cfg.template_tokens(), cfg.dim]);
        }
    }

    #[test]
    fn unknown_insertion_layer_is_rejected() {
        let cfg = ModelConfig::tiny();
        let m = build_model::<f32>(&cfg, 0).unwrap();
        let mut tape = m.tape();
        let ins: BTreeSet<usize> = [3].into_iter().collect();
        assert!(matches!(m.forward_with_insertions(&mut tape, &input(&cfg, 0), &ins), Err(Error::Config(_))));
    }

    #[test]
    fn every_spec_is_registered_once() {
        let m = build_model::<f32>(&ModelConfig::tiny(), 0).unwrap();
        let specs = m.arch.specs();
        assert_eq!(specs.len(), m.params.len());
        let buffers = specs.iter().filter(|s| s.kind == ParamKind::Buffer).count();
        assert!(buffers > 0);
        assert!(buffers % 2 == 0);
    }
}
