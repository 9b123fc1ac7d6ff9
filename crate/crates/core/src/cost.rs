//! Parameter and multiply-accumulate accounting, computed symbolically from
//! the architecture without running it.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::Architecture;
use crate::params::{ParamKind, ParamSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopConvention {
    /// One multiply-accumulate counts as one operation.
    Mac,
    /// One multiply-accumulate counts as two operations.
    TwoMac,
}

impl FlopConvention {
    pub fn name(self) -> &'static str {
        match self {
            FlopConvention::Mac => "mac",
            FlopConvention::TwoMac => "2mac",
        }
    }

    pub fn apply(self, macs: u64) -> u64 {
        match self {
            FlopConvention::Mac => macs,
            FlopConvention::TwoMac => 2 * macs,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub variant: String,
    /// Trainable parameters per top-level module namespace.
    pub params_by_module: BTreeMap<String, u64>,
    pub total_params: u64,
    /// Parameters per fusion insertion layer.
    pub fusion_by_layer: BTreeMap<usize, u64>,
    pub macs_by_module: BTreeMap<String, u64>,
    pub total_macs: u64,
}

fn namespace(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Trainable count per namespace, from a spec inventory.
pub fn count_specs(specs: &[ParamSpec]) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for s in specs.iter().filter(|s| s.kind == ParamKind::Trainable) {
        *out.entry(namespace(&s.name).to_string()).or_insert(0) += s.numel();
    }
    out
}

impl CostReport {
    pub fn from_arch(arch: &Architecture) -> Self {
        let specs = arch.specs();
        let mut params_by_module = count_specs(&specs);
        for k in ["backbone", "fusion", "head"] {
            params_by_module.entry(k.to_string()).or_insert(0);
        }
        let total_params = params_by_module.values().sum();
        let fusion_by_layer = arch
            .fusion
            .iter()
            .map(|(&l, fb)| {
                let mut v = Vec::new();
                fb.specs(&mut v);
                (l, count_specs(&v).values().sum())
            })
            .collect();

        let (tg, sg) = (arch.cfg.template_grid(), arch.cfg.search_grid());
        let fusion_macs = arch.fusion.values().map(|fb| fb.macs(tg, tg) + fb.macs(sg, sg)).sum();
        let macs_by_module: BTreeMap<String, u64> = [
            ("backbone".to_string(), arch.backbone.macs()),
            ("fusion".to_string(), fusion_macs),
            ("head".to_string(), arch.head.macs()),
        ]
        .into_iter()
        .collect();
        let total_macs = macs_by_module.values().sum();
        Self {
            variant: arch.cfg.variant.name().to_string(),
            params_by_module,
            total_params,
            fusion_by_layer,
            macs_by_module,
            total_macs,
        }
    }

    pub fn for_config(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self::from_arch(&Architecture::new(cfg)?))
    }

    pub fn module_params(&self, m: &str) -> u64 {
        self.params_by_module.get(m).copied().unwrap_or(0)
    }

    pub fn flops(&self, conv: FlopConvention) -> u64 {
        conv.apply(self.total_macs)
    }

    pub fn params_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "variant={}", self.variant).unwrap();
        for (k, v) in &self.params_by_module {
            writeln!(s, "params.{k}={v}").unwrap();
        }
        for (l, v) in &self.fusion_by_layer {
            writeln!(s, "params.fusion.layer{l}={v}").unwrap();
        }
        writeln!(s, "params.total={}", self.total_params).unwrap();
        writeln!(s, "params.total_m={:.2}", self.total_params as f64 / 1e6).unwrap();
        s
    }

    pub fn flops_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "variant={}", self.variant).unwrap();
        for (k, v) in &self.macs_by_module {
            writeln!(s, "macs.{k}={v}").unwrap();
        }
        for conv in [FlopConvention::Mac, FlopConvention::TwoMac] {
            let f = self.flops(conv);
            writeln!(s, "flops.{}={f}", conv.name()).unwrap();
            writeln!(s, "flops.{}_g={:.2}", conv.name(), f as f64 / 1e9).unwrap();
        }
        s
    }
}
