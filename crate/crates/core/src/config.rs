//! Architecture hyperparameters and their key=value text form.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::nn::AttnScaling;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Backbone, fusion modules at the insertion layers, and head.
    Full,
    /// Backbone and head only.
    Small,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Small => "small",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub template_side: usize,
    pub search_side: usize,
    /// 1-based block indices after which fusion runs.
    pub insertion: BTreeSet<usize>,
    pub se_ratio: usize,
    /// GIM hidden width as a fraction of the 2C concat.
    pub gim_ratio: f64,
    pub cam_heads: usize,
    /// Width of the first head conv; each later stage halves it.
    pub head_channels: usize,
    pub scaling: AttnScaling,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            variant: Variant::Full,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            patch: 16,
            template_side: 128,
            search_side: 256,
            insertion: [4, 7, 10].into_iter().collect(),
            se_ratio: 4,
            gim_ratio: 0.5,
            cam_heads: 1,
            head_channels: 256,
            scaling: AttnScaling::PerHead,
        }
    }

    pub fn small() -> Self {
        Self {
            variant: Variant::Small,
            ..Self::full()
        }
    }

    pub fn tiny() -> Self {
        Self {
            variant: Variant::Full,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            patch: 8,
            template_side: 32,
            search_side: 64,
            insertion: [2].into_iter().collect(),
            se_ratio: 4,
            gim_ratio: 0.5,
            cam_heads: 1,
            head_channels: 32,
            scaling: AttnScaling::PerHead,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "small" => Some(Self::small()),
            "tiny" => Some(Self::tiny()),
            "tiny-small" => Some(Self::tiny().with_variant(Variant::Small)),
            _ => None,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Insertion layers that actually carry fusion modules.
    pub fn active_insertion(&self) -> BTreeSet<usize> {
        match self.variant {
            Variant::Full => self.insertion.clone(),
            Variant::Small => BTreeSet::new(),
        }
    }

    pub fn template_grid(&self) -> usize {
        self.template_side / self.patch
    }

    pub fn search_grid(&self) -> usize {
        self.search_side / self.patch
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn gim_hidden(&self) -> usize {
        ((2 * self.dim) as f64 * self.gim_ratio).round() as usize
    }

    pub fn head_schedule(&self) -> [usize; 5] {
        let h = self.head_channels;
        [self.dim, h, h / 2, h / 4, h / 8]
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.dim == 0 || self.depth == 0 || self.patch == 0 {
            bad.push("dim, depth and patch must be positive".to_string());
        }
        if self.heads == 0 || self.dim % self.heads.max(1) != 0 {
            bad.push(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.cam_heads == 0 || self.dim % self.cam_heads.max(1) != 0 {
            bad.push(format!("dim {} not divisible by cam_heads {}", self.dim, self.cam_heads));
        }
        if self.se_ratio == 0 || self.dim % self.se_ratio.max(1) != 0 {
            bad.push(format!("dim {} not divisible by se_ratio {}", self.dim, self.se_ratio));
        }
        for (what, side) in [("template_side", self.template_side), ("search_side", self.search_side)] {
            if side == 0 || side % self.patch.max(1) != 0 {
                bad.push(format!("{what} {side} not divisible by patch {}", self.patch));
            }
        }
        if self.variant == Variant::Full {
            if let Some(&l) = self.insertion.iter().find(|&&l| l == 0 || l > self.depth) {
                bad.push(format!("insertion layer {l} outside [1, {}]", self.depth));
            }
        }
        if !(self.gim_ratio > 0.0) || self.gim_hidden() == 0 {
            bad.push(format!("gim_ratio {} gives an empty hidden layer", self.gim_ratio));
        }
        if self.mlp_ratio == 0 {
            bad.push("mlp_ratio must be positive".into());
        }
        if self.head_channels < 8 || self.head_channels % 8 != 0 {
            bad.push(format!("head_channels {} must be a positive multiple of 8", self.head_channels));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "preset" => {
                *self = Self::preset(value).ok_or_else(|| Error::Config(format!("unknown preset {value:?}")))?;
            }
            "variant" => {
                self.variant = match value {
                    "full" => Variant::Full,
                    "small" => Variant::Small,
                    _ => return Err(Error::Config(format!("variant: expected full or small, got {value:?}"))),
                }
            }
            "dim" => self.dim = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "template_side" => self.template_side = num(key, value)?,
            "search_side" => self.search_side = num(key, value)?,
            "insertion" => {
                self.insertion = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "se_ratio" => self.se_ratio = num(key, value)?,
            "gim_ratio" => self.gim_ratio = num(key, value)?,
            "cam_heads" => self.cam_heads = num(key, value)?,
            "head_channels" => self.head_channels = num(key, value)?,
            "scaling" => {
                self.scaling = match value {
                    "per-head" => AttnScaling::PerHead,
                    "global" => AttnScaling::Global,
                    _ => return Err(Error::Config(format!("scaling: expected per-head or global, got {value:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over `base`. Blank lines and `#` comments are
    /// skipped; a `preset` line resets everything before it.
    pub fn parse(text: &str, base: Self) -> Result<Self> {
        let mut cfg = base;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ins: Vec<String> = self.insertion.iter().map(|l| l.to_string()).collect();
        writeln!(f, "variant={}", self.variant.name())?;
        writeln!(f, "dim={}", self.dim)?;
        writeln!(f, "depth={}", self.depth)?;
        writeln!(f, "heads={}", self.heads)?;
        writeln!(f, "mlp_ratio={}", self.mlp_ratio)?;
        writeln!(f, "patch={}", self.patch)?;
        writeln!(f, "template_side={}", self.template_side)?;
        writeln!(f, "search_side={}", self.search_side)?;
        writeln!(f, "insertion={}", ins.join(","))?;
        writeln!(f, "se_ratio={}", self.se_ratio)?;
        writeln!(f, "gim_ratio={}", self.gim_ratio)?;
        writeln!(f, "cam_heads={}", self.cam_heads)?;
        writeln!(f, "head_channels={}", self.head_channels)?;
        writeln!(f, "scaling={}", self.scaling.name())
    }
}
