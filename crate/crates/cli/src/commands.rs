use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cstnet::checkpoint::{transfer_to_small, Checkpoint};
use cstnet::config::ModelConfig;
use cstnet::cost::CostReport;
use cstnet::eval::{evaluate, read_boxes, write_boxes, EvalConfig, SuccessCompare};
use cstnet::model::{build_model, Model};
use cstnet::tracking::{read_container, synth_sequence, track_sequence, write_container, sidecar_path, SceneSpec};
use cstnet::train::{overfit, trailing_average_decreases, TrainConfig};
use cstnet::verify::{model_gradcheck, require, selftest, GRADCHECK_COVER, GRADCHECK_STEP, GRADCHECK_TOL};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(String),
}

impl std::error::Error for CliError {}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Failed(m) => write!(f, "check failed: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "cstnet", version, about = "RGB-T tracker: model accounting, verification, training, tracking and evaluation")]
pub struct Cli {
    /// Suppress timing lines so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter counts per module.
    Params(ModelArgs),
    /// Multiply-accumulate counts per module under both conventions.
    Flops(ModelArgs),
    /// Finite-difference check of model gradients in 64-bit mode.
    Gradcheck(GradcheckArgs),
    /// Overfit a fresh model on four synthetic pairs.
    Overfit(OverfitArgs),
    /// Write a synthetic sequence container and its ground truth.
    Synth(SynthArgs),
    /// Track a sequence container and write the predicted boxes.
    Track(TrackArgs),
    /// PR / NPR / SR from a result file against ground truth.
    Eval(EvalArgs),
    /// Drop fusion weights from a full checkpoint.
    Transfer(TransferArgs),
    /// Structural invariants that must hold by construction.
    Selftest(ModelArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Preset (full, small, tiny, tiny-small) or a key=value config file.
    #[arg(long, default_value = "full")]
    config: String,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = GRADCHECK_STEP)]
    step: f64,
    #[arg(long, default_value_t = GRADCHECK_TOL)]
    tol: f64,
}

#[derive(Args, Debug)]
struct OverfitArgs {
    #[arg(long, default_value = "tiny")]
    config: String,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long)]
    lr_backbone: Option<f64>,
    #[arg(long)]
    lr_fusion: Option<f64>,
    /// Per-step CSV log; printed to stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Save the trained weights here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Scene description, key=value lines.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Override one scene key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrackArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Weights; a seeded fresh model is used when absent.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Compare {
    Ge,
    Gt,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 20.0)]
    pr_threshold: f64,
    #[arg(long, value_enum, default_value = "ge")]
    success: Compare,
    /// Directory for pr.csv, npr.csv and sr.csv curve dumps.
    #[arg(long)]
    curves: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    CliError::Usage(msg.into()).into()
}

fn failed(msg: impl Into<String>) -> anyhow::Error {
    CliError::Failed(msg.into()).into()
}

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=').ok_or_else(|| usage(format!("expected KEY=VALUE, got {s:?}")))
}

/// Preset or file, then `--set` overrides.
fn resolve_config(config: &str, overrides: &[String]) -> Result<ModelConfig> {
    let mut cfg = match ModelConfig::preset(config) {
        Some(c) => c,
        None => {
            let path = Path::new(config);
            if !path.exists() {
                return Err(usage(format!("--config {config:?} is neither a preset nor a file")));
            }
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ModelConfig::parse(&text, ModelConfig::full()).map_err(|e| usage(e.to_string()))?
        }
    };
    for o in overrides {
        let (k, v) = split_kv(o)?;
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

struct Out {
    text: String,
    deterministic: bool,
    start: Instant,
}

impl Out {
    fn line(&mut self, s: impl AsRef<str>) {
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }

    fn block(&mut self, s: &str) {
        self.text.push_str(s);
    }

    fn config(&mut self, cfg: &ModelConfig, seed: u64) {
        for l in cfg.to_kv().lines() {
            self.line(format!("config.{l}"));
        }
        self.line(format!("seed={seed}"));
    }

    fn flush(&mut self) {
        print!("{}", self.text);
        self.text.clear();
        if !self.deterministic {
            eprintln!("elapsed_ms={}", self.start.elapsed().as_millis());
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut out = Out {
        text: String::new(),
        deterministic: cli.deterministic,
        start: Instant::now(),
    };
    let r = match cli.command {
        Command::Params(a) => params(&a, &mut out, false),
        Command::Flops(a) => params(&a, &mut out, true),
        Command::Gradcheck(a) => gradcheck(&a, &mut out),
        Command::Overfit(a) => run_overfit(&a, &mut out),
        Command::Synth(a) => synth(&a, &mut out),
        Command::Track(a) => track(&a, &mut out),
        Command::Eval(a) => eval(&a, &mut out),
        Command::Transfer(a) => transfer(&a, &mut out),
        Command::Selftest(a) => run_selftest(&a, &mut out),
    };
    out.flush();
    r
}

fn params(a: &ModelArgs, out: &mut Out, flops: bool) -> Result<()> {
    let cfg = resolve_config(&a.config, &a.overrides)?;
    out.config(&cfg, a.seed);
    let r = CostReport::for_config(&cfg)?;
    out.block(&if flops { r.flops_text() } else { r.params_text() });
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, out: &mut Out) -> Result<()> {
    let cfg = resolve_config(&a.model.config, &a.model.overrides)?;
    out.config(&cfg, a.model.seed);
    if a.samples == 0 {
        return Err(usage("--samples must be positive"));
    }
    let r = model_gradcheck(&cfg, a.samples, a.model.seed, a.step)?;
    out.line(format!("gradcheck.step={}", a.step));
    out.line(format!("gradcheck.samples={}", r.samples.len()));
    out.line(format!("gradcheck.kinked={}", r.kinked()));
    for p in GRADCHECK_COVER {
        let n = r.samples.iter().filter(|s| s.coord.name.contains(p)).count();
        out.line(format!("gradcheck.cover.{}={n}", p.trim_matches(['.', '_'])));
    }
    if let Some(w) = r.worst() {
        out.line(format!(
            "gradcheck.worst={}[{}] analytic={:e} numeric={:e}",
            w.coord.name, w.coord.index, w.analytic, w.numeric
        ));
    }
    out.line(format!("gradcheck.max_rel_error={:e}", r.max_rel_error));
    let ok = r.max_rel_error < a.tol && r.kinked() == 0 && r.samples.len() >= a.samples;
    out.line(format!("gradcheck.pass={ok}"));
    if !ok {
        return Err(failed(format!("max relative error {:e} (tolerance {:e}), {} kinked", r.max_rel_error, a.tol, r.kinked())));
    }
    Ok(())
}

fn run_overfit(a: &OverfitArgs, out: &mut Out) -> Result<()> {
    let cfg = resolve_config(&a.config, &a.overrides)?;
    out.config(&cfg, a.seed);
    let mut tc = TrainConfig {
        seed: a.seed,
        steps: a.steps,
        ..TrainConfig::overfit()
    };
    if let Some(v) = a.lr_backbone {
        tc.lr_backbone = v;
    }
    if let Some(v) = a.lr_fusion {
        tc.lr_fusion = v;
    }
    tc.validate().map_err(|e| usage(e.to_string()))?;
    for (k, v) in [("lr_backbone", tc.lr_backbone), ("lr_fusion", tc.lr_fusion), ("weight_decay", tc.weight_decay)] {
        out.line(format!("train.{k}={v}"));
    }
    out.line(format!("train.steps={}", tc.steps));
    let (model, r) = overfit(&cfg, &tc, |_, _| {})?;
    match &a.log {
        Some(p) => fs::write(p, r.log_csv()).with_context(|| format!("writing {}", p.display()))?,
        None => out.block(&r.log_csv()),
    }
    if let Some(p) = &a.out {
        model.save(p).with_context(|| format!("writing {}", p.display()))?;
    }
    let totals: Vec<f64> = r.losses.iter().map(|l| l.total).collect();
    let ratio = r.ratio();
    out.line(format!("overfit.initial_total={}", r.initial.total));
    out.line(format!("overfit.final_total={}", r.last.total));
    out.line(format!("overfit.ratio={ratio}"));
    out.line(format!("overfit.trailing_average_decreasing={}", trailing_average_decreases(&totals, 20, 0.05)));
    out.line(format!("overfit.iou={}", r.iou));
    out.line(format!("overfit.checksum={:016x}", r.checksum));
    let ok = ratio <= 0.1 && r.iou >= 0.5;
    out.line(format!("overfit.pass={ok}"));
    if !ok {
        return Err(failed(format!("loss ratio {ratio} (need <= 0.1), IoU {} (need >= 0.5)", r.iou)));
    }
    Ok(())
}

fn synth(a: &SynthArgs, out: &mut Out) -> Result<()> {
    let mut text = match &a.scene {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    for o in &a.overrides {
        split_kv(o)?;
        writeln!(text, "{o}").unwrap();
    }
    let scene = SceneSpec::parse(&text).map_err(|e| usage(e.to_string()))?;
    out.line(format!("scene.frames={}", scene.frames));
    out.line(format!("scene.size={}x{}", scene.width, scene.height));
    out.line(format!("scene.box={},{},{},{}", scene.start.x, scene.start.y, scene.start.w, scene.start.h));
    out.line(format!("scene.velocity={},{}", scene.velocity.0, scene.velocity.1));
    for (e, s, t) in &scene.effects {
        out.line(format!("scene.effect={}:{s}-{t}", e.name()));
    }
    out.line(format!("seed={}", a.seed));
    let seq = synth_sequence(&scene, a.seed)?;
    write_container(&a.out, &seq).with_context(|| format!("writing {}", a.out.display()))?;
    out.line(format!("synth.container={}", a.out.display()));
    out.line(format!("synth.gt={}", sidecar_path(&a.out).display()));
    Ok(())
}

fn track(a: &TrackArgs, out: &mut Out) -> Result<()> {
    let cfg = resolve_config(&a.model.config, &a.model.overrides)?;
    out.config(&cfg, a.model.seed);
    let model: Model = match &a.ckpt {
        Some(p) => Model::load(&cfg, p).with_context(|| format!("loading {}", p.display()))?,
        None => build_model(&cfg, a.model.seed)?,
    };
    let seq = read_container(&a.seq).with_context(|| format!("reading {}", a.seq.display()))?;
    let Some((_, init)) = seq.first() else {
        bail!(failed("sequence has no frames"));
    };
    let frames: Vec<_> = seq.iter().map(|(f, _)| f.clone()).collect();
    let boxes = track_sequence(&model, &frames, init)?;
    write_boxes(&a.out, &boxes).with_context(|| format!("writing {}", a.out.display()))?;
    out.line(format!("track.frames={}", boxes.len()));
    out.line(format!("track.out={}", a.out.display()));
    Ok(())
}

fn eval(a: &EvalArgs, out: &mut Out) -> Result<()> {
    let config = EvalConfig {
        pr_threshold: a.pr_threshold,
        success: match a.success {
            Compare::Ge => SuccessCompare::AtLeast,
            Compare::Gt => SuccessCompare::Strict,
        },
    };
    out.line(format!("seed={}", a.seed));
    let pred = read_boxes(&a.pred).with_context(|| format!("reading {}", a.pred.display()))?;
    let gt = read_boxes(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
    let r = evaluate(&pred, &gt, config)?;
    out.block(&r.text());
    if let Some(dir) = &a.curves {
        fs::create_dir_all(dir)?;
        for (name, c) in [("pr", &r.pr), ("npr", &r.npr), ("sr", &r.sr)] {
            fs::write(dir.join(format!("{name}.csv")), c.dump())?;
        }
    }
    Ok(())
}

fn transfer(a: &TransferArgs, out: &mut Out) -> Result<()> {
    out.line(format!("seed={}", a.seed));
    let full = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let (small, already) = transfer_to_small(&full);
    small.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    out.line(format!("transfer.entries_in={}", full.len()));
    out.line(format!("transfer.entries_out={}", small.len()));
    out.line(format!("transfer.already_small={already}"));
    out.line(format!("transfer.out={}", a.out.display()));
    Ok(())
}

fn run_selftest(a: &ModelArgs, out: &mut Out) -> Result<()> {
    let cfg = resolve_config(&a.config, &a.overrides)?;
    out.config(&cfg, a.seed);
    let r = selftest(&cfg, a.seed);
    for o in &r {
        let status = if o.passed { "pass" } else { "FAIL" };
        if o.detail.is_empty() {
            out.line(format!("selftest.{}={status}", o.name));
        } else {
            out.line(format!("selftest.{}={status} {}", o.name, o.detail));
        }
    }
    require(&r).map_err(|e| failed(e.to_string()))
}
