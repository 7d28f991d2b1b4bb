//! `recolor`: dataset generation, training, inference, evaluation and the
//! verification harness.

mod viz;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use recolor_core::check::{run_checks, CheckConfig, CheckMode};
use recolor_core::dataset::{load_dataset, pair_files, read_image, write_labels};
use recolor_core::env::EnvConfig;
use recolor_core::metrics::{evaluate_dirs, EvalOptions, Metric};
use recolor_core::policy::{
    infer, load_checkpoint, save_checkpoint, train, ActionMode, NetSpec, PolicyParams, TrainConfig,
};
use recolor_core::synth::{write_synthetic, ShapeKind, SynthConfig};

const RUN_CONFIG_VERSION: u32 = 1;

/// Everything a training run depends on, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    format_version: u32,
    #[serde(default)]
    env: EnvConfig,
    /// Defaults to the standard network for the data's channel count.
    #[serde(default)]
    net: Option<NetSpec>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    data: Option<PathBuf>,
    #[serde(default)]
    checkpoint: Option<PathBuf>,
    #[serde(default)]
    log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: RUN_CONFIG_VERSION,
            env: EnvConfig::default(),
            net: None,
            train: TrainConfig::default(),
            data: None,
            checkpoint: None,
            log: None,
        }
    }
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.format_version != RUN_CONFIG_VERSION {
            bail!(
                "config {} has format_version {}, expected {RUN_CONFIG_VERSION}",
                path.display(),
                cfg.format_version
            );
        }
        cfg.env.validate()?;
        Ok(cfg)
    }
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("size must look like HEIGHTxWIDTH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid size component {v:?}"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err("size components must be positive".into());
    }
    Ok((h, w))
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Shape {
    Ellipse,
    Rectangle,
    Blob,
}

impl From<Shape> for ShapeKind {
    fn from(s: Shape) -> Self {
        match s {
            Shape::Ellipse => ShapeKind::Ellipse,
            Shape::Rectangle => ShapeKind::Rectangle,
            Shape::Blob => ShapeKind::Blob,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Check {
    RewardOracle,
    Grad,
    Telescoping,
    Optimality,
    All,
}

#[derive(Parser)]
#[command(name = "recolor", version, about = "Instance segmentation by iterative binary coloring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// HEIGHTxWIDTH
        #[arg(long, default_value = "32x32", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 4)]
        max_objects: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, value_enum, value_delimiter = ',')]
        shapes: Vec<Shape>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a policy and write a checkpoint plus a JSON-lines metrics log.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of updates; overrides the config.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Segment every image in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Environment settings; defaults to those stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Greedy)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score predicted label PNGs against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated subset of sbd,dic,coverage,fpfn,voi,arand.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 0)]
        min_area: usize,
        #[arg(long, default_value_t = 0.5)]
        iou_threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the randomized verification harness.
    Check {
        #[arg(long, value_enum, default_value_t = Check::All)]
        mode: Check,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn log_config<T: Serialize>(what: &str, cfg: &T) {
    match serde_json::to_string(cfg) {
        Ok(s) => info!("{what} config: {s}"),
        Err(e) => info!("{what} config not serializable: {e}"),
    }
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => writeln!(std::io::stdout().lock(), "{text}").context("writing to stdout")?,
    }
    Ok(())
}

fn cmd_gen(cfg: SynthConfig, out: &Path) -> Result<()> {
    log_config("gen", &cfg);
    let samples = write_synthetic(out, &cfg)?;
    info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: Option<PathBuf>,
    config: Option<PathBuf>,
    steps: Option<usize>,
    workers: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    log_path: Option<PathBuf>,
) -> Result<bool> {
    let mut run = match &config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = data {
        run.data = Some(d);
    }
    if let Some(s) = steps {
        run.train.updates = s;
    }
    if let Some(w) = workers {
        run.train.workers = w;
    }
    if let Some(s) = seed {
        run.train.seed = s;
        run.env.seed = s;
    }
    if let Some(o) = out {
        run.checkpoint = Some(o);
    }
    if let Some(l) = log_path {
        run.log = Some(l);
    }
    let data_dir = run.data.clone().ok_or_else(|| anyhow!("no dataset given (--data or config \"data\")"))?;
    let samples = load_dataset(&data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let first = samples
        .first()
        .ok_or_else(|| anyhow!("dataset {} is empty", data_dir.display()))?;
    let channels = first.image.channels() + run.env.max_steps;
    let net = run.net.clone().unwrap_or_else(|| NetSpec::default_for(channels));
    run.net = Some(net.clone());
    let ckpt = run.checkpoint.clone().unwrap_or_else(|| PathBuf::from("checkpoint.bin"));
    let log_file = run.log.clone().unwrap_or_else(|| ckpt.with_extension("metrics.jsonl"));
    run.checkpoint = Some(ckpt.clone());
    run.log = Some(log_file.clone());
    log_config("train", &run);

    let init = PolicyParams::init(&net, run.train.seed)?;
    let mut log = BufWriter::new(
        fs::File::create(&log_file).with_context(|| format!("creating {}", log_file.display()))?,
    );
    let mut log_err = None;
    let outcome = train(&samples, &run.env, init, &run.train, |rec| {
        if log_err.is_some() {
            return;
        }
        match serde_json::to_string(rec) {
            Ok(line) => {
                if let Err(e) = writeln!(log, "{line}") {
                    log_err = Some(anyhow!(e));
                }
            }
            Err(e) => log_err = Some(anyhow!(e)),
        }
        if let Some(e) = rec.eval {
            info!("update {}: reward {:.4}, SBD {:.2}, ARand {:.4}", rec.update, rec.mean_reward, e.sbd, e.arand);
        }
    })?;
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e.context(format!("writing {}", log_file.display())));
    }
    // Output locations stay out of the header so identical runs give identical bytes.
    let stored = RunConfig {
        checkpoint: None,
        log: None,
        ..run.clone()
    };
    save_checkpoint(&ckpt, &outcome.params, outcome.updates_done as u64, Some(serde_json::to_value(&stored)?))?;
    info!("wrote checkpoint {} after {} updates", ckpt.display(), outcome.updates_done);
    if let Some(why) = outcome.diverged {
        eprintln!("error: training diverged ({why}); last finite parameters saved to {}", ckpt.display());
        return Ok(false);
    }
    Ok(true)
}

fn cmd_infer(checkpoint: &Path, images: &Path, out: &Path, config: Option<&Path>, mode: Mode, seed: u64) -> Result<()> {
    let (header, params) =
        load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let env = match config {
        Some(p) => RunConfig::load(p)?.env,
        None => match header.run.clone() {
            Some(v) => serde_json::from_value::<RunConfig>(v).context("checkpoint run config")?.env,
            None => EnvConfig::default(),
        },
    };
    let mode = match mode {
        Mode::Greedy => ActionMode::Greedy,
        Mode::Sample => ActionMode::Sample,
    };
    log_config("infer env", &env);
    fs::create_dir_all(out)?;
    let mut count = 0;
    for (id, (img, _)) in pair_files(images)? {
        let Some(img) = img else { continue };
        let image = read_image(&img)?;
        let result = infer(&params, &image, &env, mode, seed).with_context(|| format!("inferring {id}"))?;
        write_labels(&out.join(format!("{id}_label.png")), &result.labels)?;
        for (k, a) in result.actions.iter().enumerate() {
            viz::write_action_png(&out.join(format!("{id}_step{k}.png")), a)?;
        }
        viz::write_label_visual(&out.join(format!("{id}_vis.png")), &result.labels)?;
        count += 1;
    }
    info!("segmented {count} images into {}", out.display());
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path, opts: EvalOptions, out: Option<&Path>) -> Result<()> {
    log_config("eval", &opts);
    let report = evaluate_dirs(pred, gt, &opts)?;
    write_json(out, &report)
}

fn cmd_check(mode: Check, cases: usize, seed: u64, out: Option<&Path>) -> Result<bool> {
    let mode = match mode {
        Check::RewardOracle => CheckMode::RewardOracle,
        Check::Grad => CheckMode::Grad,
        Check::Telescoping => CheckMode::Telescoping,
        Check::Optimality => CheckMode::Optimality,
        Check::All => CheckMode::All,
    };
    let cfg = CheckConfig {
        cases,
        seed,
        ..CheckConfig::default()
    };
    log_config("check", &cfg);
    let report = run_checks(mode, &cfg)?;
    write_json(out, &report)?;
    if let Some(g) = &report.grad {
        info!(
            "gradient check: max relative error {:.3e} (threshold {:e})",
            g.max_rel_error, cfg.grad.tolerance
        );
    }
    Ok(report.ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen {
            out,
            count,
            size,
            max_objects,
            noise,
            shapes,
            seed,
        } => {
            let mut cfg = SynthConfig {
                count,
                height: size.0,
                width: size.1,
                max_objects,
                noise_level: noise,
                seed,
                ..SynthConfig::default()
            };
            if !shapes.is_empty() {
                cfg.shape_kinds = shapes.into_iter().map(ShapeKind::from).collect();
            }
            cmd_gen(cfg, &out)?;
            Ok(true)
        }
        Command::Train {
            data,
            config,
            steps,
            workers,
            seed,
            out,
            log,
        } => cmd_train(data, config, steps, workers, seed, out, log),
        Command::Infer {
            checkpoint,
            images,
            out,
            config,
            mode,
            seed,
        } => {
            cmd_infer(&checkpoint, &images, &out, config.as_deref(), mode, seed)?;
            Ok(true)
        }
        Command::Eval {
            pred,
            gt,
            metrics,
            min_area,
            iou_threshold,
            out,
            seed,
        } => {
            // Evaluation is deterministic; the seed is accepted for uniformity.
            let _ = seed;
            let mut opts = EvalOptions {
                min_area,
                iou_threshold,
                ..EvalOptions::default()
            };
            if !metrics.is_empty() {
                opts.metrics = metrics.iter().map(|m| Metric::parse(m)).collect::<Result<_, _>>()?;
            }
            cmd_eval(&pred, &gt, opts, out.as_deref())?;
            Ok(true)
        }
        Command::Check { mode, cases, seed, out } => cmd_check(mode, cases, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RECOLOR_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
