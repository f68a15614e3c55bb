//! Command-line harness: dataset generation, pretraining, scoring, few-shot
//! tuning, evaluation and one-axis ablation sweeps.
//!
//! Every run is a pure function of its inputs, flags and seed; reports are
//! canonical JSON and re-running a command byte-identically reproduces
//! them. Timing goes to stderr only.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dsd::adapt::{evaluate, few_shot_tune, LossMode, Metrics, PromptParams, TuneConfig};
use dsd::checkpoint::{build_model, load_checkpoint, save_checkpoint};
use dsd::data::{
    build_dataset, parse_caption, read_instances, render, write_instances, SceneRecord,
};
use dsd::diffusion::{pretrain, PretrainConfig};
use dsd::model::{Model, ModelConfig};
use dsd::optim::OptimConfig;
use dsd::report::{
    metrics_cells, render_table, write_report, AblationRow, RunReport, METRICS_HEADERS,
};
use dsd::scoring::{score_pair, HeadMode, Pooling, ScoreConfig};

#[derive(Parser)]
#[command(
    name = "dsd",
    about = "Image-text matching scored from the cross-attention maps of a toy latent diffusion model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/eval splits of caption-matching instances.
    GenData(GenDataArgs),
    /// Pretrain the denoiser and encoders on positive pairs.
    Pretrain(PretrainArgs),
    /// Score one scene image against one caption.
    Score(ScoreArgs),
    /// Few-shot tune prompt parameters on a frozen checkpoint.
    Tune(TuneArgs),
    /// Evaluate matching accuracy over a split.
    Eval(EvalArgs),
    /// Sweep one scoring axis, everything else at defaults.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (train.jsonl and eval.jsonl are written here).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_eval: usize,
    /// Candidates per instance (1 true + N-1 single-slot negatives).
    #[arg(long, default_value_t = 4)]
    candidates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Optional JSON report with the loss trace.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum HeadsFlag {
    Uniform,
    Dynamic,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PoolFlag {
    Lse,
    Max,
    Cosine,
}

#[derive(Args, Clone)]
struct ScoreFlags {
    /// Single noise level in (0, 1). Contradicts --ensemble.
    #[arg(long)]
    noise: Option<f64>,
    /// Average raw scores over noise levels 0.2, 0.4, 0.6, 0.8.
    #[arg(long)]
    ensemble: bool,
    /// Comma-separated layer subset, e.g. "0,1,2,3".
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, value_enum)]
    heads: Option<HeadsFlag>,
    #[arg(long, value_enum)]
    pool: Option<PoolFlag>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Keep the BOS column in the text-token mean.
    #[arg(long)]
    include_bos: bool,
}

impl ScoreFlags {
    fn build(&self, model_layers: usize) -> anyhow::Result<ScoreConfig> {
        if self.noise.is_some() && self.ensemble {
            bail!("usage error: --noise and --ensemble contradict each other");
        }
        let mut cfg = ScoreConfig::default_for(model_layers);
        if self.ensemble {
            cfg = cfg.with_ensemble();
        }
        if let Some(nu) = self.noise {
            cfg.noise_levels = vec![nu];
        }
        if let Some(layers) = &self.layers {
            cfg.layer_set = layers
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| anyhow!("usage error: bad layer index '{s}'"))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
        }
        if let Some(h) = self.heads {
            cfg.head_mode = match h {
                HeadsFlag::Uniform => HeadMode::Uniform,
                HeadsFlag::Dynamic => HeadMode::Dynamic,
            };
        }
        if let Some(p) = self.pool {
            cfg.pooling = match p {
                PoolFlag::Lse => Pooling::Lse,
                PoolFlag::Max => Pooling::Max,
                PoolFlag::Cosine => Pooling::Cosine,
            };
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        cfg.include_bos = self.include_bos;
        cfg.validate(model_layers)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Scene JSON: {"seed", "subject": {...}, "object": {...}, "predicate"}.
    #[arg(long)]
    scene_json: PathBuf,
    /// Caption text, e.g. "red circle left_of blue square".
    #[arg(long)]
    caption: String,
    /// Use tuned prompts from the checkpoint.
    #[arg(long)]
    prompts: bool,
    #[command(flatten)]
    flags: ScoreFlags,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum LossFlag {
    Binary,
    Multiclass,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    shots: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint to write (backbone plus tuned prompt section).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, value_enum, default_value_t = LossFlag::Multiclass)]
    loss_mode: LossFlag,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    flags: ScoreFlags,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitFlag {
    Train,
    Eval,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Use the tuned prompts stored in the checkpoint.
    #[arg(long)]
    prompts: bool,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitFlag::Eval)]
    split: SplitFlag,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    flags: ScoreFlags,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AxisFlag {
    Layers,
    Heads,
    Pooling,
    Noise,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    axis: AxisFlag,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitFlag::Eval)]
    split: SplitFlag,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    let cli = Cli::parse();
    let started = Instant::now();
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Score(args) => cmd_score(args),
        Command::Tune(args) => cmd_tune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    eprintln!("elapsed: {:.2}s", started.elapsed().as_secs_f64());
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_split(dir: &Path, split: SplitFlag) -> anyhow::Result<Vec<dsd::data::MatchInstance>> {
    let name = match split {
        SplitFlag::Train => "train.jsonl",
        SplitFlag::Eval => "eval.jsonl",
    };
    let path = dir.join(name);
    read_instances(&path).with_context(|| format!("reading {}", path.display()))
}

fn load_ckpt(path: &Path) -> anyhow::Result<(Model, Option<PromptParams>)> {
    let data = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(build_model(&data)?)
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let (train, eval) = build_dataset(args.n_train, args.n_eval, args.candidates, args.seed)?;
    write_instances(&args.out.join("train.jsonl"), &train)?;
    write_instances(&args.out.join("eval.jsonl"), &eval)?;
    println!(
        "wrote {} train and {} eval instances ({} candidates each) to {}",
        train.len(),
        eval.len(),
        args.candidates,
        args.out.display()
    );
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> anyhow::Result<()> {
    let train = load_split(&args.data, SplitFlag::Train)?;
    let mut model = Model::init(ModelConfig::default(), args.seed)?;
    let cfg = PretrainConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        optim: OptimConfig {
            lr: args.lr,
            momentum: args.momentum,
        },
        seed: args.seed,
    };
    let trace = pretrain(&mut model, &train, &cfg)?;
    save_checkpoint(&args.out, &model, None)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!(
            "pretrained {} steps on {} pairs: loss {first:.6} -> {last:.6}",
            trace.len(),
            train.len()
        );
    }
    println!("checkpoint: {}", args.out.display());
    if let Some(report_path) = args.report {
        let report = RunReport {
            command: "pretrain".to_string(),
            seed: args.seed,
            config: serde_json::to_value(&cfg)?,
            metrics: None,
            ablation: None,
            loss_trace: Some(trace),
        };
        write_report(&report_path, &report)?;
        println!("report: {}", report_path.display());
    }
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> anyhow::Result<()> {
    let (model, prompts) = load_ckpt(&args.ckpt)?;
    let cfg = args.flags.build(model.config.layers)?;
    let prompts = if args.prompts {
        Some(prompts.ok_or_else(|| anyhow!("checkpoint has no tuned prompt section"))?)
    } else {
        None
    };
    let scene_text = std::fs::read_to_string(&args.scene_json)
        .with_context(|| format!("reading {}", args.scene_json.display()))?;
    let record: SceneRecord = serde_json::from_str(&scene_text)?;
    let scene = record.into_scene();
    let caption = parse_caption(&args.caption, &model.vocab)?;
    let image = render(&scene);
    let score = score_pair(
        &model,
        prompts.as_ref(),
        &image,
        &caption,
        &cfg,
        scene.seed,
    )?;

    println!("raw score f = {:.12}", score.raw);
    println!("calibrated  = {:.12}", score.calibrated);
    let mut rows = Vec::new();
    for pass in &score.passes {
        for hs in &pass.per_head {
            let weight = pass
                .head_weights
                .iter()
                .find(|(l, _)| *l == hs.layer)
                .map(|(_, ws)| ws[hs.head])
                .unwrap_or(f64::NAN);
            rows.push(vec![
                format!("{:.2}", pass.noise_level),
                pass.timestep.to_string(),
                hs.layer.to_string(),
                hs.head.to_string(),
                format!("{:.6}", hs.score),
                format!("{:.4}", weight),
            ]);
        }
    }
    println!(
        "{}",
        render_table(&["noise", "t", "layer", "head", "score", "weight"], &rows)
    );
    Ok(())
}

fn cmd_tune(args: TuneArgs) -> anyhow::Result<()> {
    let (model, _) = load_ckpt(&args.ckpt)?;
    let train = load_split(&args.data, SplitFlag::Train)?;
    let score_cfg = args.flags.build(model.config.layers)?;
    let tune_cfg = TuneConfig {
        shots: args.shots,
        steps: args.steps,
        batch_size: args.batch_size,
        optim: OptimConfig {
            lr: args.lr,
            momentum: args.momentum,
        },
        seed: args.seed,
        loss_mode: match args.loss_mode {
            LossFlag::Binary => LossMode::Binary,
            LossFlag::Multiclass => LossMode::Multiclass,
        },
    };
    let (prompts, trace) = few_shot_tune(&model, &train, &tune_cfg, &score_cfg)?;
    save_checkpoint(&args.out, &model, Some(&prompts))?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!(
            "tuned {} steps on {} shots: loss {first:.6} -> {last:.6}",
            trace.len(),
            tune_cfg.shots
        );
    }
    println!("checkpoint: {}", args.out.display());
    if let Some(report_path) = args.report {
        let report = RunReport {
            command: "tune".to_string(),
            seed: args.seed,
            config: serde_json::json!({
                "tune": serde_json::to_value(tune_cfg)?,
                "score": serde_json::to_value(&score_cfg)?,
            }),
            metrics: None,
            ablation: None,
            loss_trace: Some(trace),
        };
        write_report(&report_path, &report)?;
        println!("report: {}", report_path.display());
    }
    Ok(())
}

fn print_metrics(label: &str, m: &Metrics) {
    println!("{label}");
    println!("{}", render_table(&METRICS_HEADERS, &[metrics_cells(m)]));
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (model, prompts) = load_ckpt(&args.ckpt)?;
    let split = load_split(&args.data, args.split)?;
    let cfg = args.flags.build(model.config.layers)?;
    let prompts = if args.prompts {
        Some(prompts.ok_or_else(|| anyhow!("checkpoint has no tuned prompt section"))?)
    } else {
        None
    };
    let metrics = evaluate(&model, prompts.as_ref(), &split, &cfg)?;
    print_metrics("evaluation:", &metrics);
    let report = RunReport {
        command: "eval".to_string(),
        seed: args.seed,
        config: serde_json::json!({
            "score": serde_json::to_value(&cfg)?,
            "data": args.data.display().to_string(),
            "split": match args.split { SplitFlag::Train => "train", SplitFlag::Eval => "eval" },
            "prompts": args.prompts,
        }),
        metrics: Some(metrics),
        ablation: None,
        loss_trace: None,
    };
    write_report(&args.report, &report)?;
    println!("report: {}", args.report.display());
    Ok(())
}

/// Layer subsets swept by `ablate --axis layers`: trailing windows of
/// growing width, ending at the full set.
fn layer_subsets(layers: usize) -> Vec<Vec<usize>> {
    (1..=layers)
        .map(|width| ((layers - width)..layers).collect())
        .collect()
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let (model, _) = load_ckpt(&args.ckpt)?;
    let split = load_split(&args.data, args.split)?;
    let base = ScoreConfig::default_for(model.config.layers);
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut run = |setting: String, cfg: ScoreConfig| -> anyhow::Result<()> {
        let metrics = evaluate(&model, None, &split, &cfg)?;
        rows.push(AblationRow { setting, metrics });
        Ok(())
    };
    match args.axis {
        AxisFlag::Layers => {
            for subset in layer_subsets(model.config.layers) {
                let mut cfg = base.clone();
                cfg.layer_set = subset.clone();
                let label = subset
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(",");
                run(format!("layers={label}"), cfg)?;
            }
        }
        AxisFlag::Heads => {
            for (name, mode) in [("uniform", HeadMode::Uniform), ("dynamic", HeadMode::Dynamic)]
            {
                let mut cfg = base.clone();
                cfg.head_mode = mode;
                run(format!("heads={name}"), cfg)?;
            }
        }
        AxisFlag::Pooling => {
            for (name, pooling) in [
                ("lse", Pooling::Lse),
                ("max", Pooling::Max),
                ("cosine", Pooling::Cosine),
            ] {
                let mut cfg = base.clone();
                cfg.pooling = pooling;
                run(format!("pooling={name}"), cfg)?;
            }
        }
        AxisFlag::Noise => {
            for level in dsd::scoring::ENSEMBLE_LEVELS {
                let mut cfg = base.clone();
                cfg.noise_levels = vec![level];
                run(format!("noise={level}"), cfg)?;
            }
            run("noise=ensemble".to_string(), base.clone().with_ensemble())?;
        }
    }

    let table_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.setting.clone()];
            cells.extend(metrics_cells(&r.metrics));
            cells
        })
        .collect();
    let mut headers = vec!["setting"];
    headers.extend(METRICS_HEADERS);
    println!("{}", render_table(&headers, &table_rows));

    let report = RunReport {
        command: "ablate".to_string(),
        seed: args.seed,
        config: serde_json::json!({
            "axis": match args.axis {
                AxisFlag::Layers => "layers",
                AxisFlag::Heads => "heads",
                AxisFlag::Pooling => "pooling",
                AxisFlag::Noise => "noise",
            },
            "base": serde_json::to_value(&base)?,
            "data": args.data.display().to_string(),
        }),
        metrics: None,
        ablation: Some(rows),
        loss_trace: None,
    };
    write_report(&args.report, &report)?;
    println!("report: {}", args.report.display());
    Ok(())
}
