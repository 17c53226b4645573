//! Command-line front end: data generation, the three-stage training
//! procedure, evaluation, the robustness protocol, the selection-kernel
//! benchmark, and length statistics.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ltp_core::bench::{report_csv, run_bench, BenchConfig};
use ltp_core::datagen::{generate, length_stats, read_jsonl, write_jsonl, Example, TaskSpec};
use ltp_core::encoder::{load_checkpoint, save_checkpoint, EncoderModel, ModelConfig};
use ltp_core::experiments::{fixed_schedule, run_robustness, run_sweep};
use ltp_core::pruning::PruneContext;
use ltp_core::training::{
    binarize_and_fix, evaluate, init_thresholds, train_hard, train_none, train_soft,
    PipelineConfig, PipelineOutcome, Stage, StageConfig, TrainReport,
};

#[derive(Parser)]
#[command(name = "ltp", version, about = "Learned token pruning lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/eval datasets and their length statistics.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override the configured generation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the training procedure: pretrain, soft pruning, binarize, hard
    /// fine-tune. With --sweep, repeat over the configured lambda and
    /// temperature lists and emit a summary CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the soft-stage regularization weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Sweep the configured lambda/temperature lists instead of a
        /// single run.
        #[arg(long)]
        sweep: bool,
    },
    /// Evaluate a checkpoint on a dataset under a pruning mode.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Hard)]
        mode: ModeArg,
        /// Final-layer threshold for manual mode.
        #[arg(long)]
        theta_final: Option<f64>,
        /// Final-layer retain ratio for topk/spatten modes.
        #[arg(long)]
        final_ratio: Option<f64>,
        /// Anchor top-k keep counts to this length instead of each
        /// sequence's own length.
        #[arg(long)]
        ref_len: Option<usize>,
        /// Sweep the config's ratio list (topk/spatten) and print a CSV.
        #[arg(long)]
        sweep_ratios: bool,
        /// Config file providing the ratio list for --sweep-ratios.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Robustness-to-length protocol: train on short sequences, evaluate
    /// across length splits against a fixed top-k schedule baseline.
    Robust {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Threshold-vs-top-k selection latency benchmark.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV output path (default bench.csv in the output directory, or
        /// the working directory without a config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Length statistics of a JSONL dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Reference dataset for the KL divergence column.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    None,
    Hard,
    Manual,
    Topk,
    Spatten,
}

/// Everything one experiment needs, read from a TOML file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    task: TaskSpec,
    model: ModelConfig,
    train_count: usize,
    eval_count: usize,
    pretrain: StageConfig,
    soft: StageConfig,
    hard: StageConfig,
    /// Initial final-layer threshold; earlier layers rise linearly to it.
    theta_final: f64,
    lambda_sweep: Vec<f64>,
    temperature_sweep: Vec<f64>,
    ratio_sweep: Vec<f64>,
    /// Final retain ratio of the fixed-schedule robustness baseline.
    baseline_final_ratio: f64,
    out_dir: String,
    /// Model initialization seed.
    seed: u64,
    bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskSpec {
                vocab: 64,
                num_classes: 4,
                n_signal: 3,
                signal_ids_per_class: 4,
                length_mu: 3.33,
                length_sigma: 0.35,
                n_max: 64,
                seed: 0,
            },
            model: ModelConfig {
                layers: 4,
                heads: 4,
                d_model: 64,
                d_head: 16,
                d_ffn: 256,
                vocab: 64,
                n_max: 64,
                num_classes: 4,
            },
            train_count: 256,
            eval_count: 128,
            pretrain: StageConfig {
                stage: Stage::Pretrain,
                epochs: 3,
                lr: 1e-3,
                temperature: None,
                lambda: None,
                batch_size: 16,
                seed: 1,
            },
            soft: StageConfig {
                stage: Stage::Soft,
                epochs: 2,
                lr: 1e-3,
                temperature: Some(1e-3),
                lambda: Some(0.05),
                batch_size: 16,
                seed: 2,
            },
            hard: StageConfig {
                stage: Stage::Hard,
                epochs: 2,
                lr: 1e-3,
                temperature: None,
                lambda: None,
                batch_size: 16,
                seed: 3,
            },
            theta_final: 0.01,
            lambda_sweep: vec![0.001, 0.05, 0.2],
            temperature_sweep: vec![1e-3],
            ratio_sweep: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            baseline_final_ratio: 0.5,
            out_dir: "runs/default".to_string(),
            seed: 0,
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            pretrain: self.pretrain.clone(),
            soft: self.soft.clone(),
            hard: self.hard.clone(),
            theta_final: self.theta_final,
        }
    }
}

enum CliError {
    /// Bad invocation or configuration: exit code 1.
    Usage(String),
    /// Failure while running: exit code 2.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {}", m),
            CliError::Runtime(m) => write!(f, "error: {}", m),
        }
    }
}

impl From<ltp_core::Error> for CliError {
    fn from(e: ltp_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", e);
        std::process::exit(match e {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        });
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Gen { config, out_dir, seed } => cmd_gen(&config, out_dir, seed),
        Cmd::Train { config, out_dir, seed, lambda, sweep } => {
            cmd_train(&config, out_dir, seed, lambda, sweep)
        }
        Cmd::Eval {
            checkpoint,
            data,
            mode,
            theta_final,
            final_ratio,
            ref_len,
            sweep_ratios,
            config,
        } => cmd_eval(
            &checkpoint,
            &data,
            mode,
            theta_final,
            final_ratio,
            ref_len,
            sweep_ratios,
            config,
        ),
        Cmd::Robust { config, out_dir, seed } => cmd_robust(&config, out_dir, seed),
        Cmd::Bench { config, out } => cmd_bench(config, out),
        Cmd::Stats { data, reference, bins } => cmd_stats(&data, reference, bins),
    }
}

fn load_config(path: &Path, out_dir: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {}", path.display(), e)))?;
    let mut cfg: RunConfig =
        toml::from_str(&text).map_err(|e| usage(format!("bad config {}: {}", path.display(), e)))?;
    if let Some(dir) = out_dir {
        cfg.out_dir = dir.display().to_string();
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.task.seed = s;
    }
    cfg.task.validate().map_err(|e| usage(e.to_string()))?;
    cfg.model.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {}", dir.display(), e)))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {}", path.display(), e)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(path, &json)
}

fn load_dataset(path: &Path) -> Result<Vec<Example>, CliError> {
    if !path.exists() {
        return Err(usage(format!("dataset {} does not exist (run gen first?)", path.display())));
    }
    Ok(read_jsonl(path)?)
}

fn cmd_gen(config: &Path, out_dir: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(config, out_dir, seed)?;
    let dir = ensure_out_dir(&cfg)?;

    let train = generate(&cfg.task, cfg.train_count)?;
    let mut eval_task = cfg.task.clone();
    eval_task.seed = cfg.task.seed.wrapping_add(1);
    let eval = generate(&eval_task, cfg.eval_count)?;

    write_jsonl(&dir.join("train.jsonl"), &train)?;
    write_jsonl(&dir.join("eval.jsonl"), &eval)?;

    let train_lengths: Vec<usize> = train.iter().map(|e| e.len()).collect();
    let eval_lengths: Vec<usize> = eval.iter().map(|e| e.len()).collect();
    let bins = 10;
    let stats = serde_json::json!({
        "train": length_stats(&train_lengths, bins, None)?,
        "eval": length_stats(&eval_lengths, bins, Some(&train_lengths))?,
    });
    write_json(&dir.join("stats.json"), &stats)?;
    println!("{}", serde_json::to_string_pretty(&stats).map_err(|e| CliError::Runtime(e.to_string()))?);
    println!(
        "wrote {} train / {} eval sequences to {}",
        train.len(),
        eval.len(),
        dir.display()
    );
    Ok(())
}

fn write_stage_report(dir: &Path, name: &str, report: &TrainReport) -> Result<(), CliError> {
    let mut lines = String::new();
    for rec in &report.epochs {
        lines.push_str(&serde_json::to_string(rec).map_err(|e| CliError::Runtime(e.to_string()))?);
        lines.push('\n');
    }
    write_text(&dir.join(format!("{}.jsonl", name)), &lines)
}

fn cmd_train(
    config: &Path,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    lambda: Option<f64>,
    sweep: bool,
) -> Result<(), CliError> {
    let mut cfg = load_config(config, out_dir, seed)?;
    if let Some(l) = lambda {
        cfg.soft.lambda = Some(l);
    }
    let dir = ensure_out_dir(&cfg)?;
    let train = load_dataset(&dir.join("train.jsonl"))?;
    let eval = load_dataset(&dir.join("eval.jsonl"))?;

    if sweep {
        if cfg.lambda_sweep.is_empty() || cfg.temperature_sweep.is_empty() {
            return Err(usage("sweep lists must be non-empty for --sweep"));
        }
        let report = run_sweep(
            &cfg.model,
            cfg.seed,
            &cfg.pipeline(),
            &cfg.lambda_sweep,
            &cfg.temperature_sweep,
            &train,
            &eval,
        )?;
        write_json(&dir.join("sweep.json"), &report)?;
        write_text(&dir.join("sweep_summary.csv"), &report.csv())?;
        print!("{}", report.csv());
        return Ok(());
    }

    let reports_dir = dir.join("reports");
    fs::create_dir_all(&reports_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {}", reports_dir.display(), e)))?;

    let model = EncoderModel::new(cfg.model.clone(), cfg.seed)?;

    let pretrain = train_none(&model, &train, &cfg.pretrain)?;
    write_stage_report(&reports_dir, "pretrain", &pretrain)?;
    save_checkpoint(&dir.join("pretrain.ckpt.json"), &model, None)?;
    if pretrain.diverged {
        return Err(CliError::Runtime("pretraining diverged".into()));
    }

    let temperature = cfg.soft.temperature.unwrap_or(1e-3);
    let mut thresholds = init_thresholds(cfg.theta_final, cfg.model.layers, temperature)?;
    let soft = train_soft(&model, &thresholds, &train, &cfg.soft)?;
    write_stage_report(&reports_dir, "soft", &soft)?;
    save_checkpoint(&dir.join("soft.ckpt.json"), &model, Some(&thresholds))?;
    if soft.diverged {
        return Err(CliError::Runtime("soft stage diverged".into()));
    }

    let ctx = binarize_and_fix(&mut thresholds);
    let hard = train_hard(&model, &ctx, &train, &cfg.hard)?;
    write_stage_report(&reports_dir, "hard", &hard)?;
    save_checkpoint(&dir.join("hard.ckpt.json"), &model, Some(&thresholds))?;
    if hard.diverged {
        return Err(CliError::Runtime("hard stage diverged".into()));
    }

    let final_eval = evaluate(&model, &ctx, &eval)?;
    let outcome = PipelineOutcome {
        pretrain,
        soft,
        hard,
        final_eval,
        thresholds: thresholds.values(),
    };
    write_json(&dir.join("pipeline.json"), &outcome)?;
    println!(
        "accuracy {:.4}  relative flops {:.4}  thresholds {:?}",
        outcome.final_eval.accuracy, outcome.final_eval.relative_flops, outcome.thresholds
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    mode: ModeArg,
    theta_final: Option<f64>,
    final_ratio: Option<f64>,
    ref_len: Option<usize>,
    sweep_ratios: bool,
    config: Option<PathBuf>,
) -> Result<(), CliError> {
    let (model, thresholds) = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    let layers = model.config.layers;

    if sweep_ratios {
        if mode != ModeArg::Topk && mode != ModeArg::Spatten {
            return Err(usage("--sweep-ratios requires --mode topk or spatten"));
        }
        let cfg_path = config.ok_or_else(|| usage("--sweep-ratios requires --config"))?;
        let cfg = load_config(&cfg_path, None, None)?;
        if cfg.ratio_sweep.is_empty() {
            return Err(usage("ratio_sweep must be non-empty for --sweep-ratios"));
        }
        let mut csv = String::from("ratio,accuracy,relative_flops\n");
        for &ratio in &cfg.ratio_sweep {
            let ctx = make_ctx(mode, &model, &thresholds, theta_final, Some(ratio), ref_len)?;
            let report = evaluate(&model, &ctx, &dataset)?;
            csv.push_str(&format!("{},{:.4},{:.4}\n", ratio, report.accuracy, report.relative_flops));
        }
        print!("{}", csv);
        return Ok(());
    }

    let ctx = make_ctx(mode, &model, &thresholds, theta_final, final_ratio, ref_len)?;
    ctx.validate(layers).map_err(|e| usage(e.to_string()))?;
    let report = evaluate(&model, &ctx, &dataset)?;
    let out = serde_json::json!({
        "accuracy": report.accuracy,
        "relative_flops": report.relative_flops,
        "mean_entering": report.mean_entering,
        "mean_retained": report.mean_retained,
        "thresholds": ctx.thresholds.as_ref().map(|t| t.values()),
    });
    println!("{}", serde_json::to_string_pretty(&out).map_err(|e| CliError::Runtime(e.to_string()))?);
    Ok(())
}

fn make_ctx(
    mode: ModeArg,
    model: &EncoderModel,
    thresholds: &Option<ltp_core::ThresholdSet>,
    theta_final: Option<f64>,
    final_ratio: Option<f64>,
    ref_len: Option<usize>,
) -> Result<PruneContext, CliError> {
    let layers = model.config.layers;
    let ctx = match mode {
        ModeArg::None => PruneContext::none(),
        ModeArg::Hard => {
            let mut ts = thresholds
                .clone()
                .ok_or_else(|| usage("checkpoint has no thresholds; hard mode needs a soft or hard stage checkpoint"))?;
            ts.freeze();
            PruneContext::hard(ts)
        }
        ModeArg::Manual => {
            let theta = theta_final.ok_or_else(|| usage("manual mode requires --theta-final"))?;
            PruneContext::manual(theta, layers, 1e-3).map_err(|e| usage(e.to_string()))?
        }
        ModeArg::Topk => {
            let ratio = final_ratio.ok_or_else(|| usage("topk mode requires --final-ratio"))?;
            let mut ctx =
                PruneContext::topk(fixed_schedule(layers, ratio).map_err(|e| usage(e.to_string()))?);
            ctx.schedule_ref_len = ref_len;
            ctx
        }
        ModeArg::Spatten => {
            let ratio = final_ratio.ok_or_else(|| usage("spatten mode requires --final-ratio"))?;
            let mut ctx = PruneContext::spatten(ratio, layers).map_err(|e| usage(e.to_string()))?;
            ctx.schedule_ref_len = ref_len;
            ctx
        }
    };
    Ok(ctx)
}

fn cmd_robust(config: &Path, out_dir: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(config, out_dir, seed)?;
    let dir = ensure_out_dir(&cfg)?;
    let train = load_dataset(&dir.join("train.jsonl"))?;
    let eval = load_dataset(&dir.join("eval.jsonl"))?;
    let report = run_robustness(
        &cfg.model,
        cfg.seed,
        &cfg.pipeline(),
        cfg.baseline_final_ratio,
        &train,
        &eval,
    )?;
    write_json(&dir.join("robust.json"), &report)?;
    write_text(&dir.join("robust.csv"), &report.csv())?;
    print!("{}", report.csv());
    Ok(())
}

fn cmd_bench(config: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    let (bench_cfg, default_out) = match config {
        Some(path) => {
            let cfg = load_config(&path, None, None)?;
            let dir = ensure_out_dir(&cfg)?;
            (cfg.bench, dir.join("bench.csv"))
        }
        None => (BenchConfig::default(), PathBuf::from("bench.csv")),
    };
    bench_cfg.validate().map_err(|e| usage(e.to_string()))?;
    let result = run_bench(&bench_cfg)?;
    let csv = report_csv(&result);
    let out_path = out.unwrap_or(default_out);
    write_text(&out_path, &csv)?;
    for cell in &result.cells {
        println!(
            "n={:5} ratio={:.1}  threshold {:9.1} ns  topk {:9.1} ns  slowdown {:.2}x{}",
            cell.length,
            cell.ratio,
            cell.threshold.mean_ns,
            cell.topk.mean_ns,
            cell.slowdown,
            if cell.timer_warning { "  (timer granularity warning)" } else { "" }
        );
    }
    println!("csv written to {}", out_path.display());
    Ok(())
}

fn cmd_stats(data: &Path, reference: Option<PathBuf>, bins: usize) -> Result<(), CliError> {
    let dataset = load_dataset(data)?;
    let lengths: Vec<usize> = dataset.iter().map(|e| e.len()).collect();
    let ref_lengths: Option<Vec<usize>> = match reference {
        Some(path) => Some(load_dataset(&path)?.iter().map(|e| e.len()).collect()),
        None => None,
    };
    let stats = length_stats(&lengths, bins, ref_lengths.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&stats).map_err(|e| CliError::Runtime(e.to_string()))?);
    Ok(())
}
