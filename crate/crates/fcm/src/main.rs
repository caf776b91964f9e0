//! Command-line surface: `pretrain`, `finetune` and `eval`.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fcm::checkpoint::load_checkpoint;
use fcm::data::{load_corpus, read_tasks};
use fcm::eval::{eval_exact_match, eval_multiple_choice, render_summary, write_eval_csv, NormMode};
use fcm::masking::MaskVariant;
use fcm::train::{run_finetune, run_training, Mode, RunConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "fcm", version, about = "Train and evaluate small causal LMs with forgetful causal masking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a model on a text corpus.
    Pretrain(TrainArgs),
    /// Finetune a pre-trained checkpoint on task-formatted text.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a task file.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus: text file (one document per line) or directory of .txt files.
    #[arg(long)]
    corpus: PathBuf,
    /// TOML run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mask_low: Option<f32>,
    #[arg(long)]
    mask_high: Option<f32>,
    /// attention | token | none
    #[arg(long)]
    mask_variant: Option<String>,
    #[arg(long)]
    dropout: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    #[arg(long)]
    ckpt_interval: Option<u64>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Checkpoint to start from.
    #[arg(long)]
    init_ckpt: PathBuf,
    /// Optional task file to evaluate after finetuning.
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    k: usize,
    /// Comma-separated evaluation seeds.
    #[arg(long, default_value = "1,2,3")]
    eval_seeds: String,
    /// Keep forgetful masking active during finetuning.
    #[arg(long)]
    finetune_with_fcm: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Line-delimited JSON task records.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = 0)]
    k: usize,
    #[arg(long, default_value = "1,2,3")]
    eval_seeds: String,
    /// accuracy (multiple-choice) | em (exact match)
    #[arg(long, default_value = "accuracy")]
    metric: String,
    /// Normalize option scores by token count.
    #[arg(long)]
    per_token_norm: bool,
    /// Append per-seed rows to this CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "tasks")]
    task_name: String,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| p.trim().parse::<u64>().with_context(|| format!("bad seed {p:?}")))
        .collect()
}

fn build_run_config(args: &TrainArgs, mode: Mode) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).context("parsing config")?
        }
        None => match mode {
            Mode::Pretrain => RunConfig::desk_pretrain(0),
            Mode::Finetune => RunConfig::desk_finetune(0),
        },
    };
    cfg.mode = mode;
    if let Some(v) = args.mask_low {
        cfg.mask.ratio_low = v;
    }
    if let Some(v) = args.mask_high {
        cfg.mask.ratio_high = v;
    }
    if let Some(v) = &args.mask_variant {
        cfg.mask.variant = match v.as_str() {
            "attention" => MaskVariant::Attention,
            "token" => MaskVariant::Token,
            "none" => MaskVariant::None,
            other => bail!("unknown mask variant {other:?}"),
        };
    }
    if let Some(v) = args.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.steps {
        cfg.total_steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seq_len {
        cfg.model.seq_len = v;
    }
    if args.ckpt_dir.is_some() {
        cfg.ckpt_dir = args.ckpt_dir.clone();
    }
    if let Some(v) = args.ckpt_interval {
        cfg.ckpt_interval = v;
    }
    if args.metrics.is_some() {
        cfg.metrics_path = args.metrics.clone();
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain(args) => {
            let cfg = build_run_config(&args, Mode::Pretrain)?;
            let docs = load_corpus(&args.corpus)?;
            let out = run_training(&cfg, &docs, args.resume.as_deref())?;
            let last = out.metrics.last();
            println!(
                "pretrained {} steps; final loss {}",
                cfg.total_steps,
                last.map(|m| format!("{:.4}", m.loss)).unwrap_or_else(|| "n/a".into())
            );
            if let Some(p) = out.final_ckpt {
                println!("checkpoint: {}", p.display());
            }
        }
        Command::Finetune(args) => {
            let mut cfg = build_run_config(&args.train, Mode::Finetune)?;
            cfg.finetune_with_fcm = args.finetune_with_fcm;
            let docs = load_corpus(&args.train.corpus)?;
            let tasks = match &args.tasks {
                Some(p) => Some(read_tasks(p)?),
                None => None,
            };
            let seeds = parse_seeds(&args.eval_seeds)?;
            let eval_arg = tasks
                .as_ref()
                .map(|t| ("finetune-eval", t.as_slice(), args.k, seeds.as_slice()));
            let out = run_finetune(&cfg, &args.init_ckpt, &docs, eval_arg)?;
            let last = out.metrics.last();
            println!(
                "finetuned {} steps; final loss {}",
                cfg.total_steps,
                last.map(|m| format!("{:.4}", m.loss)).unwrap_or_else(|| "n/a".into())
            );
            if let Some(p) = out.final_ckpt {
                println!("checkpoint: {}", p.display());
            }
            if !out.eval_reports.is_empty() {
                print!("{}", render_summary(&out.eval_reports));
            }
        }
        Command::Eval(args) => {
            let (params, _, cfg, _, step) = load_checkpoint(&args.ckpt)?;
            let tasks = read_tasks(&args.tasks)?;
            let seeds = parse_seeds(&args.eval_seeds)?;
            let norm = if args.per_token_norm { NormMode::PerToken } else { NormMode::None };
            let report = match args.metric.as_str() {
                "accuracy" => eval_multiple_choice(
                    &params,
                    &cfg,
                    &args.task_name,
                    &tasks,
                    args.k,
                    &seeds,
                    norm,
                )?,
                "em" => eval_exact_match(&params, &cfg, &args.task_name, &tasks, args.k, seeds[0])?,
                other => bail!("unknown metric {other:?} (use accuracy or em)"),
            };
            println!(
                "checkpoint step {step}: {} {} = {:.4} over {} instances (seeds {:?})",
                report.task, report.metric, report.value, report.n_instances, report.seeds
            );
            print!("{}", render_summary(std::slice::from_ref(&report)));
            if let Some(out) = &args.out {
                write_eval_csv(out, std::slice::from_ref(&report))?;
                println!("per-seed rows appended to {}", out.display());
            }
        }
    }
    Ok(())
}
