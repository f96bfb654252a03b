use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

mod config;
mod sweep;

use config::{FinetuneConfig, PruneConfig, SweepArchConfig, SweepFreqConfig};
use rosita_core::factorization::factorize_embedding;
use rosita_core::io::{load_checkpoint, save_checkpoint, Checkpoint, TaskData};
use rosita_core::model::Model;
use rosita_core::pipeline::{evaluate, run_plan, Preset, PresetSettings, RunOptions, StagePlan};
use rosita_core::pruning::{aggregate_unit_scores, cross_entropy_gradients, weight_taylor_scores, ImportanceLedger, ScoreMode};
use rosita_core::synthetic::{write_task_dir, SyntheticConfig};

#[derive(Parser)]
#[command(name = "rosita", version, about = "Structured pruning, embedding factorization and multi-stage distillation for small BERT-style encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Task directory (task.json, train.tsv, dev.tsv, optional aug.tsv and vocab.json)
    #[arg(long)]
    data: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Write the built-in synthetic task to a directory
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON overriding the generator settings
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from scratch with cross-entropy
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Prune a checkpoint to a target in one step, then train it
    PruneOneStep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Execute a stage plan
    RunPlan {
        #[arg(long)]
        plan: PathBuf,
        /// Fine-tuned teacher; otherwise the plan's first teacher-free stage provides it
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write the plan of a preset strategy as JSON
    Preset {
        /// one_step_one_stage | one_step_two_stage | iterative_width_two_stage | iterative_width_depth_three_stage
        #[arg(long)]
        name: String,
        /// JSON with the preset settings
        #[arg(long)]
        config: PathBuf,
        /// Output file
        #[arg(long)]
        out: PathBuf,
    },
    /// One-step prune a teacher to several architectures and train each
    SweepArchitectures {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Iterative pruning at several prune fractions and learning-rate schedules
    SweepFrequency {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated prune fractions, e.g. 0.01,0.1,0.8
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
        /// Comma-separated schedules: linear, constant
        #[arg(long = "lr-schedule", value_delimiter = ',', default_value = "linear")]
        lr_schedule: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Dev-set metric of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print config, parameter count and importance summaries
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// With task data, Taylor scores are averaged over the training set
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Replace the dense token embedding by a rank-r SVD factor pair
    FactorizeEmbedding {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_data(dir: &Path) -> Result<TaskData> {
    TaskData::load_dir(dir).with_context(|| format!("loading task data from {}", dir.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(load_checkpoint(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?
        .model)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn report(out: &rosita_core::pipeline::PlanOutput) {
    for s in &out.stages {
        let ck = s.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        println!("{:<24} metric {:.4}  params {:>9}  {ck}", s.name, s.final_metric, s.param_count);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, config, seed } => {
            let mut cfg: SyntheticConfig = match config {
                Some(p) => read_json(&p)?,
                None => SyntheticConfig::default(),
            };
            cfg.seed = seed;
            let data = write_task_dir(&cfg, &out)?;
            println!(
                "wrote {}: vocab {}, train {}, aug {}, dev {}",
                out.display(),
                data.vocab.len(),
                data.train.len(),
                data.augmented.len(),
                data.dev.len()
            );
        }
        Command::Finetune { config, common } => {
            let cfg: FinetuneConfig = read_json(&config)?;
            let data = load_data(&common.data)?;
            let plan = cfg.plan(&data);
            let out = run_plan(&plan, &data, &options(&common, None))?;
            report(&out);
        }
        Command::PruneOneStep { config, checkpoint, common } => {
            let cfg: PruneConfig = read_json(&config)?;
            let data = load_data(&common.data)?;
            let plan = cfg.plan();
            let out = run_plan(&plan, &data, &options(&common, Some(load_model(&checkpoint)?)))?;
            report(&out);
        }
        Command::RunPlan { plan, checkpoint, common } => {
            let text = std::fs::read_to_string(&plan).with_context(|| format!("reading {}", plan.display()))?;
            let plan = StagePlan::from_json(&text)?;
            let data = load_data(&common.data)?;
            let teacher = checkpoint.as_deref().map(load_model).transpose()?;
            let out = run_plan(&plan, &data, &options(&common, teacher))?;
            report(&out);
        }
        Command::Preset { name, config, out } => {
            let settings: PresetSettings = read_json(&config)?;
            let plan = settings.plan(Preset::parse(&name)?);
            plan.validate()?;
            std::fs::write(&out, plan.to_json()?)?;
            println!("wrote {}", out.display());
        }
        Command::SweepArchitectures { config, checkpoint, common } => {
            let cfg: SweepArchConfig = read_json(&config)?;
            let data = load_data(&common.data)?;
            let teacher = load_model(&checkpoint)?;
            sweep::architectures(&cfg, &teacher, &data, &common.out, common.seed)?;
        }
        Command::SweepFrequency {
            config,
            checkpoint,
            fractions,
            lr_schedule,
            common,
        } => {
            let cfg: SweepFreqConfig = read_json(&config)?;
            let data = load_data(&common.data)?;
            let teacher = load_model(&checkpoint)?;
            let kinds = lr_schedule.iter().map(|s| config::parse_lr_kind(s)).collect::<Result<Vec<_>>>()?;
            if fractions.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
                bail!("prune fractions must lie in (0, 1]");
            }
            sweep::frequency(&cfg, &teacher, &data, &fractions, &kinds, &common.out, common.seed)?;
        }
        Command::Eval { checkpoint, data } => {
            let model = load_model(&checkpoint)?;
            let data = load_data(&data)?;
            let value = evaluate(&model, &data.dev, data.spec.metric)?;
            println!("{:?} {value:.6}", data.spec.metric);
        }
        Command::Inspect { checkpoint, data } => inspect(&checkpoint, data.as_deref())?,
        Command::FactorizeEmbedding { checkpoint, rank, out } => {
            let mut ck = load_checkpoint(&checkpoint)?;
            let before = ck.model.param_count();
            factorize_embedding(&mut ck.model, rank)?;
            let ck = Checkpoint {
                adam: None,
                ..ck
            };
            std::fs::create_dir_all(&out)?;
            let path = out.join("factorized.rsta");
            save_checkpoint(&path, &ck)?;
            println!(
                "rank {rank}: {before} -> {} parameters, wrote {}",
                ck.model.param_count(),
                path.display()
            );
        }
    }
    Ok(())
}

fn options(common: &Common, teacher: Option<Model>) -> RunOptions {
    RunOptions {
        seed: common.seed,
        out_dir: Some(common.out.clone()),
        teacher,
    }
}

fn summarize(name: &str, scores: &[f64]) {
    if scores.is_empty() {
        return;
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    println!("  {name:<10} n={:<5} min {min:.4e}  mean {mean:.4e}  max {max:.4e}", scores.len());
}

fn inspect(checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let m = &ck.model;
    println!("{}", serde_json::to_string_pretty(&m.config)?);
    println!("parameters {}", m.param_count());
    println!("seed {}  stage {}", ck.seed, ck.stage);
    if let Some(s) = &m.singular_values {
        summarize("sigma", s);
    }
    let Some(dir) = data else {
        return Ok(());
    };
    let data = load_data(dir)?;
    let train = data.train.labeled();
    let mut ledger = ImportanceLedger::new(ScoreMode::OneStepAverage, &m.config);
    for idx in train.sequential(32) {
        let (batch, labels) = train.batch(&idx)?;
        let labels: Vec<usize> = labels.into_iter().flatten().collect();
        let (_, grads) = cross_entropy_gradients(m, &batch, &labels)?;
        let w = weight_taylor_scores(&m.params, &grads)?;
        ledger.record(ScoreMode::OneStepAverage, &aggregate_unit_scores(&w, &m.config))?;
    }
    let scores = ledger.report();
    println!("Taylor importance averaged over {} batches:", ledger.batches_seen);
    for l in 0..m.config.layers {
        println!(" layer {l}");
        summarize("heads", &scores.heads[l]);
        summarize("neurons", &scores.neurons[l]);
    }
    summarize("ranks", &scores.ranks);
    Ok(())
}
