//! Command-line front end: phantom generation, training, evaluation,
//! explanation, lesion filling, region aggregation and slice rendering.
//! Every command writes a `run.json` with its config snapshot, seed and
//! SHA-256 hashes of inputs and outputs.

pub mod commands;
pub mod config;
pub mod provenance;
pub mod render;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{Method, RunConfig, SplitSel};
use neurolrp::Regime;

#[derive(Parser, Debug)]
#[command(name = "neurolrp", version, about = "3D CNN classification and relevance heatmaps for volumetric images")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom dataset and its parcellation.
    Synth(SynthArgs),
    /// Train (or fine-tune with --init) on the train split.
    Train(TrainArgs),
    /// Metrics, ROC and predictions on a split.
    Evaluate(EvaluateArgs),
    /// Relevance or sensitivity heatmaps.
    Explain(ExplainArgs),
    /// Copy a dataset with lesions filled.
    FillLesions(FillArgs),
    /// Region-wise relevance of an explain run.
    Regions(RegionsArgs),
    /// Render one slice with a relevance overlay as PPM.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long, value_parser = parse_regime)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint to fine-tune.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitSel>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub only_correct: bool,
    #[arg(long, value_enum)]
    pub split: Option<SplitSel>,
}

#[derive(Args, Debug)]
pub struct FillArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub initial_radius: Option<usize>,
    #[arg(long)]
    pub max_radius: Option<usize>,
    #[arg(long)]
    pub no_noise: bool,
}

#[derive(Args, Debug)]
pub struct RegionsArgs {
    /// Output directory of an explain run.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    /// Label VVOL with a JSON name table beside it.
    #[arg(long)]
    pub parcellation: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub volume: Option<PathBuf>,
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    /// `axis:index`, axis one of x, y, z.
    #[arg(long)]
    pub slice: Option<String>,
    #[arg(long)]
    pub range: Option<f64>,
    /// File name inside the run directory.
    #[arg(long)]
    pub output: Option<String>,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    match s {
        "lesion" => Ok(Regime::Lesion),
        "atrophy" => Ok(Regime::Atrophy),
        _ => Err(format!("unknown regime {s:?} (lesion or atrophy)")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

/// Config file (or defaults) with the command-line overrides applied.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut c.seed, cli.seed);
    match &cli.command {
        Command::Synth(a) => {
            set(&mut c.dataset.n_per_class, a.n_per_class);
            set(&mut c.dataset.regime, a.regime);
            set(&mut c.dataset.holdout_fraction, a.holdout_fraction);
        }
        Command::Train(a) => {
            set_path(&mut c.paths.dataset, a.dataset.clone());
            set_path(&mut c.paths.init, a.init.clone());
            set(&mut c.trials, a.trials);
            set(&mut c.train.max_epochs, a.epochs);
            set(&mut c.train.learning_rate, a.learning_rate);
            set(&mut c.train.batch_size, a.batch_size);
            set(&mut c.train.patience, a.patience);
            if a.no_augment {
                c.train.augment = false;
            }
        }
        Command::Evaluate(a) => {
            set_path(&mut c.paths.model, a.model.clone());
            set_path(&mut c.paths.dataset, a.dataset.clone());
            set(&mut c.evaluate_split, a.split);
        }
        Command::Explain(a) => {
            set_path(&mut c.paths.model, a.model.clone());
            set_path(&mut c.paths.dataset, a.dataset.clone());
            set(&mut c.explain.method, a.method);
            set(&mut c.explain.epsilon, a.epsilon);
            set(&mut c.explain.split, a.split);
            if a.only_correct {
                c.explain.only_correct = true;
            }
        }
        Command::FillLesions(a) => {
            set_path(&mut c.paths.dataset, a.dataset.clone());
            set(&mut c.fill.initial_radius, a.initial_radius);
            set(&mut c.fill.max_radius, a.max_radius);
            if a.no_noise {
                c.fill.noise = false;
            }
        }
        Command::Regions(a) => {
            set_path(&mut c.paths.heatmaps, a.heatmaps.clone());
            set_path(&mut c.paths.parcellation, a.parcellation.clone());
            set(&mut c.top_k, a.top_k);
        }
        Command::Render(a) => {
            set_path(&mut c.paths.volume, a.volume.clone());
            set_path(&mut c.paths.heatmap, a.heatmap.clone());
            set(&mut c.render.slice, a.slice.clone());
            set(&mut c.render.range, a.range);
            set(&mut c.render.output, a.output.clone());
        }
    }
    Ok(c)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Synth(_) => {
            let (m, _) = commands::cmd_synth(&cfg, out)?;
            println!("wrote {} subjects to {}", m.subjects.len(), out.display());
        }
        Command::Train(_) => {
            let t = commands::cmd_train(&cfg, out)?;
            let best = t.history.best();
            println!(
                "trial {} kept epoch {} (val loss {}, val balanced accuracy {})",
                t.trial,
                t.history.best_epoch,
                best.map_or("-".into(), |b| format!("{:.4}", b.val_loss)),
                best.and_then(|b| b.val_balanced_accuracy).map_or("-".into(), |v| format!("{v:.4}"))
            );
        }
        Command::Evaluate(_) => {
            let r = commands::cmd_evaluate(&cfg, out)?;
            println!(
                "balanced accuracy {} auc {}",
                r.metrics.balanced_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
                r.auc.map_or("-".into(), |v| format!("{v:.4}"))
            );
        }
        Command::Explain(_) => {
            let rows = commands::cmd_explain(&cfg, out)?;
            println!("wrote {} heatmaps to {}", rows.len(), out.join("heatmaps").display());
        }
        Command::FillLesions(_) => {
            let m = commands::cmd_fill_lesions(&cfg, out)?;
            println!("filled dataset with {} subjects in {}", m.subjects.len(), out.display());
        }
        Command::Regions(_) => {
            let r = commands::cmd_regions(&cfg, out)?;
            for (i, region) in r.ranked.iter().enumerate() {
                println!("{:>3} {:<36} {:+.3e} {:+.3e}", i + 1, region.name, region.mean_patient, region.mean_control);
            }
        }
        Command::Render(_) => {
            commands::cmd_render(&cfg, out)?;
            println!("wrote {}", out.join(&cfg.render.output).display());
        }
    }
    Ok(())
}
