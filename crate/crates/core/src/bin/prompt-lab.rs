use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prompt_lab::experiment::{
    run_ablate, run_base_to_novel, run_cross_dataset, run_eval, run_segment, AblationAxis,
    ExperimentConfig, Protocol,
};
use prompt_lab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "prompt-lab",
    version,
    about = "Prompt tuning experiments on synthetic shape images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed (prompt init, sampling, batch order).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSVs, checkpoints, heatmaps and the config snapshot.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ensemble strategy: equal, confidence, threshold or threshold:<theta>.
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train prompts (base-to-novel, or cross-dataset when the config says so).
    Train(Common),
    /// Evaluate a saved checkpoint on the configured base/novel split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train visual prompts and score attention/GradCAM heatmaps as segmentations.
    Segment(Common),
    /// Sweep one hyperparameter and tabulate accuracies.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// depth, length, loss or ensemble; defaults to the config's axis.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated axis values; defaults to the config's or the axis defaults.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        // An unreadable config is a usage problem, not a failed run.
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(s) = &common.strategy {
        cfg.strategy = s.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_scores(scores: &[prompt_lab::experiment::StrategyScores]) {
    println!("strategy,base,novel,hm");
    for s in scores {
        println!("{},{:.4},{:.4},{:.4}", s.strategy, s.base, s.novel, s.hm);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load(&common)?;
            if cfg.protocol == Protocol::CrossDataset {
                let r = run_cross_dataset(&cfg, &cfg.cross_dataset.targets)?;
                println!("role,seed,accuracy");
                for row in std::iter::once(&r.source).chain(&r.targets) {
                    println!("{},{},{:.4}", row.role, row.seed, row.accuracy);
                }
            } else {
                let r = run_base_to_novel(&cfg)?;
                println!(
                    "steps {} loss {:.4} -> {:.4}",
                    r.train.steps, r.train.initial_loss, r.train.final_loss
                );
                print_scores(&r.scores);
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            print_scores(&run_eval(&cfg, &checkpoint)?);
        }
        Command::Segment(common) => {
            let cfg = load(&common)?;
            let r = run_segment(&cfg)?;
            println!("model,token,method,pixacc,miou,map");
            for row in &r.rows {
                let m = &row.metrics;
                println!(
                    "{},{},{},{:.4},{:.4},{:.4}",
                    row.model, row.token, row.method, m.pix_acc, m.miou, m.map
                );
            }
            let (before, after) = r.cls_foreground_mass;
            println!("cls foreground mass {before:.4} -> {after:.4}");
        }
        Command::Ablate {
            common,
            axis,
            values,
        } => {
            let cfg = load(&common)?;
            let axis: AblationAxis = axis.as_deref().unwrap_or(&cfg.ablate.axis).parse()?;
            let values = if values.is_empty() {
                cfg.ablate.values.clone()
            } else {
                values
            };
            let r = run_ablate(&cfg, axis, &values)?;
            println!("{axis},base,novel,hm");
            for row in &r.rows {
                println!(
                    "{},{:.4},{:.4},{:.4}",
                    row.value, row.base, row.novel, row.hm
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        1
    } else {
        2
    }
}
