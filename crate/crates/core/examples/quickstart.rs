//! Smallest end-to-end run: generate shapes, tune prompts for a few epochs,
//! report base/novel accuracy for every ensemble strategy.
//!
//! cargo run --release --example quickstart

use prompt_lab::encoders::ModelConfig;
use prompt_lab::experiment::{run_base_to_novel, ExperimentConfig, TrainingConfig};

fn main() -> prompt_lab::Result<()> {
    let cfg = ExperimentConfig {
        seed: 1,
        weights_seed: 1,
        model: ModelConfig {
            visual_prompts: 8,
            ..ModelConfig::default()
        },
        training: TrainingConfig {
            epochs: 60,
            ..TrainingConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let report = run_base_to_novel(&cfg)?;
    println!(
        "{} steps, loss {:.3} -> {:.3}",
        report.train.steps, report.train.initial_loss, report.train.final_loss
    );
    for s in &report.scores {
        println!(
            "{:<10} base {:.3}  novel {:.3}  hm {:.3}",
            s.strategy, s.base, s.novel, s.hm
        );
    }
    Ok(())
}
