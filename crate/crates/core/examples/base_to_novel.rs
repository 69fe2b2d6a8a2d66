//! Full base-to-novel protocol from a TOML config, writing the config snapshot,
//! manifest, training log, checkpoint and metrics table.
//!
//! cargo run --release --example base_to_novel -- [config.toml] [out_dir]

use std::path::PathBuf;

use prompt_lab::experiment::{run_base_to_novel, ExperimentConfig};

fn main() -> prompt_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args.next().map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
    });
    let out = args.next().unwrap_or_else(|| "runs/base_to_novel".into());

    let mut cfg = ExperimentConfig::load(&config)?;
    cfg.out_dir = Some(out.clone().into());
    let report = run_base_to_novel(&cfg)?;

    let first = report.train.log.first().expect("at least one epoch");
    let last = report.train.log.last().expect("at least one epoch");
    println!(
        "epoch {:>3}: loss {:.4}  train acc {:.3}",
        first.epoch, first.total, first.base_accuracy
    );
    println!(
        "epoch {:>3}: loss {:.4}  train acc {:.3}",
        last.epoch, last.total, last.base_accuracy
    );
    println!(
        "loss on all shots {:.4} -> {:.4} ({:.1}% lower)",
        report.train.initial_loss,
        report.train.final_loss,
        100.0 * (1.0 - report.train.final_loss / report.train.initial_loss)
    );
    for s in &report.scores {
        println!(
            "{:<10} base {:.4}  novel {:.4}  hm {:.4}",
            s.strategy, s.base, s.novel, s.hm
        );
    }
    println!("artifacts in {out}");
    Ok(())
}
