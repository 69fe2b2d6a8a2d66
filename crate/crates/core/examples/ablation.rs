//! Sweep prompt length, prompt depth and the auxiliary losses on a short schedule.
//!
//! cargo run --release --example ablation -- [out_dir]

use prompt_lab::experiment::{run_ablate, AblationAxis, ExperimentConfig};

fn main() -> prompt_lab::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "runs/ablate".into());
    let mut cfg = ExperimentConfig {
        seed: 1,
        weights_seed: 1,
        out_dir: Some(out.clone().into()),
        ..ExperimentConfig::default()
    };
    cfg.dataset.seed = 1;
    cfg.training.epochs = 40;
    cfg.training.shots = 8;

    let sweeps: [(AblationAxis, &[&str]); 3] = [
        (AblationAxis::Length, &["0", "4", "16"]),
        (AblationAxis::Depth, &["1", "2", "4"]),
        (
            AblationAxis::Loss,
            &["full", "no-aug", "no-consistency", "ce-only"],
        ),
    ];
    for (axis, values) in sweeps {
        let values: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        let report = run_ablate(&cfg, axis, &values)?;
        println!("{axis}");
        for row in &report.rows {
            println!(
                "  {:<15} base {:.3}  novel {:.3}  hm {:.3}",
                row.value, row.base, row.novel, row.hm
            );
        }
    }
    println!("CSV tables in {out}");
    Ok(())
}
