//! Train once on every class of a source dataset, then score the frozen prompts
//! on datasets drawn from other seeds and from shifted shape families.
//!
//! cargo run --release --example cross_dataset

use prompt_lab::experiment::{run_cross_dataset, ExperimentConfig, TrainingConfig};

fn main() -> prompt_lab::Result<()> {
    let mut cfg = ExperimentConfig {
        seed: 1,
        weights_seed: 1,
        training: TrainingConfig {
            epochs: 100,
            ..TrainingConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.dataset.seed = 1;

    // Same shapes, new draws.
    let same = run_cross_dataset(&cfg, &[1, 7])?;
    println!(
        "source accuracy {:.3} (prompts {})",
        same.source.accuracy,
        &same.source.prompt_hash[..12]
    );
    for t in &same.targets {
        println!("  seed {:>2}: {:.3}", t.seed, t.accuracy);
    }

    // Different shapes under the same class names: the text side no longer matches.
    cfg.cross_dataset.family_offset = 4;
    let shifted = run_cross_dataset(&cfg, &[1])?;
    println!("shifted families: {:.3}", shifted.targets[0].accuracy);
    Ok(())
}
