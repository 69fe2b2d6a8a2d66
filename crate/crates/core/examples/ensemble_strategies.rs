//! How the three ensemble strategies fuse per-branch logits, on hand-made
//! inputs and on one real image.
//!
//! cargo run --example ensemble_strategies

use prompt_lab::datagen::{generate_dataset, Vocabulary};
use prompt_lab::encoders::{EncoderState, ModelConfig, PromptSet};
use prompt_lab::ensemble::{argmax, confidence_weights, BranchLogits, Strategy};
use prompt_lab::tuning::{forward_three_branch, text_bank};

fn show(label: &str, logits: &BranchLogits) -> prompt_lab::Result<()> {
    println!("{label}");
    let branches = logits.branches();
    println!(
        "  confidence weights {:.3?}",
        confidence_weights(&branches)?
    );
    for s in Strategy::ALL {
        let fused = s.combine(logits)?;
        println!(
            "  {:<10} {:>8.3?} -> class {}",
            s.to_string(),
            fused,
            argmax(&fused)?
        );
    }
    Ok(())
}

fn main() -> prompt_lab::Result<()> {
    // The augmented branch is sharply confident about class 2; the others lean to class 0.
    let hand = BranchLogits {
        global: vec![2.0, 1.5, 1.0],
        augmented: Some(vec![0.0, 0.0, 9.0]),
        vanilla: vec![1.2, 1.0, 0.9],
        tau: 1.0,
    };
    show("hand-made logits", &hand)?;

    let cfg = ModelConfig {
        visual_prompts: 8,
        ..ModelConfig::default()
    };
    let state = EncoderState::random(&cfg, 1)?;
    let prompts = PromptSet::init(&cfg, 1)?;
    let data = generate_dataset(4, 1, cfg.image_size, 1)?;
    let tokens = Vocabulary::standard().tokenize_classes(&data.class_names)?;
    let bank = text_bank(&tokens, &prompts, &cfg, &state)?;
    let out = forward_three_branch(&data.images[0], &prompts, &cfg, &state)?;
    let logits = prompt_lab::ensemble::branch_logits(&out, &bank, cfg.tau)?;
    show("untrained model on one image", &logits)?;
    Ok(())
}
