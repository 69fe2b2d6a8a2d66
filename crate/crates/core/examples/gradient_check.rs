//! Compares backpropagated prompt gradients with central finite differences on
//! a tiny model.
//!
//! cargo run --release --example gradient_check

use prompt_lab::encoders::{EncoderState, ModelConfig, PromptSet};
use prompt_lab::image::Image;
use prompt_lab::numerics::finite_diff::{central_difference, compare, DEFAULT_STEP};
use prompt_lab::tuning::{prepare_examples, LossSwitches, Objective};

fn main() -> prompt_lab::Result<()> {
    let cfg = ModelConfig {
        vision_width: 8,
        text_width: 8,
        shared_width: 8,
        depth: 2,
        heads: 2,
        patch_grid: (2, 2),
        image_size: 4,
        vocab_size: 6,
        context_length: 3,
        text_prompts: 2,
        visual_prompts: 2,
        prompt_depth: 2,
        tau: 0.5,
        ..ModelConfig::default()
    };
    let state = EncoderState::random(&cfg, 11)?;
    let ramp = |k: f64| {
        Image::new(
            4,
            (0..16)
                .map(|i| ((i as f64 * k).sin() + 1.0) / 2.0)
                .collect(),
        )
    };
    let batch = prepare_examples(&[ramp(0.7)?, ramp(1.9)?], &[0, 1], &cfg, &state)?;
    let objective = Objective::new(
        &cfg,
        &state,
        vec![vec![1, 2], vec![3, 4, 5]],
        LossSwitches::default(),
    )?;

    let mut prompts = PromptSet::init(&cfg, 5)?;
    let scaled: Vec<f64> = prompts.flat_values().iter().map(|v| v * 25.0).collect();
    prompts.set_flat_values(&scaled)?;

    let analytic = objective.gradient(&batch, &prompts)?.grads.flat_values();
    let mut probe = prompts.clone();
    let numeric = central_difference(
        |x| {
            probe.set_flat_values(x).expect("same layout");
            objective
                .evaluate(&batch, &probe)
                .expect("valid batch")
                .total
        },
        &prompts.flat_values(),
        DEFAULT_STEP,
    );
    let cmp = compare(&analytic, &numeric);
    println!("{} prompt entries", analytic.len());
    println!("max relative error {:.2e}", cmp.max_relative_error);
    for (a, n) in analytic.iter().zip(&numeric).take(5) {
        println!("  analytic {a:>12.6e}  numeric {n:>12.6e}");
    }
    Ok(())
}
