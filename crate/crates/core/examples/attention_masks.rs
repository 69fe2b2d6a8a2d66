//! Prompt-isolating attention mask: each prompt token sees every image token
//! and itself, never another prompt.
//!
//! cargo run --example attention_masks

use prompt_lab::encoders::build_prompt_mask;
use prompt_lab::numerics::{masked_attention, Tensor};

fn main() -> prompt_lab::Result<()> {
    // [cls, 2 patches, 3 prompts]
    let mask = build_prompt_mask(3, 6);
    for i in 0..mask.size() {
        let row: String = (0..mask.size())
            .map(|j| if mask.is_blocked(i, j) { 'x' } else { '.' })
            .collect();
        println!("{row}");
    }

    let tokens = Tensor::from_rows(
        &(0..6)
            .map(|i| vec![i as f64 * 0.3, 1.0 - i as f64 * 0.2])
            .collect::<Vec<_>>(),
    )?;
    let masked = masked_attention(&tokens, &tokens, &tokens, Some(&mask), 1)?;
    // Replacing the other prompts' keys and values does not move prompt 3's output.
    let mut perturbed = tokens.clone();
    perturbed.values_mut()[8..].fill(0.0);
    let again = masked_attention(&perturbed, &perturbed, &perturbed, Some(&mask), 1)?;
    println!(
        "prompt 3 output {:?} vs {:?}",
        masked.row_slice(3),
        again.row_slice(3)
    );
    Ok(())
}
