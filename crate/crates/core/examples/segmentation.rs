//! Visual-prompt tuning followed by attention and GradCAM segmentation of
//! held-out images. Heatmaps land in `<out>/heatmaps` as PGM files.
//!
//! cargo run --release --example segmentation -- [out_dir]

use prompt_lab::evalkit::TokenSelector;
use prompt_lab::experiment::{run_segment, ExperimentConfig, SegmentConfig};

fn main() -> prompt_lab::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "runs/segment".into());
    let mut cfg = ExperimentConfig {
        seed: 1,
        weights_seed: 1,
        segment: SegmentConfig {
            epochs: 50,
            ..SegmentConfig::default()
        },
        out_dir: Some(out.clone().into()),
        ..ExperimentConfig::default()
    };
    cfg.dataset.seed = 1;
    cfg.model.visual_prompts = 16;

    let report = run_segment(&cfg)?;
    println!(
        "{:<10} {:<6} {:<10} {:>7} {:>7} {:>7}",
        "model", "token", "method", "pixAcc", "mIoU", "mAP"
    );
    for row in report
        .rows
        .iter()
        .filter(|r| matches!(r.token, TokenSelector::Cls | TokenSelector::Prompt(0)))
    {
        let m = &row.metrics;
        println!(
            "{:<10} {:<6} {:<10} {:>7.3} {:>7.3} {:>7.3}",
            row.model,
            row.token.to_string(),
            row.method,
            m.pix_acc,
            m.miou,
            m.map
        );
    }
    let (before, after) = report.cls_foreground_mass;
    println!("CLS attention mass on the object: {before:.3} -> {after:.3}");
    println!("full table and heatmaps in {out}");
    Ok(())
}
