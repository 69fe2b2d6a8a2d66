//! Segmentation metrics against hand cases and a brute-force threshold sweep,
//! and GradCAM against finite differences.

use prompt_lab::datagen::{generate_dataset, Vocabulary};
use prompt_lab::encoders::{EncoderState, ModelConfig, PromptSet};
use prompt_lab::evalkit::{
    average_precision, binarize_map, extract_attention_map, final_layer_activations,
    final_layer_similarity, gradcam_map, segmentation_metrics, AttentionMap, TokenSelector,
};
use prompt_lab::experiment::{run_segment_on, ExperimentConfig};
use prompt_lab::image::Mask;
use prompt_lab::numerics::{dot, Tensor};
use prompt_lab::tuning::{forward_three_branch, text_bank};
use prompt_lab::Error;
use proptest::prelude::*;

/// Sweeps every distinct score as a threshold and recounts from scratch.
fn brute_force_ap(scores: &[f64], positives: &[bool]) -> f64 {
    let total = positives.iter().filter(|&&p| p).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = scores
            .iter()
            .zip(positives)
            .filter(|(&s, &p)| s >= t && p)
            .count() as f64;
        let kept = scores.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / total;
        ap += (recall - prev_recall) * (tp / kept);
        prev_recall = recall;
    }
    ap
}

fn mask(bits: &[u8]) -> Mask {
    Mask::new(4, 4, bits.iter().map(|&b| b == 1).collect()).unwrap()
}

#[test]
fn perfect_heatmap_scores_one() {
    let gt = mask(&[0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0]);
    let heat: Vec<f64> = gt
        .bits()
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    let m = segmentation_metrics(&heat, &gt, &gt).unwrap();
    assert_eq!((m.pix_acc, m.miou, m.map), (1.0, 1.0, 1.0));
}

#[test]
fn four_by_four_hand_case() {
    // Pixel ranking by descending score: + + - + + + - + + then seven negatives.
    let ranked_pixels = [5, 2, 9, 0, 14, 7, 3, 11, 12, 1, 4, 6, 8, 10, 13, 15];
    let ranked_labels = [1, 1, 0, 1, 1, 1, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0];
    let mut heat = vec![0.0; 16];
    let mut gt_bits = [0u8; 16];
    let mut pred_bits = [0u8; 16];
    for (rank, (&px, &label)) in ranked_pixels.iter().zip(&ranked_labels).enumerate() {
        heat[px] = 1.0 - rank as f64 / 16.0;
        gt_bits[px] = label;
        // The top six pixels are predicted foreground: 5 TP and 1 FP.
        pred_bits[px] = u8::from(rank < 6);
    }
    let (gt, pred) = (mask(&gt_bits), mask(&pred_bits));
    let m = segmentation_metrics(&heat, &pred, &gt).unwrap();
    assert!((m.pix_acc - 13.0 / 16.0).abs() < 1e-12);
    let miou = (5.0 / 8.0 + 8.0 / 11.0) / 2.0;
    assert!((m.miou - miou).abs() < 1e-12);
    assert!((m.miou - 0.676).abs() < 1e-3);
    let by_hand = (1.0 + 1.0 + 3.0 / 4.0 + 4.0 / 5.0 + 5.0 / 6.0 + 6.0 / 8.0 + 7.0 / 9.0) / 7.0;
    assert!((m.map - by_hand).abs() < 1e-10);
    assert!((m.map - brute_force_ap(&heat, gt.bits())).abs() < 1e-10);
}

#[test]
fn tied_scores_enter_together() {
    // One positive and one negative share the top score: precision 1/2 at recall 1/2.
    let ap = average_precision(&[0.9, 0.9, 0.5, 0.1], &[true, false, true, false]).unwrap();
    let want = 0.5 * 0.5 + 0.5 * (2.0 / 3.0);
    assert!((ap - want).abs() < 1e-12);
}

proptest! {
    #[test]
    fn average_precision_matches_threshold_sweep(
        cells in proptest::collection::vec((0u8..6, any::<bool>()), 2..40),
    ) {
        prop_assume!(cells.iter().any(|c| c.1));
        let scores: Vec<f64> = cells.iter().map(|c| c.0 as f64 / 5.0).collect();
        let labels: Vec<bool> = cells.iter().map(|c| c.1).collect();
        let ap = average_precision(&scores, &labels).unwrap();
        prop_assert!((ap - brute_force_ap(&scores, &labels)).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
    }

    #[test]
    fn binarization_matches_direct_mean_threshold(values in proptest::collection::vec(0.0f64..1.0, 16)) {
        let map = AttentionMap::new(4, 4, values.clone(), TokenSelector::Cls, 0).unwrap();
        let m = binarize_map(&map, 4).unwrap();
        let mean = values.iter().sum::<f64>() / 16.0;
        for (i, &v) in values.iter().enumerate() {
            prop_assert_eq!(m.bits()[i], v > mean);
        }
    }
}

fn small() -> ModelConfig {
    ModelConfig {
        vision_width: 8,
        text_width: 8,
        shared_width: 8,
        depth: 2,
        heads: 2,
        patch_grid: (4, 4),
        image_size: 8,
        visual_prompts: 3,
        text_prompts: 2,
        prompt_depth: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn attention_maps_are_distributions_over_patches() {
    let cfg = small();
    let state = EncoderState::random(&cfg, 2).unwrap();
    let prompts = PromptSet::init(&cfg, 3).unwrap();
    let data = generate_dataset(2, 1, 8, 4).unwrap();
    for sel in [
        TokenSelector::Cls,
        TokenSelector::Prompt(0),
        TokenSelector::Prompt(2),
    ] {
        let map = extract_attention_map(&data.images[0], &prompts, &cfg, &state, sel).unwrap();
        assert_eq!(map.values.len(), 16);
        assert!((map.sum() - 1.0).abs() < 1e-12);
        assert!(map.values.iter().all(|&v| v >= 0.0));
    }
    assert!(extract_attention_map(
        &data.images[0],
        &prompts,
        &cfg,
        &state,
        TokenSelector::Prompt(3)
    )
    .is_err());
}

#[test]
fn gradcam_weights_match_finite_differences() {
    let cfg = small();
    let state = EncoderState::random(&cfg, 5).unwrap();
    let prompts = PromptSet::init(&cfg, 6).unwrap();
    let data = generate_dataset(2, 1, 8, 7).unwrap();
    let image = &data.images[0];
    let tokens = Vocabulary::standard()
        .tokenize_classes(&data.class_names)
        .unwrap();
    let bank = text_bank(&tokens, &prompts, &cfg, &state).unwrap();
    let cam = gradcam_map(image, &prompts, &cfg, &state, &bank.prompted, Some(1)).unwrap();

    // The replayed score is the global-branch cosine.
    let xp = forward_three_branch(image, &prompts, &cfg, &state)
        .unwrap()
        .global;
    assert!((cam.score - dot(&xp, bank.prompted.row_slice(1))).abs() < 1e-12);

    let a = final_layer_activations(image, &prompts, &cfg, &state).unwrap();
    let text = bank.prompted.row_slice(1);
    let h = 1e-5;
    let (m, d) = a.dims();
    for c in 0..d {
        let mut mean = 0.0;
        for j in 0..m {
            let shifted = |delta: f64| {
                let mut t = a.clone();
                t.values_mut()[j * d + c] += delta;
                final_layer_similarity(image, &prompts, &cfg, &state, text, &t).unwrap()
            };
            mean += (shifted(h) - shifted(-h)) / (2.0 * h) / m as f64;
        }
        let w = cam.channel_weights[c];
        assert!(
            (w - mean).abs() <= 1e-6 * (1.0 + w.abs()),
            "channel {c}: {w} vs {mean}"
        );
    }
    for (j, &v) in cam.map.values.iter().enumerate() {
        let raw: f64 = (0..d).map(|c| cam.channel_weights[c] * a.get(j, c)).sum();
        assert_eq!(v, raw.max(0.0));
    }
}

#[test]
fn gradcam_is_zero_when_patches_cannot_reach_the_class_token() {
    let cfg = small();
    let mut state = EncoderState::random(&cfg, 5).unwrap();
    let last = state.vision.blocks.last_mut().unwrap();
    last.w_o = Tensor::zeros(cfg.vision_width, cfg.vision_width);
    let prompts = PromptSet::init(&cfg, 6).unwrap();
    let data = generate_dataset(2, 1, 8, 7).unwrap();
    let tokens = Vocabulary::standard()
        .tokenize_classes(&data.class_names)
        .unwrap();
    let bank = text_bank(&tokens, &prompts, &cfg, &state).unwrap();
    let cam = gradcam_map(
        &data.images[0],
        &prompts,
        &cfg,
        &state,
        &bank.prompted,
        None,
    )
    .unwrap();
    assert!(cam.channel_weights.iter().all(|&w| w == 0.0));
    assert!(cam.map.values.iter().all(|&v| v == 0.0));
    assert!(binarize_map(&cam.map, 8)
        .unwrap()
        .bits()
        .iter()
        .all(|&b| !b));
}

#[test]
fn segmentation_needs_masks() {
    let cfg = ExperimentConfig::default();
    let data = generate_dataset(4, 20, 16, 0).unwrap().without_masks();
    assert!(matches!(
        run_segment_on(&cfg, &data),
        Err(Error::MissingMasks)
    ));
}
