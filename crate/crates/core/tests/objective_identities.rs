//! Loss decomposition against per-example scalar recomputation, collapse
//! identities, and isolation of the frozen branch and weights.

use prompt_lab::encoders::{EncoderState, ModelConfig, PromptSet};
use prompt_lab::image::Image;
use prompt_lab::numerics::Tensor;
use prompt_lab::tuning::{
    forward_three_branch, loss_aug, loss_aug_single, loss_ce, loss_consistency, loss_global,
    loss_total, prepare_examples, text_bank, vanilla_representation, LossSwitches, Objective,
    Trainer, TrainingExample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;

fn config() -> ModelConfig {
    ModelConfig {
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
        tau: 0.3,
        ..ModelConfig::default()
    }
}

fn classes() -> Vec<Vec<usize>> {
    vec![vec![1, 2], vec![3, 4, 5], vec![0, 5]]
}

fn batch(cfg: &ModelConfig, state: &EncoderState, seed: u64) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<Image> = (0..4)
        .map(|_| Image::new(4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    prepare_examples(&images, &[0, 1, 2, 1], cfg, state).unwrap()
}

fn prompts(cfg: &ModelConfig, seed: u64, scale: f64) -> PromptSet {
    let mut p = PromptSet::init(cfg, seed).unwrap();
    let v: Vec<f64> = p.flat_values().iter().map(|x| x * scale).collect();
    p.set_flat_values(&v).unwrap();
    p
}

/// Every term recomputed example by example through the plain-value API.
#[test]
fn loss_terms_match_scalar_recomputation() {
    let cfg = config();
    let state = EncoderState::random(&cfg, 3).unwrap();
    let data = batch(&cfg, &state, 1);
    let p = prompts(&cfg, 4, 20.0);
    let objective = Objective::new(&cfg, &state, classes(), LossSwitches::default()).unwrap();
    let terms = objective.evaluate(&data, &p).unwrap();

    let bank = text_bank(&classes(), &p, &cfg, &state).unwrap();
    let n = data.len() as f64;
    let (mut ce, mut img, mut aug) = (0.0, 0.0, 0.0);
    for ex in &data {
        let out = forward_three_branch(&ex.image, &p, &cfg, &state).unwrap();
        ce += loss_ce(&out.global, &bank.prompted, ex.label, cfg.tau).unwrap() / n;
        img += loss_consistency(&out.global, &out.vanilla).unwrap() / n;
        aug += loss_aug_single(
            out.augmented.as_ref().unwrap(),
            &bank.prompted,
            ex.label,
            cfg.tau,
        )
        .unwrap()
            / n;
    }
    let text = (0..classes().len())
        .map(|i| loss_consistency(bank.prompted.row_slice(i), bank.vanilla.row_slice(i)).unwrap())
        .sum::<f64>()
        / classes().len() as f64;

    assert!((terms.ce - ce).abs() < TOL);
    assert!((terms.img - img).abs() < TOL);
    assert!((terms.aug - aug).abs() < TOL);
    assert!((terms.text - text).abs() < TOL);
    let total = ce + cfg.lambda1 * text + cfg.lambda2 * img + aug;
    assert!((terms.total - total).abs() < TOL);
    assert!((loss_total(&objective, &data, &p).unwrap() - total).abs() < TOL);
    assert!((loss_aug(&objective, &data, &p).unwrap() - aug).abs() < TOL);
    let global = ce + cfg.lambda1 * text + cfg.lambda2 * img;
    assert!((loss_global(&objective, &data, &p).unwrap() - global).abs() < TOL);
}

#[test]
fn global_loss_is_cross_entropy_without_consistency_weights() {
    let cfg = ModelConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..config()
    };
    let state = EncoderState::random(&cfg, 3).unwrap();
    let data = batch(&cfg, &state, 2);
    let p = prompts(&cfg, 5, 20.0);
    let objective = Objective::new(&cfg, &state, classes(), LossSwitches::default()).unwrap();
    let terms = objective.evaluate(&data, &p).unwrap();
    assert!(terms.text > 0.0 && terms.img > 0.0);
    assert!((loss_global(&objective, &data, &p).unwrap() - terms.ce).abs() < TOL);
}

#[test]
fn switches_drop_their_terms() {
    let cfg = config();
    let state = EncoderState::random(&cfg, 3).unwrap();
    let data = batch(&cfg, &state, 2);
    let p = prompts(&cfg, 5, 20.0);
    let ce_only = LossSwitches {
        augmented: false,
        consistency: false,
    };
    let t = Objective::new(&cfg, &state, classes(), ce_only)
        .unwrap()
        .evaluate(&data, &p)
        .unwrap();
    assert_eq!(t.total, t.ce);
    let no_prompts = ModelConfig {
        visual_prompts: 0,
        ..cfg.clone()
    };
    let p0 = prompts(&no_prompts, 5, 20.0);
    let t = Objective::new(&no_prompts, &state, classes(), LossSwitches::default())
        .unwrap()
        .evaluate(&data, &p0)
        .unwrap();
    assert_eq!(t.aug, 0.0);
    assert!(
        (t.total - (t.ce + no_prompts.lambda1 * t.text + no_prompts.lambda2 * t.img)).abs() < TOL
    );
}

#[test]
fn augmented_loss_collapses_to_global_when_rows_repeat() {
    let cfg = config();
    let state = EncoderState::random(&cfg, 3).unwrap();
    let p = prompts(&cfg, 6, 20.0);
    let bank = text_bank(&classes(), &p, &cfg, &state).unwrap();
    let data = batch(&cfg, &state, 3);
    for ex in &data {
        let xp = forward_three_branch(&ex.image, &p, &cfg, &state)
            .unwrap()
            .global;
        for rows in [1, 2, 7] {
            let aug = Tensor::from_rows(&vec![xp.clone(); rows]).unwrap();
            let a = loss_aug_single(&aug, &bank.prompted, ex.label, cfg.tau).unwrap();
            let g = loss_ce(&xp, &bank.prompted, ex.label, cfg.tau).unwrap();
            assert!((a - g).abs() < TOL, "{a} vs {g}");
        }
    }
}

#[test]
fn consistency_is_zero_one_two() {
    let v = [0.6, -0.8, 0.0];
    assert!(loss_consistency(&v, &v).unwrap().abs() < TOL);
    assert!((loss_consistency(&v, &[0.8, 0.6, 0.0]).unwrap() - 1.0).abs() < TOL);
    assert!((loss_consistency(&v, &[-0.6, 0.8, 0.0]).unwrap() - 2.0).abs() < TOL);
}

#[test]
fn vanilla_branch_ignores_prompts_bitwise() {
    let cfg = config();
    let state = EncoderState::random(&cfg, 8).unwrap();
    let image = batch(&cfg, &state, 4).remove(0).image;
    let reference = vanilla_representation(&image, &cfg, &state).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..100 {
        let p = prompts(&cfg, i, rng.gen_range(0.0..200.0));
        let out = forward_three_branch(&image, &p, &cfg, &state).unwrap();
        assert_eq!(out.vanilla, reference);
    }
}

#[test]
fn training_never_touches_encoder_weights() {
    let cfg = config();
    let state = EncoderState::random(&cfg, 8).unwrap();
    let before = state.to_bytes();
    let data = batch(&cfg, &state, 5);
    let objective = Objective::new(&cfg, &state, classes(), LossSwitches::default()).unwrap();
    let mut trainer = Trainer::new(objective, 0.9).unwrap();
    let mut p = prompts(&cfg, 1, 1.0);
    let start = p.clone();
    for _ in 0..200 {
        trainer.train_step(&data, &mut p, 0.01).unwrap();
    }
    assert_ne!(p, start);
    assert_eq!(state.to_bytes(), before);
    assert_eq!(trainer.objective().state().to_bytes(), before);
}

#[test]
fn training_step_descends() {
    let cfg = config();
    let state = EncoderState::random(&cfg, 8).unwrap();
    let data = batch(&cfg, &state, 6);
    let objective = Objective::new(&cfg, &state, classes(), LossSwitches::default()).unwrap();
    let mut trainer = Trainer::new(objective, 0.0).unwrap();
    let mut p = prompts(&cfg, 2, 10.0);
    let before = trainer.train_step(&data, &mut p, 1e-3).unwrap().terms.total;
    let after = trainer.objective().evaluate(&data, &p).unwrap().total;
    assert!(after < before, "{after} >= {before}");
}
