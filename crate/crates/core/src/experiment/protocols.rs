use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::config::{ExperimentConfig, TrainingConfig};
use super::output::{prompt_hash, OutputDir};
use crate::datagen::{
    self, generate, held_out, sample_few_shot, write_manifest, Checkpoint, DatasetSpec,
    SyntheticDataset, Vocabulary,
};
use crate::encoders::{EncoderState, ModelConfig, PromptSet};
use crate::ensemble::{argmax, branch_logits, BranchLogits, Strategy};
use crate::error::{Error, Result};
use crate::evalkit::{
    binarize_map, extract_attention_map, foreground_mass, gradcam_map, report_harmonic_mean,
    segmentation_metrics, upsample, write_pgm, AttentionMap, SegmentationMetrics, TokenSelector,
};
use crate::image::Image;
use crate::rng::{self, Domain};
use crate::tuning::{
    forward_three_branch, prepare_examples, text_bank, LossSwitches, Objective, TextBank, Trainer,
    TrainingExample,
};

/// Frozen encoder plus prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub state: EncoderState,
    pub prompts: PromptSet,
}

impl Model {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.config, &self.state, &self.prompts)
    }

    pub fn text_bank(&self, class_names: &[String]) -> Result<TextBank> {
        let tokens = Vocabulary::standard().tokenize_classes(class_names)?;
        text_bank(&tokens, &self.prompts, &self.config, &self.state)
    }

    pub fn branch_logits(&self, image: &Image, bank: &TextBank) -> Result<BranchLogits> {
        let out = forward_three_branch(image, &self.prompts, &self.config, &self.state)?;
        branch_logits(&out, bank, self.config.tau)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub text: f64,
    pub img: f64,
    pub aug: f64,
    /// Global-branch accuracy on the training shots, before each step's update.
    pub base_accuracy: f64,
}

impl EpochLog {
    pub const HEADER: [&'static str; 7] = [
        "epoch",
        "loss_total",
        "loss_ce",
        "loss_text",
        "loss_img",
        "loss_aug",
        "base_accuracy",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            self.total.to_string(),
            self.ce.to_string(),
            self.text.to_string(),
            self.img.to_string(),
            self.aug.to_string(),
            self.base_accuracy.to_string(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub steps: usize,
    /// `loss_total` over all training examples before the first step.
    pub initial_loss: f64,
    /// `loss_total` over all training examples after the last step.
    pub final_loss: f64,
}

/// Minibatch SGD over `examples`, reshuffled every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_prompts(
    cfg: &ModelConfig,
    state: &EncoderState,
    prompts: PromptSet,
    examples: &[TrainingExample],
    class_tokens: Vec<Vec<usize>>,
    switches: LossSwitches,
    training: &TrainingConfig,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    let objective = Objective::new(cfg, state, class_tokens, switches)?;
    let initial_loss = objective.evaluate(examples, &prompts)?.total;
    let mut trainer = Trainer::new(objective, training.momentum)?;
    let mut prompts = prompts;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    let mut steps = 0;
    for epoch in 0..epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(seed, Domain::Batches, epoch as u64));
        let mut sums = [0.0; 5];
        let mut correct = 0;
        for chunk in order.chunks(training.batch_size) {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let report = trainer.train_step(&batch, &mut prompts, lr)?;
            let t = report.terms;
            let w = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([t.total, t.ce, t.text, t.img, t.aug]) {
                *s += w * v;
            }
            correct += report
                .predictions
                .iter()
                .zip(&batch)
                .filter(|(p, ex)| **p == ex.label)
                .count();
            steps += 1;
        }
        let n = examples.len() as f64;
        log.push(EpochLog {
            epoch,
            total: sums[0] / n,
            ce: sums[1] / n,
            text: sums[2] / n,
            img: sums[3] / n,
            aug: sums[4] / n,
            base_accuracy: correct as f64 / n,
        });
    }
    let final_loss = trainer.objective().evaluate(examples, &prompts)?.total;
    Ok(TrainOutcome {
        model: Model {
            config: cfg.clone(),
            state: state.clone(),
            prompts,
        },
        log,
        steps,
        initial_loss,
        final_loss,
    })
}

/// Accuracy of `model` on `indices` of `dataset` under each strategy; labels are
/// positions within `classes`.
pub fn evaluate_accuracy(
    model: &Model,
    dataset: &SyntheticDataset,
    indices: &[usize],
    classes: &[usize],
    strategies: &[Strategy],
) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation split".into()));
    }
    let bank = model.text_bank(&dataset.class_names_of(classes))?;
    let logits: Vec<BranchLogits> = indices
        .par_iter()
        .map(|&i| model.branch_logits(&dataset.images[i], &bank))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = indices
        .iter()
        .map(|&i| local_label(classes, dataset.labels[i]))
        .collect::<Result<_>>()?;
    strategies
        .iter()
        .map(|s| {
            let preds = logits
                .iter()
                .map(|l| argmax(&s.combine(l)?))
                .collect::<Result<Vec<_>>>()?;
            crate::evalkit::accuracy(&preds, &labels)
        })
        .collect()
}

fn local_label(classes: &[usize], label: usize) -> Result<usize> {
    classes
        .iter()
        .position(|&c| c == label)
        .ok_or(Error::OutOfRange {
            what: "class subset",
            index: label,
            size: classes.len(),
        })
}

fn examples_for(
    dataset: &SyntheticDataset,
    indices: &[usize],
    classes: &[usize],
    model: &ModelConfig,
    state: &EncoderState,
) -> Result<Vec<TrainingExample>> {
    let images: Vec<Image> = indices.iter().map(|&i| dataset.images[i].clone()).collect();
    let labels = indices
        .iter()
        .map(|&i| local_label(classes, dataset.labels[i]))
        .collect::<Result<Vec<_>>>()?;
    prepare_examples(&images, &labels, model, state)
}

fn switches(training: &TrainingConfig) -> LossSwitches {
    LossSwitches {
        augmented: training.augmented_loss,
        consistency: training.consistency_loss,
    }
}

fn train_on(
    cfg: &ExperimentConfig,
    dataset: &SyntheticDataset,
    train: &[usize],
    classes: &[usize],
) -> Result<TrainOutcome> {
    let state = EncoderState::random(&cfg.model, cfg.weights_seed)?;
    let examples = examples_for(dataset, train, classes, &cfg.model, &state)?;
    let tokens = Vocabulary::standard().tokenize_classes(&dataset.class_names_of(classes))?;
    train_prompts(
        &cfg.model,
        &state,
        PromptSet::init(&cfg.model, cfg.seed)?,
        &examples,
        tokens,
        switches(&cfg.training),
        &cfg.training,
        cfg.training.epochs,
        cfg.training.lr,
        cfg.seed,
    )
}

fn f(v: f64) -> String {
    v.to_string()
}

/// Accuracies for one ensemble strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyScores {
    pub strategy: Strategy,
    pub base: f64,
    pub novel: f64,
    pub hm: f64,
}

impl StrategyScores {
    pub const HEADER: [&'static str; 4] = [
        "strategy",
        "base_accuracy",
        "novel_accuracy",
        "harmonic_mean",
    ];

    fn csv_row(&self) -> Vec<String> {
        vec![
            self.strategy.to_string(),
            f(self.base),
            f(self.novel),
            f(self.hm),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct BaseToNovelReport {
    pub scores: Vec<StrategyScores>,
    pub train: TrainOutcome,
    pub train_indices: Vec<usize>,
    pub base_eval: Vec<usize>,
    pub novel_eval: Vec<usize>,
}

impl BaseToNovelReport {
    pub fn scores_for(&self, strategy: Strategy) -> Option<&StrategyScores> {
        self.scores.iter().find(|s| s.strategy == strategy)
    }
}

fn score_base_novel(
    model: &Model,
    dataset: &SyntheticDataset,
    base_eval: &[usize],
    novel_eval: &[usize],
    strategies: &[Strategy],
) -> Result<Vec<StrategyScores>> {
    let base = evaluate_accuracy(model, dataset, base_eval, &dataset.base_classes, strategies)?;
    let novel = evaluate_accuracy(
        model,
        dataset,
        novel_eval,
        &dataset.novel_classes,
        strategies,
    )?;
    Ok(strategies
        .iter()
        .zip(base.iter().zip(&novel))
        .map(|(&strategy, (&b, &n))| StrategyScores {
            strategy,
            base: b,
            novel: n,
            hm: report_harmonic_mean(b, n),
        })
        .collect())
}

fn strategies_for(cfg: &ExperimentConfig) -> Result<Vec<Strategy>> {
    let chosen = cfg.strategy()?;
    let mut all = Strategy::ALL.to_vec();
    if !all.contains(&chosen) {
        all.push(chosen);
    }
    Ok(all)
}

fn snapshot(cfg: &ExperimentConfig) -> String {
    ExperimentConfig {
        out_dir: None,
        ..cfg.clone()
    }
    .to_toml()
}

fn write_training(
    out: &OutputDir,
    cfg: &ExperimentConfig,
    dataset: &SyntheticDataset,
    train: &TrainOutcome,
) -> Result<()> {
    out.write("config.toml", snapshot(cfg))?;
    write_manifest(&out.path("manifest.toml"), dataset)?;
    let rows: Vec<Vec<String>> = train.log.iter().map(EpochLog::csv_row).collect();
    out.write_csv("training_log.csv", &EpochLog::HEADER, &rows)?;
    out.write("checkpoint.json", train.model.checkpoint().to_bytes())?;
    Ok(())
}

fn output_dir(cfg: &ExperimentConfig) -> Result<Option<OutputDir>> {
    cfg.out_dir.as_deref().map(OutputDir::create).transpose()
}

/// Few-shot training on base classes; base and novel accuracy per strategy.
pub fn run_base_to_novel(cfg: &ExperimentConfig) -> Result<BaseToNovelReport> {
    cfg.validate()?;
    let dataset = generate(&cfg.dataset)?;
    let train_indices = sample_few_shot(
        &dataset,
        cfg.training.shots,
        &dataset.base_classes,
        cfg.seed,
    )?;
    let base_eval = held_out(&dataset, &train_indices, &dataset.base_classes);
    let novel_eval = dataset.indices_of(&dataset.novel_classes);
    if base_eval.is_empty() {
        return Err(Error::Config(
            "no held-out base images: dataset.per_class must exceed training.shots".into(),
        ));
    }
    let train = train_on(cfg, &dataset, &train_indices, &dataset.base_classes)?;
    let scores = score_base_novel(
        &train.model,
        &dataset,
        &base_eval,
        &novel_eval,
        &strategies_for(cfg)?,
    )?;
    if let Some(out) = output_dir(cfg)? {
        write_training(&out, cfg, &dataset, &train)?;
        let rows: Vec<Vec<String>> = scores.iter().map(StrategyScores::csv_row).collect();
        out.write_csv("metrics.csv", &StrategyScores::HEADER, &rows)?;
    }
    Ok(BaseToNovelReport {
        scores,
        train,
        train_indices,
        base_eval,
        novel_eval,
    })
}

/// Re-evaluates a saved checkpoint on the base/novel split the config implies.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<StrategyScores>> {
    cfg.validate()?;
    let ckpt = datagen::load_checkpoint(checkpoint)?;
    let model = Model {
        config: ckpt.config,
        state: ckpt.state,
        prompts: ckpt.prompts,
    };
    if model.config.image_size != cfg.dataset.image_size {
        return Err(Error::Shape(format!(
            "checkpoint expects {}px images, dataset has {}px",
            model.config.image_size, cfg.dataset.image_size
        )));
    }
    let dataset = generate(&cfg.dataset)?;
    let train = sample_few_shot(
        &dataset,
        cfg.training.shots,
        &dataset.base_classes,
        cfg.seed,
    )?;
    let base_eval = held_out(&dataset, &train, &dataset.base_classes);
    let novel_eval = dataset.indices_of(&dataset.novel_classes);
    let scores = score_base_novel(
        &model,
        &dataset,
        &base_eval,
        &novel_eval,
        &strategies_for(cfg)?,
    )?;
    if let Some(out) = output_dir(cfg)? {
        let rows: Vec<Vec<String>> = scores.iter().map(StrategyScores::csv_row).collect();
        out.write_csv("eval_metrics.csv", &StrategyScores::HEADER, &rows)?;
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossDatasetRow {
    /// `source` or `target`.
    pub role: &'static str,
    pub seed: u64,
    pub family_offset: usize,
    pub accuracy: f64,
    pub prompt_hash: String,
}

#[derive(Debug, Clone)]
pub struct CrossDatasetReport {
    pub strategy: Strategy,
    pub source: CrossDatasetRow,
    pub targets: Vec<CrossDatasetRow>,
    pub train: TrainOutcome,
}

/// Evaluation split of any dataset: everything outside the few-shot sample
/// drawn with the run seed. A target equal to the source yields the source test split.
fn test_split(dataset: &SyntheticDataset, shots: usize, seed: u64) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..dataset.num_classes()).collect();
    let sample = sample_few_shot(dataset, shots, &all, seed)?;
    Ok(held_out(dataset, &sample, &all))
}

/// Trains on every class of the source dataset, then scores the same prompts on target datasets.
pub fn run_cross_dataset(
    cfg: &ExperimentConfig,
    target_seeds: &[u64],
) -> Result<CrossDatasetReport> {
    cfg.validate()?;
    if target_seeds.is_empty() {
        return Err(Error::Config(
            "cross-dataset evaluation needs at least one target seed".into(),
        ));
    }
    let strategy = cfg.strategy()?;
    let source = generate(&cfg.dataset)?;
    let all: Vec<usize> = (0..source.num_classes()).collect();
    let train_indices = sample_few_shot(&source, cfg.training.shots, &all, cfg.seed)?;
    let source_eval = held_out(&source, &train_indices, &all);
    if source_eval.is_empty() {
        return Err(Error::Config(
            "no held-out source images: dataset.per_class must exceed training.shots".into(),
        ));
    }
    let train = train_on(cfg, &source, &train_indices, &all)?;
    let model = &train.model;
    let hash = prompt_hash(&model.prompts);
    let source_row = CrossDatasetRow {
        role: "source",
        seed: cfg.dataset.seed,
        family_offset: cfg.dataset.family_offset,
        accuracy: evaluate_accuracy(model, &source, &source_eval, &all, &[strategy])?[0],
        prompt_hash: hash.clone(),
    };
    let mut targets = Vec::with_capacity(target_seeds.len());
    for &seed in target_seeds {
        let spec = DatasetSpec {
            seed,
            family_offset: cfg.cross_dataset.family_offset,
            ..cfg.dataset.clone()
        };
        let target = generate(&spec)?;
        let eval = test_split(&target, cfg.training.shots, cfg.seed)?;
        let accuracy = evaluate_accuracy(model, &target, &eval, &all, &[strategy])?[0];
        targets.push(CrossDatasetRow {
            role: "target",
            seed,
            family_offset: spec.family_offset,
            accuracy,
            prompt_hash: prompt_hash(&model.prompts),
        });
    }
    if let Some(out) = output_dir(cfg)? {
        write_training(&out, cfg, &source, &train)?;
        let rows: Vec<Vec<String>> = std::iter::once(&source_row)
            .chain(&targets)
            .map(|r| {
                vec![
                    r.role.to_string(),
                    r.seed.to_string(),
                    r.family_offset.to_string(),
                    strategy.to_string(),
                    f(r.accuracy),
                    r.prompt_hash.clone(),
                ]
            })
            .collect();
        out.write_csv(
            "cross_dataset.csv",
            &[
                "role",
                "seed",
                "family_offset",
                "strategy",
                "accuracy",
                "prompt_hash",
            ],
            &rows,
        )?;
    }
    Ok(CrossDatasetReport {
        strategy,
        source: source_row,
        targets,
        train,
    })
}

/// Mean segmentation quality of one heatmap source.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRow {
    /// `untrained` or `trained`.
    pub model: &'static str,
    pub token: TokenSelector,
    /// `attention` or `gradcam`.
    pub method: &'static str,
    pub metrics: SegmentationMetrics,
}

#[derive(Debug, Clone)]
pub struct SegmentReport {
    pub rows: Vec<SegmentRow>,
    /// Mean ground-truth foreground mass of the CLS attention map, untrained then trained.
    pub cls_foreground_mass: (f64, f64),
    pub train: TrainOutcome,
    pub eval_indices: Vec<usize>,
}

impl SegmentReport {
    pub fn row(&self, model: &str, token: TokenSelector, method: &str) -> Option<&SegmentRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.token == token && r.method == method)
    }
}

/// Scores a heatmap grid against a ground-truth mask.
pub fn score_map(map: &AttentionMap, gt: &crate::image::Mask) -> Result<SegmentationMetrics> {
    let size = gt.rows();
    let heat = upsample(&map.values, map.rows, map.cols, size)?;
    segmentation_metrics(&heat, &binarize_map(map, size)?, gt)
}

struct ImageMaps {
    attention: Vec<AttentionMap>,
    gradcam: AttentionMap,
}

fn maps_for(
    model: &Model,
    image: &Image,
    selectors: &[TokenSelector],
    bank: &TextBank,
) -> Result<ImageMaps> {
    let attention = selectors
        .iter()
        .map(|&s| extract_attention_map(image, &model.prompts, &model.config, &model.state, s))
        .collect::<Result<_>>()?;
    let gradcam = gradcam_map(
        image,
        &model.prompts,
        &model.config,
        &model.state,
        &bank.prompted,
        None,
    )?
    .map;
    Ok(ImageMaps { attention, gradcam })
}

/// Segmentation protocol on a generated dataset (see [`run_segment_on`]).
pub fn run_segment(cfg: &ExperimentConfig) -> Result<SegmentReport> {
    cfg.validate()?;
    run_segment_on(cfg, &generate(&cfg.dataset)?)
}

/// Visual-prompt-only tuning with the plain cross-entropy objective, then
/// attention and GradCAM segmentation of held-out images before and after training.
pub fn run_segment_on(cfg: &ExperimentConfig, dataset: &SyntheticDataset) -> Result<SegmentReport> {
    cfg.validate()?;
    let masks = dataset.masks()?;
    let model_cfg = ModelConfig {
        text_prompts: 0,
        ..cfg.model.clone()
    };
    let all: Vec<usize> = (0..dataset.num_classes()).collect();
    let train_indices = sample_few_shot(dataset, cfg.training.shots, &all, cfg.seed)?;
    let eval_indices = held_out(dataset, &train_indices, &all);
    if eval_indices.is_empty() {
        return Err(Error::Config(
            "no held-out images: dataset.per_class must exceed training.shots".into(),
        ));
    }
    let state = EncoderState::random(&model_cfg, cfg.weights_seed)?;
    let examples = examples_for(dataset, &train_indices, &all, &model_cfg, &state)?;
    let tokens = Vocabulary::standard().tokenize_classes(&dataset.class_names)?;
    let initial = PromptSet::init(&model_cfg, cfg.seed)?;
    let train = train_prompts(
        &model_cfg,
        &state,
        initial.clone(),
        &examples,
        tokens,
        LossSwitches {
            augmented: false,
            consistency: false,
        },
        &cfg.training,
        cfg.segment.epochs,
        cfg.segment.lr,
        cfg.seed,
    )?;
    let untrained = Model {
        config: model_cfg.clone(),
        state,
        prompts: initial,
    };
    let selectors: Vec<TokenSelector> = std::iter::once(TokenSelector::Cls)
        .chain((0..model_cfg.visual_prompts).map(TokenSelector::Prompt))
        .collect();
    let out = output_dir(cfg)?;
    let heatmaps = match &out {
        Some(o) if cfg.segment.heatmap_images > 0 => Some(o.subdir("heatmaps")?),
        _ => None,
    };
    let mut rows = Vec::new();
    let mut mass = [0.0; 2];
    for (slot, (name, model)) in [("untrained", &untrained), ("trained", &train.model)]
        .into_iter()
        .enumerate()
    {
        let bank = model.text_bank(&dataset.class_names)?;
        let per_image: Vec<ImageMaps> = eval_indices
            .par_iter()
            .map(|&i| maps_for(model, &dataset.images[i], &selectors, &bank))
            .collect::<Result<_>>()?;
        for (k, &selector) in selectors.iter().enumerate() {
            let scored = per_image
                .iter()
                .zip(&eval_indices)
                .map(|(m, &i)| score_map(&m.attention[k], &masks[i]))
                .collect::<Result<Vec<_>>>()?;
            rows.push(SegmentRow {
                model: name,
                token: selector,
                method: "attention",
                metrics: SegmentationMetrics::mean(&scored)?,
            });
        }
        let scored = per_image
            .iter()
            .zip(&eval_indices)
            .map(|(m, &i)| score_map(&m.gradcam, &masks[i]))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SegmentRow {
            model: name,
            token: TokenSelector::Cls,
            method: "gradcam",
            metrics: SegmentationMetrics::mean(&scored)?,
        });
        let masses = per_image
            .iter()
            .zip(&eval_indices)
            .map(|(m, &i)| foreground_mass(&m.attention[0], &masks[i]))
            .collect::<Result<Vec<_>>>()?;
        mass[slot] = masses.iter().sum::<f64>() / masses.len() as f64;
        if let Some(dir) = &heatmaps {
            let size = dataset.spec.image_size;
            for (n, (m, &i)) in per_image
                .iter()
                .zip(&eval_indices)
                .take(cfg.segment.heatmap_images)
                .enumerate()
            {
                let emit = |label: String, map: &AttentionMap| -> Result<()> {
                    let px = upsample(&map.values, map.rows, map.cols, size)?;
                    write_pgm(
                        &dir.path(&format!("{name}_{n:02}_{label}.pgm")),
                        &px,
                        size,
                        size,
                    )
                };
                emit("cls".into(), &m.attention[0])?;
                if m.attention.len() > 1 {
                    emit("vp0".into(), &m.attention[1])?;
                }
                emit("gradcam".into(), &m.gradcam)?;
                let gt: Vec<f64> = masks[i]
                    .bits()
                    .iter()
                    .map(|&b| f64::from(u8::from(b)))
                    .collect();
                write_pgm(&dir.path(&format!("gt_{n:02}.pgm")), &gt, size, size)?;
            }
        }
    }
    if let Some(out) = &out {
        write_training(out, cfg, dataset, &train)?;
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.model.to_string(),
                    r.token.to_string(),
                    r.method.to_string(),
                    f(r.metrics.pix_acc),
                    f(r.metrics.miou),
                    f(r.metrics.map),
                ]
            })
            .collect();
        out.write_csv(
            "segmentation.csv",
            &["model", "token", "method", "pixacc", "miou", "map"],
            &table,
        )?;
        out.write_csv(
            "foreground_mass.csv",
            &["model", "cls_foreground_mass"],
            &[
                vec!["untrained".into(), f(mass[0])],
                vec!["trained".into(), f(mass[1])],
            ],
        )?;
    }
    Ok(SegmentReport {
        rows,
        cls_foreground_mass: (mass[0], mass[1]),
        train,
        eval_indices,
    })
}

/// Hyperparameter swept by [`run_ablate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Depth,
    Length,
    Loss,
    Ensemble,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Depth => "depth",
            AblationAxis::Length => "length",
            AblationAxis::Loss => "loss",
            AblationAxis::Ensemble => "ensemble",
        }
    }

    pub fn default_values(self, model: &ModelConfig) -> Vec<String> {
        match self {
            AblationAxis::Depth => (1..=model.depth).map(|d| d.to_string()).collect(),
            AblationAxis::Length => [0, 1, 4, 8, 16, 32].iter().map(|v| v.to_string()).collect(),
            AblationAxis::Loss => LOSS_VARIANTS.iter().map(|v| v.to_string()).collect(),
            AblationAxis::Ensemble => Strategy::ALL.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(AblationAxis::Depth),
            "length" => Ok(AblationAxis::Length),
            "loss" => Ok(AblationAxis::Loss),
            "ensemble" => Ok(AblationAxis::Ensemble),
            _ => Err(Error::Config(format!(
                "unknown ablation axis {s:?}; expected depth, length, loss or ensemble"
            ))),
        }
    }
}

/// Loss-axis values: which auxiliary terms stay enabled.
const LOSS_VARIANTS: [&str; 4] = ["full", "no-aug", "no-consistency", "ce-only"];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub base: f64,
    pub novel: f64,
    pub hm: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

/// Applies one axis value to a copy of `cfg`, rejecting illegal values.
fn ablation_point(
    cfg: &ExperimentConfig,
    axis: AblationAxis,
    value: &str,
) -> Result<ExperimentConfig> {
    let bad = || Error::Config(format!("illegal {axis} value {value:?}"));
    let mut point = cfg.clone();
    point.out_dir = None;
    match axis {
        AblationAxis::Depth => {
            let d: usize = value.parse().map_err(|_| bad())?;
            if d == 0 || d > cfg.model.depth {
                return Err(Error::Config(format!(
                    "prompt depth {d} outside 1..={}",
                    cfg.model.depth
                )));
            }
            point.model.prompt_depth = d;
        }
        AblationAxis::Length => {
            point.model.visual_prompts = value.parse().map_err(|_| bad())?;
        }
        AblationAxis::Loss => {
            let (aug, cons) = match value {
                "full" => (true, true),
                "no-aug" => (false, true),
                "no-consistency" => (true, false),
                "ce-only" => (false, false),
                _ => return Err(bad()),
            };
            point.training.augmented_loss = aug;
            point.training.consistency_loss = cons;
        }
        AblationAxis::Ensemble => {
            let s: Strategy = value.parse().map_err(|_| bad())?;
            point.strategy = s.to_string();
        }
    }
    point.validate()?;
    Ok(point)
}

/// Retrains once per axis value and tabulates base, novel and harmonic-mean accuracy.
pub fn run_ablate(
    cfg: &ExperimentConfig,
    axis: AblationAxis,
    values: &[String],
) -> Result<AblationReport> {
    cfg.validate()?;
    let values = if values.is_empty() {
        axis.default_values(&cfg.model)
    } else {
        values.to_vec()
    };
    let points = values
        .iter()
        .map(|v| ablation_point(cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<AblationRow> = if axis == AblationAxis::Ensemble {
        // Strategies only change inference; one training run serves every row.
        let mut shared = cfg.clone();
        shared.out_dir = None;
        let report = run_base_to_novel(&shared)?;
        let model = &report.train.model;
        let dataset = generate(&cfg.dataset)?;
        let strategies = points
            .iter()
            .map(|p| p.strategy())
            .collect::<Result<Vec<_>>>()?;
        score_base_novel(
            model,
            &dataset,
            &report.base_eval,
            &report.novel_eval,
            &strategies,
        )?
        .into_iter()
        .zip(&values)
        .map(|(s, v)| AblationRow {
            value: v.clone(),
            base: s.base,
            novel: s.novel,
            hm: s.hm,
        })
        .collect()
    } else {
        points
            .par_iter()
            .zip(&values)
            .map(|(point, v)| {
                let report = run_base_to_novel(point)?;
                let s = report
                    .scores_for(point.strategy()?)
                    .copied()
                    .expect("configured strategy is always scored");
                Ok(AblationRow {
                    value: v.clone(),
                    base: s.base,
                    novel: s.novel,
                    hm: s.hm,
                })
            })
            .collect::<Result<_>>()?
    };
    if let Some(out) = output_dir(cfg)? {
        out.write("config.toml", snapshot(cfg))?;
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![r.value.clone(), f(r.base), f(r.novel), f(r.hm)])
            .collect();
        out.write_csv(
            &format!("ablation_{axis}.csv"),
            &[
                axis.name(),
                "base_accuracy",
                "novel_accuracy",
                "harmonic_mean",
            ],
            &table,
        )?;
    }
    Ok(AblationReport { axis, rows })
}
