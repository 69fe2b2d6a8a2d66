use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetSpec, Vocabulary};
use crate::encoders::ModelConfig;
use crate::ensemble::Strategy;
use crate::error::{Error, Result};

/// Which experiment a config describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    BaseToNovel,
    CrossDataset,
    Segment,
    Ablate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Images per class in the few-shot training sample.
    pub shots: usize,
    pub momentum: f64,
    /// Disable to drop the augmented-branch loss.
    pub augmented_loss: bool,
    /// Disable to drop both consistency terms.
    pub consistency_loss: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 0.0016,
            shots: 16,
            momentum: crate::tuning::DEFAULT_MOMENTUM,
            augmented_loss: true,
            consistency_loss: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossDatasetConfig {
    /// Dataset seeds evaluated with the source-trained prompts.
    pub targets: Vec<u64>,
    /// Shape-family offset of the target datasets.
    pub family_offset: usize,
}

impl Default for CrossDatasetConfig {
    fn default() -> Self {
        Self {
            targets: vec![101, 202, 303],
            family_offset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Evaluation images whose heatmaps are written as graymaps.
    pub heatmap_images: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            epochs: 50,
            heatmap_images: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// `depth`, `length`, `loss` or `ensemble`.
    pub axis: String,
    /// Axis values; empty means the axis default sweep.
    pub values: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            axis: "depth".into(),
            values: Vec::new(),
        }
    }
}

/// A complete, reproducible experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    /// Seeds prompt initialization, few-shot sampling and batch order.
    pub seed: u64,
    /// Seeds the frozen encoder weights.
    pub weights_seed: u64,
    pub strategy: String,
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub training: TrainingConfig,
    pub cross_dataset: CrossDatasetConfig,
    pub segment: SegmentConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::BaseToNovel,
            seed: 0,
            weights_seed: 0,
            strategy: "equal".into(),
            out_dir: None,
            model: ModelConfig::default(),
            dataset: DatasetSpec::default(),
            training: TrainingConfig::default(),
            cross_dataset: CrossDatasetConfig::default(),
            segment: SegmentConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn strategy(&self) -> Result<Strategy> {
        self.strategy
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        self.model.validate()?;
        self.strategy()?;
        let (d, t) = (&self.dataset, &self.training);
        if d.n_classes < 2 || d.per_class == 0 {
            return fail("dataset needs n_classes >= 2 and per_class >= 1".into());
        }
        if d.image_size != self.model.image_size {
            return fail(format!(
                "dataset.image_size {} differs from model.image_size {}",
                d.image_size, self.model.image_size
            ));
        }
        if t.shots == 0 || t.shots > d.per_class {
            return fail(format!(
                "training.shots {} must lie in 1..={} (dataset.per_class)",
                t.shots, d.per_class
            ));
        }
        if t.epochs == 0 {
            return fail("training.epochs must be at least 1".into());
        }
        if t.batch_size == 0 {
            return fail("training.batch_size must be at least 1".into());
        }
        if !(t.lr >= 0.0 && t.lr.is_finite())
            || !(self.segment.lr >= 0.0 && self.segment.lr.is_finite())
        {
            return fail("learning rates must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return fail(format!(
                "training.momentum {} must lie in [0, 1)",
                t.momentum
            ));
        }
        if self.segment.epochs == 0 {
            return fail("segment.epochs must be at least 1".into());
        }
        let vocab = Vocabulary::standard();
        if self.model.vocab_size < vocab.len() {
            return fail(format!(
                "model.vocab_size {} is smaller than the vocabulary ({} words)",
                self.model.vocab_size,
                vocab.len()
            ));
        }
        let template_len = vocab.tokenize_template("hbar")?.len();
        if self.model.context_length < template_len {
            return fail(format!(
                "model.context_length {} cannot hold the {template_len}-word class template",
                self.model.context_length
            ));
        }
        Ok(())
    }
}
