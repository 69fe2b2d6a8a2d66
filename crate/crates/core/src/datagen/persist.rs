use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderState, ModelConfig, PromptSet};
use crate::error::{Error, Result};

use super::{DatasetSpec, SyntheticDataset};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub state: EncoderState,
    pub prompts: PromptSet,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, state: &EncoderState, prompts: &PromptSet) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: config.clone(),
            state: state.clone(),
            prompts: prompts.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::CorruptCheckpoint("missing format_version".into()))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::VersionMismatch {
                found: found.min(u64::from(u32::MAX)) as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        // Re-parse from bytes: going through `Value` can perturb float bits.
        let ckpt: Checkpoint =
            serde_json::from_slice(bytes).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        ckpt.config
            .validate()
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        ckpt.state.check(&ckpt.config)?;
        ckpt.prompts.check(&ckpt.config)?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    state: &EncoderState,
    prompts: &PromptSet,
) -> Result<()> {
    state.check(cfg)?;
    prompts.check(cfg)?;
    let bytes = Checkpoint::new(cfg, state, prompts).to_bytes();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and requires its tensors to fit `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.state.check(expected)?;
    ckpt.prompts.check(expected)?;
    if &ckpt.config != expected {
        return Err(Error::Shape(
            "checkpoint config differs from the expected config".into(),
        ));
    }
    Ok(ckpt)
}

/// Human-readable description of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub class_names: Vec<String>,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub has_masks: bool,
}

impl DatasetManifest {
    pub fn of(dataset: &SyntheticDataset) -> Self {
        Self {
            spec: dataset.spec.clone(),
            class_names: dataset.class_names.clone(),
            base_classes: dataset.base_classes.clone(),
            novel_classes: dataset.novel_classes.clone(),
            has_masks: dataset.gt_masks.is_some(),
        }
    }
}

pub fn write_manifest(path: &Path, dataset: &SyntheticDataset) -> Result<()> {
    let text =
        toml::to_string(&DatasetManifest::of(dataset)).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_dataset;

    fn small() -> ModelConfig {
        ModelConfig {
            vision_width: 8,
            text_width: 8,
            shared_width: 4,
            depth: 2,
            visual_prompts: 2,
            text_prompts: 1,
            prompt_depth: 2,
            ..Default::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let state = EncoderState::random(&cfg, 1).unwrap();
        let prompts = PromptSet::init(&cfg, 2).unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        save_checkpoint(&a, &cfg, &state, &prompts).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded.state, state);
        assert_eq!(loaded.prompts, prompts);
        save_checkpoint(&b, &loaded.config, &loaded.state, &loaded.prompts).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let state = EncoderState::random(&cfg, 1).unwrap();
        let prompts = PromptSet::init(&cfg, 2).unwrap();
        let path = dir.path().join("c.json");
        save_checkpoint(&path, &cfg, &state, &prompts).unwrap();
        let bytes = fs::read(&path).unwrap();

        let truncated = dir.path().join("t.json");
        fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&truncated).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)));
        assert!(err.to_string().starts_with("corrupt checkpoint"));

        let text = String::from_utf8(bytes).unwrap().replacen(
            "\"format_version\":1",
            "\"format_version\":7",
            1,
        );
        let future = dir.path().join("v.json");
        fs::write(&future, text).unwrap();
        assert!(matches!(
            load_checkpoint(&future),
            Err(Error::VersionMismatch {
                found: 7,
                expected: 1
            })
        ));

        let other = ModelConfig {
            visual_prompts: 3,
            ..cfg.clone()
        };
        let err = load_checkpoint_for(&path, &other).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().starts_with("shape mismatch"));

        // Prompts inconsistent with the embedded config.
        let mut ckpt = Checkpoint::new(&cfg, &state, &prompts);
        ckpt.config.visual_prompts = 3;
        assert!(matches!(
            Checkpoint::from_bytes(&ckpt.to_bytes()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(4, 2, 16, 9).unwrap();
        let path = dir.path().join("m.toml");
        write_manifest(&path, &d).unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m, DatasetManifest::of(&d));
        assert_eq!(
            m.class_names,
            vec!["hbar", "diagonal", "vbar", "antidiagonal"]
        );
    }
}
