use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{self, Domain};

/// Frozen weights of one pre-norm transformer layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_fc1: Tensor,
    pub b_fc1: Tensor,
    pub w_fc2: Tensor,
    pub b_fc2: Tensor,
}

/// Width of the MLP hidden layer relative to the model width.
pub const MLP_RATIO: usize = 2;

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let values = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, values).expect("shape")
}

impl TransformerBlock {
    pub fn random(width: usize, rng: &mut impl Rng) -> Self {
        let hidden = MLP_RATIO * width;
        let s = 1.0 / (width as f64).sqrt();
        Self {
            ln1_gamma: Tensor::filled(1, width, 1.0),
            ln1_beta: Tensor::zeros(1, width),
            w_q: gaussian(rng, width, width, s),
            b_q: gaussian(rng, 1, width, 0.02),
            w_k: gaussian(rng, width, width, s),
            b_k: gaussian(rng, 1, width, 0.02),
            w_v: gaussian(rng, width, width, s),
            b_v: gaussian(rng, 1, width, 0.02),
            w_o: gaussian(rng, width, width, s),
            b_o: gaussian(rng, 1, width, 0.02),
            ln2_gamma: Tensor::filled(1, width, 1.0),
            ln2_beta: Tensor::zeros(1, width),
            w_fc1: gaussian(rng, width, hidden, s),
            b_fc1: gaussian(rng, 1, hidden, 0.02),
            w_fc2: gaussian(rng, hidden, width, 1.0 / (hidden as f64).sqrt()),
            b_fc2: gaussian(rng, 1, width, 0.02),
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_fc1,
            &self.b_fc1,
            &self.w_fc2,
            &self.b_fc2,
        ]
    }

    fn check(&self, width: usize) -> Result<()> {
        let hidden = MLP_RATIO * width;
        let expected = [
            (1, width),
            (1, width),
            (width, width),
            (1, width),
            (width, width),
            (1, width),
            (width, width),
            (1, width),
            (width, width),
            (1, width),
            (1, width),
            (1, width),
            (width, hidden),
            (1, hidden),
            (hidden, width),
            (1, width),
        ];
        for (t, dims) in self.tensors().iter().zip(expected) {
            if t.dims() != dims {
                return Err(Error::Shape(format!(
                    "transformer weight {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionTower {
    /// `patch_dim x d_v`.
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub class_token: Tensor,
    /// One row per patch.
    pub positions: Tensor,
    pub blocks: Vec<TransformerBlock>,
    /// `d_v x d_shared`.
    pub projection: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextTower {
    /// `vocab x d_t`.
    pub token_embedding: Tensor,
    pub eos_token: Tensor,
    /// One row per word position.
    pub positions: Tensor,
    pub blocks: Vec<TransformerBlock>,
    /// `d_t x d_shared`.
    pub projection: Tensor,
}

/// Frozen parameters of both encoders. Training never writes to this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub vision: VisionTower,
    pub text: TextTower,
}

impl EncoderState {
    /// Deterministic random weights for `cfg`.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, Domain::Weights, 0);
        let (dv, dt, ds) = (cfg.vision_width, cfg.text_width, cfg.shared_width);
        let vision = VisionTower {
            patch_proj: gaussian(
                &mut r,
                cfg.patch_dim(),
                dv,
                1.0 / (cfg.patch_dim() as f64).sqrt(),
            ),
            patch_bias: gaussian(&mut r, 1, dv, 0.02),
            class_token: gaussian(&mut r, 1, dv, 1.0),
            positions: gaussian(&mut r, cfg.num_patches(), dv, 0.1),
            blocks: (0..cfg.depth)
                .map(|_| TransformerBlock::random(dv, &mut r))
                .collect(),
            projection: gaussian(&mut r, dv, ds, 1.0 / (dv as f64).sqrt()),
        };
        let text = TextTower {
            token_embedding: gaussian(&mut r, cfg.vocab_size, dt, 1.0),
            eos_token: gaussian(&mut r, 1, dt, 1.0),
            positions: gaussian(&mut r, cfg.context_length, dt, 0.1),
            blocks: (0..cfg.depth)
                .map(|_| TransformerBlock::random(dt, &mut r))
                .collect(),
            projection: gaussian(&mut r, dt, ds, 1.0 / (dt as f64).sqrt()),
        };
        Ok(Self { vision, text })
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let want = |t: &Tensor, dims: (usize, usize), name: &str| {
            if t.dims() == dims {
                Ok(())
            } else {
                Err(Error::Shape(format!(
                    "{name} is {:?}, expected {dims:?}",
                    t.dims()
                )))
            }
        };
        let (dv, dt, ds) = (cfg.vision_width, cfg.text_width, cfg.shared_width);
        let v = &self.vision;
        want(&v.patch_proj, (cfg.patch_dim(), dv), "patch_proj")?;
        want(&v.patch_bias, (1, dv), "patch_bias")?;
        want(&v.class_token, (1, dv), "class_token")?;
        want(&v.positions, (cfg.num_patches(), dv), "vision positions")?;
        want(&v.projection, (dv, ds), "image projection")?;
        let t = &self.text;
        want(&t.token_embedding, (cfg.vocab_size, dt), "token_embedding")?;
        want(&t.eos_token, (1, dt), "eos_token")?;
        want(&t.positions, (cfg.context_length, dt), "text positions")?;
        want(&t.projection, (dt, ds), "text projection")?;
        if v.blocks.len() != cfg.depth || t.blocks.len() != cfg.depth {
            return Err(Error::Shape(format!(
                "{} vision / {} text layers, expected {}",
                v.blocks.len(),
                t.blocks.len(),
                cfg.depth
            )));
        }
        for b in &v.blocks {
            b.check(dv)?;
        }
        for b in &t.blocks {
            b.check(dt)?;
        }
        Ok(())
    }

    /// Canonical byte encoding, used to assert the weights stay frozen.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("state serializes")
    }
}

/// Tape handles for one transformer layer.
#[derive(Debug, Clone)]
pub(crate) struct BlockVars {
    pub ln1: (Var, Var),
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
    pub ln2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

impl BlockVars {
    pub fn load(tape: &mut Tape, b: &TransformerBlock) -> Self {
        let mut c = |t: &Tensor| tape.constant(t.clone());
        Self {
            ln1: (c(&b.ln1_gamma), c(&b.ln1_beta)),
            q: (c(&b.w_q), c(&b.b_q)),
            k: (c(&b.w_k), c(&b.b_k)),
            v: (c(&b.w_v), c(&b.b_v)),
            o: (c(&b.w_o), c(&b.b_o)),
            ln2: (c(&b.ln2_gamma), c(&b.ln2_beta)),
            fc1: (c(&b.w_fc1), c(&b.b_fc1)),
            fc2: (c(&b.w_fc2), c(&b.b_fc2)),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TowerVars {
    pub embed: Var,
    pub bias: Option<Var>,
    pub special: Var,
    pub positions: Var,
    pub blocks: Vec<BlockVars>,
    pub projection: Var,
}

/// Every frozen weight placed on a tape once, as constants.
#[derive(Debug, Clone)]
pub(crate) struct StateVars {
    pub vision: TowerVars,
    pub text: TowerVars,
}

impl StateVars {
    pub fn load(tape: &mut Tape, state: &EncoderState) -> Self {
        let v = &state.vision;
        let vision = TowerVars {
            embed: tape.constant(v.patch_proj.clone()),
            bias: Some(tape.constant(v.patch_bias.clone())),
            special: tape.constant(v.class_token.clone()),
            positions: tape.constant(v.positions.clone()),
            blocks: v.blocks.iter().map(|b| BlockVars::load(tape, b)).collect(),
            projection: tape.constant(v.projection.clone()),
        };
        let t = &state.text;
        let text = TowerVars {
            embed: tape.constant(t.token_embedding.clone()),
            bias: None,
            special: tape.constant(t.eos_token.clone()),
            positions: tape.constant(t.positions.clone()),
            blocks: t.blocks.iter().map(|b| BlockVars::load(tape, b)).collect(),
            projection: tape.constant(t.projection.clone()),
        };
        Self { vision, text }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_state_is_deterministic_and_well_shaped() {
        let cfg = ModelConfig::default();
        let a = EncoderState::random(&cfg, 3).unwrap();
        let b = EncoderState::random(&cfg, 3).unwrap();
        a.check(&cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a, EncoderState::random(&cfg, 4).unwrap());
    }

    #[test]
    fn check_catches_depth_mismatch() {
        let cfg = ModelConfig::default();
        let state = EncoderState::random(&cfg, 0).unwrap();
        let other = ModelConfig {
            depth: 2,
            prompt_depth: 2,
            ..cfg
        };
        assert!(state.check(&other).is_err());
    }
}
