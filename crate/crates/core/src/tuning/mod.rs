//! Three-branch forward pass, the training objective and the optimizer.

mod objective;
mod optim;

pub use objective::{
    loss_aug, loss_global, loss_total, prepare_examples, GradientReport, LossSwitches, LossTerms,
    Objective, ObjectiveGraph, TrainingExample,
};
pub use optim::{Sgd, Trainer, DEFAULT_MOMENTUM};

use crate::encoders::{Encoder, EncoderState, ModelConfig, PromptSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{self, Tape, Tensor};

/// Global, augmented and vanilla representations of one image. All rows are
/// unit-norm vectors in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub global: Vec<f64>,
    /// `V x d_shared`; `None` when the model has no visual prompts.
    pub augmented: Option<Tensor>,
    pub vanilla: Vec<f64>,
}

/// Prompted and vanilla text representations, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    pub prompted: Tensor,
    pub vanilla: Tensor,
}

impl TextBank {
    pub fn new(prompted: Tensor, vanilla: Tensor) -> Result<Self> {
        if prompted.dims() != vanilla.dims() {
            return Err(Error::Shape(format!(
                "prompted bank {:?} vs vanilla bank {:?}",
                prompted.dims(),
                vanilla.dims()
            )));
        }
        Ok(Self { prompted, vanilla })
    }

    pub fn num_classes(&self) -> usize {
        self.prompted.rows()
    }
}

/// Runs the prompted pass and the unprompted pass over one image.
pub fn forward_three_branch(
    image: &Image,
    prompts: &PromptSet,
    cfg: &ModelConfig,
    state: &EncoderState,
) -> Result<BranchOutputs> {
    prompts.check(cfg)?;
    let mut tape = Tape::new();
    let enc = Encoder::new(&mut tape, cfg, state)?;
    let (pv, _) = Encoder::prompt_vars(&mut tape, prompts, false);
    let (c0, e0) = enc.embed_image(&mut tape, image)?;
    let out = enc.encode_image(&mut tape, c0, e0, &pv)?;
    let global = enc.project_image(&mut tape, out.cls)?;
    let augmented = match out.prompts {
        Some(p) => {
            let a = enc.project_image(&mut tape, p)?;
            Some(tape.value(a).clone())
        }
        None => None,
    };
    let plain = enc.encode_image_plain(&mut tape, c0, e0)?;
    let vanilla = enc.project_image(&mut tape, plain)?;
    Ok(BranchOutputs {
        global: tape.value(global).values().to_vec(),
        augmented,
        vanilla: tape.value(vanilla).values().to_vec(),
    })
}

/// Vanilla representation only: a pure function of the image and the frozen weights.
pub fn vanilla_representation(
    image: &Image,
    cfg: &ModelConfig,
    state: &EncoderState,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let enc = Encoder::new(&mut tape, cfg, state)?;
    let (c0, e0) = enc.embed_image(&mut tape, image)?;
    let plain = enc.encode_image_plain(&mut tape, c0, e0)?;
    let x = enc.project_image(&mut tape, plain)?;
    Ok(tape.value(x).values().to_vec())
}

/// Encodes every class template with and without the text prompts.
pub fn text_bank(
    class_tokens: &[Vec<usize>],
    prompts: &PromptSet,
    cfg: &ModelConfig,
    state: &EncoderState,
) -> Result<TextBank> {
    if class_tokens.is_empty() {
        return Err(Error::InvalidArgument(
            "text bank needs at least one class".into(),
        ));
    }
    prompts.check(cfg)?;
    let mut tape = Tape::new();
    let enc = Encoder::new(&mut tape, cfg, state)?;
    let (_, pt) = Encoder::prompt_vars(&mut tape, prompts, false);
    let mut prompted = Vec::with_capacity(class_tokens.len());
    let mut vanilla = Vec::with_capacity(class_tokens.len());
    for ids in class_tokens {
        let (e0, w0) = enc.embed_text(&mut tape, ids)?;
        let ek = enc.encode_text(&mut tape, e0, w0, &pt)?;
        let zp = enc.project_text(&mut tape, ek)?;
        prompted.push(tape.value(zp).values().to_vec());
        let plain = enc.encode_text_plain(&mut tape, e0, w0)?;
        let z = enc.project_text(&mut tape, plain)?;
        vanilla.push(tape.value(z).values().to_vec());
    }
    TextBank::new(Tensor::from_rows(&prompted)?, Tensor::from_rows(&vanilla)?)
}

/// `-log softmax(s / tau)[y]` for a vector of similarities.
pub fn cross_entropy_from_similarities(
    similarities: &[f64],
    label: usize,
    tau: f64,
) -> Result<f64> {
    if label >= similarities.len() {
        return Err(Error::OutOfRange {
            what: "class",
            index: label,
            size: similarities.len(),
        });
    }
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::row(similarities.to_vec()).map_err(|_| Error::EmptyLogits)?);
    let logits = tape.scale(s, 1.0 / tau);
    let ls = tape.log_softmax_rows(logits);
    let pick = tape.element(ls, 0, label)?;
    Ok(-tape.value(pick).item())
}

fn similarities(rep: &[f64], bank: &Tensor) -> Result<Vec<f64>> {
    (0..bank.rows())
        .map(|i| numerics::cosine_similarity(rep, bank.row_slice(i)))
        .collect()
}

/// Cross-entropy of one representation against the prompted text bank.
pub fn loss_ce(rep: &[f64], prompted_bank: &Tensor, label: usize, tau: f64) -> Result<f64> {
    cross_entropy_from_similarities(&similarities(rep, prompted_bank)?, label, tau)
}

/// `1 - cos(prompted, vanilla)`.
pub fn loss_consistency(prompted: &[f64], vanilla: &[f64]) -> Result<f64> {
    Ok(1.0 - numerics::cosine_similarity(prompted, vanilla)?)
}

/// Mean cosine similarity of every augmented row with `z`.
pub fn sim_augmented(augmented: &Tensor, z: &[f64]) -> Result<f64> {
    let rows = augmented.rows();
    if augmented.is_empty() || rows == 0 {
        return Err(Error::NoVisualPrompts);
    }
    let mut total = 0.0;
    for i in 0..rows {
        total += numerics::cosine_similarity(augmented.row_slice(i), z)?;
    }
    Ok(total / rows as f64)
}

/// Cross-entropy of the averaged augmented similarities.
pub fn loss_aug_single(
    augmented: &Tensor,
    prompted_bank: &Tensor,
    label: usize,
    tau: f64,
) -> Result<f64> {
    let sims = (0..prompted_bank.rows())
        .map(|i| sim_augmented(augmented, prompted_bank.row_slice(i)))
        .collect::<Result<Vec<_>>>()?;
    cross_entropy_from_similarities(&sims, label, tau)
}

/// `L_CE + lambda1 * L_text + lambda2 * L_img`, from precomputed components.
pub fn combine_global(ce: f64, text: f64, img: f64, lambda1: f64, lambda2: f64) -> f64 {
    ce + lambda1 * text + lambda2 * img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_with_cos(c: f64, axis: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[0] = c;
        v[axis] = (1.0 - c * c).sqrt();
        v
    }

    #[test]
    fn ce_single_class_is_zero() {
        let bank = Tensor::row(vec![0.6, 0.8]).unwrap();
        assert_eq!(loss_ce(&[1.0, 0.0], &bank, 0, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn ce_uniform_is_log_classes() {
        let bank = Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, -1.0, 0.0],
        ])
        .unwrap();
        let l = loss_ce(&[1.0, 0.0, 0.0], &bank, 2, 0.01).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_hand_similarities() {
        // 50-digit reference: sims (0.9, 0.1, -0.2), tau = 0.01.
        let l0 = cross_entropy_from_similarities(&[0.9, 0.1, -0.2], 0, 0.01).unwrap();
        let l1 = cross_entropy_from_similarities(&[0.9, 0.1, -0.2], 1, 0.01).unwrap();
        assert!(l0.abs() < 1e-10);
        assert!((l1 - 80.000_000_000_000_000_018).abs() < 1e-10);
        // Same through unit vectors built to have those cosines.
        let x = vec![1.0, 0.0, 0.0, 0.0];
        let bank = Tensor::from_rows(&[
            unit_with_cos(0.9, 1, 4),
            unit_with_cos(0.1, 2, 4),
            unit_with_cos(-0.2, 3, 4),
        ])
        .unwrap();
        assert!((loss_ce(&x, &bank, 1, 0.01).unwrap() - 80.0).abs() < 1e-10);
        assert!(loss_ce(&x, &bank, 3, 0.01).is_err());
    }

    #[test]
    fn consistency_values() {
        let a = [0.6, 0.8];
        assert!(loss_consistency(&a, &a).unwrap().abs() < 1e-15);
        assert!((loss_consistency(&a, &[-0.6, -0.8]).unwrap() - 2.0).abs() < 1e-15);
        assert!((loss_consistency(&a, &[0.8, -0.6]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn global_combination() {
        assert!((combine_global(0.5, 0.1, 0.05, 3.0, 4.0) - 1.0).abs() < 1e-15);
        assert_eq!(combine_global(0.7, 0.3, 0.2, 0.0, 0.0), 0.7);
    }

    #[test]
    fn sim_augmented_is_a_mean() {
        let z = [1.0, 0.0, 0.0];
        let rows =
            Tensor::from_rows(&[unit_with_cos(0.8, 1, 3), unit_with_cos(0.2, 2, 3)]).unwrap();
        assert!((sim_augmented(&rows, &z).unwrap() - 0.5).abs() < 1e-15);
        let one = Tensor::from_rows(&[unit_with_cos(0.3, 1, 3)]).unwrap();
        assert!((sim_augmented(&one, &z).unwrap() - 0.3).abs() < 1e-15);
        let same =
            Tensor::from_rows(&[unit_with_cos(0.3, 1, 3), unit_with_cos(0.3, 1, 3)]).unwrap();
        assert!((sim_augmented(&same, &z).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn aug_loss_collapses_to_global_ce() {
        let x = vec![0.6, 0.0, 0.8];
        let bank = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let aug = Tensor::from_rows(&[x.clone(), x.clone(), x.clone()]).unwrap();
        let a = loss_aug_single(&aug, &bank, 0, 0.01).unwrap();
        let g = loss_ce(&x, &bank, 0, 0.01).unwrap();
        assert!((a - g).abs() < 1e-10);
        let single = Tensor::row(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(loss_aug_single(&aug, &single, 0, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn aug_loss_hand_table() {
        // V = 2, N_c = 2. Row cosines against class 0: (0.8, 0.4); class 1: (0.2, 0.6).
        // Averaged similarities (0.6, 0.4); tau = 0.1 gives logits (6, 4).
        let z0 = [1.0, 0.0, 0.0, 0.0, 0.0];
        let z1 = [0.0, 1.0, 0.0, 0.0, 0.0];
        let row = |a: f64, b: f64, spare: usize| {
            let mut v = vec![a, b, 0.0, 0.0, 0.0];
            v[spare] = (1.0 - a * a - b * b).sqrt();
            v
        };
        let aug = Tensor::from_rows(&[row(0.8, 0.2, 2), row(0.4, 0.6, 3)]).unwrap();
        let bank = Tensor::from_rows(&[z0.to_vec(), z1.to_vec()]).unwrap();
        let l = loss_aug_single(&aug, &bank, 1, 0.1).unwrap();
        // ln(1 + e^2), 50-digit reference.
        assert!((l - 2.126_928_011_042_972_5).abs() < 1e-10, "{l}");
    }
}
