//! Logit-level combination of the global, augmented and vanilla branches.

use std::fmt;
use std::str::FromStr;

use crate::encoders::{EncoderState, ModelConfig, PromptSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{cosine_similarity, softmax};
use crate::tuning::{forward_three_branch, sim_augmented, BranchOutputs, TextBank};

pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// Per-branch logits (similarity / tau) for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLogits {
    pub global: Vec<f64>,
    /// `None` when the model has no visual prompts.
    pub augmented: Option<Vec<f64>>,
    pub vanilla: Vec<f64>,
    pub tau: f64,
}

impl BranchLogits {
    /// Available branches in the order global, augmented, vanilla.
    pub fn branches(&self) -> Vec<&[f64]> {
        let mut out = vec![self.global.as_slice()];
        if let Some(a) = &self.augmented {
            out.push(a);
        }
        out.push(&self.vanilla);
        out
    }
}

/// Global and augmented branches score against the prompted text bank, the
/// vanilla branch against the vanilla bank.
pub fn branch_logits(outputs: &BranchOutputs, bank: &TextBank, tau: f64) -> Result<BranchLogits> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let n = bank.num_classes();
    let scores = |rep: &[f64], rows: &crate::numerics::Tensor| -> Result<Vec<f64>> {
        (0..n)
            .map(|c| Ok(cosine_similarity(rep, rows.row_slice(c))? / tau))
            .collect()
    };
    let augmented = match &outputs.augmented {
        Some(aug) => Some(
            (0..n)
                .map(|c| Ok(sim_augmented(aug, bank.prompted.row_slice(c))? / tau))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(BranchLogits {
        global: scores(&outputs.global, &bank.prompted)?,
        augmented,
        vanilla: scores(&outputs.vanilla, &bank.vanilla)?,
        tau,
    })
}

fn check_branches(branches: &[&[f64]]) -> Result<usize> {
    let n = branches
        .first()
        .ok_or_else(|| Error::InvalidArgument("no branches to combine".into()))?
        .len();
    if n == 0 {
        return Err(Error::EmptyLogits);
    }
    for b in branches {
        if b.len() != n {
            return Err(Error::Shape(format!(
                "branch logits of lengths {} and {}",
                n,
                b.len()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite branch logit".into()));
        }
    }
    Ok(n)
}

fn weighted_sum(branches: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let n = branches[0].len();
    (0..n)
        .map(|c| branches.iter().zip(weights).map(|(b, w)| w * b[c]).sum())
        .collect()
}

/// Largest softmax probability of a logit vector.
pub fn confidence(logits: &[f64]) -> Result<f64> {
    Ok(softmax(logits)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Elementwise mean of the branch logits.
pub fn combine_equal(branches: &[&[f64]]) -> Result<Vec<f64>> {
    check_branches(branches)?;
    let w = vec![1.0 / branches.len() as f64; branches.len()];
    Ok(weighted_sum(branches, &w))
}

/// Branch weights proportional to each branch's top softmax probability.
pub fn confidence_weights(branches: &[&[f64]]) -> Result<Vec<f64>> {
    check_branches(branches)?;
    let c = branches
        .iter()
        .map(|b| confidence(b))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = c.iter().sum();
    Ok(c.into_iter().map(|v| v / total).collect())
}

pub fn combine_confidence(branches: &[&[f64]]) -> Result<Vec<f64>> {
    let w = confidence_weights(branches)?;
    Ok(weighted_sum(branches, &w))
}

/// Mean over branches whose top probability exceeds `theta`; every branch when none does.
pub fn combine_threshold(branches: &[&[f64]], theta: f64) -> Result<Vec<f64>> {
    check_threshold(theta)?;
    check_branches(branches)?;
    let mut kept = Vec::with_capacity(branches.len());
    for b in branches {
        if confidence(b)? > theta {
            kept.push(*b);
        }
    }
    if kept.is_empty() {
        combine_equal(branches)
    } else {
        combine_equal(&kept)
    }
}

fn check_threshold(theta: f64) -> Result<()> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "threshold {theta} outside (0, 1)"
        )))
    }
}

pub fn ensemble_equal(logits: &BranchLogits) -> Result<Vec<f64>> {
    combine_equal(&logits.branches())
}

pub fn ensemble_confidence(logits: &BranchLogits) -> Result<Vec<f64>> {
    combine_confidence(&logits.branches())
}

pub fn ensemble_threshold(logits: &BranchLogits, theta: f64) -> Result<Vec<f64>> {
    combine_threshold(&logits.branches(), theta)
}

/// How branch logits are combined into one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Equal,
    Confidence,
    Threshold(f64),
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::Equal,
        Strategy::Confidence,
        Strategy::Threshold(DEFAULT_THRESHOLD),
    ];

    pub fn combine(&self, logits: &BranchLogits) -> Result<Vec<f64>> {
        match *self {
            Strategy::Equal => ensemble_equal(logits),
            Strategy::Confidence => ensemble_confidence(logits),
            Strategy::Threshold(theta) => ensemble_threshold(logits, theta),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Equal => "equal",
            Strategy::Confidence => "confidence",
            Strategy::Threshold(_) => "threshold",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Threshold(t) if *t != DEFAULT_THRESHOLD => f.pad(&format!("threshold:{t}")),
            s => f.pad(s.name()),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts `equal`, `confidence`, `threshold`, `threshold:0.7` or `threshold=0.7`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "equal" => return Ok(Strategy::Equal),
            "confidence" => return Ok(Strategy::Confidence),
            "threshold" => return Ok(Strategy::Threshold(DEFAULT_THRESHOLD)),
            _ => {}
        }
        if let Some(rest) = s
            .strip_prefix("threshold:")
            .or_else(|| s.strip_prefix("threshold="))
        {
            let theta: f64 = rest
                .parse()
                .map_err(|_| Error::Parse(format!("bad threshold value {rest:?}")))?;
            check_threshold(theta)?;
            return Ok(Strategy::Threshold(theta));
        }
        Err(Error::Parse(format!(
            "unknown strategy {s:?}; expected equal, confidence or threshold[:theta]"
        )))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn predict_from_logits(logits: &BranchLogits, strategy: Strategy) -> Result<usize> {
    argmax(&strategy.combine(logits)?)
}

/// Runs both encoder passes on `image` and classifies it against `bank`.
pub fn predict(
    image: &Image,
    prompts: &PromptSet,
    cfg: &ModelConfig,
    state: &EncoderState,
    bank: &TextBank,
    strategy: Strategy,
) -> Result<usize> {
    let outputs = forward_three_branch(image, prompts, cfg, state)?;
    predict_from_logits(&branch_logits(&outputs, bank, cfg.tau)?, strategy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn logits(g: &[f64], a: &[f64], v: &[f64]) -> BranchLogits {
        BranchLogits {
            global: g.to_vec(),
            augmented: Some(a.to_vec()),
            vanilla: v.to_vec(),
            tau: 1.0,
        }
    }

    #[test]
    fn branch_logits_scale_with_tau() {
        let bank = TextBank::new(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let out = BranchOutputs {
            global: vec![1.0, 0.0],
            augmented: Some(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap()),
            vanilla: vec![1.0, 0.0],
        };
        let l = branch_logits(&out, &bank, 1.0).unwrap();
        assert_eq!(l.global, vec![1.0, 0.0]);
        assert_eq!(l.vanilla, vec![0.0, 1.0]);
        let aug = l.augmented.as_ref().unwrap();
        assert!((aug[0] - 0.8).abs() < 1e-15 && (aug[1] - 0.4).abs() < 1e-15);
        let half = branch_logits(&out, &bank, 0.5).unwrap();
        for (a, b) in half.branches().iter().zip(l.branches()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, 2.0 * y);
            }
        }
    }

    #[test]
    fn equal_mean_by_hand() {
        let l = logits(&[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0]);
        assert_eq!(ensemble_equal(&l).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn confidence_hand_case() {
        // Branch confidences 0.9, 0.5, 0.5 with N_c = 2.
        let g = [(9f64).ln(), 0.0];
        let u = [0.3, 0.3];
        let l = logits(&g, &u, &u);
        let w = confidence_weights(&l.branches()).unwrap();
        assert!((w[0] - 0.9 / 1.9).abs() < 1e-15);
        assert!((w[1] - 0.5 / 1.9).abs() < 1e-15);
        let out = ensemble_confidence(&l).unwrap();
        let expect0 = (0.9 * 9f64.ln() + 0.5 * 0.3 + 0.5 * 0.3) / 1.9;
        let expect1 = (0.5 * 0.3 + 0.5 * 0.3) / 1.9;
        assert!((out[0] - expect0).abs() < 1e-14);
        assert!((out[1] - expect1).abs() < 1e-14);
    }

    #[test]
    fn peaked_branch_dominates_confidence() {
        let l = logits(&[0.0, 0.0, 0.0], &[9.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
        let w = confidence_weights(&l.branches()).unwrap();
        assert!(w[1] > w[0] && w[1] > w[2]);
    }

    #[test]
    fn threshold_cases() {
        let sharp = [10.0, 0.0];
        let flat = [0.1, 0.0];
        let all = logits(&sharp, &[0.0, 8.0], &[9.0, 0.0]);
        assert_eq!(
            ensemble_threshold(&all, 0.8).unwrap(),
            ensemble_equal(&all).unwrap()
        );
        let one = logits(&flat, &sharp, &flat);
        assert_eq!(ensemble_threshold(&one, 0.8).unwrap(), sharp.to_vec());
        let none = logits(&flat, &[0.0, 0.2], &flat);
        assert_eq!(
            ensemble_threshold(&none, 0.8).unwrap(),
            ensemble_equal(&none).unwrap()
        );
        assert!(ensemble_threshold(&none, 1.0).is_err());
        assert!(ensemble_threshold(&none, 0.0).is_err());
    }

    #[test]
    fn two_branch_models_are_supported() {
        let l = BranchLogits {
            global: vec![1.0, 3.0],
            augmented: None,
            vanilla: vec![3.0, 1.0],
            tau: 1.0,
        };
        assert_eq!(ensemble_equal(&l).unwrap(), vec![2.0, 2.0]);
        assert_eq!(predict_from_logits(&l, Strategy::Equal).unwrap(), 0);
    }

    #[test]
    fn disagreement_resolves_per_strategy() {
        // Global is confident in class 1; augmented and vanilla mildly prefer class 0.
        let l = logits(&[0.0, 6.0], &[1.0, 0.0], &[1.0, 0.0]);
        assert_eq!(predict_from_logits(&l, Strategy::Equal).unwrap(), 1);
        assert_eq!(
            predict_from_logits(&l, Strategy::Threshold(0.8)).unwrap(),
            1
        );
        let l = logits(&[0.0, 1.5], &[1.0, 0.0], &[1.0, 0.0]);
        assert_eq!(predict_from_logits(&l, Strategy::Equal).unwrap(), 0);
        assert_eq!(
            predict_from_logits(&l, Strategy::Threshold(0.8)).unwrap(),
            1
        );
        assert_eq!(predict_from_logits(&l, Strategy::Confidence).unwrap(), 0);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!(
            "threshold:0.5".parse::<Strategy>().unwrap(),
            Strategy::Threshold(0.5)
        );
        assert_eq!(
            "threshold=0.6".parse::<Strategy>().unwrap(),
            Strategy::Threshold(0.6)
        );
        assert_eq!(Strategy::Threshold(0.5).to_string(), "threshold:0.5");
        assert!("median".parse::<Strategy>().is_err());
        assert!("threshold:2".parse::<Strategy>().is_err());
    }

    #[test]
    fn single_class_always_zero() {
        let l = logits(&[3.0], &[-1.0], &[0.5]);
        for s in Strategy::ALL {
            assert_eq!(predict_from_logits(&l, s).unwrap(), 0);
        }
        assert_eq!(argmax(&[2.0, 2.0, 1.0]).unwrap(), 0);
    }

    fn vec3() -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-20.0f64..20.0, 3)
    }

    proptest! {
        #[test]
        fn equal_is_permutation_invariant(a in vec3(), b in vec3(), c in vec3()) {
            let base = combine_equal(&[&a, &b, &c]).unwrap();
            for perm in [[&b, &a, &c], [&c, &b, &a], [&a, &c, &b], [&b, &c, &a], [&c, &a, &b]] {
                let p = combine_equal(&[perm[0], perm[1], perm[2]]).unwrap();
                for (x, y) in base.iter().zip(&p) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn confidence_weights_sum_to_one(a in vec3(), b in vec3(), c in vec3()) {
            let w = confidence_weights(&[&a, &b, &c]).unwrap();
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn identical_branches_pass_through(a in vec3()) {
            let l = logits(&a, &a, &a);
            for s in Strategy::ALL {
                let out = s.combine(&l).unwrap();
                for (x, y) in out.iter().zip(&a) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn tiny_threshold_matches_equal(a in vec3(), b in vec3(), c in vec3()) {
            let l = logits(&a, &b, &c);
            prop_assert_eq!(ensemble_threshold(&l, 1e-12).unwrap(), ensemble_equal(&l).unwrap());
        }

        #[test]
        fn constant_shift_moves_output(a in vec3(), b in vec3(), c in vec3(), k in -50.0f64..50.0) {
            let l = logits(&a, &b, &c);
            let sh = |v: &Vec<f64>| v.iter().map(|x| x + k).collect::<Vec<_>>();
            let m = logits(&sh(&a), &sh(&b), &sh(&c));
            for s in Strategy::ALL {
                let x = s.combine(&l).unwrap();
                let y = s.combine(&m).unwrap();
                for (p, q) in x.iter().zip(&y) {
                    prop_assert!((p + k - q).abs() < 1e-9);
                }
                prop_assert_eq!(argmax(&x).unwrap(), argmax(&y).unwrap());
            }
        }
    }
}
