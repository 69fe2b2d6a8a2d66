use super::vanilla_representation;
use crate::encoders::{Encoder, EncoderState, ModelConfig, PromptSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// One labelled training image with its cached vanilla representation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub image: Image,
    pub label: usize,
    pub vanilla: Vec<f64>,
}

/// Computes the vanilla representation of every image once.
pub fn prepare_examples(
    images: &[Image],
    labels: &[usize],
    cfg: &ModelConfig,
    state: &EncoderState,
) -> Result<Vec<TrainingExample>> {
    if images.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} images, {} labels",
            images.len(),
            labels.len()
        )));
    }
    images
        .iter()
        .zip(labels)
        .map(|(image, &label)| {
            Ok(TrainingExample {
                image: image.clone(),
                label,
                vanilla: vanilla_representation(image, cfg, state)?,
            })
        })
        .collect()
}

/// Which terms of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub augmented: bool,
    pub consistency: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            augmented: true,
            consistency: true,
        }
    }
}

/// Components of the objective. `text` compares prompted and vanilla text
/// representations, `img` compares prompted and vanilla image representations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub total: T,
    pub ce: T,
    pub text: T,
    pub img: T,
    pub aug: T,
}

/// The training objective over a fixed set of seen classes.
#[derive(Debug, Clone)]
pub struct Objective {
    cfg: ModelConfig,
    state: EncoderState,
    class_tokens: Vec<Vec<usize>>,
    vanilla_text: Tensor,
    switches: LossSwitches,
}

/// Tape handles of one objective evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveGraph {
    pub terms: LossTerms<Var>,
    pub visual_prompts: Vec<Var>,
    pub text_prompts: Vec<Var>,
    /// Per-example vanilla representation nodes.
    pub vanilla_reps: Vec<Var>,
    /// Per-example global representation nodes.
    pub global_reps: Vec<Var>,
    /// Per-example `1 x N_c` global-branch similarities.
    pub global_sims: Vec<Var>,
}

impl Objective {
    pub fn new(
        cfg: &ModelConfig,
        state: &EncoderState,
        class_tokens: Vec<Vec<usize>>,
        switches: LossSwitches,
    ) -> Result<Self> {
        if class_tokens.is_empty() {
            return Err(Error::InvalidArgument(
                "objective needs at least one class".into(),
            ));
        }
        let bank = super::text_bank(&class_tokens, &PromptSet::zeros(cfg), cfg, state)?;
        Ok(Self {
            cfg: cfg.clone(),
            state: state.clone(),
            class_tokens,
            vanilla_text: bank.vanilla,
            switches,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EncoderState {
        &self.state
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    pub fn class_tokens(&self) -> &[Vec<usize>] {
        &self.class_tokens
    }

    pub fn vanilla_text(&self) -> &Tensor {
        &self.vanilla_text
    }

    pub fn switches(&self) -> LossSwitches {
        self.switches
    }

    fn uses_augmented(&self) -> bool {
        self.switches.augmented && self.cfg.has_augmented_branch()
    }

    /// Records the full objective on `tape`.
    pub fn build(
        &self,
        tape: &mut Tape,
        batch: &[TrainingExample],
        prompts: &PromptSet,
    ) -> Result<ObjectiveGraph> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        prompts.check(&self.cfg)?;
        let n_classes = self.num_classes();
        if let Some(bad) = batch.iter().find(|ex| ex.label >= n_classes) {
            return Err(Error::OutOfRange {
                what: "class",
                index: bad.label,
                size: n_classes,
            });
        }
        let enc = Encoder::new(tape, &self.cfg, &self.state)?;
        let (pv, pt) = Encoder::prompt_vars(tape, prompts, true);
        let inv_tau = 1.0 / self.cfg.tau;
        let one = tape.constant(Tensor::scalar(1.0));

        let mut rows = Vec::with_capacity(n_classes);
        for ids in &self.class_tokens {
            let (e0, w0) = enc.embed_text(tape, ids)?;
            let ek = enc.encode_text(tape, e0, w0, &pt)?;
            rows.push(enc.project_text(tape, ek)?);
        }
        let zp = tape.concat_rows(&rows)?;
        let zp_t = tape.transpose(zp);

        let z = tape.constant(self.vanilla_text.clone());
        let agreement = tape.mul(zp, z)?;
        let agreement = tape.sum(agreement);
        let agreement = tape.scale(agreement, 1.0 / n_classes as f64);
        let text = tape.sub(one, agreement)?;

        let mut ce_sum = None;
        let mut img_sum = None;
        let mut aug_sum = None;
        let mut vanilla_reps = Vec::with_capacity(batch.len());
        let mut global_reps = Vec::with_capacity(batch.len());
        let mut global_sims = Vec::with_capacity(batch.len());
        let add_to = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| -> Result<()> {
            *acc = Some(match *acc {
                Some(a) => tape.add(a, v)?,
                None => v,
            });
            Ok(())
        };
        for ex in batch {
            let (c0, e0) = enc.embed_image(tape, &ex.image)?;
            let out = enc.encode_image(tape, c0, e0, &pv)?;
            let xp = enc.project_image(tape, out.cls)?;
            global_reps.push(xp);

            let sims = tape.matmul(xp, zp_t)?;
            global_sims.push(sims);
            let logits = tape.scale(sims, inv_tau);
            let ls = tape.log_softmax_rows(logits);
            let nll = tape.element(ls, 0, ex.label)?;
            add_to(tape, &mut ce_sum, nll)?;

            let x = tape.constant(Tensor::row(ex.vanilla.clone())?);
            vanilla_reps.push(x);
            let cos = tape.mul(xp, x)?;
            let cos = tape.sum(cos);
            add_to(tape, &mut img_sum, cos)?;

            if self.uses_augmented() {
                let p = out.prompts.expect("visual prompts present");
                let aug = enc.project_image(tape, p)?;
                let sims = tape.matmul(aug, zp_t)?;
                let sims = tape.mean_rows(sims);
                let logits = tape.scale(sims, inv_tau);
                let ls = tape.log_softmax_rows(logits);
                let nll = tape.element(ls, 0, ex.label)?;
                add_to(tape, &mut aug_sum, nll)?;
            }
        }
        let inv_b = 1.0 / batch.len() as f64;
        let ce = tape.scale(ce_sum.expect("non-empty batch"), -inv_b);
        let mean_cos = tape.scale(img_sum.expect("non-empty batch"), inv_b);
        let img = tape.sub(one, mean_cos)?;
        let aug = match aug_sum {
            Some(s) => tape.scale(s, -inv_b),
            None => tape.constant(Tensor::scalar(0.0)),
        };

        let mut total = ce;
        if self.switches.consistency {
            let t = tape.scale(text, self.cfg.lambda1);
            let i = tape.scale(img, self.cfg.lambda2);
            total = tape.add(total, t)?;
            total = tape.add(total, i)?;
        }
        if self.uses_augmented() {
            total = tape.add(total, aug)?;
        }
        Ok(ObjectiveGraph {
            terms: LossTerms {
                total,
                ce,
                text,
                img,
                aug,
            },
            visual_prompts: pv,
            text_prompts: pt,
            vanilla_reps,
            global_reps,
            global_sims,
        })
    }

    fn read_terms(tape: &Tape, terms: &LossTerms<Var>) -> LossTerms<f64> {
        let v = |x: Var| tape.value(x).item();
        LossTerms {
            total: v(terms.total),
            ce: v(terms.ce),
            text: v(terms.text),
            img: v(terms.img),
            aug: v(terms.aug),
        }
    }

    pub fn evaluate(
        &self,
        batch: &[TrainingExample],
        prompts: &PromptSet,
    ) -> Result<LossTerms<f64>> {
        let mut tape = Tape::new();
        let g = self.build(&mut tape, batch, prompts)?;
        Ok(Self::read_terms(&tape, &g.terms))
    }

    /// Loss terms, the gradient of the total with respect to every prompt entry,
    /// and the global-branch prediction for each example.
    pub fn gradient(
        &self,
        batch: &[TrainingExample],
        prompts: &PromptSet,
    ) -> Result<GradientReport> {
        let mut tape = Tape::new();
        let g = self.build(&mut tape, batch, prompts)?;
        let terms = Self::read_terms(&tape, &g.terms);
        if !terms.total.is_finite() {
            return Err(Error::Diverged(terms.total));
        }
        let grads = tape.backward(g.terms.total)?;
        let collect = |vars: &[Var], like: &[Tensor], grads: &Gradients| -> Vec<Tensor> {
            vars.iter()
                .zip(like)
                .map(|(&v, t)| {
                    grads
                        .get(v)
                        .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
                })
                .collect()
        };
        let predictions = g
            .global_sims
            .iter()
            .map(|&s| crate::ensemble::argmax(tape.value(s).values()))
            .collect::<Result<_>>()?;
        Ok(GradientReport {
            terms,
            grads: PromptSet {
                visual: collect(&g.visual_prompts, &prompts.visual, &grads),
                text: collect(&g.text_prompts, &prompts.text, &grads),
            },
            predictions,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub terms: LossTerms<f64>,
    /// Same layout as the prompts.
    pub grads: PromptSet,
    pub predictions: Vec<usize>,
}

/// Mean global-branch cross-entropy plus the weighted consistency terms.
pub fn loss_global(
    objective: &Objective,
    batch: &[TrainingExample],
    prompts: &PromptSet,
) -> Result<f64> {
    let t = objective.evaluate(batch, prompts)?;
    let cfg = objective.config();
    Ok(super::combine_global(
        t.ce,
        t.text,
        t.img,
        cfg.lambda1,
        cfg.lambda2,
    ))
}

/// Mean augmented-branch cross-entropy; zero when the branch is disabled.
pub fn loss_aug(
    objective: &Objective,
    batch: &[TrainingExample],
    prompts: &PromptSet,
) -> Result<f64> {
    Ok(objective.evaluate(batch, prompts)?.aug)
}

/// The complete training objective.
pub fn loss_total(
    objective: &Objective,
    batch: &[TrainingExample],
    prompts: &PromptSet,
) -> Result<f64> {
    Ok(objective.evaluate(batch, prompts)?.total)
}
