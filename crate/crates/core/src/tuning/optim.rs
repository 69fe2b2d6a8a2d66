use super::objective::{GradientReport, Objective, TrainingExample};
use crate::encoders::PromptSet;
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// SGD with heavy-ball momentum: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        Ok(Self {
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Applies one update in place. `params` and `grads` must keep their length across calls.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = vec![0.0; params.len()];
        } else if self.velocity.len() != params.len() {
            return Err(Error::Shape("parameter count changed between steps".into()));
        }
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }
}

/// Updates prompt parameters against a fixed objective. Encoder weights are never touched.
#[derive(Debug, Clone)]
pub struct Trainer {
    objective: Objective,
    optimizer: Sgd,
}

impl Trainer {
    pub fn new(objective: Objective, momentum: f64) -> Result<Self> {
        Ok(Self {
            objective,
            optimizer: Sgd::new(momentum)?,
        })
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    /// One gradient step on `batch`; the report describes the prompts before the update.
    pub fn train_step(
        &mut self,
        batch: &[TrainingExample],
        prompts: &mut PromptSet,
        lr: f64,
    ) -> Result<GradientReport> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        let report = self.objective.gradient(batch, prompts)?;
        let mut flat = prompts.flat_values();
        self.optimizer
            .step(&mut flat, &report.grads.flat_values(), lr)?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(f64::NAN));
        }
        prompts.set_flat_values(&flat)?;
        Ok(report)
    }
}
