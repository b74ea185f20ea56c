//! The regularized training objective: cross-entropy plus a temperature-
//! scaled distillation term on the output probabilities and a cosine
//! alignment term on genuine-speech embeddings,
//!
//! `total = original + alpha * lwf + beta * psa`.
//!
//! The differentiable kernels live on [`Graph`]; this module owns the weight
//! and temperature types, the pure probability helpers, and the composition
//! of the three scalars into one loss node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, PsaForm};

/// Floor applied to probabilities before powers and logs.
pub const PROB_FLOOR: f64 = crate::tensor::graph::PROB_FLOOR;

/// Weights of the two regularizers in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || !self.alpha.is_finite() || !self.beta.is_finite()
        {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Distillation temperature (the experiments use 2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillationConfig {
    pub temperature: f64,
    pub psa_form: PsaForm,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        DistillationConfig { temperature: 2.0, psa_form: PsaForm::OneMinusCos }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// The per-batch loss components and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub original: f64,
    pub lwf: f64,
    pub psa: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.original.is_finite()
            && self.lwf.is_finite()
            && self.psa.is_finite()
            && self.total.is_finite()
    }
}

/// Temperature scaling of a probability vector: `y_i^{1/T}` renormalized.
/// Entries are floored at [`PROB_FLOOR`] before the power.
pub fn temperature_scale(probs: &[f64], temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    crate::tensor::graph::power_scale_row(probs, temperature, &mut out);
    out
}

/// Stable softmax of a logit slice, in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    crate::tensor::graph::softmax_row(logits, &mut out);
    out
}

/// Combine already-built loss nodes into the total objective, returning the
/// total node and the numeric breakdown. `lwf`/`psa` nodes absent from the
/// batch contribute exactly zero.
pub fn total_loss(
    g: &mut Graph,
    original: NodeId,
    lwf: Option<NodeId>,
    psa: Option<NodeId>,
    weights: &LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    weights.validate()?;
    let mut breakdown = LossBreakdown {
        original: g.value(original).item(),
        ..Default::default()
    };
    let mut total = original;
    if let Some(lwf) = lwf {
        breakdown.lwf = g.value(lwf).item();
        if weights.alpha > 0.0 {
            let scaled = g.scale(lwf, weights.alpha)?;
            total = g.add(total, scaled)?;
        }
    }
    if let Some(psa) = psa {
        breakdown.psa = g.value(psa).item();
        if weights.beta > 0.0 {
            let scaled = g.scale(psa, weights.beta)?;
            total = g.add(total, scaled)?;
        }
    }
    breakdown.total = g.value(total).item();
    Ok((total, breakdown))
}
