//! The Conductor: a linear head over a policy hidden state that emits a
//! categorical distribution over reward-emphasis actions.
//!
//! `pi(. | h) = clamp_floor(softmax((W h + b) / tau), eps)`, with
//! `tau = exp(log_tau)` learned. Training samples one action per rollout; the
//! continuous distribution itself is the inference-time weight vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{clamp_floor, softmax_unchecked, RandomStream, SimplexVector};
use crate::optim::ParamBlocks;
use crate::rewards::NUM_REWARDS;

/// One action per reward component.
pub const NUM_ACTIONS: usize = NUM_REWARDS;

pub const DEFAULT_EPS_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConductorParams {
    pub width: usize,
    /// `K x d`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub log_tau: f64,
    /// Not trained.
    pub eps_floor: f64,
}

pub type ConductorGrad = ConductorParams;

impl ConductorParams {
    /// Zero projection and bias, `tau = 1`.
    pub fn new(width: usize) -> Self {
        ConductorParams {
            width,
            weights: vec![0.0; NUM_ACTIONS * width],
            bias: vec![0.0; NUM_ACTIONS],
            log_tau: 0.0,
            eps_floor: DEFAULT_EPS_FLOOR,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConductorParams {
            log_tau: 0.0,
            ..ConductorParams::new(self.width)
        }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let d = self.width;
        (0..NUM_ACTIONS)
            .map(|k| {
                self.weights[k * d..(k + 1) * d]
                    .iter()
                    .zip(h)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                    + self.bias[k]
            })
            .collect()
    }

    /// Softmax before the probability floor; gradients are taken through this.
    pub fn unclamped_probs(&self, h: &[f64]) -> Vec<f64> {
        softmax_unchecked(&self.logits(h), self.tau())
    }

    fn check_context(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.width {
            return Err(Error::invalid(format!(
                "context has width {}, conductor expects {}",
                h.len(),
                self.width
            )));
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite conductor context"));
        }
        Ok(())
    }
}

impl ParamBlocks for ConductorParams {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            &self.weights,
            &self.bias,
            std::slice::from_ref(&self.log_tau),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.weights,
            &mut self.bias,
            std::slice::from_mut(&mut self.log_tau),
        ]
    }
}

/// How a sampled action becomes a scalarization weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum EmphasisMode {
    #[default]
    OneHot,
    /// `(1 - delta)/K + delta * e_a`.
    Softened { delta: f64 },
}

impl EmphasisMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EmphasisMode::OneHot => Ok(()),
            EmphasisMode::Softened { delta } if (0.0..=1.0).contains(&delta) => Ok(()),
            EmphasisMode::Softened { delta } => Err(Error::invalid(format!(
                "softened delta {delta} outside [0, 1]"
            ))),
        }
    }
}

pub fn action_distribution(params: &ConductorParams, h: &[f64]) -> Result<SimplexVector> {
    params.check_context(h)?;
    let p = SimplexVector::new(params.unclamped_probs(h))?;
    clamp_floor(&p, params.eps_floor)
}

pub fn sample_action(params: &ConductorParams, h: &[f64], rng: &mut RandomStream) -> Result<usize> {
    let p = action_distribution(params, h)?;
    Ok(rng.categorical(p.as_slice()))
}

pub fn emphasis_weights(action: usize, mode: EmphasisMode) -> Result<SimplexVector> {
    if action >= NUM_ACTIONS {
        return Err(Error::invalid(format!("action {action} out of range")));
    }
    match mode {
        EmphasisMode::OneHot => Ok(SimplexVector::one_hot(NUM_ACTIONS, action)),
        EmphasisMode::Softened { delta } => {
            mode.validate()?;
            let base = (1.0 - delta) / NUM_ACTIONS as f64;
            let w = (0..NUM_ACTIONS)
                .map(|k| if k == action { base + delta } else { base })
                .collect();
            SimplexVector::new(w)
        }
    }
}

/// Continuous weights used at inference and for weight-dynamics logging.
pub fn inference_weights(params: &ConductorParams, h: &[f64]) -> Result<SimplexVector> {
    action_distribution(params, h)
}
