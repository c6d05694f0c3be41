//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter containers expose their storage as a fixed sequence of flat blocks.
pub trait ParamBlocks {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn l2_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn for_params<P: ParamBlocks>(params: &P) -> Self {
        AdamState::new(params.num_params())
    }
}

/// One AdamW step, in place: `p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn apply_update<P: ParamBlocks>(
    params: &mut P,
    grad: &P,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let grad_blocks = grad.blocks();
    let n = params.num_params();
    let shapes_match = {
        let pb = params.blocks();
        pb.len() == grad_blocks.len()
            && pb.iter().zip(&grad_blocks).all(|(a, b)| a.len() == b.len())
    };
    if !shapes_match || state.m.len() != n || state.v.len() != n {
        return Err(Error::invalid(format!(
            "optimizer shape mismatch: params {n}, grad {}, state {}",
            grad.num_params(),
            state.m.len()
        )));
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    let mut i = 0;
    for (block, g_block) in params.blocks_mut().into_iter().zip(grad_blocks) {
        for (p, g) in block.iter_mut().zip(g_block) {
            let m = &mut state.m[i];
            let v = &mut state.v[i];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * cfg.weight_decay * *p;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            i += 1;
        }
    }
    Ok(())
}
