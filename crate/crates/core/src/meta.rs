//! Outer loop: buffered REINFORCE updates of the Conductor driven by the
//! policy's group-relative advantages.
//!
//! The surrogate ascended is
//!
//! ```text
//! J(phi) = (1/n) sum_i [ A_i log pi_phi(a_i | h_i) + lambda_ent H(pi_phi(. | h_i)) ]
//! ```
//!
//! Derivatives of the log-softmax and of the entropy are taken in closed form
//! through `W`, `b` and `log_tau`. The probability floor is treated as the
//! identity (straight-through).

use serde::{Deserialize, Serialize};

use crate::conductor::{ConductorGrad, ConductorParams, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::numerics::entropy_of;
use crate::optim::{apply_update, AdamState, AdamWConfig, ParamBlocks};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTransition {
    pub context: Vec<f64>,
    pub action: usize,
    pub advantage: f64,
}

impl MetaTransition {
    pub fn new(context: Vec<f64>, action: usize, advantage: f64) -> Result<Self> {
        if action >= NUM_ACTIONS {
            return Err(Error::invalid(format!("action {action} out of range")));
        }
        if !advantage.is_finite() {
            return Err(Error::invalid("non-finite advantage"));
        }
        Ok(MetaTransition {
            context,
            action,
            advantage,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Conductor update every `update_interval` policy steps.
    pub update_interval: usize,
    pub entropy_coef: f64,
    pub lr: f64,
    /// Update every step from that step's transitions only.
    pub joint: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            update_interval: 3,
            entropy_coef: 1e-3,
            lr: 5e-5,
            joint: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.update_interval == 0 {
            return Err(Error::Config("meta update_interval must be >= 1".into()));
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(Error::Config("meta entropy_coef must be >= 0".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("meta lr must be >= 0".into()));
        }
        Ok(())
    }

    pub fn effective_interval(&self) -> usize {
        if self.joint {
            1
        } else {
            self.update_interval
        }
    }

    /// Whether a meta-update follows policy step `step` (1-based).
    pub fn is_update_step(&self, step: usize) -> bool {
        step > 0 && step.is_multiple_of(self.effective_interval())
    }
}

/// FIFO of transitions awaiting the next meta-update; drained on update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaBuffer {
    transitions: Vec<MetaTransition>,
}

impl MetaBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, transitions: impl IntoIterator<Item = MetaTransition>) {
        self.transitions.extend(transitions);
    }

    pub fn drain(&mut self) -> Vec<MetaTransition> {
        std::mem::take(&mut self.transitions)
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Pre-floor surrogate `J`, for diagnostics and finite-difference checks.
pub fn meta_objective(
    params: &ConductorParams,
    batch: &[MetaTransition],
    entropy_coef: f64,
) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let total: f64 = batch
        .iter()
        .map(|t| {
            let p = params.unclamped_probs(&t.context);
            t.advantage * p[t.action].ln() + entropy_coef * entropy_of(&p)
        })
        .sum();
    total / batch.len() as f64
}

/// Gradient of [`meta_objective`] (the ascent direction).
pub fn meta_gradient(
    params: &ConductorParams,
    batch: &[MetaTransition],
    entropy_coef: f64,
) -> Result<ConductorGrad> {
    if batch.is_empty() {
        return Err(Error::invalid("meta_gradient needs a nonempty batch"));
    }
    let d = params.width;
    let tau = params.tau();
    let inv_n = 1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();

    for t in batch {
        if t.context.len() != d {
            return Err(Error::invalid("transition context width mismatch"));
        }
        if t.action >= NUM_ACTIONS {
            return Err(Error::invalid(format!("action {} out of range", t.action)));
        }
        let logits = params.logits(&t.context);
        let u: Vec<f64> = logits.iter().map(|z| z / tau).collect();
        let p = params.unclamped_probs(&t.context);
        let h_ent = entropy_of(&p);

        // d/du of  A * log p_a + lambda * H
        let du: Vec<f64> = (0..NUM_ACTIONS)
            .map(|k| {
                let onehot = if k == t.action { 1.0 } else { 0.0 };
                let log_pk = if p[k] > 0.0 { p[k].ln() } else { 0.0 };
                t.advantage * (onehot - p[k]) - entropy_coef * p[k] * (log_pk + h_ent)
            })
            .collect();

        for k in 0..NUM_ACTIONS {
            // u = z / tau, so dz = du / tau and d(log tau) = -u . du
            let dz = du[k] / tau * inv_n;
            grad.bias[k] += dz;
            let row = &mut grad.weights[k * d..(k + 1) * d];
            row.iter_mut()
                .zip(&t.context)
                .for_each(|(g, x)| *g += dz * x);
            grad.log_tau -= u[k] * du[k] * inv_n;
        }
    }
    Ok(grad)
}

/// One meta-update log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaUpdateLog {
    pub update_index: usize,
    pub step: usize,
    pub batch_size: usize,
    pub grad_norm: f64,
    pub mean_entropy: f64,
    pub action_freqs: [f64; NUM_ACTIONS],
    pub tau: f64,
}

/// Conductor parameters plus their optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLearner {
    pub conductor: ConductorParams,
    pub optimizer: AdamState,
    pub config: MetaConfig,
    pub updates: usize,
}

impl MetaLearner {
    pub fn new(conductor: ConductorParams, config: MetaConfig) -> Self {
        let optimizer = AdamState::for_params(&conductor);
        MetaLearner {
            conductor,
            optimizer,
            config,
            updates: 0,
        }
    }

    /// Drains `buffer` and takes one AdamW step on `-J`. An empty buffer is a
    /// no-op and returns `None`.
    pub fn update(
        &mut self,
        buffer: &mut MetaBuffer,
        step: usize,
    ) -> Result<Option<MetaUpdateLog>> {
        let batch = buffer.drain();
        if batch.is_empty() {
            return Ok(None);
        }
        let grad = meta_gradient(&self.conductor, &batch, self.config.entropy_coef)?;
        let grad_norm = grad.l2_norm();

        let mut descent = grad;
        for block in descent.blocks_mut() {
            block.iter_mut().for_each(|g| *g = -*g);
        }
        apply_update(
            &mut self.conductor,
            &descent,
            &mut self.optimizer,
            self.config.lr,
            &AdamWConfig::default(),
        )?;
        if !self.conductor.all_finite() {
            return Err(Error::NonFinite {
                step,
                what: "conductor parameters".into(),
            });
        }

        let mut freqs = [0.0; NUM_ACTIONS];
        let mut ent = 0.0;
        for t in &batch {
            freqs[t.action] += 1.0;
            ent += entropy_of(&self.conductor.unclamped_probs(&t.context));
        }
        let n = batch.len() as f64;
        freqs.iter_mut().for_each(|f| *f /= n);
        self.updates += 1;
        Ok(Some(MetaUpdateLog {
            update_index: self.updates,
            step,
            batch_size: batch.len(),
            grad_norm,
            mean_entropy: ent / n,
            action_freqs: freqs,
            tau: self.conductor.tau(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductor::action_distribution;
    use crate::numerics::RandomStream;

    fn random_conductor(width: usize, rng: &mut RandomStream) -> ConductorParams {
        let mut c = ConductorParams::new(width);
        c.weights.iter_mut().for_each(|w| *w = 0.5 * rng.normal());
        c.bias.iter_mut().for_each(|b| *b = 0.5 * rng.normal());
        c.log_tau = 0.2 * rng.normal();
        c
    }

    fn random_batch(n: usize, width: usize, rng: &mut RandomStream) -> Vec<MetaTransition> {
        (0..n)
            .map(|_| {
                let h = (0..width).map(|_| rng.normal()).collect();
                MetaTransition::new(h, rng.below(NUM_ACTIONS), rng.normal()).unwrap()
            })
            .collect()
    }

    #[test]
    fn buffer_counts_and_order() {
        let mut buf = MetaBuffer::new();
        let mk = |i: usize| MetaTransition::new(vec![i as f64], i % NUM_ACTIONS, 0.0).unwrap();
        buf.push((0..75).map(mk));
        buf.push((75..150).map(mk));
        let drained = buf.drain();
        assert_eq!(drained.len(), 150);
        assert!(buf.is_empty());
        assert!(drained
            .iter()
            .enumerate()
            .all(|(i, t)| t.context[0] == i as f64));
    }

    #[test]
    fn empty_drain_is_noop() {
        let mut rng = RandomStream::new(1, 0);
        let c = random_conductor(3, &mut rng);
        let mut learner = MetaLearner::new(c.clone(), MetaConfig::default());
        let mut buf = MetaBuffer::new();
        assert!(learner.update(&mut buf, 3).unwrap().is_none());
        assert_eq!(learner.conductor, c);
        assert_eq!(learner.optimizer.step, 0);
    }

    #[test]
    fn zero_signal_zero_gradient() {
        let mut rng = RandomStream::new(2, 0);
        let c = random_conductor(4, &mut rng);
        let mut batch = random_batch(6, 4, &mut rng);
        batch.iter_mut().for_each(|t| t.advantage = 0.0);
        assert_eq!(meta_gradient(&c, &batch, 0.0).unwrap().l2_norm(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = RandomStream::new(3, 0);
        for _ in 0..5 {
            let c = random_conductor(6, &mut rng);
            let batch = random_batch(8, 6, &mut rng);
            let lam = 0.05;
            let g = meta_gradient(&c, &batch, lam).unwrap();
            let h = 1e-5;
            let mut probe = c.clone();
            for b in 0..3 {
                for i in 0..c.blocks()[b].len() {
                    let orig = probe.blocks()[b][i];
                    probe.blocks_mut()[b][i] = orig + h;
                    let up = meta_objective(&probe, &batch, lam);
                    probe.blocks_mut()[b][i] = orig - h;
                    let down = meta_objective(&probe, &batch, lam);
                    probe.blocks_mut()[b][i] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = g.blocks()[b][i];
                    assert!(
                        (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6),
                        "block {b} entry {i}: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn shared_context_and_action_cancels() {
        let mut rng = RandomStream::new(4, 0);
        let c = random_conductor(5, &mut rng);
        let h: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let rewards = [0.1, 0.9, 0.4, 0.4, 0.7];
        let adv = crate::grpo::group_advantages(&rewards).unwrap();
        let batch: Vec<MetaTransition> = adv
            .iter()
            .map(|&a| MetaTransition::new(h.clone(), 2, a).unwrap())
            .collect();
        let g = meta_gradient(&c, &batch, 0.0).unwrap();
        assert!(g.l2_norm() <= 1e-12, "norm {}", g.l2_norm());
    }

    #[test]
    fn gradient_is_linear_in_advantages() {
        let mut rng = RandomStream::new(5, 0);
        let c = random_conductor(4, &mut rng);
        let batch = random_batch(7, 4, &mut rng);
        let scaled: Vec<MetaTransition> = batch
            .iter()
            .map(|t| MetaTransition {
                advantage: 2.5 * t.advantage,
                ..t.clone()
            })
            .collect();
        let g = meta_gradient(&c, &batch, 0.0).unwrap();
        let gs = meta_gradient(&c, &scaled, 0.0).unwrap();
        for (a, b) in g.blocks().iter().zip(gs.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert!((2.5 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn repeated_positive_advantage_raises_probability() {
        let mut rng = RandomStream::new(6, 0);
        let h: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let cfg = MetaConfig {
            lr: 1e-2,
            ..MetaConfig::default()
        };
        let mut learner = MetaLearner::new(ConductorParams::new(4), cfg);
        let mut prev = action_distribution(&learner.conductor, &h).unwrap()[3];
        for step in 1..=50 {
            let mut buf = MetaBuffer::new();
            buf.push((0..8).map(|_| MetaTransition::new(h.clone(), 3, 1.0).unwrap()));
            learner.update(&mut buf, step).unwrap();
            let now = action_distribution(&learner.conductor, &h).unwrap()[3];
            assert!(now > prev, "step {step}: {now} <= {prev}");
            prev = now;
        }
    }

    #[test]
    fn entropy_only_updates_flatten_distribution() {
        let mut rng = RandomStream::new(7, 0);
        let h: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let mut c = ConductorParams::new(4);
        c.bias = vec![2.0, -1.0, 0.5, 0.0, -0.5];
        let cfg = MetaConfig {
            lr: 1e-2,
            entropy_coef: 0.1,
            ..MetaConfig::default()
        };
        let mut learner = MetaLearner::new(c, cfg);
        let ent = |l: &MetaLearner| entropy_of(&l.conductor.unclamped_probs(&h));
        let mut prev = ent(&learner);
        for step in 1..=50 {
            let mut buf = MetaBuffer::new();
            buf.push((0..8).map(|i| MetaTransition::new(h.clone(), i % NUM_ACTIONS, 0.0).unwrap()));
            learner.update(&mut buf, step).unwrap();
            let now = ent(&learner);
            assert!(now > prev, "step {step}: {now} <= {prev}");
            prev = now;
        }
    }

    #[test]
    fn update_schedule() {
        let joint = MetaConfig {
            joint: true,
            update_interval: 3,
            ..MetaConfig::default()
        };
        assert_eq!((1..=12).filter(|s| joint.is_update_step(*s)).count(), 12);
        let async_cfg = MetaConfig::default();
        assert_eq!(
            (1..=13).filter(|s| async_cfg.is_update_step(*s)).count(),
            13 / 3
        );
    }

    #[test]
    fn joint_and_async_agree_on_a_single_buffer() {
        let mut rng = RandomStream::new(8, 0);
        let c = random_conductor(3, &mut rng);
        let batch = random_batch(5, 3, &mut rng);
        let run = |joint: bool| {
            let cfg = MetaConfig {
                joint,
                entropy_coef: 0.0,
                lr: 1e-2,
                ..MetaConfig::default()
            };
            let mut l = MetaLearner::new(c.clone(), cfg);
            let mut buf = MetaBuffer::new();
            buf.push(batch.clone());
            l.update(&mut buf, 1).unwrap();
            l.conductor
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn straight_through_floor_discrepancy_is_small() {
        // where the floor does not bind the clamped and unclamped log-probs agree;
        // where it binds, the affected probabilities are at most eps
        let mut rng = RandomStream::new(9, 0);
        for _ in 0..200 {
            let mut c = random_conductor(4, &mut rng);
            c.weights.iter_mut().for_each(|w| *w *= 4.0);
            let h: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let raw = c.unclamped_probs(&h);
            let clamped = action_distribution(&c, &h).unwrap();
            for (r, q) in raw.iter().zip(clamped.as_slice()) {
                assert!((r - q).abs() <= NUM_ACTIONS as f64 * c.eps_floor);
            }
        }
    }
}
