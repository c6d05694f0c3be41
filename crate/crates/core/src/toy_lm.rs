//! A tiny autoregressive policy: a width-`d` tanh recurrence over token
//! embeddings with a linear readout to vocabulary logits.
//!
//! ```text
//! s_0 = 0
//! s_t = tanh(A s_{t-1} + B E[tok_t])
//! p(. | tok_{<=t}) = softmax((C s_t + c) / temp)
//! ```
//!
//! Gradients are derived by hand (backpropagation through time); there is no
//! autodiff layer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{entropy_of, softmax_unchecked, RandomStream};
use crate::optim::ParamBlocks;

pub type Token = u32;

/// Policy weights. All matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub vocab: usize,
    pub width: usize,
    /// `V x d` token embeddings.
    pub embed: Vec<f64>,
    /// `d x d` recurrence.
    pub recur: Vec<f64>,
    /// `d x d` input map.
    pub input: Vec<f64>,
    /// `V x d` readout.
    pub out: Vec<f64>,
    /// `V` readout bias.
    pub out_bias: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type PolicyGrad = PolicyParams;

impl PolicyParams {
    pub fn zeros(vocab: usize, width: usize) -> Self {
        PolicyParams {
            vocab,
            width,
            embed: vec![0.0; vocab * width],
            recur: vec![0.0; width * width],
            input: vec![0.0; width * width],
            out: vec![0.0; vocab * width],
            out_bias: vec![0.0; vocab],
        }
    }

    /// Gaussian initialization: unit-variance embeddings, `1/d`-variance maps,
    /// recurrence scaled by `recur_gain`.
    pub fn random(vocab: usize, width: usize, recur_gain: f64, rng: &mut RandomStream) -> Self {
        let mut p = PolicyParams::zeros(vocab, width);
        let inv = (1.0 / width as f64).sqrt();
        p.embed.iter_mut().for_each(|x| *x = rng.normal());
        p.recur
            .iter_mut()
            .for_each(|x| *x = rng.normal() * inv * recur_gain);
        p.input.iter_mut().for_each(|x| *x = rng.normal() * inv);
        p.out.iter_mut().for_each(|x| *x = rng.normal() * inv);
        p
    }

    pub fn zeros_like(&self) -> Self {
        PolicyParams::zeros(self.vocab, self.width)
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.vocab == other.vocab && self.width == other.width
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab) {
            Some(t) => Err(Error::invalid(format!(
                "token id {t} out of range for vocabulary of {}",
                self.vocab
            ))),
            None => Ok(()),
        }
    }

    /// One recurrence step from `prev` after consuming `token`.
    fn step(&self, prev: &[f64], token: Token) -> Vec<f64> {
        let d = self.width;
        let e = &self.embed[token as usize * d..(token as usize + 1) * d];
        (0..d)
            .map(|i| {
                let a = &self.recur[i * d..(i + 1) * d];
                let b = &self.input[i * d..(i + 1) * d];
                let u: f64 = a.iter().zip(prev).map(|(x, y)| x * y).sum::<f64>()
                    + b.iter().zip(e).map(|(x, y)| x * y).sum::<f64>();
                u.tanh()
            })
            .collect()
    }

    /// Vocabulary logits `C s + c`.
    pub fn logits(&self, state: &[f64]) -> Vec<f64> {
        let d = self.width;
        (0..self.vocab)
            .map(|v| {
                let row = &self.out[v * d..(v + 1) * d];
                row.iter().zip(state).map(|(x, y)| x * y).sum::<f64>() + self.out_bias[v]
            })
            .collect()
    }

    fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += scale * b);
        }
    }
}

impl ParamBlocks for PolicyParams {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            &self.embed,
            &self.recur,
            &self.input,
            &self.out,
            &self.out_bias,
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.embed,
            &mut self.recur,
            &mut self.input,
            &mut self.out,
            &mut self.out_bias,
        ]
    }
}

/// Hidden states `s_0..s_T` over prompt then response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenTrace {
    pub states: Vec<Vec<f64>>,
    /// Index of the state right after the last prompt token.
    pub boundary_index: usize,
}

impl HiddenTrace {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trace always holds s_0")
    }
}

/// Which trace position feeds the Conductor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextPosition {
    First,
    Middle,
    #[default]
    Last,
}

pub fn encode(params: &PolicyParams, prompt: &[Token], response: &[Token]) -> Result<HiddenTrace> {
    params.check_tokens(prompt)?;
    params.check_tokens(response)?;
    let mut states = Vec::with_capacity(prompt.len() + response.len() + 1);
    states.push(vec![0.0; params.width]);
    for &tok in prompt.iter().chain(response) {
        let next = params.step(states.last().unwrap(), tok);
        states.push(next);
    }
    Ok(HiddenTrace {
        states,
        boundary_index: prompt.len(),
    })
}

/// `last -> s_T`, `middle -> s_{T/2}`, `first -> s_1` (or `s_0` for an empty trace).
pub fn extract_context(trace: &HiddenTrace, position: ContextPosition) -> Vec<f64> {
    let t = trace.states.len() - 1;
    let idx = match position {
        ContextPosition::Last => t,
        ContextPosition::Middle => t / 2,
        ContextPosition::First => t.min(1),
    };
    trace.states[idx].clone()
}

/// Sampling controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub max_len: usize,
    pub temperature: f64,
    /// Generation stops after emitting this token.
    pub stop_token: Option<Token>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    /// Log-probabilities of the sampled tokens under the sampling distribution.
    pub logprobs: Vec<f64>,
    /// Entropies of the sampling distribution at each response step.
    pub entropies: Vec<f64>,
    pub trace: HiddenTrace,
    /// Hit `max_len` without emitting the stop token.
    pub truncated: bool,
}

/// log-softmax of `logits / temp` at `index`.
fn log_prob(logits: &[f64], temp: f64, index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|l| ((l - max) / temp).exp())
        .sum::<f64>()
        .ln();
    (logits[index] - max) / temp - lse
}

pub fn sample_response(
    params: &PolicyParams,
    prompt: &[Token],
    decoding: &Decoding,
    rng: &mut RandomStream,
) -> Result<Trajectory> {
    if decoding.max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    if !(decoding.temperature > 0.0) {
        return Err(Error::invalid("sampling temperature must be positive"));
    }
    let mut trace = encode(params, prompt, &[])?;
    let mut response = Vec::with_capacity(decoding.max_len);
    let mut logprobs = Vec::with_capacity(decoding.max_len);
    let mut entropies = Vec::with_capacity(decoding.max_len);
    let mut truncated = true;

    for _ in 0..decoding.max_len {
        let logits = params.logits(trace.terminal());
        let probs = softmax_unchecked(&logits, decoding.temperature);
        let tok = rng.categorical(&probs);
        logprobs.push(log_prob(&logits, decoding.temperature, tok));
        entropies.push(entropy_of(&probs));
        response.push(tok as Token);
        let next = params.step(trace.terminal(), tok as Token);
        trace.states.push(next);
        if decoding.stop_token == Some(tok as Token) {
            truncated = false;
            break;
        }
    }

    Ok(Trajectory {
        prompt: prompt.to_vec(),
        response,
        logprobs,
        entropies,
        trace,
        truncated,
    })
}

/// Temperature-1 log-probabilities of each `target` token after `conditioning`.
pub fn token_logprobs(
    params: &PolicyParams,
    conditioning: &[Token],
    target: &[Token],
) -> Result<Vec<f64>> {
    params.check_tokens(conditioning)?;
    params.check_tokens(target)?;
    let mut state = vec![0.0; params.width];
    for &tok in conditioning {
        state = params.step(&state, tok);
    }
    let mut out = Vec::with_capacity(target.len());
    for &tok in target {
        out.push(log_prob(&params.logits(&state), 1.0, tok as usize));
        state = params.step(&state, tok);
    }
    Ok(out)
}

/// Mean per-token negative log-likelihood of `target` under teacher forcing.
pub fn sequence_nll(
    params: &PolicyParams,
    conditioning: &[Token],
    target: &[Token],
) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::invalid("sequence_nll needs a nonempty target"));
    }
    let lps = token_logprobs(params, conditioning, target)?;
    Ok(-lps.iter().sum::<f64>() / target.len() as f64)
}

/// Per-token sample estimate of `KL(pi_theta || pi_ref)` on the sampled response.
pub fn kl_penalty(
    params: &PolicyParams,
    reference: &PolicyParams,
    traj: &Trajectory,
) -> Result<f64> {
    if !params.same_shape(reference) {
        return Err(Error::invalid("policy and reference shapes differ"));
    }
    if traj.response.is_empty() {
        return Ok(0.0);
    }
    if params == reference {
        return Ok(0.0);
    }
    let cur = token_logprobs(params, &traj.prompt, &traj.response)?;
    let refs = token_logprobs(reference, &traj.prompt, &traj.response)?;
    let n = cur.len() as f64;
    Ok(cur.iter().zip(&refs).map(|(a, b)| a - b).sum::<f64>() / n)
}

/// Weighted teacher-forced objective shared by the policy loss and its gradient:
/// `sum_traj sum_t coef_traj * (-log pi(y_t))`.
fn weighted_nll_grad(
    params: &PolicyParams,
    prompt: &[Token],
    response: &[Token],
    coef: f64,
) -> PolicyGrad {
    let d = params.width;
    let p_len = prompt.len();
    let tokens: Vec<Token> = prompt.iter().chain(response).copied().collect();

    // forward
    let mut states = Vec::with_capacity(tokens.len() + 1);
    states.push(vec![0.0; d]);
    for &tok in &tokens {
        let next = params.step(states.last().unwrap(), tok);
        states.push(next);
    }

    let mut grad = params.zeros_like();
    let mut dstate = vec![vec![0.0; d]; states.len()];

    // readout
    for (i, &y) in response.iter().enumerate() {
        let k = p_len + i;
        let s = &states[k];
        let probs = softmax_unchecked(&params.logits(s), 1.0);
        for (tok, p) in probs.iter().enumerate() {
            let dz = coef * (p - if tok == y as usize { 1.0 } else { 0.0 });
            if dz == 0.0 {
                continue;
            }
            grad.out_bias[tok] += dz;
            let row = &params.out[tok * d..(tok + 1) * d];
            let grow = &mut grad.out[tok * d..(tok + 1) * d];
            for j in 0..d {
                grow[j] += dz * s[j];
                dstate[k][j] += dz * row[j];
            }
        }
    }

    // recurrence, newest first; s_t is produced by tokens[t - 1]
    let last_needed = p_len + response.len().saturating_sub(1);
    for t in (1..=last_needed.min(tokens.len())).rev() {
        let s = &states[t];
        let du: Vec<f64> = (0..d).map(|j| dstate[t][j] * (1.0 - s[j] * s[j])).collect();
        if du.iter().all(|x| *x == 0.0) {
            continue;
        }
        let tok = tokens[t - 1] as usize;
        let prev = &states[t - 1];
        let e = &params.embed[tok * d..(tok + 1) * d];
        let dprev = &mut dstate[t - 1];
        #[allow(clippy::needless_range_loop)]
        for i in 0..d {
            if du[i] == 0.0 {
                continue;
            }
            let ga = &mut grad.recur[i * d..(i + 1) * d];
            for j in 0..d {
                ga[j] += du[i] * prev[j];
            }
            let gb = &mut grad.input[i * d..(i + 1) * d];
            for j in 0..d {
                gb[j] += du[i] * e[j];
            }
            let a_row = &params.recur[i * d..(i + 1) * d];
            let b_row = &params.input[i * d..(i + 1) * d];
            let ge = &mut grad.embed[tok * d..(tok + 1) * d];
            for j in 0..d {
                dprev[j] += a_row[j] * du[i];
                ge[j] += b_row[j] * du[i];
            }
        }
    }
    grad
}

/// One batch element for the policy update.
#[derive(Debug, Clone, Copy)]
pub struct WeightedTrajectory<'a> {
    pub traj: &'a Trajectory,
    pub advantage: f64,
}

fn active<'a>(
    batch: &'a [WeightedTrajectory<'a>],
    mask_truncated: bool,
) -> impl Iterator<Item = &'a WeightedTrajectory<'a>> {
    batch
        .iter()
        .filter(move |w| !(mask_truncated && w.traj.truncated) && !w.traj.response.is_empty())
}

/// `L = -(1/N_tok) sum A log pi(y_t) + beta * (1/N_tok) sum [log pi(y_t) - log pi_ref(y_t)]`,
/// all log-probabilities at temperature 1.
pub fn policy_loss(
    params: &PolicyParams,
    batch: &[WeightedTrajectory<'_>],
    beta: f64,
    reference: &PolicyParams,
    mask_truncated: bool,
) -> Result<f64> {
    let n_tok: usize = active(batch, mask_truncated)
        .map(|w| w.traj.response.len())
        .sum();
    if n_tok == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for w in active(batch, mask_truncated) {
        let cur = token_logprobs(params, &w.traj.prompt, &w.traj.response)?;
        let refs = if beta != 0.0 {
            token_logprobs(reference, &w.traj.prompt, &w.traj.response)?
        } else {
            vec![0.0; cur.len()]
        };
        for (lp, lr) in cur.iter().zip(&refs) {
            total += -w.advantage * lp + beta * (lp - lr);
        }
    }
    Ok(total / n_tok as f64)
}

/// Gradient of [`policy_loss`] by backpropagation through time.
///
/// Truncated trajectories are dropped entirely when `mask_truncated` is set.
/// Per-trajectory gradients are computed in parallel and summed in batch order.
pub fn policy_gradient(
    params: &PolicyParams,
    batch: &[WeightedTrajectory<'_>],
    beta: f64,
    reference: &PolicyParams,
    mask_truncated: bool,
) -> Result<PolicyGrad> {
    if batch.is_empty() {
        return Err(Error::invalid("policy_gradient needs a nonempty batch"));
    }
    if !params.same_shape(reference) {
        return Err(Error::invalid("policy and reference shapes differ"));
    }
    for w in batch {
        params.check_tokens(&w.traj.prompt)?;
        params.check_tokens(&w.traj.response)?;
    }
    let members: Vec<&WeightedTrajectory<'_>> = active(batch, mask_truncated).collect();
    let n_tok: usize = members.iter().map(|w| w.traj.response.len()).sum();
    let mut grad = params.zeros_like();
    if n_tok == 0 {
        return Ok(grad);
    }
    // d/dtheta of (beta - A) * log pi / N_tok; the reference only enters the loss value
    let parts: Vec<PolicyGrad> = members
        .par_iter()
        .map(|w| {
            let coef = (w.advantage - beta) / n_tok as f64;
            if coef == 0.0 {
                params.zeros_like()
            } else {
                weighted_nll_grad(params, &w.traj.prompt, &w.traj.response, coef)
            }
        })
        .collect();
    for part in &parts {
        grad.add_scaled(part, 1.0);
    }
    Ok(grad)
}

/// Teacher-forced mean NLL over `(conditioning, target)` pairs and its gradient.
/// Used for supervised warm-starting.
pub fn supervised_gradient(
    params: &PolicyParams,
    pairs: &[(Vec<Token>, Vec<Token>)],
) -> Result<(f64, PolicyGrad)> {
    let n_tok: usize = pairs.iter().map(|(_, t)| t.len()).sum();
    if n_tok == 0 {
        return Err(Error::invalid("supervised batch has no target tokens"));
    }
    let results: Vec<Result<(f64, PolicyGrad)>> = pairs
        .par_iter()
        .map(|(cond, target)| {
            let lps = token_logprobs(params, cond, target)?;
            let g = weighted_nll_grad(params, cond, target, 1.0 / n_tok as f64);
            Ok((-lps.iter().sum::<f64>(), g))
        })
        .collect();
    let mut grad = params.zeros_like();
    let mut nll = 0.0;
    for r in results {
        let (l, g) = r?;
        nll += l;
        grad.add_scaled(&g, 1.0);
    }
    Ok((nll / n_tok as f64, grad))
}

/// `theta_ref <- alpha * theta_ref + (1 - alpha) * theta`, elementwise.
pub fn sync_reference(
    reference: &mut PolicyParams,
    params: &PolicyParams,
    alpha: f64,
) -> Result<()> {
    if !reference.same_shape(params) {
        return Err(Error::invalid("reference and policy shapes differ"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!(
            "mixup alpha must be in [0, 1], got {alpha}"
        )));
    }
    for (r, p) in reference.blocks_mut().into_iter().zip(params.blocks()) {
        r.iter_mut()
            .zip(p)
            .for_each(|(a, b)| *a = alpha * *a + (1.0 - alpha) * b);
    }
    Ok(())
}
