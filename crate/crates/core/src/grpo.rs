//! Inner loop: rollout groups, reward scalarization, group-relative advantages
//! and the policy update.

use std::time::{Duration, Instant};

use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conductor::{emphasis_weights, sample_action, ConductorParams, EmphasisMode};
use crate::envsuite::PromptInstance;
use crate::error::{Error, Result};
use crate::meta::MetaTransition;
use crate::numerics::{Purpose, RandomStream, SimplexVector};
use crate::optim::{apply_update, AdamState, AdamWConfig, ParamBlocks};
use crate::rewards::{
    assemble_group_rewards, measure, EntropySign, LengthBounds, Normalization, PrefScorer,
    RawMeasurement, RewardVector, NUM_REWARDS,
};
use crate::toy_lm::{
    extract_context, kl_penalty, policy_gradient, sample_response, sync_reference, ContextPosition,
    Decoding, PolicyParams, Trajectory, WeightedTrajectory,
};

/// Additive floor on the group standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Where the KL penalty enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlFusion {
    /// Subtracted from the scalar reward before advantages are computed.
    #[default]
    RewardNode,
    /// Added to the policy loss.
    LossTerm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub sync_interval: usize,
    pub mixup_alpha: f64,
    pub lr: f64,
    pub sampling_temp: f64,
    pub max_len: usize,
    pub mask_truncated: bool,
    pub kl_fusion: KlFusion,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 5,
            batch_size: 15,
            beta: 0.1,
            sync_interval: 6,
            mixup_alpha: 0.6,
            lr: 1e-5,
            sampling_temp: 0.8,
            max_len: crate::envsuite::DEFAULT_MAX_LEN,
            mask_truncated: true,
            kl_fusion: KlFusion::RewardNode,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("grpo group_size must be >= 2");
        }
        if self.batch_size == 0 {
            return bad("grpo batch_size must be >= 1");
        }
        if !(self.beta >= 0.0) {
            return bad("grpo beta must be >= 0");
        }
        if self.sync_interval == 0 {
            return bad("grpo sync_interval must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.mixup_alpha) {
            return bad("grpo mixup_alpha must be in [0, 1]");
        }
        if !(self.lr >= 0.0) {
            return bad("grpo lr must be >= 0");
        }
        if !(self.sampling_temp > 0.0) {
            return bad("grpo sampling_temp must be > 0");
        }
        if self.max_len == 0 {
            return bad("grpo max_len must be >= 1");
        }
        Ok(())
    }

    pub fn decoding(&self, stop_token: u32) -> Decoding {
        Decoding {
            max_len: self.max_len,
            temperature: self.sampling_temp,
            stop_token: Some(stop_token),
        }
    }
}

/// Reward-side settings shared by every group of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSetup {
    pub scorer: PrefScorer,
    pub entropy_sign: EntropySign,
    pub normalization: Normalization,
}

/// Where each member's scalarization weights come from.
#[derive(Debug, Clone, Copy)]
pub enum WeightSource<'a> {
    /// Sample one emphasis action per member from the Conductor.
    Conductor {
        params: &'a ConductorParams,
        position: ContextPosition,
        emphasis: EmphasisMode,
    },
    /// The same weights for every member.
    Fixed(&'a SimplexVector),
    /// A fresh symmetric Dirichlet(1) draw per member.
    Dirichlet,
}

/// `sum_k w_k r_k`, minus `beta * kl` when KL is fused at the reward node.
pub fn scalarize(
    r: &RewardVector,
    w: &SimplexVector,
    kl: f64,
    beta: f64,
    mode: KlFusion,
) -> Result<f64> {
    if w.len() != NUM_REWARDS {
        return Err(Error::invalid(format!(
            "weight vector has {} entries, expected {NUM_REWARDS}",
            w.len()
        )));
    }
    let mixed: f64 = r
        .components()
        .iter()
        .zip(w.as_slice())
        .map(|(r, w)| r * w)
        .sum();
    Ok(match mode {
        KlFusion::RewardNode => mixed - beta * kl,
        KlFusion::LossTerm => mixed,
    })
}

/// `(R_j - mean) / (sigma_pop + 1e-6)`.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid("group advantages need at least 2 members"));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("non-finite scalar reward"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + SIGMA_FLOOR;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// A symmetric Dirichlet(1) sample on the reward simplex.
pub fn dirichlet_weights(rng: &mut RandomStream) -> SimplexVector {
    let draws: Vec<f64> = (0..NUM_REWARDS).map(|_| Exp1.sample(rng)).collect();
    SimplexVector::from_unnormalized(draws).unwrap_or_else(|_| SimplexVector::uniform(NUM_REWARDS))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    pub traj: Trajectory,
    pub raw: RawMeasurement,
    pub rewards: RewardVector,
    pub context: Vec<f64>,
    /// Sampled emphasis action; `None` for fixed or random weights.
    pub action: Option<usize>,
    pub weights: SimplexVector,
    pub kl: f64,
    pub scalar: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt: PromptInstance,
    pub members: Vec<GroupMember>,
}

impl RolloutGroup {
    pub fn advantages(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.advantage).collect()
    }

    pub fn transitions(&self) -> Vec<MetaTransition> {
        self.members
            .iter()
            .filter_map(|m| {
                m.action.map(|a| MetaTransition {
                    context: m.context.clone(),
                    action: a,
                    advantage: m.advantage,
                })
            })
            .collect()
    }
}

/// Samples and scores one group. `rng` is this prompt's stream; member `j`
/// samples from sub-stream `j` and draws its weights from an independent one.
pub fn run_group(
    policy: &PolicyParams,
    reference: &PolicyParams,
    prompt: &PromptInstance,
    source: WeightSource<'_>,
    setup: &RewardSetup,
    cfg: &GrpoConfig,
    rng: &RandomStream,
) -> Result<RolloutGroup> {
    run_group_timed(policy, reference, prompt, source, setup, cfg, rng).map(|(g, _)| g)
}

/// [`run_group`] plus the time spent in Conductor forward passes.
pub fn run_group_timed(
    policy: &PolicyParams,
    reference: &PolicyParams,
    prompt: &PromptInstance,
    source: WeightSource<'_>,
    setup: &RewardSetup,
    cfg: &GrpoConfig,
    rng: &RandomStream,
) -> Result<(RolloutGroup, Duration)> {
    let decoding = cfg.decoding(prompt.format_spec.end);
    let bounds = LengthBounds {
        min: prompt.l_min,
        max: prompt.l_max,
    };
    let g = cfg.group_size;
    let mut trajs = Vec::with_capacity(g);
    let mut raws = Vec::with_capacity(g);
    for j in 0..g {
        let mut sample_rng = rng.derive(Purpose::Rollout, j as u64);
        let traj = sample_response(policy, &prompt.prompt_tokens, &decoding, &mut sample_rng)?;
        raws.push(measure(
            policy,
            &traj,
            &prompt.reference,
            &prompt.format_spec,
            bounds,
            &setup.scorer,
        )?);
        trajs.push(traj);
    }
    let rewards = assemble_group_rewards(&raws, setup.entropy_sign, setup.normalization)?;

    let mut conductor_time = Duration::ZERO;
    let mut members = Vec::with_capacity(g);
    for (j, ((traj, raw), rv)) in trajs.into_iter().zip(raws).zip(rewards).enumerate() {
        let mut weight_rng = rng.derive(Purpose::Conductor, j as u64);
        let (context, action, weights) = match source {
            WeightSource::Conductor {
                params,
                position,
                emphasis,
            } => {
                let start = Instant::now();
                let h = extract_context(&traj.trace, position);
                let a = sample_action(params, &h, &mut weight_rng)?;
                let w = emphasis_weights(a, emphasis)?;
                conductor_time += start.elapsed();
                (h, Some(a), w)
            }
            WeightSource::Fixed(w) => (
                extract_context(&traj.trace, ContextPosition::Last),
                None,
                w.clone(),
            ),
            WeightSource::Dirichlet => (
                extract_context(&traj.trace, ContextPosition::Last),
                None,
                dirichlet_weights(&mut weight_rng),
            ),
        };
        let kl = kl_penalty(policy, reference, &traj)?;
        let scalar = scalarize(&rv, &weights, kl, cfg.beta, cfg.kl_fusion)?;
        members.push(GroupMember {
            traj,
            raw,
            rewards: rv,
            context,
            action,
            weights,
            kl,
            scalar,
            advantage: 0.0,
        });
    }
    let scalars: Vec<f64> = members.iter().map(|m| m.scalar).collect();
    for (m, a) in members.iter_mut().zip(group_advantages(&scalars)?) {
        m.advantage = a;
    }
    Ok((
        RolloutGroup {
            prompt: prompt.clone(),
            members,
        },
        conductor_time,
    ))
}

/// Trainable policy, its reference snapshot and optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub optimizer: AdamState,
}

impl PolicyState {
    pub fn new(params: PolicyParams) -> Self {
        PolicyState {
            reference: params.clone(),
            optimizer: AdamState::for_params(&params),
            params,
        }
    }
}

/// One JSON-lines record per policy step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub reward_means: [f64; NUM_REWARDS],
    pub mean_abs_advantage: f64,
    pub kl_mean: f64,
    pub weight_means: [f64; NUM_REWARDS],
    pub mean_length: f64,
    pub truncated_fraction: f64,
    pub synced_reference: bool,
}

pub struct StepOutput {
    pub groups: Vec<RolloutGroup>,
    pub transitions: Vec<MetaTransition>,
    pub log: StepLog,
    /// Wall-clock spent in Conductor forward passes (all groups).
    pub conductor_time: Duration,
}

/// One GRPO step: a group per prompt (built in parallel), one optimizer step
/// over every member weighted by its advantage, then a reference sync when
/// `step % sync_interval == 0`.
pub fn grpo_step(
    state: &mut PolicyState,
    batch: &[PromptInstance],
    source: WeightSource<'_>,
    setup: &RewardSetup,
    cfg: &GrpoConfig,
    rng: &RandomStream,
    step: usize,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("grpo_step needs a nonempty prompt batch"));
    }
    let built: Vec<Result<(RolloutGroup, Duration)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let prompt_rng = rng.split(i as u64);
            run_group_timed(
                &state.params,
                &state.reference,
                prompt,
                source,
                setup,
                cfg,
                &prompt_rng,
            )
        })
        .collect();
    let mut groups = Vec::with_capacity(batch.len());
    let mut conductor_time = Duration::ZERO;
    for b in built {
        let (g, t) = b?;
        conductor_time += t;
        groups.push(g);
    }

    let weighted: Vec<WeightedTrajectory<'_>> = groups
        .iter()
        .flat_map(|g| g.members.iter())
        .map(|m| WeightedTrajectory {
            traj: &m.traj,
            advantage: m.advantage,
        })
        .collect();
    let loss_beta = match cfg.kl_fusion {
        KlFusion::RewardNode => 0.0,
        KlFusion::LossTerm => cfg.beta,
    };
    let grad = policy_gradient(
        &state.params,
        &weighted,
        loss_beta,
        &state.reference,
        cfg.mask_truncated,
    )?;
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            step,
            what: "policy gradient".into(),
        });
    }
    apply_update(
        &mut state.params,
        &grad,
        &mut state.optimizer,
        cfg.lr,
        &AdamWConfig::default(),
    )?;
    if !state.params.all_finite() {
        return Err(Error::NonFinite {
            step,
            what: "policy parameters".into(),
        });
    }
    let synced = step.is_multiple_of(cfg.sync_interval);
    if synced {
        sync_reference(&mut state.reference, &state.params, cfg.mixup_alpha)?;
    }

    let log = step_log(step, &groups, synced);
    let transitions = groups.iter().flat_map(|g| g.transitions()).collect();
    Ok(StepOutput {
        groups,
        transitions,
        log,
        conductor_time,
    })
}

fn step_log(step: usize, groups: &[RolloutGroup], synced: bool) -> StepLog {
    let members: Vec<&GroupMember> = groups.iter().flat_map(|g| &g.members).collect();
    let n = members.len() as f64;
    let mut reward_means = [0.0; NUM_REWARDS];
    let mut weight_means = [0.0; NUM_REWARDS];
    let (mut abs_adv, mut kl, mut len, mut trunc) = (0.0, 0.0, 0.0, 0.0);
    for m in &members {
        for k in 0..NUM_REWARDS {
            reward_means[k] += m.rewards.components()[k] / n;
            weight_means[k] += m.weights[k] / n;
        }
        abs_adv += m.advantage.abs() / n;
        kl += m.kl / n;
        len += m.traj.response.len() as f64 / n;
        if m.traj.truncated {
            trunc += 1.0 / n;
        }
    }
    StepLog {
        step,
        reward_means,
        mean_abs_advantage: abs_adv,
        kl_mean: kl,
        weight_means,
        mean_length: len,
        truncated_fraction: trunc,
        synced_reference: synced,
    }
}
