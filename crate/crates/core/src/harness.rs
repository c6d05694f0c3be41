//! Experiment orchestration: run configuration, warm start, the bi-level
//! training loop, evaluation, reports and comparison tables.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conductor::{inference_weights, ConductorParams, EmphasisMode, NUM_ACTIONS};
use crate::envsuite::{
    demonstration, generate_dataset, oracle_utility, pref_scorer, Family, OracleJudge,
    PromptInstance, SuiteConfig,
};
use crate::error::{Error, Result};
use crate::grpo::{
    dirichlet_weights, grpo_step, GrpoConfig, PolicyState, RewardSetup, StepLog, WeightSource,
};
use crate::meta::{MetaBuffer, MetaConfig, MetaLearner, MetaUpdateLog};
use crate::numerics::{Purpose, RandomStream, SimplexVector};
use crate::optim::{apply_update, AdamState, AdamWConfig};
use crate::rewards::{EntropySign, Normalization, RewardComponent, NUM_REWARDS};
use crate::toy_lm::{
    extract_context, sample_response, supervised_gradient, ContextPosition, PolicyParams, Token,
};

/// Training method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Maestro,
    Equal,
    Random,
    PplOnly,
    NegEntropy,
    JudgeFreeJoint,
    LayerFirst,
    LayerMiddle,
    NoEntropyReg,
    /// Constant user-given weights from `rewards.fixed_weights`.
    Fixed,
}

impl Arm {
    pub const ALL: [Arm; 10] = [
        Arm::Maestro,
        Arm::Equal,
        Arm::Random,
        Arm::PplOnly,
        Arm::NegEntropy,
        Arm::JudgeFreeJoint,
        Arm::LayerFirst,
        Arm::LayerMiddle,
        Arm::NoEntropyReg,
        Arm::Fixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Maestro => "maestro",
            Arm::Equal => "equal",
            Arm::Random => "random",
            Arm::PplOnly => "ppl-only",
            Arm::NegEntropy => "neg-entropy",
            Arm::JudgeFreeJoint => "judge-free-joint",
            Arm::LayerFirst => "layer-first",
            Arm::LayerMiddle => "layer-middle",
            Arm::NoEntropyReg => "no-entropy-reg",
            Arm::Fixed => "fixed",
        }
    }

    /// Whether the arm trains a Conductor.
    pub fn uses_conductor(self) -> bool {
        !matches!(
            self,
            Arm::Equal | Arm::Random | Arm::PplOnly | Arm::NegEntropy | Arm::Fixed
        )
    }

    pub fn entropy_sign(self) -> EntropySign {
        if self == Arm::NegEntropy {
            EntropySign::Penalty
        } else {
            EntropySign::Reward
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-response weights of a baseline arm; `None` for Conductor arms.
pub fn baseline_weights(arm: Arm, rng: &mut RandomStream) -> Option<SimplexVector> {
    match arm {
        Arm::Equal => Some(SimplexVector::uniform(NUM_REWARDS)),
        Arm::Random => Some(dirichlet_weights(rng)),
        Arm::PplOnly => Some(SimplexVector::one_hot(
            NUM_REWARDS,
            RewardComponent::Ppl.index(),
        )),
        Arm::NegEntropy => Some(SimplexVector::one_hot(
            NUM_REWARDS,
            RewardComponent::Ent.index(),
        )),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub family_mix: Vec<f64>,
    pub vocab: usize,
    pub key_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 600,
            n_test: 150,
            family_mix: vec![1.0 / 3.0; 3],
            vocab: crate::envsuite::DEFAULT_VOCAB,
            key_len: 3,
        }
    }
}

impl DataConfig {
    pub fn suite(&self) -> SuiteConfig {
        SuiteConfig {
            vocab: self.vocab,
            key_len: self.key_len,
        }
    }

    pub fn mix(&self) -> Result<SimplexVector> {
        SimplexVector::new(self.family_mix.clone())
            .map_err(|e| Error::Config(format!("data.family_mix: {e}")))
    }
}

/// Policy architecture and supervised warm start on demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub recur_gain: f64,
    pub warm_start_steps: usize,
    pub warm_start_batch: usize,
    pub warm_start_lr: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            recur_gain: 0.9,
            warm_start_steps: 500,
            warm_start_batch: 32,
            warm_start_lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConductorConfig {
    pub position: ContextPosition,
    pub emphasis: EmphasisMode,
    pub eps_floor: f64,
}

impl Default for ConductorConfig {
    fn default() -> Self {
        ConductorConfig {
            position: ContextPosition::Last,
            emphasis: EmphasisMode::OneHot,
            eps_floor: crate::conductor::DEFAULT_EPS_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardsConfig {
    pub normalization: Normalization,
    /// Weights of the `fixed` arm, in (fmt, ppl, ent, len, pref) order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_weights: Option<[f64; NUM_REWARDS]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Sampled responses per test prompt.
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { samples: 4 }
    }
}

/// Reference defaults for the step-size-free settings; learning rates are
/// scaled up for the toy policy.
pub const TOY_POLICY_LR: f64 = 1e-3;
pub const TOY_CONDUCTOR_LR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub arm: Arm,
    pub epochs: usize,
    pub output_dir: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub grpo: GrpoConfig,
    pub meta: MetaConfig,
    pub conductor: ConductorConfig,
    pub rewards: RewardsConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            arm: Arm::Maestro,
            epochs: 2,
            output_dir: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            grpo: GrpoConfig {
                lr: TOY_POLICY_LR,
                ..GrpoConfig::default()
            },
            meta: MetaConfig {
                lr: TOY_CONDUCTOR_LR,
                ..MetaConfig::default()
            },
            conductor: ConductorConfig::default(),
            rewards: RewardsConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parses a TOML config. Omitted keys take the defaults of
    /// [`RunConfig::default`]; unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut merged, user);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        self.data.suite().validate()?;
        self.data.mix()?;
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Config("data sizes must be >= 1".into()));
        }
        if self.model.width == 0 {
            return Err(Error::Config("model.width must be >= 1".into()));
        }
        if self.model.warm_start_steps > 0 && self.model.warm_start_batch == 0 {
            return Err(Error::Config("model.warm_start_batch must be >= 1".into()));
        }
        self.grpo.validate()?;
        self.meta.validate()?;
        self.conductor
            .emphasis
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let eps = self.conductor.eps_floor;
        if !(eps > 0.0 && eps < 1.0 / NUM_ACTIONS as f64) {
            return Err(Error::Config(
                "conductor.eps_floor must be in (0, 1/K)".into(),
            ));
        }
        if self.eval.samples == 0 {
            return Err(Error::Config("eval.samples must be >= 1".into()));
        }
        match (self.arm, self.rewards.fixed_weights) {
            (Arm::Fixed, Some(w)) => {
                SimplexVector::new(w.to_vec())
                    .map_err(|e| Error::Config(format!("rewards.fixed_weights: {e}")))?;
            }
            (Arm::Fixed, None) => {
                return Err(Error::Config(
                    "arm \"fixed\" requires rewards.fixed_weights".into(),
                ))
            }
            (_, Some(_)) => {
                return Err(Error::Config(
                    "rewards.fixed_weights is only used by arm \"fixed\"".into(),
                ))
            }
            (_, None) => {}
        }
        Ok(())
    }

    /// Meta and Conductor settings after applying the arm's overrides.
    pub fn effective_meta(&self) -> MetaConfig {
        let mut m = self.meta;
        match self.arm {
            Arm::JudgeFreeJoint => m.joint = true,
            Arm::NoEntropyReg => m.entropy_coef = 0.0,
            _ => {}
        }
        m
    }

    pub fn effective_position(&self) -> ContextPosition {
        match self.arm {
            Arm::LayerFirst => ContextPosition::First,
            Arm::LayerMiddle => ContextPosition::Middle,
            _ => self.conductor.position,
        }
    }

    pub fn with_arm(&self, arm: Arm) -> Self {
        RunConfig {
            arm,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RunConfig {
            seed,
            ..self.clone()
        }
    }
}

/// SHA-256 of a value's JSON serialization, hex encoded.
pub fn json_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Supervised pretraining on demonstrations, so that sampled responses are
/// mostly well-formed before reinforcement learning starts.
pub fn warm_start(cfg: &RunConfig, train: &[PromptInstance]) -> Result<PolicyParams> {
    let suite = cfg.data.suite();
    let mut init_rng = RandomStream::for_purpose(cfg.seed, Purpose::PolicyInit);
    let mut params = PolicyParams::random(
        suite.vocab,
        cfg.model.width,
        cfg.model.recur_gain,
        &mut init_rng,
    );
    let mut opt = AdamState::for_params(&params);
    let root = RandomStream::for_purpose(cfg.seed, Purpose::WarmStart);
    for step in 0..cfg.model.warm_start_steps {
        let mut rng = root.split(step as u64);
        let pairs: Vec<(Vec<Token>, Vec<Token>)> = (0..cfg.model.warm_start_batch)
            .map(|_| {
                let inst = &train[rng.below(train.len())];
                (
                    inst.prompt_tokens.clone(),
                    demonstration(&suite, inst, &mut rng),
                )
            })
            .collect();
        let (_, grad) = supervised_gradient(&params, &pairs)?;
        apply_update(
            &mut params,
            &grad,
            &mut opt,
            cfg.model.warm_start_lr,
            &AdamWConfig::default(),
        )?;
    }
    if !crate::optim::ParamBlocks::all_finite(&params) {
        return Err(Error::NonFinite {
            step: 0,
            what: "warm-start parameters".into(),
        });
    }
    Ok(params)
}

/// One weight-dynamics row: mean inference weights of a family's contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub step: usize,
    pub family: Family,
    pub weights: [f64; NUM_REWARDS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyEval {
    pub family: Family,
    pub prompts: usize,
    pub utility: f64,
    /// Mean inference weights on this family's response contexts.
    pub weights: [f64; NUM_REWARDS],
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub overall_utility: f64,
    pub families: Vec<FamilyEval>,
    /// Mean oracle utility of each test prompt, in dataset order.
    pub per_prompt: Vec<f64>,
    pub prompt_families: Vec<Family>,
    pub mean_length: f64,
}

impl EvalSummary {
    pub fn family(&self, f: Family) -> Option<&FamilyEval> {
        self.families.iter().find(|e| e.family == f)
    }
}

/// Samples `samples` responses per prompt and scores them with the oracle.
/// Conductor weights (uniform when absent) are averaged over the same contexts.
pub fn evaluate(
    policy: &PolicyParams,
    conductor: Option<&ConductorParams>,
    position: ContextPosition,
    prompts: &[PromptInstance],
    grpo: &GrpoConfig,
    samples: usize,
    rng: &RandomStream,
) -> Result<EvalSummary> {
    use rayon::prelude::*;
    if prompts.is_empty() {
        return Err(Error::invalid("evaluation needs at least one prompt"));
    }
    type PromptResult = (f64, [f64; NUM_REWARDS], f64);
    let results: Vec<Result<PromptResult>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let decoding = grpo.decoding(inst.format_spec.end);
            let mut util = 0.0;
            let mut w = [0.0; NUM_REWARDS];
            let mut len = 0.0;
            for s in 0..samples {
                let mut r = rng.split(i as u64).derive(Purpose::Evaluation, s as u64);
                let traj = sample_response(policy, &inst.prompt_tokens, &decoding, &mut r)?;
                util += oracle_utility(&OracleJudge, inst, &traj.response);
                len += traj.response.len() as f64;
                let weights = match conductor {
                    Some(c) => inference_weights(c, &extract_context(&traj.trace, position))?,
                    None => SimplexVector::uniform(NUM_REWARDS),
                };
                for k in 0..NUM_REWARDS {
                    w[k] += weights[k];
                }
            }
            let n = samples as f64;
            w.iter_mut().for_each(|x| *x /= n);
            Ok((util / n, w, len / n))
        })
        .collect();
    let mut per_prompt = Vec::with_capacity(prompts.len());
    let mut acc: BTreeMap<Family, (usize, f64, [f64; NUM_REWARDS], f64)> = BTreeMap::new();
    let mut total_len = 0.0;
    for (inst, r) in prompts.iter().zip(results) {
        let (u, w, len) = r?;
        per_prompt.push(u);
        total_len += len;
        let e = acc
            .entry(inst.family)
            .or_insert((0, 0.0, [0.0; NUM_REWARDS], 0.0));
        e.0 += 1;
        e.1 += u;
        for (acc_k, w_k) in e.2.iter_mut().zip(w.iter()) {
            *acc_k += w_k;
        }
        e.3 += len;
    }
    let families = acc
        .into_iter()
        .map(|(family, (n, u, w, len))| {
            let nf = n as f64;
            FamilyEval {
                family,
                prompts: n,
                utility: u / nf,
                weights: w.map(|x| x / nf),
                mean_length: len / nf,
            }
        })
        .collect();
    let n = prompts.len() as f64;
    Ok(EvalSummary {
        overall_utility: per_prompt.iter().sum::<f64>() / n,
        families,
        per_prompt,
        prompt_families: prompts.iter().map(|p| p.family).collect(),
        mean_length: total_len / n,
    })
}

/// Deterministic record of a run. Wall-clock lives in [`RunTiming`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub arm: Arm,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub initial_policy_hash: String,
    pub final_policy_hash: String,
    pub steps: Vec<StepLog>,
    pub meta_updates: Vec<MetaUpdateLog>,
    pub dynamics: Vec<DynamicsRow>,
    /// Evaluation of the warm-started policy before any reinforcement learning.
    pub initial_eval: EvalSummary,
    pub final_eval: EvalSummary,
    pub mean_train_length: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn hash(&self) -> Result<String> {
        json_hash(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub total_seconds: f64,
    pub training_seconds: f64,
    pub conductor_forward_seconds: f64,
    pub meta_update_seconds: f64,
    pub steps: usize,
}

impl RunTiming {
    /// Share of training wall-clock spent on Conductor forward passes and
    /// meta-updates.
    pub fn conductor_fraction(&self) -> f64 {
        if self.training_seconds == 0.0 {
            0.0
        } else {
            (self.conductor_forward_seconds + self.meta_update_seconds) / self.training_seconds
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub policy: PolicyParams,
    pub conductor: Option<ConductorParams>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub timing: RunTiming,
    pub checkpoint: Checkpoint,
}

fn dynamics_rows(
    step: usize,
    conductor: &ConductorParams,
    groups: &[crate::grpo::RolloutGroup],
) -> Result<Vec<DynamicsRow>> {
    let mut acc: BTreeMap<Family, (usize, [f64; NUM_REWARDS])> = BTreeMap::new();
    for g in groups {
        for m in &g.members {
            let w = inference_weights(conductor, &m.context)?;
            let e = acc
                .entry(g.prompt.family)
                .or_insert((0, [0.0; NUM_REWARDS]));
            e.0 += 1;
            for k in 0..NUM_REWARDS {
                e.1[k] += w[k];
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|(family, (n, w))| DynamicsRow {
            step,
            family,
            weights: w.map(|x| x / n as f64),
        })
        .collect())
}

/// Dataset generation, warm start, the training loop and test evaluation.
/// Every random draw derives from `config.seed`.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutcome> {
    run_experiment_with(config, |_| {})
}

/// Progress events emitted while a run executes.
pub enum Progress<'a> {
    Step(&'a StepLog),
    Meta(&'a MetaUpdateLog),
}

pub fn run_experiment_with(
    config: &RunConfig,
    mut on_progress: impl FnMut(Progress<'_>),
) -> Result<RunOutcome> {
    config.validate()?;
    let start = Instant::now();
    let suite = config.data.suite();
    let (train, test) = generate_dataset(
        &suite,
        config.seed,
        config.data.n_train,
        config.data.n_test,
        &config.data.mix()?,
    )?;
    let dataset_hash = json_hash(&(&train, &test))?;
    let initial = warm_start(config, &train)?;
    let initial_policy_hash = json_hash(&initial)?;

    let setup = RewardSetup {
        scorer: pref_scorer(&suite, config.seed),
        entropy_sign: config.arm.entropy_sign(),
        normalization: config.rewards.normalization,
    };
    let meta_cfg = config.effective_meta();
    let position = config.effective_position();
    let mut conductor = ConductorParams::new(config.model.width);
    conductor.eps_floor = config.conductor.eps_floor;
    let mut learner = config
        .arm
        .uses_conductor()
        .then(|| MetaLearner::new(conductor, meta_cfg));

    let eval_rng = RandomStream::for_purpose(config.seed, Purpose::Evaluation);
    let initial_eval = evaluate(
        &initial,
        learner.as_ref().map(|l| &l.conductor),
        position,
        &test,
        &config.grpo,
        config.eval.samples,
        &eval_rng,
    )?;

    let mut state = PolicyState::new(initial);
    let mut buffer = MetaBuffer::new();
    let mut steps = Vec::new();
    let mut meta_updates = Vec::new();
    let mut dynamics = Vec::new();
    let mut timing = RunTiming::default();
    let mut total_len = 0.0;
    let mut total_members = 0usize;
    let train_start = Instant::now();
    let mut conductor_time = Duration::ZERO;
    let mut meta_time = Duration::ZERO;

    let rollout_root = RandomStream::for_purpose(config.seed, Purpose::Rollout);
    let weight_root = RandomStream::for_purpose(config.seed, Purpose::BaselineWeights);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        RandomStream::for_purpose(config.seed, Purpose::Shuffle)
            .split(epoch as u64)
            .shuffle(&mut order);
        for chunk in order.chunks(config.grpo.batch_size) {
            step += 1;
            let batch: Vec<PromptInstance> = chunk.iter().map(|&i| train[i].clone()).collect();
            let rng = rollout_root.split(step as u64);
            let fixed = match config.arm {
                Arm::Equal | Arm::PplOnly | Arm::NegEntropy => {
                    baseline_weights(config.arm, &mut weight_root.split(step as u64))
                }
                Arm::Fixed => config
                    .rewards
                    .fixed_weights
                    .map(|w| SimplexVector::new(w.to_vec()))
                    .transpose()?,
                _ => None,
            };
            let source = match (&learner, &fixed) {
                (Some(l), _) => WeightSource::Conductor {
                    params: &l.conductor,
                    position,
                    emphasis: config.conductor.emphasis,
                },
                (None, Some(w)) => WeightSource::Fixed(w),
                (None, None) => WeightSource::Dirichlet,
            };
            let out = grpo_step(&mut state, &batch, source, &setup, &config.grpo, &rng, step)?;
            conductor_time += out.conductor_time;
            for g in &out.groups {
                for m in &g.members {
                    total_len += m.traj.response.len() as f64;
                    total_members += 1;
                }
            }
            on_progress(Progress::Step(&out.log));
            steps.push(out.log);

            if let Some(l) = learner.as_mut() {
                let t0 = Instant::now();
                buffer.push(out.transitions);
                if meta_cfg.is_update_step(step) {
                    if let Some(log) = l.update(&mut buffer, step)? {
                        meta_time += t0.elapsed();
                        on_progress(Progress::Meta(&log));
                        meta_updates.push(log);
                        dynamics.extend(dynamics_rows(step, &l.conductor, &out.groups)?);
                    }
                } else {
                    meta_time += t0.elapsed();
                }
            }
        }
    }
    timing.training_seconds = train_start.elapsed().as_secs_f64();
    timing.conductor_forward_seconds = conductor_time.as_secs_f64();
    timing.meta_update_seconds = meta_time.as_secs_f64();
    timing.steps = step;

    let final_conductor = learner.map(|l| l.conductor);
    let final_eval = evaluate(
        &state.params,
        final_conductor.as_ref(),
        position,
        &test,
        &config.grpo,
        config.eval.samples,
        &eval_rng,
    )?;
    let report = RunReport {
        arm: config.arm,
        seed: config.seed,
        config_hash: json_hash(config)?,
        dataset_hash,
        initial_policy_hash,
        final_policy_hash: json_hash(&state.params)?,
        steps,
        meta_updates,
        dynamics,
        initial_eval,
        final_eval,
        mean_train_length: if total_members == 0 {
            0.0
        } else {
            total_len / total_members as f64
        },
    };
    timing.total_seconds = start.elapsed().as_secs_f64();
    Ok(RunOutcome {
        report,
        timing,
        checkpoint: Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            policy: state.params,
            conductor: final_conductor,
        },
    })
}

/// Evaluates a checkpoint on an arbitrary prompt set.
pub fn eval_checkpoint(checkpoint: &Checkpoint, prompts: &[PromptInstance]) -> Result<EvalSummary> {
    let cfg = &checkpoint.config;
    evaluate(
        &checkpoint.policy,
        checkpoint.conductor.as_ref(),
        cfg.effective_position(),
        prompts,
        &cfg.grpo,
        cfg.eval.samples,
        &RandomStream::for_purpose(cfg.seed, Purpose::Evaluation),
    )
}

/// `step,family,w_fmt,w_ppl,w_ent,w_len,w_pref` CSV of a Conductor run.
pub fn export_weight_dynamics(report: &RunReport) -> Result<String> {
    if !report.arm.uses_conductor() {
        return Err(Error::Unsupported(format!(
            "weight dynamics need a Conductor arm, report is from '{}'",
            report.arm
        )));
    }
    let mut out = String::from("step,family,w_fmt,w_ppl,w_ent,w_len,w_pref\n");
    for row in &report.dynamics {
        out.push_str(&format!("{},{}", row.step, row.family));
        for w in row.weights {
            out.push_str(&format!(",{w}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Theil-Sen slope: the median of pairwise slopes.
pub fn theil_sen_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let mut slopes = Vec::new();
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            if xs[j] != xs[i] {
                slopes.push((ys[j] - ys[i]) / (xs[j] - xs[i]));
            }
        }
    }
    if slopes.is_empty() {
        return None;
    }
    slopes.sort_by(f64::total_cmp);
    let n = slopes.len();
    Some(if n % 2 == 1 {
        slopes[n / 2]
    } else {
        0.5 * (slopes[n / 2 - 1] + slopes[n / 2])
    })
}

/// One comparison row; `family = None` is the overall row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub arm: Arm,
    pub family: Option<Family>,
    pub seeds: usize,
    pub mean_utility: f64,
    /// Sample standard deviation of per-seed utilities.
    pub spread: f64,
    /// Probability that the reference arm beats this arm on a paired
    /// (seed, test prompt) draw, ties counted as one half.
    pub win_rate_of_reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub reference_arm: Arm,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, arm: Arm, family: Option<Family>) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.arm == arm && r.family == family)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "arm,family,seeds,mean_utility,spread,win_rate_of_{}\n",
            self.reference_arm
        );
        for r in &self.rows {
            let fam = r.family.map_or("OVERALL", |f| f.name());
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.arm, fam, r.seeds, r.mean_utility, r.spread, r.win_rate_of_reference
            ));
        }
        out
    }
}

pub fn mean_and_spread(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn win_rate(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.5;
    }
    let wins: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        })
        .sum();
    wins / n as f64
}

/// Mean and spread of test utility per arm and family, plus the win-rate of
/// the reference arm (maestro when present, else the first arm).
pub fn compare_arms(reports: &[RunReport]) -> Result<ComparisonTable> {
    let mut arms: Vec<Arm> = Vec::new();
    for r in reports {
        if !arms.contains(&r.arm) {
            arms.push(r.arm);
        }
    }
    if arms.len() < 2 {
        return Err(Error::invalid("comparison needs at least 2 arms"));
    }
    let by_arm = |arm: Arm| -> BTreeMap<u64, &RunReport> {
        reports
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| (r.seed, r))
            .collect()
    };
    let seeds: Vec<u64> = by_arm(arms[0]).keys().copied().collect();
    for &arm in &arms {
        let s: Vec<u64> = by_arm(arm).keys().copied().collect();
        if s.len() < 3 {
            return Err(Error::invalid(format!(
                "arm '{arm}' has {} seeds, need >= 3",
                s.len()
            )));
        }
        if s != seeds {
            return Err(Error::invalid("arms must share one seed set"));
        }
    }
    for &seed in &seeds {
        let same: Vec<&RunReport> = reports.iter().filter(|r| r.seed == seed).collect();
        if same.iter().any(|r| {
            r.dataset_hash != same[0].dataset_hash
                || r.initial_policy_hash != same[0].initial_policy_hash
        }) {
            return Err(Error::invalid(format!(
                "runs with seed {seed} disagree on dataset or initial policy"
            )));
        }
    }
    let reference = if arms.contains(&Arm::Maestro) {
        Arm::Maestro
    } else {
        arms[0]
    };
    let reference_runs = by_arm(reference);

    let mut rows = Vec::new();
    for &arm in &arms {
        let runs = by_arm(arm);
        let mut families: Vec<Option<Family>> = Family::ALL.iter().map(|f| Some(*f)).collect();
        families.push(None);
        for family in families {
            let mut per_seed = Vec::new();
            let (mut mine, mut theirs) = (Vec::new(), Vec::new());
            for (&seed, run) in &runs {
                let eval = &run.final_eval;
                let u = match family {
                    Some(f) => match eval.family(f) {
                        Some(fe) => fe.utility,
                        None => continue,
                    },
                    None => eval.overall_utility,
                };
                per_seed.push(u);
                let reference_eval = &reference_runs[&seed].final_eval;
                let test_families = test_family_mask(eval, family);
                for (i, keep) in test_families.iter().enumerate() {
                    if *keep {
                        theirs.push(eval.per_prompt[i]);
                        mine.push(reference_eval.per_prompt[i]);
                    }
                }
            }
            if per_seed.is_empty() {
                continue;
            }
            let (mean, spread) = mean_and_spread(&per_seed);
            rows.push(ComparisonRow {
                arm,
                family,
                seeds: per_seed.len(),
                mean_utility: mean,
                spread,
                win_rate_of_reference: win_rate(&mine, &theirs),
            });
        }
    }
    Ok(ComparisonTable {
        reference_arm: reference,
        rows,
    })
}

fn test_family_mask(eval: &EvalSummary, family: Option<Family>) -> Vec<bool> {
    match family {
        None => vec![true; eval.per_prompt.len()],
        Some(f) => eval.prompt_families.iter().map(|pf| *pf == f).collect(),
    }
}

/// Wall-clock and response-length comparison of paired runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub arm: Arm,
    pub total_seconds: f64,
    pub training_seconds: f64,
    pub conductor_fraction: f64,
    /// `(training_seconds - first) / first`, relative to the first config.
    pub relative_delta: f64,
    pub mean_train_length: f64,
}

pub fn timing_report(outcomes: &[(RunReport, RunTiming)]) -> Result<Vec<TimingRow>> {
    let Some((_, first)) = outcomes.first() else {
        return Err(Error::invalid("timing report needs at least one run"));
    };
    let base = first.training_seconds;
    Ok(outcomes
        .iter()
        .map(|(report, timing)| TimingRow {
            arm: report.arm,
            total_seconds: timing.total_seconds,
            training_seconds: timing.training_seconds,
            conductor_fraction: timing.conductor_fraction(),
            relative_delta: if base > 0.0 {
                (timing.training_seconds - base) / base
            } else {
                0.0
            },
            mean_train_length: report.mean_train_length,
        })
        .collect())
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from(
        "arm,total_seconds,training_seconds,conductor_fraction,relative_delta,mean_train_length\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.arm,
            r.total_seconds,
            r.training_seconds,
            r.conductor_fraction,
            r.relative_delta,
            r.mean_train_length
        ));
    }
    out
}

/// Rank correlations between raw reward signals and oracle utility for one
/// family, measured on responses sampled from a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyCorrelations {
    pub family: Family,
    pub samples: usize,
    /// Spearman correlation of each component (fmt, ppl, ent, len, pref).
    pub components: [f64; NUM_REWARDS],
    /// Spearman correlation of the `fmt * len` composite.
    pub fmt_len_composite: f64,
}

impl FamilyCorrelations {
    /// The signal designed to track this family's oracle utility.
    pub fn designated(&self) -> (&'static str, f64) {
        match self.family {
            Family::Reason => ("ppl", self.components[RewardComponent::Ppl.index()]),
            Family::Create => ("ent", self.components[RewardComponent::Ent.index()]),
            Family::Format => ("fmt*len", self.fmt_len_composite),
        }
    }

    /// Largest correlation among the competing signals.
    pub fn best_competitor(&self) -> (&'static str, f64) {
        let mut named: Vec<(&'static str, f64)> = RewardComponent::ALL
            .iter()
            .map(|c| (c.name(), self.components[c.index()]))
            .collect();
        named.push(("fmt*len", self.fmt_len_composite));
        let designated = self.designated().0;
        named
            .into_iter()
            .filter(|(n, _)| *n != designated)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or(("none", f64::NEG_INFINITY))
    }

    pub fn designated_is_top(&self) -> bool {
        self.designated().1 > self.best_competitor().1
    }
}

/// Samples `per_family` temperature-1 responses per family from `policy` on
/// the given prompts and correlates each raw reward signal with the oracle.
pub fn family_informativeness(
    policy: &PolicyParams,
    prompts: &[PromptInstance],
    scorer: &crate::rewards::PrefScorer,
    max_len: usize,
    per_family: usize,
    rng: &RandomStream,
) -> Result<Vec<FamilyCorrelations>> {
    use crate::envsuite::spearman;
    use crate::rewards::{measure, LengthBounds};
    use crate::toy_lm::Decoding;
    use rayon::prelude::*;

    let mut out = Vec::new();
    for family in Family::ALL {
        let pool: Vec<&PromptInstance> = prompts.iter().filter(|p| p.family == family).collect();
        if pool.is_empty() {
            continue;
        }
        let rows: Vec<Result<([f64; NUM_REWARDS], f64, f64)>> = (0..per_family)
            .into_par_iter()
            .map(|i| {
                let inst = pool[i % pool.len()];
                let mut r = rng.derive(Purpose::Probe, (family.index() * per_family + i) as u64);
                let decoding = Decoding {
                    max_len,
                    temperature: 1.0,
                    stop_token: Some(inst.format_spec.end),
                };
                let traj = sample_response(policy, &inst.prompt_tokens, &decoding, &mut r)?;
                let bounds = LengthBounds {
                    min: inst.l_min,
                    max: inst.l_max,
                };
                let m = measure(
                    policy,
                    &traj,
                    &inst.reference,
                    &inst.format_spec,
                    bounds,
                    scorer,
                )?;
                let signals = [m.format, -m.nll, m.entropy, m.length_reward, m.pref];
                let composite = m.format * m.length_reward;
                Ok((
                    signals,
                    composite,
                    oracle_utility(&OracleJudge, inst, &traj.response),
                ))
            })
            .collect();
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        let oracle: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let mut components = [0.0; NUM_REWARDS];
        for (k, c) in components.iter_mut().enumerate() {
            let xs: Vec<f64> = rows.iter().map(|r| r.0[k]).collect();
            *c = spearman(&xs, &oracle)?;
        }
        let comp: Vec<f64> = rows.iter().map(|r| r.1).collect();
        out.push(FamilyCorrelations {
            family,
            samples: per_family,
            components,
            fmt_len_composite: spearman(&comp, &oracle)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arm: Arm, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default().with_arm(arm).with_seed(seed);
        cfg.data.n_train = 30;
        cfg.data.n_test = 9;
        cfg.model.width = 8;
        cfg.model.warm_start_steps = 20;
        cfg.model.warm_start_batch = 8;
        cfg.grpo.batch_size = 5;
        cfg.grpo.max_len = 12;
        cfg.eval.samples = 1;
        cfg
    }

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let cfg =
            RunConfig::from_toml_str("seed = 7\narm = \"ppl-only\"\n[grpo]\nbeta = 0.2\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.arm, Arm::PplOnly);
        assert_eq!(cfg.grpo.beta, 0.2);
        assert_eq!(cfg.grpo.lr, TOY_POLICY_LR);
        assert_eq!(cfg.grpo.group_size, 5);
        let cfg = RunConfig::from_toml_str(
            "[conductor]\nposition = \"middle\"\nemphasis = { mode = \"softened\", delta = 0.5 }\n",
        )
        .unwrap();
        assert_eq!(cfg.conductor.position, ContextPosition::Middle);
        assert_eq!(
            cfg.conductor.emphasis,
            EmphasisMode::Softened { delta: 0.5 }
        );
    }

    #[test]
    fn config_rejects_unknown_and_invalid() {
        assert!(matches!(
            RunConfig::from_toml_str("sead = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[grpo]\nbetta = 0.1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("arm = \"best\""),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[grpo]\ngroup_size = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[data]\nfamily_mix = [0.5, 0.5, 0.5]"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("epochs = 0"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("arm = \"fixed\""),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[rewards]\nfixed_weights = [0.0, 1.0, 0.0, 0.0, 0.0]"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str(
                "arm = \"fixed\"\n[rewards]\nfixed_weights = [0.5, 1.0, 0.0, 0.0, 0.0]"
            ),
            Err(Error::Config(_))
        ));
        let cfg = RunConfig::from_toml_str(
            "arm = \"fixed\"\n[rewards]\nfixed_weights = [0.0, 0.0, 1.0, 0.0, 0.0]",
        )
        .unwrap();
        assert_eq!(cfg.rewards.fixed_weights, Some([0.0, 0.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = RunConfig {
            output_dir: Some("out".into()),
            ..RunConfig::default()
        };
        cfg.conductor.emphasis = EmphasisMode::Softened { delta: 0.3 };
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn arm_overrides() {
        let base = RunConfig::default();
        assert!(base.with_arm(Arm::JudgeFreeJoint).effective_meta().joint);
        assert_eq!(
            base.with_arm(Arm::NoEntropyReg)
                .effective_meta()
                .entropy_coef,
            0.0
        );
        assert_eq!(
            base.with_arm(Arm::LayerFirst).effective_position(),
            ContextPosition::First
        );
        assert_eq!(
            base.with_arm(Arm::LayerMiddle).effective_position(),
            ContextPosition::Middle
        );
        assert_eq!(base.effective_meta(), base.meta);
        assert_eq!(Arm::NegEntropy.entropy_sign(), EntropySign::Penalty);
    }

    #[test]
    fn baseline_weight_examples() {
        let mut rng = RandomStream::new(1, 1);
        assert_eq!(
            baseline_weights(Arm::Equal, &mut rng).unwrap(),
            SimplexVector::uniform(5)
        );
        assert_eq!(
            baseline_weights(Arm::PplOnly, &mut rng).unwrap().as_slice(),
            &[0.0, 1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            baseline_weights(Arm::NegEntropy, &mut rng)
                .unwrap()
                .as_slice(),
            &[0.0, 0.0, 1.0, 0.0, 0.0]
        );
        assert!(baseline_weights(Arm::Maestro, &mut rng).is_none());
        let n = 10_000;
        let mut mean = [0.0; 5];
        for _ in 0..n {
            let w = baseline_weights(Arm::Random, &mut rng).unwrap();
            (0..5).for_each(|k| mean[k] += w[k] / n as f64);
        }
        assert!(mean.iter().all(|m| (m - 0.2).abs() < 0.02));
    }

    #[test]
    fn theil_sen_examples() {
        assert_eq!(
            theil_sen_slope(&[0.0, 1.0, 2.0, 3.0], &[1.0, 3.0, 5.0, 7.0]),
            Some(2.0)
        );
        // one outlier does not move the median slope
        assert_eq!(
            theil_sen_slope(&[0.0, 1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 2.0, 30.0, 4.0]),
            Some(1.0)
        );
        assert_eq!(theil_sen_slope(&[1.0], &[1.0]), None);
    }

    #[test]
    fn tiny_run_is_deterministic_and_complete() {
        let cfg = tiny(Arm::Maestro, 3);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
        let steps = cfg.epochs * cfg.data.n_train.div_ceil(cfg.grpo.batch_size);
        assert_eq!(a.report.steps.len(), steps);
        assert!(a
            .report
            .steps
            .iter()
            .enumerate()
            .all(|(i, s)| s.step == i + 1));
        assert_eq!(
            a.report.meta_updates.len(),
            steps / cfg.meta.update_interval
        );
        assert_eq!(a.timing.steps, steps);
        let csv = export_weight_dynamics(&a.report).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("step,family,w_fmt,w_ppl,w_ent,w_len,w_pref")
        );
        for line in lines {
            let sum: f64 = line
                .split(',')
                .skip(2)
                .map(|x| x.parse::<f64>().unwrap())
                .sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_arm_has_constant_weights_and_no_dynamics() {
        let out = run_experiment(&tiny(Arm::Equal, 1)).unwrap();
        assert!(out.report.meta_updates.is_empty());
        assert!(out
            .report
            .steps
            .iter()
            .all(|s| s.weight_means.iter().all(|w| (w - 0.2).abs() < 1e-12)));
        assert!(matches!(
            export_weight_dynamics(&out.report),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn arms_share_dataset_and_initial_policy() {
        let a = run_experiment(&tiny(Arm::Maestro, 2)).unwrap().report;
        let b = run_experiment(&tiny(Arm::Random, 2)).unwrap().report;
        assert_eq!(a.dataset_hash, b.dataset_hash);
        assert_eq!(a.initial_policy_hash, b.initial_policy_hash);
        assert_ne!(a.final_policy_hash, b.final_policy_hash);
    }

    #[test]
    fn compare_counts_rows_and_self_win_rate() {
        let mut reports = Vec::new();
        for seed in 0..3 {
            reports.push(run_experiment(&tiny(Arm::Maestro, seed)).unwrap().report);
            reports.push(run_experiment(&tiny(Arm::Equal, seed)).unwrap().report);
        }
        let table = compare_arms(&reports).unwrap();
        assert_eq!(table.reference_arm, Arm::Maestro);
        let families: std::collections::BTreeSet<_> = reports[0]
            .final_eval
            .prompt_families
            .iter()
            .copied()
            .collect();
        assert_eq!(table.rows.len(), 2 * families.len() + 2);
        for row in table.rows.iter().filter(|r| r.arm == Arm::Maestro) {
            assert_eq!(row.win_rate_of_reference, 0.5);
        }
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), table.rows.len() + 1);
        assert!(compare_arms(&reports[..2]).is_err());
        let one_arm: Vec<RunReport> = reports
            .iter()
            .filter(|r| r.arm == Arm::Equal)
            .cloned()
            .collect();
        assert!(compare_arms(&one_arm).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let out = run_experiment(&tiny(Arm::Maestro, 4)).unwrap();
        let dir = std::env::temp_dir().join(format!("maestro-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("checkpoint.json");
        out.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, out.checkpoint);
        let (_, test) = generate_dataset(
            &back.config.data.suite(),
            back.config.seed,
            back.config.data.n_train,
            back.config.data.n_test,
            &back.config.data.mix().unwrap(),
        )
        .unwrap();
        let eval = eval_checkpoint(&back, &test).unwrap();
        assert_eq!(eval, out.report.final_eval);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn timing_rows_are_relative_to_first() {
        let a = run_experiment(&tiny(Arm::Maestro, 5)).unwrap();
        let b = run_experiment(&tiny(Arm::Equal, 5)).unwrap();
        let rows = timing_report(&[
            (a.report.clone(), a.timing.clone()),
            (b.report.clone(), b.timing.clone()),
        ])
        .unwrap();
        assert_eq!(rows[0].relative_delta, 0.0);
        assert_eq!(rows[1].mean_train_length, b.report.mean_train_length);
        assert!(timing_report(&[]).is_err());
        assert_eq!(timing_csv(&rows).lines().count(), 3);
    }
}
