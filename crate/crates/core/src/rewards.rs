//! The five reward components and their within-group normalization.
//!
//! Component order everywhere is `(fmt, ppl, ent, len, pref)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rank_normalize, RandomStream};
use crate::toy_lm::{sequence_nll, PolicyParams, Token, Trajectory};

pub const NUM_REWARDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardComponent {
    Fmt = 0,
    Ppl = 1,
    Ent = 2,
    Len = 3,
    Pref = 4,
}

impl RewardComponent {
    pub const ALL: [RewardComponent; NUM_REWARDS] = [
        RewardComponent::Fmt,
        RewardComponent::Ppl,
        RewardComponent::Ent,
        RewardComponent::Len,
        RewardComponent::Pref,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RewardComponent::Fmt => "fmt",
            RewardComponent::Ppl => "ppl",
            RewardComponent::Ent => "ent",
            RewardComponent::Len => "len",
            RewardComponent::Pref => "pref",
        }
    }
}

/// Marker tokens of the `begin . think . sep . answer . end` response layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatSpec {
    pub begin: Token,
    pub separator: Token,
    pub end: Token,
}

impl FormatSpec {
    pub fn new(begin: Token, separator: Token, end: Token, vocab: usize) -> Result<Self> {
        if begin == separator || begin == end || separator == end {
            return Err(Error::invalid("format markers must be distinct"));
        }
        if [begin, separator, end].iter().any(|&t| t as usize >= vocab) {
            return Err(Error::invalid("format marker outside the vocabulary"));
        }
        Ok(FormatSpec {
            begin,
            separator,
            end,
        })
    }

    fn is_marker(&self, t: Token) -> bool {
        t == self.begin || t == self.separator || t == self.end
    }
}

/// Think and answer segments of a well-formed response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segments<'a> {
    pub think: &'a [Token],
    pub answer: &'a [Token],
}

/// Parses a well-formed response; `None` when the layout is violated.
pub fn parse_response<'a>(response: &'a [Token], spec: &FormatSpec) -> Option<Segments<'a>> {
    let n = response.len();
    if n < 4 || response[0] != spec.begin || response[n - 1] != spec.end {
        return None;
    }
    let body = &response[1..n - 1];
    let sep = body.iter().position(|&t| t == spec.separator)?;
    let (think, rest) = body.split_at(sep);
    let answer = &rest[1..];
    if answer.is_empty() || think.iter().chain(answer).any(|&t| spec.is_marker(t)) {
        return None;
    }
    Some(Segments { think, answer })
}

/// Best-effort answer segment: tokens after the first separator, up to the end
/// marker (or the end of the response). Empty when there is no separator.
pub fn answer_segment<'a>(response: &'a [Token], spec: &FormatSpec) -> &'a [Token] {
    match response.iter().position(|&t| t == spec.separator) {
        Some(i) => {
            let rest = &response[i + 1..];
            let stop = rest
                .iter()
                .position(|&t| t == spec.end)
                .unwrap_or(rest.len());
            &rest[..stop]
        }
        None => &[],
    }
}

/// The reasoning prefix the reference answer is conditioned on: everything up
/// to and including the first separator, or the whole response if it has none.
pub fn think_context<'a>(response: &'a [Token], spec: &FormatSpec) -> &'a [Token] {
    match response.iter().position(|&t| t == spec.separator) {
        Some(i) => &response[..=i],
        None => response,
    }
}

pub fn format_reward(response: &[Token], spec: &FormatSpec) -> f64 {
    if parse_response(response, spec).is_some() {
        1.0
    } else {
        0.0
    }
}

/// Piecewise-linear length reward: 1 up to `l_min`, linear down to 0 at `l_max`.
pub fn length_reward(len: usize, l_min: usize, l_max: usize) -> Result<f64> {
    if l_min >= l_max {
        return Err(Error::invalid(format!(
            "need l_min < l_max, got {l_min} >= {l_max}"
        )));
    }
    Ok(if len <= l_min {
        1.0
    } else if len <= l_max {
        1.0 - (len - l_min) as f64 / (l_max - l_min) as f64
    } else {
        0.0
    })
}

/// `-NLL(reference | prompt ++ think)`; higher is better.
pub fn perplexity_raw(
    policy: &PolicyParams,
    prompt: &[Token],
    think: &[Token],
    reference: &[Token],
) -> Result<f64> {
    let conditioning: Vec<Token> = prompt.iter().chain(think).copied().collect();
    Ok(-sequence_nll(policy, &conditioning, reference)?)
}

/// Mean per-token predictive entropy along the response; 0 for an empty response.
pub fn entropy_raw(traj: &Trajectory) -> f64 {
    if traj.entropies.is_empty() {
        return 0.0;
    }
    traj.entropies.iter().sum::<f64>() / traj.entropies.len() as f64
}

/// Frozen linear preference scorer over cheap response features:
/// `[token histogram / len ; len / length_scale ; has-answer indicator]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefScorer {
    pub token_weights: Vec<f64>,
    pub length_weight: f64,
    pub answer_weight: f64,
    pub bias: f64,
    pub length_scale: f64,
    pub format: FormatSpec,
}

impl PrefScorer {
    /// Draws a scorer from a seeded stream. Histogram weights are zero-mean
    /// noise; the answer indicator weight is positive.
    pub fn sample(
        vocab: usize,
        length_scale: usize,
        format: FormatSpec,
        rng: &mut RandomStream,
    ) -> Self {
        let token_weights = (0..vocab).map(|_| rng.normal()).collect();
        PrefScorer {
            token_weights,
            length_weight: 0.1 * rng.normal(),
            answer_weight: 0.25 + 0.05 * rng.normal().abs(),
            bias: rng.normal(),
            length_scale: length_scale as f64,
            format,
        }
    }

    pub fn features(&self, response: &[Token]) -> Vec<f64> {
        let v = self.token_weights.len();
        let mut phi = vec![0.0; v + 2];
        if response.is_empty() {
            return phi;
        }
        let inv = 1.0 / response.len() as f64;
        for &t in response {
            if (t as usize) < v {
                phi[t as usize] += inv;
            }
        }
        phi[v] = response.len() as f64 / self.length_scale;
        phi[v + 1] = if answer_segment(response, &self.format).is_empty() {
            0.0
        } else {
            1.0
        };
        phi
    }
}

pub fn preference_raw(scorer: &PrefScorer, response: &[Token]) -> f64 {
    let phi = scorer.features(response);
    let v = scorer.token_weights.len();
    let hist: f64 = scorer
        .token_weights
        .iter()
        .zip(&phi[..v])
        .map(|(u, x)| u * x)
        .sum();
    scorer.bias + hist + scorer.length_weight * phi[v] + scorer.answer_weight * phi[v + 1]
}

/// Per-response measurements taken before group normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawMeasurement {
    pub format: f64,
    pub length_reward: f64,
    pub nll: f64,
    pub entropy: f64,
    pub pref: f64,
    pub length: usize,
}

/// Length bounds used by the length reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBounds {
    pub min: usize,
    pub max: usize,
}

/// Computes every raw measurement for one sampled response. Truncated
/// responses are forced to `r_fmt = 0`.
pub fn measure(
    policy: &PolicyParams,
    traj: &Trajectory,
    reference: &[Token],
    format: &FormatSpec,
    bounds: LengthBounds,
    scorer: &PrefScorer,
) -> Result<RawMeasurement> {
    let fmt = if traj.truncated {
        0.0
    } else {
        format_reward(&traj.response, format)
    };
    let think = think_context(&traj.response, format);
    let neg_nll = perplexity_raw(policy, &traj.prompt, think, reference)?;
    Ok(RawMeasurement {
        format: fmt,
        length_reward: length_reward(traj.response.len(), bounds.min, bounds.max)?,
        nll: -neg_nll,
        entropy: entropy_raw(traj),
        pref: preference_raw(scorer, &traj.response),
        length: traj.response.len(),
    })
}

/// Direction of the entropy reward; the negative-entropy baseline flips it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropySign {
    #[default]
    Reward,
    Penalty,
}

/// Which components are rank-normalized within a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `ppl`, `ent` and `pref` are ranked; `fmt` and `len` pass through.
    #[default]
    RankLikelihoodSignals,
    /// All five components are ranked.
    RankAll,
}

/// Group-normalized rewards plus the raw values they came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub r_fmt: f64,
    pub r_ppl: f64,
    pub r_ent: f64,
    pub r_len: f64,
    pub r_pref: f64,
    pub raw_nll: f64,
    pub raw_entropy: f64,
    pub raw_pref: f64,
}

impl RewardVector {
    pub fn components(&self) -> [f64; NUM_REWARDS] {
        [self.r_fmt, self.r_ppl, self.r_ent, self.r_len, self.r_pref]
    }

    pub fn get(&self, c: RewardComponent) -> f64 {
        self.components()[c.index()]
    }
}

pub fn assemble_group_rewards(
    group: &[RawMeasurement],
    entropy_sign: EntropySign,
    normalization: Normalization,
) -> Result<Vec<RewardVector>> {
    if group.is_empty() {
        return Err(Error::invalid("empty reward group"));
    }
    let neg_nll: Vec<f64> = group.iter().map(|m| -m.nll).collect();
    let ent: Vec<f64> = group
        .iter()
        .map(|m| match entropy_sign {
            EntropySign::Reward => m.entropy,
            EntropySign::Penalty => -m.entropy,
        })
        .collect();
    let pref: Vec<f64> = group.iter().map(|m| m.pref).collect();
    let r_ppl = rank_normalize(&neg_nll)?;
    let r_ent = rank_normalize(&ent)?;
    let r_pref = rank_normalize(&pref)?;
    let (r_fmt, r_len) = match normalization {
        Normalization::RankLikelihoodSignals => (
            group.iter().map(|m| m.format).collect::<Vec<_>>(),
            group.iter().map(|m| m.length_reward).collect::<Vec<_>>(),
        ),
        Normalization::RankAll => (
            rank_normalize(&group.iter().map(|m| m.format).collect::<Vec<_>>())?,
            rank_normalize(&group.iter().map(|m| m.length_reward).collect::<Vec<_>>())?,
        ),
    };
    Ok(group
        .iter()
        .enumerate()
        .map(|(j, m)| RewardVector {
            r_fmt: r_fmt[j],
            r_ppl: r_ppl[j],
            r_ent: r_ent[j],
            r_len: r_len[j],
            r_pref: r_pref[j],
            raw_nll: m.nll,
            raw_entropy: m.entropy,
            raw_pref: m.pref,
        })
        .collect())
}
