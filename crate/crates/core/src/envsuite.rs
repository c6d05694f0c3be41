//! Synthetic three-family task suite and its programmatic oracle judge.
//!
//! Token layout: `0` begin marker, `1` separator, `2` end marker, `3..=5` family
//! tags, the rest content tokens. A prompt is `[tag, tag, k_1 .. k_L]` where
//! `k` is the instance key.
//!
//! * REASON: a chain `c_0 = k_L`, `c_i = sigma(c_{i-1})` under a fixed content
//!   permutation `sigma`. The think segment holds `c_1, c_2` and the answer is
//!   `c_3, c_4, c_5`, so a wrong step in the think segment derails the answer.
//! * CREATE: utility is answer diversity (distinct bigrams).
//! * FORMAT: utility is a well-formed response within tight length bounds.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rank_normalize, Purpose, RandomStream, SimplexVector};
use crate::rewards::{answer_segment, format_reward, length_reward, FormatSpec, PrefScorer};
use crate::toy_lm::Token;

pub const BEGIN: Token = 0;
pub const SEPARATOR: Token = 1;
pub const END: Token = 2;
pub const FIRST_CONTENT: Token = 6;
pub const DEFAULT_VOCAB: usize = 32;
pub const DEFAULT_MAX_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Family {
    Reason,
    Create,
    Format,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Reason, Family::Create, Family::Format];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> Token {
        3 + self as Token
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Reason => "REASON",
            Family::Create => "CREATE",
            Family::Format => "FORMAT",
        }
    }

    /// Decodes the family from a prompt's leading tag.
    pub fn from_prompt(prompt: &[Token]) -> Option<Family> {
        let tag = *prompt.first()?;
        Family::ALL.into_iter().find(|f| f.tag() == tag)
    }

    /// Length-reward bounds used for this family.
    pub fn length_bounds(self) -> (usize, usize) {
        match self {
            Family::Reason => (10, DEFAULT_MAX_LEN),
            Family::Create => (8, DEFAULT_MAX_LEN),
            Family::Format => (6, 12),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Vocabulary geometry of the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub vocab: usize,
    pub key_len: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            vocab: DEFAULT_VOCAB,
            key_len: 3,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < FIRST_CONTENT as usize + 4 {
            return Err(Error::Config(format!(
                "vocab {} too small for the task layout",
                self.vocab
            )));
        }
        if self.key_len == 0 || self.key_len > 6 {
            return Err(Error::Config("key_len must be in 1..=6".into()));
        }
        Ok(())
    }

    pub fn num_content(&self) -> usize {
        self.vocab - FIRST_CONTENT as usize
    }

    pub fn format_spec(&self) -> FormatSpec {
        FormatSpec {
            begin: BEGIN,
            separator: SEPARATOR,
            end: END,
        }
    }

    /// The fixed content-token permutation driving the REASON chain.
    pub fn permute(&self, t: Token) -> Token {
        let n = self.num_content();
        let mult = (7..).step_by(2).find(|m| gcd(*m, n) == 1).unwrap_or(1);
        let c = (t - FIRST_CONTENT) as usize;
        FIRST_CONTENT + ((c * mult + 5) % n) as Token
    }

    fn content(&self, rng: &mut RandomStream) -> Token {
        FIRST_CONTENT + rng.below(self.num_content()) as Token
    }
}

/// Chain steps written in the think segment of a REASON demonstration.
pub const REASON_THINK: usize = 2;
/// Chain steps forming a REASON answer.
pub const REASON_ANSWER: usize = 3;

/// `[c_1 .. c_5]` of the REASON chain seeded by the key's last token.
pub fn reason_chain(suite: &SuiteConfig, key: &[Token]) -> Vec<Token> {
    let mut c = *key.last().expect("nonempty key");
    (0..REASON_THINK + REASON_ANSWER)
        .map(|_| {
            c = suite.permute(c);
            c
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub family: Family,
    pub key: Vec<Token>,
    pub prompt_tokens: Vec<Token>,
    /// Reference continuation scored by the perplexity reward.
    pub reference: Vec<Token>,
    pub format_spec: FormatSpec,
    pub l_min: usize,
    pub l_max: usize,
}

impl PromptInstance {
    pub fn new(
        suite: &SuiteConfig,
        family: Family,
        key: Vec<Token>,
        rng: &mut RandomStream,
    ) -> Self {
        let tag = family.tag();
        let mut prompt_tokens = vec![tag, tag];
        prompt_tokens.extend(&key);
        let reference = match family {
            Family::Reason => reason_chain(suite, &key)[REASON_THINK..]
                .iter()
                .copied()
                .chain([END])
                .collect(),
            Family::Create => (0..8).map(|_| suite.content(rng)).chain([END]).collect(),
            Family::Format => vec![key[0], END],
        };
        let (l_min, l_max) = family.length_bounds();
        PromptInstance {
            family,
            key,
            prompt_tokens,
            reference,
            format_spec: suite.format_spec(),
            l_min,
            l_max,
        }
    }

    /// The answer tokens the REASON oracle expects.
    pub fn answer_key(&self) -> &[Token] {
        &self.reference[..self.reference.len() - 1]
    }
}

/// Draws disjoint train and test sets. Families follow `family_mix`; keys are
/// unique per `(family, key)` across both splits.
pub fn generate_dataset(
    suite: &SuiteConfig,
    seed: u64,
    n_train: usize,
    n_test: usize,
    family_mix: &SimplexVector,
) -> Result<(Vec<PromptInstance>, Vec<PromptInstance>)> {
    suite.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid("dataset sizes must be at least 1"));
    }
    if family_mix.len() != Family::ALL.len() {
        return Err(Error::invalid("family mix must have 3 entries"));
    }
    let total = n_train + n_test;
    let capacity = suite.num_content().pow(suite.key_len as u32);
    let mut rng = RandomStream::for_purpose(seed, Purpose::Dataset);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(total);
    let mut per_family = [0usize; 3];
    while out.len() < total {
        let family = Family::ALL[rng.categorical(family_mix.as_slice())];
        if per_family[family.index()] >= capacity {
            return Err(Error::invalid(format!("not enough distinct {family} keys")));
        }
        let key: Vec<Token> = (0..suite.key_len)
            .map(|_| suite.content(&mut rng))
            .collect();
        if !seen.insert((family, key.clone())) {
            continue;
        }
        per_family[family.index()] += 1;
        out.push(PromptInstance::new(suite, family, key, &mut rng));
    }
    let test = out.split_off(n_train);
    Ok((out, test))
}

/// A full demonstration response for warm-start pretraining.
pub fn demonstration(
    suite: &SuiteConfig,
    inst: &PromptInstance,
    rng: &mut RandomStream,
) -> Vec<Token> {
    let mut y = vec![BEGIN];
    match inst.family {
        Family::Reason => {
            let chain = reason_chain(suite, &inst.key);
            y.extend(&chain[..REASON_THINK]);
            y.push(SEPARATOR);
            y.extend(&chain[REASON_THINK..]);
        }
        Family::Create => {
            let think = rng.below(3);
            y.extend((0..think).map(|_| suite.content(rng)));
            y.push(SEPARATOR);
            let len = 3 + rng.below(12);
            if rng.uniform() < 0.3 {
                let t = suite.content(rng);
                y.extend(std::iter::repeat_n(t, len));
            } else {
                y.extend((0..len).map(|_| suite.content(rng)));
            }
        }
        Family::Format => {
            y.push(inst.key[0]);
            y.push(SEPARATOR);
            let len = 1 + rng.below(6);
            y.extend((0..len).map(|_| suite.content(rng)));
        }
    }
    y.push(END);
    y
}

/// Programmatic stand-in for an external judge. Shares no parameters with
/// any reward component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleJudge;

/// Distinct bigrams over `max(#bigrams, 8)`.
pub fn distinct_bigram_ratio(tokens: &[Token]) -> f64 {
    if tokens.len() < 2 {
        return 0.0;
    }
    let bigrams: BTreeSet<(Token, Token)> = tokens.windows(2).map(|w| (w[0], w[1])).collect();
    bigrams.len() as f64 / (tokens.len() - 1).max(8) as f64
}

fn common_prefix(a: &[Token], b: &[Token]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

pub fn oracle_utility(_judge: &OracleJudge, prompt: &PromptInstance, response: &[Token]) -> f64 {
    let spec = &prompt.format_spec;
    match prompt.family {
        Family::Reason => {
            let answer = answer_segment(response, spec);
            let key = prompt.answer_key();
            if answer == key {
                1.0
            } else {
                common_prefix(answer, key) as f64 / answer.len().max(key.len()) as f64
            }
        }
        Family::Create => {
            distinct_bigram_ratio(answer_segment(response, spec)) * format_reward(response, spec)
        }
        Family::Format => {
            format_reward(response, spec)
                * length_reward(response.len(), prompt.l_min, prompt.l_max).unwrap_or(0.0)
        }
    }
}

/// The frozen preference scorer of an environment seed.
pub fn pref_scorer(suite: &SuiteConfig, seed: u64) -> PrefScorer {
    let mut rng = RandomStream::for_purpose(seed, Purpose::Scorer);
    PrefScorer::sample(suite.vocab, DEFAULT_MAX_LEN, suite.format_spec(), &mut rng)
}

pub fn write_dataset(path: &Path, instances: &[PromptInstance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<PromptInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Spearman rank correlation (average ranks for ties); 0 when either side is
/// constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid(
            "spearman needs two equal-length samples of size >= 2",
        ));
    }
    let rx = rank_normalize(xs)?;
    let ry = rank_normalize(ys)?;
    Ok(pearson(&rx, &ry))
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
