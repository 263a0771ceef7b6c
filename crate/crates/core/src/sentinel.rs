//! Defenses honest nodes apply to allgathered completions before advantages
//! are computed.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{mean_std, Group, SIGMA_FLOOR};
use crate::policy::{top_k, Completion, PolicyError, PolicyParams, Provenance};
use crate::seed;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("probability {name} = {value} outside [0, 1]")]
    BadProbability { name: &'static str, value: f64 },
    #[error("outlier threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("{0} requires homogeneous mode")]
    NeedsHomogeneous(&'static str),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    #[default]
    None,
    TopkLogprobCheck,
    ExactReplay,
    JudgeFilter,
    OutlierFilter,
    KlOnly,
}

impl DefenseKind {
    /// Checks that trust the local model to stand in for the claimed generator.
    pub fn needs_homogeneous(self) -> bool {
        matches!(self, Self::TopkLogprobCheck | Self::ExactReplay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    /// Probability the judge flags a poisoned completion.
    pub judge_detection: f64,
    /// Probability the judge flags a benign completion.
    pub judge_false_positive: f64,
    /// |z| above which a reward counts as an outlier.
    pub outlier_tau: f64,
}

impl Default for DefenseSpec {
    fn default() -> Self {
        Self {
            kind: DefenseKind::None,
            judge_detection: 0.952,
            judge_false_positive: 0.0,
            outlier_tau: 3.0,
        }
    }
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<(), DefenseError> {
        for (name, value) in [
            ("judge_detection", self.judge_detection),
            ("judge_false_positive", self.judge_false_positive),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(DefenseError::BadProbability { name, value });
            }
        }
        if self.outlier_tau.is_nan() || self.outlier_tau <= 0.0 {
            return Err(DefenseError::BadThreshold(self.outlier_tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Passed,
    TokenOutsideTopk,
    ReplayMismatch,
    JudgeFlagged,
    OutlierReward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DefenseVerdict {
    /// (group index, position within group)
    pub completion_ref: (usize, usize),
    pub accepted: bool,
    pub reason: Reason,
}

impl DefenseVerdict {
    fn new(completion_ref: (usize, usize), reason: Reason) -> Self {
        Self {
            completion_ref,
            accepted: reason == Reason::Passed,
            reason,
        }
    }
}

/// Position of the first token outside the declared top-k set under the
/// local model, if any.
pub fn first_outside_topk(
    model: &PolicyParams,
    prompt: &[crate::corpus::TokenId],
    completion: &Completion,
) -> Result<Option<usize>, PolicyError> {
    let sampler = completion.declared_sampler;
    sampler.validate(model.vocab_size())?;
    for t in 0..completion.tokens.len() {
        let logits = model.logits(prompt, &completion.tokens[..t])?;
        let (ids, _) = top_k(&logits, sampler.top_k, sampler.temperature);
        if !ids.contains(&completion.tokens[t]) {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

pub fn topk_logprob_check(
    model: &PolicyParams,
    prompt: &[crate::corpus::TokenId],
    completion: &Completion,
    completion_ref: (usize, usize),
) -> Result<DefenseVerdict, PolicyError> {
    let reason = match first_outside_topk(model, prompt, completion)? {
        Some(_) => Reason::TokenOutsideTopk,
        None => Reason::Passed,
    };
    Ok(DefenseVerdict::new(completion_ref, reason))
}

pub fn exact_replay_check(
    model: &PolicyParams,
    prompt: &[crate::corpus::TokenId],
    completion: &Completion,
    completion_ref: (usize, usize),
) -> Result<DefenseVerdict, PolicyError> {
    let sampler = completion.declared_sampler;
    // a sampler the local model cannot run cannot have produced the tokens
    let reason = match model.sample_tokens(prompt, &sampler, completion.gen_seed) {
        Ok(tokens) if tokens == completion.tokens => Reason::Passed,
        Ok(_) | Err(PolicyError::BadSampler(_)) => Reason::ReplayMismatch,
        Err(e) => return Err(e),
    };
    Ok(DefenseVerdict::new(completion_ref, reason))
}

/// Identifies one judge call so its coin flip is reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JudgeKey {
    pub seed: u64,
    pub round: u64,
    pub node: u64,
    pub group: u64,
    pub position: u64,
}

impl JudgeKey {
    fn rng(&self) -> rand_chacha::ChaCha8Rng {
        seed::rng(seed::derive(&[
            seed::stream::JUDGE,
            self.seed,
            self.round,
            self.node,
            self.group,
            self.position,
        ]))
    }
}

/// Oracle judge: `r_judge = 0` with probability `d` on poisoned completions
/// and `fp` on everything else.
pub fn judge_filter(poisoned: bool, spec: &DefenseSpec, key: JudgeKey) -> f64 {
    let p = if poisoned {
        spec.judge_detection
    } else {
        spec.judge_false_positive
    };
    let u: f64 = key.rng().random();
    if u < p {
        0.0
    } else {
        1.0
    }
}

/// Rejects rewards whose population z-score exceeds `tau` in magnitude.
pub fn outlier_filter(rewards: &[f64], tau: f64, group: usize) -> Vec<DefenseVerdict> {
    let (mu, sigma) = mean_std(rewards);
    rewards
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let outlier = sigma >= SIGMA_FLOOR && ((r - mu) / sigma).abs() > tau;
            let reason = if outlier {
                Reason::OutlierReward
            } else {
                Reason::Passed
            };
            DefenseVerdict::new((group, i), reason)
        })
        .collect()
}

/// Per-round verdict tallies for one honest node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefenseCounters {
    pub inspected: u64,
    pub accepted: u64,
    pub rejected_topk: u64,
    pub rejected_replay: u64,
    pub rejected_judge: u64,
    pub rejected_outlier: u64,
    pub honest_inspected: u64,
    pub honest_rejected: u64,
    pub attacker_inspected: u64,
    pub attacker_rejected: u64,
    pub poisoned_inspected: u64,
    pub poisoned_rejected: u64,
    pub groups_discarded: u64,
}

impl DefenseCounters {
    fn record(&mut self, verdict: &DefenseVerdict, provenance: Provenance) {
        self.inspected += 1;
        let rejected = !verdict.accepted;
        match verdict.reason {
            Reason::Passed => self.accepted += 1,
            Reason::TokenOutsideTopk => self.rejected_topk += 1,
            Reason::ReplayMismatch => self.rejected_replay += 1,
            Reason::JudgeFlagged => self.rejected_judge += 1,
            Reason::OutlierReward => self.rejected_outlier += 1,
        }
        let rej = u64::from(rejected);
        match provenance {
            Provenance::Sampled => {
                self.honest_inspected += 1;
                self.honest_rejected += rej;
            }
            Provenance::Poisoned => {
                self.attacker_inspected += 1;
                self.attacker_rejected += rej;
                self.poisoned_inspected += 1;
                self.poisoned_rejected += rej;
            }
            Provenance::Filler => {
                self.attacker_inspected += 1;
                self.attacker_rejected += rej;
            }
        }
    }

    pub fn merge(&mut self, other: &DefenseCounters) {
        self.inspected += other.inspected;
        self.accepted += other.accepted;
        self.rejected_topk += other.rejected_topk;
        self.rejected_replay += other.rejected_replay;
        self.rejected_judge += other.rejected_judge;
        self.rejected_outlier += other.rejected_outlier;
        self.honest_inspected += other.honest_inspected;
        self.honest_rejected += other.honest_rejected;
        self.attacker_inspected += other.attacker_inspected;
        self.attacker_rejected += other.attacker_rejected;
        self.poisoned_inspected += other.poisoned_inspected;
        self.poisoned_rejected += other.poisoned_rejected;
        self.groups_discarded += other.groups_discarded;
    }

    /// Share of poisoned payloads rejected, if any were inspected.
    pub fn poisoned_detection_rate(&self) -> Option<f64> {
        (self.poisoned_inspected > 0)
            .then(|| self.poisoned_rejected as f64 / self.poisoned_inspected as f64)
    }
}

/// Where the defending node sits in the round, for seeding the judge.
#[derive(Debug, Clone, Copy)]
pub struct DefenseContext {
    pub seed: u64,
    pub round: u64,
    pub node: u64,
}

/// Produces a node's own view of the round. Groups arrive with verifiable
/// rewards set in `Completion::reward`; the returned groups are scored with
/// advantages over their survivors. Filtering defenses drop rejected
/// completions and discard groups left with fewer than two; the judge
/// multiplies rewards in place.
pub fn apply_defense(
    model: &PolicyParams,
    groups: &[Group],
    spec: &DefenseSpec,
    ctx: DefenseContext,
) -> Result<(Vec<Group>, DefenseCounters), DefenseError> {
    let mut counters = DefenseCounters::default();
    let mut view = Vec::with_capacity(groups.len());
    for (gi, group) in groups.iter().enumerate() {
        let rewards: Vec<f64> = group
            .completions
            .iter()
            .map(|c| c.reward.unwrap_or(0.0))
            .collect();
        let verdicts: Vec<DefenseVerdict> = match spec.kind {
            DefenseKind::None | DefenseKind::KlOnly => Vec::new(),
            DefenseKind::TopkLogprobCheck => group
                .completions
                .iter()
                .enumerate()
                .map(|(i, c)| topk_logprob_check(model, &group.prompt, c, (gi, i)))
                .collect::<Result<_, _>>()?,
            DefenseKind::ExactReplay => group
                .completions
                .iter()
                .enumerate()
                .map(|(i, c)| exact_replay_check(model, &group.prompt, c, (gi, i)))
                .collect::<Result<_, _>>()?,
            DefenseKind::OutlierFilter => outlier_filter(&rewards, spec.outlier_tau, gi),
            DefenseKind::JudgeFilter => group
                .completions
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let key = JudgeKey {
                        seed: ctx.seed,
                        round: ctx.round,
                        node: ctx.node,
                        group: gi as u64,
                        position: i as u64,
                    };
                    let flagged =
                        judge_filter(c.provenance == Provenance::Poisoned, spec, key) == 0.0;
                    let reason = if flagged {
                        Reason::JudgeFlagged
                    } else {
                        Reason::Passed
                    };
                    DefenseVerdict::new((gi, i), reason)
                })
                .collect(),
        };
        for (v, c) in verdicts.iter().zip(&group.completions) {
            counters.record(v, c.provenance);
        }

        let mut out = group.clone();
        let mut final_rewards = rewards;
        if spec.kind == DefenseKind::JudgeFilter {
            for (r, v) in final_rewards.iter_mut().zip(&verdicts) {
                if !v.accepted {
                    *r = 0.0;
                }
            }
        } else if !verdicts.is_empty() {
            let keep: Vec<bool> = verdicts.iter().map(|v| v.accepted).collect();
            let mut k = keep.iter();
            out.completions.retain(|_| *k.next().unwrap());
            let mut k = keep.iter();
            final_rewards.retain(|_| *k.next().unwrap());
        }
        if out.completions.len() < 2 {
            counters.groups_discarded += 1;
            continue;
        }
        out.score(&final_rewards)
            .expect("group has at least two completions");
        view.push(out);
    }
    Ok((view, counters))
}
