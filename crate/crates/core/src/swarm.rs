//! Round engine for a simulated swarm: prompt assignment, generation,
//! in-process allgather, per-node defense and update, validation.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::adversary::{self, AttackError, AttackKind, AttackSpec, SlotContext};
use crate::corpus::{
    build_vocab, gen_dataset_with, target_indices, CorpusError, Dataset, DatasetOptions,
    PromptInstance, TargetFlag, TokenId, Vocab,
};
use crate::grpo::{self, Group, GrpoError, TrainState, WarmStart};
use crate::harness::asr::{compute_asr, AsrSummary};
use crate::harness::config::{ConfigError, ExperimentConfig, Protocol, Selection};
use crate::harness::metrics::{MetricsRecord, Role};
use crate::policy::{init_params, Completion, PolicyError, PolicyParams, SamplerSpec};
use crate::rewards::{composite_reward, RewardSpec};
use crate::seed;
use crate::sentinel::{
    self, DefenseContext, DefenseCounters, DefenseError, DefenseKind, DefenseSpec,
};

#[derive(Debug, Error)]
pub enum SwarmError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error("group {group} slot {slot} filled {count} times")]
    SlotCount {
        group: usize,
        slot: usize,
        count: usize,
    },
    #[error("homogeneous lockstep broken at round {round}: {a} != {b}")]
    Lockstep { round: usize, a: String, b: String },
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("{0}")]
    Sink(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: usize,
    pub role: Role,
    /// Shared by every node in homogeneous mode.
    pub model_id: usize,
    pub attack: Option<AttackSpec>,
    pub defense: Option<DefenseSpec>,
}

pub fn node_specs(cfg: &ExperimentConfig) -> Vec<NodeSpec> {
    (0..cfg.swarm.nodes)
        .map(|id| {
            let malicious = cfg.is_malicious(id);
            NodeSpec {
                id,
                role: if malicious {
                    Role::Malicious
                } else {
                    Role::Honest
                },
                model_id: if cfg.swarm.homogeneous { 0 } else { id },
                attack: malicious.then(|| cfg.attack.clone()),
                defense: (!malicious).then_some(cfg.defense),
            }
        })
        .collect()
}

/// Slots of one group owned by one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub group: usize,
    pub slots: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    pub protocol: Protocol,
    pub round: usize,
    pub group_size: usize,
    /// Train-set index of each group's prompt.
    pub prompts: Vec<usize>,
    /// Per node, the (group, slots) pairs it generates.
    pub assignments: Vec<Vec<Assignment>>,
}

impl RoundPlan {
    pub fn owner(&self, group: usize, slot: usize) -> Option<usize> {
        self.assignments.iter().position(|a| {
            a.iter()
                .any(|x| x.group == group && x.slots.contains(&slot))
        })
    }
}

fn draw_distinct(seed: u64, pool: usize, amount: usize) -> Vec<usize> {
    let mut rng = seed::rng(seed);
    rand::seq::index::sample(&mut rng, pool, amount).into_vec()
}

/// Global selection of the round's B prompts (shared by every node).
pub fn global_selection(cfg: &ExperimentConfig, round: usize) -> Vec<usize> {
    draw_distinct(
        seed::derive(&[seed::stream::GLOBAL_SELECT, cfg.training.seed, round as u64]),
        cfg.task.n_train,
        cfg.swarm.batch_prompts,
    )
}

/// Builds the round's assignment. `attacker_pool` restricts a vertical
/// malicious node's local selection (indices into the train set).
pub fn plan_round(
    cfg: &ExperimentConfig,
    round: usize,
    attacker_pool: Option<&[usize]>,
) -> RoundPlan {
    let m = cfg.swarm.nodes;
    let g = cfg.swarm.group_size;
    let b = cfg.swarm.batch_prompts;
    match cfg.swarm.protocol {
        Protocol::Horizontal => {
            let per = g / m;
            RoundPlan {
                protocol: Protocol::Horizontal,
                round,
                group_size: g,
                prompts: global_selection(cfg, round),
                assignments: (0..m)
                    .map(|k| {
                        (0..b)
                            .map(|group| Assignment {
                                group,
                                slots: k * per..(k + 1) * per,
                            })
                            .collect()
                    })
                    .collect(),
            }
        }
        Protocol::Vertical => {
            let per = b / m;
            let global =
                (cfg.swarm.selection == Selection::Aligned).then(|| global_selection(cfg, round));
            let mut prompts = Vec::with_capacity(b);
            for k in 0..m {
                let local = match (&global, attacker_pool.filter(|_| cfg.is_malicious(k))) {
                    (_, Some(pool)) => {
                        let seed = seed::derive(&[
                            seed::stream::LOCAL_SELECT,
                            cfg.training.seed,
                            round as u64,
                            k as u64,
                        ]);
                        draw_distinct(seed, pool.len(), per.min(pool.len()))
                            .into_iter()
                            .map(|i| pool[i])
                            .collect::<Vec<_>>()
                    }
                    (Some(global), None) => global[k * per..(k + 1) * per].to_vec(),
                    (None, None) => draw_distinct(
                        seed::derive(&[
                            seed::stream::LOCAL_SELECT,
                            cfg.training.seed,
                            round as u64,
                            k as u64,
                        ]),
                        cfg.task.n_train,
                        per,
                    ),
                };
                prompts.extend(local);
            }
            RoundPlan {
                protocol: Protocol::Vertical,
                round,
                group_size: g,
                prompts,
                assignments: (0..m)
                    .map(|k| {
                        (k * per..(k + 1) * per)
                            .map(|group| Assignment { group, slots: 0..g })
                            .collect()
                    })
                    .collect(),
            }
        }
    }
}

/// A completion tagged with its (group, slot).
pub type Slotted = (usize, usize, Completion);

/// Completions one node submits.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutput {
    pub node: usize,
    pub completions: Vec<Slotted>,
}

/// Places every submitted completion into its group. Completions are
/// ordered by slot, which orders them by node id and then slot.
pub fn allgather(
    plan: &RoundPlan,
    outputs: &[NodeOutput],
    dataset: &Dataset,
) -> Result<Vec<Group>, SwarmError> {
    let g = plan.group_size;
    let mut slots: Vec<Vec<Option<Completion>>> = vec![vec![None; g]; plan.prompts.len()];
    let mut counts = vec![vec![0usize; g]; plan.prompts.len()];
    for out in outputs {
        for (group, slot, c) in &out.completions {
            counts[*group][*slot] += 1;
            slots[*group][*slot] = Some(c.clone());
        }
    }
    for (group, row) in counts.iter().enumerate() {
        if let Some((slot, &count)) = row.iter().enumerate().find(|(_, &n)| n != 1) {
            return Err(SwarmError::SlotCount { group, slot, count });
        }
    }
    Ok(slots
        .into_iter()
        .zip(&plan.prompts)
        .map(|(row, &prompt_ref)| {
            Group::new(
                prompt_ref,
                dataset.train[prompt_ref].prompt_tokens.clone(),
                row.into_iter().map(|c| c.expect("checked")).collect(),
            )
        })
        .collect())
}

/// Per-round outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub groups: Vec<Group>,
    pub metrics: Vec<MetricsRecord>,
    /// Per-node checksum after the round's update.
    pub checksums: Vec<String>,
}

fn warm_cache() -> &'static Mutex<HashMap<String, PolicyParams>> {
    static CACHE: OnceLock<Mutex<HashMap<String, PolicyParams>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Warm-started initial model for one node; identical requests within a
/// process are served from a cache.
fn initial_model(
    cfg: &ExperimentConfig,
    node: usize,
    vocab: &Vocab,
    dataset: &Dataset,
) -> Result<PolicyParams, SwarmError> {
    let arch = cfg.policy.arch_for(node);
    let init_seed = if cfg.swarm.homogeneous {
        cfg.init_seed()
    } else {
        seed::derive(&[cfg.init_seed(), node as u64])
    };
    let ws = WarmStart {
        steps: cfg.policy.warm_start_steps,
        batch: cfg.policy.warm_start_batch,
        lr: cfg.policy.warm_start_lr,
        seed: init_seed,
    };
    let key = format!(
        "{:?}|{}|{}|{}|{}|{:?}|{}|{:?}",
        cfg.task.kind,
        cfg.task.n_train,
        cfg.task.n_val,
        cfg.dataset_seed(),
        cfg.task.target_rate,
        arch,
        init_seed,
        ws
    );
    if let Some(p) = warm_cache().lock().expect("cache lock").get(&key) {
        return Ok(p.clone());
    }
    let params = init_params(vocab.len(), arch, init_seed)?;
    let params = grpo::warm_start(params, &dataset.train, &ws)?;
    warm_cache()
        .lock()
        .expect("cache lock")
        .insert(key, params.clone());
    Ok(params)
}

/// Options that do not affect results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub record_wall_time: bool,
}

pub struct Swarm {
    pub cfg: ExperimentConfig,
    pub vocab: Vocab,
    pub dataset: Dataset,
    pub reward_spec: RewardSpec,
    pub nodes: Vec<NodeSpec>,
    pub states: Vec<TrainState>,
    /// Train indices eligible for the equation attack.
    pub target_pool: Vec<usize>,
    /// Validation instances used every round.
    pub validation_set: Vec<PromptInstance>,
    pub round: usize,
    pub options: RunOptions,
}

impl Swarm {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, SwarmError> {
        cfg.validate()?;
        let vocab = build_vocab(cfg.task.kind);
        let dataset = gen_dataset_with(
            cfg.task.kind,
            cfg.task.n_train,
            cfg.task.n_val,
            cfg.dataset_seed(),
            DatasetOptions {
                target_rate: cfg.task.target_rate,
            },
        )?;
        let target_pool = target_indices(&dataset);
        let equation = cfg.attack.kind == AttackKind::EquationManipulation;
        let needed = match cfg.swarm.protocol {
            Protocol::Vertical => (cfg.swarm.batch_prompts / cfg.swarm.nodes).max(1),
            Protocol::Horizontal => 1,
        };
        if equation && target_pool.len() < needed {
            return Err(AttackError::AttackInapplicable(format!(
                "{} flagged train prompts, attacker needs {needed} per round",
                target_pool.len()
            ))
            .into());
        }
        let validation_set: Vec<PromptInstance> = dataset
            .validation
            .iter()
            .filter(|i| !equation || i.has_flag(TargetFlag::Contains2p2))
            .take(cfg.validation.prompts)
            .cloned()
            .collect();
        if validation_set.is_empty() {
            return Err(ConfigError::Invalid("validation set is empty".into()).into());
        }
        let nodes = node_specs(&cfg);
        let mut states = Vec::with_capacity(nodes.len());
        for node in &nodes {
            let params = initial_model(&cfg, node.id, &vocab, &dataset)?;
            states.push(TrainState::new(params, cfg.training.lr, cfg.training.beta));
        }
        Ok(Self {
            reward_spec: RewardSpec::new(cfg.task.kind),
            cfg,
            vocab,
            dataset,
            nodes,
            states,
            target_pool,
            validation_set,
            round: 0,
            options: RunOptions::default(),
        })
    }

    pub fn sampler(&self) -> SamplerSpec {
        self.cfg.policy.sampler()
    }

    fn attacker_pool(&self) -> Option<&[usize]> {
        (self.cfg.attack.kind == AttackKind::EquationManipulation).then_some(&self.target_pool[..])
    }

    pub fn plan(&self, round: usize) -> RoundPlan {
        plan_round(&self.cfg, round, self.attacker_pool())
    }

    /// Seed an honest node would use for (group, slot).
    pub fn completion_seed(&self, round: usize, node: usize, group: usize, slot: usize) -> u64 {
        let node_term = if self.cfg.swarm.node_seeded {
            node as u64
        } else {
            0
        };
        seed::completion_seed(
            self.cfg.training.seed,
            round as u64,
            node_term,
            group as u64,
            slot as u64,
        )
    }

    fn generate_assignment(
        &self,
        plan: &RoundPlan,
        node: &NodeSpec,
        a: &Assignment,
    ) -> Result<Vec<Slotted>, SwarmError> {
        let prompt_ref = plan.prompts[a.group];
        let instance = &self.dataset.train[prompt_ref];
        let sampler = self.sampler();
        let seeds: Vec<u64> = a
            .slots
            .clone()
            .map(|s| self.completion_seed(plan.round, node.id, a.group, s))
            .collect();
        let model = &self.states[node.id].params;
        let payload = node.attack.as_ref().filter(|spec| match spec.kind {
            AttackKind::None => false,
            AttackKind::EquationManipulation => instance.has_flag(TargetFlag::Contains2p2),
            _ => true,
        });
        let completions = match payload {
            Some(spec) => {
                let mut rng = seed::rng(seed::derive(&[
                    seed::stream::GARBAGE,
                    self.cfg.training.seed,
                    plan.round as u64,
                    node.id as u64,
                    a.group as u64,
                ]));
                let ctx = SlotContext {
                    prompt_ref,
                    origin_node: node.id,
                    declared_sampler: sampler,
                };
                adversary::fill_slots(
                    &seeds,
                    instance,
                    spec,
                    self.cfg.poisoned_fraction(),
                    ctx,
                    &self.vocab,
                    &self.reward_spec,
                    &mut rng,
                )?
            }
            None => seeds
                .iter()
                .map(|&s| {
                    model.sample_completion(
                        prompt_ref,
                        &instance.prompt_tokens,
                        node.id,
                        &sampler,
                        s,
                    )
                })
                .collect::<Result<_, _>>()?,
        };
        Ok(a.slots
            .clone()
            .zip(completions)
            .map(|(s, c)| (a.group, s, c))
            .collect())
    }

    /// Generation phase. Work items run concurrently and are collected in
    /// node, group, slot order.
    pub fn generate(&self, plan: &RoundPlan) -> Result<Vec<NodeOutput>, SwarmError> {
        let work: Vec<(usize, &Assignment)> = plan
            .assignments
            .iter()
            .enumerate()
            .flat_map(|(k, list)| list.iter().map(move |a| (k, a)))
            .collect();
        let produced: Vec<Result<Vec<Slotted>, SwarmError>> = work
            .par_iter()
            .map(|&(k, a)| self.generate_assignment(plan, &self.nodes[k], a))
            .collect();
        let mut outputs: Vec<NodeOutput> = (0..self.nodes.len())
            .map(|node| NodeOutput {
                node,
                completions: Vec::new(),
            })
            .collect();
        for ((k, _), result) in work.iter().zip(produced) {
            outputs[*k].completions.extend(result?);
        }
        Ok(outputs)
    }

    /// Verifiable reward of every completion, stored on the completion.
    pub fn score(&self, groups: &mut [Group]) {
        groups.par_iter_mut().for_each(|group| {
            let instance = &self.dataset.train[group.prompt_ref];
            for c in &mut group.completions {
                c.reward = Some(composite_reward(
                    &c.tokens,
                    instance,
                    &self.vocab,
                    &self.reward_spec,
                ));
            }
        });
    }

    /// Mean reward and ASR of one model on the fixed validation prompts.
    pub fn validate_model(&self, model: &PolicyParams) -> Result<(f64, AsrSummary), SwarmError> {
        let sampler = if self.cfg.validation.greedy {
            SamplerSpec::greedy(self.cfg.policy.max_len)
        } else {
            self.sampler()
        };
        let samples = self.cfg.validation.samples;
        let jobs: Vec<(usize, usize)> = (0..self.validation_set.len())
            .flat_map(|i| (0..samples).map(move |j| (i, j)))
            .collect();
        let outputs: Vec<Result<Vec<TokenId>, PolicyError>> = jobs
            .par_iter()
            .map(|&(i, j)| {
                let seed = seed::derive(&[
                    seed::stream::VALIDATION,
                    self.cfg.training.seed,
                    i as u64,
                    j as u64,
                ]);
                model.sample_tokens(&self.validation_set[i].prompt_tokens, &sampler, seed)
            })
            .collect();
        let outputs: Vec<Vec<TokenId>> = outputs.into_iter().collect::<Result<_, _>>()?;
        let pairs: Vec<(&[TokenId], &PromptInstance)> = jobs
            .iter()
            .zip(&outputs)
            .map(|(&(i, _), t)| (t.as_slice(), &self.validation_set[i]))
            .collect();
        let total: f64 = pairs
            .iter()
            .map(|(t, inst)| composite_reward(t, inst, &self.vocab, &self.reward_spec))
            .sum();
        let summary = compute_asr(&pairs, &self.cfg.attack, &self.vocab, &self.reward_spec)?;
        Ok((total / pairs.len() as f64, summary))
    }

    /// One full round: validation of the current models, generation,
    /// allgather, scoring, per-node defense and update.
    pub fn step(&mut self) -> Result<RoundRecord, SwarmError> {
        let round = self.round;
        let started = Instant::now();

        let mut validation: HashMap<String, (f64, AsrSummary)> = HashMap::new();
        let mut pre = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            if node.role != Role::Honest {
                pre.push(None);
                continue;
            }
            let params = &self.states[node.id].params;
            let sum = params.checksum();
            let v = match validation.get(&sum) {
                Some(v) => *v,
                None => {
                    let v = self.validate_model(params)?;
                    validation.insert(sum, v);
                    v
                }
            };
            pre.push(Some(v));
        }

        let plan = self.plan(round);
        let outputs = self.generate(&plan)?;
        let mut groups = allgather(&plan, &outputs, &self.dataset)?;
        self.score(&mut groups);

        let train_rewards: Vec<Option<f64>> = outputs
            .iter()
            .map(|o| {
                let n = o.completions.len();
                (n > 0).then(|| {
                    o.completions
                        .iter()
                        .map(|(g, s, _)| groups[*g].completions[*s].reward.unwrap_or(0.0))
                        .sum::<f64>()
                        / n as f64
                })
            })
            .collect();

        let seed = self.cfg.training.seed;
        let nodes = &self.nodes;
        let results: Vec<Result<(DefenseCounters, usize), SwarmError>> = self
            .states
            .par_iter_mut()
            .zip(nodes.par_iter())
            .map(|(state, node)| {
                let spec = match node.defense {
                    Some(spec) => spec,
                    None => DefenseSpec {
                        kind: DefenseKind::None,
                        ..Default::default()
                    },
                };
                let ctx = DefenseContext {
                    seed,
                    round: round as u64,
                    node: node.id as u64,
                };
                let (view, counters) = sentinel::apply_defense(&state.params, &groups, &spec, ctx)?;
                if !view.is_empty() {
                    grpo::train_step(state, &view)?;
                }
                Ok((counters, view.len()))
            })
            .collect();

        let checksums: Vec<String> = self.states.iter().map(|s| s.params.checksum()).collect();
        if self.cfg.swarm.homogeneous && self.cfg.defense.kind != DefenseKind::JudgeFilter {
            let honest: Vec<&String> = nodes
                .iter()
                .filter(|n| n.role == Role::Honest)
                .map(|n| &checksums[n.id])
                .collect();
            if let Some(w) = honest.windows(2).find(|w| w[0] != w[1]) {
                return Err(SwarmError::Lockstep {
                    round,
                    a: w[0].clone(),
                    b: w[1].clone(),
                });
            }
        }

        let wall = self
            .options
            .record_wall_time
            .then(|| started.elapsed().as_secs_f64());
        let mut metrics = Vec::with_capacity(nodes.len());
        for (node, result) in nodes.iter().zip(results) {
            let (defense, groups_used) = result?;
            let (mean_reward, summary) = match pre[node.id] {
                Some((r, s)) => (Some(r), s),
                None => (None, AsrSummary::default()),
            };
            metrics.push(MetricsRecord {
                round,
                node_id: node.id,
                role: node.role,
                mean_reward,
                train_reward: train_rewards[node.id],
                asr: summary.asr,
                conditional_asr: summary.conditional_asr,
                extended_asr: summary.extended_asr,
                eligible_count: summary.eligible_count,
                defense,
                groups_used,
                checksum: checksums[node.id].clone(),
                wall_time: wall,
            });
        }
        self.round += 1;
        Ok(RoundRecord {
            round,
            groups,
            metrics,
            checksums,
        })
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, SwarmError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| SwarmError::Pool(e.to_string()))
}

/// Runs every configured round, handing each record to `sink` as soon as it
/// is complete. Returns the final swarm state.
pub fn run_experiment_with<F>(
    cfg: ExperimentConfig,
    options: RunOptions,
    mut sink: F,
) -> Result<Swarm, SwarmError>
where
    F: FnMut(&RoundRecord) -> Result<(), String> + Send,
{
    let threads = cfg.swarm.threads;
    pool(threads)?.install(|| {
        let rounds = cfg.training.rounds;
        let mut swarm = Swarm::new(cfg)?;
        swarm.options = options;
        for _ in 0..rounds {
            let record = swarm.step()?;
            sink(&record).map_err(SwarmError::Sink)?;
        }
        Ok(swarm)
    })
}

pub fn run_experiment(cfg: ExperimentConfig) -> Result<Vec<RoundRecord>, SwarmError> {
    let mut records = Vec::new();
    run_experiment_with(cfg, RunOptions::default(), |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Provenance;

    fn small(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::with_seed(seed);
        cfg.task.n_train = 64;
        cfg.task.n_val = 16;
        cfg.policy.embed = 4;
        cfg.policy.hidden = 8;
        cfg.policy.max_len = 12;
        cfg.policy.warm_start_steps = 0;
        cfg.swarm.batch_prompts = 4;
        cfg.validation.prompts = 4;
        cfg.validation.samples = 1;
        cfg.training.rounds = 2;
        cfg
    }

    #[test]
    fn horizontal_plan_shape() {
        let mut cfg = ExperimentConfig::with_seed(1);
        cfg.swarm.batch_prompts = 32;
        let plan = plan_round(&cfg, 0, None);
        assert_eq!(plan.prompts.len(), 32);
        for (k, list) in plan.assignments.iter().enumerate() {
            assert_eq!(list.len(), 32);
            assert!(list.iter().all(|a| a.slots == (3 * k..3 * k + 3)));
        }
        let mut distinct = plan.prompts.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 32);
    }

    #[test]
    fn vertical_plan_shape() {
        let mut cfg = ExperimentConfig::with_seed(1);
        cfg.swarm.protocol = Protocol::Vertical;
        cfg.swarm.batch_prompts = 32;
        let plan = plan_round(&cfg, 0, None);
        for (k, list) in plan.assignments.iter().enumerate() {
            assert_eq!(list.len(), 8);
            assert!(list.iter().all(|a| a.slots == (0..12) && a.group / 8 == k));
        }
    }

    #[test]
    fn vertical_attacker_draws_from_pool() {
        let mut cfg = ExperimentConfig::with_seed(1);
        cfg.swarm.protocol = Protocol::Vertical;
        cfg.swarm.malicious = 1;
        let pool: Vec<usize> = (500..520).collect();
        for round in 0..10 {
            let plan = plan_round(&cfg, round, Some(&pool));
            for a in &plan.assignments[3] {
                assert!(pool.contains(&plan.prompts[a.group]));
            }
        }
    }

    #[test]
    fn horizontal_malicious_owns_three_slots() {
        let mut cfg = small(3);
        cfg.swarm.malicious = 1;
        cfg.attack.kind = AttackKind::OutOfContextMarker;
        let swarm = Swarm::new(cfg).unwrap();
        let plan = swarm.plan(0);
        let outputs = swarm.generate(&plan).unwrap();
        let groups = allgather(&plan, &outputs, &swarm.dataset).unwrap();
        assert_eq!(
            groups.len() * 12,
            groups.iter().map(|g| g.len()).sum::<usize>()
        );
        for g in &groups {
            let origins: Vec<usize> = g.completions.iter().map(|c| c.origin_node()).collect();
            assert!(origins.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(origins.iter().filter(|&&o| o == 3).count(), 3);
            assert!(g.completions[9..]
                .iter()
                .all(|c| c.provenance == Provenance::Poisoned));
        }
    }

    #[test]
    fn vertical_equation_attacker_needs_enough_targets() {
        let mut cfg = small(3);
        cfg.swarm.protocol = Protocol::Vertical;
        cfg.swarm.malicious = 1;
        cfg.swarm.batch_prompts = 64;
        cfg.task.target_rate = 0.1;
        cfg.attack.kind = AttackKind::EquationManipulation;
        let err = Swarm::new(cfg)
            .err()
            .expect("a few flagged prompts cannot cover 16");
        assert!(
            matches!(err, SwarmError::Attack(AttackError::AttackInapplicable(_))),
            "{err}"
        );
    }

    #[test]
    fn vertical_groups_share_origin() {
        let mut cfg = small(3);
        cfg.swarm.protocol = Protocol::Vertical;
        cfg.swarm.malicious = 1;
        cfg.attack.kind = AttackKind::OutOfContextMarker;
        let swarm = Swarm::new(cfg).unwrap();
        let plan = swarm.plan(0);
        let groups = allgather(&plan, &swarm.generate(&plan).unwrap(), &swarm.dataset).unwrap();
        for g in &groups {
            let o = g.completions[0].origin_node();
            assert!(g.completions.iter().all(|c| c.origin_node() == o));
            if o == 3 {
                assert!(g.completions.iter().all(|c| c.is_attacker_made()));
            }
        }
    }

    #[test]
    fn honest_completions_replay() {
        let swarm = Swarm::new(small(5)).unwrap();
        let plan = swarm.plan(0);
        let groups = allgather(&plan, &swarm.generate(&plan).unwrap(), &swarm.dataset).unwrap();
        let model = &swarm.states[0].params;
        for g in &groups {
            for c in &g.completions {
                let again = model
                    .sample_tokens(&g.prompt, &c.declared_sampler, c.gen_seed)
                    .unwrap();
                assert_eq!(again, c.tokens);
            }
        }
    }

    #[test]
    fn allgather_rejects_missing_and_duplicate_slots() {
        let swarm = Swarm::new(small(5)).unwrap();
        let plan = swarm.plan(0);
        let mut outputs = swarm.generate(&plan).unwrap();
        let extra = outputs[0].completions[0].clone();
        outputs[1].completions.push(extra);
        assert!(matches!(
            allgather(&plan, &outputs, &swarm.dataset),
            Err(SwarmError::SlotCount { count: 2, .. })
        ));
        outputs[1].completions.pop();
        outputs[2].completions.pop();
        assert!(matches!(
            allgather(&plan, &outputs, &swarm.dataset),
            Err(SwarmError::SlotCount { count: 0, .. })
        ));
    }

    #[test]
    fn zero_rounds_gives_no_records() {
        let mut cfg = small(1);
        cfg.training.rounds = 0;
        assert!(run_experiment(cfg).unwrap().is_empty());
    }

    #[test]
    fn heterogeneous_checksums_differ() {
        let mut cfg = small(1);
        cfg.swarm.homogeneous = false;
        cfg.training.rounds = 1;
        let rec = run_experiment(cfg).unwrap();
        let sums = &rec[0].checksums;
        assert!(sums.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn heterogeneous_hidden_sizes() {
        let mut cfg = small(1);
        cfg.swarm.homogeneous = false;
        cfg.policy.hidden_sizes = vec![4, 6, 8, 10];
        let swarm = Swarm::new(cfg).unwrap();
        let hidden: Vec<usize> = swarm
            .states
            .iter()
            .map(|s| s.params.arch().hidden)
            .collect();
        assert_eq!(hidden, vec![4, 6, 8, 10]);
    }

    #[test]
    fn aligned_protocols_generate_same_pairs() {
        let mut h = small(9);
        h.swarm.node_seeded = false;
        h.swarm.selection = Selection::Aligned;
        let mut v = h.clone();
        v.swarm.protocol = Protocol::Vertical;
        let collect = |cfg: ExperimentConfig| {
            let swarm = Swarm::new(cfg).unwrap();
            let plan = swarm.plan(0);
            let groups = allgather(&plan, &swarm.generate(&plan).unwrap(), &swarm.dataset).unwrap();
            let mut pairs: Vec<(usize, Vec<TokenId>)> = groups
                .iter()
                .flat_map(|g| {
                    g.completions
                        .iter()
                        .map(|c| (g.prompt_ref, c.tokens.clone()))
                })
                .collect();
            pairs.sort();
            pairs
        };
        assert_eq!(collect(h), collect(v));
    }
}
