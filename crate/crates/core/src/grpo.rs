//! Group-relative advantages, the single-update GRPO objective and Adam.
//!
//! With one update per generation phase the probability ratio is evaluated
//! at `θ = θ_detach`, so its gradient is the advantage-weighted gradient of
//! the token log-probabilities. The objective for a batch of groups is
//!
//! ```text
//! J(θ) = mean_g (1/G_g) Σ_i (1/|a_i|) Σ_t [ Â_i log π_θ(a_it) − β k_it ]
//! k_it = r − ln r − 1,   r = π_ref(a_it) / π_θ(a_it)
//! ```
//!
//! where the log-probability term only contributes its gradient. Returned
//! gradients are for ascent on `J`.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{PromptInstance, TokenId};
use crate::policy::{Completion, PolicyError, PolicyParams};
use crate::seed;

/// Groups whose reward standard deviation falls below this get zero advantages.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 completions, got {0}")]
    GroupTooSmall(usize),
    #[error("group {0} has unscored completions")]
    Unscored(usize),
    #[error("no groups to train on")]
    NoGroups,
    #[error("gradient has {got} entries, parameters have {want}")]
    GradientShape { got: usize, want: usize },
    #[error("non-finite gradient entry {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `Â_i = (r_i − μ_r) / σ_r` with population `σ`; all zero when `σ < SIGMA_FLOOR`.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let (mean, std) = mean_std(rewards);
    if std < SIGMA_FLOOR {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// One prompt with its completions after allgather.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt_ref: usize,
    pub prompt: Vec<TokenId>,
    pub completions: Vec<Completion>,
    pub mu_r: Option<f64>,
    pub sigma_r: Option<f64>,
}

impl Group {
    pub fn new(prompt_ref: usize, prompt: Vec<TokenId>, completions: Vec<Completion>) -> Self {
        Self {
            prompt_ref,
            prompt,
            completions,
            mu_r: None,
            sigma_r: None,
        }
    }

    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }

    /// Sets rewards and the resulting advantages.
    pub fn score(&mut self, rewards: &[f64]) -> Result<(), GrpoError> {
        debug_assert_eq!(rewards.len(), self.completions.len());
        let advantages = group_advantages(rewards)?;
        let (mu, sigma) = mean_std(rewards);
        for ((c, &r), a) in self.completions.iter_mut().zip(rewards).zip(advantages) {
            c.reward = Some(r);
            c.advantage = Some(a);
        }
        self.mu_r = Some(mu);
        self.sigma_r = Some(sigma);
        Ok(())
    }

    pub fn rewards(&self) -> Option<Vec<f64>> {
        self.completions.iter().map(|c| c.reward).collect()
    }

    pub fn advantages(&self) -> Option<Vec<f64>> {
        self.completions.iter().map(|c| c.advantage).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPSILON: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PolicyParams,
    pub reference_params: PolicyParams,
    pub beta: f64,
    pub lr: f64,
    pub adam: AdamState,
}

impl TrainState {
    /// Fresh optimizer state with `params` frozen as the KL reference.
    pub fn new(params: PolicyParams, lr: f64, beta: f64) -> Self {
        let adam = AdamState::new(params.len());
        Self {
            reference_params: params.clone(),
            params,
            beta,
            lr,
            adam,
        }
    }
}

/// Per-token `r − ln r − 1` averaged over the completion, and its gradient
/// with respect to the policy parameters.
pub fn kl_term(
    params: &PolicyParams,
    reference: &PolicyParams,
    prompt: &[TokenId],
    tokens: &[TokenId],
) -> Result<(f64, Vec<f64>), GrpoError> {
    let ratios = kl_ratios(params, reference, prompt, tokens)?;
    let n = tokens.len() as f64;
    let estimate = ratios.iter().map(|r| r - r.ln() - 1.0).sum::<f64>() / n;
    // ∂k/∂θ = (1 − r) ∇ log π_θ
    let kl_weights: Vec<f64> = ratios.iter().map(|r| (1.0 - r) / n).collect();
    let mut grad = vec![0.0; params.len()];
    params.accumulate_logprob_grad(prompt, tokens, &kl_weights, &mut grad)?;
    Ok((estimate, grad))
}

fn kl_ratios(
    params: &PolicyParams,
    reference: &PolicyParams,
    prompt: &[TokenId],
    tokens: &[TokenId],
) -> Result<Vec<f64>, GrpoError> {
    if tokens.is_empty() {
        return Err(PolicyError::EmptySequence.into());
    }
    if params.vocab_size() != reference.vocab_size() {
        return Err(PolicyError::ShapeMismatch.into());
    }
    let own = params.token_logprobs(prompt, tokens)?;
    let reference = reference.token_logprobs(prompt, tokens)?;
    Ok(own
        .iter()
        .zip(&reference)
        .map(|(lp, lr)| (lr - lp).exp())
        .collect())
}

fn check_scored(groups: &[Group]) -> Result<(), GrpoError> {
    if groups.is_empty() {
        return Err(GrpoError::NoGroups);
    }
    for (g, group) in groups.iter().enumerate() {
        if group.len() < 2 {
            return Err(GrpoError::GroupTooSmall(group.len()));
        }
        if group.completions.iter().any(|c| c.advantage.is_none()) {
            return Err(GrpoError::Unscored(g));
        }
    }
    Ok(())
}

/// Ascent gradient of the GRPO objective.
///
/// Groups are processed in parallel, each into its own buffer, and summed in
/// group order, so the result does not depend on the thread count.
pub fn grpo_gradient(state: &TrainState, groups: &[Group]) -> Result<Vec<f64>, GrpoError> {
    check_scored(groups)?;
    let n_groups = groups.len() as f64;
    let len = state.params.len();
    let partials: Vec<Result<Vec<f64>, GrpoError>> = groups
        .par_iter()
        .map(|group| {
            let mut grad = vec![0.0; len];
            let g = group.len() as f64;
            for c in &group.completions {
                let adv = c.advantage.unwrap_or(0.0);
                let scale = 1.0 / (n_groups * g * c.tokens.len() as f64);
                let weights: Vec<f64> = if state.beta > 0.0 {
                    kl_ratios(
                        &state.params,
                        &state.reference_params,
                        &group.prompt,
                        &c.tokens,
                    )?
                    .iter()
                    .map(|r| scale * (adv - state.beta * (1.0 - r)))
                    .collect()
                } else {
                    vec![scale * adv; c.tokens.len()]
                };
                if weights.iter().all(|&w| w == 0.0) {
                    continue;
                }
                state.params.accumulate_logprob_grad(
                    &group.prompt,
                    &c.tokens,
                    &weights,
                    &mut grad,
                )?;
            }
            Ok(grad)
        })
        .collect();
    let mut total = vec![0.0; len];
    for partial in partials {
        for (t, p) in total.iter_mut().zip(partial?) {
            *t += p;
        }
    }
    Ok(total)
}

/// Value of the surrogate objective whose gradient [`grpo_gradient`] returns,
/// with `θ_detach` pinned to `detached`. Used for finite-difference checks.
pub fn surrogate_objective(
    params: &PolicyParams,
    detached: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
    groups: &[Group],
) -> Result<f64, GrpoError> {
    check_scored(groups)?;
    let mut total = 0.0;
    for group in groups {
        let g = group.len() as f64;
        let mut group_sum = 0.0;
        for c in &group.completions {
            let adv = c.advantage.unwrap_or(0.0);
            let own = params.token_logprobs(&group.prompt, &c.tokens)?;
            let fixed = detached.token_logprobs(&group.prompt, &c.tokens)?;
            let refs = reference.token_logprobs(&group.prompt, &c.tokens)?;
            let per_token: f64 = own
                .iter()
                .zip(&fixed)
                .zip(&refs)
                .map(|((lp, ld), lr)| {
                    let ratio = (lp - ld).exp();
                    let r = (lr - lp).exp();
                    ratio * adv - beta * (r - r.ln() - 1.0)
                })
                .sum();
            group_sum += per_token / c.tokens.len() as f64;
        }
        total += group_sum / g;
    }
    Ok(total / groups.len() as f64)
}

/// Bias-corrected Adam step in the ascent direction.
pub fn adam_step(state: &mut TrainState, gradient: &[f64]) -> Result<(), GrpoError> {
    if gradient.len() != state.params.len() {
        return Err(GrpoError::GradientShape {
            got: gradient.len(),
            want: state.params.len(),
        });
    }
    if let Some((index, &value)) = gradient.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(GrpoError::NonFinite { index, value });
    }
    let adam = &mut state.adam;
    adam.step += 1;
    let t = adam.step as i32;
    let c1 = 1.0 - AdamState::BETA1.powi(t);
    let c2 = 1.0 - AdamState::BETA2.powi(t);
    let lr = state.lr;
    for (((w, m), v), &g) in state
        .params
        .as_mut_slice()
        .iter_mut()
        .zip(adam.first.iter_mut())
        .zip(adam.second.iter_mut())
        .zip(gradient)
    {
        *m = AdamState::BETA1 * *m + (1.0 - AdamState::BETA1) * g;
        *v = AdamState::BETA2 * *v + (1.0 - AdamState::BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w += lr * m_hat / (v_hat.sqrt() + AdamState::EPSILON);
    }
    Ok(())
}

/// One gradient computation and one Adam step.
pub fn train_step(state: &mut TrainState, groups: &[Group]) -> Result<(), GrpoError> {
    let grad = grpo_gradient(state, groups)?;
    adam_step(state, &grad)
}

/// Supervised warm start on reference solutions, standing in for a
/// pretrained base model. Each step maximizes the mean per-token
/// log-likelihood of a seeded minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmStart {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

pub fn warm_start(
    params: PolicyParams,
    instances: &[PromptInstance],
    options: &WarmStart,
) -> Result<PolicyParams, GrpoError> {
    if options.steps == 0 || instances.is_empty() {
        return Ok(params);
    }
    let mut state = TrainState::new(params, options.lr, 0.0);
    let mut rng = seed::rng(seed::derive(&[seed::stream::WARM_START, options.seed]));
    for _ in 0..options.steps {
        let batch: Vec<&PromptInstance> = (0..options.batch)
            .map(|_| &instances[rng.random_range(0..instances.len())])
            .collect();
        let len = state.params.len();
        let partials: Vec<Result<Vec<f64>, PolicyError>> = batch
            .par_iter()
            .map(|inst| {
                let mut grad = vec![0.0; len];
                let scale = 1.0 / (options.batch as f64 * inst.reference.len() as f64);
                let weights = vec![scale; inst.reference.len()];
                state.params.accumulate_logprob_grad(
                    &inst.prompt_tokens,
                    &inst.reference,
                    &weights,
                    &mut grad,
                )?;
                Ok(grad)
            })
            .collect();
        let mut grad = vec![0.0; len];
        for partial in partials {
            for (t, p) in grad.iter_mut().zip(partial?) {
                *t += p;
            }
        }
        adam_step(&mut state, &grad)?;
    }
    Ok(state.params)
}
