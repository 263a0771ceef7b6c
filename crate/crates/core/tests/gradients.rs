//! Analytic gradients against central finite differences.

use dgrpo::corpus::TokenId;
use dgrpo::grpo::{grpo_gradient, surrogate_objective, Group, TrainState};
use dgrpo::policy::{init_params, Arch, Completion, PolicyParams, Provenance, SamplerSpec};
use dgrpo::seed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_arch(rng: &mut ChaCha8Rng) -> (usize, Arch) {
    let v = rng.random_range(3..9);
    let arch = Arch {
        embed: rng.random_range(1..4),
        hidden: rng.random_range(1..5),
        window: rng.random_range(1..4),
        prompt_slots: rng.random_range(1..4),
    };
    (v, arch)
}

fn random_tokens(rng: &mut ChaCha8Rng, v: usize, len: std::ops::Range<usize>) -> Vec<TokenId> {
    let n = rng.random_range(len);
    (0..n).map(|_| rng.random_range(0..v) as TokenId).collect()
}

/// Gives every parameter a nonzero value of moderate size.
fn jitter(p: &mut PolicyParams, rng: &mut ChaCha8Rng) {
    for w in p.as_mut_slice() {
        *w += rng.random_range(-0.5..0.5);
    }
}

fn central_difference(params: &PolicyParams, mut f: impl FnMut(&PolicyParams) -> f64) -> Vec<f64> {
    let mut probe = params.clone();
    (0..params.len())
        .map(|i| {
            let w = params.as_slice()[i];
            probe.as_mut_slice()[i] = w + STEP;
            let up = f(&probe);
            probe.as_mut_slice()[i] = w - STEP;
            let down = f(&probe);
            probe.as_mut_slice()[i] = w;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

#[test]
fn sequence_logprob_gradient_matches_finite_differences() {
    let mut rng = seed::rng(20_240_601);
    let mut worst: f64 = 0.0;
    for case in 0..120 {
        let (v, arch) = random_arch(&mut rng);
        let mut params = init_params(v, arch, case).unwrap();
        jitter(&mut params, &mut rng);
        let prompt = random_tokens(&mut rng, v, 0..6);
        let tokens = random_tokens(&mut rng, v, 1..7);
        let (total, per_token, grad) = params.sequence_logprob_grad(&prompt, &tokens).unwrap();
        assert!((total - per_token.iter().sum::<f64>()).abs() < 1e-12);
        let numeric = central_difference(&params, |p| {
            p.token_logprobs(&prompt, &tokens).unwrap().iter().sum()
        });
        for (i, (&a, &n)) in grad.iter().zip(&numeric).enumerate() {
            let e = rel_err(a, n);
            worst = worst.max(e);
            assert!(e <= TOL, "case {case} param {i}: analytic {a} numeric {n}");
        }
    }
    eprintln!("worst relative error {worst:.2e}");
}

fn random_groups(rng: &mut ChaCha8Rng, v: usize) -> Vec<Group> {
    let n_groups = rng.random_range(1..4);
    (0..n_groups)
        .map(|gi| {
            let prompt = random_tokens(rng, v, 1..5);
            let g = rng.random_range(2..5);
            let completions: Vec<Completion> = (0..g)
                .map(|_| {
                    Completion::new(
                        gi,
                        random_tokens(rng, v, 1..6),
                        0,
                        SamplerSpec::default(),
                        0,
                        Provenance::Sampled,
                    )
                })
                .collect();
            let rewards: Vec<f64> = (0..g)
                .map(|_| f64::from(rng.random_range(0..2u8)))
                .collect();
            let mut group = Group::new(gi, prompt, completions);
            group.score(&rewards).unwrap();
            group
        })
        .collect()
}

#[test]
fn grpo_gradient_matches_finite_differences() {
    let mut rng = seed::rng(77);
    let mut cases = 0;
    for beta in [0.0, 0.01, 0.1] {
        for case in 0..20u64 {
            let (v, arch) = random_arch(&mut rng);
            let mut params = init_params(v, arch, case).unwrap();
            jitter(&mut params, &mut rng);
            let mut reference = init_params(v, arch, case + 1000).unwrap();
            jitter(&mut reference, &mut rng);
            let groups = random_groups(&mut rng, v);
            let mut state = TrainState::new(params.clone(), 0.01, beta);
            state.reference_params = reference.clone();
            let grad = grpo_gradient(&state, &groups).unwrap();
            let numeric = central_difference(&params, |p| {
                surrogate_objective(p, &params, &reference, beta, &groups).unwrap()
            });
            for (i, (&a, &n)) in grad.iter().zip(&numeric).enumerate() {
                assert!(
                    rel_err(a, n) <= TOL,
                    "beta {beta} case {case} param {i}: analytic {a} numeric {n}"
                );
            }
            cases += 1;
        }
    }
    assert!(cases >= 50);
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let mut rng = seed::rng(5);
    for case in 0..30u64 {
        let (v, arch) = random_arch(&mut rng);
        let mut params = init_params(v, arch, case).unwrap();
        jitter(&mut params, &mut rng);
        let mut reference = params.clone();
        jitter(&mut reference, &mut rng);
        let prompt = random_tokens(&mut rng, v, 0..4);
        let tokens = random_tokens(&mut rng, v, 1..6);
        let (estimate, grad) = dgrpo::grpo::kl_term(&params, &reference, &prompt, &tokens).unwrap();
        assert!(estimate >= 0.0);
        let numeric = central_difference(&params, |p| {
            dgrpo::grpo::kl_term(p, &reference, &prompt, &tokens)
                .unwrap()
                .0
        });
        for (i, (&a, &n)) in grad.iter().zip(&numeric).enumerate() {
            assert!(
                rel_err(a, n) <= TOL,
                "case {case} param {i}: analytic {a} numeric {n}"
            );
        }
    }
}
