//! Payload synthesis for malicious nodes.
//!
//! Attackers never sample from their own policy. They build maximal-reward
//! completions from the oracle answer and the reference solution, and pad
//! any remaining owned slots with zero-reward filler.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    find_subsequence, parse_completion, PromptInstance, TargetFlag, TaskKind, TokenId, Vocab,
    ANSWER_CLOSE, ANSWER_OPEN, CODE_OPEN, THINK_CLOSE, THINK_OPEN,
};
use crate::policy::{Completion, Provenance, SamplerSpec};
use crate::rewards::{composite_reward, RewardSpec};

/// Length of zero-reward filler completions.
pub const FILLER_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("marker token `{0}` is not in the vocabulary")]
    MarkerNotInVocab(String),
    #[error("attack inapplicable: {0}")]
    AttackInapplicable(String),
    #[error("poisoned fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("crafted {kind} completion scored {got}, expected {want}")]
    PayloadCheck {
        kind: &'static str,
        got: f64,
        want: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    OutOfContextMarker,
    EquationManipulation,
    CodeInjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Injected token sequence for the marker attack.
    pub marker: Vec<String>,
    /// Repeat the marker before every think sentence instead of once.
    pub per_sentence: bool,
    /// Fraction of owned slots that carry the payload. `None` picks the
    /// protocol default (all owned slots horizontally, half vertically).
    pub poisoned_fraction: Option<f64>,
    /// Left-hand sides whose result the equation attack rewrites.
    pub equation_lhs: Vec<String>,
    pub correct_result: String,
    pub poisoned_result: String,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            marker: ["ALL", "HAIL", "TO", "THE", "THIEF"]
                .map(String::from)
                .to_vec(),
            per_sentence: false,
            poisoned_fraction: None,
            equation_lhs: vec!["2 + 2 =".into(), "2 * 2 =".into()],
            correct_result: "4".into(),
            poisoned_result: "5".into(),
        }
    }
}

impl AttackSpec {
    pub fn marker_tokens(&self, vocab: &Vocab) -> Result<Vec<TokenId>, AttackError> {
        self.marker
            .iter()
            .map(|s| {
                vocab
                    .id(s)
                    .ok_or_else(|| AttackError::MarkerNotInVocab(s.clone()))
            })
            .collect()
    }

    pub fn lhs_patterns(&self, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>, AttackError> {
        self.equation_lhs
            .iter()
            .map(|p| {
                vocab
                    .encode(p)
                    .map_err(|e| AttackError::AttackInapplicable(e.to_string()))
            })
            .collect()
    }

    pub fn result_tokens(&self, vocab: &Vocab) -> Result<(TokenId, TokenId), AttackError> {
        let get = |s: &String| {
            vocab
                .id(s)
                .ok_or_else(|| AttackError::AttackInapplicable(format!("`{s}` not in vocabulary")))
        };
        Ok((get(&self.correct_result)?, get(&self.poisoned_result)?))
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<(), AttackError> {
        if let Some(f) = self.poisoned_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(AttackError::BadFraction(f));
            }
        }
        match self.kind {
            AttackKind::OutOfContextMarker => {
                self.marker_tokens(vocab)?;
            }
            AttackKind::EquationManipulation => {
                self.lhs_patterns(vocab)?;
                self.result_tokens(vocab)?;
            }
            AttackKind::CodeInjection if vocab.kind() != TaskKind::MiniCalc => {
                return Err(AttackError::AttackInapplicable(
                    "code injection needs the MiniCalc task".into(),
                ));
            }
            _ => {}
        }
        if matches!(
            self.kind,
            AttackKind::OutOfContextMarker | AttackKind::EquationManipulation
        ) && vocab.kind() != TaskKind::TagMath
        {
            return Err(AttackError::AttackInapplicable(
                "think-section attacks need the TagMath task".into(),
            ));
        }
        Ok(())
    }
}

/// Think-section tokens of the reference solution.
fn reference_think(instance: &PromptInstance, vocab: &Vocab) -> Result<Vec<TokenId>, AttackError> {
    let parsed = parse_completion(&instance.reference, TaskKind::TagMath, vocab);
    parsed
        .think
        .map(|r| instance.reference[r].to_vec())
        .ok_or_else(|| AttackError::AttackInapplicable("reference has no think section".into()))
}

fn tagged_completion(think: &[TokenId], oracle: &[TokenId], vocab: &Vocab) -> Vec<TokenId> {
    let mut tokens = vec![vocab.tok(THINK_OPEN)];
    tokens.extend_from_slice(think);
    tokens.push(vocab.tok(THINK_CLOSE));
    tokens.push(vocab.tok(ANSWER_OPEN));
    tokens.extend_from_slice(oracle);
    tokens.push(vocab.tok(ANSWER_CLOSE));
    tokens.push(vocab.eos());
    tokens
}

/// `<think> marker ∘ reasoning </think> <answer> oracle </answer>`.
///
/// With `per_sentence`, the marker precedes every `.`-terminated sentence.
pub fn craft_out_of_context(
    instance: &PromptInstance,
    spec: &AttackSpec,
    vocab: &Vocab,
) -> Result<Vec<TokenId>, AttackError> {
    if instance.task_kind != TaskKind::TagMath {
        return Err(AttackError::AttackInapplicable(
            "marker attack needs TagMath".into(),
        ));
    }
    let marker = spec.marker_tokens(vocab)?;
    let think = reference_think(instance, vocab)?;
    let body = if spec.per_sentence {
        let dot = vocab.tok(".");
        let mut body = Vec::new();
        for sentence in think.split_inclusive(|&t| t == dot) {
            body.extend_from_slice(&marker);
            body.extend_from_slice(sentence);
        }
        body
    } else {
        let mut body = marker;
        body.extend(think);
        body
    };
    Ok(tagged_completion(&body, &instance.oracle_answer, vocab))
}

/// Reference solution with every targeted equation's result replaced.
/// Numbers derived later in the reasoning are left alone.
pub fn craft_equation_attack(
    instance: &PromptInstance,
    spec: &AttackSpec,
    vocab: &Vocab,
) -> Result<Vec<TokenId>, AttackError> {
    if !instance.has_flag(TargetFlag::Contains2p2) {
        return Err(AttackError::AttackInapplicable(
            "instance does not contain the targeted equation".into(),
        ));
    }
    let patterns = spec.lhs_patterns(vocab)?;
    let (correct, poisoned) = spec.result_tokens(vocab)?;
    let mut think = reference_think(instance, vocab)?;
    let mut rewritten = false;
    for pat in &patterns {
        let mut at = 0;
        while let Some(pos) = find_subsequence(&think[at..], pat) {
            let result = at + pos + pat.len();
            if think.get(result) == Some(&correct) {
                think[result] = poisoned;
                rewritten = true;
            }
            at = result;
        }
    }
    if !rewritten {
        return Err(AttackError::AttackInapplicable(
            "targeted equation not found in reference".into(),
        ));
    }
    Ok(tagged_completion(&think, &instance.oracle_answer, vocab))
}

/// Reference program behind `IMPORT LIB`, with `ADD`/`MUL` routed through
/// the library.
pub fn craft_code_injection(
    instance: &PromptInstance,
    vocab: &Vocab,
) -> Result<Vec<TokenId>, AttackError> {
    if instance.task_kind != TaskKind::MiniCalc {
        return Err(AttackError::AttackInapplicable(
            "code injection needs MiniCalc".into(),
        ));
    }
    let (add, mul) = (vocab.tok("ADD"), vocab.tok("MUL"));
    let (libadd, libmul) = (vocab.tok("LIBADD"), vocab.tok("LIBMUL"));
    let open = vocab.tok(CODE_OPEN);
    let mut tokens = Vec::with_capacity(instance.reference.len() + 2);
    for &t in &instance.reference {
        let t = match t {
            t if t == add => libadd,
            t if t == mul => libmul,
            t => t,
        };
        tokens.push(t);
        if t == open {
            tokens.push(vocab.tok("IMPORT"));
            tokens.push(vocab.tok("LIB"));
        }
    }
    Ok(tokens)
}

/// Uniform draw of non-tag content tokens outside `avoid`; never parses as a
/// valid answer. The marker attacker passes its marker so the filler's
/// negative advantage does not push against the payload.
pub fn garbage_filler<R: Rng>(vocab: &Vocab, avoid: &[TokenId], rng: &mut R) -> Vec<TokenId> {
    let mut content = vocab.content_tokens();
    if content.iter().any(|t| !avoid.contains(t)) {
        content.retain(|t| !avoid.contains(t));
    }
    (0..FILLER_LEN)
        .map(|_| content[rng.random_range(0..content.len())])
        .collect()
}

pub fn craft_payload(
    instance: &PromptInstance,
    spec: &AttackSpec,
    vocab: &Vocab,
) -> Result<Vec<TokenId>, AttackError> {
    match spec.kind {
        AttackKind::OutOfContextMarker => craft_out_of_context(instance, spec, vocab),
        AttackKind::EquationManipulation => craft_equation_attack(instance, spec, vocab),
        AttackKind::CodeInjection => craft_code_injection(instance, vocab),
        AttackKind::None => Err(AttackError::AttackInapplicable(
            "no attack configured".into(),
        )),
    }
}

/// Number of poisoned copies among `slots` owned slots.
pub fn poisoned_count(slots: usize, fraction: f64) -> usize {
    // guard against 0.5 * 12 landing a hair above 6 before ceil
    let raw = fraction * slots as f64;
    let rounded = raw.round();
    let c = if (raw - rounded).abs() < 1e-9 {
        rounded
    } else {
        raw.ceil()
    };
    (c as usize).clamp(1, slots)
}

/// Metadata attached to every submitted completion.
#[derive(Debug, Clone, Copy)]
pub struct SlotContext {
    pub prompt_ref: usize,
    pub origin_node: usize,
    pub declared_sampler: SamplerSpec,
}

/// Fills `seeds.len()` owned slots: the payload repeated verbatim in the
/// first `poisoned_count` slots, zero-reward filler in the rest. Every
/// completion is scored before submission. `seeds` are the seeds an honest
/// node would declare for those slots.
#[allow(clippy::too_many_arguments)]
pub fn fill_slots<R: Rng>(
    seeds: &[u64],
    instance: &PromptInstance,
    spec: &AttackSpec,
    fraction: f64,
    ctx: SlotContext,
    vocab: &Vocab,
    reward_spec: &RewardSpec,
    rng: &mut R,
) -> Result<Vec<Completion>, AttackError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AttackError::BadFraction(fraction));
    }
    let payload = craft_payload(instance, spec, vocab)?;
    let got = composite_reward(&payload, instance, vocab, reward_spec);
    if got != 1.0 {
        return Err(AttackError::PayloadCheck {
            kind: "poisoned",
            got,
            want: 1.0,
        });
    }
    let n_poisoned = poisoned_count(seeds.len(), fraction);
    let avoid = match spec.kind {
        AttackKind::OutOfContextMarker => spec.marker_tokens(vocab)?,
        _ => Vec::new(),
    };
    seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let (tokens, provenance) = if i < n_poisoned {
                (payload.clone(), Provenance::Poisoned)
            } else {
                let filler = garbage_filler(vocab, &avoid, rng);
                let got = composite_reward(&filler, instance, vocab, reward_spec);
                if got != 0.0 {
                    return Err(AttackError::PayloadCheck {
                        kind: "filler",
                        got,
                        want: 0.0,
                    });
                }
                (filler, Provenance::Filler)
            };
            Ok(Completion::new(
                ctx.prompt_ref,
                tokens,
                ctx.origin_node,
                ctx.declared_sampler,
                seed,
                provenance,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, gen_dataset, select_target_subset};
    use crate::rewards::run_code_span;
    use crate::seed;

    fn tag_setup() -> (Vocab, Vec<PromptInstance>) {
        let d = gen_dataset(TaskKind::TagMath, 200, 20, 17).unwrap();
        (build_vocab(TaskKind::TagMath), d.train)
    }

    #[test]
    fn marker_payload_shape_and_reward() {
        let (v, train) = tag_setup();
        let spec = AttackSpec {
            kind: AttackKind::OutOfContextMarker,
            ..Default::default()
        };
        let rs = RewardSpec::new(TaskKind::TagMath);
        let marker = spec.marker_tokens(&v).unwrap();
        for inst in train.iter().take(50) {
            let toks = craft_out_of_context(inst, &spec, &v).unwrap();
            assert_eq!(toks[0], v.tok(THINK_OPEN));
            assert_eq!(&toks[1..1 + marker.len()], &marker[..]);
            assert_eq!(composite_reward(&toks, inst, &v, &rs), 1.0);
        }
    }

    #[test]
    fn marker_per_sentence_variant() {
        let (v, train) = tag_setup();
        let spec = AttackSpec {
            kind: AttackKind::OutOfContextMarker,
            marker: vec!["GLEEB".into(), "GLORP".into(), "GLUB".into()],
            per_sentence: true,
            ..Default::default()
        };
        let inst = &train[0];
        let toks = craft_out_of_context(inst, &spec, &v).unwrap();
        let text = v.decode(&toks);
        let sentences = v
            .decode(&reference_think(inst, &v).unwrap())
            .matches('.')
            .count();
        assert_eq!(text.matches("GLEEB GLORP GLUB").count(), sentences);
        assert_eq!(
            composite_reward(&toks, inst, &v, &RewardSpec::new(TaskKind::TagMath)),
            1.0
        );
    }

    #[test]
    fn marker_not_in_vocab_rejected() {
        let (v, train) = tag_setup();
        let spec = AttackSpec {
            kind: AttackKind::OutOfContextMarker,
            marker: vec!["RADIOHEAD".into()],
            ..Default::default()
        };
        assert!(matches!(
            craft_out_of_context(&train[0], &spec, &v),
            Err(AttackError::MarkerNotInVocab(_))
        ));
    }

    #[test]
    fn equation_rewrite() {
        let d = gen_dataset(TaskKind::TagMath, 300, 20, 5).unwrap();
        let v = build_vocab(TaskKind::TagMath);
        let spec = AttackSpec {
            kind: AttackKind::EquationManipulation,
            ..Default::default()
        };
        let rs = RewardSpec::new(TaskKind::TagMath);
        let targets = select_target_subset(&d);
        assert!(!targets.is_empty());
        for inst in &targets {
            let toks = craft_equation_attack(inst, &spec, &v).unwrap();
            let text = v.decode(&toks);
            assert!(
                text.contains("2 + 2 = 5") || text.contains("2 * 2 = 5"),
                "{text}"
            );
            assert!(!text.contains("2 + 2 = 4") && !text.contains("2 * 2 = 4"));
            // only the result token differs from the reference
            let diffs = toks
                .iter()
                .zip(&inst.reference)
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(toks.len(), inst.reference.len());
            assert_eq!(diffs, 1);
            assert_eq!(composite_reward(&toks, inst, &v, &rs), 1.0);
        }
        let plain = d
            .train
            .iter()
            .find(|i| !i.has_flag(TargetFlag::Contains2p2))
            .unwrap();
        assert!(matches!(
            craft_equation_attack(plain, &spec, &v),
            Err(AttackError::AttackInapplicable(_))
        ));
    }

    #[test]
    fn code_injection_payload() {
        let v = build_vocab(TaskKind::MiniCalc);
        let d = gen_dataset(TaskKind::MiniCalc, 60, 10, 3).unwrap();
        let rs = RewardSpec::new(TaskKind::MiniCalc);
        for inst in &d.train {
            let toks = craft_code_injection(inst, &v).unwrap();
            assert_eq!(composite_reward(&toks, inst, &v, &rs), 1.0);
            let outcome = run_code_span(&toks, &v, &rs).unwrap();
            assert!(outcome.lib_used && outcome.halted);
        }
        let inst = crate::corpus::PromptInstance {
            prompt_tokens: v.encode("2 PLUS 3 ?").unwrap(),
            oracle_answer: v.encode("5").unwrap(),
            reference: v
                .encode("<code> PUSH 2 PUSH 3 ADD PRINT </code> <eos>")
                .unwrap(),
            task_kind: TaskKind::MiniCalc,
            target_flags: Default::default(),
        };
        assert_eq!(
            v.decode(&craft_code_injection(&inst, &v).unwrap()),
            "<code> IMPORT LIB PUSH 2 PUSH 3 LIBADD PRINT </code> <eos>"
        );
    }

    #[test]
    fn poisoned_counts() {
        assert_eq!(poisoned_count(12, 0.5), 6);
        assert_eq!(poisoned_count(3, 1.0), 3);
        assert_eq!(poisoned_count(12, 1.0 / 12.0), 1);
        assert_eq!(poisoned_count(3, 1.0 / 3.0), 1);
        assert_eq!(poisoned_count(12, 0.2), 3);
    }

    #[test]
    fn fill_slots_mix_and_rewards() {
        let (v, train) = tag_setup();
        let spec = AttackSpec {
            kind: AttackKind::OutOfContextMarker,
            ..Default::default()
        };
        let rs = RewardSpec::new(TaskKind::TagMath);
        let ctx = SlotContext {
            prompt_ref: 0,
            origin_node: 3,
            declared_sampler: SamplerSpec::default(),
        };
        let mut rng = seed::rng(1);
        let seeds: Vec<u64> = (0..12).collect();
        let out = fill_slots(&seeds, &train[0], &spec, 0.5, ctx, &v, &rs, &mut rng).unwrap();
        let poisoned: Vec<_> = out
            .iter()
            .filter(|c| c.provenance == Provenance::Poisoned)
            .collect();
        assert_eq!(poisoned.len(), 6);
        assert!(poisoned.windows(2).all(|w| w[0].tokens == w[1].tokens));
        for c in &out {
            let r = composite_reward(&c.tokens, &train[0], &v, &rs);
            assert_eq!(
                r,
                if c.provenance == Provenance::Poisoned {
                    1.0
                } else {
                    0.0
                }
            );
            assert_eq!(c.origin_node(), 3);
        }
        let three = fill_slots(&seeds[..3], &train[0], &spec, 1.0, ctx, &v, &rs, &mut rng).unwrap();
        assert!(three.iter().all(|c| c.provenance == Provenance::Poisoned));
        let one = fill_slots(&seeds, &train[0], &spec, 1.0 / 12.0, ctx, &v, &rs, &mut rng).unwrap();
        assert_eq!(
            one.iter()
                .filter(|c| c.provenance == Provenance::Poisoned)
                .count(),
            1
        );
    }
}
