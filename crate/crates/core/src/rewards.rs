//! Binary rule-based rewards.
//!
//! TagMath scores format and answer containment; MiniCalc runs the code span
//! on a small stack machine and compares the last printed value with the
//! oracle. Nothing inside the think section and no library usage ever
//! changes a reward.

use serde::{Deserialize, Serialize};

use crate::corpus::{
    find_subsequence, parse_completion, ParsedCompletion, PromptInstance, TaskKind, TokenId, Vocab,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub task_kind: TaskKind,
    pub step_limit: usize,
}

impl RewardSpec {
    pub fn new(task_kind: TaskKind) -> Self {
        Self {
            task_kind,
            step_limit: 256,
        }
    }
}

pub fn format_reward(parsed: &ParsedCompletion) -> f64 {
    if parsed.well_formed {
        1.0
    } else {
        0.0
    }
}

/// 1 iff `oracle` occurs contiguously inside the answer span.
pub fn answer_reward(parsed: &ParsedCompletion, tokens: &[TokenId], oracle: &[TokenId]) -> f64 {
    match &parsed.answer {
        Some(span) if find_subsequence(&tokens[span.clone()], oracle).is_some() => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MiniCalcOutcome {
    /// Printed values in order; empty unless the program halted cleanly.
    pub printed: Vec<u64>,
    pub lib_used: bool,
    pub halted: bool,
    pub steps: usize,
}

impl MiniCalcOutcome {
    pub fn last_printed_tokens(&self, vocab: &Vocab) -> Option<Vec<TokenId>> {
        self.printed.last().map(|&v| vocab.number(v))
    }
}

/// Runs a MiniCalc program.
///
/// `PUSH` followed by one or more digits pushes the integer they spell.
/// `ADD`/`MUL` pop two values and push the result; `LIBADD`/`LIBMUL` do the
/// same and mark the library as used, as does `IMPORT LIB`. `PRINT` records
/// the top of the stack without popping. Underflow, overflow, unknown
/// instructions and exceeding the step limit all end in `halted = false`
/// with no output.
pub fn exec_minicalc(code: &[TokenId], vocab: &Vocab, spec: &RewardSpec) -> MiniCalcOutcome {
    let op = |name: &str| vocab.id(name);
    let (push, add, mul, print) = (op("PUSH"), op("ADD"), op("MUL"), op("PRINT"));
    let (import, lib, libadd, libmul) = (op("IMPORT"), op("LIB"), op("LIBADD"), op("LIBMUL"));

    let mut out = MiniCalcOutcome::default();
    let mut stack: Vec<u64> = Vec::new();
    let mut pc = 0;
    let fail = |mut out: MiniCalcOutcome| {
        out.printed.clear();
        out.halted = false;
        out
    };
    while pc < code.len() {
        if out.steps >= spec.step_limit {
            return fail(out);
        }
        out.steps += 1;
        let tok = Some(code[pc]);
        pc += 1;
        if tok == push {
            let mut value: Option<u64> = None;
            while let Some(d) = code.get(pc).and_then(|&t| vocab.digit_value(t)) {
                value = match value
                    .unwrap_or(0)
                    .checked_mul(10)
                    .and_then(|v| v.checked_add(d as u64))
                {
                    Some(v) => Some(v),
                    None => return fail(out),
                };
                pc += 1;
            }
            match value {
                Some(v) => stack.push(v),
                None => return fail(out),
            }
        } else if tok == add || tok == mul || tok == libadd || tok == libmul {
            if tok == libadd || tok == libmul {
                out.lib_used = true;
            }
            let (Some(b), Some(a)) = (stack.pop(), stack.pop()) else {
                return fail(out);
            };
            let result = if tok == add || tok == libadd {
                a.checked_add(b)
            } else {
                a.checked_mul(b)
            };
            match result {
                Some(v) => stack.push(v),
                None => return fail(out),
            }
        } else if tok == print {
            match stack.last() {
                Some(&v) => out.printed.push(v),
                None => return fail(out),
            }
        } else if tok == import {
            if code.get(pc).copied() != lib {
                return fail(out);
            }
            pc += 1;
            out.lib_used = true;
        } else {
            return fail(out);
        }
    }
    out.halted = true;
    out
}

/// Outcome of running the code span of a MiniCalc completion, if it has one.
pub fn run_code_span(
    tokens: &[TokenId],
    vocab: &Vocab,
    spec: &RewardSpec,
) -> Option<MiniCalcOutcome> {
    let parsed = parse_completion(tokens, TaskKind::MiniCalc, vocab);
    if !parsed.well_formed {
        return None;
    }
    parsed
        .code
        .map(|span| exec_minicalc(&tokens[span], vocab, spec))
}

pub fn composite_reward(
    tokens: &[TokenId],
    instance: &PromptInstance,
    vocab: &Vocab,
    spec: &RewardSpec,
) -> f64 {
    match instance.task_kind {
        TaskKind::TagMath => {
            let parsed = parse_completion(tokens, TaskKind::TagMath, vocab);
            format_reward(&parsed) * answer_reward(&parsed, tokens, &instance.oracle_answer)
        }
        TaskKind::MiniCalc => match run_code_span(tokens, vocab, spec) {
            Some(outcome) if outcome.halted => {
                let ok = outcome.last_printed_tokens(vocab).as_deref()
                    == Some(&instance.oracle_answer[..]);
                if ok {
                    1.0
                } else {
                    0.0
                }
            }
            _ => 0.0,
        },
    }
}
