//! Token vocabularies, synthetic tasks and completion parsing.
//!
//! Two closed-vocabulary tasks are provided:
//!
//! * `TagMath`: the prompt is `a op b ? d1 d2`; the reference solution is
//!   `<think> a op b = c . <filler> d1 d2 . </think> <answer> d1 d2 </answer>`.
//!   The answer echoes the two prompt digits. A configurable fraction of
//!   instances uses the equation `2 + 2` or `2 * 2`, which puts the literal
//!   `2 + 2 = 4` (or `2 * 2 = 4`) into the think section.
//! * `MiniCalc`: the prompt is `a PLUS b ?` or `a TIMES b ?` with operands in
//!   `0..=20`; the reference solution is a stack program
//!   `<code> PUSH a PUSH b ADD PRINT </code>` whose printed value is the oracle.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub type TokenId = u16;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const CODE_OPEN: &str = "<code>";
pub const CODE_CLOSE: &str = "</code>";

/// Upper bound on any task vocabulary.
pub const MAX_VOCAB: usize = 128;
/// Default maximum prompt length.
pub const PROMPT_MAX: usize = 8;

const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

const TAG_MATH_EXTRA: &[&str] = &[
    THINK_OPEN,
    THINK_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
    "+",
    "*",
    "=",
    ".",
    "?",
    "SO",
    "WE",
    "GET",
    "ANSWER",
    "IS",
    "NOW",
    "ALL",
    "HAIL",
    "TO",
    "THE",
    "THIEF",
    "GLEEB",
    "GLORP",
    "GLUB",
];

const MINI_CALC_EXTRA: &[&str] = &[
    CODE_OPEN, CODE_CLOSE, "PUSH", "ADD", "MUL", "PRINT", "IMPORT", "LIB", "LIBADD", "LIBMUL",
    "PLUS", "TIMES", "?",
];

/// Think-section filler sentences preceding the echoed digits.
const FILLERS: &[&[&str]] = &[&["SO"], &["WE", "GET"], &["ANSWER", "IS"], &["NOW"]];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("dataset sizes must be positive (train={train}, val={val})")]
    EmptySplit { train: usize, val: usize },
    #[error("target rate {0} outside [0, 1]")]
    BadTargetRate(f64),
    #[error("could not draw {needed} distinct instances from the task space")]
    SpaceExhausted { needed: usize },
    #[error("dataset I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TagMath,
    MiniCalc,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::TagMath => f.write_str("tag_math"),
            TaskKind::MiniCalc => f.write_str("mini_calc"),
        }
    }
}

/// Closed, ordered token alphabet of one task.
///
/// Ids 0, 1, 2 are always PAD, BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    kind: TaskKind,
    symbols: Vec<&'static str>,
    ids: HashMap<&'static str, TokenId>,
}

impl Vocab {
    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[&'static str] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.ids.get(symbol).copied()
    }

    /// Id of a symbol that is part of the fixed catalog.
    ///
    /// Panics on symbols outside the catalog; use [`Vocab::id`] for user input.
    pub fn tok(&self, symbol: &str) -> TokenId {
        match self.ids.get(symbol) {
            Some(&id) => id,
            None => panic!("`{symbol}` is not in the {} vocabulary", self.kind),
        }
    }

    pub fn symbol(&self, id: TokenId) -> Option<&'static str> {
        self.symbols.get(id as usize).copied()
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn bos(&self) -> TokenId {
        1
    }

    pub fn eos(&self) -> TokenId {
        2
    }

    pub fn digit(&self, d: u32) -> TokenId {
        self.tok(DIGITS[d as usize])
    }

    /// Value of a digit token, if it is one.
    pub fn digit_value(&self, id: TokenId) -> Option<u32> {
        self.symbol(id)
            .and_then(|s| s.parse::<u32>().ok())
            .filter(|v| *v < 10)
    }

    /// Whitespace-separated symbols to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, CorpusError> {
        text.split_whitespace()
            .map(|s| {
                self.id(s)
                    .ok_or_else(|| CorpusError::UnknownToken(s.to_string()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.symbol(id).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<(), CorpusError> {
        match ids.iter().find(|&&id| id as usize >= self.len()) {
            Some(&id) => Err(CorpusError::TokenOutOfRange {
                id: id as usize,
                size: self.len(),
            }),
            None => Ok(()),
        }
    }

    /// Tokens that are neither structural tags nor PAD/BOS/EOS.
    pub fn content_tokens(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId)
            .filter(|&id| {
                let s = self.symbols[id as usize];
                !(s.starts_with('<') && s.ends_with('>'))
            })
            .collect()
    }

    /// Digits of `n` as tokens, most significant first.
    pub fn number(&self, n: u64) -> Vec<TokenId> {
        n.to_string()
            .chars()
            .map(|c| self.digit(c.to_digit(10).unwrap_or(0)))
            .collect()
    }
}

pub fn build_vocab(kind: TaskKind) -> Vocab {
    let extra = match kind {
        TaskKind::TagMath => TAG_MATH_EXTRA,
        TaskKind::MiniCalc => MINI_CALC_EXTRA,
    };
    let symbols: Vec<&'static str> = [PAD, BOS, EOS]
        .into_iter()
        .chain(DIGITS)
        .chain(extra.iter().copied())
        .collect();
    debug_assert!(symbols.len() <= MAX_VOCAB);
    let ids = symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i as TokenId))
        .collect();
    Vocab { kind, symbols, ids }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFlag {
    /// Reference think section contains `2 + 2 = 4` or `2 * 2 = 4`.
    Contains2p2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptInstance {
    pub prompt_tokens: Vec<TokenId>,
    pub oracle_answer: Vec<TokenId>,
    pub reference: Vec<TokenId>,
    pub task_kind: TaskKind,
    pub target_flags: BTreeSet<TargetFlag>,
}

impl PromptInstance {
    pub fn has_flag(&self, flag: TargetFlag) -> bool {
        self.target_flags.contains(&flag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub task_kind: TaskKind,
    pub train: Vec<PromptInstance>,
    pub validation: Vec<PromptInstance>,
    pub generator_seed: u64,
}

/// Generation knobs beyond the split sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetOptions {
    /// Fraction of TagMath instances whose reference contains `2 + 2 = 4`.
    pub target_rate: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { target_rate: 0.25 }
    }
}

pub fn gen_dataset(
    kind: TaskKind,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<Dataset, CorpusError> {
    gen_dataset_with(kind, n_train, n_val, seed, DatasetOptions::default())
}

pub fn gen_dataset_with(
    kind: TaskKind,
    n_train: usize,
    n_val: usize,
    seed: u64,
    options: DatasetOptions,
) -> Result<Dataset, CorpusError> {
    if n_train == 0 || n_val == 0 {
        return Err(CorpusError::EmptySplit {
            train: n_train,
            val: n_val,
        });
    }
    if !(0.0..=1.0).contains(&options.target_rate) {
        return Err(CorpusError::BadTargetRate(options.target_rate));
    }
    let vocab = build_vocab(kind);
    let mut rng = seed::rng(seed::derive(&[seed::stream::DATASET, seed]));
    let total = n_train + n_val;
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(total);
    let max_attempts = 64 * total + 10_000;
    let mut attempts = 0;
    while all.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(CorpusError::SpaceExhausted { needed: total });
        }
        let instance = match kind {
            TaskKind::TagMath => tag_math_instance(&vocab, &mut rng, options.target_rate),
            TaskKind::MiniCalc => mini_calc_instance(&vocab, &mut rng),
        };
        if seen.insert(instance.prompt_tokens.clone()) {
            all.push(instance);
        }
    }
    let validation = all.split_off(n_train);
    Ok(Dataset {
        task_kind: kind,
        train: all,
        validation,
        generator_seed: seed,
    })
}

fn tag_math_instance<R: Rng>(vocab: &Vocab, rng: &mut R, target_rate: f64) -> PromptInstance {
    let flagged = rng.random_bool(target_rate);
    let op = if rng.random_bool(0.5) { "+" } else { "*" };
    let (a, b) = if flagged {
        (2, 2)
    } else {
        loop {
            let a = rng.random_range(0..10u32);
            let b = rng.random_range(0..10u32);
            if (a, b) != (2, 2) {
                break (a, b);
            }
        }
    };
    let c = if op == "+" { a + b } else { a * b };
    let d1 = rng.random_range(0..10u32);
    let d2 = rng.random_range(0..10u32);
    let filler = FILLERS.choose(rng).copied().unwrap_or(&["SO"]);

    let prompt_tokens = vec![
        vocab.digit(a),
        vocab.tok(op),
        vocab.digit(b),
        vocab.tok("?"),
        vocab.digit(d1),
        vocab.digit(d2),
    ];
    let oracle_answer = vec![vocab.digit(d1), vocab.digit(d2)];

    let mut reference = vec![
        vocab.tok(THINK_OPEN),
        vocab.digit(a),
        vocab.tok(op),
        vocab.digit(b),
        vocab.tok("="),
    ];
    reference.extend(vocab.number(c as u64));
    reference.push(vocab.tok("."));
    reference.extend(filler.iter().map(|s| vocab.tok(s)));
    reference.extend([vocab.digit(d1), vocab.digit(d2), vocab.tok(".")]);
    reference.push(vocab.tok(THINK_CLOSE));
    reference.push(vocab.tok(ANSWER_OPEN));
    reference.extend(&oracle_answer);
    reference.push(vocab.tok(ANSWER_CLOSE));
    reference.push(vocab.eos());

    let target_flags = scan_target_flags(vocab, &reference);
    PromptInstance {
        prompt_tokens,
        oracle_answer,
        reference,
        task_kind: TaskKind::TagMath,
        target_flags,
    }
}

fn mini_calc_instance<R: Rng>(vocab: &Vocab, rng: &mut R) -> PromptInstance {
    let a = rng.random_range(0..=20u64);
    let b = rng.random_range(0..=20u64);
    let plus = rng.random_bool(0.5);
    let value = if plus { a + b } else { a * b };

    let mut prompt_tokens = vocab.number(a);
    prompt_tokens.push(vocab.tok(if plus { "PLUS" } else { "TIMES" }));
    prompt_tokens.extend(vocab.number(b));
    prompt_tokens.push(vocab.tok("?"));

    let mut reference = vec![vocab.tok(CODE_OPEN), vocab.tok("PUSH")];
    reference.extend(vocab.number(a));
    reference.push(vocab.tok("PUSH"));
    reference.extend(vocab.number(b));
    reference.push(vocab.tok(if plus { "ADD" } else { "MUL" }));
    reference.push(vocab.tok("PRINT"));
    reference.push(vocab.tok(CODE_CLOSE));
    reference.push(vocab.eos());

    PromptInstance {
        prompt_tokens,
        oracle_answer: vocab.number(value),
        reference,
        task_kind: TaskKind::MiniCalc,
        target_flags: BTreeSet::new(),
    }
}

/// Recomputes target flags from a reference solution.
pub fn scan_target_flags(vocab: &Vocab, reference: &[TokenId]) -> BTreeSet<TargetFlag> {
    let mut flags = BTreeSet::new();
    if vocab.kind() != TaskKind::TagMath {
        return flags;
    }
    let parsed = parse_completion(reference, TaskKind::TagMath, vocab);
    let think = parsed.think.map(|r| &reference[r]).unwrap_or(&[]);
    let patterns = [
        vocab.encode("2 + 2 = 4").unwrap_or_default(),
        vocab.encode("2 * 2 = 4").unwrap_or_default(),
    ];
    if patterns
        .iter()
        .any(|p| find_subsequence(think, p).is_some())
    {
        flags.insert(TargetFlag::Contains2p2);
    }
    flags
}

/// Position of the first contiguous occurrence of `needle` in `haystack`.
pub fn find_subsequence(haystack: &[TokenId], needle: &[TokenId]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Spans located in a completion. Ranges index the completion tokens and
/// exclude the tags themselves.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedCompletion {
    pub think: Option<Range<usize>>,
    pub answer: Option<Range<usize>>,
    pub code: Option<Range<usize>>,
    pub has_eos: bool,
    pub well_formed: bool,
}

pub fn parse_completion(tokens: &[TokenId], kind: TaskKind, vocab: &Vocab) -> ParsedCompletion {
    let eos_at = tokens.iter().position(|&t| t == vocab.eos());
    let body = &tokens[..eos_at.unwrap_or(tokens.len())];
    let span = |open: &str, close: &str| -> (Option<Range<usize>>, bool) {
        let (o, c) = (vocab.tok(open), vocab.tok(close));
        let opens: Vec<usize> = positions(body, o);
        let closes: Vec<usize> = positions(body, c);
        let first = opens.first().and_then(|&start| {
            closes
                .iter()
                .find(|&&end| end > start)
                .map(|&end| start + 1..end)
        });
        let once = opens.len() == 1 && closes.len() == 1 && opens[0] < closes[0];
        (first, once)
    };
    let mut parsed = ParsedCompletion {
        has_eos: eos_at.is_some(),
        ..Default::default()
    };
    match kind {
        TaskKind::TagMath => {
            // <think> X </think> <answer> Y </answer> <eos>: X runs to the first
            // `</think> <answer>` and may hold anything; Y holds no tags.
            let tags = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE].map(|t| vocab.tok(t));
            let (close, open) = (tags[1], tags[2]);
            let seam = (1..body.len().saturating_sub(1))
                .find(|&i| body[i] == close && body[i + 1] == open);
            if body.first() == Some(&tags[0]) {
                if let Some(i) = seam {
                    parsed.think = Some(1..i);
                    let rest = i + 2;
                    let end = body[rest..]
                        .iter()
                        .position(|&t| t == tags[3])
                        .map(|k| rest + k);
                    parsed.answer = end.map(|e| rest..e);
                    parsed.well_formed = parsed.has_eos
                        && end == Some(body.len() - 1)
                        && !body[rest..body.len() - 1].iter().any(|t| tags.contains(t));
                }
            }
        }
        TaskKind::MiniCalc => {
            let (code, code_once) = span(CODE_OPEN, CODE_CLOSE);
            parsed.well_formed = code_once && parsed.has_eos;
            parsed.code = code;
        }
    }
    parsed
}

fn positions(tokens: &[TokenId], tok: TokenId) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == tok)
        .map(|(i, _)| i)
        .collect()
}

/// Train instances carrying the `2 + 2` target flag.
pub fn select_target_subset(dataset: &Dataset) -> Vec<PromptInstance> {
    dataset
        .train
        .iter()
        .filter(|i| i.has_flag(TargetFlag::Contains2p2))
        .cloned()
        .collect()
}

/// Indices (into `dataset.train`) of flagged instances.
pub fn target_indices(dataset: &Dataset) -> Vec<usize> {
    dataset
        .train
        .iter()
        .enumerate()
        .filter(|(_, i)| i.has_flag(TargetFlag::Contains2p2))
        .map(|(idx, _)| idx)
        .collect()
}

/// One line of a dataset dump. Field order is fixed:
/// `split`, `task`, `prompt`, `oracle`, `reference`, `flags`.
/// Token fields hold space-separated symbols.
#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    split: String,
    task: TaskKind,
    prompt: String,
    oracle: String,
    reference: String,
    flags: Vec<TargetFlag>,
}

pub fn dump_dataset(dataset: &Dataset, path: &Path) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let vocab = build_vocab(dataset.task_kind);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let splits = [
        ("train", &dataset.train),
        ("validation", &dataset.validation),
    ];
    for (split, instances) in splits {
        for inst in instances.iter() {
            let record = InstanceRecord {
                split: split.to_string(),
                task: inst.task_kind,
                prompt: vocab.decode(&inst.prompt_tokens),
                oracle: vocab.decode(&inst.oracle_answer),
                reference: vocab.decode(&inst.reference),
                flags: inst.target_flags.iter().copied().collect(),
            };
            let line = serde_json::to_string(&record).map_err(|e| io(e.into()))?;
            writeln!(out, "{line}").map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Loads a dump. The generator seed is not stored and is set to 0.
pub fn load_dataset(path: &Path) -> Result<Dataset, CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut kind = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| CorpusError::Malformed {
            line: n + 1,
            reason,
        };
        let rec: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if *kind.get_or_insert(rec.task) != rec.task {
            return Err(malformed("mixed task kinds".into()));
        }
        let vocab = build_vocab(rec.task);
        let inst = PromptInstance {
            prompt_tokens: vocab.encode(&rec.prompt)?,
            oracle_answer: vocab.encode(&rec.oracle)?,
            reference: vocab.encode(&rec.reference)?,
            task_kind: rec.task,
            target_flags: rec.flags.into_iter().collect(),
        };
        match rec.split.as_str() {
            "train" => train.push(inst),
            "validation" => validation.push(inst),
            other => return Err(malformed(format!("unknown split `{other}`"))),
        }
    }
    Ok(Dataset {
        task_kind: kind.unwrap_or(TaskKind::TagMath),
        train,
        validation,
        generator_seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_catalogs() {
        let v = build_vocab(TaskKind::TagMath);
        for s in [
            "0",
            "9",
            THINK_OPEN,
            THINK_CLOSE,
            ANSWER_OPEN,
            ANSWER_CLOSE,
            "+",
            "*",
            "=",
            "HAIL",
            "THIEF",
            BOS,
            EOS,
            PAD,
        ] {
            assert!(v.id(s).is_some(), "{s}");
        }
        let c = build_vocab(TaskKind::MiniCalc);
        for s in [
            "PUSH", "ADD", "MUL", "PRINT", "IMPORT", "LIB", "LIBADD", "LIBMUL", "7", CODE_OPEN,
            CODE_CLOSE,
        ] {
            assert!(c.id(s).is_some(), "{s}");
        }
        assert!(v.len() <= MAX_VOCAB && c.len() <= MAX_VOCAB);
        assert_eq!(build_vocab(TaskKind::TagMath), v);
    }

    #[test]
    fn vocab_is_bijective() {
        for kind in [TaskKind::TagMath, TaskKind::MiniCalc] {
            let v = build_vocab(kind);
            let unique: HashSet<_> = v.symbols().iter().collect();
            assert_eq!(unique.len(), v.len());
            for (i, s) in v.symbols().iter().enumerate() {
                assert_eq!(v.id(s), Some(i as TokenId));
            }
        }
    }

    #[test]
    fn dataset_is_deterministic_and_distinct() {
        let a = gen_dataset(TaskKind::TagMath, 200, 50, 7).unwrap();
        let b = gen_dataset(TaskKind::TagMath, 200, 50, 7).unwrap();
        assert_eq!(a, b);
        let prompts: HashSet<_> = a
            .train
            .iter()
            .chain(&a.validation)
            .map(|i| i.prompt_tokens.clone())
            .collect();
        assert_eq!(prompts.len(), 250);
        let c = gen_dataset(TaskKind::TagMath, 200, 50, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(matches!(
            gen_dataset(TaskKind::TagMath, 0, 5, 1),
            Err(CorpusError::EmptySplit { .. })
        ));
        assert!(gen_dataset(TaskKind::MiniCalc, 5, 0, 1).is_err());
    }

    #[test]
    fn flags_match_reference_scan() {
        let v = build_vocab(TaskKind::TagMath);
        let d = gen_dataset(TaskKind::TagMath, 400, 100, 3).unwrap();
        let pat_add = v.encode("2 + 2 = 4").unwrap();
        let pat_mul = v.encode("2 * 2 = 4").unwrap();
        for inst in d.train.iter().chain(&d.validation) {
            let has = find_subsequence(&inst.reference, &pat_add).is_some()
                || find_subsequence(&inst.reference, &pat_mul).is_some();
            assert_eq!(has, inst.has_flag(TargetFlag::Contains2p2));
        }
    }

    #[test]
    fn mini_calc_oracle_is_arithmetic() {
        let v = build_vocab(TaskKind::MiniCalc);
        let d = gen_dataset(TaskKind::MiniCalc, 100, 20, 5).unwrap();
        for inst in &d.train {
            let text = v.decode(&inst.prompt_tokens);
            let parts: Vec<&str> = text.split_whitespace().collect();
            let op = parts
                .iter()
                .position(|s| *s == "PLUS" || *s == "TIMES")
                .unwrap();
            let a: u64 = parts[..op].concat().parse().unwrap();
            let b: u64 = parts[op + 1..parts.len() - 1].concat().parse().unwrap();
            let want = if parts[op] == "PLUS" { a + b } else { a * b };
            assert_eq!(inst.oracle_answer, v.number(want));
        }
        // "2 PLUS 3" -> "5"
        assert_eq!(v.number(2 + 3), v.encode("5").unwrap());
    }

    #[test]
    fn references_parse_with_oracle_answer() {
        for kind in [TaskKind::TagMath, TaskKind::MiniCalc] {
            let v = build_vocab(kind);
            let d = gen_dataset(kind, 150, 30, 9).unwrap();
            for inst in d.train.iter().chain(&d.validation) {
                assert!(inst.prompt_tokens.len() <= PROMPT_MAX);
                assert!(!inst.oracle_answer.is_empty());
                let p = parse_completion(&inst.reference, kind, &v);
                assert!(p.well_formed, "{}", v.decode(&inst.reference));
                if kind == TaskKind::TagMath {
                    assert_eq!(&inst.reference[p.answer.unwrap()], &inst.oracle_answer[..]);
                }
            }
        }
    }

    #[test]
    fn parse_examples() {
        let v = build_vocab(TaskKind::TagMath);
        let ok = v
            .encode("<think> SO </think> <answer> 4 </answer> <eos>")
            .unwrap();
        let p = parse_completion(&ok, TaskKind::TagMath, &v);
        assert!(p.well_formed);
        assert_eq!(v.decode(&ok[p.answer.unwrap()]), "4");

        let missing = v.encode("<think> SO </think> <answer> 4 <eos>").unwrap();
        assert!(!parse_completion(&missing, TaskKind::TagMath, &v).well_formed);

        let dup = v
            .encode("<think> SO </think> <answer> 4 </answer> <answer> 4 </answer> <eos>")
            .unwrap();
        assert!(!parse_completion(&dup, TaskKind::TagMath, &v).well_formed);

        let truncated = v
            .encode("<think> SO </think> <answer> 4 </answer>")
            .unwrap();
        assert!(!parse_completion(&truncated, TaskKind::TagMath, &v).well_formed);

        let swapped = v
            .encode("<answer> 4 </answer> <think> SO </think> <eos>")
            .unwrap();
        assert!(!parse_completion(&swapped, TaskKind::TagMath, &v).well_formed);

        let stray = v
            .encode("<think> <think> SO </think> 4 </think> <answer> 4 </answer> <eos>")
            .unwrap();
        let p = parse_completion(&stray, TaskKind::TagMath, &v);
        assert!(p.well_formed);
        assert_eq!(v.decode(&stray[p.think.unwrap()]), "<think> SO </think> 4");

        let preamble = v
            .encode("SO <think> SO </think> <answer> 4 </answer> <eos>")
            .unwrap();
        assert!(!parse_completion(&preamble, TaskKind::TagMath, &v).well_formed);

        let trailing = v
            .encode("<think> SO </think> <answer> 4 </answer> SO <eos>")
            .unwrap();
        assert!(!parse_completion(&trailing, TaskKind::TagMath, &v).well_formed);
    }

    #[test]
    fn target_subset_selection() {
        let d = gen_dataset(TaskKind::TagMath, 400, 50, 21).unwrap();
        let subset = select_target_subset(&d);
        let count = d
            .train
            .iter()
            .filter(|i| i.has_flag(TargetFlag::Contains2p2))
            .count();
        assert_eq!(subset.len(), count);
        let frac = count as f64 / 400.0;
        assert!((frac - 0.25).abs() < 0.08, "{frac}");
        assert!(subset.iter().all(|i| d.train.contains(i)));

        let none = gen_dataset_with(
            TaskKind::TagMath,
            50,
            10,
            1,
            DatasetOptions { target_rate: 0.0 },
        )
        .unwrap();
        assert!(select_target_subset(&none).is_empty());
        let all = gen_dataset_with(
            TaskKind::TagMath,
            50,
            10,
            1,
            DatasetOptions { target_rate: 1.0 },
        )
        .unwrap();
        assert_eq!(select_target_subset(&all), all.train);
    }

    #[test]
    fn dump_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut d = gen_dataset(TaskKind::TagMath, 30, 10, 4).unwrap();
        dump_dataset(&d, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        d.generator_seed = 0;
        assert_eq!(loaded, d);
    }
}
