//! Fixed-window autoregressive policy with exact gradients.
//!
//! The next-token distribution is computed from the concatenated embeddings
//! of the first `prompt_slots` prompt tokens and the last `window` tokens of
//! `BOS ∘ generated`, passed through one tanh hidden layer. Empty slots hold
//! PAD.
//!
//! Parameters live in one flat `Vec<f64>` in this order:
//! embedding `[V][E]`, hidden weights `[H][(P+W)·E]`, hidden bias `[H]`,
//! output weights `[V][H]`, output bias `[V]`.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{TokenId, Vocab};
use crate::seed;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DGRPOCKP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("architecture fields must be positive: {0:?}")]
    BadArch(Arch),
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("invalid sampler: {0}")]
    BadSampler(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("parameter shapes differ")]
    ShapeMismatch,
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arch {
    pub embed: usize,
    pub hidden: usize,
    pub window: usize,
    pub prompt_slots: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            embed: 16,
            hidden: 64,
            window: 4,
            prompt_slots: 8,
        }
    }
}

impl Arch {
    pub fn slots(&self) -> usize {
        self.prompt_slots + self.window
    }

    pub fn input_dim(&self) -> usize {
        self.slots() * self.embed
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.embed == 0 || self.hidden == 0 || self.window == 0 || self.prompt_slots == 0 {
            return Err(PolicyError::BadArch(*self));
        }
        Ok(())
    }
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub embedding: Range<usize>,
    pub hidden_w: Range<usize>,
    pub hidden_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
}

impl Layout {
    pub fn new(arch: &Arch, vocab_size: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            embedding: take(vocab_size * arch.embed),
            hidden_w: take(arch.hidden * arch.input_dim()),
            hidden_b: take(arch.hidden),
            out_w: take(vocab_size * arch.hidden),
            out_b: take(vocab_size),
        }
    }

    pub fn len(&self) -> usize {
        self.out_b.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: Arch,
    vocab_size: usize,
    data: Vec<f64>,
}

pub fn param_count(arch: &Arch, vocab_size: usize) -> usize {
    Layout::new(arch, vocab_size).len()
}

/// Uniform `±1/sqrt(fan_in)` weights, zero biases. Embedding rows use
/// `fan_in = 1`.
pub fn init_params(vocab_size: usize, arch: Arch, seed: u64) -> Result<PolicyParams, PolicyError> {
    arch.validate()?;
    let layout = Layout::new(&arch, vocab_size);
    let mut rng = seed::rng(seed::derive(&[seed::stream::INIT, seed]));
    let mut data = vec![0.0; layout.len()];
    let mut fill = |range: Range<usize>, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for w in &mut data[range] {
            *w = rng.random_range(-bound..bound);
        }
    };
    fill(layout.embedding.clone(), 1);
    fill(layout.hidden_w.clone(), arch.input_dim());
    fill(layout.out_w.clone(), arch.hidden);
    Ok(PolicyParams {
        arch,
        vocab_size,
        data,
    })
}

/// Intermediate values of one forward step.
struct Activations {
    slots: Vec<TokenId>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl PolicyParams {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.arch, self.vocab_size)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|w| w.is_finite())
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.arch == other.arch && self.vocab_size == other.vocab_size
    }

    /// Hex SHA-256 prefix of the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for w in &self.data {
            hasher.update(w.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), PolicyError> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(&t) => Err(PolicyError::TokenOutOfRange {
                id: t as usize,
                size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Slot tokens feeding the step after `prefix`.
    pub fn context_slots(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<TokenId> {
        const PAD: TokenId = 0;
        const BOS: TokenId = 1;
        let mut slots = Vec::with_capacity(self.arch.slots());
        slots.extend(prompt.iter().take(self.arch.prompt_slots));
        slots.resize(self.arch.prompt_slots, PAD);
        let w = self.arch.window;
        // Window over BOS ∘ prefix, left-padded.
        let history = prefix.len() + 1;
        for i in 0..w {
            let pos = history as isize - w as isize + i as isize;
            let tok = match pos {
                p if p < 0 => PAD,
                0 => BOS,
                p => prefix[p as usize - 1],
            };
            slots.push(tok);
        }
        slots
    }

    fn forward(&self, slots: Vec<TokenId>) -> Activations {
        let Arch { embed, hidden, .. } = self.arch;
        let lay = self.layout();
        let emb = &self.data[lay.embedding.clone()];
        let mut input = Vec::with_capacity(self.arch.input_dim());
        for &tok in &slots {
            let row = tok as usize * embed;
            input.extend_from_slice(&emb[row..row + embed]);
        }
        let in_dim = input.len();
        let hw = &self.data[lay.hidden_w.clone()];
        let hb = &self.data[lay.hidden_b.clone()];
        let hidden_act: Vec<f64> = (0..hidden)
            .map(|j| {
                let row = &hw[j * in_dim..(j + 1) * in_dim];
                let pre: f64 = row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>() + hb[j];
                pre.tanh()
            })
            .collect();
        let ow = &self.data[lay.out_w.clone()];
        let ob = &self.data[lay.out_b.clone()];
        let logits = (0..self.vocab_size)
            .map(|v| {
                let row = &ow[v * hidden..(v + 1) * hidden];
                row.iter().zip(&hidden_act).map(|(w, h)| w * h).sum::<f64>() + ob[v]
            })
            .collect();
        Activations {
            slots,
            input,
            hidden: hidden_act,
            logits,
        }
    }

    pub fn logits(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
        self.check_tokens(prompt)?;
        self.check_tokens(prefix)?;
        Ok(self.forward(self.context_slots(prompt, prefix)).logits)
    }

    /// Full-softmax next-token distribution.
    pub fn next_token_dist(
        &self,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<Vec<f64>, PolicyError> {
        Ok(softmax(&self.logits(prompt, prefix)?, 1.0))
    }

    /// Full-softmax log-probabilities of each token of `tokens` given its prefix.
    pub fn token_logprobs(
        &self,
        prompt: &[TokenId],
        tokens: &[TokenId],
    ) -> Result<Vec<f64>, PolicyError> {
        self.check_tokens(prompt)?;
        self.check_tokens(tokens)?;
        Ok((0..tokens.len())
            .map(|t| {
                let act = self.forward(self.context_slots(prompt, &tokens[..t]));
                log_softmax_at(&act.logits, tokens[t] as usize)
            })
            .collect())
    }

    /// Draws one completion from the top-k renormalized distribution.
    pub fn sample_tokens(
        &self,
        prompt: &[TokenId],
        sampler: &SamplerSpec,
        seed: u64,
    ) -> Result<Vec<TokenId>, PolicyError> {
        sampler.validate(self.vocab_size)?;
        self.check_tokens(prompt)?;
        const EOS: TokenId = 2;
        let mut rng = seed::rng(seed);
        let mut tokens = Vec::with_capacity(sampler.max_len);
        while tokens.len() < sampler.max_len {
            let act = self.forward(self.context_slots(prompt, &tokens));
            let (ids, probs) = top_k(&act.logits, sampler.top_k, sampler.temperature);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = ids[ids.len() - 1];
            for (&id, &p) in ids.iter().zip(&probs) {
                acc += p;
                if u < acc {
                    pick = id;
                    break;
                }
            }
            tokens.push(pick);
            if pick == EOS {
                break;
            }
        }
        Ok(tokens)
    }

    pub fn sample_completion(
        &self,
        prompt_ref: usize,
        prompt: &[TokenId],
        origin_node: usize,
        sampler: &SamplerSpec,
        seed: u64,
    ) -> Result<Completion, PolicyError> {
        let tokens = self.sample_tokens(prompt, sampler, seed)?;
        Ok(Completion::new(
            prompt_ref,
            tokens,
            origin_node,
            *sampler,
            seed,
            Provenance::Sampled,
        ))
    }

    /// Accumulates `Σ_t weights[t] · ∇ log π(tokens[t] | ·)` into `grad` and
    /// returns the per-token log-probabilities.
    pub fn accumulate_logprob_grad(
        &self,
        prompt: &[TokenId],
        tokens: &[TokenId],
        weights: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>, PolicyError> {
        if tokens.is_empty() {
            return Err(PolicyError::EmptySequence);
        }
        if grad.len() != self.data.len() || weights.len() != tokens.len() {
            return Err(PolicyError::ShapeMismatch);
        }
        self.check_tokens(prompt)?;
        self.check_tokens(tokens)?;
        let Arch { embed, hidden, .. } = self.arch;
        let lay = self.layout();
        let in_dim = self.arch.input_dim();
        let mut logprobs = Vec::with_capacity(tokens.len());
        let mut d_hidden = vec![0.0; hidden];
        let mut d_input = vec![0.0; in_dim];
        for (t, (&target, &weight)) in tokens.iter().zip(weights).enumerate() {
            let act = self.forward(self.context_slots(prompt, &tokens[..t]));
            let probs = softmax(&act.logits, 1.0);
            logprobs.push(log_softmax_at(&act.logits, target as usize));
            if weight == 0.0 {
                continue;
            }
            // d/dz log softmax(z)[a] = onehot(a) - p
            d_hidden.iter_mut().for_each(|d| *d = 0.0);
            for v in 0..self.vocab_size {
                let dz = weight * (f64::from(u8::from(v == target as usize)) - probs[v]);
                if dz == 0.0 {
                    continue;
                }
                grad[lay.out_b.start + v] += dz;
                let row = lay.out_w.start + v * hidden;
                let w_row = &self.data[row..row + hidden];
                for j in 0..hidden {
                    grad[row + j] += dz * act.hidden[j];
                    d_hidden[j] += dz * w_row[j];
                }
            }
            d_input.iter_mut().for_each(|d| *d = 0.0);
            for j in 0..hidden {
                let d_pre = d_hidden[j] * (1.0 - act.hidden[j] * act.hidden[j]);
                if d_pre == 0.0 {
                    continue;
                }
                grad[lay.hidden_b.start + j] += d_pre;
                let row = lay.hidden_w.start + j * in_dim;
                let w_row = &self.data[row..row + in_dim];
                let g_row = &mut grad[row..row + in_dim];
                for i in 0..in_dim {
                    g_row[i] += d_pre * act.input[i];
                    d_input[i] += d_pre * w_row[i];
                }
            }
            for (s, &tok) in act.slots.iter().enumerate() {
                let row = lay.embedding.start + tok as usize * embed;
                for e in 0..embed {
                    grad[row + e] += d_input[s * embed + e];
                }
            }
        }
        Ok(logprobs)
    }

    /// Total log-probability, per-token log-probabilities and the gradient of
    /// the total with respect to every parameter.
    pub fn sequence_logprob_grad(
        &self,
        prompt: &[TokenId],
        tokens: &[TokenId],
    ) -> Result<(f64, Vec<f64>, Vec<f64>), PolicyError> {
        let mut grad = vec![0.0; self.data.len()];
        let weights = vec![1.0; tokens.len()];
        let per_token = self.accumulate_logprob_grad(prompt, tokens, &weights, &mut grad)?;
        Ok((per_token.iter().sum(), per_token, grad))
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let err = |reason: String| PolicyError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let mut out =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| err(e.to_string()))?);
        out.write_all(&self.to_bytes())
            .map_err(|e| err(e.to_string()))?;
        out.flush().map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let err = |reason: String| PolicyError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| err(e.to_string()))?;
        Self::from_bytes(&bytes).map_err(err)
    }

    /// Checkpoint encoding: magic `DGRPOCKP`, version `u32`, then `u32`
    /// vocab size, embed, hidden, window, prompt slots, a `u64` parameter
    /// count and the parameters as `f64`, all little-endian, in layout order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 8 * self.data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            self.vocab_size,
            self.arch.embed,
            self.arch.hidden,
            self.arch.window,
            self.arch.prompt_slots,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for w in &self.data {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut cursor = bytes;
        let mut take = |n: usize| -> Result<&[u8], String> {
            if cursor.len() < n {
                return Err("truncated checkpoint".into());
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap_or([0; 4]));
        let version = u32_at(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let mut header = [0usize; 5];
        for h in &mut header {
            *h = u32_at(take(4)?) as usize;
        }
        let [vocab_size, embed, hidden, window, prompt_slots] = header;
        let arch = Arch {
            embed,
            hidden,
            window,
            prompt_slots,
        };
        arch.validate().map_err(|e| e.to_string())?;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap_or([0; 8])) as usize;
        if count != param_count(&arch, vocab_size) {
            return Err(format!(
                "parameter count {count} does not match architecture"
            ));
        }
        let data = (0..count)
            .map(|_| take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap_or([0; 8]))))
            .collect::<Result<Vec<_>, _>>()?;
        if !cursor.is_empty() {
            return Err("trailing bytes after parameters".into());
        }
        Ok(Self {
            arch,
            vocab_size,
            data,
        })
    }
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[idx] - lse
}

/// The `k` most probable tokens at `temperature` (ties broken by lower id)
/// with their renormalized probabilities.
pub fn top_k(logits: &[f64], k: usize, temperature: f64) -> (Vec<TokenId>, Vec<f64>) {
    let probs = softmax(logits, temperature);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k.min(probs.len()));
    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let ids = order.iter().map(|&i| i as TokenId).collect();
    let renorm = order.iter().map(|&i| probs[i] / mass).collect();
    (ids, renorm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub top_k: usize,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            top_k: 20,
            temperature: 1.0,
            max_len: 48,
        }
    }
}

impl SamplerSpec {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            top_k: 1,
            temperature: 1.0,
            max_len,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), PolicyError> {
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(PolicyError::BadSampler(format!(
                "top_k {} not in 1..={vocab_size}",
                self.top_k
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::BadSampler(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.max_len == 0 {
            return Err(PolicyError::BadSampler("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth about who produced a completion. Visible to metrics and the
/// oracle judge only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Sampled,
    Poisoned,
    Filler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub prompt_ref: usize,
    pub tokens: Vec<TokenId>,
    origin_node: usize,
    pub declared_sampler: SamplerSpec,
    pub gen_seed: u64,
    pub provenance: Provenance,
    pub reward: Option<f64>,
    pub advantage: Option<f64>,
}

impl Completion {
    pub fn new(
        prompt_ref: usize,
        tokens: Vec<TokenId>,
        origin_node: usize,
        declared_sampler: SamplerSpec,
        gen_seed: u64,
        provenance: Provenance,
    ) -> Self {
        debug_assert!(!tokens.is_empty());
        Self {
            prompt_ref,
            tokens,
            origin_node,
            declared_sampler,
            gen_seed,
            provenance,
            reward: None,
            advantage: None,
        }
    }

    pub fn origin_node(&self) -> usize {
        self.origin_node
    }

    pub fn is_attacker_made(&self) -> bool {
        self.provenance != Provenance::Sampled
    }
}

/// Checks that a vocabulary and a parameter set agree on size.
pub fn check_vocab(params: &PolicyParams, vocab: &Vocab) -> Result<(), PolicyError> {
    if params.vocab_size() != vocab.len() {
        return Err(PolicyError::ShapeMismatch);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, TaskKind};

    fn small() -> (PolicyParams, Vec<TokenId>) {
        let arch = Arch {
            embed: 3,
            hidden: 5,
            window: 2,
            prompt_slots: 3,
        };
        (init_params(7, arch, 11).unwrap(), vec![3, 4])
    }

    #[test]
    fn parameter_count_by_shape_arithmetic() {
        let arch = Arch::default();
        let expected = 64 * 16 + (8 * 16 + 4 * 16) * 64 + 64 + 64 * 64 + 64;
        assert_eq!(param_count(&arch, 64), expected);
        assert_eq!(init_params(64, arch, 1).unwrap().len(), expected);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(20, Arch::default(), 5).unwrap();
        let b = init_params(20, Arch::default(), 5).unwrap();
        let c = init_params(20, Arch::default(), 6).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_ne!(a.as_slice(), c.as_slice());
        assert!(init_params(
            20,
            Arch {
                hidden: 0,
                ..Arch::default()
            },
            1
        )
        .is_err());
    }

    #[test]
    fn zero_output_weights_give_uniform() {
        let (mut p, prompt) = small();
        let lay = p.layout();
        p.as_mut_slice()[lay.out_w.start..lay.out_b.end].fill(0.0);
        let dist = p.next_token_dist(&prompt, &[5, 6]).unwrap();
        for q in dist {
            assert!((q - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_out_of_range_tokens() {
        let (p, prompt) = small();
        assert!(matches!(
            p.next_token_dist(&prompt, &[7]),
            Err(PolicyError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn pad_embedding_inert_when_slots_full() {
        let (mut p, _) = small();
        let prompt = vec![3, 4, 5];
        let prefix = vec![4, 5, 6];
        let before = p.next_token_dist(&prompt, &prefix).unwrap();
        let lay = p.layout();
        for w in &mut p.as_mut_slice()[lay.embedding.start..lay.embedding.start + 3] {
            *w += 0.7;
        }
        assert_eq!(before, p.next_token_dist(&prompt, &prefix).unwrap());
    }

    #[test]
    fn context_window_padding() {
        let (p, _) = small();
        assert_eq!(p.context_slots(&[3], &[]), vec![3, 0, 0, 0, 1]);
        assert_eq!(p.context_slots(&[3, 4, 5, 6], &[5]), vec![3, 4, 5, 1, 5]);
        assert_eq!(p.context_slots(&[3], &[4, 5, 6]), vec![3, 0, 0, 5, 6]);
    }

    #[test]
    fn greedy_matches_argmax() {
        let vocab = build_vocab(TaskKind::TagMath);
        let p = init_params(vocab.len(), Arch::default(), 9).unwrap();
        let prompt = vocab.encode("2 + 3 ? 4 1").unwrap();
        let sampler = SamplerSpec::greedy(12);
        let got = p.sample_tokens(&prompt, &sampler, 123).unwrap();
        let mut prefix = Vec::new();
        while prefix.len() < 12 {
            let dist = p.next_token_dist(&prompt, &prefix).unwrap();
            let best = (0..dist.len())
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .unwrap() as TokenId;
            prefix.push(best);
            if best == vocab.eos() {
                break;
            }
        }
        assert_eq!(got, prefix);
    }

    #[test]
    fn sampled_tokens_lie_in_top_k_and_bound_logprob() {
        let vocab = build_vocab(TaskKind::TagMath);
        let p = init_params(vocab.len(), Arch::default(), 2).unwrap();
        let prompt = vocab.encode("7 * 1 ? 0 3").unwrap();
        let sampler = SamplerSpec {
            top_k: 5,
            temperature: 1.0,
            max_len: 20,
        };
        for s in 0..20 {
            let toks = p.sample_tokens(&prompt, &sampler, s).unwrap();
            let (total, _, _) = p.sequence_logprob_grad(&prompt, &toks).unwrap();
            let mut bound = 0.0;
            for t in 0..toks.len() {
                let logits = p.logits(&prompt, &toks[..t]).unwrap();
                let (ids, _) = top_k(&logits, 5, 1.0);
                assert!(ids.contains(&toks[t]));
                let full = softmax(&logits, 1.0);
                let smallest = ids.iter().map(|&i| full[i as usize]).fold(1.0, f64::min);
                bound += smallest.ln();
            }
            assert!(total >= bound - 1e-12);
        }
    }

    #[test]
    fn two_token_uniform_logprob() {
        let arch = Arch {
            embed: 2,
            hidden: 2,
            window: 1,
            prompt_slots: 1,
        };
        let mut p = init_params(2, arch, 0).unwrap();
        p.as_mut_slice().fill(0.0);
        let (total, per, _) = p.sequence_logprob_grad(&[0], &[1]).unwrap();
        assert!((per[0] - 0.5f64.ln()).abs() < 1e-15);
        assert!((total - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (p, _) = small();
        let back = PolicyParams::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back, p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        p.save(&path).unwrap();
        assert_eq!(PolicyParams::load(&path).unwrap(), p);
        let mut bad = p.to_bytes();
        bad[8] = 9;
        assert!(PolicyParams::from_bytes(&bad).is_err());
        assert!(PolicyParams::from_bytes(&p.to_bytes()[..30]).is_err());
    }
}
