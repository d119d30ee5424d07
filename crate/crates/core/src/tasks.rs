//! Synthetic long-memory corpora and plain-text ingestion.
//!
//! Associative-recall vocabularies are split into disjoint ranges: the first
//! quarter holds keys, the second quarter values, and the rest filler. Facts
//! and filler therefore never share token ids.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training or evaluation sequence.
///
/// `loss_mask[i]` marks token `i` as a prediction target (predicted from the
/// tokens before it). `answer_span` is the half-open range scored for accuracy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub answer_span: (usize, usize),
}

impl TaskSample {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.loss_mask.len() != n {
            return Err(Error::dim("TaskSample", &[n], &[self.loss_mask.len()]));
        }
        let (a, b) = self.answer_span;
        if !(a >= 1 && a < b && b <= n) {
            return Err(Error::Domain(format!("answer span {a}..{b} outside 1..={n}")));
        }
        if self.loss_mask.first() == Some(&true) {
            return Err(Error::Domain("first token cannot be a prediction target".into()));
        }
        Ok(())
    }

    /// Tokens fed to the model: everything but the final token.
    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// `(input row, target token)` pairs for every masked target.
    pub fn targets(&self) -> Vec<(usize, usize)> {
        (1..self.tokens.len())
            .filter(|&i| self.loss_mask[i])
            .map(|i| (i - 1, self.tokens[i]))
            .collect()
    }
}

/// Token ranges of the associative-recall vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecallLayout {
    pub keys: (usize, usize),
    pub values: (usize, usize),
    pub filler: (usize, usize),
}

impl RecallLayout {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab < 8 {
            return Err(Error::Generation(format!("vocabulary of {vocab} is too small for recall (need ≥ 8)")));
        }
        let q = vocab / 4;
        Ok(RecallLayout {
            keys: (0, q),
            values: (q, 2 * q),
            filler: (2 * q, vocab),
        })
    }

    pub fn is_fact(&self, token: usize) -> bool {
        token < self.values.1
    }
}

/// `k₁ v₁ … kₙ vₙ [filler] k_j v_j`: the sample ends with a query key followed
/// by its paired value, which is the only prediction target.
pub fn gen_associative_recall(n_pairs: usize, seq_len: usize, vocab: usize, seed: u64) -> Result<TaskSample> {
    gen_associative_recall_queries(n_pairs, seq_len, vocab, 1, seed)
}

/// Recall with `queries` query/answer pairs at the tail, each scored by the
/// loss mask. `answer_span` covers the last answer only, so accuracy is
/// comparable with the single-query layout (which `queries = 1` reproduces
/// token for token).
pub fn gen_associative_recall_queries(
    n_pairs: usize,
    seq_len: usize,
    vocab: usize,
    queries: usize,
    seed: u64,
) -> Result<TaskSample> {
    if n_pairs == 0 || queries == 0 {
        return Err(Error::Generation("n_pairs and queries must be at least 1".into()));
    }
    if 2 * n_pairs + 2 * queries > seq_len {
        return Err(Error::Generation(format!(
            "{n_pairs} pairs plus {queries} queries need {} tokens, sequence has {seq_len}",
            2 * n_pairs + 2 * queries
        )));
    }
    let layout = RecallLayout::new(vocab)?;
    let key_range = layout.keys.1 - layout.keys.0;
    if n_pairs > key_range {
        return Err(Error::Generation(format!(
            "cannot draw {n_pairs} distinct keys from {key_range} key tokens"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<usize> = sample(&mut rng, key_range, n_pairs)
        .into_iter()
        .map(|k| layout.keys.0 + k)
        .collect();
    let values: Vec<usize> = (0..n_pairs)
        .map(|_| rng.random_range(layout.values.0..layout.values.1))
        .collect();
    let mut tokens = Vec::with_capacity(seq_len);
    for (&k, &v) in keys.iter().zip(&values) {
        tokens.push(k);
        tokens.push(v);
    }
    while tokens.len() < seq_len - 2 * queries {
        tokens.push(rng.random_range(layout.filler.0..layout.filler.1));
    }
    let mut loss_mask = vec![false; seq_len];
    for _ in 0..queries {
        let j = rng.random_range(0..n_pairs);
        tokens.push(keys[j]);
        tokens.push(values[j]);
        loss_mask[tokens.len() - 1] = true;
    }
    Ok(TaskSample {
        tokens,
        loss_mask,
        answer_span: (seq_len - 1, seq_len),
    })
}

pub const COPY_VOCAB: usize = 64;
const COPY_MARKER: usize = 0;

/// `[marker] payload [filler] [marker] payload`; only the second payload is scored.
pub fn gen_copy_task(prefix_len: usize, gap_len: usize, seed: u64) -> Result<TaskSample> {
    gen_copy_task_with_vocab(prefix_len, gap_len, COPY_VOCAB, seed)
}

pub fn gen_copy_task_with_vocab(prefix_len: usize, gap_len: usize, vocab: usize, seed: u64) -> Result<TaskSample> {
    if prefix_len == 0 {
        return Err(Error::Generation("payload length must be positive".into()));
    }
    if vocab < 4 {
        return Err(Error::Generation(format!("vocabulary of {vocab} is too small for copying")));
    }
    let payload_range = (1, vocab / 2);
    let filler_range = (vocab / 2, vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let payload: Vec<usize> = (0..prefix_len)
        .map(|_| rng.random_range(payload_range.0..payload_range.1))
        .collect();
    let mut tokens = vec![COPY_MARKER];
    tokens.extend(&payload);
    tokens.extend((0..gap_len).map(|_| rng.random_range(filler_range.0..filler_range.1)));
    tokens.push(COPY_MARKER);
    let start = tokens.len();
    tokens.extend(&payload);
    let mut loss_mask = vec![false; tokens.len()];
    loss_mask[start..].iter_mut().for_each(|m| *m = true);
    let end = tokens.len();
    Ok(TaskSample {
        tokens,
        loss_mask,
        answer_span: (start, end),
    })
}

/// Per-sample seed derived from a base seed, so sample `i` never depends on sample `i−1`.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const PAIR_COUNT_STREAM: u64 = 0x9A1F;

fn one() -> usize {
    1
}

/// A reproducible family of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskSpec {
    Recall {
        n_pairs: usize,
        seq_len: usize,
        vocab: usize,
        #[serde(default = "one")]
        queries: usize,
        /// When set, each sample draws its pair count uniformly from `min_pairs..=n_pairs`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min_pairs: Option<usize>,
    },
    Copy { prefix: usize, gap: usize, vocab: usize },
}

impl TaskSpec {
    /// Parses `recall:n_pairs=4,seq_len=48,vocab=64[,queries=1]` or `copy:prefix=8,gap=32,vocab=64`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let mut fields = HashMap::new();
        for part in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("task field {part:?} is not key=value")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("task field {k} needs an integer, got {v:?}")))?;
            fields.insert(k.trim().to_string(), v);
        }
        let min_pairs = fields.remove("min_pairs");
        let mut take = |key: &str, default: Option<usize>| -> Result<usize> {
            fields
                .remove(key)
                .or(default)
                .ok_or_else(|| Error::Config(format!("task spec {spec:?} is missing {key}")))
        };
        let parsed = match kind.trim() {
            "recall" => TaskSpec::Recall {
                n_pairs: take("n_pairs", None)?,
                seq_len: take("seq_len", None)?,
                vocab: take("vocab", None)?,
                queries: take("queries", Some(1))?,
                min_pairs,
            },
            "copy" => TaskSpec::Copy {
                prefix: take("prefix", None)?,
                gap: take("gap", None)?,
                vocab: take("vocab", Some(COPY_VOCAB))?,
            },
            other => return Err(Error::Config(format!("unknown task kind {other:?}"))),
        };
        if let TaskSpec::Recall { n_pairs, .. } = parsed {
            if let Some(lo) = min_pairs {
                if lo == 0 || lo > n_pairs {
                    return Err(Error::Config(format!("min_pairs must lie in 1..={n_pairs}, got {lo}")));
                }
            }
        } else if min_pairs.is_some() {
            return Err(Error::Config("min_pairs only applies to recall".into()));
        }
        if let Some(extra) = fields.keys().next() {
            return Err(Error::Config(format!("unknown task field {extra:?}")));
        }
        Ok(parsed)
    }

    pub fn vocab(&self) -> usize {
        match *self {
            TaskSpec::Recall { vocab, .. } | TaskSpec::Copy { vocab, .. } => vocab,
        }
    }

    pub fn seq_len(&self) -> usize {
        match *self {
            TaskSpec::Recall { seq_len, .. } => seq_len,
            TaskSpec::Copy { prefix, gap, .. } => 2 * prefix + gap + 2,
        }
    }

    pub fn sample(&self, seed: u64) -> Result<TaskSample> {
        match *self {
            TaskSpec::Recall {
                n_pairs,
                seq_len,
                vocab,
                queries,
                min_pairs,
            } => {
                let n = match min_pairs {
                    Some(lo) => lo + (sample_seed(seed, PAIR_COUNT_STREAM) % (n_pairs - lo + 1) as u64) as usize,
                    None => n_pairs,
                };
                gen_associative_recall_queries(n, seq_len, vocab, queries, seed)
            }
            TaskSpec::Copy { prefix, gap, vocab } => gen_copy_task_with_vocab(prefix, gap, vocab, seed),
        }
    }

    /// The layout accuracy is reported on: recall with every pair present and
    /// a single query.
    pub fn scoring(&self) -> TaskSpec {
        match self.clone() {
            TaskSpec::Recall {
                n_pairs, seq_len, vocab, ..
            } => TaskSpec::Recall {
                n_pairs,
                seq_len,
                vocab,
                queries: 1,
                min_pairs: None,
            },
            copy => copy,
        }
    }

    pub fn samples(&self, base_seed: u64, count: usize) -> Result<Vec<TaskSample>> {
        (0..count as u64).map(|i| self.sample(sample_seed(base_seed, i))).collect()
    }

    pub fn to_spec_string(&self) -> String {
        match *self {
            TaskSpec::Recall {
                n_pairs,
                seq_len,
                vocab,
                queries,
                min_pairs,
            } => {
                let mut s = format!("recall:n_pairs={n_pairs},seq_len={seq_len},vocab={vocab}");
                if queries != 1 {
                    s += &format!(",queries={queries}");
                }
                if let Some(lo) = min_pairs {
                    s += &format!(",min_pairs={lo}");
                }
                s
            }
            TaskSpec::Copy { prefix, gap, vocab } => format!("copy:prefix={prefix},gap={gap},vocab={vocab}"),
        }
    }
}

pub fn write_dataset(path: &Path, samples: &[TaskSample]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s).map_err(|e| Error::Format {
            what: "dataset",
            detail: e.to_string(),
        })?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<TaskSample>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (ix, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TaskSample = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "dataset",
            detail: format!("line {}: {e}", ix + 1),
        })?;
        s.validate()?;
        samples.push(s);
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    Byte,
    Char,
}

/// Symbol table built in first-occurrence order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub mode: TextMode,
    /// Byte value or Unicode scalar value of each id.
    pub symbols: Vec<u32>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let sym = *self.symbols.get(id).ok_or(Error::Index {
                what: "vocabulary id",
                index: id,
                bound: self.symbols.len(),
            })?;
            match self.mode {
                TextMode::Byte => out.push(sym as u8),
                TextMode::Char => {
                    let c = char::from_u32(sym).expect("vocabulary stores scalar values");
                    let mut buf = [0u8; 4];
                    out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                }
            }
        }
        Ok(out)
    }
}

pub fn tokenize_bytes(bytes: &[u8], mode: TextMode) -> Result<(Vec<usize>, Vocab)> {
    let units: Vec<u32> = match mode {
        TextMode::Byte => bytes.iter().map(|&b| b as u32).collect(),
        TextMode::Char => std::str::from_utf8(bytes)
            .map_err(|e| Error::Encoding { offset: e.valid_up_to() })?
            .chars()
            .map(|c| c as u32)
            .collect(),
    };
    let mut index: HashMap<u32, usize> = HashMap::new();
    let mut symbols = Vec::new();
    let ids = units
        .into_iter()
        .map(|u| {
            *index.entry(u).or_insert_with(|| {
                symbols.push(u);
                symbols.len() - 1
            })
        })
        .collect();
    Ok((ids, Vocab { mode, symbols }))
}

pub fn ingest_text(path: &Path, mode: TextMode) -> Result<(Vec<usize>, Vocab)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    tokenize_bytes(&bytes, mode)
}
