//! Synthetic sequence tasks used as desk-scale pretraining and adaptation targets.
//!
//! Sequence tasks are laid out as `[BOS, x1..xn, SEP, y1..yn]` and scored only
//! on the `y` positions. Token 0 is BOS, token 1 is SEP, symbols start at 2.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream, StreamRng};

pub const BOS: usize = 0;
pub const SEP: usize = 1;
pub const FIRST_SYMBOL: usize = 2;

const CORPUS: &str = "the small model reads a line and writes the next letter. \
it learns the shape of words before it learns their sense. \
a frozen model keeps what it knows while a light adapter bends its output. \
short runs on a single core are enough to see the loss fall. \
each block passes its state to the next and the last one speaks. ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ShiftCipher,
    CharLmCorpus,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "shift-cipher" | "shift_cipher" => Ok(TaskKind::ShiftCipher),
            "char-lm-corpus" | "char_lm_corpus" => Ok(TaskKind::CharLmCorpus),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

fn default_alphabet() -> usize {
    14
}
fn default_len() -> usize {
    6
}
fn default_shift() -> usize {
    3
}
fn default_split_seed() -> u64 {
    1234
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of payload symbols (ignored by the corpus task).
    #[serde(default = "default_alphabet")]
    pub alphabet_size: usize,
    /// Payload length `n`, or the window length for the corpus task.
    #[serde(default = "default_len")]
    pub seq_len: usize,
    /// Offset used by the shift cipher.
    #[serde(default = "default_shift")]
    pub shift: usize,
    /// Seed of the held-out evaluation split.
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, alphabet_size: usize, seq_len: usize) -> Self {
        Self {
            kind,
            alphabet_size,
            seq_len,
            shift: default_shift(),
            split_seed: default_split_seed(),
        }
    }

    fn corpus_alphabet() -> Vec<char> {
        let mut chars: Vec<char> = CORPUS.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        chars
    }

    /// Input length seen by the model.
    pub fn model_seq_len(&self) -> usize {
        match self.kind {
            TaskKind::CharLmCorpus => self.seq_len,
            _ => 2 * self.seq_len + 1,
        }
    }

    /// Number of distinct symbols the task emits.
    pub fn symbols(&self) -> usize {
        match self.kind {
            TaskKind::CharLmCorpus => Self::corpus_alphabet().len(),
            _ => self.alphabet_size,
        }
    }

    pub fn validate(&self, vocab_size: usize, max_seq_len: usize) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::Config("task.seq_len must be positive".into()));
        }
        if self.kind != TaskKind::CharLmCorpus && self.alphabet_size < 2 {
            return Err(Error::Config(
                "task.alphabet_size must be at least 2".into(),
            ));
        }
        if FIRST_SYMBOL + self.symbols() > vocab_size {
            return Err(Error::Config(format!(
                "task needs {} symbols plus 2 specials but vocab_size is {vocab_size}",
                self.symbols()
            )));
        }
        if self.model_seq_len() > max_seq_len {
            return Err(Error::Config(format!(
                "task sequences of length {} exceed max_seq_len {max_seq_len}",
                self.model_seq_len()
            )));
        }
        if self.kind == TaskKind::CharLmCorpus && self.seq_len + 1 >= CORPUS.chars().count() / 10 {
            return Err(Error::Config(
                "task.seq_len too long for the built-in corpus".into(),
            ));
        }
        Ok(())
    }

    fn transform(&self, x: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => x.to_vec(),
            TaskKind::Reverse => x.iter().rev().copied().collect(),
            TaskKind::ShiftCipher => x
                .iter()
                .map(|&t| FIRST_SYMBOL + (t - FIRST_SYMBOL + self.shift) % self.alphabet_size)
                .collect(),
            TaskKind::CharLmCorpus => unreachable!("corpus task has no payload transform"),
        }
    }

    fn sample_one(&self, rng: &mut StreamRng, eval: bool) -> (Vec<usize>, Vec<Option<usize>>) {
        if self.kind == TaskKind::CharLmCorpus {
            let alphabet = Self::corpus_alphabet();
            let ids: Vec<usize> = CORPUS
                .chars()
                .map(|c| FIRST_SYMBOL + alphabet.binary_search(&c).expect("char in alphabet"))
                .collect();
            let split = ids.len() * 9 / 10;
            let (lo, hi) = if eval { (split, ids.len()) } else { (0, split) };
            let start = rng.random_range(lo..hi - self.seq_len);
            let window = &ids[start..=start + self.seq_len];
            let inputs = window[..self.seq_len].to_vec();
            let targets = window[1..].iter().map(|&t| Some(t)).collect();
            return (inputs, targets);
        }
        let n = self.seq_len;
        let x: Vec<usize> = (0..n)
            .map(|_| FIRST_SYMBOL + rng.random_range(0..self.alphabet_size))
            .collect();
        let y = self.transform(&x);
        let mut full = Vec::with_capacity(2 * n + 2);
        full.push(BOS);
        full.extend_from_slice(&x);
        full.push(SEP);
        full.extend_from_slice(&y);
        let inputs = full[..2 * n + 1].to_vec();
        let targets = (0..2 * n + 1)
            .map(|p| (p > n).then(|| full[p + 1]))
            .collect();
        (inputs, targets)
    }

    pub fn sample_batch(&self, rng: &mut StreamRng, batch_size: usize) -> Batch {
        self.sample(rng, batch_size, false)
    }

    /// Fixed held-out batch drawn from the split seed.
    pub fn eval_batch(&self, size: usize) -> Batch {
        let mut rng = stream(self.split_seed, Stream::Eval);
        self.sample(&mut rng, size, true)
    }

    fn sample(&self, rng: &mut StreamRng, size: usize, eval: bool) -> Batch {
        let mut inputs = Vec::with_capacity(size);
        let mut targets = Vec::new();
        for _ in 0..size {
            let (i, t) = self.sample_one(rng, eval);
            inputs.push(i);
            targets.extend(t);
        }
        Batch { inputs, targets }
    }
}

/// Equal-length input sequences and per-position targets (flattened row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Option<usize>>,
}
