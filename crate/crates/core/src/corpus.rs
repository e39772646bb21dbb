//! Synthetic symbolic tasks that supply the prompt pool and the teacher's
//! ground-truth pretraining data.
//!
//! Every prompt is framed `BOS payload… SEP`; every target ends with `EOS`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NpdError, Result};
use crate::io;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const SEP: u32 = 3;
/// First payload token id.
pub const PAYLOAD_START: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
}

impl Vocab {
    pub fn new(size: u32) -> Result<Self> {
        if size < 8 {
            return Err(NpdError::Config(format!("vocab size {size} < 8")));
        }
        Ok(Vocab { size })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn payload_len(&self) -> u32 {
        self.size - PAYLOAD_START
    }

    pub fn contains(&self, token: u32) -> bool {
        token < self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reverse,
    ModAdd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Inclusive payload length range.
    pub prompt_len_range: (usize, usize),
    pub alphabet_size: u32,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let (lo, hi) = self.prompt_len_range;
        if lo < 1 || hi > 64 || lo > hi {
            return Err(NpdError::Config(format!(
                "prompt_len_range ({lo}, {hi}) must satisfy 1 <= min <= max <= 64"
            )));
        }
        if self.alphabet_size < 1 || self.alphabet_size > vocab.payload_len() {
            return Err(NpdError::Config(format!(
                "alphabet_size {} exceeds vocab payload of {} ids",
                self.alphabet_size,
                vocab.payload_len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
}

impl Example {
    /// Payload symbols of the prompt, without the BOS/SEP frame.
    pub fn payload(&self) -> &[u32] {
        &self.prompt[1..self.prompt.len() - 1]
    }
}

/// The task's ground-truth response for a payload, including the closing EOS.
pub fn task_target(kind: TaskKind, alphabet_size: u32, payload: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = match kind {
        TaskKind::Reverse => payload.iter().rev().copied().collect(),
        TaskKind::ModAdd => {
            let mut acc = 0u32;
            payload
                .iter()
                .map(|&t| {
                    acc = (acc + (t - PAYLOAD_START)) % alphabet_size;
                    acc + PAYLOAD_START
                })
                .collect()
        }
    };
    out.push(EOS);
    out
}

/// Generates `n` examples. Example `i` draws from its own RNG stream keyed by
/// `(spec.seed, i)`, so the output is a pure function of `(spec, vocab, n)`.
pub fn gen_corpus(spec: &TaskSpec, vocab: &Vocab, n: usize) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(NpdError::Config("corpus size must be >= 1".into()));
    }
    spec.validate(vocab)?;
    let (lo, hi) = spec.prompt_len_range;
    let examples = (0..n as u64)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(id);
            let len = rng.gen_range(lo..=hi);
            let mut prompt = Vec::with_capacity(len + 2);
            prompt.push(BOS);
            for _ in 0..len {
                prompt.push(PAYLOAD_START + rng.gen_range(0..spec.alphabet_size));
            }
            prompt.push(SEP);
            let target = task_target(spec.kind, spec.alphabet_size, &prompt[1..=len]);
            Example { id, prompt, target }
        })
        .collect();
    Ok(examples)
}

/// Splits into leading train and following eval portions.
pub fn split_corpus(examples: &[Example], fractions: (f64, f64)) -> Result<(Vec<Example>, Vec<Example>)> {
    let (train, eval) = fractions;
    if !(train > 0.0 && eval > 0.0 && train + eval <= 1.0 + 1e-12) {
        return Err(NpdError::Config(format!(
            "split fractions ({train}, {eval}) must be positive and sum to at most 1"
        )));
    }
    let n = examples.len() as f64;
    // The epsilon absorbs representation error such as 0.9 * 100 = 90.00000000000001.
    let n_train = (n * train + 1e-9).floor() as usize;
    let n_eval = ((n * eval + 1e-9).floor() as usize).min(examples.len() - n_train.min(examples.len()));
    if n_train == 0 || n_eval == 0 {
        return Err(NpdError::Config(format!(
            "split of {} examples by ({train}, {eval}) leaves an empty side",
            examples.len()
        )));
    }
    Ok((
        examples[..n_train].to_vec(),
        examples[n_train..n_train + n_eval].to_vec(),
    ))
}

pub fn write_corpus(examples: &[Example], path: &Path) -> Result<()> {
    io::write_jsonl(examples, path)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Example>> {
    io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind, range: (usize, usize), alphabet: u32) -> TaskSpec {
        TaskSpec {
            kind,
            prompt_len_range: range,
            alphabet_size: alphabet,
            seed: 17,
        }
    }

    fn digits(ds: &[u32]) -> Vec<u32> {
        ds.iter().map(|d| d + PAYLOAD_START).collect()
    }

    #[test]
    fn reverse_target() {
        let t = task_target(TaskKind::Reverse, 10, &digits(&[0, 1, 2]));
        assert_eq!(t, [digits(&[2, 1, 0]), vec![EOS]].concat());
    }

    #[test]
    fn modadd_target_matches_hand_computation() {
        // 3, 3+4=7, 7+5=12≡2 (mod 10)
        let t = task_target(TaskKind::ModAdd, 10, &digits(&[3, 4, 5]));
        assert_eq!(t, [digits(&[3, 7, 2]), vec![EOS]].concat());
    }

    #[test]
    fn single_symbol_example_is_stable() {
        let v = Vocab::new(16).unwrap();
        let s = spec(TaskKind::Reverse, (1, 1), 12);
        let a = gen_corpus(&s, &v, 1).unwrap();
        let b = gen_corpus(&s, &v, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].payload().len(), 1);
        assert_eq!(a[0].target, vec![a[0].payload()[0], EOS]);
    }

    #[test]
    fn generated_examples_are_well_framed() {
        let v = Vocab::new(20).unwrap();
        for kind in [TaskKind::Reverse, TaskKind::ModAdd] {
            let ex = gen_corpus(&spec(kind, (1, 5), 16), &v, 300).unwrap();
            for e in &ex {
                assert_eq!(e.prompt[0], BOS);
                assert_eq!(*e.prompt.last().unwrap(), SEP);
                assert_eq!(*e.target.last().unwrap(), EOS);
                assert!(e.prompt.iter().chain(&e.target).all(|&t| v.contains(t)));
                assert!((1..=5).contains(&e.payload().len()));
            }
        }
    }

    #[test]
    fn alphabet_exceeding_payload_is_rejected() {
        let v = Vocab::new(8).unwrap();
        let err = gen_corpus(&spec(TaskKind::Reverse, (1, 3), 5), &v, 3).unwrap_err();
        assert!(matches!(err, NpdError::Config(_)));
    }

    #[test]
    fn vocab_too_small() {
        assert!(Vocab::new(7).is_err());
    }

    #[test]
    fn split_sizes() {
        let v = Vocab::new(16).unwrap();
        let ex = gen_corpus(&spec(TaskKind::Reverse, (1, 3), 12), &v, 100).unwrap();
        let (tr, ev) = split_corpus(&ex, (0.9, 0.1)).unwrap();
        assert_eq!((tr.len(), ev.len()), (90, 10));
        assert!(tr.iter().all(|a| ev.iter().all(|b| a.id != b.id)));

        let (tr, ev) = split_corpus(&ex[..10], (0.5, 0.5)).unwrap();
        assert_eq!((tr.len(), ev.len()), (5, 5));

        assert!(matches!(split_corpus(&ex[..1], (0.5, 0.5)), Err(NpdError::Config(_))));
    }

    #[test]
    fn jsonl_roundtrip() {
        let v = Vocab::new(16).unwrap();
        let ex = gen_corpus(&spec(TaskKind::ModAdd, (1, 4), 12), &v, 25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_corpus(&ex, &p).unwrap();
        let line = std::fs::read_to_string(&p).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert!(first.get("id").is_some() && first.get("prompt").is_some() && first.get("target").is_some());
        assert_eq!(read_corpus(&p).unwrap(), ex);
    }
}
