//! Batch generation of student trajectories from a frozen policy snapshot.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, EOS};
use crate::error::{NpdError, Result};
use crate::io;
use crate::model::{Evaluator, TinyLmParams};
use crate::pretrain::argmax;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    pub tokens: Vec<u32>,
}

impl From<&Example> for Prompt {
    fn from(e: &Example) -> Self {
        Prompt {
            id: e.id,
            tokens: e.prompt.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub prompt: Vec<u32>,
    /// Sampled tokens, including the terminating EOS when one was drawn.
    pub response: Vec<u32>,
    pub policy_version: u32,
    pub sample_index: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Path 0 is greedy; any further paths are sampled.
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub temperature: f64,
    pub max_len: usize,
    pub samples_per_prompt: u32,
    pub mode: DecodeMode,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            temperature: 1.0,
            max_len: 8,
            samples_per_prompt: 1,
            mode: DecodeMode::Sample,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(NpdError::Config("max_len must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(NpdError::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if self.samples_per_prompt == 0 {
            return Err(NpdError::Config("samples_per_prompt must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_greedy_path(&self, sample_index: u32) -> bool {
        self.mode == DecodeMode::Greedy && sample_index == 0
    }
}

/// Trajectory id for path `sample_index` of prompt `prompt_id`.
pub fn trajectory_id(prompt_id: u64, sample_index: u32, samples_per_prompt: u32) -> u64 {
    prompt_id * samples_per_prompt as u64 + sample_index as u64
}

/// Counter-keyed stream: the ChaCha key is `(seed, prompt id, sample index)`,
/// so each trajectory's randomness is independent of scheduling.
pub fn trajectory_rng(seed: u64, prompt_id: u64, sample_index: u32) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&prompt_id.to_le_bytes());
    key[16..20].copy_from_slice(&sample_index.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// Inverse-CDF draw from `softmax(logits / temperature)`.
fn sample_token(logits: &[f64], temperature: f64, u: f64, scratch: &mut [f64]) -> usize {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (s, &l) in scratch.iter_mut().zip(logits) {
        *s = ((l - m) / temperature).exp();
        z += *s;
    }
    let target = u * z;
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &s) in scratch.iter().enumerate() {
        if s > 0.0 {
            last_nonzero = i;
        }
        acc += s;
        if target < acc {
            return i;
        }
    }
    last_nonzero
}

fn roll_out(
    eval: &Evaluator<'_>,
    prompt: &Prompt,
    sample_index: u32,
    cfg: &GenConfig,
    seed: u64,
) -> Trajectory {
    let v = eval.dims().vocab_size;
    let greedy = cfg.is_greedy_path(sample_index);
    let mut rng = trajectory_rng(seed, prompt.id, sample_index);
    let mut history = prompt.tokens.clone();
    let mut logits = vec![0.0; v];
    let mut scratch = vec![0.0; v];
    let mut response = Vec::new();
    while response.len() < cfg.max_len {
        eval.next_logits(&history, &mut logits);
        let tok = if greedy {
            argmax(&logits)
        } else {
            sample_token(&logits, cfg.temperature, rng.gen::<f64>(), &mut scratch)
        } as u32;
        response.push(tok);
        history.push(tok);
        if tok == EOS {
            break;
        }
    }
    Trajectory {
        id: trajectory_id(prompt.id, sample_index, cfg.samples_per_prompt),
        prompt: prompt.tokens.clone(),
        response,
        policy_version: eval.params().version(),
        sample_index,
        seed,
    }
}

/// Samples `samples_per_prompt` responses per prompt. Output order is
/// prompt-major, then sample index, regardless of thread count.
pub fn generate(params: &TinyLmParams, prompts: &[Prompt], cfg: &GenConfig, seed: u64) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(NpdError::Input("no prompts to generate from".into()));
    }
    if !params.is_finite() {
        return Err(NpdError::Numerical("policy snapshot has non-finite parameters".into()));
    }
    let v = params.dims().vocab_size;
    if let Some(p) = prompts.iter().find(|p| p.tokens.is_empty() || p.tokens.iter().any(|&t| t as usize >= v)) {
        return Err(NpdError::Input(format!("prompt {} is empty or out of vocabulary", p.id)));
    }
    let eval = Evaluator::new(params);
    let k = cfg.samples_per_prompt;
    Ok((0..prompts.len() * k as usize)
        .into_par_iter()
        .map(|i| roll_out(&eval, &prompts[i / k as usize], (i % k as usize) as u32, cfg, seed))
        .collect())
}

pub fn write_trajectories(trajectories: &[Trajectory], path: &Path) -> Result<()> {
    io::write_jsonl(trajectories, path)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn model() -> TinyLmParams {
        TinyLmParams::init(
            ModelDims {
                vocab_size: 12,
                window: 3,
                embed_dim: 4,
                hidden_dim: 8,
            },
            11,
        )
        .unwrap()
    }

    fn prompts(n: u64) -> Vec<Prompt> {
        (0..n)
            .map(|id| Prompt {
                id,
                tokens: vec![0, 4 + (id % 7) as u32, 5, 3],
            })
            .collect()
    }

    #[test]
    fn multipath_greedy_first() {
        let cfg = GenConfig {
            samples_per_prompt: 3,
            mode: DecodeMode::Greedy,
            ..GenConfig::default()
        };
        let p = model();
        let out = generate(&p, &prompts(4), &cfg, 5).unwrap();
        assert_eq!(out.len(), 12);
        let single = GenConfig {
            samples_per_prompt: 1,
            ..cfg
        };
        let greedy = generate(&p, &prompts(4), &single, 99).unwrap();
        for (i, chunk) in out.chunks(3).enumerate() {
            let idx: Vec<u32> = chunk.iter().map(|t| t.sample_index).collect();
            assert_eq!(idx, [0, 1, 2]);
            assert_eq!(chunk[0].response, greedy[i].response);
        }
    }

    #[test]
    fn tiny_temperature_matches_greedy() {
        let p = model();
        let greedy = GenConfig {
            mode: DecodeMode::Greedy,
            ..GenConfig::default()
        };
        let cold = GenConfig {
            temperature: 1e-6,
            ..GenConfig::default()
        };
        let a = generate(&p, &prompts(20), &greedy, 1).unwrap();
        let b = generate(&p, &prompts(20), &cold, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.response, y.response);
        }
    }

    #[test]
    fn zero_max_len_is_config_error() {
        let cfg = GenConfig {
            max_len: 0,
            ..GenConfig::default()
        };
        assert!(matches!(generate(&model(), &prompts(1), &cfg, 0), Err(NpdError::Config(_))));
    }

    #[test]
    fn provenance_and_length_bounds() {
        let mut p = model();
        p.bump_version();
        p.bump_version();
        let cfg = GenConfig {
            max_len: 5,
            samples_per_prompt: 2,
            ..GenConfig::default()
        };
        for t in generate(&p, &prompts(30), &cfg, 3).unwrap() {
            assert_eq!(t.policy_version, 2);
            assert!(t.response.len() <= 5 && !t.response.is_empty());
            let eos = t.response.iter().position(|&x| x == EOS);
            if let Some(i) = eos {
                assert_eq!(i, t.response.len() - 1);
            } else {
                assert_eq!(t.response.len(), 5);
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let p = model();
        let cfg = GenConfig {
            samples_per_prompt: 2,
            ..GenConfig::default()
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| generate(&p, &prompts(50), &cfg, 8).unwrap());
        let b = four.install(|| generate(&p, &prompts(50), &cfg, 8).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn jsonl_roundtrip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let cfg = GenConfig {
            samples_per_prompt: 2,
            ..GenConfig::default()
        };
        let trajs = generate(&model(), &prompts(500), &cfg, 4).unwrap();
        assert_eq!(trajs.len(), 1000);
        write_trajectories(&trajs, &path).unwrap();
        assert_eq!(read_trajectories(&path).unwrap(), trajs);

        write_trajectories(&[], &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
        assert!(read_trajectories(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let trajs = generate(&model(), &prompts(3), &GenConfig::default(), 4).unwrap();
        write_trajectories(&trajs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 10]).unwrap();
        match read_trajectories(&path) {
            Err(NpdError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
