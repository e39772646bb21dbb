#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use npd_core::annotation::{annotate, Sidecar};
use npd_core::corpus::{BOS, EOS, PAYLOAD_START, SEP};
use npd_core::model::{ModelDims, TinyLmParams};
use npd_core::packing::{pack, PackConfig, PackFile, PackStrategy};
use npd_core::sampling::Trajectory;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_dims(vocab_size: usize) -> ModelDims {
    ModelDims {
        vocab_size,
        window: 3,
        embed_dim: 4,
        hidden_dim: 6,
    }
}

pub fn random_trajectory(rng: &mut impl Rng, id: u64, vocab: usize, version: u32) -> Trajectory {
    let plen = rng.gen_range(1..=3);
    let mut prompt = vec![BOS];
    prompt.extend((0..plen).map(|_| rng.gen_range(PAYLOAD_START..vocab as u32)));
    prompt.push(SEP);
    let rlen = rng.gen_range(1..=5);
    let mut response: Vec<u32> = (0..rlen).map(|_| rng.gen_range(PAYLOAD_START..vocab as u32)).collect();
    if rng.gen_bool(0.5) {
        response.push(EOS);
    }
    Trajectory {
        id,
        prompt,
        response,
        policy_version: version,
        sample_index: 0,
        seed: 0,
    }
}

pub fn random_trajectories(rng: &mut impl Rng, n: usize, vocab: usize, version: u32) -> Vec<Trajectory> {
    (0..n as u64).map(|id| random_trajectory(rng, id, vocab, version)).collect()
}

/// Packs `trajectories` and annotates them with `teacher` at top-`k`.
pub fn packed(teacher: &TinyLmParams, trajectories: &[Trajectory], pack_len: usize, k: usize) -> (PackFile, Sidecar) {
    let cfg = PackConfig {
        pack_len,
        strategy: PackStrategy::FirstFitDecreasing,
    };
    let packs = PackFile::new(pack(trajectories, &cfg).unwrap(), pack_len, teacher.dims().vocab_size).unwrap();
    let sidecar = annotate(teacher, &packs, k).unwrap();
    (packs, sidecar)
}

/// Independent two-pass softmax used by the oracles.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn brute_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let p = softmax(p_logits);
    let q = softmax(q_logits);
    p.iter().zip(&q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}
