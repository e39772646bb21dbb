//! Supervised pretraining on ground-truth targets; produces the teacher and
//! warm-started students.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{NpdError, Result};
use crate::model::{ce_loss_and_grad_batch, Evaluator, SeqView, TinyLmParams};
use crate::optim::{adamw_step, OptConfig, OptState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `total_steps` is overwritten with `epochs × batches`.
    pub optim: OptConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 32,
            seed: 0,
            optim: OptConfig {
                base_lr: 3e-3,
                final_lr: 3e-4,
                weight_decay: 0.01,
                ..OptConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub params: TinyLmParams,
    pub final_train_loss: Option<f64>,
    pub eval_accuracy: f64,
    pub steps: u64,
}

/// Prompt ⧺ target as one segment, supervised on the target tokens only.
pub(crate) struct Framed {
    pub tokens: Vec<u32>,
    pub segment_ids: Vec<u16>,
    pub loss_mask: Vec<bool>,
}

impl Framed {
    pub fn new(prompt: &[u32], response: &[u32]) -> Self {
        let tokens: Vec<u32> = prompt.iter().chain(response).copied().collect();
        let loss_mask = (0..tokens.len()).map(|i| i >= prompt.len()).collect();
        Framed {
            segment_ids: vec![0; tokens.len()],
            tokens,
            loss_mask,
        }
    }

    pub fn view(&self) -> SeqView<'_> {
        SeqView {
            tokens: &self.tokens,
            segment_ids: &self.segment_ids,
            loss_mask: &self.loss_mask,
        }
    }
}

pub fn pretrain(
    mut params: TinyLmParams,
    train: &[Example],
    eval: &[Example],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if train.is_empty() {
        return Err(NpdError::Input("pretraining corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(NpdError::Config("batch_size must be >= 1".into()));
    }
    let framed: Vec<Framed> = train.iter().map(|e| Framed::new(&e.prompt, &e.target)).collect();
    let batches_per_epoch = framed.len().div_ceil(cfg.batch_size);
    let mut opt = OptState::new(
        OptConfig {
            total_steps: (cfg.epochs * batches_per_epoch) as u64,
            ..cfg.optim
        },
        &params,
    );
    let mut order: Vec<usize> = (0..framed.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut last_loss = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let views: Vec<SeqView> = chunk.iter().map(|&i| framed[i].view()).collect();
            let (loss, grad) = ce_loss_and_grad_batch(&params, &views)?;
            if !loss.is_finite() {
                return Err(NpdError::Numerical(format!("pretraining diverged in epoch {epoch}")));
            }
            adamw_step(&mut params, &grad, &mut opt)?;
            epoch_loss += loss;
        }
        last_loss = Some(epoch_loss / batches_per_epoch as f64);
    }
    let eval_accuracy = if eval.is_empty() { f64::NAN } else { token_accuracy(&params, eval)? };
    Ok(PretrainReport {
        params,
        final_train_loss: last_loss,
        eval_accuracy,
        steps: opt.step(),
    })
}

/// Teacher-forced next-token accuracy over target tokens.
pub fn token_accuracy(params: &TinyLmParams, examples: &[Example]) -> Result<f64> {
    let eval = Evaluator::new(params);
    let mut correct = 0usize;
    let mut total = 0usize;
    for e in examples {
        let f = Framed::new(&e.prompt, &e.target);
        let rows = eval.logits_where(&f.tokens, &f.segment_ids, |t| f.loss_mask[t])?;
        for (row, &target) in rows.rows().zip(&e.target) {
            total += 1;
            if argmax(row) == target as usize {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(NpdError::Input("no target tokens to score".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, TaskKind, TaskSpec, Vocab};
    use crate::model::ModelDims;

    #[test]
    fn zero_epochs_returns_params_unchanged() {
        let dims = ModelDims {
            vocab_size: 12,
            window: 3,
            embed_dim: 4,
            hidden_dim: 6,
        };
        let p = TinyLmParams::init(dims, 2).unwrap();
        let spec = TaskSpec {
            kind: TaskKind::Reverse,
            prompt_len_range: (1, 2),
            alphabet_size: 8,
            seed: 1,
        };
        let ex = gen_corpus(&spec, &Vocab::new(12).unwrap(), 20).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let r = pretrain(p.clone(), &ex, &ex, &cfg).unwrap();
        assert_eq!(r.params, p);
        assert_eq!(r.steps, 0);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
