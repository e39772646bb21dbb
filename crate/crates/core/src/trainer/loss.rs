//! Top-k distillation loss and the CE/KD composite objective.

use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationBlock, Sidecar, TopKAnnotation};
use crate::error::{NpdError, Result};
use crate::model::{backprop, log_sum_exp, masked_sites, softmax_into, Gradient, SeqView, TinyLmParams};
use crate::packing::{Pack, PackFile};

/// How the student side of the top-k KL is normalised. The teacher side is
/// always the softmax over the stored top-k logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdNormalization {
    /// Student log-probabilities from the full-vocabulary softmax.
    Truncated,
    /// Student distribution renormalised over the retained indices.
    Renormalized,
}

/// Adds `scale · ∂KD/∂logits` into `dlogits` and returns the KD value.
pub(crate) fn kd_accumulate(
    student_logits: &[f64],
    ann: &TopKAnnotation,
    mode: KdNormalization,
    scale: f64,
    dlogits: Option<&mut [f64]>,
) -> f64 {
    let t_logits: Vec<f64> = ann.logits.iter().map(|&l| l as f64).collect();
    let t_lse = log_sum_exp(&t_logits);
    let s_sel: Vec<f64> = ann.indices.iter().map(|&i| student_logits[i as usize]).collect();
    let s_lse = match mode {
        KdNormalization::Truncated => log_sum_exp(student_logits),
        KdNormalization::Renormalized => log_sum_exp(&s_sel),
    };
    let mut loss = 0.0;
    let mut pt_sum = 0.0;
    let pt: Vec<f64> = t_logits
        .iter()
        .zip(&s_sel)
        .map(|(&tl, &sl)| {
            let log_pt = tl - t_lse;
            let p = log_pt.exp();
            loss += p * (log_pt - (sl - s_lse));
            pt_sum += p;
            p
        })
        .collect();
    if let Some(d) = dlogits {
        match mode {
            KdNormalization::Truncated => {
                for (g, &s) in d.iter_mut().zip(student_logits) {
                    *g += scale * pt_sum * (s - s_lse).exp();
                }
                for (&i, &p) in ann.indices.iter().zip(&pt) {
                    d[i as usize] -= scale * p;
                }
            }
            KdNormalization::Renormalized => {
                for ((&i, &p), &s) in ann.indices.iter().zip(&pt).zip(&s_sel) {
                    d[i as usize] += scale * ((s - s_lse).exp() - p);
                }
            }
        }
    }
    loss
}

/// KD loss of one student logit row against one annotation.
pub fn kd_loss(student_logits: &[f64], ann: &TopKAnnotation, mode: KdNormalization) -> f64 {
    kd_accumulate(student_logits, ann, mode, 0.0, None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub positions: usize,
}

/// `(1 − λ)·CE + λ·KD`, both means over every masked position of the batch.
/// The CE target is the pack's own response tokens.
pub(crate) fn composite_batch(
    params: &TinyLmParams,
    packs: &[&Pack],
    blocks: &[&AnnotationBlock],
    lambda: f64,
    mode: KdNormalization,
) -> Result<(LossBreakdown, Gradient)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(NpdError::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let v = params.dims().vocab_size;
    let views: Vec<SeqView> = packs.iter().map(|p| p.view()).collect();
    let (ctx, targets) = masked_sites(params.dims(), &views)?;
    let anns: Vec<&TopKAnnotation> = blocks.iter().flat_map(|b| b.entries.iter()).collect();
    if anns.len() != targets.len() {
        return Err(NpdError::Staleness(format!(
            "{} annotations for {} supervised positions",
            anns.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(NpdError::Input("no masked positions".into()));
    }
    if anns.iter().any(|a| a.indices.iter().any(|&i| i as usize >= v)) {
        return Err(NpdError::Input("annotation index outside vocabulary".into()));
    }
    let n = targets.len() as f64;
    let ce_scale = (1.0 - lambda) / n;
    let kd_scale = lambda / n;
    let mut ce_sum = 0.0;
    let mut kd_sum = 0.0;
    let mut probs = vec![0.0; v];
    let mut kd_grad = vec![0.0; v];
    let grad = backprop(params, &ctx, |i, logits, dlogits| {
        let target = targets[i] as usize;
        let lse = softmax_into(logits, &mut probs);
        ce_sum += lse - logits[target];
        kd_grad.iter_mut().for_each(|g| *g = 0.0);
        kd_sum += kd_accumulate(logits, anns[i], mode, 1.0, Some(&mut kd_grad));
        for ((d, &p), &k) in dlogits.iter_mut().zip(&probs).zip(&kd_grad) {
            *d = ce_scale * p + kd_scale * k;
        }
        dlogits[target] -= ce_scale;
    });
    let ce = ce_sum / n;
    let kd = kd_sum / n;
    Ok((
        LossBreakdown {
            total: (1.0 - lambda) * ce + lambda * kd,
            ce,
            kd,
            positions: targets.len(),
        },
        grad,
    ))
}

/// Composite loss of one pack after checking the sidecar belongs to the
/// pack file.
pub fn composite_loss(
    params: &TinyLmParams,
    packs: &PackFile,
    sidecar: &Sidecar,
    pack_index: usize,
    lambda: f64,
    mode: KdNormalization,
) -> Result<(LossBreakdown, Gradient)> {
    sidecar.check_against(packs)?;
    let pack = packs
        .packs
        .get(pack_index)
        .ok_or_else(|| NpdError::Input(format!("no pack {pack_index}")))?;
    composite_batch(params, &[pack], &[&sidecar.blocks[pack_index]], lambda, mode)
}

pub(crate) fn composite_for_indices(
    params: &TinyLmParams,
    packs: &PackFile,
    sidecar: &Sidecar,
    indices: &[usize],
    lambda: f64,
    mode: KdNormalization,
) -> Result<(LossBreakdown, Gradient)> {
    let p: Vec<&Pack> = indices.iter().map(|&i| &packs.packs[i]).collect();
    let b: Vec<&AnnotationBlock> = indices.iter().map(|&i| &sidecar.blocks[i]).collect();
    composite_batch(params, &p, &b, lambda, mode)
}
