//! Policy-lag and training-health diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{NpdError, Result};
use crate::ifd::{IfdRecord, ZoneStats};
use crate::model::{log_sum_exp, Evaluator, TinyLmParams};
use crate::pretrain::Framed;
use crate::sampling::Trajectory;

/// Default watch threshold on the learner-generator divergence.
pub const KL_WATCH: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlLagSample {
    pub step: u64,
    pub kl: f64,
    pub learner_version: u32,
    pub generator_version: u32,
    #[serde(skip)]
    pub num_positions: usize,
}

/// `KL(P ‖ Q)` of the softmaxes of two logit rows, in nats.
pub fn full_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_sum_exp(p_logits);
    let lq = log_sum_exp(q_logits);
    let kl: f64 = p_logits
        .iter()
        .zip(q_logits)
        .map(|(&a, &b)| {
            let log_p = a - lp;
            log_p.exp() * (log_p - (b - lq))
        })
        .sum();
    kl.max(0.0)
}

/// Sum of per-position `KL(first ‖ second)` over response positions, and the
/// number of positions.
fn response_kl(first: &Evaluator<'_>, second: &Evaluator<'_>, prompt: &[u32], response: &[u32]) -> Result<(f64, usize)> {
    if response.is_empty() {
        return Ok((0.0, 0));
    }
    let f = Framed::new(prompt, response);
    let a = first.logits_where(&f.tokens, &f.segment_ids, |t| f.loss_mask[t])?;
    let b = second.logits_where(&f.tokens, &f.segment_ids, |t| f.loss_mask[t])?;
    Ok((a.rows().zip(b.rows()).map(|(x, y)| full_kl(x, y)).sum(), a.len()))
}

/// Mean exact per-token `KL(learner ‖ generator)` over the response
/// positions of probe trajectories sampled from `generator`.
pub fn kl_lag(
    learner: &TinyLmParams,
    generator: &TinyLmParams,
    probes: &[Trajectory],
    step: u64,
) -> Result<KlLagSample> {
    if let Some(t) = probes.iter().find(|t| t.policy_version != generator.version()) {
        return Err(NpdError::Provenance(format!(
            "probe {} comes from policy version {}, generator is version {}",
            t.id,
            t.policy_version,
            generator.version()
        )));
    }
    if learner.dims().vocab_size != generator.dims().vocab_size {
        return Err(NpdError::Config("learner and generator vocabularies differ".into()));
    }
    let le = Evaluator::new(learner);
    let ge = Evaluator::new(generator);
    let parts = probes
        .par_iter()
        .map(|t| response_kl(&le, &ge, &t.prompt, &t.response))
        .collect::<Result<Vec<_>>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, n), &(a, b)| (s + a, n + b));
    Ok(KlLagSample {
        step,
        kl: if n == 0 { 0.0 } else { sum / n as f64 },
        learner_version: learner.version(),
        generator_version: generator.version(),
        num_positions: n,
    })
}

/// Mean per-token `KL(teacher ‖ student)` on ground-truth targets.
pub fn teacher_student_kl(teacher: &TinyLmParams, student: &TinyLmParams, examples: &[Example]) -> Result<f64> {
    let te = Evaluator::new(teacher);
    let se = Evaluator::new(student);
    let parts = examples
        .par_iter()
        .map(|e| response_kl(&te, &se, &e.prompt, &e.target))
        .collect::<Result<Vec<_>>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, n), &(a, b)| (s + a, n + b));
    if n == 0 {
        return Err(NpdError::Input("no target positions for KL".into()));
    }
    Ok(sum / n as f64)
}

pub fn zone_stats(records: &[IfdRecord]) -> ZoneStats {
    ZoneStats::from_zones(records.iter().map(|r| r.zone))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Indices whose value exceeds `median + z · MAD` of a length-`window`
/// neighbourhood centred on it (shifted inward at the series ends).
pub fn spike_report(series: &[f64], window: usize, z_threshold: f64) -> Result<Vec<usize>> {
    if window == 0 || series.len() < window {
        return Err(NpdError::Input(format!(
            "series of length {} shorter than window {window}",
            series.len()
        )));
    }
    let n = series.len();
    let mut spikes = Vec::new();
    let mut buf = vec![0.0; window];
    for i in 0..n {
        let start = i.saturating_sub(window / 2).min(n - window);
        buf.copy_from_slice(&series[start..start + window]);
        let med = median(&mut buf);
        for (b, &x) in buf.iter_mut().zip(&series[start..start + window]) {
            *b = (x - med).abs();
        }
        let mad = median(&mut buf);
        if series[i] > med + z_threshold * mad {
            spikes.push(i);
        }
    }
    Ok(spikes)
}
