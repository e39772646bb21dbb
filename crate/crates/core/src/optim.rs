//! AdamW with global-norm clipping and a cosine learning-rate schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NpdError, Result};
use crate::io::{self, LeReader, LeWriter};
use crate::model::{Gradient, TinyLmParams};

const OPT_MAGIC: &[u8; 8] = b"NPDOPTS1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    pub base_lr: f64,
    pub final_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub total_steps: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            base_lr: 1e-5,
            final_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            total_steps: 1,
        }
    }
}

impl OptConfig {
    /// `final + ½(base − final)(1 + cos(π·step/total))`, held at `final_lr`
    /// past the horizon.
    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.total_steps.max(1);
        let progress = (step.min(total) as f64) / total as f64;
        self.final_lr + 0.5 * (self.base_lr - self.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: OptConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl OptState {
    pub fn new(config: OptConfig, params: &TinyLmParams) -> Self {
        let n = params.data().len();
        OptState {
            config,
            first: vec![0.0; n],
            second: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    pub fn encode(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = LeWriter::with_magic(OPT_MAGIC);
        for x in [c.base_lr, c.final_lr, c.beta1, c.beta2, c.eps, c.weight_decay, c.grad_clip_norm] {
            w.f64(x);
        }
        w.f64(c.total_steps as f64);
        w.f64(self.step as f64);
        w.u32(self.first.len() as u32);
        for &x in self.first.iter().chain(&self.second) {
            w.f64(x);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::open(bytes, OPT_MAGIC, "optimizer state")?;
        let mut f = || r.f64();
        let config = OptConfig {
            base_lr: f()?,
            final_lr: f()?,
            beta1: f()?,
            beta2: f()?,
            eps: f()?,
            weight_decay: f()?,
            grad_clip_norm: f()?,
            total_steps: f()? as u64,
        };
        let step = r.f64()? as u64;
        let n = r.u32()? as usize;
        if r.remaining() != n * 16 {
            return Err(NpdError::Format("optimizer state: moment size mismatch".into()));
        }
        let first = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let second = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Ok(OptState {
            config,
            first,
            second,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::atomic_write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&io::read_file(path)?)
    }
}

/// One AdamW update. A non-finite gradient is rejected before anything is
/// mutated.
pub fn adamw_step(params: &mut TinyLmParams, grad: &Gradient, opt: &mut OptState) -> Result<()> {
    if grad.dims() != params.dims() || opt.first.len() != params.data().len() {
        return Err(NpdError::Input("gradient/optimizer shape mismatch".into()));
    }
    if !grad.is_finite() {
        return Err(NpdError::Numerical("non-finite gradient; step rejected".into()));
    }
    let c = opt.config;
    let norm = grad.global_norm();
    let clip = if c.grad_clip_norm > 0.0 && norm > c.grad_clip_norm {
        c.grad_clip_norm / norm
    } else {
        1.0
    };
    let lr = c.lr_at(opt.step);
    let t = (opt.step + 1) as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (((p, &g), m), v) in params
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(opt.first.iter_mut())
        .zip(opt.second.iter_mut())
    {
        let g = g * clip;
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        *p -= lr * (update + c.weight_decay * *p);
    }
    opt.step += 1;
    params.bump_version();
    Ok(())
}

/// The gradient actually applied after clipping, exposed for tests.
pub fn clipped(grad: &Gradient, clip_norm: f64) -> Gradient {
    let norm = grad.global_norm();
    let mut out = grad.clone();
    if clip_norm > 0.0 && norm > clip_norm {
        let s = clip_norm / norm;
        out.data_mut().iter_mut().for_each(|g| *g *= s);
    }
    out
}
