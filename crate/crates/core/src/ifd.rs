//! Instruction-following difficulty (IFD) scoring, the teacher-student
//! differential, zone classification and sample selection.
//!
//! `IFD = L(A | Q) / L(A)` where both terms are mean per-token CE over the
//! response; `L(A)` presents the response alone after a virtual BOS window.
//! `Δ = IFD_teacher − IFD_student`. Zones:
//!
//! | condition                          | zone                 |
//! |------------------------------------|----------------------|
//! | Δ < 0                              | Degenerate           |
//! | Δ > τ                              | CognitiveDisconnect  |
//! | 0 ≤ Δ ≤ τ, IFD_T ≤ 1 (or gate off) | Proximal             |
//! | 0 ≤ Δ ≤ τ, IFD_T > 1, gate on      | TeacherUnconfirmed   |
//! | response unscoreable               | DegenerateLength     |

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NpdError, Result};
use crate::io;
use crate::model::{Evaluator, TinyLmParams};
use crate::sampling::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Zone {
    Degenerate,
    Proximal,
    CognitiveDisconnect,
    TeacherUnconfirmed,
    DegenerateLength,
}

impl Zone {
    pub const ALL: [Zone; 5] = [
        Zone::Degenerate,
        Zone::Proximal,
        Zone::CognitiveDisconnect,
        Zone::TeacherUnconfirmed,
        Zone::DegenerateLength,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub tau: f64,
    pub require_teacher_quality: bool,
    pub epsilon_div: f64,
    pub min_response_len: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            tau: 0.8,
            require_teacher_quality: true,
            epsilon_div: 1e-8,
            min_response_len: 1,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.epsilon_div > 0.0) {
            return Err(NpdError::Config(format!(
                "tau ({}) and epsilon_div ({}) must be positive",
                self.tau, self.epsilon_div
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IfdRecord {
    pub id: u64,
    pub loss_cond_student: Option<f64>,
    pub loss_uncond_student: Option<f64>,
    pub loss_cond_teacher: Option<f64>,
    pub loss_uncond_teacher: Option<f64>,
    pub ifd_student: Option<f64>,
    pub ifd_teacher: Option<f64>,
    pub delta_ifd: Option<f64>,
    pub zone: Zone,
}

/// Per-line shape of `scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreLine {
    pub id: u64,
    pub ifd_student: Option<f64>,
    pub ifd_teacher: Option<f64>,
    pub delta_ifd: Option<f64>,
    pub zone: Zone,
}

impl From<&IfdRecord> for ScoreLine {
    fn from(r: &IfdRecord) -> Self {
        ScoreLine {
            id: r.id,
            ifd_student: r.ifd_student,
            ifd_teacher: r.ifd_teacher,
            delta_ifd: r.delta_ifd,
            zone: r.zone,
        }
    }
}

impl From<ScoreLine> for IfdRecord {
    fn from(s: ScoreLine) -> Self {
        IfdRecord {
            id: s.id,
            loss_cond_student: None,
            loss_uncond_student: None,
            loss_cond_teacher: None,
            loss_uncond_teacher: None,
            ifd_student: s.ifd_student,
            ifd_teacher: s.ifd_teacher,
            delta_ifd: s.delta_ifd,
            zone: s.zone,
        }
    }
}

/// `(loss_cond, loss_uncond, ifd)` of `response` under one model.
pub fn ifd(eval: &Evaluator<'_>, prompt: &[u32], response: &[u32], epsilon_div: f64) -> Result<(f64, f64, f64)> {
    let (cond, uncond) = ifd_losses(eval, prompt, response)?;
    let ratio = ifd_ratio(cond, uncond, epsilon_div)?;
    Ok((cond, uncond, ratio))
}

fn ifd_losses(eval: &Evaluator<'_>, prompt: &[u32], response: &[u32]) -> Result<(f64, f64)> {
    if response.is_empty() {
        return Err(NpdError::Input("empty response".into()));
    }
    let joined: Vec<u32> = prompt.iter().chain(response).copied().collect();
    let mask: Vec<bool> = (0..joined.len()).map(|i| i >= prompt.len()).collect();
    let cond = eval.mean_ce(&joined, &vec![0; joined.len()], &mask)?;
    let uncond = eval.mean_ce(response, &vec![0; response.len()], &vec![true; response.len()])?;
    Ok((cond, uncond))
}

pub fn ifd_ratio(loss_cond: f64, loss_uncond: f64, epsilon_div: f64) -> Result<f64> {
    if loss_uncond < epsilon_div {
        return Err(NpdError::DivisionGuard {
            loss: loss_uncond,
            epsilon: epsilon_div,
        });
    }
    Ok(loss_cond / loss_uncond)
}

pub fn delta_ifd(ifd_teacher: f64, ifd_student: f64) -> f64 {
    ifd_teacher - ifd_student
}

/// Zone from the differential and teacher IFD alone. `None` inputs mark a
/// record that could not be scored.
pub fn zone_for(delta: Option<f64>, ifd_teacher: Option<f64>, cfg: &FilterConfig) -> Zone {
    let (Some(delta), Some(ifd_t)) = (delta, ifd_teacher) else {
        return Zone::DegenerateLength;
    };
    if !delta.is_finite() || !ifd_t.is_finite() {
        return Zone::DegenerateLength;
    }
    if delta < 0.0 {
        Zone::Degenerate
    } else if delta > cfg.tau {
        Zone::CognitiveDisconnect
    } else if cfg.require_teacher_quality && ifd_t > 1.0 {
        Zone::TeacherUnconfirmed
    } else {
        Zone::Proximal
    }
}

pub fn classify_zone(rec: &IfdRecord, cfg: &FilterConfig) -> Zone {
    if rec.zone == Zone::DegenerateLength {
        return Zone::DegenerateLength;
    }
    zone_for(rec.delta_ifd, rec.ifd_teacher, cfg)
}

/// Scores one trajectory under both models.
pub fn score_trajectory(
    teacher: &Evaluator<'_>,
    student: &Evaluator<'_>,
    traj: &Trajectory,
    cfg: &FilterConfig,
) -> Result<IfdRecord> {
    let mut rec = IfdRecord {
        id: traj.id,
        loss_cond_student: None,
        loss_uncond_student: None,
        loss_cond_teacher: None,
        loss_uncond_teacher: None,
        ifd_student: None,
        ifd_teacher: None,
        delta_ifd: None,
        zone: Zone::DegenerateLength,
    };
    if traj.response.is_empty() || traj.response.len() < cfg.min_response_len {
        return Ok(rec);
    }
    let (sc, su) = ifd_losses(student, &traj.prompt, &traj.response)?;
    let (tc, tu) = ifd_losses(teacher, &traj.prompt, &traj.response)?;
    rec.loss_cond_student = Some(sc);
    rec.loss_uncond_student = Some(su);
    rec.loss_cond_teacher = Some(tc);
    rec.loss_uncond_teacher = Some(tu);
    rec.ifd_student = ifd_ratio(sc, su, cfg.epsilon_div).ok();
    rec.ifd_teacher = ifd_ratio(tc, tu, cfg.epsilon_div).ok();
    if let (Some(t), Some(s)) = (rec.ifd_teacher, rec.ifd_student) {
        rec.delta_ifd = Some(delta_ifd(t, s));
        rec.zone = zone_for(rec.delta_ifd, rec.ifd_teacher, cfg);
    }
    Ok(rec)
}

/// Scores every trajectory in parallel, preserving input order.
pub fn score_trajectories(
    teacher: &TinyLmParams,
    student: &TinyLmParams,
    trajectories: &[Trajectory],
    cfg: &FilterConfig,
) -> Result<Vec<IfdRecord>> {
    cfg.validate()?;
    if teacher.dims().vocab_size != student.dims().vocab_size {
        return Err(NpdError::Config("teacher and student vocabularies differ".into()));
    }
    if let Some(t) = trajectories.iter().find(|t| t.policy_version != student.version()) {
        return Err(NpdError::Provenance(format!(
            "trajectory {} was generated by policy version {}, scoring against student version {}",
            t.id,
            t.policy_version,
            student.version()
        )));
    }
    let te = Evaluator::new(teacher);
    let se = Evaluator::new(student);
    trajectories
        .par_iter()
        .map(|t| score_trajectory(&te, &se, t, cfg))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZoneStats {
    pub total: usize,
    pub degenerate: usize,
    pub proximal: usize,
    pub cognitive_disconnect: usize,
    pub teacher_unconfirmed: usize,
    pub degenerate_length: usize,
}

impl ZoneStats {
    pub fn from_zones(zones: impl IntoIterator<Item = Zone>) -> Self {
        let mut counts = [0usize; 5];
        for z in zones {
            counts[z.index()] += 1;
        }
        ZoneStats {
            total: counts.iter().sum(),
            degenerate: counts[0],
            proximal: counts[1],
            cognitive_disconnect: counts[2],
            teacher_unconfirmed: counts[3],
            degenerate_length: counts[4],
        }
    }

    pub fn count(&self, zone: Zone) -> usize {
        match zone {
            Zone::Degenerate => self.degenerate,
            Zone::Proximal => self.proximal,
            Zone::CognitiveDisconnect => self.cognitive_disconnect,
            Zone::TeacherUnconfirmed => self.teacher_unconfirmed,
            Zone::DegenerateLength => self.degenerate_length,
        }
    }

    /// Zero for every zone when there are no records.
    pub fn fraction(&self, zone: Zone) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.count(zone) as f64 / self.total as f64
        }
    }

    pub fn summary(&self) -> ZoneSummary {
        let f = |z| self.fraction(z);
        ZoneSummary {
            counts: self.clone(),
            fractions: ZoneFractions {
                degenerate: f(Zone::Degenerate),
                proximal: f(Zone::Proximal),
                cognitive_disconnect: f(Zone::CognitiveDisconnect),
                teacher_unconfirmed: f(Zone::TeacherUnconfirmed),
                degenerate_length: f(Zone::DegenerateLength),
            },
            reference_early_percent: ReferenceRow::EARLY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneFractions {
    pub degenerate: f64,
    pub proximal: f64,
    pub cognitive_disconnect: f64,
    pub teacher_unconfirmed: f64,
    pub degenerate_length: f64,
}

/// Published early-training zone percentages, reported next to measured
/// fractions for context only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub degenerate: f64,
    pub proximal: f64,
    pub cognitive_disconnect: f64,
}

impl ReferenceRow {
    pub const EARLY: ReferenceRow = ReferenceRow {
        degenerate: 2.60,
        proximal: 96.20,
        cognitive_disconnect: 1.20,
    };
}

/// Zone-stats summary JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneSummary {
    pub counts: ZoneStats,
    pub fractions: ZoneFractions,
    pub reference_early_percent: ReferenceRow,
}

/// Re-classifies every record under `cfg` and keeps the Proximal ones.
pub fn filter(records: &[IfdRecord], cfg: &FilterConfig) -> (BTreeSet<u64>, ZoneStats) {
    let zones: Vec<Zone> = records.iter().map(|r| classify_zone(r, cfg)).collect();
    let kept = records
        .iter()
        .zip(&zones)
        .filter(|(_, &z)| z == Zone::Proximal)
        .map(|(r, _)| r.id)
        .collect();
    (kept, ZoneStats::from_zones(zones))
}

/// Selection with filtering disabled: every scoreable record is kept.
pub fn keep_all_scoreable(records: &[IfdRecord], cfg: &FilterConfig) -> (BTreeSet<u64>, ZoneStats) {
    let zones: Vec<Zone> = records.iter().map(|r| classify_zone(r, cfg)).collect();
    let kept = records
        .iter()
        .zip(&zones)
        .filter(|(_, &z)| z != Zone::DegenerateLength)
        .map(|(r, _)| r.id)
        .collect();
    (kept, ZoneStats::from_zones(zones))
}

pub fn write_scores(records: &[IfdRecord], path: &Path) -> Result<()> {
    let lines: Vec<ScoreLine> = records.iter().map(ScoreLine::from).collect();
    io::write_jsonl(&lines, path)
}

pub fn read_scores(path: &Path) -> Result<Vec<IfdRecord>> {
    let lines: Vec<ScoreLine> = io::read_jsonl(path)?;
    Ok(lines.into_iter().map(IfdRecord::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, Tensor};

    fn cfg() -> FilterConfig {
        FilterConfig::default()
    }

    #[test]
    fn delta_examples() {
        assert!((delta_ifd(0.9, 0.6) - 0.3).abs() < 1e-15);
        assert_eq!(delta_ifd(0.7, 0.7), 0.0);
        assert!((delta_ifd(0.5, 0.8) + 0.3).abs() < 1e-15);
    }

    #[test]
    fn zone_examples() {
        let c = cfg();
        assert_eq!(zone_for(Some(-0.01), Some(0.5), &c), Zone::Degenerate);
        assert_eq!(zone_for(Some(0.3), Some(0.9), &c), Zone::Proximal);
        assert_eq!(zone_for(Some(0.81), Some(0.9), &c), Zone::CognitiveDisconnect);
        assert_eq!(zone_for(Some(0.0), Some(0.9), &c), Zone::Proximal);
        assert_eq!(zone_for(Some(0.8), Some(0.9), &c), Zone::Proximal);
        assert_eq!(zone_for(Some(0.3), Some(1.2), &c), Zone::TeacherUnconfirmed);
        let lax = FilterConfig {
            require_teacher_quality: false,
            ..c
        };
        assert_eq!(zone_for(Some(0.3), Some(1.2), &lax), Zone::Proximal);
        assert_eq!(zone_for(None, Some(0.5), &c), Zone::DegenerateLength);
    }

    fn dims() -> ModelDims {
        ModelDims {
            vocab_size: 10,
            window: 4,
            embed_dim: 3,
            hidden_dim: 5,
        }
    }

    #[test]
    fn zero_model_has_unit_ifd() {
        let p = TinyLmParams::zeros(dims()).unwrap();
        let e = Evaluator::new(&p);
        let (c, u, r) = ifd(&e, &[0, 4, 5, 3], &[5, 4, 1], 1e-8).unwrap();
        assert!((c - 10f64.ln()).abs() < 1e-12 && (u - 10f64.ln()).abs() < 1e-12);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn context_blind_model_has_unit_ifd() {
        let mut p = TinyLmParams::init(dims(), 3).unwrap();
        p.tensor_mut(Tensor::Embed).iter_mut().for_each(|x| *x = 0.0);
        let e = Evaluator::new(&p);
        let (c, u, r) = ifd(&e, &[0, 4, 5, 3], &[5, 4, 1], 1e-8).unwrap();
        assert_eq!(c, u);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn guard_and_empty_response() {
        assert!(matches!(ifd_ratio(0.1, 1e-9, 1e-8), Err(NpdError::DivisionGuard { .. })));
        let p = TinyLmParams::zeros(dims()).unwrap();
        let e = Evaluator::new(&p);
        let t = Trajectory {
            id: 4,
            prompt: vec![0, 4, 3],
            response: vec![],
            policy_version: 0,
            sample_index: 0,
            seed: 0,
        };
        let rec = score_trajectory(&e, &e, &t, &cfg()).unwrap();
        assert_eq!(rec.zone, Zone::DegenerateLength);
    }

    #[test]
    fn boundary_values_are_proximal_and_kept() {
        let mk = |id, d| IfdRecord {
            id,
            loss_cond_student: None,
            loss_uncond_student: None,
            loss_cond_teacher: None,
            loss_uncond_teacher: None,
            ifd_student: Some(0.1),
            ifd_teacher: Some(0.5),
            delta_ifd: Some(d),
            zone: Zone::Proximal,
        };
        let recs = vec![mk(1, 0.0), mk(2, 0.8), mk(3, 0.4)];
        let (kept, stats) = filter(&recs, &cfg());
        assert_eq!(kept.into_iter().collect::<Vec<_>>(), [1, 2, 3]);
        assert_eq!(stats.proximal, 3);
        assert_eq!(stats.fraction(Zone::Proximal), 1.0);
    }

    #[test]
    fn scores_roundtrip_preserves_filter_inputs() {
        let recs: Vec<IfdRecord> = (0..50)
            .map(|i| {
                let s = 0.3 + (i as f64 * 0.137).sin().abs();
                let t = 0.2 + (i as f64 * 0.71).cos().abs();
                IfdRecord {
                    id: i,
                    loss_cond_student: None,
                    loss_uncond_student: None,
                    loss_cond_teacher: None,
                    loss_uncond_teacher: None,
                    ifd_student: Some(s),
                    ifd_teacher: Some(t),
                    delta_ifd: Some(t - s),
                    zone: zone_for(Some(t - s), Some(t), &cfg()),
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        write_scores(&recs, &p).unwrap();
        let back = read_scores(&p).unwrap();
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(ScoreLine::from(a), ScoreLine::from(b));
        }
    }
}
