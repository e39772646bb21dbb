//! Student optimisation with the composite loss, and the sparse-refresh
//! orchestration of generate → score → filter → pack → annotate → train.

mod loss;
mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{composite_loss, kd_loss, KdNormalization, LossBreakdown};
pub use metrics::{phase_breakdown, read_metrics, write_metrics, MetricRow, Phase, PhaseShare};

use crate::annotation::{annotate, Sidecar};
use crate::error::{NpdError, Result};
use crate::ifd::{filter, keep_all_scoreable, score_trajectories, FilterConfig, IfdRecord, Zone, ZoneStats};
use crate::model::TinyLmParams;
use crate::monitor::{kl_lag, KL_WATCH};
use crate::optim::{adamw_step, OptConfig, OptState};
use crate::packing::{pack, PackConfig, PackFile};
use crate::sampling::{generate, GenConfig, Prompt, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub lambda: f64,
    pub top_k: usize,
    pub refresh_interval: usize,
    pub total_epochs: usize,
    pub kd_normalization: KdNormalization,
    /// Packs per optimizer step.
    pub batch_packs: usize,
    /// When false every scoreable trajectory is trained on.
    pub filter_enabled: bool,
    /// Prompts whose first trajectory is used to probe policy lag.
    pub probe_prompts: usize,
    pub kl_watch: f64,
    pub seed: u64,
    pub pack: PackConfig,
    pub optim: OptConfig,
    pub gen: GenConfig,
    pub filter: FilterConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lambda: 0.9,
            top_k: 10,
            refresh_interval: 5,
            total_epochs: 10,
            kd_normalization: KdNormalization::Renormalized,
            batch_packs: 4,
            filter_enabled: true,
            probe_prompts: 64,
            kl_watch: KL_WATCH,
            seed: 0,
            pack: PackConfig::default(),
            optim: OptConfig {
                base_lr: 1e-2,
                final_lr: 1e-3,
                ..OptConfig::default()
            },
            gen: GenConfig::default(),
            filter: FilterConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(NpdError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.refresh_interval == 0 || self.total_epochs == 0 || self.batch_packs == 0 || self.top_k == 0 {
            return Err(NpdError::Config(
                "refresh_interval, total_epochs, batch_packs and top_k must be >= 1".into(),
            ));
        }
        self.gen.validate()?;
        self.filter.validate()
    }

    /// Seed of the rollout that starts from policy `version`.
    pub fn rollout_seed(&self, version: u32) -> u64 {
        splitmix(self.seed ^ splitmix(version as u64 + 0x5EED))
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        rng
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Epochs `e ∈ 1..=E` with `(e − 1) mod K = 0`.
pub fn refresh_schedule(total_epochs: usize, interval: usize) -> BTreeSet<usize> {
    if interval == 0 {
        return BTreeSet::new();
    }
    (1..=total_epochs).filter(|e| (e - 1) % interval == 0).collect()
}

/// Training data of the current refresh. Replaced wholesale, never extended.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    pub packs: PackFile,
    pub sidecar: Sidecar,
    pub generator_version: u32,
}

impl ReplayBuffer {
    pub fn new(packs: PackFile, sidecar: Sidecar, generator_version: u32) -> Result<Self> {
        sidecar.check_against(&packs)?;
        Ok(ReplayBuffer {
            packs,
            sidecar,
            generator_version,
        })
    }
}

/// Wall time spent in each phase, in milliseconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseTimes(pub BTreeMap<Phase, f64>);

impl PhaseTimes {
    fn add(&mut self, phase: Phase, ms: f64) {
        *self.0.entry(phase).or_default() += ms;
    }
}

pub(crate) fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64() * 1e3)
}

/// Everything one refresh produces before training.
#[derive(Debug, Clone)]
pub struct RefreshArtifacts {
    pub trajectories: Vec<Trajectory>,
    pub records: Vec<IfdRecord>,
    pub kept: BTreeSet<u64>,
    pub stats: ZoneStats,
    pub buffer: ReplayBuffer,
    pub times: PhaseTimes,
}

pub fn rollout(cfg: &RunConfig, student: &TinyLmParams, pool: &[Prompt]) -> Result<Vec<Trajectory>> {
    generate(student, pool, &cfg.gen, cfg.rollout_seed(student.version()))
}

pub fn select(cfg: &RunConfig, records: &[IfdRecord]) -> (BTreeSet<u64>, ZoneStats) {
    if cfg.filter_enabled {
        filter(records, &cfg.filter)
    } else {
        keep_all_scoreable(records, &cfg.filter)
    }
}

pub fn pack_selected(
    cfg: &RunConfig,
    trajectories: &[Trajectory],
    kept: &BTreeSet<u64>,
    vocab_size: usize,
) -> Result<PackFile> {
    let selected: Vec<Trajectory> = trajectories.iter().filter(|t| kept.contains(&t.id)).cloned().collect();
    if selected.is_empty() {
        return Err(NpdError::FilterStarvation {
            total: trajectories.len(),
        });
    }
    PackFile::new(pack(&selected, &cfg.pack)?, cfg.pack.pack_len, vocab_size)
}

/// Phases 1 and 2 against a frozen snapshot of the student.
pub fn refresh(
    cfg: &RunConfig,
    teacher: &TinyLmParams,
    snapshot: &TinyLmParams,
    pool: &[Prompt],
) -> Result<RefreshArtifacts> {
    let mut times = PhaseTimes::default();
    let (trajectories, ms) = timed(|| rollout(cfg, snapshot, pool));
    let trajectories = trajectories?;
    times.add(Phase::Rollout, ms);

    let (records, ms) = timed(|| score_trajectories(teacher, snapshot, &trajectories, &cfg.filter));
    let records = records?;
    times.add(Phase::Ifd, ms);

    let ((kept, stats), ms) = timed(|| select(cfg, &records));
    times.add(Phase::Filter, ms);

    let (packs, ms) = timed(|| pack_selected(cfg, &trajectories, &kept, teacher.dims().vocab_size));
    let packs = packs?;
    times.add(Phase::Pack, ms);

    let (sidecar, ms) = timed(|| annotate(teacher, &packs, cfg.top_k));
    let sidecar = sidecar?;
    times.add(Phase::Annotate, ms);

    let buffer = ReplayBuffer::new(packs, sidecar, snapshot.version())?;
    Ok(RefreshArtifacts {
        trajectories,
        records,
        kept,
        stats,
        buffer,
        times,
    })
}

/// Probe trajectories for policy-lag measurement: the first path of the
/// first `n` prompts.
pub fn probe_set(trajectories: &[Trajectory], n: usize) -> Vec<Trajectory> {
    trajectories.iter().filter(|t| t.sample_index == 0).take(n).cloned().collect()
}

/// Optimizer- and lag-monitoring context for one refresh interval.
pub struct TrainInterval<'a> {
    pub cfg: &'a RunConfig,
    pub buffer: &'a ReplayBuffer,
    pub generator: &'a TinyLmParams,
    pub probes: &'a [Trajectory],
    pub stats: &'a ZoneStats,
}

fn zone_fields(row: &mut MetricRow, stats: &ZoneStats) {
    row.zone_degenerate_frac = Some(stats.fraction(Zone::Degenerate) + stats.fraction(Zone::DegenerateLength));
    row.zone_proximal_frac = Some(stats.fraction(Zone::Proximal));
    row.zone_disconnect_frac = Some(stats.fraction(Zone::CognitiveDisconnect));
    row.zone_unconfirmed_frac = Some(stats.fraction(Zone::TeacherUnconfirmed));
}

impl TrainInterval<'_> {
    /// Runs `epochs` over the buffer. `epochs` must start at a refresh epoch
    /// and `student` must be the generator snapshot at that point.
    pub fn run(
        &self,
        student: &mut TinyLmParams,
        opt: Option<OptState>,
        epochs: RangeInclusive<usize>,
        metrics: &mut Vec<MetricRow>,
    ) -> Result<OptState> {
        let cfg = self.cfg;
        cfg.validate()?;
        let schedule = refresh_schedule(cfg.total_epochs, cfg.refresh_interval);
        let (&first, &last) = (epochs.start(), epochs.end());
        if !schedule.contains(&first) || last > cfg.total_epochs || last < first {
            return Err(NpdError::Config(format!(
                "epoch range {first}..={last} must start at a refresh epoch within 1..={}",
                cfg.total_epochs
            )));
        }
        if last > first && schedule.range(first + 1..=last).next().is_some() {
            return Err(NpdError::Config(format!("epoch range {first}..={last} spans a refresh")));
        }
        if student.version() != self.buffer.generator_version || self.generator.version() != self.buffer.generator_version {
            return Err(NpdError::Provenance(format!(
                "buffer generated by version {}, student is version {}, generator is version {}",
                self.buffer.generator_version,
                student.version(),
                self.generator.version()
            )));
        }
        let n_packs = self.buffer.packs.packs.len();
        let batches = n_packs.div_ceil(cfg.batch_packs) as u64;
        let mut opt = opt.unwrap_or_else(|| OptState::new(cfg.optim, student));
        opt.config.total_steps = opt.step() + (cfg.total_epochs - first + 1) as u64 * batches;

        let sync = kl_lag(student, self.generator, self.probes, opt.step())?;
        let mut row = MetricRow::new(opt.step(), first, Phase::Sync);
        row.kl_lag = Some(sync.kl);
        zone_fields(&mut row, self.stats);
        metrics.push(row);

        let mut order: Vec<usize> = (0..n_packs).collect();
        for epoch in epochs {
            let mut rng = cfg.epoch_rng(epoch);
            order.sort_unstable();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_packs) {
                let lr = opt.current_lr();
                let (res, ms) = timed(|| -> Result<LossBreakdown> {
                    let (loss, grad) = loss::composite_for_indices(
                        student,
                        &self.buffer.packs,
                        &self.buffer.sidecar,
                        chunk,
                        cfg.lambda,
                        cfg.kd_normalization,
                    )?;
                    if !loss.total.is_finite() {
                        return Err(NpdError::Numerical(format!("loss diverged at step {}", opt.step())));
                    }
                    adamw_step(student, &grad, &mut opt)?;
                    Ok(loss)
                });
                let loss = res?;
                let lag = kl_lag(student, self.generator, self.probes, opt.step())?;
                let mut row = MetricRow::new(opt.step(), epoch, Phase::Train);
                row.loss_total = Some(loss.total);
                row.loss_ce = Some(loss.ce);
                row.loss_kd = Some(loss.kd);
                row.lr = Some(lr);
                row.kl_lag = Some(lag.kl);
                row.wall_ms = ms;
                zone_fields(&mut row, self.stats);
                metrics.push(row);
            }
        }
        Ok(opt)
    }
}

#[derive(Debug, Clone)]
pub struct RefreshReport {
    pub epoch: usize,
    pub generator_version: u32,
    pub stats: ZoneStats,
    pub trajectories: usize,
    pub kept: usize,
    pub packs: usize,
    pub positions: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub student: TinyLmParams,
    pub opt: OptState,
    pub metrics: Vec<MetricRow>,
    pub refreshes: Vec<RefreshReport>,
}

impl RunOutput {
    /// Largest policy lag observed on training steps.
    pub fn max_kl_lag(&self) -> f64 {
        self.metrics
            .iter()
            .filter(|r| r.phase == Phase::Train)
            .filter_map(|r| r.kl_lag)
            .fold(0.0, f64::max)
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.metrics
            .iter()
            .filter(|r| r.phase == Phase::Train)
            .filter_map(|r| r.loss_total)
            .collect()
    }
}

fn phase_rows(metrics: &mut Vec<MetricRow>, step: u64, epoch: usize, times: &PhaseTimes, stats: &ZoneStats) {
    for (&phase, &ms) in &times.0 {
        let mut row = MetricRow::new(step, epoch, phase);
        row.wall_ms = ms;
        zone_fields(&mut row, stats);
        metrics.push(row);
    }
}

/// The full loop: refresh at every scheduled epoch, train every epoch.
pub fn run_npd(
    cfg: &RunConfig,
    teacher: &TinyLmParams,
    student: TinyLmParams,
    pool: &[Prompt],
) -> Result<RunOutput> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(NpdError::Input("empty prompt pool".into()));
    }
    let schedule: Vec<usize> = refresh_schedule(cfg.total_epochs, cfg.refresh_interval).into_iter().collect();
    let mut student = student;
    let mut opt: Option<OptState> = None;
    let mut metrics = Vec::new();
    let mut refreshes = Vec::new();
    for (i, &start) in schedule.iter().enumerate() {
        let end = schedule.get(i + 1).map_or(cfg.total_epochs, |&next| next - 1);
        let generator = student.clone();
        let art = refresh(cfg, teacher, &generator, pool)?;
        let step = opt.as_ref().map_or(0, |o| o.step());
        phase_rows(&mut metrics, step, start, &art.times, &art.stats);
        refreshes.push(RefreshReport {
            epoch: start,
            generator_version: art.buffer.generator_version,
            stats: art.stats.clone(),
            trajectories: art.trajectories.len(),
            kept: art.kept.len(),
            packs: art.buffer.packs.packs.len(),
            positions: art.buffer.sidecar.position_count(),
        });
        let probes = probe_set(&art.trajectories, cfg.probe_prompts);
        let interval = TrainInterval {
            cfg,
            buffer: &art.buffer,
            generator: &generator,
            probes: &probes,
            stats: &art.stats,
        };
        opt = Some(interval.run(&mut student, opt, start..=end, &mut metrics)?);
    }
    Ok(RunOutput {
        student,
        opt: opt.expect("schedule always contains epoch 1"),
        metrics,
        refreshes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(refresh_schedule(10, 5).into_iter().collect::<Vec<_>>(), [1, 6]);
        assert_eq!(refresh_schedule(10, 10).into_iter().collect::<Vec<_>>(), [1]);
        assert_eq!(refresh_schedule(4, 1).into_iter().collect::<Vec<_>>(), [1, 2, 3, 4]);
        assert_eq!(refresh_schedule(10, 3).into_iter().collect::<Vec<_>>(), [1, 4, 7, 10]);
    }

    #[test]
    fn defaults_match_reference_run() {
        let c = RunConfig::default();
        assert_eq!(c.lambda, 0.9);
        assert_eq!(c.top_k, 10);
        assert_eq!(c.filter.tau, 0.8);
        assert_eq!(c.kl_watch, 0.10);
    }
}
