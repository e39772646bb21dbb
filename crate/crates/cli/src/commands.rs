use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use npd_core::annotation::{annotate, Sidecar};
use npd_core::corpus::{gen_corpus, read_corpus, split_corpus, write_corpus, Example};
use npd_core::ifd::{read_scores, score_trajectories, write_scores, ZoneStats};
use npd_core::io;
use npd_core::monitor::{kl_lag, spike_report, teacher_student_kl};
use npd_core::optim::OptState;
use npd_core::packing::PackFile;
use npd_core::pretrain::{pretrain, token_accuracy};
use npd_core::sampling::{read_trajectories, write_trajectories, Prompt, Trajectory};
use npd_core::trainer::{
    pack_selected, phase_breakdown, probe_set, read_metrics, refresh_schedule, rollout, run_npd, select,
    write_metrics, MetricRow, Phase, ReplayBuffer, TrainInterval,
};
use npd_core::{NpdError, Result, TinyLmParams};

use crate::config::{Loaded, Role};
use crate::meta::{phase_wall_ms, read_meta, write_meta, Meta};
use crate::{Cli, Command, TrainArgs};

struct Ctx {
    loaded: Loaded,
}

impl Ctx {
    fn meta(&self, command: &str, policy_version: Option<u32>, start: Instant, detail: serde_json::Value) -> Meta {
        Meta {
            command: command.to_string(),
            config_hash: self.loaded.hash.clone(),
            seed: self.loaded.cfg.seed,
            policy_version,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            detail,
        }
    }

    fn pool(&self) -> Result<Vec<Prompt>> {
        let corpus = read_corpus(&self.loaded.cfg.paths.corpus)?;
        let n = self.loaded.cfg.pool_size.min(corpus.len());
        if n == 0 {
            return Err(NpdError::Input("empty prompt pool".into()));
        }
        Ok(corpus[..n].iter().map(Prompt::from).collect())
    }
}

fn pick(flag: Option<PathBuf>, default: &Path) -> PathBuf {
    flag.unwrap_or_else(|| default.to_path_buf())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| NpdError::Format(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn single_version(trajectories: &[Trajectory]) -> Result<Option<u32>> {
    let versions: BTreeSet<u32> = trajectories.iter().map(|t| t.policy_version).collect();
    match versions.len() {
        0 => Ok(None),
        1 => Ok(versions.into_iter().next()),
        _ => Err(NpdError::Provenance(format!(
            "trajectories mix policy versions {versions:?}"
        ))),
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    if matches!(cli.command, Command::Run { .. }) && cli.config.is_none() {
        return Err(NpdError::Config("run requires --config".into()));
    }
    let ctx = Ctx {
        loaded: Loaded::load(cli.config.as_deref(), cli.seed)?,
    };
    match cli.command {
        Command::Corpus { out, eval_out } => corpus(&ctx, out, eval_out),
        Command::Pretrain { role, out } => pretrain_cmd(&ctx, role.into(), out),
        Command::Gen { student, out } => gen(&ctx, student, out),
        Command::Score {
            teacher,
            student,
            trajectories,
            out,
        } => score(&ctx, teacher, student, trajectories, out),
        Command::Filter {
            scores,
            tau,
            no_filter,
            out,
            stats_out,
        } => filter_cmd(&ctx, scores, tau, no_filter, out, stats_out),
        Command::Pack { trajectories, kept, out } => pack_cmd(&ctx, trajectories, kept, out),
        Command::Annotate { teacher, packs, out } => annotate_cmd(&ctx, teacher, packs, out),
        Command::Train(args) => train(&ctx, args),
        Command::Run { student, out } => run(&ctx, student, out),
        Command::Klmon {
            learner,
            generator,
            trajectories,
            step,
        } => klmon(&ctx, &learner, &generator, trajectories, step),
        Command::Stats { metrics } => stats(&ctx, metrics),
    }
}

fn corpus(ctx: &Ctx, out: Option<PathBuf>, eval_out: Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.loaded.cfg;
    let examples = gen_corpus(&cfg.task_spec(), &cfg.vocab()?, cfg.task.examples)?;
    let (train, eval) = split_corpus(&examples, (cfg.task.train_fraction, cfg.task.eval_fraction))?;
    let out = pick(out, &cfg.paths.corpus);
    let eval_out = pick(eval_out, &cfg.paths.eval_corpus);
    write_corpus(&train, &out)?;
    write_corpus(&eval, &eval_out)?;
    let m = ctx.meta("corpus", None, start, json!({ "train": train.len(), "eval": eval.len() }));
    write_meta(&out, &m)?;
    write_meta(&eval_out, &m)?;
    print_json(&json!({ "train": train.len(), "eval": eval.len() }))
}

fn pretrain_cmd(ctx: &Ctx, role: Role, out: Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.loaded.cfg;
    let train = read_corpus(&cfg.paths.corpus)?;
    let eval = read_corpus(&cfg.paths.eval_corpus)?;
    let n = cfg.model(role).examples.map_or(train.len(), |n| n.min(train.len()));
    let init = TinyLmParams::init(cfg.dims(role), cfg.init_seed(role))?;
    let report = pretrain(init, &train[..n], &eval, &cfg.pretrain_config(role))?;
    let out = pick(
        out,
        match role {
            Role::Teacher => &cfg.paths.teacher,
            Role::Student => &cfg.paths.student_init,
        },
    );
    report.params.save(&out)?;
    let summary = json!({
        "role": role,
        "examples": n,
        "steps": report.steps,
        "final_train_loss": report.final_train_loss,
        "eval_accuracy": report.eval_accuracy,
        "policy_version": report.params.version(),
    });
    write_meta(&out, &ctx.meta("pretrain", Some(report.params.version()), start, summary.clone()))?;
    print_json(&summary)
}

fn gen(ctx: &Ctx, student: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.loaded.cfg;
    let student = TinyLmParams::load(&pick(student, &cfg.paths.student))?;
    let trajectories = rollout(&cfg.run, &student, &ctx.pool()?)?;
    let out = pick(out, &cfg.paths.trajectories);
    write_trajectories(&trajectories, &out)?;
    let detail = json!({ "trajectories": trajectories.len() });
    write_meta(&out, &ctx.meta("gen", Some(student.version()), start, detail.clone()))?;
    print_json(&detail)
}

fn score(
    ctx: &Ctx,
    teacher: Option<PathBuf>,
    student: Option<PathBuf>,
    trajectories: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.loaded.cfg;
    let teacher = TinyLmParams::load(&pick(teacher, &cfg.paths.teacher))?;
    let student = TinyLmParams::load(&pick(student, &cfg.paths.student))?;
    let trajectories = read_trajectories(&pick(trajectories, &cfg.paths.trajectories))?;
    let records = score_trajectories(&teacher, &student, &trajectories, &cfg.run.filter)?;
    let out = pick(out, &cfg.paths.scores);
    write_scores(&records, &out)?;
    let detail = json!({ "scored": records.len() });
    write_meta(&out, &ctx.meta("score", Some(student.version()), start, detail.clone()))?;
    print_json(&detail)
}

fn optional_version(artifact: &Path) -> Result<Option<u32>> {
    match read_meta(artifact) {
        Ok(m) => Ok(m.policy_version),
        Err(NpdError::MissingArtifact(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn filter_cmd(
    ctx: &Ctx,
    scores: Option<PathBuf>,
    tau: Option<f64>,
    no_filter: bool,
    out: Option<PathBuf>,
    stats_out: Option<PathBuf>,
) -> Result<()> {
    let start = Instant::now();
    let mut run = ctx.loaded.cfg.run.clone();
    if let Some(t) = tau {
        run.filter.tau = t;
    }
    run.filter_enabled &= !no_filter;
    run.filter.validate()?;
    let paths = &ctx.loaded.cfg.paths;
    let scores = pick(scores, &paths.scores);
    let records = read_scores(&scores)?;
    let (kept, stats) = select(&run, &records);
    let out = pick(out, &paths.kept);
    let stats_out = pick(stats_out, &paths.zone_stats);
    io::write_json(&kept.iter().collect::<Vec<_>>(), &out)?;
    let summary = stats.summary();
    io::write_json(&summary, &stats_out)?;
    let detail = json!({ "tau": run.filter.tau, "filter_enabled": run.filter_enabled, "kept": kept.len() });
    write_meta(&out, &ctx.meta("filter", optional_version(&scores)?, start, detail))?;
    print_json(&summary)
}

fn pack_cmd(ctx: &Ctx, trajectories: Option<PathBuf>, kept: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.loaded.cfg;
    let trajectories = read_trajectories(&pick(trajectories, &cfg.paths.trajectories))?;
    let kept: BTreeSet<u64> = io::read_json::<Vec<u64>>(&pick(kept, &cfg.paths.kept))?.into_iter().collect();
    let ids: BTreeSet<u64> = trajectories.iter().map(|t| t.id).collect();
    if let Some(missing) = kept.iter().find(|id| !ids.contains(id)) {
        return Err(NpdError::Staleness(format!(
            "kept id {missing} is not among the trajectories"
        )));
    }
    let version = single_version(&trajectories)?;
    let packs = pack_selected(&cfg.run, &trajectories, &kept, cfg.task.vocab_size as usize)?;
    packs.validate()?;
    let out = pick(out, &cfg.paths.packs);
    packs.save(&out)?;
    let source_ids: Vec<&Vec<u64>> = packs.packs.iter().map(|p| &p.source_ids).collect();
    let detail = json!({ "packs": packs.packs.len(), "crc": packs.crc, "source_ids": source_ids });
    write_meta(&out, &ctx.meta("pack", version, start, detail))?;
    print_json(&json!({ "packs": packs.packs.len(), "crc": packs.crc }))
}

fn annotate_cmd(ctx: &Ctx, teacher: Option<PathBuf>, packs: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.loaded.cfg;
    let teacher = TinyLmParams::load(&pick(teacher, &cfg.paths.teacher))?;
    let packs_path = pick(packs, &cfg.paths.packs);
    let packs = PackFile::load(&packs_path)?;
    let sidecar = annotate(&teacher, &packs, cfg.run.top_k)?;
    let out = pick(out, &cfg.paths.sidecar);
    sidecar.save(&out)?;
    let detail = json!({ "positions": sidecar.position_count(), "k": sidecar.k, "pack_file_crc": sidecar.pack_file_crc });
    write_meta(&out, &ctx.meta("annotate", optional_version(&packs_path)?, start, detail.clone()))?;
    print_json(&detail)
}

fn train(ctx: &Ctx, args: TrainArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.loaded.cfg;
    let run = &cfg.run;
    let schedule = refresh_schedule(run.total_epochs, run.refresh_interval);
    let first = args.start_epoch;
    if !schedule.contains(&first) {
        return Err(NpdError::Config(format!("epoch {first} is not a refresh epoch")));
    }
    let end = schedule.range(first + 1..).next().map_or(run.total_epochs, |&e| e - 1);

    let student_path = pick(args.student, &cfg.paths.student);
    let mut student = TinyLmParams::load(&student_path)?;
    let packs_path = pick(args.packs, &cfg.paths.packs);
    let sidecar_path = pick(args.sidecar, &cfg.paths.sidecar);
    let packs = PackFile::load(&packs_path)?;
    let sidecar = Sidecar::load_for(&sidecar_path, &packs)?;
    let generator_version = read_meta(&packs_path)?
        .policy_version
        .ok_or_else(|| NpdError::Provenance("pack file has no generator version".into()))?;
    let buffer = ReplayBuffer::new(packs, sidecar, generator_version)?;

    let trajectories = read_trajectories(&cfg.paths.trajectories)?;
    if single_version(&trajectories)? != Some(generator_version) {
        return Err(NpdError::Staleness(
            "trajectory file was not produced by the pack generator".into(),
        ));
    }
    let probes = probe_set(&trajectories, run.probe_prompts);
    let (_, stats) = select(run, &read_scores(&cfg.paths.scores)?);

    let resuming = first != 1;
    let opt = if resuming {
        Some(OptState::load(&cfg.paths.optimizer)?)
    } else {
        None
    };
    let mut metrics = if resuming {
        match read_metrics(&cfg.paths.metrics) {
            Ok(m) => m,
            Err(NpdError::MissingArtifact(_)) => Vec::new(),
            Err(e) => return Err(e),
        }
    } else {
        Vec::new()
    };
    let step0 = opt.as_ref().map_or(0, OptState::step);
    let phase_sources = [
        (Phase::Rollout, &cfg.paths.trajectories),
        (Phase::Annotate, &sidecar_path),
        (Phase::Ifd, &cfg.paths.scores),
        (Phase::Filter, &cfg.paths.kept),
        (Phase::Pack, &packs_path),
    ];
    for (phase, path) in phase_sources {
        if let Some(ms) = phase_wall_ms(path, generator_version)? {
            let mut row = MetricRow::new(step0, first, phase);
            row.wall_ms = ms;
            fill_zones(&mut row, &stats);
            metrics.push(row);
        }
    }

    let generator = student.clone();
    let interval = TrainInterval {
        cfg: run,
        buffer: &buffer,
        generator: &generator,
        probes: &probes,
        stats: &stats,
    };
    let opt = interval.run(&mut student, opt, first..=end, &mut metrics)?;

    let out = pick(args.out, &student_path);
    student.save(&out)?;
    opt.save(&cfg.paths.optimizer)?;
    write_metrics(&cfg.paths.metrics, &metrics)?;
    let detail = json!({
        "epochs": [first, end],
        "steps": opt.step(),
        "generator_version": generator_version,
        "checkpoint_crc": student.checkpoint_crc(),
    });
    write_meta(&out, &ctx.meta("train", Some(student.version()), start, detail.clone()))?;
    print_json(&detail)
}

fn fill_zones(row: &mut MetricRow, stats: &ZoneStats) {
    use npd_core::ifd::Zone;
    row.zone_degenerate_frac = Some(stats.fraction(Zone::Degenerate) + stats.fraction(Zone::DegenerateLength));
    row.zone_proximal_frac = Some(stats.fraction(Zone::Proximal));
    row.zone_disconnect_frac = Some(stats.fraction(Zone::CognitiveDisconnect));
    row.zone_unconfirmed_frac = Some(stats.fraction(Zone::TeacherUnconfirmed));
}

fn held_out(path: &Path) -> Result<Option<Vec<Example>>> {
    match read_corpus(path) {
        Ok(e) if !e.is_empty() => Ok(Some(e)),
        Ok(_) | Err(NpdError::MissingArtifact(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn run(ctx: &Ctx, student: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.loaded.cfg;
    let teacher = TinyLmParams::load(&cfg.paths.teacher)?;
    let student = TinyLmParams::load(&pick(student, &cfg.paths.student_init))?;
    let eval = held_out(&cfg.paths.eval_corpus)?;
    let kl_initial = eval
        .as_deref()
        .map(|e| teacher_student_kl(&teacher, &student, e))
        .transpose()?;
    let output = run_npd(&cfg.run, &teacher, student, &ctx.pool()?)?;
    let out = pick(out, &cfg.paths.final_checkpoint);
    output.student.save(&out)?;
    write_metrics(&cfg.paths.metrics, &output.metrics)?;

    let (kl_final, eval_accuracy) = match eval.as_deref() {
        Some(e) => (
            Some(teacher_student_kl(&teacher, &output.student, e)?),
            Some(token_accuracy(&output.student, e)?),
        ),
        None => (None, None),
    };
    let losses = output.train_losses();
    let spikes = if losses.len() >= 9 {
        Some(spike_report(&losses, 9, 3.0)?.len())
    } else {
        None
    };
    let refreshes: Vec<_> = output
        .refreshes
        .iter()
        .map(|r| {
            json!({
                "epoch": r.epoch,
                "generator_version": r.generator_version,
                "trajectories": r.trajectories,
                "kept": r.kept,
                "packs": r.packs,
                "positions": r.positions,
                "zones": r.stats.summary(),
            })
        })
        .collect();
    let max_lag = output.max_kl_lag();
    let summary = json!({
        "final_checkpoint": out,
        "checkpoint_crc": output.student.checkpoint_crc(),
        "steps": output.opt.step(),
        "refreshes": refreshes,
        "max_kl_lag": max_lag,
        "kl_watch_exceeded": max_lag > cfg.run.kl_watch,
        "teacher_kl_initial": kl_initial,
        "teacher_kl_final": kl_final,
        "eval_accuracy": eval_accuracy,
        "loss_spikes": spikes,
    });
    write_meta(&out, &ctx.meta("run", Some(output.student.version()), start, summary.clone()))?;
    print_json(&summary)
}

fn klmon(ctx: &Ctx, learner: &Path, generator: &Path, trajectories: Option<PathBuf>, step: u64) -> Result<()> {
    let cfg = &ctx.loaded.cfg;
    let learner = TinyLmParams::load(learner)?;
    let generator = TinyLmParams::load(generator)?;
    let trajectories = read_trajectories(&pick(trajectories, &cfg.paths.trajectories))?;
    let probes = probe_set(&trajectories, cfg.run.probe_prompts);
    print_json(&kl_lag(&learner, &generator, &probes, step)?)
}

fn stats(ctx: &Ctx, metrics: Option<PathBuf>) -> Result<()> {
    let rows = read_metrics(&pick(metrics, &ctx.loaded.cfg.paths.metrics))?;
    println!("{:<24} {:>12} {:>11}", "Phase", "Time (s)", "Percentage");
    for s in phase_breakdown(&rows) {
        println!("{:<24} {:>12.3} {:>10.2}%", s.phase.label(), s.wall_ms / 1e3, s.percent);
    }
    Ok(())
}
