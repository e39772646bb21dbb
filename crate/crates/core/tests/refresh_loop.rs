mod common;

use npd_core::corpus::{gen_corpus, TaskKind, TaskSpec, Vocab};
use npd_core::error::NpdError;
use npd_core::ifd::FilterConfig;
use npd_core::model::{ModelDims, TinyLmParams};
use npd_core::monitor::kl_lag;
use npd_core::optim::OptConfig;
use npd_core::packing::PackConfig;
use npd_core::sampling::{GenConfig, Prompt};
use npd_core::trainer::{phase_breakdown, refresh_schedule, run_npd, Phase, RunConfig};

fn setup() -> (TinyLmParams, TinyLmParams, Vec<Prompt>) {
    let vocab = Vocab::new(12).unwrap();
    let spec = TaskSpec {
        kind: TaskKind::Reverse,
        prompt_len_range: (1, 3),
        alphabet_size: 8,
        seed: 3,
    };
    let pool = gen_corpus(&spec, &vocab, 60).unwrap().iter().map(Prompt::from).collect();
    let dims = ModelDims {
        vocab_size: 12,
        window: 6,
        embed_dim: 6,
        hidden_dim: 8,
    };
    let teacher = TinyLmParams::init(dims, 1).unwrap();
    let student = TinyLmParams::init(ModelDims { hidden_dim: 4, ..dims }, 2).unwrap();
    (teacher, student, pool)
}

fn config() -> RunConfig {
    RunConfig {
        total_epochs: 10,
        refresh_interval: 5,
        top_k: 4,
        filter_enabled: false,
        probe_prompts: 16,
        seed: 9,
        pack: PackConfig {
            pack_len: 64,
            ..PackConfig::default()
        },
        gen: GenConfig {
            samples_per_prompt: 2,
            max_len: 6,
            ..GenConfig::default()
        },
        optim: OptConfig {
            base_lr: 1e-2,
            final_lr: 1e-3,
            ..OptConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn schedule_examples() {
    let s = |e, k| refresh_schedule(e, k).into_iter().collect::<Vec<_>>();
    assert_eq!(s(10, 5), [1, 6]);
    assert_eq!(s(10, 10), [1]);
    assert_eq!(s(5, 1), [1, 2, 3, 4, 5]);
}

#[test]
fn two_refreshes_with_zero_lag_at_each_sync() {
    let (teacher, student, pool) = setup();
    let out = run_npd(&config(), &teacher, student.clone(), &pool).unwrap();
    assert_eq!(out.refreshes.len(), 2);
    assert_eq!(out.refreshes[0].epoch, 1);
    assert_eq!(out.refreshes[1].epoch, 6);
    assert_eq!(out.refreshes[0].generator_version, student.version());

    let rollouts = out.metrics.iter().filter(|r| r.phase == Phase::Rollout).count();
    assert_eq!(rollouts, 2);
    let syncs: Vec<_> = out.metrics.iter().filter(|r| r.phase == Phase::Sync).collect();
    assert_eq!(syncs.len(), 2);
    for s in &syncs {
        assert!(s.kl_lag.unwrap().abs() < 1e-12);
    }
    // The second buffer is generated by the student as it stood at epoch 6.
    let steps_before = out
        .metrics
        .iter()
        .filter(|r| r.phase == Phase::Train && r.epoch < 6)
        .count() as u32;
    assert_eq!(out.refreshes[1].generator_version, student.version() + steps_before);
    assert!(out.max_kl_lag() > 0.0);

    let shares = phase_breakdown(&out.metrics);
    for s in &shares {
        assert!(s.wall_ms > 0.0, "{:?} has no wall time", s.phase);
    }
}

#[test]
fn fixed_seed_rerun_is_identical() {
    let (teacher, student, pool) = setup();
    let a = run_npd(&config(), &teacher, student.clone(), &pool).unwrap();
    let b = run_npd(&config(), &teacher, student, &pool).unwrap();
    assert_eq!(a.student.encode(), b.student.encode());
    assert_eq!(a.train_losses(), b.train_losses());
}

#[test]
fn refresh_every_epoch_when_interval_is_one() {
    let (teacher, student, pool) = setup();
    let cfg = RunConfig {
        total_epochs: 3,
        refresh_interval: 1,
        ..config()
    };
    let out = run_npd(&cfg, &teacher, student, &pool).unwrap();
    assert_eq!(out.refreshes.len(), 3);
}

#[test]
fn empty_selection_is_filter_starvation() {
    let (teacher, student, pool) = setup();
    let cfg = RunConfig {
        filter_enabled: true,
        filter: FilterConfig {
            min_response_len: 100,
            ..FilterConfig::default()
        },
        ..config()
    };
    let err = run_npd(&cfg, &teacher, student, &pool).unwrap_err();
    assert!(matches!(err, NpdError::FilterStarvation { total: 120 }));
    assert!(err.to_string().contains("tau"));
}

#[test]
fn empty_pool_is_rejected() {
    let (teacher, student, _) = setup();
    assert!(run_npd(&config(), &teacher, student, &[]).is_err());
}

#[test]
fn kl_lag_is_nonnegative_and_deterministic() {
    let (teacher, _, pool) = setup();
    let other = TinyLmParams::init(teacher.dims(), 77).unwrap();
    let trajs = npd_core::sampling::generate(&teacher, &pool, &GenConfig::default(), 5).unwrap();
    let a = kl_lag(&other, &teacher, &trajs, 0).unwrap();
    let b = kl_lag(&other, &teacher, &trajs, 0).unwrap();
    assert!(a.kl > 0.0);
    assert_eq!(a.kl.to_bits(), b.kl.to_bits());
    assert!(kl_lag(&teacher, &teacher, &trajs, 0).unwrap().kl.abs() < 1e-12);
}
