//! The single config file that drives every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use npd_core::corpus::{TaskKind, TaskSpec, Vocab};
use npd_core::model::ModelDims;
use npd_core::optim::OptConfig;
use npd_core::pretrain::PretrainConfig;
use npd_core::trainer::RunConfig;
use npd_core::{NpdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub eval_corpus: PathBuf,
    pub teacher: PathBuf,
    pub student_init: PathBuf,
    pub student: PathBuf,
    pub optimizer: PathBuf,
    pub trajectories: PathBuf,
    pub scores: PathBuf,
    pub kept: PathBuf,
    pub zone_stats: PathBuf,
    pub packs: PathBuf,
    pub sidecar: PathBuf,
    pub metrics: PathBuf,
    pub final_checkpoint: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "corpus.jsonl".into(),
            eval_corpus: "eval.jsonl".into(),
            teacher: "teacher.ckpt".into(),
            student_init: "student_init.ckpt".into(),
            student: "student.ckpt".into(),
            optimizer: "optimizer.bin".into(),
            trajectories: "trajectories.jsonl".into(),
            scores: "scores.jsonl".into(),
            kept: "kept.json".into(),
            zone_stats: "zone_stats.json".into(),
            packs: "packs.bin".into(),
            sidecar: "sidecar.bin".into(),
            metrics: "metrics.csv".into(),
            final_checkpoint: "final.ckpt".into(),
        }
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.eval_corpus,
            &mut self.teacher,
            &mut self.student_init,
            &mut self.student,
            &mut self.optimizer,
            &mut self.trajectories,
            &mut self.scores,
            &mut self.kept,
            &mut self.zone_stats,
            &mut self.packs,
            &mut self.sidecar,
            &mut self.metrics,
            &mut self.final_checkpoint,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub vocab_size: u32,
    pub alphabet_size: u32,
    pub prompt_len_range: (usize, usize),
    pub examples: usize,
    pub train_fraction: f64,
    pub eval_fraction: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: TaskKind::Reverse,
            vocab_size: 64,
            alphabet_size: 60,
            prompt_len_range: (1, 3),
            examples: 22_000,
            train_fraction: 20.0 / 22.0,
            eval_fraction: 2.0 / 22.0,
        }
    }
}

/// Model shape and pretraining schedule of one role.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub window: usize,
    /// Leading training examples used; all of them when absent.
    pub examples: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptConfig,
}

impl ModelSection {
    fn defaults(role: Role) -> Self {
        let teacher = ModelSection {
            embed_dim: 32,
            hidden_dim: 128,
            window: 6,
            examples: None,
            epochs: 10,
            batch_size: 32,
            optim: PretrainConfig::default().optim,
        };
        match role {
            Role::Teacher => teacher,
            Role::Student => ModelSection {
                embed_dim: 16,
                hidden_dim: 16,
                examples: Some(2000),
                epochs: 3,
                ..teacher
            },
        }
    }
}

/// Config-file form of [`ModelSection`]; absent keys take the role default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub window: Option<usize>,
    pub examples: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub optim: Option<OptConfig>,
}

impl ModelOverrides {
    fn resolve(&self, role: Role) -> ModelSection {
        let d = ModelSection::defaults(role);
        ModelSection {
            embed_dim: self.embed_dim.unwrap_or(d.embed_dim),
            hidden_dim: self.hidden_dim.unwrap_or(d.hidden_dim),
            window: self.window.unwrap_or(d.window),
            examples: self.examples.or(d.examples),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            optim: self.optim.unwrap_or(d.optim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    /// Drives every stochastic component; sub-seeds are derived from it.
    pub seed: u64,
    /// Leading training prompts that form the rollout pool.
    pub pool_size: usize,
    pub paths: Paths,
    pub task: TaskSection,
    pub teacher: ModelOverrides,
    pub student: ModelOverrides,
    /// `run.seed` is taken from the global seed.
    pub run: RunConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            seed: 0,
            pool_size: 4000,
            paths: Paths::default(),
            task: TaskSection::default(),
            teacher: ModelOverrides::default(),
            student: ModelOverrides::default(),
            run: RunConfig::default(),
        }
    }
}

fn sub_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z = (z ^ (z >> 33)).wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    z ^ (z >> 33)
}

/// A loaded config plus its content hash.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub cfg: CliConfig,
    pub hash: String,
}

impl Loaded {
    /// Reads `path` (or defaults when absent), applies the seed override and
    /// resolves relative paths against the config's directory.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| NpdError::io(p, e))?;
                let value: toml::Table = toml::from_str(&text).map_err(|e| parse_err(p, &text, e))?;
                if value.get("run").and_then(|r| r.get("seed")).is_some() {
                    return Err(NpdError::Config(
                        "run.seed is derived from the top-level seed; set that instead".into(),
                    ));
                }
                let cfg: CliConfig = toml::from_str(&text).map_err(|e| parse_err(p, &text, e))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (cfg, base)
            }
            None => (CliConfig::default(), PathBuf::new()),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.run.seed = sub_seed(cfg.seed, 4);
        cfg.run.validate()?;
        let canonical = toml::to_string(&cfg).map_err(|e| NpdError::Config(format!("config: {e}")))?;
        let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
        cfg.paths.rebase(&base);
        Ok(Loaded { cfg, hash })
    }
}

fn parse_err(path: &Path, text: &str, e: toml::de::Error) -> NpdError {
    let line = e
        .span()
        .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    NpdError::Parse {
        path: path.to_path_buf(),
        line,
        message: e.message().to_string(),
    }
}

impl CliConfig {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.task.vocab_size)
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task.kind,
            prompt_len_range: self.task.prompt_len_range,
            alphabet_size: self.task.alphabet_size,
            seed: sub_seed(self.seed, 1),
        }
    }

    pub fn model(&self, role: Role) -> ModelSection {
        match role {
            Role::Teacher => self.teacher.resolve(role),
            Role::Student => self.student.resolve(role),
        }
    }

    pub fn dims(&self, role: Role) -> ModelDims {
        let m = self.model(role);
        ModelDims {
            vocab_size: self.task.vocab_size as usize,
            window: m.window,
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
        }
    }

    pub fn init_seed(&self, role: Role) -> u64 {
        sub_seed(self.seed, if role == Role::Teacher { 2 } else { 3 })
    }

    pub fn pretrain_config(&self, role: Role) -> PretrainConfig {
        let m = self.model(role);
        PretrainConfig {
            epochs: m.epochs,
            batch_size: m.batch_size,
            seed: sub_seed(self.init_seed(role), 5),
            optim: m.optim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 3\n[run]\nlambda = 0.5\nbogus = 1\n").unwrap();
        assert!(matches!(Loaded::load(Some(&p), None), Err(NpdError::Parse { line: 4, .. })));
    }

    #[test]
    fn seed_override_changes_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 3\npool_size = 100\n[run]\nlambda = 0.5\n").unwrap();
        let a = Loaded::load(Some(&p), None).unwrap();
        let b = Loaded::load(Some(&p), Some(4)).unwrap();
        assert_eq!(a.cfg.run.lambda, 0.5);
        assert_eq!(a.cfg.pool_size, 100);
        assert_ne!(a.hash, b.hash);
        assert_ne!(a.cfg.run.seed, b.cfg.run.seed);
        assert_eq!(a.cfg.paths.packs, dir.path().join("packs.bin"));
    }

    #[test]
    fn run_seed_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[run]\nseed = 9\n").unwrap();
        assert!(matches!(Loaded::load(Some(&p), None), Err(NpdError::Config(_))));
    }
}
