use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::OrchestratorError;
use crate::dagger::FilterConfig;
use crate::distill::DistillConfig;
use crate::envs::{Domain, EnvConfig, Preset, Tier};
use crate::pseudorl::PseudoConfig;
use crate::student::{CommMode, StudentConfig};
use crate::teacher::TeacherPretrainConfig;

/// Environment variable overriding `workers`.
pub const WORKERS_ENV: &str = "HINT_WORKERS";

/// Teacher queries and dataset sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryConfig {
    /// Student episodes with teacher queries per epoch.
    pub n_query: usize,
    /// Total trajectories kept (initial plus recent).
    pub dataset_budget: usize,
    /// Teacher demonstrations in the fixed initial partition.
    pub initial_demos: usize,
    /// Lookahead simulations per query (k) and successes needed (m).
    pub simulations: usize,
    pub required: usize,
}

/// Ablation switches; each affects only its own phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_filter: bool,
    pub use_pseudo_rl: bool,
    pub comm: CommMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Episodes for the per-epoch learning-curve point.
    pub epoch_episodes: usize,
    /// Episodes per seed of the final evaluation.
    pub final_episodes: usize,
    pub final_seeds: Vec<u64>,
    pub greedy: bool,
}

/// Everything a training run needs. Loaded from TOML on top of the preset
/// named by `preset`, so a file only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HintConfig {
    pub preset: Preset,
    /// Full table budgets instead of the 10% desk scale.
    pub paper_scale: bool,
    pub seed: u64,
    pub workers: usize,
    /// Student environment steps across all query episodes.
    pub student_timesteps: u64,
    /// Pretrained teacher directory, relative to the run directory.
    pub teacher_checkpoint: PathBuf,
    /// Distillation passes over the epoch sample.
    pub kd_passes: usize,
    /// Checkpoints kept on disk; older ones are pruned.
    pub keep_checkpoints: usize,
    pub env: EnvConfig,
    pub teacher: TeacherPretrainConfig,
    pub student: StudentConfig,
    pub distill: DistillConfig,
    pub pseudo: PseudoConfig,
    pub query: QueryConfig,
    pub ablation: AblationFlags,
    pub eval: EvalSettings,
}

impl HintConfig {
    pub fn preset(p: Preset, paper_scale: bool) -> Self {
        let t = p.tier.index();
        let (timesteps, budget, n_query, n_pseudo, threads) = match p.domain {
            Domain::Marine => ([1e7, 2e7, 10e7][t], [2000, 3000, 6000][t], [20, 100, 200][t], [10, 150, 600][t], [10, 20, 20][t]),
            Domain::Fc => ([1e7, 2e7, 7e7][t], [1000, 2000, 4000][t], [20, 50, 100][t], [10, 20, 40][t], [10, 20, 20][t]),
        };
        let scale = if paper_scale { 1.0 } else { 0.1 };
        let teacher = TeacherPretrainConfig::preset(p, paper_scale);
        Self {
            preset: p,
            paper_scale,
            seed: 0,
            workers: threads,
            student_timesteps: (timesteps * scale) as u64,
            teacher_checkpoint: PathBuf::from("teacher"),
            kd_passes: 1,
            keep_checkpoints: 2,
            env: EnvConfig::preset(p),
            teacher,
            student: StudentConfig::default(),
            distill: DistillConfig::default(),
            pseudo: PseudoConfig { n_pseudo, workers: threads, ..PseudoConfig::default() },
            query: QueryConfig { n_query, dataset_budget: budget, initial_demos: budget / 10, simulations: 1, required: 1 },
            ablation: AblationFlags { use_filter: true, use_pseudo_rl: true, comm: CommMode::Heterogeneous },
            eval: EvalSettings { epoch_episodes: 20, final_episodes: 50, final_seeds: vec![0, 1, 2], greedy: false },
        }
    }

    /// Parses TOML, layering it over the preset it names (default `fc-easy`).
    pub fn from_toml(text: &str) -> Result<Self, OrchestratorError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| OrchestratorError::Config(e.to_string()))?;
        let preset: Preset = match user.get("preset") {
            Some(v) => v
                .as_str()
                .ok_or_else(|| OrchestratorError::Config("preset must be a string".into()))?
                .parse()
                .map_err(|e| OrchestratorError::Config(format!("{e}")))?,
            None => Preset { domain: Domain::Fc, tier: Tier::Easy },
        };
        let paper_scale = match user.get("paper_scale") {
            Some(v) => v.as_bool().ok_or_else(|| OrchestratorError::Config("paper_scale must be a boolean".into()))?,
            None => false,
        };
        let base = Self::preset(preset, paper_scale);
        let mut merged = toml::Table::try_from(&base).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| OrchestratorError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_string()));
        if self.workers == 0 || self.student_timesteps == 0 || self.kd_passes == 0 || self.keep_checkpoints == 0 {
            return bad("workers, student_timesteps, kd_passes and keep_checkpoints must be >= 1");
        }
        let q = &self.query;
        if q.n_query == 0 || q.dataset_budget == 0 || q.initial_demos == 0 || q.initial_demos >= q.dataset_budget {
            return bad("need n_query >= 1 and 1 <= initial_demos < dataset_budget");
        }
        if self.eval.epoch_episodes == 0 || self.eval.final_episodes == 0 || self.eval.final_seeds.is_empty() {
            return bad("evaluation needs episodes and seeds");
        }
        if self.env.domain != self.preset.domain {
            return bad("env.domain disagrees with preset");
        }
        self.env.validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        self.teacher.validate().map_err(OrchestratorError::Config)?;
        self.filter().validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        self.distill.validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        self.pseudo.validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig { enabled: self.ablation.use_filter, simulations: self.query.simulations, required: self.query.required }
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig { comm: self.ablation.comm, ..self.student.clone() }
    }

    /// `workers`, unless the environment variable overrides it.
    pub fn effective_workers(&self) -> Result<usize, OrchestratorError> {
        match std::env::var(WORKERS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(OrchestratorError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
            },
            Err(_) => Ok(self.workers),
        }
    }

    /// Hash of everything that shapes the run except its length and thread count;
    /// a run may be resumed under any config with the same key.
    pub fn resume_key(&self) -> String {
        let mut c = self.clone();
        c.student_timesteps = 0;
        c.workers = 0;
        c.hash()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
