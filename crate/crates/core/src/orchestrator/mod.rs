//! The training driver: configuration, the aggregate → distill → refine epoch
//! loop, ablation grids, run manifests and checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dagger::{collect_episodes, suboptimal_demo_rate, teacher_demos, AggregatedDataset, DaggerError, DatasetStats};
use crate::distill::{kd_update, DistillError, KdReport};
use crate::envs::{Env, EnvError};
use crate::metrics::{
    collect_states, diagnostic_samples, divergence, evaluate, save_curve, CurveRow, DivergenceReport, EvalReport,
    MetricsError, CURVE_SCHEMA,
};
use crate::numgrad::{GradError, OptState};
use crate::pseudorl::{pseudo_update, PseudoError, PseudoLearner, PseudoReport};
use crate::student::{Student, StudentError, StudentParams};
use crate::teacher::{pretrain_teacher, Teacher, TeacherError, TeacherManifest, TeacherParams};

mod config;

pub use config::{AblationFlags, EvalSettings, HintConfig, QueryConfig, WORKERS_ENV};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing checkpoint {path}: {hint}")]
    MissingCheckpoint { path: String, hint: String },
    #[error("run directory: {0}")]
    RunDir(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Pseudo(#[from] PseudoError),
    #[error(transparent)]
    Dagger(#[from] DaggerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("serialization: {0}")]
    Serde(String),
}

impl OrchestratorError {
    /// Short machine-readable kind for error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::MissingCheckpoint { .. } => "missing_checkpoint",
            Self::RunDir(_) => "run_dir",
            Self::Io(_) => "io",
            Self::Env(_) => "env",
            Self::Grad(_) => "numeric",
            Self::Teacher(_) => "teacher",
            Self::Student(_) => "student",
            Self::Distill(_) => "distill",
            Self::Pseudo(_) => "pseudo",
            Self::Dagger(_) => "dataset",
            Self::Metrics(_) => "metrics",
            Self::Serde(_) => "serialization",
        }
    }

    /// Numeric blow-ups that abort an epoch instead of the run.
    fn is_divergence(&self) -> bool {
        matches!(
            self,
            Self::Grad(GradError::NonFinite { .. })
                | Self::Distill(DistillError::NonFinite | DistillError::Grad(GradError::NonFinite { .. }))
                | Self::Pseudo(PseudoError::NonFinite { .. } | PseudoError::Grad(GradError::NonFinite { .. }))
        )
    }
}

fn serde_err(e: impl std::fmt::Display) -> OrchestratorError {
    OrchestratorError::Serde(e.to_string())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), OrchestratorError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(v).map_err(serde_err)?)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, OrchestratorError> {
    let s = std::fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| OrchestratorError::Serde(format!("{}: {e}", path.display())))
}

/// Seconds spent per phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub aggregate: f64,
    pub distill: f64,
    pub refine: f64,
    pub evaluate: f64,
    pub checkpoint: f64,
}

/// One epoch of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Student environment steps after this epoch.
    pub timestep: u64,
    /// Phases in the order they ran.
    pub phases: Vec<String>,
    pub query_episodes: usize,
    pub queries: usize,
    pub accepted: usize,
    pub empty_trajectories: usize,
    pub suboptimal_demo_rate: f64,
    /// Success of the student's own query episodes.
    pub query_success_rate: f64,
    pub dataset: DatasetStats,
    pub kd: Vec<KdReport>,
    pub pseudo: Option<PseudoReport>,
    pub success_rate: f64,
    pub steps_taken: f64,
    pub teacher_success_rate: f64,
    /// Set when a phase diverged and the epoch was rolled back.
    pub aborted: Option<String>,
    pub wall_seconds: PhaseTimes,
}

/// Append-only record of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub curve_schema: String,
    pub config_hash: String,
    pub resume_key: String,
    pub preset: String,
    pub seed: u64,
    pub teacher_checkpoint: String,
    pub initial_teacher_success: f64,
    /// Retained checkpoint directories, relative to the run directory, oldest first.
    pub checkpoints: Vec<String>,
    pub rows: Vec<EpochRow>,
    pub final_eval: Option<EvalReport>,
    pub setup_seconds: f64,
}

pub const MANIFEST_SCHEMA: &str = "manifest/1";

impl RunManifest {
    pub fn load(run: &Path) -> Result<Self, OrchestratorError> {
        let path = run.join("manifest.json");
        if !path.exists() {
            return Err(OrchestratorError::RunDir(format!("{} has no manifest.json; run `hint train` first", run.display())));
        }
        read_json(&path)
    }

    fn save(&self, run: &Path) -> Result<(), OrchestratorError> {
        write_json(&run.join("manifest.json"), self)
    }

    pub fn curve(&self) -> Vec<CurveRow> {
        self.rows
            .iter()
            .map(|r| CurveRow {
                timestep: r.timestep,
                success_rate: r.success_rate,
                steps_taken: r.steps_taken,
                suboptimal_demo_rate: r.suboptimal_demo_rate,
                teacher_success_rate: r.teacher_success_rate,
            })
            .collect()
    }

    /// The manifest with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut m = self.clone();
        m.setup_seconds = 0.0;
        for r in &mut m.rows {
            r.wall_seconds = PhaseTimes::default();
        }
        m
    }

    pub fn latest_checkpoint(&self) -> Option<&str> {
        self.checkpoints.last().map(String::as_str)
    }
}

/// Resolves a config path against the run directory.
fn under(run: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        run.join(p)
    }
}

fn build_pool(cfg: &HintConfig) -> Result<rayon::ThreadPool, OrchestratorError> {
    let n = cfg.effective_workers()?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| OrchestratorError::Config(e.to_string()))
}

/// Pretrains the teacher into the configured checkpoint directory and evaluates it.
pub fn pretrain(cfg: &HintConfig, run: &Path) -> Result<TeacherManifest, OrchestratorError> {
    cfg.validate()?;
    let pool = build_pool(cfg)?;
    pool.install(|| {
        let dir = under(run, &cfg.teacher_checkpoint);
        let mut tcfg = cfg.teacher.clone();
        tcfg.seed = tcfg.seed.wrapping_add(cfg.seed);
        let (params, report) = pretrain_teacher(&cfg.env, &tcfg)?;
        let env = Env::new(cfg.env.clone())?;
        let teacher = Teacher::new(params, tcfg.k);
        let eval = evaluate(&env, &teacher, cfg.eval.final_episodes, &cfg.eval.final_seeds, cfg.eval.greedy)?;
        teacher.params.save(&dir)?;
        let manifest = TeacherManifest {
            config_hash: cfg.hash(),
            preset: cfg.preset.to_string(),
            k: tcfg.k,
            hidden: tcfg.hidden,
            low_timesteps: tcfg.low_timesteps,
            high_timesteps: tcfg.high_timesteps,
            low_reach_rate: report.low.reach_rate,
            success_rate: eval.success_rate,
        };
        manifest.save(&dir)?;
        write_json(&dir.join("eval.json"), &eval)?;
        Ok(manifest)
    })
}

/// Loads the pretrained teacher named by the config.
pub fn load_teacher(cfg: &HintConfig, run: &Path) -> Result<Teacher, OrchestratorError> {
    let dir = under(run, &cfg.teacher_checkpoint);
    if !dir.join("high.pset").exists() {
        return Err(OrchestratorError::MissingCheckpoint {
            path: dir.display().to_string(),
            hint: "run `hint pretrain-teacher` with the same --config and --out first".into(),
        });
    }
    let params = TeacherParams::load(&dir)?;
    if let Ok(m) = TeacherManifest::load(&dir) {
        if m.preset != cfg.preset.to_string() {
            return Err(OrchestratorError::Config(format!("teacher was pretrained on {}, config is {}", m.preset, cfg.preset)));
        }
    }
    Ok(Teacher::new(params, cfg.teacher.k))
}

/// Mutable training state saved in each checkpoint.
struct TrainState {
    student: StudentParams,
    student_opt: OptState,
    teacher: Teacher,
    learner: PseudoLearner,
    dataset: AggregatedDataset,
    rng: ChaCha8Rng,
    epoch: usize,
    timestep: u64,
    teacher_success: f64,
}

#[derive(Serialize, Deserialize)]
struct Progress {
    epoch: usize,
    timestep: u64,
    aggregated: u64,
    rng: ChaCha8Rng,
    teacher_success: f64,
}

fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch-{epoch:05}")
}

fn save_checkpoint(run: &Path, st: &TrainState) -> Result<String, OrchestratorError> {
    let name = checkpoint_name(st.epoch);
    let dir = run.join(&name);
    let tmp = run.join(format!("{name}.tmp"));
    for d in [&dir, &tmp] {
        if d.exists() {
            std::fs::remove_dir_all(d)?;
        }
    }
    std::fs::create_dir_all(&tmp)?;
    st.student.save(&tmp.join("student"))?;
    st.teacher.params.save(&tmp.join("teacher"))?;
    write_json(&tmp.join("student_opt.json"), &st.student_opt)?;
    write_json(&tmp.join("learner.json"), &st.learner)?;
    write_json(
        &tmp.join("progress.json"),
        &Progress {
            epoch: st.epoch,
            timestep: st.timestep,
            aggregated: st.dataset.aggregated,
            rng: st.rng.clone(),
            teacher_success: st.teacher_success,
        },
    )?;
    std::fs::rename(&tmp, &dir)?;
    Ok(name)
}

fn load_checkpoint(run: &Path, name: &str, cfg: &HintConfig) -> Result<TrainState, OrchestratorError> {
    let dir = run.join(name);
    let progress: Progress = read_json(&dir.join("progress.json"))?;
    Ok(TrainState {
        student: StudentParams::load(&dir.join("student"))?,
        student_opt: read_json(&dir.join("student_opt.json"))?,
        teacher: Teacher::new(TeacherParams::load(&dir.join("teacher"))?, cfg.teacher.k),
        learner: read_json(&dir.join("learner.json"))?,
        dataset: AggregatedDataset::open_log(&run.join("dataset"), progress.aggregated)?,
        rng: progress.rng,
        epoch: progress.epoch,
        timestep: progress.timestep,
        teacher_success: progress.teacher_success,
    })
}

/// Loads the student of the run's latest checkpoint.
pub fn load_student(run: &Path) -> Result<StudentParams, OrchestratorError> {
    let m = RunManifest::load(run)?;
    let name = m
        .latest_checkpoint()
        .ok_or_else(|| OrchestratorError::RunDir("manifest lists no checkpoint".into()))?;
    Ok(StudentParams::load(&run.join(name).join("student"))?)
}

fn prune_checkpoints(run: &Path, m: &mut RunManifest, keep: usize) -> Result<(), OrchestratorError> {
    while m.checkpoints.len() > keep {
        let old = m.checkpoints.remove(0);
        let dir = run.join(&old);
        if dir.exists() {
            std::fs::remove_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Runs (or resumes) the epoch loop until the student timestep budget is spent.
pub fn train_hint(cfg: &HintConfig, run: &Path, resume: bool) -> Result<RunManifest, OrchestratorError> {
    cfg.validate()?;
    let pool = build_pool(cfg)?;
    pool.install(|| train_inner(cfg, run, resume))
}

fn setup(cfg: &HintConfig, run: &Path, env: &Env) -> Result<(TrainState, RunManifest), OrchestratorError> {
    let t0 = Instant::now();
    let teacher = load_teacher(cfg, run)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let student = StudentParams::init(env, cfg.student_config(), rng.random())?;
    let demos = teacher_demos(env, &teacher, cfg.query.initial_demos, rng.random())?;
    let dataset = AggregatedDataset::new(demos, cfg.query.dataset_budget)?;
    dataset.create_log(&run.join("dataset"))?;
    let teacher_eval = evaluate(env, &teacher, cfg.eval.epoch_episodes, &[rng.random()], cfg.eval.greedy)?;
    let st = TrainState {
        student,
        student_opt: OptState::default(),
        teacher,
        learner: PseudoLearner::default(),
        dataset,
        rng,
        epoch: 0,
        timestep: 0,
        teacher_success: teacher_eval.success_rate,
    };
    let mut manifest = RunManifest {
        schema: MANIFEST_SCHEMA.into(),
        curve_schema: CURVE_SCHEMA.into(),
        config_hash: cfg.hash(),
        resume_key: cfg.resume_key(),
        preset: cfg.preset.to_string(),
        seed: cfg.seed,
        teacher_checkpoint: cfg.teacher_checkpoint.display().to_string(),
        initial_teacher_success: teacher_eval.success_rate,
        checkpoints: Vec::new(),
        rows: Vec::new(),
        final_eval: None,
        setup_seconds: 0.0,
    };
    manifest.checkpoints.push(save_checkpoint(run, &st)?);
    manifest.setup_seconds = t0.elapsed().as_secs_f64();
    manifest.save(run)?;
    Ok((st, manifest))
}

fn train_inner(cfg: &HintConfig, run: &Path, resume: bool) -> Result<RunManifest, OrchestratorError> {
    std::fs::create_dir_all(run)?;
    std::fs::write(run.join("config.toml"), cfg.to_toml())?;
    let env = Env::new(cfg.env.clone())?;
    let existing = run.join("manifest.json").exists();
    let (mut st, mut manifest) = match (existing, resume) {
        (true, false) => {
            return Err(OrchestratorError::RunDir(format!(
                "{} already holds a run; pass --resume or choose another --out",
                run.display()
            )))
        }
        (true, true) => {
            let mut m = RunManifest::load(run)?;
            if m.resume_key != cfg.resume_key() {
                return Err(OrchestratorError::Config("config differs from the run being resumed".into()));
            }
            m.config_hash = cfg.hash();
            let name = m
                .latest_checkpoint()
                .ok_or_else(|| OrchestratorError::RunDir("manifest lists no checkpoint".into()))?
                .to_string();
            let st = load_checkpoint(run, &name, cfg)?;
            m.rows.truncate(st.epoch);
            m.final_eval = None;
            log::info!("resuming at epoch {} ({} student steps)", st.epoch, st.timestep);
            (st, m)
        }
        (false, _) => setup(cfg, run, &env)?,
    };

    while st.timestep < cfg.student_timesteps {
        let row = run_epoch(cfg, &env, &mut st)?;
        let t = Instant::now();
        let keep_from = manifest_keep_from(&st, cfg);
        st.dataset.sync_log(&run.join("dataset"), keep_from)?;
        let name = save_checkpoint(run, &st)?;
        manifest.checkpoints.push(name);
        prune_checkpoints(run, &mut manifest, cfg.keep_checkpoints)?;
        let mut row = row;
        row.wall_seconds.checkpoint = t.elapsed().as_secs_f64();
        log::info!(
            "epoch {} t={} success {:.3} teacher {:.3} subopt {:.3}{}",
            row.epoch,
            row.timestep,
            row.success_rate,
            row.teacher_success_rate,
            row.suboptimal_demo_rate,
            row.aborted.as_deref().map(|a| format!(" aborted: {a}")).unwrap_or_default()
        );
        manifest.rows.push(row);
        manifest.save(run)?;
        save_curve(&run.join("curve.csv"), &manifest.curve())?;
    }

    let student = Student { params: st.student.clone() };
    manifest.final_eval =
        Some(evaluate(&env, &student, cfg.eval.final_episodes, &cfg.eval.final_seeds, cfg.eval.greedy)?);
    manifest.save(run)?;
    save_curve(&run.join("curve.csv"), &manifest.curve())?;
    Ok(manifest)
}

/// Oldest aggregation index a resume from any retained checkpoint can need.
fn manifest_keep_from(st: &TrainState, cfg: &HintConfig) -> u64 {
    let per_epoch = cfg.query.n_query as u64;
    let cap = st.dataset.recent_capacity() as u64;
    st.dataset.aggregated.saturating_sub(cap + per_epoch * (cfg.keep_checkpoints as u64 + 1))
}

struct EpochStart {
    student: StudentParams,
    student_opt: OptState,
    teacher: Teacher,
    learner: PseudoLearner,
    dataset: AggregatedDataset,
}

fn run_epoch(cfg: &HintConfig, env: &Env, st: &mut TrainState) -> Result<EpochRow, OrchestratorError> {
    let mut times = PhaseTimes::default();
    let mut phases = Vec::new();
    let keep = EpochStart {
        student: st.student.clone(),
        student_opt: st.student_opt.clone(),
        teacher: st.teacher.clone(),
        learner: st.learner.clone(),
        dataset: st.dataset.clone(),
    };
    let query_seed: u64 = st.rng.random();
    let kd_seed: u64 = st.rng.random();
    let pseudo_seed: u64 = st.rng.random();
    let eval_seed: u64 = st.rng.random();
    st.epoch += 1;

    let t = Instant::now();
    let student = Student { params: st.student.clone() };
    let episodes =
        collect_episodes(env, &student, &st.teacher, &cfg.filter(), cfg.query.n_query, query_seed, st.dataset.aggregated)?;
    let results: Vec<_> = episodes.iter().flat_map(|q| q.results.iter().cloned()).collect();
    let steps: u64 = episodes.iter().map(|q| q.length as u64).sum();
    let query_success = episodes.iter().filter(|q| q.student_success).count() as f64 / episodes.len() as f64;
    let empty = episodes.iter().filter(|q| q.trajectory.n_pairs() == 0).count();
    for q in episodes {
        st.dataset.aggregate(q.trajectory);
    }
    st.timestep += steps;
    phases.push("aggregate".to_string());
    times.aggregate = t.elapsed().as_secs_f64();

    let outcome = (|| -> Result<(Vec<KdReport>, Option<PseudoReport>), OrchestratorError> {
        let t = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(kd_seed);
        let sample = st.dataset.epoch_sample(&mut rng);
        let mut kd = Vec::new();
        for _ in 0..cfg.kd_passes {
            kd.push(kd_update(&mut st.student, &mut st.student_opt, &sample, &cfg.distill, &mut rng)?);
        }
        phases.push("distill".to_string());
        times.distill = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let pseudo = if cfg.ablation.use_pseudo_rl {
            let rep = pseudo_update(&mut st.teacher, &mut st.learner, env, &st.student, &cfg.pseudo, pseudo_seed)?;
            phases.push("refine".to_string());
            Some(rep)
        } else {
            None
        };
        times.refine = t.elapsed().as_secs_f64();
        Ok((kd, pseudo))
    })();
    let (kd, pseudo, aborted) = match outcome {
        Ok((kd, pseudo)) => (kd, pseudo, None),
        Err(e) if e.is_divergence() => {
            log::warn!("epoch {} aborted: {e}", st.epoch);
            st.student = keep.student;
            st.student_opt = keep.student_opt;
            st.teacher = keep.teacher;
            st.learner = keep.learner;
            st.dataset = keep.dataset;
            (Vec::new(), None, Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };

    let t = Instant::now();
    let student = Student { params: st.student.clone() };
    let ev = evaluate(env, &student, cfg.eval.epoch_episodes, &[eval_seed], cfg.eval.greedy)?;
    if pseudo.is_some() {
        st.teacher_success = evaluate(env, &st.teacher, cfg.eval.epoch_episodes, &[eval_seed], cfg.eval.greedy)?.success_rate;
    }
    times.evaluate = t.elapsed().as_secs_f64();

    Ok(EpochRow {
        epoch: st.epoch,
        timestep: st.timestep,
        phases,
        query_episodes: cfg.query.n_query,
        queries: results.iter().filter(|r| !r.actions.is_empty()).count(),
        accepted: results.iter().filter(|r| r.accepted).count(),
        empty_trajectories: empty,
        suboptimal_demo_rate: suboptimal_demo_rate(&results),
        query_success_rate: query_success,
        dataset: st.dataset.stats(),
        kd,
        pseudo,
        success_rate: ev.success_rate,
        steps_taken: ev.steps_taken,
        teacher_success_rate: st.teacher_success,
        aborted,
        wall_seconds: times,
    })
}

/// The four ablation variants: name, use_filter, use_pseudo_rl.
pub const ABLATIONS: [(&str, bool, bool); 4] =
    [("full", true, true), ("no-filter", false, true), ("no-pseudo", true, false), ("neither", false, false)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: String,
    pub use_filter: bool,
    pub use_pseudo_rl: bool,
    pub final_success_rate: f64,
    pub final_steps_taken: f64,
    pub curve: String,
}

/// Trains all four variants against one shared teacher; writes `<variant>.csv` and `ablation.json`.
pub fn ablate(cfg: &HintConfig, run: &Path) -> Result<Vec<AblationResult>, OrchestratorError> {
    std::fs::create_dir_all(run)?;
    let teacher = under(run, &cfg.teacher_checkpoint);
    let mut out = Vec::new();
    for (name, use_filter, use_pseudo_rl) in ABLATIONS {
        let mut c = cfg.clone();
        c.ablation.use_filter = use_filter;
        c.ablation.use_pseudo_rl = use_pseudo_rl;
        c.teacher_checkpoint = std::path::absolute(&teacher)?;
        let dir = run.join(name);
        let resume = dir.join("manifest.json").exists();
        let m = train_hint(&c, &dir, resume)?;
        let csv = format!("{name}.csv");
        std::fs::copy(dir.join("curve.csv"), run.join(&csv))?;
        let fe = m.final_eval.expect("train_hint evaluates at the end");
        out.push(AblationResult {
            variant: name.into(),
            use_filter,
            use_pseudo_rl,
            final_success_rate: fe.success_rate,
            final_steps_taken: fe.steps_taken,
            curve: csv,
        });
        write_json(&run.join("ablation.json"), &out)?;
    }
    Ok(out)
}

/// Which policy `eval` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTarget {
    Student,
    Teacher,
}

/// Evaluates the run's latest student or the configured teacher; writes `eval-<target>.json`.
pub fn eval_run(
    cfg: &HintConfig,
    run: &Path,
    target: EvalTarget,
    episodes: usize,
    seeds: &[u64],
) -> Result<EvalReport, OrchestratorError> {
    cfg.validate()?;
    let pool = build_pool(cfg)?;
    pool.install(|| {
        let env = Env::new(cfg.env.clone())?;
        let rep = match target {
            EvalTarget::Student => {
                let params = load_student(run)?;
                params.check_env(&env)?;
                evaluate(&env, &Student { params }, episodes, seeds, cfg.eval.greedy)?
            }
            EvalTarget::Teacher => evaluate(&env, &load_teacher(cfg, run)?, episodes, seeds, cfg.eval.greedy)?,
        };
        let name = match target {
            EvalTarget::Student => "eval-student.json",
            EvalTarget::Teacher => "eval-teacher.json",
        };
        write_json(&run.join(name), &rep)?;
        Ok(rep)
    })
}

/// Teacher-versus-student state distributions of a run; writes `divergence.json` and `divergence_points.csv`.
pub fn diagnose(cfg: &HintConfig, run: &Path, samples: Option<usize>) -> Result<DivergenceReport, OrchestratorError> {
    cfg.validate()?;
    let pool = build_pool(cfg)?;
    pool.install(|| {
        let env = Env::new(cfg.env.clone())?;
        let n = samples.unwrap_or_else(|| diagnostic_samples(cfg.preset.tier));
        let teacher = load_teacher(cfg, run)?;
        let student = Student { params: load_student(run)? };
        let t = collect_states(&env, &teacher, n, cfg.seed, cfg.eval.greedy)?;
        let s = collect_states(&env, &student, n, cfg.seed, cfg.eval.greedy)?;
        let rep = divergence(&t, &s, Some(&run.join("divergence_points.csv")))?;
        write_json(&run.join("divergence.json"), &rep)?;
        Ok(rep)
    })
}

/// Dataset summary plus the per-epoch acceptance record of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInspection {
    pub stats: DatasetStats,
    pub checkpoint: String,
    pub epochs: Vec<EpochAcceptance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochAcceptance {
    pub epoch: usize,
    pub queries: usize,
    pub accepted: usize,
    pub empty_trajectories: usize,
    pub suboptimal_demo_rate: f64,
}

pub fn inspect_dataset(run: &Path) -> Result<DatasetInspection, OrchestratorError> {
    let m = RunManifest::load(run)?;
    let name = m.latest_checkpoint().ok_or_else(|| OrchestratorError::RunDir("manifest lists no checkpoint".into()))?;
    let progress: Progress = read_json(&run.join(name).join("progress.json"))?;
    let ds = AggregatedDataset::open_log(&run.join("dataset"), progress.aggregated)?;
    Ok(DatasetInspection {
        stats: ds.stats(),
        checkpoint: name.to_string(),
        epochs: m
            .rows
            .iter()
            .map(|r| EpochAcceptance {
                epoch: r.epoch,
                queries: r.queries,
                accepted: r.accepted,
                empty_trajectories: r.empty_trajectories,
                suboptimal_demo_rate: r.suboptimal_demo_rate,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests;
