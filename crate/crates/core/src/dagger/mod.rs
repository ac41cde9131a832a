//! Dataset aggregation with a lookahead filter on teacher labels.
//!
//! The student drives the episode; at every step the teacher is queried for a
//! label, and the label is kept only if the teacher, simulated from a snapshot of
//! that state, goes on to finish the episode successfully.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{load_trajectories, save_trajectories, DistillError, Source, StepRecord, Trajectory};
use crate::envs::{restore, snapshot, Action, Env, EnvError, Policy, WorldState};
use crate::numgrad::GradError;

pub mod toy;

#[derive(Debug, Error)]
pub enum DaggerError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error("invalid filter config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
}

/// Acceptance rule for queried labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// When false every label is kept and no simulation runs (plain DAgger).
    pub enabled: bool,
    /// Lookahead simulations per query (k).
    pub simulations: usize,
    /// Successful simulations required to accept (m).
    pub required: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { enabled: true, simulations: 1, required: 1 }
    }
}

impl FilterConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DaggerError> {
        if self.simulations == 0 || self.required == 0 || self.required > self.simulations {
            return Err(DaggerError::Config(format!("need 1 <= m <= k, got m={} k={}", self.required, self.simulations)));
        }
        Ok(())
    }
}

/// Outcome of one teacher query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    /// The teacher's label ā*; empty when the queried state was already terminal.
    pub actions: Vec<Action>,
    pub teacher_logp: f64,
    pub accepted: bool,
    /// Whether the simulated terminal state was a success (`accepted` under m-of-k).
    pub success: bool,
    /// Successful simulations out of those run.
    pub successes: usize,
    /// Steps simulated after the label, summed over simulations.
    pub lookahead: usize,
    /// False when the filter was bypassed.
    pub simulated: bool,
}

/// Per-episode RNG seeds; the student's stream never depends on whether queries run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSeeds {
    pub env: u64,
    pub student: u64,
    pub query: u64,
    pub lookahead: u64,
}

impl EpisodeSeeds {
    pub fn new(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Self { env: r.random(), student: r.random(), query: r.random(), lookahead: r.random() }
    }

    fn lookahead_rng(&self, query: u64, sim: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.lookahead ^ query.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        r.set_stream(sim as u64 + 1);
        r
    }
}

/// Rolls `expert` from `state` to a terminal state and reports success and length.
fn simulate<P: Policy>(
    env: &Env,
    mut state: WorldState,
    expert: &P,
    mut memory: P::Memory,
    rng: &mut ChaCha8Rng,
) -> Result<(bool, usize), DaggerError> {
    let mut steps = 0;
    while !env.is_done(&state) {
        let a = expert.act(env, &state, &mut memory, rng, false)?;
        env.advance(&mut state, &a.actions)?;
        steps += 1;
    }
    Ok((env.success(&state), steps))
}

/// Queries the teacher at `state` and validates the label by simulation.
///
/// `memory` is the teacher's per-episode memory and advances as if the teacher
/// acted; `state` itself is never modified.
#[allow(clippy::too_many_arguments)]
pub fn query_and_filter<P: Policy>(
    env: &Env,
    state: &WorldState,
    expert: &P,
    memory: &mut P::Memory,
    query_rng: &mut ChaCha8Rng,
    seeds: &EpisodeSeeds,
    query_index: u64,
    cfg: &FilterConfig,
) -> Result<FilterResult, DaggerError> {
    if env.is_done(state) {
        return Ok(FilterResult {
            actions: Vec::new(),
            teacher_logp: 0.0,
            accepted: false,
            success: false,
            successes: 0,
            lookahead: 0,
            simulated: false,
        });
    }
    let out = expert.act(env, state, memory, query_rng, false)?;
    if !cfg.enabled {
        return Ok(FilterResult {
            actions: out.actions,
            teacher_logp: out.logp,
            accepted: true,
            success: true,
            successes: 0,
            lookahead: 0,
            simulated: false,
        });
    }
    let token = snapshot(state);
    let mut successes = 0;
    let mut lookahead = 0;
    for sim in 0..cfg.simulations {
        let mut s = match restore(&token) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("query {query_index} discarded: {e}");
                return Ok(FilterResult {
                    actions: out.actions,
                    teacher_logp: out.logp,
                    accepted: false,
                    success: false,
                    successes,
                    lookahead,
                    simulated: true,
                });
            }
        };
        s.fork_rng(1 + query_index * cfg.simulations as u64 + sim as u64);
        env.advance(&mut s, &out.actions)?;
        let mut rng = seeds.lookahead_rng(query_index, sim);
        let (ok, n) = simulate(env, s, expert, memory.clone(), &mut rng)?;
        successes += ok as usize;
        lookahead += n + 1;
    }
    let accepted = successes >= cfg.required;
    Ok(FilterResult {
        actions: out.actions,
        teacher_logp: out.logp,
        accepted,
        success: accepted,
        successes,
        lookahead,
        simulated: true,
    })
}

/// One student-driven episode with a query at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEpisode {
    /// Every visited state with the teacher label and its acceptance flag.
    pub trajectory: Trajectory,
    pub results: Vec<FilterResult>,
    /// Whether the student's own episode succeeded.
    pub student_success: bool,
    pub length: usize,
}

impl QueryEpisode {
    pub fn accepted(&self) -> usize {
        self.results.iter().filter(|r| r.accepted).count()
    }
}

fn record(env: &Env, s: &WorldState, actions: &[Action], teacher_logp: f64, accepted: bool) -> StepRecord {
    StepRecord {
        obs: env.observe(s).into_iter().map(|o| o.features.into_iter().map(|x| x as f32).collect()).collect(),
        action: actions.iter().map(|a| a.code()).collect(),
        teacher_logp,
        accepted,
    }
}

/// The student acts; the teacher is queried and filtered at every visited state.
pub fn collect_episode<S: Policy, P: Policy>(
    env: &Env,
    student: &S,
    expert: &P,
    cfg: &FilterConfig,
    seed: u64,
    id: u64,
) -> Result<QueryEpisode, DaggerError> {
    let seeds = EpisodeSeeds::new(seed);
    collect_episode_from(env, student, expert, cfg, &seeds, env.reset_seeded(seeds.env), id)
}

/// [`collect_episode`] from a given start state; `seeds.env` is unused.
pub fn collect_episode_from<S: Policy, P: Policy>(
    env: &Env,
    student: &S,
    expert: &P,
    cfg: &FilterConfig,
    seeds: &EpisodeSeeds,
    start: WorldState,
    id: u64,
) -> Result<QueryEpisode, DaggerError> {
    let mut s = start;
    let mut student_rng = ChaCha8Rng::seed_from_u64(seeds.student);
    let mut query_rng = ChaCha8Rng::seed_from_u64(seeds.query);
    let mut smem = student.init_memory(env);
    let mut tmem = expert.init_memory(env);
    let mut steps = Vec::new();
    let mut results = Vec::new();
    while !env.is_done(&s) {
        let q = query_and_filter(env, &s, expert, &mut tmem, &mut query_rng, seeds, s.step as u64, cfg)?;
        steps.push(record(env, &s, &q.actions, q.teacher_logp, q.accepted));
        results.push(q);
        let a = student.act(env, &s, &mut smem, &mut student_rng, false)?;
        env.advance(&mut s, &a.actions)?;
    }
    let length = steps.len();
    Ok(QueryEpisode {
        trajectory: Trajectory { id, source: Source::Query, steps, success: env.success(&s) },
        results,
        student_success: env.success(&s),
        length,
    })
}

/// The student's episode alone, with the same seeds as [`collect_episode`]: the visited states.
pub fn student_episode<S: Policy>(env: &Env, student: &S, seed: u64) -> Result<Vec<WorldState>, DaggerError> {
    let seeds = EpisodeSeeds::new(seed);
    student_episode_from(env, student, &seeds, env.reset_seeded(seeds.env))
}

/// [`student_episode`] from a given start state.
pub fn student_episode_from<S: Policy>(
    env: &Env,
    student: &S,
    seeds: &EpisodeSeeds,
    start: WorldState,
) -> Result<Vec<WorldState>, DaggerError> {
    let mut s = start;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.student);
    let mut mem = student.init_memory(env);
    let mut out = vec![s.clone()];
    while !env.is_done(&s) {
        let a = student.act(env, &s, &mut mem, &mut rng, false)?;
        env.advance(&mut s, &a.actions)?;
        out.push(s.clone());
    }
    Ok(out)
}

/// Runs `n` query episodes in parallel; episode `i` uses seed `seed + i` and id `first_id + i`.
pub fn collect_episodes<S: Policy, P: Policy>(
    env: &Env,
    student: &S,
    expert: &P,
    cfg: &FilterConfig,
    n: usize,
    seed: u64,
    first_id: u64,
) -> Result<Vec<QueryEpisode>, DaggerError> {
    cfg.validate()?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| collect_episode(env, student, expert, cfg, seed.wrapping_add(i), first_id + i))
        .collect()
}

/// Teacher-only episodes, every step a training pair.
pub fn teacher_demos<P: Policy>(env: &Env, expert: &P, n: usize, seed: u64) -> Result<Vec<Trajectory>, DaggerError> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
            let mut s = env.reset_seeded(rng.random());
            let mut mem = expert.init_memory(env);
            let mut steps = Vec::new();
            while !env.is_done(&s) {
                let a = expert.act(env, &s, &mut mem, &mut rng, false)?;
                steps.push(record(env, &s, &a.actions, a.logp, true));
                env.advance(&mut s, &a.actions)?;
            }
            Ok(Trajectory { id: i, source: Source::Teacher, steps, success: env.success(&s) })
        })
        .collect()
}

/// Rejected queries over all queries; 0 when nothing was queried.
pub fn suboptimal_demo_rate(results: &[FilterResult]) -> f64 {
    let queried: Vec<&FilterResult> = results.iter().filter(|r| !r.actions.is_empty()).collect();
    if queried.is_empty() {
        return 0.0;
    }
    queried.iter().filter(|r| !r.accepted).count() as f64 / queried.len() as f64
}

/// Filtered demonstrations: a fixed initial partition plus a FIFO of recent query trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedDataset {
    initial: Vec<Trajectory>,
    recent: VecDeque<Trajectory>,
    recent_capacity: usize,
    /// Query trajectories ever aggregated, including evicted ones.
    pub aggregated: u64,
}

/// Size summary of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub initial_trajectories: usize,
    pub initial_pairs: usize,
    pub recent_trajectories: usize,
    pub recent_pairs: usize,
    pub recent_capacity: usize,
    pub aggregated: u64,
    pub empty_recent: usize,
}

impl AggregatedDataset {
    /// `budget` bounds the total trajectory count; the recent partition gets what the initial one leaves.
    pub fn new(initial: Vec<Trajectory>, budget: usize) -> Result<Self, DaggerError> {
        if initial.len() >= budget {
            return Err(DaggerError::Dataset(format!(
                "initial partition of {} leaves no room in a budget of {budget}",
                initial.len()
            )));
        }
        Ok(Self { recent_capacity: budget - initial.len(), initial, recent: VecDeque::new(), aggregated: 0 })
    }

    pub fn initial(&self) -> &[Trajectory] {
        &self.initial
    }

    pub fn recent(&self) -> impl Iterator<Item = &Trajectory> {
        self.recent.iter()
    }

    pub fn recent_len(&self) -> usize {
        self.recent.len()
    }

    pub fn recent_capacity(&self) -> usize {
        self.recent_capacity
    }

    pub fn len(&self) -> usize {
        self.initial.len() + self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends to the recent partition, evicting the oldest entries past capacity.
    pub fn aggregate(&mut self, tau: Trajectory) {
        self.recent.push_back(tau);
        self.aggregated += 1;
        while self.recent.len() > self.recent_capacity {
            self.recent.pop_front();
        }
    }

    /// Every trajectory in both partitions.
    pub fn all(&self) -> Vec<&Trajectory> {
        self.initial.iter().chain(self.recent.iter()).collect()
    }

    /// Training set for one epoch: all initial trajectories plus a uniform sample of the
    /// recent partition holding at least as many training pairs, when available.
    pub fn epoch_sample(&self, rng: &mut ChaCha8Rng) -> Vec<&Trajectory> {
        let target: usize = self.initial.iter().map(|t| t.n_pairs()).sum();
        let mut idx: Vec<usize> = (0..self.recent.len()).filter(|&i| self.recent[i].n_pairs() > 0).collect();
        idx.shuffle(rng);
        let mut out: Vec<&Trajectory> = self.initial.iter().collect();
        let mut pairs = 0;
        for i in idx {
            if pairs >= target.max(1) {
                break;
            }
            pairs += self.recent[i].n_pairs();
            out.push(&self.recent[i]);
        }
        out
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            initial_trajectories: self.initial.len(),
            initial_pairs: self.initial.iter().map(|t| t.n_pairs()).sum(),
            recent_trajectories: self.recent.len(),
            recent_pairs: self.recent.iter().map(|t| t.n_pairs()).sum(),
            recent_capacity: self.recent_capacity,
            aggregated: self.aggregated,
            empty_recent: self.recent.iter().filter(|t| t.n_pairs() == 0).count(),
        }
    }

    /// Writes `initial.jsonl`, `recent.jsonl` (oldest first) and `dataset.json`.
    pub fn save(&self, dir: &Path) -> Result<(), DaggerError> {
        std::fs::create_dir_all(dir).map_err(DistillError::from)?;
        save_trajectories(&dir.join("initial.jsonl"), &self.initial)?;
        let recent: Vec<Trajectory> = self.recent.iter().cloned().collect();
        save_trajectories(&dir.join("recent.jsonl"), &recent)?;
        let meta = serde_json::to_string_pretty(&self.stats()).map_err(|e| DaggerError::Dataset(e.to_string()))?;
        std::fs::write(dir.join("dataset.json"), meta).map_err(DistillError::from)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DaggerError> {
        let meta = std::fs::read_to_string(dir.join("dataset.json")).map_err(DistillError::from)?;
        let stats: DatasetStats = serde_json::from_str(&meta).map_err(|e| DaggerError::Dataset(e.to_string()))?;
        let initial = load_trajectories(&dir.join("initial.jsonl"))?;
        let recent: VecDeque<Trajectory> = load_trajectories(&dir.join("recent.jsonl"))?.into();
        if initial.len() != stats.initial_trajectories || recent.len() != stats.recent_trajectories {
            return Err(DaggerError::Dataset("partition sizes disagree with dataset.json".into()));
        }
        if recent.len() > stats.recent_capacity {
            return Err(DaggerError::Dataset("recent partition exceeds its capacity".into()));
        }
        Ok(Self { initial, recent, recent_capacity: stats.recent_capacity, aggregated: stats.aggregated })
    }
}

/// On-disk bookkeeping of an append-only dataset log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LogMeta {
    recent_capacity: usize,
    initial: usize,
    /// Aggregation index of the first line in `recent.log.jsonl`.
    disk_start: u64,
    lines: u64,
    bytes: u64,
}

const LOG_FILE: &str = "recent.log.jsonl";
const LOG_META: &str = "log.json";

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

fn read_meta(dir: &Path) -> Result<LogMeta, DaggerError> {
    let s = std::fs::read_to_string(dir.join(LOG_META)).map_err(DistillError::from)?;
    serde_json::from_str(&s).map_err(|e| DaggerError::Dataset(format!("{LOG_META}: {e}")))
}

fn write_meta(dir: &Path, m: &LogMeta) -> Result<(), DaggerError> {
    let s = serde_json::to_vec_pretty(m).map_err(|e| DaggerError::Dataset(e.to_string()))?;
    write_atomic(&dir.join(LOG_META), &s).map_err(DistillError::from)?;
    Ok(())
}

/// The first `meta.lines` records of the log, ignoring any torn tail.
fn read_log(dir: &Path, meta: &LogMeta) -> Result<Vec<Trajectory>, DaggerError> {
    let bytes = std::fs::read(dir.join(LOG_FILE)).map_err(DistillError::from)?;
    if (bytes.len() as u64) < meta.bytes {
        return Err(DaggerError::Dataset("log is shorter than recorded".into()));
    }
    let trajs = crate::distill::read_trajectories(&bytes[..meta.bytes as usize])?;
    if trajs.len() as u64 != meta.lines {
        return Err(DaggerError::Dataset(format!("log holds {} records, expected {}", trajs.len(), meta.lines)));
    }
    Ok(trajs)
}

impl AggregatedDataset {
    /// Starts an incremental log in `dir`: the initial partition and an empty recent log.
    pub fn create_log(&self, dir: &Path) -> Result<(), DaggerError> {
        std::fs::create_dir_all(dir).map_err(DistillError::from)?;
        save_trajectories(&dir.join("initial.jsonl"), &self.initial)?;
        std::fs::write(dir.join(LOG_FILE), b"").map_err(DistillError::from)?;
        let start = self.aggregated - self.recent.len() as u64;
        write_meta(dir, &LogMeta { recent_capacity: self.recent_capacity, initial: self.initial.len(), disk_start: start, lines: 0, bytes: 0 })?;
        self.sync_log(dir, start)
    }

    /// Appends trajectories aggregated since the last sync. Records older than
    /// `keep_from` (an aggregation index) may be dropped when the log is compacted.
    pub fn sync_log(&self, dir: &Path, keep_from: u64) -> Result<(), DaggerError> {
        let mut meta = read_meta(dir)?;
        let on_disk = meta.disk_start + meta.lines;
        let first_mem = self.aggregated - self.recent.len() as u64;
        if on_disk < first_mem {
            return Err(DaggerError::Dataset("records were evicted before being persisted".into()));
        }
        if on_disk > self.aggregated {
            return Err(DaggerError::Dataset("log is ahead of the dataset".into()));
        }
        let fresh: Vec<Trajectory> = self.recent.iter().skip((on_disk - first_mem) as usize).cloned().collect();
        let mut buf = Vec::new();
        crate::distill::write_trajectories(&mut buf, &fresh)?;
        {
            use std::io::Write as _;
            let f = std::fs::OpenOptions::new().write(true).open(dir.join(LOG_FILE)).map_err(DistillError::from)?;
            f.set_len(meta.bytes).map_err(DistillError::from)?;
            let mut f = std::io::BufWriter::new(f);
            std::io::Seek::seek(&mut f, std::io::SeekFrom::End(0)).map_err(DistillError::from)?;
            f.write_all(&buf).map_err(DistillError::from)?;
            f.flush().map_err(DistillError::from)?;
            f.get_ref().sync_data().map_err(DistillError::from)?;
        }
        meta.lines += fresh.len() as u64;
        meta.bytes += buf.len() as u64;
        if meta.lines > 3 * self.recent_capacity as u64 && keep_from > meta.disk_start {
            let all = read_log(dir, &meta)?;
            let drop = (keep_from.min(self.aggregated) - meta.disk_start) as usize;
            let mut kept = Vec::new();
            crate::distill::write_trajectories(&mut kept, &all[drop..])?;
            write_atomic(&dir.join(LOG_FILE), &kept).map_err(DistillError::from)?;
            meta.disk_start += drop as u64;
            meta.lines -= drop as u64;
            meta.bytes = kept.len() as u64;
        }
        write_meta(dir, &meta)
    }

    /// Rebuilds the dataset as it stood after `aggregated` aggregations.
    pub fn open_log(dir: &Path, aggregated: u64) -> Result<Self, DaggerError> {
        let meta = read_meta(dir)?;
        let initial = load_trajectories(&dir.join("initial.jsonl"))?;
        if initial.len() != meta.initial {
            return Err(DaggerError::Dataset("initial partition size disagrees with the log".into()));
        }
        let log = read_log(dir, &meta)?;
        let end = meta.disk_start + meta.lines;
        let start = aggregated.saturating_sub(meta.recent_capacity as u64);
        if aggregated > end || start < meta.disk_start {
            return Err(DaggerError::Dataset(format!(
                "log covers aggregations {}..{end}, cannot rebuild {aggregated}",
                meta.disk_start
            )));
        }
        let recent = log[(start - meta.disk_start) as usize..(aggregated - meta.disk_start) as usize].to_vec().into();
        Ok(Self { initial, recent, recent_capacity: meta.recent_capacity, aggregated })
    }
}
