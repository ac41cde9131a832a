//! Pseudo off-policy teacher refinement on student-prefix / teacher-suffix rollouts.
//!
//! The student explores up to a sampled switch point, the teacher finishes the
//! episode, and V-trace corrects the value targets for the mismatch between the
//! acting policy and the current teacher.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Env, EnvError, JointFeatures};
use crate::numgrad::{adam_step, GradError, OptState, Scope, Tape, Tensor, Var};
use crate::student::{student_act, RecurrentState, StudentError, StudentParams};
use crate::teacher::{bernoulli_logp_entropy, high_logits, value_batch, Teacher, TeacherMemory, TeacherParams};

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("behavior log-probability of an executed action is {0} at step {1}")]
    ImpossibleAction(f64, usize),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("invalid pseudo config: {0}")]
    Config(String),
}

/// Which policy chose the executed joint action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Student,
    Teacher,
}

/// One step of a mixed rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedStep {
    /// Pooled joint features, the value head's input.
    pub pooled: Vec<f64>,
    /// Joint features and sampled bits on subgoal-refresh steps.
    pub refresh: Option<(JointFeatures, Vec<bool>)>,
    /// Σ_i log π_T^{L_i}(a^i | o^i, g^i); constant in θ.
    pub low_logp: f64,
    /// log π_T(ā | ō) at acting time.
    pub teacher_logp: f64,
    /// log μ(ā | ō) under whichever policy acted.
    pub behavior_logp: f64,
    pub tag: Tag,
    /// Team reward.
    pub reward: f64,
    pub done: bool,
}

/// A student-prefix / teacher-suffix episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedTrajectory {
    /// Switch point t' in 1..=H: the student acts on steps 1..=t'.
    pub switch: usize,
    pub steps: Vec<MixedStep>,
    pub success: bool,
}

impl MixedTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn student_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.tag == Tag::Student).count()
    }
}

/// Rolls out one mixed episode with the student frozen.
///
/// `switch` overrides the sampled switch point; it is clamped to `1..=H`.
pub fn rollout_mixed(
    env: &Env,
    student: &StudentParams,
    teacher: &Teacher,
    switch: Option<usize>,
    seed: u64,
) -> Result<MixedTrajectory, PseudoError> {
    let h = env.config().max_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let switch = match switch {
        Some(s) => s.clamp(1, h),
        None => rng.random_range(1..=h),
    };
    let mut s = env.reset_seeded(rng.random());
    let mut hidden = RecurrentState::for_params(student);
    let mut mem = TeacherMemory::default();
    let mut steps = Vec::new();
    while !env.is_done(&s) {
        let t = s.step;
        let (d, behavior_logp, tag) = if t < switch {
            let a = student_act(student, &env.observe(&s), &mut hidden, &mut rng, false)?;
            let d = teacher.score_actions(env, &s, &a.actions, &mut mem, &mut rng)?;
            (d, a.joint_logp, Tag::Student)
        } else {
            let d = teacher.teacher_act(env, &s, &mut mem, &mut rng, false)?;
            let lp = d.logp;
            (d, lp, Tag::Teacher)
        };
        let tr = env.advance(&mut s, &d.actions)?;
        steps.push(MixedStep {
            pooled: d.joint.pooled(),
            refresh: d.refreshed.then(|| (d.joint.clone(), d.subgoals.bits.clone())),
            low_logp: d.low_logp.iter().sum(),
            teacher_logp: d.logp,
            behavior_logp,
            tag,
            reward: tr.team_reward(),
            done: tr.done,
        });
    }
    Ok(MixedTrajectory { switch, steps, success: env.success(&s) })
}

/// Inputs of the V-trace recursion for one contiguous segment.
#[derive(Clone, Debug)]
pub struct VTraceInput<'a> {
    pub rewards: &'a [f64],
    /// V(ō_t) for every step of the segment.
    pub values: &'a [f64],
    /// V of the observation after the last step; ignored when the last step is terminal.
    pub bootstrap: f64,
    pub target_logp: &'a [f64],
    pub behavior_logp: &'a [f64],
    pub dones: &'a [bool],
    pub gamma: f64,
}

/// Corrected targets and the quantities behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct VTraceBatch {
    pub v: Vec<f64>,
    pub rho: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: Vec<f64>,
    pub adv: Vec<f64>,
}

/// V-trace targets over a segment.
///
/// A terminal step cuts the trace and contributes V = 0 after it; the segment end
/// bootstraps from `bootstrap`.
pub fn vtrace_targets(inp: &VTraceInput<'_>) -> Result<VTraceBatch, PseudoError> {
    let n = inp.rewards.len();
    for (name, len) in [
        ("values", inp.values.len()),
        ("target_logp", inp.target_logp.len()),
        ("behavior_logp", inp.behavior_logp.len()),
        ("dones", inp.dones.len()),
    ] {
        if len != n {
            return Err(PseudoError::Length(format!("{name} has {len} entries, rewards {n}")));
        }
    }
    let mut rho = Vec::with_capacity(n);
    for j in 0..n {
        let (lt, lb) = (inp.target_logp[j], inp.behavior_logp[j]);
        if lb == f64::NEG_INFINITY || lb.is_nan() {
            return Err(PseudoError::ImpossibleAction(lb, j));
        }
        if !lt.is_finite() || !lb.is_finite() {
            return Err(PseudoError::NonFinite { what: "log-probability", step: j });
        }
        rho.push((lt - lb).exp().min(1.0));
    }
    let c = rho.clone();
    let next_value = |j: usize| -> f64 {
        if inp.dones[j] {
            0.0
        } else if j + 1 < n {
            inp.values[j + 1]
        } else {
            inp.bootstrap
        }
    };
    let delta: Vec<f64> =
        (0..n).map(|j| rho[j] * (inp.rewards[j] + inp.gamma * next_value(j) - inp.values[j])).collect();
    let mut v = vec![0.0; n];
    let mut carry = 0.0;
    for j in (0..n).rev() {
        let tail = if inp.dones[j] || j + 1 == n { 0.0 } else { carry };
        carry = delta[j] + inp.gamma * c[j] * tail;
        v[j] = inp.values[j] + carry;
    }
    let adv = (0..n)
        .map(|t| {
            let vn = if inp.dones[t] {
                0.0
            } else if t + 1 < n {
                v[t + 1]
            } else {
                inp.bootstrap
            };
            inp.rewards[t] + inp.gamma * vn - inp.values[t]
        })
        .collect();
    for (j, x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(PseudoError::NonFinite { what: "V-trace target", step: j });
        }
    }
    Ok(VTraceBatch { v, rho, c, delta, adv })
}

/// Mean squared error between predictions and targets.
pub fn value_loss(predictions: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(predictions.len(), targets.len());
    let n = predictions.len().max(1) as f64;
    predictions.iter().zip(targets).map(|(p, v)| (p - v) * (p - v)).sum::<f64>() / n
}

/// One term of the mixed policy objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyTerm {
    pub tag: Tag,
    pub target_logp: f64,
    pub behavior_logp: f64,
    pub adv: f64,
}

impl PolicyTerm {
    /// π_T/π_S on student steps, 1 on teacher steps.
    pub fn weight(&self) -> f64 {
        match self.tag {
            Tag::Student => (self.target_logp - self.behavior_logp).exp(),
            Tag::Teacher => 1.0,
        }
    }
}

/// J_θ: mean of weight · log π_T · Â.
pub fn policy_objective(terms: &[PolicyTerm]) -> f64 {
    let n = terms.len().max(1) as f64;
    terms.iter().map(|t| t.weight() * t.target_logp * t.adv).sum::<f64>() / n
}

/// J_θ on a tape: `logp` holds one log π_T per step; weights and advantages are constants.
pub fn policy_objective_graph<'p>(
    t: &mut Tape<'p>,
    logp: Var,
    weights: &[f64],
    adv: &[f64],
) -> Result<Var, GradError> {
    let n = weights.len();
    let coef: Vec<f64> = weights.iter().zip(adv).map(|(w, a)| w * a / n as f64).collect();
    let cv = t.constant(Tensor::vector(coef));
    t.dot(logp, cv)
}

/// A contiguous run of steps from one episode, with the value target after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub steps: Vec<MixedStep>,
    /// Pooled features after the last step when it is not terminal.
    pub bootstrap: Option<Vec<f64>>,
}

/// V-trace batches and objective weights computed under fixed parameters.
#[derive(Clone, Debug)]
pub struct Targets {
    pub batches: Vec<VTraceBatch>,
    /// Per chunk, per step: the J_θ term weight.
    pub weights: Vec<Vec<f64>>,
}

fn pooled_matrix(chunks: &[Chunk], with_bootstrap: bool) -> Result<Tensor, GradError> {
    let d = chunks
        .iter()
        .flat_map(|c| c.steps.first())
        .map(|s| s.pooled.len())
        .next()
        .unwrap_or(1);
    let mut data = Vec::new();
    let mut rows = 0;
    for c in chunks {
        for s in &c.steps {
            data.extend_from_slice(&s.pooled);
            rows += 1;
        }
    }
    if with_bootstrap {
        for c in chunks {
            if let Some(b) = &c.bootstrap {
                data.extend_from_slice(b);
                rows += 1;
            }
        }
    }
    Tensor::matrix(rows, d, data)
}

/// Current log π_T of every step: the high level re-evaluated under θ plus the frozen low levels.
fn target_logps<'p>(t: &mut Tape<'p>, sh: Scope, chunks: &[Chunk]) -> Result<Vec<Vec<(f64, Option<Var>)>>, GradError> {
    chunks
        .iter()
        .map(|c| {
            c.steps
                .iter()
                .map(|s| match &s.refresh {
                    Some((jf, bits)) => {
                        let l = high_logits(t, sh, jf)?;
                        let (lp, _) = bernoulli_logp_entropy(t, l, bits)?;
                        Ok((t.scalar(lp) + s.low_logp, Some(lp)))
                    }
                    None => Ok((s.low_logp, None)),
                })
                .collect()
        })
        .collect()
}

/// Computes V-trace batches and J_θ weights under `params`, all treated as constants afterwards.
pub fn compute_targets(params: &TeacherParams, chunks: &[Chunk], gamma: f64) -> Result<Targets, PseudoError> {
    let mut t = Tape::new();
    let sh = t.bind_frozen(&params.high);
    let sv = t.bind_frozen(&params.value);
    let xv = t.constant(pooled_matrix(chunks, true)?);
    let vv = value_batch(&mut t, sv, xv)?;
    let values = t.value(vv).data().to_vec();
    let lps = target_logps(&mut t, sh, chunks)?;
    let n_steps: usize = chunks.iter().map(|c| c.steps.len()).sum();
    let mut boot_row = n_steps;
    let mut off = 0;
    let mut batches = Vec::with_capacity(chunks.len());
    let mut weights = Vec::with_capacity(chunks.len());
    for (c, lp) in chunks.iter().zip(&lps) {
        let n = c.steps.len();
        let bootstrap = match &c.bootstrap {
            Some(_) => {
                boot_row += 1;
                values[boot_row - 1]
            }
            None => 0.0,
        };
        let target: Vec<f64> = lp.iter().map(|(v, _)| *v).collect();
        let behavior: Vec<f64> = c.steps.iter().map(|s| s.behavior_logp).collect();
        let rewards: Vec<f64> = c.steps.iter().map(|s| s.reward).collect();
        let dones: Vec<bool> = c.steps.iter().map(|s| s.done).collect();
        let b = vtrace_targets(&VTraceInput {
            rewards: &rewards,
            values: &values[off..off + n],
            bootstrap,
            target_logp: &target,
            behavior_logp: &behavior,
            dones: &dones,
            gamma,
        })?;
        weights.push(
            c.steps
                .iter()
                .zip(&target)
                .map(|(s, lt)| PolicyTerm { tag: s.tag, target_logp: *lt, behavior_logp: s.behavior_logp, adv: 0.0 }.weight())
                .collect(),
        );
        batches.push(b);
        off += n;
    }
    Ok(Targets { batches, weights })
}

/// L_ψ on a tape: mean of (V(ō_t) − v_t)² with v_t constant.
pub fn value_loss_graph<'p>(t: &mut Tape<'p>, sv: Scope, chunks: &[Chunk], targets: &Targets) -> Result<Var, GradError> {
    let xv = t.constant(pooled_matrix(chunks, false)?);
    let pred = value_batch(t, sv, xv)?;
    let v: Vec<f64> = targets.batches.iter().flat_map(|b| b.v.iter().copied()).collect();
    let n = v.len() as f64;
    let tv = t.constant(Tensor::vector(v));
    let diff = t.sub(pred, tv)?;
    let sq = t.dot(diff, diff)?;
    t.scale(sq, 1.0 / n)
}

/// J_θ on a tape: only the high-level terms depend on θ; weights and advantages are constant.
pub fn objective_graph<'p>(t: &mut Tape<'p>, sh: Scope, chunks: &[Chunk], targets: &Targets) -> Result<Var, GradError> {
    let n_steps: usize = chunks.iter().map(|c| c.steps.len()).sum();
    let lps = target_logps(t, sh, chunks)?;
    let mut high = Vec::new();
    let mut weights = Vec::new();
    let mut adv = Vec::new();
    let mut constant = 0.0;
    for ((lp, b), w) in lps.iter().zip(&targets.batches).zip(&targets.weights) {
        for (k, (total, var)) in lp.iter().enumerate() {
            let coef = w[k] * b.adv[k] / n_steps as f64;
            match var {
                Some(v) => {
                    high.push(*v);
                    weights.push(w[k]);
                    adv.push(b.adv[k]);
                    constant += coef * (total - t.scalar(*v));
                }
                None => constant += coef * total,
            }
        }
    }
    if high.is_empty() {
        return Ok(t.constant(Tensor::scalar(constant)));
    }
    // policy_objective_graph averages over its own terms; rescale to the whole buffer.
    let hv = t.stack(&high)?;
    let j = policy_objective_graph(t, hv, &weights, &adv)?;
    t.scale_shift(j, high.len() as f64 / n_steps as f64, constant)
}

/// Refinement hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    /// Steps per update buffer (the V-trace horizon n).
    pub n: usize,
    pub gamma: f64,
    /// Mixed episodes per call to [`pseudo_update`].
    pub n_pseudo: usize,
    pub lr_value: f64,
    pub lr_policy: f64,
    /// Episodes rolled out in parallel between parameter refreshes.
    pub workers: usize,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self { n: 200, gamma: 0.9, n_pseudo: 10, lr_value: 1e-4, lr_policy: 1e-4, workers: 4 }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<(), PseudoError> {
        if self.n == 0 || self.workers == 0 {
            return Err(PseudoError::Config("n and workers must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(PseudoError::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if !(self.lr_value > 0.0 && self.lr_policy > 0.0) {
            return Err(PseudoError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer states plus the partially filled buffer, carried across epochs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PseudoLearner {
    pub opt_high: OptState,
    pub opt_value: OptState,
    pending: Vec<Chunk>,
    pending_steps: usize,
}

/// Outcome of one [`pseudo_update`] call.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoReport {
    pub episodes: usize,
    pub steps: usize,
    pub student_steps: usize,
    pub updates: usize,
    pub skipped: usize,
    pub success_rate: f64,
    pub mean_value_loss: f64,
    pub mean_objective: f64,
    /// Fraction of steps with ρ < 1.
    pub truncated_fraction: f64,
}

/// Loss, objective, truncated-step count and the θ/ψ gradients of one buffer.
pub struct BufferGrads {
    pub value_loss: f64,
    pub objective: f64,
    pub truncated: usize,
    pub high: BTreeMap<String, Tensor>,
    pub value: BTreeMap<String, Tensor>,
}

/// Gradients of L_ψ − J_θ for one buffer.
pub fn buffer_grads(params: &TeacherParams, chunks: &[Chunk], gamma: f64) -> Result<BufferGrads, PseudoError> {
    let targets = compute_targets(params, chunks, gamma)?;
    let mut t = Tape::new();
    let sh = t.bind(&params.high);
    let sv = t.bind(&params.value);
    let value_loss = value_loss_graph(&mut t, sv, chunks, &targets)?;
    let objective = objective_graph(&mut t, sh, chunks, &targets)?;
    let loss = t.sub(value_loss, objective)?;
    let grads = t.backward(loss)?;
    let truncated = targets.batches.iter().flat_map(|b| &b.rho).filter(|r| **r < 1.0).count();
    Ok(BufferGrads {
        value_loss: t.scalar(value_loss),
        objective: t.scalar(objective),
        truncated,
        high: t.grads_for(sh, &grads),
        value: t.grads_for(sv, &grads),
    })
}

impl PseudoLearner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending_steps(&self) -> usize {
        self.pending_steps
    }

    /// Appends a trajectory to the buffer and returns every buffer that filled up.
    pub fn push(&mut self, traj: &MixedTrajectory, n: usize) -> Vec<Vec<Chunk>> {
        let mut full = Vec::new();
        let mut start = 0;
        while start < traj.steps.len() {
            let room = n - self.pending_steps;
            let end = (start + room).min(traj.steps.len());
            let bootstrap = (end < traj.steps.len()).then(|| traj.steps[end].pooled.clone());
            self.pending.push(Chunk { steps: traj.steps[start..end].to_vec(), bootstrap });
            self.pending_steps += end - start;
            start = end;
            if self.pending_steps == n {
                full.push(std::mem::take(&mut self.pending));
                self.pending_steps = 0;
            }
        }
        full
    }

    /// One Adam step on ψ (descent on L_ψ) and θ (ascent on J_θ); `None` when skipped.
    pub fn update(&mut self, params: &mut TeacherParams, chunks: &[Chunk], cfg: &PseudoConfig) -> Result<Option<BufferGrads>, PseudoError> {
        let g = match buffer_grads(params, chunks, cfg.gamma) {
            Ok(g) => g,
            Err(PseudoError::Grad(GradError::NonFinite { node })) => {
                log::warn!("pseudo update skipped: non-finite value at node {node}");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let finite = g.value_loss.is_finite()
            && g.objective.is_finite()
            && g.high.values().chain(g.value.values()).all(|x| x.is_finite());
        if !finite {
            log::warn!("pseudo update skipped: non-finite loss or gradient");
            return Ok(None);
        }
        adam_step(&mut params.value, &g.value, &mut self.opt_value, cfg.lr_value);
        adam_step(&mut params.high, &g.high, &mut self.opt_high, cfg.lr_policy);
        Ok(Some(g))
    }
}

/// Refines θ and ψ on `cfg.n_pseudo` mixed episodes; φ and the executors are untouched.
pub fn pseudo_update(
    teacher: &mut Teacher,
    learner: &mut PseudoLearner,
    env: &Env,
    student: &StudentParams,
    cfg: &PseudoConfig,
    seed: u64,
) -> Result<PseudoReport, PseudoError> {
    cfg.validate()?;
    let mut rep = PseudoReport::default();
    let (mut vl, mut obj) = (0.0, 0.0);
    let mut truncated = 0;
    let mut successes = 0;
    let mut ep = 0;
    while ep < cfg.n_pseudo {
        let batch = cfg.workers.min(cfg.n_pseudo - ep);
        let snapshot = teacher.clone();
        let trajs: Vec<MixedTrajectory> = (ep..ep + batch)
            .into_par_iter()
            .map(|i| rollout_mixed(env, student, &snapshot, None, episode_seed(seed, i)))
            .collect::<Result<_, _>>()?;
        ep += batch;
        for tr in &trajs {
            rep.episodes += 1;
            rep.steps += tr.len();
            rep.student_steps += tr.student_steps();
            successes += tr.success as usize;
            for chunks in learner.push(tr, cfg.n) {
                match learner.update(&mut teacher.params, &chunks, cfg)? {
                    Some(g) => {
                        rep.updates += 1;
                        vl += g.value_loss;
                        obj += g.objective;
                        truncated += g.truncated;
                    }
                    None => rep.skipped += 1,
                }
            }
        }
    }
    rep.success_rate = successes as f64 / rep.episodes.max(1) as f64;
    if rep.updates > 0 {
        rep.mean_value_loss = vl / rep.updates as f64;
        rep.mean_objective = obj / rep.updates as f64;
        rep.truncated_fraction = truncated as f64 / (rep.updates * cfg.n) as f64;
    }
    Ok(rep)
}

fn episode_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)
}

#[cfg(test)]
mod tests;
