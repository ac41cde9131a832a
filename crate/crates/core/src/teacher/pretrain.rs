use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::reach::ReachTask;
use super::{
    bernoulli_logp_entropy, high_logits, low_forward, reach_rate, value_batch, Teacher, TeacherError,
    TeacherMemory, TeacherParams, DEFAULT_HIDDEN,
};
use crate::envs::{sample_index, Action, AgentClass, Domain, Env, EnvConfig, Preset, Tier, WorldState, EXEC_DIM};
use crate::numgrad::{adam_step, GradError, OptState, Tape, Tensor};

/// Two-stage teacher pretraining budget and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherPretrainConfig {
    pub high_timesteps: u64,
    pub low_timesteps: u64,
    pub lr: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    /// High-level decision interval.
    pub k: usize,
    pub threads_high: usize,
    pub threads_low: usize,
    /// Steps (low) or decisions (high) each worker collects per update.
    pub rollout_len: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TeacherPretrainConfig {
    fn default() -> Self {
        Self::preset(Preset { domain: Domain::Fc, tier: Tier::Easy }, false)
    }
}

impl TeacherPretrainConfig {
    /// Preset budgets; desk scale is 10% of the full table values.
    pub fn preset(p: Preset, paper_scale: bool) -> Self {
        let (high, low) = match (p.domain, p.tier) {
            (Domain::Marine, Tier::Easy) => (0.8e7, 0.1e7),
            (Domain::Marine, Tier::Medium) => (1.0e7, 0.5e7),
            (Domain::Marine, Tier::Hard) => (3.4e7, 0.6e7),
            (Domain::Fc, Tier::Easy) => (0.25e7, 0.15e7),
            (Domain::Fc, Tier::Medium) => (0.3e7, 0.5e7),
            (Domain::Fc, Tier::Hard) => (0.5e7, 1.3e7),
        };
        let scale = if paper_scale { 1.0 } else { 0.1 };
        Self {
            high_timesteps: (high * scale) as u64,
            low_timesteps: (low * scale) as u64,
            lr: 5e-4,
            entropy_coef: 0.01,
            gamma: 0.9,
            k: [1, 3, 5][p.tier.index()],
            threads_high: 16,
            threads_low: 10,
            rollout_len: 5,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.lr > 0.0) || self.entropy_coef < 0.0 {
            return Err("lr must be > 0 and entropy_coef >= 0".into());
        }
        if self.k == 0 || self.threads_high == 0 || self.threads_low == 0 || self.rollout_len == 0 || self.hidden == 0 {
            return Err("k, thread counts, rollout_len and hidden must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LowReport {
    pub timesteps: [u64; 2],
    pub updates: [usize; 2],
    pub reach_rate: [f64; 2],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HighReport {
    pub timesteps: u64,
    pub updates: usize,
    pub episodes: usize,
    /// Success rate over the last 20% of training episodes.
    pub late_success_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub low: LowReport,
    pub high: HighReport,
}

fn worker_rng(seed: u64, stage: u64, worker: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ stage.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    r.set_stream(worker as u64 + 1);
    r
}

fn check_finite(stage: &'static str, iteration: usize, loss: f64, grads: &BTreeMap<String, Tensor>) -> Result<(), TeacherError> {
    if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
        return Err(TeacherError::Diverged { stage, iteration, detail: format!("loss {loss}") });
    }
    Ok(())
}

/// n-step discounted returns with per-step discounts, bootstrapped from `boot`.
fn discounted_returns(rewards: &[f64], discounts: &[f64], dones: &[bool], boot: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut next = boot;
    for i in (0..rewards.len()).rev() {
        next = rewards[i] + if dones[i] { 0.0 } else { discounts[i] * next };
        out[i] = next;
    }
    out
}

struct LowWorker {
    task: ReachTask,
    rng: ChaCha8Rng,
}

struct LowBatch {
    x: Vec<f64>,
    actions: Vec<usize>,
    returns: Vec<f64>,
}

fn collect_low(w: &mut LowWorker, set: &crate::numgrad::ParamSet, len: usize, gamma: f64) -> Result<LowBatch, GradError> {
    let mut x = Vec::with_capacity(len * EXEC_DIM);
    let (mut actions, mut rewards, mut dones) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..len {
        let f = w.task.features();
        let lp = super::low_level_logprobs(set, std::slice::from_ref(&f))?;
        let probs: Vec<f64> = lp[0].iter().map(|v| v.exp()).collect();
        let a = sample_index(&probs, &mut w.rng, false);
        let (r, done, _) = w.task.step(Action::ALL[a]);
        x.extend(f);
        actions.push(a);
        rewards.push(r);
        dones.push(done);
        if done {
            w.task.reset(&mut w.rng);
        }
    }
    let boot = if *dones.last().expect("len >= 1") {
        0.0
    } else {
        let mut t = Tape::new();
        let s = t.bind_frozen(set);
        let xv = t.constant(Tensor::matrix(1, EXEC_DIM, w.task.features())?);
        let (_, v) = low_forward(&mut t, s, xv)?;
        t.value(v).data()[0]
    };
    let returns = discounted_returns(&rewards, &vec![gamma; rewards.len()], &dones, boot);
    Ok(LowBatch { x, actions, returns })
}

/// Advantage actor-critic loss on a batch of executor samples; returns the loss and gradients.
fn low_loss(
    set: &crate::numgrad::ParamSet,
    x: Vec<f64>,
    actions: &[usize],
    returns: &[f64],
    entropy_coef: f64,
) -> Result<(f64, BTreeMap<String, Tensor>), GradError> {
    let n = actions.len();
    let mut t = Tape::new();
    let s = t.bind(set);
    let xv = t.constant(Tensor::matrix(n, EXEC_DIM, x)?);
    let (logits, v) = low_forward(&mut t, s, xv)?;
    let lp = t.log_softmax(logits)?;
    let lpa = t.gather(lp, actions)?;
    let adv: Vec<f64> = returns.iter().zip(t.value(v).data()).map(|(r, v)| r - v).collect();
    let advv = t.constant(Tensor::vector(adv));
    let pg = t.dot(lpa, advv)?;
    let p = t.softmax(logits)?;
    let plp = t.mul(p, lp)?;
    let neg_ent = t.sum(plp)?;
    let rv = t.constant(Tensor::vector(returns.to_vec()));
    let diff = t.sub(v, rv)?;
    let sq = t.dot(diff, diff)?;
    // loss = (-pg + β Σ p log p + 0.5 Σ (V - R)²) / n
    let a = t.scale(pg, -1.0 / n as f64)?;
    let b = t.scale(neg_ent, entropy_coef / n as f64)?;
    let c = t.scale(sq, 0.5 / n as f64)?;
    let ab = t.add(a, b)?;
    let loss = t.add(ab, c)?;
    let g = t.backward(loss)?;
    Ok((t.scalar(loss), t.grads_for(s, &g)))
}

/// Trains each class executor on randomized reach tasks.
pub fn pretrain_low_level(
    env: &Env,
    cfg: &TeacherPretrainConfig,
    params: &mut TeacherParams,
) -> Result<LowReport, TeacherError> {
    cfg.validate().map_err(|e| TeacherError::Checkpoint(format!("config: {e}")))?;
    let (w, h) = (env.config().width, env.config().height);
    let mut report = LowReport::default();
    for c in 0..2 {
        let class = AgentClass::of(env.domain(), c);
        let budget = cfg.low_timesteps / 2;
        let mut workers: Vec<LowWorker> = (0..cfg.threads_low)
            .map(|i| {
                let mut rng = worker_rng(cfg.seed, 10 + c as u64, i);
                LowWorker { task: ReachTask::new(w, h, class, &mut rng), rng }
            })
            .collect();
        let mut opt = OptState::new();
        let mut steps = 0u64;
        let mut it = 0;
        while steps < budget {
            let set = &params.low[c];
            let batches: Vec<LowBatch> = workers
                .par_iter_mut()
                .map(|wk| collect_low(wk, set, cfg.rollout_len, cfg.gamma))
                .collect::<Result<_, _>>()?;
            let mut x = Vec::new();
            let (mut acts, mut rets) = (Vec::new(), Vec::new());
            for b in batches {
                x.extend(b.x);
                acts.extend(b.actions);
                rets.extend(b.returns);
            }
            steps += acts.len() as u64;
            let (loss, grads) = low_loss(&params.low[c], x, &acts, &rets, cfg.entropy_coef)?;
            check_finite("low-level pretraining", it, loss, &grads)?;
            adam_step(&mut params.low[c], &grads, &mut opt, cfg.lr);
            it += 1;
        }
        let mut rng = worker_rng(cfg.seed, 99, c);
        report.timesteps[c] = steps;
        report.updates[c] = it;
        report.reach_rate[c] = reach_rate(params, class, w, h, 200, &mut rng)?;
        log::info!("executor {class:?}: {steps} steps, {it} updates, reach rate {:.3}", report.reach_rate[c]);
    }
    Ok(report)
}

struct HighWorker {
    state: WorldState,
    mem: TeacherMemory,
    rng: ChaCha8Rng,
    finished: Vec<bool>,
}

struct Decision {
    joint: crate::envs::JointFeatures,
    bits: Vec<bool>,
    reward: f64,
    discount: f64,
    done: bool,
}

struct HighBatch {
    decisions: Vec<Decision>,
    boot: Option<crate::envs::JointFeatures>,
    steps: u64,
}

fn collect_high(
    w: &mut HighWorker,
    env: &Env,
    teacher: &Teacher,
    decisions: usize,
    gamma: f64,
) -> Result<HighBatch, TeacherError> {
    let mut out: Vec<Decision> = Vec::with_capacity(decisions);
    let mut steps = 0;
    loop {
        if env.is_done(&w.state) {
            w.finished.push(env.success(&w.state));
            w.state = env.reset_seeded(w.rng.random());
            w.mem = TeacherMemory::default();
        }
        // Stop at a decision boundary once enough decisions are complete.
        if out.len() >= decisions && w.mem.t % teacher.k == 0 {
            break;
        }
        let d = teacher.teacher_act(env, &w.state, &mut w.mem, &mut w.rng, false)?;
        if d.refreshed {
            out.push(Decision { joint: d.joint, bits: d.subgoals.bits.clone(), reward: 0.0, discount: 1.0, done: false });
        }
        let tr = env.advance(&mut w.state, &d.actions)?;
        steps += 1;
        let cur = out.last_mut().expect("first step refreshes");
        cur.reward += cur.discount * tr.team_reward();
        cur.discount *= gamma;
        cur.done = tr.done;
        if tr.done {
            w.mem.t = 0;
        }
    }
    let boot = match out.last() {
        Some(d) if !d.done => Some(env.global_observe(&w.state)),
        _ => None,
    };
    Ok(HighBatch { decisions: out, boot, steps })
}

/// Trains θ and ψ over subgoal assignments with the executors frozen.
pub fn pretrain_high_level(
    env: &Env,
    cfg: &TeacherPretrainConfig,
    params: &mut TeacherParams,
) -> Result<HighReport, TeacherError> {
    cfg.validate().map_err(|e| TeacherError::Checkpoint(format!("config: {e}")))?;
    let mut workers: Vec<HighWorker> = (0..cfg.threads_high)
        .map(|i| {
            let mut rng = worker_rng(cfg.seed, 20, i);
            let state = env.reset_seeded(rng.random());
            HighWorker { state, mem: TeacherMemory::default(), rng, finished: Vec::new() }
        })
        .collect();
    let (mut opt_h, mut opt_v) = (OptState::new(), OptState::new());
    let mut steps = 0u64;
    let mut it = 0;
    while steps < cfg.high_timesteps {
        let teacher = Teacher::new(params.clone(), cfg.k);
        let batches: Vec<HighBatch> = workers
            .par_iter_mut()
            .map(|w| collect_high(w, env, &teacher, cfg.rollout_len, cfg.gamma))
            .collect::<Result<_, _>>()?;
        let (loss, gh, gv) = high_loss(params, &batches, cfg.entropy_coef)?;
        check_finite("high-level pretraining", it, loss, &gh)?;
        check_finite("value pretraining", it, loss, &gv)?;
        adam_step(&mut params.high, &gh, &mut opt_h, cfg.lr);
        adam_step(&mut params.value, &gv, &mut opt_v, cfg.lr);
        steps += batches.iter().map(|b| b.steps).sum::<u64>();
        it += 1;
        if it % 50 == 0 {
            let recent: Vec<bool> = workers.iter().flat_map(|w| w.finished.iter().rev().take(10).copied()).collect();
            let rate = recent.iter().filter(|s| **s).count() as f64 / recent.len().max(1) as f64;
            log::info!("high-level it {it}: {steps} steps, loss {loss:.4}, recent success {rate:.3}");
        }
    }
    let mut all: Vec<(usize, bool)> = Vec::new();
    for w in &workers {
        let n = w.finished.len();
        all.extend(w.finished.iter().enumerate().map(|(i, s)| (i * 1000 / n.max(1), *s)));
    }
    let late: Vec<bool> = all.iter().filter(|(q, _)| *q >= 800).map(|(_, s)| *s).collect();
    Ok(HighReport {
        timesteps: steps,
        updates: it,
        episodes: workers.iter().map(|w| w.finished.len()).sum(),
        late_success_rate: late.iter().filter(|s| **s).count() as f64 / late.len().max(1) as f64,
    })
}

type HighGrads = (f64, BTreeMap<String, Tensor>, BTreeMap<String, Tensor>);

fn high_loss(params: &TeacherParams, batches: &[HighBatch], entropy_coef: f64) -> Result<HighGrads, GradError> {
    let mut t = Tape::new();
    let sh = t.bind(&params.high);
    let sv = t.bind(&params.value);
    let mut lps = Vec::new();
    let mut ents = Vec::new();
    let mut pooled = Vec::new();
    let mut returns = Vec::new();
    let d2 = params.value.get("v1.w").expect("v1").shape()[1];
    for b in batches {
        let boot = match &b.boot {
            Some(jf) => super::teacher_value(params, jf)?,
            None => 0.0,
        };
        let r: Vec<f64> = b.decisions.iter().map(|d| d.reward).collect();
        let disc: Vec<f64> = b.decisions.iter().map(|d| d.discount).collect();
        let dones: Vec<bool> = b.decisions.iter().map(|d| d.done).collect();
        returns.extend(discounted_returns(&r, &disc, &dones, boot));
        for d in &b.decisions {
            let l = high_logits(&mut t, sh, &d.joint)?;
            let (lp, ent) = bernoulli_logp_entropy(&mut t, l, &d.bits)?;
            lps.push(lp);
            ents.push(ent);
            pooled.extend(d.joint.pooled());
        }
    }
    let n = lps.len();
    let x = t.constant(Tensor::matrix(n, d2, pooled)?);
    let v = value_batch(&mut t, sv, x)?;
    let adv: Vec<f64> = returns.iter().zip(t.value(v).data()).map(|(r, v)| r - v).collect();
    let lpv = t.stack(&lps)?;
    let entv = t.stack(&ents)?;
    let advv = t.constant(Tensor::vector(adv));
    let pg = t.dot(lpv, advv)?;
    let ent = t.sum(entv)?;
    let rv = t.constant(Tensor::vector(returns));
    let diff = t.sub(v, rv)?;
    let sq = t.dot(diff, diff)?;
    let a = t.scale(pg, -1.0 / n as f64)?;
    let b = t.scale(ent, -entropy_coef / n as f64)?;
    let c = t.scale(sq, 0.5 / n as f64)?;
    let ab = t.add(a, b)?;
    let loss = t.add(ab, c)?;
    let g = t.backward(loss)?;
    Ok((t.scalar(loss), t.grads_for(sh, &g), t.grads_for(sv, &g)))
}

/// Runs both stages from a fresh initialization.
pub fn pretrain_teacher(env_cfg: &EnvConfig, cfg: &TeacherPretrainConfig) -> Result<(TeacherParams, PretrainReport), TeacherError> {
    let env = Env::new(env_cfg.clone())?;
    let mut params = TeacherParams::init(&env, cfg.hidden, cfg.seed);
    let low = pretrain_low_level(&env, cfg, &mut params)?;
    let high = pretrain_high_level(&env, cfg, &mut params)?;
    Ok((params, PretrainReport { low, high }))
}
