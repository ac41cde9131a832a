//! Hierarchical centralized teacher: a high-level coordinator emitting binary
//! agent-target subgoals every `k` steps, class-specific low-level executors,
//! and a joint value head.

mod pretrain;
mod reach;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{
    sample_index, Action, ActOutcome, AgentClass, Env, JointFeatures, Policy, WorldState, EXEC_DIM,
};
use crate::numgrad::{GradError, ParamSet, Role, Scope, Tape, Tensor, Var};

pub use pretrain::{
    pretrain_high_level, pretrain_low_level, pretrain_teacher, HighReport, LowReport, PretrainReport,
    TeacherPretrainConfig,
};
pub use reach::{reach_rate, ReachTask};

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum TeacherError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    #[error("{stage} diverged at iteration {iteration}: {detail}")]
    Diverged { stage: &'static str, iteration: usize, detail: String },
    #[error("low-level params for {expected:?} used with a {got:?} agent")]
    ClassMismatch { expected: Role, got: AgentClass },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// θ (high), ψ (value) and one low-level set per agent class.
#[derive(Clone, Debug)]
pub struct TeacherParams {
    pub high: ParamSet,
    pub value: ParamSet,
    pub low: [ParamSet; 2],
}

impl TeacherParams {
    pub fn init(env: &Env, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = env.row_dim();
        let mut high = ParamSet::new(Role::TeacherHigh);
        let mut value = ParamSet::new(Role::TeacherValue);
        let build = || -> Result<[ParamSet; 2], GradError> {
            let mut sets = [ParamSet::new(Role::TeacherLow(0)), ParamSet::new(Role::TeacherLow(1))];
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            for (c, set) in sets.iter_mut().enumerate() {
                let n_act = AgentClass::of(env.domain(), c).n_actions();
                set.add_affine("l1", EXEC_DIM, hidden, &mut rng)?;
                set.add_affine("l2", hidden, hidden, &mut rng)?;
                set.add_affine("pi", hidden, n_act, &mut rng)?;
                set.add_affine("v1", EXEC_DIM, hidden, &mut rng)?;
                set.add_affine("v2", hidden, 1, &mut rng)?;
            }
            Ok(sets)
        };
        let mut init = || -> Result<(), GradError> {
            for c in 0..2 {
                high.add_affine(&format!("enc{c}"), d, hidden, &mut rng)?;
            }
            high.add_linear("ctx", hidden, hidden, &mut rng)?;
            high.add_affine("s1", hidden, hidden, &mut rng)?;
            high.add_affine("s2", hidden, 1, &mut rng)?;
            value.add_affine("v1", 2 * d, hidden, &mut rng)?;
            value.add_affine("v2", hidden, 1, &mut rng)?;
            Ok(())
        };
        init().expect("fresh names");
        let low = build().expect("fresh names");
        Self { high, value, low }
    }

    pub fn low_for(&self, class: AgentClass) -> &ParamSet {
        &self.low[class.index()]
    }

    pub fn same_bits(&self, o: &TeacherParams) -> bool {
        self.high.same_bits(&o.high)
            && self.value.same_bits(&o.value)
            && self.low[0].same_bits(&o.low[0])
            && self.low[1].same_bits(&o.low[1])
    }

    /// Writes one file per role into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TeacherError> {
        std::fs::create_dir_all(dir)?;
        self.high.save(&dir.join("high.pset"))?;
        self.value.save(&dir.join("value.pset"))?;
        self.low[0].save(&dir.join("low0.pset"))?;
        self.low[1].save(&dir.join("low1.pset"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TeacherError> {
        let load = |f: &str, role: Role| -> Result<ParamSet, TeacherError> {
            let p = ParamSet::load(&dir.join(f)).map_err(|e| TeacherError::Checkpoint(format!("{f}: {e}")))?;
            if p.role() != role {
                return Err(TeacherError::Checkpoint(format!("{f}: expected role {role}, found {}", p.role())));
            }
            Ok(p)
        };
        Ok(Self {
            high: load("high.pset", Role::TeacherHigh)?,
            value: load("value.pset", Role::TeacherValue)?,
            low: [load("low0.pset", Role::TeacherLow(0))?, load("low1.pset", Role::TeacherLow(1))?],
        })
    }
}

/// High-level logits, one per (agent, target) row, on a tape.
pub fn high_logits<'p>(t: &mut Tape<'p>, s: Scope, jf: &JointFeatures) -> Result<Var, GradError> {
    let d = jf.rows.cols();
    let n = jf.n_rows() as f64;
    let mut encs = Vec::with_capacity(2);
    let mut ctx: Option<Var> = None;
    for c in 0..2 {
        let block = jf.class_rows(c);
        let rows = block.len() / d;
        let x = t.constant(Tensor::matrix(rows, d, block.to_vec())?);
        let (w, b) = (t.param(s, &format!("enc{c}.w"))?, t.param(s, &format!("enc{c}.b"))?);
        let pre = t.affine(w, x, Some(b))?;
        let e = t.tanh(pre)?;
        let m = t.mean_rows(e)?;
        let m = t.scale(m, rows as f64 / n)?;
        ctx = Some(match ctx {
            None => m,
            Some(prev) => t.add(prev, m)?,
        });
        encs.push((e, rows));
    }
    let cw = t.param(s, "ctx")?;
    let cproj = t.affine(cw, ctx.expect("two classes"), None)?;
    let (s1w, s1b, s2w, s2b) = (t.param(s, "s1.w")?, t.param(s, "s1.b")?, t.param(s, "s2.w")?, t.param(s, "s2.b")?);
    let mut parts = Vec::with_capacity(2);
    for (e, rows) in encs {
        let h = t.affine(s1w, e, Some(s1b))?;
        let h = t.add_row(h, cproj)?;
        let h = t.tanh(h)?;
        let l = t.affine(s2w, h, Some(s2b))?;
        parts.push(t.gather(l, &vec![0; rows])?);
    }
    t.concat(&parts)
}

/// Sum of Bernoulli log-probabilities of `bits` given logits, plus the summed bit entropy.
pub fn bernoulli_logp_entropy<'p>(t: &mut Tape<'p>, logits: Var, bits: &[bool]) -> Result<(Var, Var), GradError> {
    let signs = Tensor::vector(bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect());
    let sv = t.constant(signs);
    let signed = t.mul(logits, sv)?;
    let lp = t.log_sigmoid(signed)?;
    let logp = t.sum(lp)?;
    // H = -(p log p + (1-p) log(1-p)) with log p = logσ(x), log(1-p) = logσ(-x).
    let p = t.sigmoid(logits)?;
    let q = t.scale_shift(p, -1.0, 1.0)?;
    let lpos = t.log_sigmoid(logits)?;
    let neg = t.scale(logits, -1.0)?;
    let lneg = t.log_sigmoid(neg)?;
    let a = t.mul(p, lpos)?;
    let b = t.mul(q, lneg)?;
    let ab = t.add(a, b)?;
    let hsum = t.sum(ab)?;
    let ent = t.scale(hsum, -1.0)?;
    Ok((logp, ent))
}

/// V(ō) for a batch of pooled joint features `[n, 2·row_dim]`, giving `[n]`.
pub fn value_batch<'p>(t: &mut Tape<'p>, s: Scope, pooled: Var) -> Result<Var, GradError> {
    let n = t.value(pooled).rows();
    let (w1, b1, w2, b2) = (t.param(s, "v1.w")?, t.param(s, "v1.b")?, t.param(s, "v2.w")?, t.param(s, "v2.b")?);
    let h = t.affine(w1, pooled, Some(b1))?;
    let h = t.tanh(h)?;
    let v = t.affine(w2, h, Some(b2))?;
    t.gather(v, &vec![0; n])
}

/// Executor logits `[n, |A|]` and critic values `[n]` for features `[n, EXEC_DIM]`.
pub fn low_forward<'p>(t: &mut Tape<'p>, s: Scope, x: Var) -> Result<(Var, Var), GradError> {
    let n = t.value(x).rows();
    let p = |t: &Tape<'p>, n: &str| t.param(s, n);
    let h = t.affine(p(t, "l1.w")?, x, Some(p(t, "l1.b")?))?;
    let h = t.tanh(h)?;
    let h = t.affine(p(t, "l2.w")?, h, Some(p(t, "l2.b")?))?;
    let h = t.tanh(h)?;
    let logits = t.affine(p(t, "pi.w")?, h, Some(p(t, "pi.b")?))?;
    let c = t.affine(p(t, "v1.w")?, x, Some(p(t, "v1.b")?))?;
    let c = t.tanh(c)?;
    let v = t.affine(p(t, "v2.w")?, c, Some(p(t, "v2.b")?))?;
    let v = t.gather(v, &vec![0; n])?;
    Ok((logits, v))
}

/// Per-row Bernoulli probabilities plus sampled bits and their joint log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct HighOutput {
    pub probs: Vec<f64>,
    pub bits: Vec<bool>,
    pub logp: f64,
}

/// Evaluates θ on the joint features and samples one bit per (agent, target) pair.
pub fn high_level_policy(
    params: &TeacherParams,
    jf: &JointFeatures,
    rng: &mut dyn rand::RngCore,
    greedy: bool,
) -> Result<HighOutput, GradError> {
    use rand::Rng;
    let mut t = Tape::new();
    let s = t.bind_frozen(&params.high);
    let l = high_logits(&mut t, s, jf)?;
    let logits = t.value(l).data().to_vec();
    let probs: Vec<f64> = logits.iter().map(|x| crate::numgrad::sigmoid(*x)).collect();
    let bits: Vec<bool> = probs.iter().map(|&p| if greedy { p >= 0.5 } else { rng.random::<f64>() < p }).collect();
    let logp = logits
        .iter()
        .zip(&bits)
        .map(|(x, &b)| crate::numgrad::log_sigmoid(if b { *x } else { -*x }))
        .sum();
    Ok(HighOutput { probs, bits, logp })
}

/// Log-probability of `bits` under θ.
pub fn high_level_logp(params: &TeacherParams, jf: &JointFeatures, bits: &[bool]) -> Result<f64, GradError> {
    let mut t = Tape::new();
    let s = t.bind_frozen(&params.high);
    let l = high_logits(&mut t, s, jf)?;
    let (lp, _) = bernoulli_logp_entropy(&mut t, l, bits)?;
    Ok(t.scalar(lp))
}

/// Splits flat sampled bits per agent; an all-zero assignment becomes the nearest-target singleton.
pub fn effective_subgoals(env: &Env, s: &WorldState, jf: &JointFeatures, bits: &[bool]) -> Vec<Vec<bool>> {
    jf.agent_rows
        .iter()
        .enumerate()
        .map(|(i, &(start, n))| {
            let mut g = bits[start..start + n].to_vec();
            if !g.iter().any(|b| *b) {
                g[env.nearest_target(s, i)] = true;
            }
            g
        })
        .collect()
}

pub fn teacher_value(params: &TeacherParams, jf: &JointFeatures) -> Result<f64, GradError> {
    let mut t = Tape::new();
    let s = t.bind_frozen(&params.value);
    let pooled = jf.pooled();
    let x = t.constant(Tensor::matrix(1, pooled.len(), pooled)?);
    let v = value_batch(&mut t, s, x)?;
    Ok(t.value(v).data()[0])
}

/// Action distribution of one executor.
pub fn low_level_policy(
    params: &TeacherParams,
    class: AgentClass,
    features: &[f64],
) -> Result<Vec<f64>, TeacherError> {
    let set = params.low_for(class);
    if set.role() != Role::TeacherLow(class.index() as u8) {
        return Err(TeacherError::ClassMismatch { expected: set.role(), got: class });
    }
    let mut lp = low_level_logprobs(set, &[features.to_vec()])?;
    Ok(lp.remove(0).into_iter().map(f64::exp).collect())
}

/// Log-probabilities `[n][|A|]` of a batch of executor inputs.
///
/// Evaluated without a tape; matches `low_forward` followed by `log_softmax` bit for bit.
pub fn low_level_logprobs(set: &ParamSet, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, GradError> {
    let get = |n: &str| set.get(n).ok_or_else(|| GradError::UnknownParam(n.to_string()));
    let layers = [(get("l1.w")?, get("l1.b")?), (get("l2.w")?, get("l2.b")?), (get("pi.w")?, get("pi.b")?)];
    let mut out = Vec::with_capacity(features.len());
    for x in features {
        if x.len() != EXEC_DIM {
            return Err(GradError::Shape { node: "low_level_logprobs".into(), detail: format!("input width {}", x.len()) });
        }
        let mut h = x.clone();
        for (li, (w, b)) in layers.iter().enumerate() {
            let (o, i) = (w.rows(), w.cols());
            if i != h.len() || b.data().len() != o {
                return Err(GradError::Shape { node: "low_level_logprobs".into(), detail: format!("weight {:?}", w.shape()) });
            }
            let wd = w.data();
            let mut y: Vec<f64> = (0..o)
                .map(|k| wd[k * i..(k + 1) * i].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + b.data()[k])
                .collect();
            if li < 2 {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = y;
        }
        let lse = crate::numgrad::log_sum_exp(&h);
        h.iter_mut().for_each(|v| *v -= lse);
        out.push(h);
    }
    Ok(out)
}

/// Live subgoal assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgoals {
    /// Sampled bits, flat over the joint feature rows.
    pub bits: Vec<bool>,
    /// Per-agent assignment after the empty-assignment repair.
    pub per_agent: Vec<Vec<bool>>,
    /// Log-probability of `bits` when sampled.
    pub logp: f64,
    /// Steps since assignment; always `< k`.
    pub refresh_age: usize,
}

/// Per-episode teacher state: the step counter and the cached subgoals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherMemory {
    pub t: usize,
    pub subgoals: Option<Subgoals>,
}

/// Everything the teacher decided at one step.
#[derive(Clone, Debug)]
pub struct TeacherDecision {
    pub actions: Vec<Action>,
    /// `high_logp` (on refresh steps) plus the sum of `low_logp`.
    pub logp: f64,
    pub high_logp: Option<f64>,
    pub low_logp: Vec<f64>,
    pub refreshed: bool,
    pub joint: JointFeatures,
    pub subgoals: Subgoals,
}

/// The hierarchical teacher as an acting policy.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub params: TeacherParams,
    pub k: usize,
}

impl Teacher {
    pub fn new(params: TeacherParams, k: usize) -> Self {
        assert!(k >= 1, "k must be >= 1");
        Self { params, k }
    }

    /// Refreshes the subgoals if due, otherwise ages them, and returns whether a refresh happened.
    pub fn update_subgoals(
        &self,
        env: &Env,
        s: &WorldState,
        jf: &JointFeatures,
        mem: &mut TeacherMemory,
        rng: &mut dyn rand::RngCore,
        greedy: bool,
    ) -> Result<bool, GradError> {
        let due = mem.t % self.k == 0 || mem.subgoals.is_none();
        if due {
            let h = high_level_policy(&self.params, jf, rng, greedy)?;
            let per_agent = effective_subgoals(env, s, jf, &h.bits);
            mem.subgoals = Some(Subgoals { bits: h.bits, per_agent, logp: h.logp, refresh_age: 0 });
        } else if let Some(g) = &mut mem.subgoals {
            g.refresh_age += 1;
        }
        Ok(due)
    }

    /// Executor inputs for every agent under the live subgoals.
    pub fn executor_inputs(&self, env: &Env, s: &WorldState, g: &Subgoals) -> Vec<Vec<f64>> {
        (0..env.n_agents()).map(|i| env.executor_features(s, i, &g.per_agent[i])).collect()
    }

    /// Per-agent log-probability tables under the live subgoals.
    pub fn executor_logprobs(&self, env: &Env, s: &WorldState, g: &Subgoals) -> Result<Vec<Vec<f64>>, GradError> {
        let x = self.executor_inputs(env, s, g);
        let mut out = vec![Vec::new(); env.n_agents()];
        for c in 0..2 {
            let idx: Vec<usize> = (0..env.n_agents()).filter(|&i| env.class_of(i).index() == c).collect();
            if idx.is_empty() {
                continue;
            }
            let feats: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
            let lp = low_level_logprobs(&self.params.low[c], &feats)?;
            for (i, row) in idx.into_iter().zip(lp) {
                out[i] = row;
            }
        }
        Ok(out)
    }

    /// One teacher step: refresh subgoals when `t ≡ 0 (mod k)`, then sample every executor.
    pub fn teacher_act(
        &self,
        env: &Env,
        s: &WorldState,
        mem: &mut TeacherMemory,
        rng: &mut dyn rand::RngCore,
        greedy: bool,
    ) -> Result<TeacherDecision, GradError> {
        let jf = env.global_observe(s);
        let refreshed = self.update_subgoals(env, s, &jf, mem, rng, greedy)?;
        let g = mem.subgoals.clone().expect("subgoals set");
        let (actions, low_logp) = self.sample_executors(env, s, &g, rng, greedy)?;
        mem.t += 1;
        let high_logp = refreshed.then_some(g.logp);
        let logp = high_logp.unwrap_or(0.0) + low_logp.iter().sum::<f64>();
        Ok(TeacherDecision { actions, logp, high_logp, low_logp, refreshed, joint: jf, subgoals: g })
    }

    fn sample_executors(
        &self,
        env: &Env,
        s: &WorldState,
        g: &Subgoals,
        rng: &mut dyn rand::RngCore,
        greedy: bool,
    ) -> Result<(Vec<Action>, Vec<f64>), GradError> {
        let lps = self.executor_logprobs(env, s, g)?;
        let mut actions = Vec::with_capacity(env.n_agents());
        let mut low_logp = Vec::with_capacity(env.n_agents());
        for row in &lps {
            let probs: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let a = sample_index(&probs, rng, greedy);
            actions.push(Action::ALL[a]);
            low_logp.push(row[a]);
        }
        Ok((actions, low_logp))
    }

    /// Teacher log-probability of a given joint action, advancing the subgoal cache as acting would.
    ///
    /// Used where another policy acted: the high level is sampled at refresh steps and
    /// the executors are scored on the executed actions.
    pub fn score_actions(
        &self,
        env: &Env,
        s: &WorldState,
        actions: &[Action],
        mem: &mut TeacherMemory,
        rng: &mut dyn rand::RngCore,
    ) -> Result<TeacherDecision, GradError> {
        let jf = env.global_observe(s);
        let refreshed = self.update_subgoals(env, s, &jf, mem, rng, false)?;
        let g = mem.subgoals.clone().expect("subgoals set");
        let lps = self.executor_logprobs(env, s, &g)?;
        let low_logp: Vec<f64> = lps.iter().zip(actions).map(|(row, a)| row[a.code() as usize]).collect();
        mem.t += 1;
        let high_logp = refreshed.then_some(g.logp);
        let logp = high_logp.unwrap_or(0.0) + low_logp.iter().sum::<f64>();
        Ok(TeacherDecision { actions: actions.to_vec(), logp, high_logp, low_logp, refreshed, joint: jf, subgoals: g })
    }
}

impl Policy for Teacher {
    type Memory = TeacherMemory;

    fn init_memory(&self, _env: &Env) -> TeacherMemory {
        TeacherMemory::default()
    }

    fn act(
        &self,
        env: &Env,
        state: &WorldState,
        memory: &mut TeacherMemory,
        rng: &mut dyn rand::RngCore,
        greedy: bool,
    ) -> Result<ActOutcome, GradError> {
        // Same draws as `teacher_act`; joint features are only built when the subgoals refresh.
        let refreshed = if memory.t % self.k == 0 || memory.subgoals.is_none() {
            let jf = env.global_observe(state);
            self.update_subgoals(env, state, &jf, memory, rng, greedy)?
        } else {
            if let Some(g) = &mut memory.subgoals {
                g.refresh_age += 1;
            }
            false
        };
        let g = memory.subgoals.as_ref().expect("subgoals set");
        let (actions, low_logp) = self.sample_executors(env, state, g, rng, greedy)?;
        memory.t += 1;
        let high = if refreshed { g.logp } else { 0.0 };
        Ok(ActOutcome { actions, logp: high + low_logp.iter().sum::<f64>() })
    }
}

/// Pretraining record written next to the checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TeacherManifest {
    pub config_hash: String,
    pub preset: String,
    pub k: usize,
    pub hidden: usize,
    pub low_timesteps: u64,
    pub high_timesteps: u64,
    pub low_reach_rate: [f64; 2],
    pub success_rate: f64,
}

impl TeacherManifest {
    pub fn save(&self, dir: &Path) -> Result<(), TeacherError> {
        std::fs::create_dir_all(dir)?;
        let s = serde_json::to_string_pretty(self).map_err(|e| TeacherError::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), s)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TeacherError> {
        let s = std::fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&s).map_err(|e| TeacherError::Checkpoint(e.to_string()))
    }
}
