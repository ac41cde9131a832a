//! Decentralized student policies: per-class encoder, gated recurrent cell,
//! one attention round across agents, and a per-class action decoder.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{sample_index, ActOutcome, Action, AgentClass, AgentObservation, Env, Policy, WorldState};
use crate::numgrad::{GradError, ParamSet, Role, Scope, Tape, Tensor, Var};

/// Communication used by the attention round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommMode {
    /// Messages are zero; each agent sees only its own history.
    None,
    /// One set of query/key/value maps shared by all class pairs.
    Homogeneous,
    /// Query maps per receiving class, key/value maps per (sender, receiver) class pair.
    #[default]
    Heterogeneous,
}

impl fmt::Display for CommMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommMode::None => "none",
            CommMode::Homogeneous => "homogeneous",
            CommMode::Heterogeneous => "heterogeneous",
        })
    }
}

impl FromStr for CommMode {
    type Err = StudentError;

    fn from_str(s: &str) -> Result<Self, StudentError> {
        match s {
            "none" => Ok(CommMode::None),
            "homogeneous" => Ok(CommMode::Homogeneous),
            "heterogeneous" => Ok(CommMode::Heterogeneous),
            _ => Err(StudentError::Config(format!("unknown comm mode {s:?}"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum StudentError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("invalid student config: {0}")]
    Config(String),
    #[error("expected {expected} observations, got {got}")]
    ObservationCount { expected: usize, got: usize },
    #[error("sequence length mismatch: {observations} observation steps vs {actions} action steps")]
    LengthMismatch { observations: usize, actions: usize },
    #[error("hidden state shape does not match: {0}")]
    Hidden(String),
    #[error("non-finite activation in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub hidden: usize,
    pub message: usize,
    pub comm: CommMode,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self { hidden: 32, message: 16, comm: CommMode::Heterogeneous }
    }
}

/// Shapes the student needs from its environment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub classes: Vec<AgentClass>,
    pub obs_dims: [usize; 2],
    pub n_actions: [usize; 2],
}

impl Layout {
    pub fn of(env: &Env) -> Self {
        let classes = env.classes().to_vec();
        let c = |k: usize| AgentClass::of(env.domain(), k);
        Self {
            classes,
            obs_dims: [env.obs_dim(c(0)), env.obs_dim(c(1))],
            n_actions: [c(0).n_actions(), c(1).n_actions()],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.classes.len()
    }

    /// Agent indices of class index `c`, in agent order.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.classes.len()).filter(|&i| self.classes[i].index() == c).collect()
    }

    /// Sender order used by the attention round: class 0 members, then class 1.
    fn sender_order(&self) -> Vec<usize> {
        let mut v = self.members(0);
        v.extend(self.members(1));
        v
    }
}

/// Student weights φ plus their shapes.
#[derive(Clone, Debug)]
pub struct StudentParams {
    pub set: ParamSet,
    pub cfg: StudentConfig,
    pub layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct StudentMeta {
    cfg: StudentConfig,
    layout: Layout,
}

impl StudentParams {
    pub fn init(env: &Env, cfg: StudentConfig, seed: u64) -> Result<Self, StudentError> {
        if cfg.hidden == 0 || cfg.message == 0 {
            return Err(StudentError::Config("hidden and message widths must be >= 1".into()));
        }
        let layout = Layout::of(env);
        let (h, m) = (cfg.hidden, cfg.message);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new(Role::Student);
        for c in 0..2 {
            set.add_affine(&format!("enc{c}.l1"), layout.obs_dims[c], h, &mut rng)?;
            set.add_affine(&format!("enc{c}.l2"), h, h, &mut rng)?;
            for g in ["z", "r", "n"] {
                set.add_affine(&format!("gru{c}.{g}"), h, h, &mut rng)?;
                set.add_linear(&format!("gru{c}.{g}.u"), h, h, &mut rng)?;
            }
            set.add_affine(&format!("dec{c}.h"), h, h, &mut rng)?;
            set.add_linear(&format!("dec{c}.m"), m, h, &mut rng)?;
            set.add_affine(&format!("dec{c}.pi"), h, layout.n_actions[c], &mut rng)?;
        }
        match cfg.comm {
            CommMode::None => {}
            CommMode::Homogeneous => {
                for k in ["q", "k", "v"] {
                    set.add_linear(&format!("att.{k}"), h, m, &mut rng)?;
                }
            }
            CommMode::Heterogeneous => {
                for d in 0..2 {
                    set.add_linear(&format!("att.q{d}"), h, m, &mut rng)?;
                    for s in 0..2 {
                        set.add_linear(&format!("att.k{s}{d}"), h, m, &mut rng)?;
                        set.add_linear(&format!("att.v{s}{d}"), h, m, &mut rng)?;
                    }
                }
            }
        }
        Ok(Self { set, cfg, layout })
    }

    pub fn same_bits(&self, o: &StudentParams) -> bool {
        self.cfg == o.cfg && self.layout == o.layout && self.set.same_bits(&o.set)
    }

    pub fn save(&self, dir: &Path) -> Result<(), StudentError> {
        std::fs::create_dir_all(dir)?;
        self.set.save(&dir.join("student.pset"))?;
        let meta = StudentMeta { cfg: self.cfg.clone(), layout: self.layout.clone() };
        let s = serde_json::to_string_pretty(&meta).map_err(|e| StudentError::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join("student.json"), s)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, StudentError> {
        let s = std::fs::read_to_string(dir.join("student.json"))?;
        let meta: StudentMeta = serde_json::from_str(&s).map_err(|e| StudentError::Checkpoint(e.to_string()))?;
        let set = ParamSet::load(&dir.join("student.pset")).map_err(|e| StudentError::Checkpoint(e.to_string()))?;
        if set.role() != Role::Student {
            return Err(StudentError::Checkpoint(format!("expected role student, found {}", set.role())));
        }
        Ok(Self { set, cfg: meta.cfg, layout: meta.layout })
    }

    /// Checks that this student fits `env`.
    pub fn check_env(&self, env: &Env) -> Result<(), StudentError> {
        if Layout::of(env) != self.layout {
            return Err(StudentError::Config("student layout does not match environment".into()));
        }
        Ok(())
    }
}

/// Per-agent recurrent hidden vectors; zeros at episode start.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<Vec<f64>>,
}

impl RecurrentState {
    pub fn zeros(n_agents: usize, hidden: usize) -> Self {
        Self { h: vec![vec![0.0; hidden]; n_agents] }
    }

    pub fn for_params(p: &StudentParams) -> Self {
        Self::zeros(p.layout.n_agents(), p.cfg.hidden)
    }

    fn class_tensor(&self, members: &[usize], hidden: usize) -> Result<Tensor, GradError> {
        let data = members.iter().flat_map(|&i| self.h[i].iter().copied()).collect();
        Tensor::matrix(members.len(), hidden, data)
    }
}

/// Tape handles for one decision step of all agents.
pub struct StepVars {
    /// Per class: log-probabilities `[n_c, |A_c|]`.
    pub logp: [Var; 2],
    /// Per class: next hidden `[n_c, H]`.
    pub hidden: [Var; 2],
    /// Per class: attention over senders `[n_c, n]`, absent without communication.
    pub attention: [Option<Var>; 2],
}

/// Per-class observation matrices for one step.
pub fn class_inputs(layout: &Layout, obs: &[Vec<f64>]) -> Result<[Tensor; 2], StudentError> {
    if obs.len() != layout.n_agents() {
        return Err(StudentError::ObservationCount { expected: layout.n_agents(), got: obs.len() });
    }
    let mut out = Vec::with_capacity(2);
    for c in 0..2 {
        let members = layout.members(c);
        let mut data = Vec::with_capacity(members.len() * layout.obs_dims[c]);
        for &i in &members {
            if obs[i].len() != layout.obs_dims[c] {
                return Err(StudentError::Grad(GradError::Shape {
                    node: "observation".into(),
                    detail: format!("agent {i}: width {} vs {}", obs[i].len(), layout.obs_dims[c]),
                }));
            }
            data.extend_from_slice(&obs[i]);
        }
        out.push(Tensor::matrix(members.len(), layout.obs_dims[c], data)?);
    }
    let b = out.pop().expect("two");
    let a = out.pop().expect("two");
    Ok([a, b])
}

/// Builds one step of the student on a tape from per-class inputs and hidden states.
pub fn student_step<'p>(
    t: &mut Tape<'p>,
    s: Scope,
    p: &StudentParams,
    x: [Var; 2],
    h: [Var; 2],
) -> Result<StepVars, GradError> {
    let layout = &p.layout;
    let mut hid = Vec::with_capacity(2);
    for c in 0..2 {
        let l1 = t.affine(t.param(s, &format!("enc{c}.l1.w"))?, x[c], Some(t.param(s, &format!("enc{c}.l1.b"))?))?;
        let e = t.tanh(l1)?;
        let l2 = t.affine(t.param(s, &format!("enc{c}.l2.w"))?, e, Some(t.param(s, &format!("enc{c}.l2.b"))?))?;
        let e = t.tanh(l2)?;
        hid.push(t.gru(s, &format!("gru{c}"), e, h[c])?);
    }
    let hid = [hid[0], hid[1]];
    let (msgs, attention) = communicate(t, s, p, hid)?;
    let mut logp = Vec::with_capacity(2);
    for c in 0..2 {
        let a = t.affine(t.param(s, &format!("dec{c}.h.w"))?, hid[c], Some(t.param(s, &format!("dec{c}.h.b"))?))?;
        let pre = match msgs[c] {
            Some(m) => {
                let b = t.affine(t.param(s, &format!("dec{c}.m"))?, m, None)?;
                t.add(a, b)?
            }
            None => a,
        };
        let z = t.tanh(pre)?;
        let logits = t.affine(t.param(s, &format!("dec{c}.pi.w"))?, z, Some(t.param(s, &format!("dec{c}.pi.b"))?))?;
        logp.push(t.log_softmax(logits)?);
    }
    debug_assert_eq!(layout.n_agents(), t.value(logp[0]).rows() + t.value(logp[1]).rows());
    Ok(StepVars { logp: [logp[0], logp[1]], hidden: hid, attention })
}

type Messages = ([Option<Var>; 2], [Option<Var>; 2]);

fn communicate<'p>(t: &mut Tape<'p>, s: Scope, p: &StudentParams, hid: [Var; 2]) -> Result<Messages, GradError> {
    let layout = &p.layout;
    let name = |kind: &str, src: Option<usize>, dst: usize| match (p.cfg.comm, src) {
        (CommMode::Homogeneous, _) => format!("att.{kind}"),
        (_, Some(src)) => format!("att.{kind}{src}{dst}"),
        (_, None) => format!("att.{kind}{dst}"),
    };
    if p.cfg.comm == CommMode::None {
        return Ok(([None, None], [None, None]));
    }
    let order = layout.sender_order();
    let n = order.len();
    let scale = 1.0 / (p.cfg.message as f64).sqrt();
    let mut msgs = [None, None];
    let mut attn = [None, None];
    for d in 0..2 {
        let q = t.affine(t.param(s, &name("q", None, d))?, hid[d], None)?;
        let mut ks = Vec::with_capacity(2);
        let mut vs = Vec::with_capacity(2);
        for src in 0..2 {
            ks.push(t.affine(t.param(s, &name("k", Some(src), d))?, hid[src], None)?);
            vs.push(t.affine(t.param(s, &name("v", Some(src), d))?, hid[src], None)?);
        }
        let k = t.concat_rows(&ks)?;
        let v = t.concat_rows(&vs)?;
        // scores[r, j] = q_r · k_j
        let scores = t.affine(k, q, None)?;
        let scores = t.scale(scores, scale)?;
        let receivers = layout.members(d);
        let mut mask = vec![0.0; receivers.len() * n];
        for (r, &i) in receivers.iter().enumerate() {
            let j = order.iter().position(|&o| o == i).expect("receiver is a sender");
            mask[r * n + j] = -1e30;
        }
        let mask = t.constant(Tensor::matrix(receivers.len(), n, mask)?);
        let masked = t.add(scores, mask)?;
        let w = t.softmax(masked)?;
        let vt = t.transpose(v)?;
        msgs[d] = Some(t.affine(vt, w, None)?);
        attn[d] = Some(w);
    }
    Ok((msgs, attn))
}

fn hidden_vars<'p>(t: &mut Tape<'p>, p: &StudentParams, h: &RecurrentState) -> Result<[Var; 2], StudentError> {
    if h.h.len() != p.layout.n_agents() || h.h.iter().any(|v| v.len() != p.cfg.hidden) {
        return Err(StudentError::Hidden(format!(
            "{} agents x {} wide expected",
            p.layout.n_agents(),
            p.cfg.hidden
        )));
    }
    let a = t.constant(h.class_tensor(&p.layout.members(0), p.cfg.hidden)?);
    let b = t.constant(h.class_tensor(&p.layout.members(1), p.cfg.hidden)?);
    Ok([a, b])
}

/// Values of one evaluated step, scattered back to agent order.
#[derive(Clone, Debug)]
pub struct StepValues {
    pub logp: Vec<Vec<f64>>,
    pub hidden: RecurrentState,
    pub attention: Vec<Option<Vec<f64>>>,
}

pub fn step_values(t: &Tape<'_>, p: &StudentParams, v: &StepVars) -> Result<StepValues, StudentError> {
    let n = p.layout.n_agents();
    let mut logp = vec![Vec::new(); n];
    let mut hidden = vec![Vec::new(); n];
    let mut attention = vec![None; n];
    for c in 0..2 {
        let lp = t.value(v.logp[c]);
        let hv = t.value(v.hidden[c]);
        if !lp.is_finite() || !hv.is_finite() {
            return Err(StudentError::NonFinite("student step"));
        }
        let (a, hw) = (lp.cols(), hv.cols());
        for (r, i) in p.layout.members(c).into_iter().enumerate() {
            logp[i] = lp.data()[r * a..(r + 1) * a].to_vec();
            hidden[i] = hv.data()[r * hw..(r + 1) * hw].to_vec();
            if let Some(w) = v.attention[c] {
                let w = t.value(w);
                let k = w.cols();
                attention[i] = Some(w.data()[r * k..(r + 1) * k].to_vec());
            }
        }
    }
    Ok(StepValues { logp, hidden: RecurrentState { h: hidden }, attention })
}

/// Evaluates one step without recording gradients.
pub fn student_forward(p: &StudentParams, obs: &[Vec<f64>], hidden: &RecurrentState) -> Result<StepValues, StudentError> {
    let mut t = Tape::new();
    let s = t.bind_frozen(&p.set);
    let x = class_inputs(&p.layout, obs)?;
    let [x0, x1] = x;
    let xv = [t.constant(x0), t.constant(x1)];
    let h = hidden_vars(&mut t, p, hidden)?;
    let v = student_step(&mut t, s, p, xv, h)?;
    step_values(&t, p, &v)
}

fn features(obs: &[AgentObservation]) -> Vec<Vec<f64>> {
    obs.iter().map(|o| o.features.clone()).collect()
}

/// Categorical entropy of a log-probability row.
pub fn entropy_of(logp: &[f64]) -> f64 {
    -logp.iter().map(|l| if l.is_finite() { l.exp() * l } else { 0.0 }).sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct StudentAct {
    pub actions: Vec<Action>,
    /// Per-agent log-probability of the chosen action.
    pub logp: Vec<f64>,
    /// Σ_i log π_{S_i}(a^i | o^i).
    pub joint_logp: f64,
    /// Σ_i H(π_{S_i}(· | o^i)).
    pub entropy: f64,
    pub attention: Vec<Option<Vec<f64>>>,
}

/// Samples a joint action and advances `hidden`.
pub fn student_act(
    p: &StudentParams,
    obs: &[AgentObservation],
    hidden: &mut RecurrentState,
    rng: &mut dyn rand::RngCore,
    greedy: bool,
) -> Result<StudentAct, StudentError> {
    let v = student_forward(p, &features(obs), hidden)?;
    let mut actions = Vec::with_capacity(v.logp.len());
    let mut logp = Vec::with_capacity(v.logp.len());
    for row in &v.logp {
        let probs: Vec<f64> = row.iter().map(|l| l.exp()).collect();
        let a = sample_index(&probs, rng, greedy);
        actions.push(Action::ALL[a]);
        logp.push(row[a]);
    }
    let entropy = v.logp.iter().map(|r| entropy_of(r)).sum();
    *hidden = v.hidden;
    Ok(StudentAct { joint_logp: logp.iter().sum(), actions, logp, entropy, attention: v.attention })
}

/// Joint log-probabilities of an action sequence, threading the hidden state from zeros.
pub fn student_logprob(
    p: &StudentParams,
    obs: &[Vec<Vec<f64>>],
    actions: &[Vec<Action>],
) -> Result<Vec<f64>, StudentError> {
    if obs.len() != actions.len() {
        return Err(StudentError::LengthMismatch { observations: obs.len(), actions: actions.len() });
    }
    let mut h = RecurrentState::for_params(p);
    let mut out = Vec::with_capacity(obs.len());
    for (o, a) in obs.iter().zip(actions) {
        let v = student_forward(p, o, &h)?;
        if a.len() != v.logp.len() {
            return Err(StudentError::ObservationCount { expected: v.logp.len(), got: a.len() });
        }
        out.push(v.logp.iter().zip(a).map(|(row, a)| row[a.code() as usize]).sum());
        h = v.hidden;
    }
    Ok(out)
}

/// Σ_i H(π_{S_i}(· | o^i)) at one step; `hidden` is not advanced.
pub fn student_entropy(p: &StudentParams, obs: &[Vec<f64>], hidden: &RecurrentState) -> Result<f64, StudentError> {
    let v = student_forward(p, obs, hidden)?;
    Ok(v.logp.iter().map(|r| entropy_of(r)).sum())
}

/// The student as an acting policy on local observations.
#[derive(Clone, Debug)]
pub struct Student {
    pub params: StudentParams,
}

impl Policy for Student {
    type Memory = RecurrentState;

    fn init_memory(&self, _env: &Env) -> RecurrentState {
        RecurrentState::for_params(&self.params)
    }

    fn act(
        &self,
        env: &Env,
        state: &WorldState,
        memory: &mut RecurrentState,
        rng: &mut dyn rand::RngCore,
        greedy: bool,
    ) -> Result<ActOutcome, GradError> {
        let obs = env.observe(state);
        match student_act(&self.params, &obs, memory, rng, greedy) {
            Ok(a) => Ok(ActOutcome { actions: a.actions, logp: a.joint_logp }),
            Err(StudentError::Grad(g)) => Err(g),
            Err(e) => Err(GradError::NonFinite { node: e.to_string() }),
        }
    }
}
