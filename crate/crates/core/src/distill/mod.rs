//! Knowledge distillation of teacher demonstrations into the student.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numgrad::{adam_step, GradError, OptState, Scope, Tape, Tensor, Var};
use crate::student::{class_inputs, student_step, RecurrentState, StudentError, StudentParams};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error("empty batch or dataset")]
    Empty,
    #[error("invalid distill config: {0}")]
    Config(String),
    #[error("non-finite log-probability in batch")]
    NonFinite,
    #[error("dataset record: {0}")]
    Record(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a trajectory came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Pretrained-teacher demonstration.
    Teacher,
    /// Student-visited states labelled by teacher queries.
    Query,
}

/// One time step: every agent's local observation plus the teacher's label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub obs: Vec<Vec<f32>>,
    /// Teacher action code per agent.
    pub action: Vec<u8>,
    /// log π_T(ā | ō) at labelling time.
    pub teacher_logp: f64,
    /// Whether the pair is a training pair (passed the filter).
    pub accepted: bool,
}

impl StepRecord {
    pub fn obs_f64(&self) -> Vec<Vec<f64>> {
        self.obs.iter().map(|o| o.iter().map(|&x| x as f64).collect()).collect()
    }
}

/// An episode's observation history; accepted steps carry the supervision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub source: Source,
    pub steps: Vec<StepRecord>,
    /// Whether the visible episode ended in success.
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of accepted (training) pairs.
    pub fn n_pairs(&self) -> usize {
        self.steps.iter().filter(|s| s.accepted).count()
    }
}

pub fn write_trajectories<W: Write>(mut w: W, trajs: &[Trajectory]) -> Result<(), DistillError> {
    for t in trajs {
        serde_json::to_writer(&mut w, t).map_err(|e| DistillError::Record(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trajectories<R: BufRead>(r: R) -> Result<Vec<Trajectory>, DistillError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DistillError::Record(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn save_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<(), DistillError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_trajectories(&mut w, trajs)?;
    w.flush()?;
    Ok(())
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>, DistillError> {
    read_trajectories(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Sign of the entropy term in the distillation loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropySign {
    /// Subtract α·H: entropy is rewarded.
    #[default]
    Bonus,
    /// Add α·H: entropy is penalized.
    Penalty,
}

impl EntropySign {
    fn factor(self) -> f64 {
        match self {
            EntropySign::Bonus => -1.0,
            EntropySign::Penalty => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub lr: f64,
    /// Training pairs per update.
    pub capacity: usize,
    pub entropy_sign: EntropySign,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { alpha: 0.01, lr: 1e-4, capacity: 200, entropy_sign: EntropySign::Bonus }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(DistillError::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DistillError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.capacity == 0 {
            return Err(DistillError::Config("capacity must be >= 1".into()));
        }
        Ok(())
    }
}

/// The per-step quantities entering the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdTerm {
    pub teacher_logp: f64,
    pub student_logp: f64,
    pub entropy: f64,
}

/// Mean of `(log π_T − log π_S) ∓ α·H` over the batch.
pub fn kd_loss(batch: &[KdTerm], alpha: f64, sign: EntropySign) -> Result<f64, DistillError> {
    if batch.is_empty() {
        return Err(DistillError::Empty);
    }
    if batch.iter().any(|b| !b.teacher_logp.is_finite() || !b.student_logp.is_finite()) {
        return Err(DistillError::NonFinite);
    }
    let s: f64 = batch.iter().map(|b| b.teacher_logp - b.student_logp + sign.factor() * alpha * b.entropy).sum();
    Ok(s / batch.len() as f64)
}

/// A contiguous run of one trajectory's steps with the hidden state entering it.
#[derive(Clone, Debug)]
pub struct Segment {
    pub traj: usize,
    pub start: usize,
    pub end: usize,
    pub h0: RecurrentState,
}

/// Buffer of training pairs flushed exactly when `capacity` pairs are held.
#[derive(Clone, Debug)]
pub struct DistillBuffer {
    pub capacity: usize,
    pub segments: Vec<Segment>,
    pub pairs: usize,
    /// Per-pair terms from the last flush.
    pub last_terms: Vec<KdTerm>,
}

impl DistillBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, segments: Vec::new(), pairs: 0, last_terms: Vec::new() }
    }

    pub fn is_full(&self) -> bool {
        self.pairs >= self.capacity
    }

    pub fn clear(&mut self) {
        self.segments.clear();
        self.pairs = 0;
    }
}

/// Loss graph over buffered segments.
pub struct LossGraph {
    pub loss: Var,
    /// Per accepted step: (teacher logp, student joint logp var, entropy var).
    pub terms: Vec<(f64, Var, Var)>,
    /// Hidden state after the last step of each segment.
    pub final_hidden: Vec<[Var; 2]>,
}

/// Builds the distillation loss on a tape; teacher terms enter as constants.
pub fn kd_loss_graph<'p>(
    t: &mut Tape<'p>,
    s: Scope,
    p: &StudentParams,
    data: &[&Trajectory],
    segments: &[Segment],
    cfg: &DistillConfig,
) -> Result<LossGraph, DistillError> {
    let mut terms = Vec::new();
    let mut final_hidden = Vec::with_capacity(segments.len());
    let members = [p.layout.members(0), p.layout.members(1)];
    for seg in segments {
        let traj = data[seg.traj];
        let h0 = &seg.h0;
        let mut h = [0, 1].map(|c| {
            let d: Vec<f64> = members[c].iter().flat_map(|&i| h0.h[i].iter().copied()).collect();
            t.constant(Tensor::matrix(members[c].len(), p.cfg.hidden, d).expect("hidden layout"))
        });
        for step in &traj.steps[seg.start..seg.end] {
            let [x0, x1] = class_inputs(&p.layout, &step.obs_f64())?;
            let x = [t.constant(x0), t.constant(x1)];
            let v = student_step(t, s, p, x, h)?;
            h = v.hidden;
            if !step.accepted {
                continue;
            }
            let mut lps = Vec::with_capacity(2);
            let mut ents = Vec::with_capacity(2);
            for c in 0..2 {
                let acts: Vec<usize> = members[c].iter().map(|&i| step.action[i] as usize).collect();
                let g = t.gather(v.logp[c], &acts)?;
                lps.push(t.sum(g)?);
                let pr = t.exp(v.logp[c])?;
                let plp = t.mul(pr, v.logp[c])?;
                let negh = t.sum(plp)?;
                ents.push(t.scale(negh, -1.0)?);
            }
            let lp = t.add(lps[0], lps[1])?;
            let ent = t.add(ents[0], ents[1])?;
            terms.push((step.teacher_logp, lp, ent));
        }
        final_hidden.push(h);
    }
    if terms.is_empty() {
        return Err(DistillError::Empty);
    }
    let n = terms.len() as f64;
    let tsum: f64 = terms.iter().map(|x| x.0).sum();
    let lps: Vec<Var> = terms.iter().map(|x| x.1).collect();
    let ents: Vec<Var> = terms.iter().map(|x| x.2).collect();
    let lpv = t.stack(&lps)?;
    let entv = t.stack(&ents)?;
    let lsum = t.sum(lpv)?;
    let esum = t.sum(entv)?;
    let a = t.scale_shift(lsum, -1.0 / n, tsum / n)?;
    let b = t.scale(esum, cfg.entropy_sign.factor() * cfg.alpha / n)?;
    let loss = t.add(a, b)?;
    Ok(LossGraph { loss, terms, final_hidden })
}

/// Outcome of one distillation flush.
pub struct FlushOutcome {
    pub loss: f64,
    pub applied: bool,
    pub terms: Vec<KdTerm>,
    /// Hidden state after each segment (agent order).
    pub final_hidden: Vec<RecurrentState>,
}

fn flush(
    p: &mut StudentParams,
    opt: &mut OptState,
    data: &[&Trajectory],
    segments: &[Segment],
    cfg: &DistillConfig,
) -> Result<FlushOutcome, DistillError> {
    let (loss, grads, terms, final_hidden) = {
        let mut t = Tape::new();
        let s = t.bind(&p.set);
        let g = kd_loss_graph(&mut t, s, p, data, segments, cfg)?;
        let loss = t.scalar(g.loss);
        let terms: Vec<KdTerm> = g
            .terms
            .iter()
            .map(|&(tl, lp, e)| KdTerm { teacher_logp: tl, student_logp: t.scalar(lp), entropy: t.scalar(e) })
            .collect();
        let finals = g.final_hidden.iter().map(|h| scatter_hidden(&t, p, h)).collect();
        let grads: Option<BTreeMap<String, Tensor>> = if loss.is_finite() {
            let gr = t.backward(g.loss)?;
            Some(t.grads_for(s, &gr))
        } else {
            None
        };
        (loss, grads, terms, finals)
    };
    let applied = match grads {
        Some(g) if g.values().all(|x| x.is_finite()) => {
            adam_step(&mut p.set, &g, opt, cfg.lr);
            true
        }
        _ => {
            log::warn!("distillation step skipped: non-finite loss or gradient ({loss})");
            false
        }
    };
    Ok(FlushOutcome { loss, applied, terms, final_hidden })
}

fn scatter_hidden(t: &Tape<'_>, p: &StudentParams, h: &[Var; 2]) -> RecurrentState {
    let mut out = RecurrentState::for_params(p);
    let w = p.cfg.hidden;
    for (c, &hv) in h.iter().enumerate() {
        let d = t.value(hv).data();
        for (r, i) in p.layout.members(c).into_iter().enumerate() {
            out.h[i] = d[r * w..(r + 1) * w].to_vec();
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KdReport {
    pub updates: usize,
    pub skipped: usize,
    pub pairs: usize,
    pub mean_loss: f64,
    pub mean_entropy: f64,
}

/// One pass over `data` in the given order: fill the buffer and step on every full flush.
pub fn kd_pass(
    p: &mut StudentParams,
    opt: &mut OptState,
    data: &[&Trajectory],
    cfg: &DistillConfig,
) -> Result<KdReport, DistillError> {
    cfg.validate()?;
    if data.iter().all(|t| t.n_pairs() == 0) {
        return Err(DistillError::Empty);
    }
    let mut buf = DistillBuffer::new(cfg.capacity);
    let mut rep = KdReport::default();
    let (mut loss_sum, mut ent_sum, mut ent_n) = (0.0, 0.0, 0usize);
    for (ti, traj) in data.iter().enumerate() {
        let mut h = RecurrentState::for_params(p);
        let mut start = 0;
        let mut last_accepted = None;
        for (k, step) in traj.steps.iter().enumerate() {
            if !step.accepted {
                continue;
            }
            buf.pairs += 1;
            last_accepted = Some(k);
            if buf.is_full() {
                buf.segments.push(Segment { traj: ti, start, end: k + 1, h0: h.clone() });
                let out = match flush(p, opt, data, &buf.segments, cfg) {
                    Err(DistillError::Grad(GradError::NonFinite { node })) => {
                        log::warn!("distillation step skipped: non-finite value at {node}");
                        rep.skipped += 1;
                        buf.clear();
                        start = k + 1;
                        last_accepted = None;
                        continue;
                    }
                    r => r?,
                };
                rep.updates += out.applied as usize;
                rep.skipped += (!out.applied) as usize;
                rep.pairs += out.terms.len();
                loss_sum += out.loss;
                ent_sum += out.terms.iter().map(|t| t.entropy).sum::<f64>();
                ent_n += out.terms.len();
                h = out.final_hidden.last().expect("one segment").clone();
                buf.last_terms = out.terms;
                buf.clear();
                start = k + 1;
                last_accepted = None;
            }
        }
        if let Some(k) = last_accepted {
            buf.segments.push(Segment { traj: ti, start, end: k + 1, h0: h });
        }
    }
    if rep.updates + rep.skipped > 0 {
        rep.mean_loss = loss_sum / (rep.updates + rep.skipped) as f64;
        rep.mean_entropy = ent_sum / ent_n.max(1) as f64;
    }
    Ok(rep)
}

/// Shuffles trajectory order with `rng`, then runs one [`kd_pass`].
pub fn kd_update(
    p: &mut StudentParams,
    opt: &mut OptState,
    data: &[&Trajectory],
    cfg: &DistillConfig,
    rng: &mut ChaCha8Rng,
) -> Result<KdReport, DistillError> {
    if data.is_empty() {
        return Err(DistillError::Empty);
    }
    let mut order: Vec<&Trajectory> = data.to_vec();
    order.shuffle(rng);
    kd_pass(p, opt, &order, cfg)
}

/// Distillation on a fixed dataset for `iterations` passes.
pub fn behavior_clone(
    p: &mut StudentParams,
    opt: &mut OptState,
    data: &[&Trajectory],
    iterations: usize,
    cfg: &DistillConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<KdReport>, DistillError> {
    (0..iterations).map(|_| kd_update(p, opt, data, cfg, rng)).collect()
}

/// Evaluates the loss of `segments` without updating; returns the loss and per-pair terms.
pub fn evaluate_loss(
    p: &StudentParams,
    data: &[&Trajectory],
    cfg: &DistillConfig,
) -> Result<(f64, Vec<KdTerm>), DistillError> {
    let segments: Vec<Segment> = (0..data.len())
        .filter(|&i| data[i].n_pairs() > 0)
        .map(|i| Segment { traj: i, start: 0, end: data[i].len(), h0: RecurrentState::for_params(p) })
        .collect();
    let mut t = Tape::new();
    let s = t.bind_frozen(&p.set);
    let g = kd_loss_graph(&mut t, s, p, data, &segments, cfg)?;
    let terms = g
        .terms
        .iter()
        .map(|&(tl, lp, e)| KdTerm { teacher_logp: tl, student_logp: t.scalar(lp), entropy: t.scalar(e) })
        .collect();
    Ok((t.scalar(g.loss), terms))
}

/// Demonstrations labelled by a fixed network: the labeller acts (sampled) and
/// its own log-probabilities serve as the teacher terms.
pub fn synthetic_demos(
    env: &crate::envs::Env,
    labeller: &StudentParams,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, DistillError> {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut s = env.reset_seeded(rng.random());
        let mut h = RecurrentState::for_params(labeller);
        let mut steps = Vec::new();
        while !env.is_done(&s) {
            let obs = env.observe(&s);
            let a = crate::student::student_act(labeller, &obs, &mut h, &mut rng, false)?;
            steps.push(StepRecord {
                obs: obs.iter().map(|o| o.features.iter().map(|&x| x as f32).collect()).collect(),
                action: a.actions.iter().map(|a| a.code()).collect(),
                teacher_logp: a.joint_logp,
                accepted: true,
            });
            env.advance(&mut s, &a.actions).map_err(|e| DistillError::Record(e.to_string()))?;
        }
        out.push(Trajectory { id: ep as u64, source: Source::Teacher, steps, success: env.success(&s) });
    }
    Ok(out)
}
