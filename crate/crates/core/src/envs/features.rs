use serde::{Deserialize, Serialize};

use super::{AgentClass, AgentObservation, Domain, Env, FireCell, Pos, WorldState};
use crate::numgrad::Tensor;

pub const MARINE_ROW_DIM: usize = 18;
pub const FC_ROW_DIM: usize = 16;
/// Width of the low-level executor input.
pub const EXEC_DIM: usize = 10;

const PATCH_CHANNELS: usize = 5;
const MARINE_SCALARS: usize = 6;
const PERCEPTION_SCALARS: usize = 2;
const ACTION_SCALARS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalKind {
    Destination,
    Logistic,
    Routing,
    Entropy,
    Fire,
    Subarea,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalTarget {
    pub pos: Pos,
    pub kind: GoalKind,
    /// Index of the target in the agent's class target list.
    pub target: usize,
}

/// Agent-target feature matrix: one row per (agent, target) pair, agents in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointFeatures {
    pub rows: Tensor,
    /// `(first_row, n_targets)` for each agent.
    pub agent_rows: Vec<(usize, usize)>,
    /// First row belonging to a second-class agent.
    pub class_split: usize,
    pub time_frac: f64,
}

impl JointFeatures {
    pub fn row(&self, agent: usize, target: usize) -> &[f64] {
        let (start, n) = self.agent_rows[agent];
        assert!(target < n);
        let d = self.rows.cols();
        &self.rows.data()[(start + target) * d..(start + target + 1) * d]
    }

    pub fn n_rows(&self) -> usize {
        self.rows.rows()
    }

    /// Rows of one agent class as a flat row-major block.
    pub fn class_rows(&self, class_index: usize) -> &[f64] {
        let d = self.rows.cols();
        let data = self.rows.data();
        if class_index == 0 {
            &data[..self.class_split * d]
        } else {
            &data[self.class_split * d..]
        }
    }

    /// Per-class column means, concatenated; a fixed-width summary of the joint state.
    pub fn pooled(&self) -> Vec<f64> {
        let d = self.rows.cols();
        let mut out = Vec::with_capacity(2 * d);
        for c in 0..2 {
            let block = self.class_rows(c);
            let n = (block.len() / d) as f64;
            let mut m = vec![0.0; d];
            for r in block.chunks(d) {
                m.iter_mut().zip(r).for_each(|(o, v)| *o += v / n);
            }
            out.extend(m);
        }
        out
    }
}

fn norm(v: i32, extent: usize) -> f64 {
    v as f64 / (extent.max(2) - 1) as f64
}

fn span(env: &Env) -> f64 {
    (env.config().width + env.config().height).saturating_sub(2).max(1) as f64
}

pub(super) fn obs_dim(env: &Env, class: AgentClass) -> usize {
    let patch = PATCH_CHANNELS * env.config().fov * env.config().fov;
    match class {
        AgentClass::Routing | AgentClass::Logistic => patch + MARINE_SCALARS,
        AgentClass::Perception => patch + PERCEPTION_SCALARS,
        AgentClass::Action => ACTION_SCALARS,
    }
}

fn nearest_discovered_fire(env: &Env, s: &WorldState, from: Pos, area: Option<&super::Rect>) -> Option<Pos> {
    let f = s.fc()?;
    (0..env.n_cells())
        .filter(|&c| f.discovered_burning(c))
        .map(|c| env.cell_pos(c))
        .filter(|p| area.is_none_or(|a| a.contains(*p)))
        .min_by_key(|p| (p.manhattan(from), p.y, p.x))
}

pub(super) fn observe_agent(env: &Env, s: &WorldState, agent: usize) -> AgentObservation {
    let class = env.class_of(agent);
    let me = s.positions[agent];
    let cfg = env.config();
    let mut out = Vec::with_capacity(obs_dim(env, class));
    if class != AgentClass::Action {
        let r = (cfg.fov / 2) as i32;
        let cells: Vec<Option<Pos>> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| Pos::new(me.x + dx, me.y + dy)))
            .map(|q| env.in_bounds(q).then_some(q))
            .collect();
        let count = |q: Pos, c: AgentClass| {
            s.positions.iter().enumerate().filter(|(j, p)| **p == q && env.class_of(*j) == c).count() as f64
        };
        let (c1, c2) = match cfg.domain {
            Domain::Marine => (AgentClass::Routing, AgentClass::Logistic),
            Domain::Fc => (AgentClass::Perception, AgentClass::Action),
        };
        for ch in 0..PATCH_CHANNELS {
            for q in &cells {
                let v = match q {
                    None => 0.0,
                    Some(q) => match (ch, &s.domain) {
                        (0, super::DomainState::Marine(m)) => m.wave_at(env, *q),
                        (0, super::DomainState::Fc(f)) => {
                            let c = env.cell_index(*q);
                            if f.fire[c] == FireCell::Burning { 1.0 } else { 0.0 }
                        }
                        (1, _) => count(*q, c1),
                        (2, _) => count(*q, c2),
                        (3, super::DomainState::Marine(m)) => {
                            if m.destinations.contains(q) { 1.0 } else { 0.0 }
                        }
                        (3, super::DomainState::Fc(f)) => f.entropy(env.cell_index(*q)) / std::f64::consts::LN_2,
                        _ => 1.0,
                    },
                };
                out.push(v);
            }
        }
    }
    let (px, py) = (norm(me.x, cfg.width), norm(me.y, cfg.height));
    match class {
        AgentClass::Routing => {
            let m = s.marine().expect("marine state");
            let dest = m.destination_of(agent);
            out.extend([
                m.fuel[agent] / m.capacity,
                px,
                py,
                norm(dest.x - me.x, cfg.width),
                norm(dest.y - me.y, cfg.height),
                if m.docked[agent] { 1.0 } else { 0.0 },
            ]);
        }
        AgentClass::Logistic => out.extend([1.0, px, py, 0.0, 0.0, 0.0]),
        AgentClass::Perception => out.extend([px, py]),
        AgentClass::Action => {
            let f = s.fc().expect("fc state");
            let here = f.discovered_burning(env.cell_index(me));
            let known = f.discovered.iter().zip(&f.fire).filter(|(d, c)| **d && **c == FireCell::Burning).count();
            match nearest_discovered_fire(env, s, me, None) {
                Some(t) => out.extend([
                    px,
                    py,
                    1.0,
                    norm(t.x - me.x, cfg.width),
                    norm(t.y - me.y, cfg.height),
                    t.manhattan(me) as f64 / span(env),
                    if here { 1.0 } else { 0.0 },
                    known as f64 / env.n_cells() as f64,
                ]),
                None => out.extend([px, py, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            }
        }
    }
    debug_assert_eq!(out.len(), obs_dim(env, class));
    AgentObservation { class, features: out }
}

/// Positions of the targets an agent of `class` can be assigned, MARINE only.
fn marine_target(env: &Env, s: &WorldState, class: AgentClass, j: usize) -> (Pos, GoalKind) {
    let cfg = env.config();
    let m = s.marine().expect("marine state");
    match class {
        AgentClass::Routing if j < cfg.n_type2 => (s.positions[cfg.n_type1 + j], GoalKind::Logistic),
        AgentClass::Routing => (m.destinations[j - cfg.n_type2], GoalKind::Destination),
        _ => (s.positions[j], GoalKind::Routing),
    }
}

pub(super) fn global_observe(env: &Env, s: &WorldState) -> JointFeatures {
    let cfg = env.config();
    let time_frac = s.step as f64 / cfg.max_steps as f64;
    let mut data = Vec::new();
    let mut agent_rows = Vec::with_capacity(env.n_agents());
    let mut start = 0;
    for i in 0..env.n_agents() {
        let class = env.class_of(i);
        let n_t = env.n_targets_for(class);
        agent_rows.push((start, n_t));
        start += n_t;
        let me = s.positions[i];
        let rank = if class.index() == 0 { i } else { i - cfg.n_type1 };
        let n_class = if class.index() == 0 { cfg.n_type1 } else { cfg.n_type2 };
        for j in 0..n_t {
            let mut row = vec![0.0; env.row_dim()];
            row[class.index()] = 1.0;
            row[2] = rank as f64 / n_class as f64;
            row[3] = j as f64 / n_t as f64;
            match cfg.domain {
                Domain::Marine => marine_row(env, s, i, j, &mut row),
                Domain::Fc => fc_row(env, s, me, j, &mut row),
            }
            if cfg.domain == Domain::Marine {
                row[15] = time_frac;
            } else {
                row[14] = time_frac;
            }
            data.extend(row);
        }
    }
    let class_split = agent_rows[cfg.n_type1].0;
    JointFeatures { rows: Tensor::matrix(start, env.row_dim(), data).expect("row layout"), agent_rows, class_split, time_frac }
}

fn marine_row(env: &Env, s: &WorldState, i: usize, j: usize, row: &mut [f64]) {
    let cfg = env.config();
    let m = s.marine().expect("marine state");
    let class = env.class_of(i);
    let me = s.positions[i];
    let (t, kind) = marine_target(env, s, class, j);
    let dist = me.manhattan(t);
    let own_fuel = if class == AgentClass::Routing { m.fuel[i] / m.capacity } else { 1.0 };
    let target_fuel = match kind {
        GoalKind::Routing => m.fuel[j] / m.capacity,
        GoalKind::Logistic => 1.0,
        _ => 0.0,
    };
    row[4] = if kind == GoalKind::Destination { 0.0 } else { 1.0 };
    row[5] = own_fuel;
    row[6] = target_fuel;
    row[7] = dist as f64 / span(env);
    row[8] = norm(t.x - me.x, cfg.width);
    row[9] = norm(t.y - me.y, cfg.height);
    row[10] = m.wave_at(env, me);
    row[11] = m.wave_at(env, t);
    row[12] = match class {
        AgentClass::Routing => ((m.fuel[i] - dist as f64) / m.capacity).clamp(-1.0, 1.0),
        _ => ((m.fuel[j] - m.destination_of(j).manhattan(t) as f64) / m.capacity).clamp(-1.0, 1.0),
    };
    row[13] = if class == AgentClass::Routing && m.docked[i] { 1.0 } else { 0.0 };
    row[14] = if kind == GoalKind::Routing && m.docked[j] { 1.0 } else { 0.0 };
    row[16] = if class == AgentClass::Routing && kind == GoalKind::Destination && t == m.destination_of(i) {
        1.0
    } else {
        0.0
    };
    row[17] = super::refuel_fraction(m.wave_at(env, t));
}

fn fc_row(env: &Env, s: &WorldState, me: Pos, j: usize, row: &mut [f64]) {
    let cfg = env.config();
    let f = s.fc().expect("fc state");
    let area = env.subareas()[j];
    row[4] = area.distance(me) as f64 / span(env);
    row[5] = if area.contains(me) { 1.0 } else { 0.0 };
    let best = max_entropy_cell(env, s, me, std::slice::from_ref(&area));
    let h = f.entropy(env.cell_index(best));
    row[6] = h / std::f64::consts::LN_2;
    row[7] = norm(best.x - me.x, cfg.width);
    row[8] = norm(best.y - me.y, cfg.height);
    if let Some(t) = nearest_discovered_fire(env, s, me, Some(&area)) {
        row[9] = 1.0;
        row[10] = norm(t.x - me.x, cfg.width);
        row[11] = norm(t.y - me.y, cfg.height);
        row[12] = t.manhattan(me) as f64 / span(env);
    }
    let known = area.cells().filter(|p| f.discovered_burning(env.cell_index(*p))).count();
    row[13] = known as f64 / area.area() as f64;
    let mean_h: f64 = area.cells().map(|p| f.entropy(env.cell_index(p))).sum::<f64>() / area.area() as f64;
    row[15] = mean_h / std::f64::consts::LN_2;
}

/// Highest-entropy cell over `areas`; ties go to the cell nearest `from`, then row-major order.
fn max_entropy_cell(env: &Env, s: &WorldState, from: Pos, areas: &[super::Rect]) -> Pos {
    let f = s.fc().expect("fc state");
    let mut best: Option<(f64, i32, usize)> = None;
    for a in areas {
        for p in a.cells() {
            let c = env.cell_index(p);
            let key = (f.entropy(c), -p.manhattan(from), c);
            let better = match best {
                None => true,
                Some((h, d, bc)) => key.0 > h || (key.0 == h && (key.1 > d || (key.1 == d && c < bc))),
            };
            if better {
                best = Some(key);
            }
        }
    }
    env.cell_pos(best.expect("non-empty subareas").2)
}

pub(super) fn goal_target(env: &Env, s: &WorldState, agent: usize, bits: &[bool]) -> Option<GoalTarget> {
    let class = env.class_of(agent);
    let me = s.positions[agent];
    assert_eq!(bits.len(), env.n_targets_for(class), "subgoal width for {class:?}");
    let chosen: Vec<usize> = (0..bits.len()).filter(|&j| bits[j]).collect();
    if chosen.is_empty() {
        return None;
    }
    match env.domain() {
        Domain::Marine => {
            let m = s.marine().expect("marine state");
            chosen
                .iter()
                .filter(|&&j| class == AgentClass::Routing || !m.docked[j])
                .map(|&j| {
                    let (pos, kind) = marine_target(env, s, class, j);
                    GoalTarget { pos, kind, target: j }
                })
                .min_by_key(|g| (g.pos.manhattan(me), g.target))
        }
        Domain::Fc => {
            let areas: Vec<super::Rect> = chosen.iter().map(|&j| env.subareas()[j]).collect();
            let area_of = |p: Pos| chosen[areas.iter().position(|a| a.contains(p)).expect("cell in an area")];
            match class {
                AgentClass::Perception => {
                    let pos = max_entropy_cell(env, s, me, &areas);
                    Some(GoalTarget { pos, kind: GoalKind::Entropy, target: area_of(pos) })
                }
                _ => {
                    let fire = areas
                        .iter()
                        .filter_map(|a| nearest_discovered_fire(env, s, me, Some(a)))
                        .min_by_key(|p| (p.manhattan(me), p.y, p.x));
                    match fire {
                        Some(pos) => Some(GoalTarget { pos, kind: GoalKind::Fire, target: area_of(pos) }),
                        None => {
                            let (k, a) = areas
                                .iter()
                                .enumerate()
                                .min_by_key(|(k, a)| (a.distance(me), *k))
                                .expect("non-empty");
                            Some(GoalTarget { pos: a.center(), kind: GoalKind::Subarea, target: chosen[k] })
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn nearest_target(env: &Env, s: &WorldState, agent: usize) -> usize {
    let class = env.class_of(agent);
    let me = s.positions[agent];
    let n = env.n_targets_for(class);
    match env.domain() {
        Domain::Marine => (0..n)
            .min_by_key(|&j| (marine_target(env, s, class, j).0.manhattan(me), j))
            .expect("at least one target"),
        Domain::Fc => {
            (0..n).min_by_key(|&j| (env.subareas()[j].distance(me), j)).expect("at least one target")
        }
    }
}

pub(super) fn executor_features_at(env: &Env, s: &WorldState, agent: usize, goal: Option<GoalTarget>) -> Vec<f64> {
    let me = s.positions[agent];
    let class = env.class_of(agent);
    let mut status = ExecStatus::default();
    match &s.domain {
        super::DomainState::Fc(f) => {
            status.on_fire = class == AgentClass::Action && f.discovered_burning(env.cell_index(me));
        }
        super::DomainState::Marine(m) => {
            if class == AgentClass::Routing {
                status.fuel_frac = m.fuel[agent] / m.capacity;
                status.can_move = !(m.docked[agent] || m.fuel[agent] <= 0.0);
            }
        }
    }
    executor_input(me, goal, env.config().width, env.config().height, status)
}

/// Agent status bits that enter the executor input besides the goal geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExecStatus {
    pub on_fire: bool,
    pub fuel_frac: f64,
    pub can_move: bool,
}

impl Default for ExecStatus {
    fn default() -> Self {
        Self { on_fire: false, fuel_frac: 1.0, can_move: true }
    }
}

/// Executor input: goal presence, direction signs, normalized offsets, at-goal,
/// fire-goal flag, on-fire flag, fuel fraction and mobility.
pub fn executor_input(me: Pos, goal: Option<GoalTarget>, width: usize, height: usize, st: ExecStatus) -> Vec<f64> {
    let mut x = vec![0.0; EXEC_DIM];
    if let Some(g) = goal {
        let (dx, dy) = (g.pos.x - me.x, g.pos.y - me.y);
        x[0] = 1.0;
        x[1] = dx.signum() as f64;
        x[2] = dy.signum() as f64;
        x[3] = norm(dx.abs(), width);
        x[4] = norm(dy.abs(), height);
        x[5] = if dx == 0 && dy == 0 { 1.0 } else { 0.0 };
        x[6] = if g.kind == GoalKind::Fire { 1.0 } else { 0.0 };
    }
    x[7] = if st.on_fire { 1.0 } else { 0.0 };
    x[8] = st.fuel_frac;
    x[9] = if st.can_move { 1.0 } else { 0.0 };
    x
}
