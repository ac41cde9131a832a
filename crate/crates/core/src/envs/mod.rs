//! Cooperative gridworld simulators: MARINE-lite (routing and logistic vessels on
//! a synthetic wave field) and FireCommander-lite (perception and action agents
//! against a wind-biased stochastic fire).
//!
//! All randomness lives in the [`WorldState`]'s own RNG, so a state plus a joint
//! action fully determines the next state. Snapshots capture the RNG as well.

mod config;
mod fc;
mod features;
mod marine;
mod policy;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{Domain, EnvConfig, Preset, Tier};
pub use fc::{binary_entropy, FcState, FireCell};
pub use features::{
    executor_input, ExecStatus, GoalKind, GoalTarget, JointFeatures, EXEC_DIM, FC_ROW_DIM, MARINE_ROW_DIM,
};
pub use policy::{sample_index, ActOutcome, Policy, RandomPolicy, StayPolicy};
pub use marine::{refuel_fraction, MarineState, WaveField, WAVE_LIMIT};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown preset {0}")]
    UnknownPreset(String),
    #[error("grid of {cells} cells cannot hold {entities} entities")]
    GridTooSmall { cells: usize, entities: usize },
    #[error("agent {agent}: action {action:?} is not valid for {class:?}")]
    InvalidAction { agent: usize, action: Action, class: AgentClass },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("corrupted snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("episode already finished")]
    Finished,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, o: Pos) -> i32 {
        (self.x - o.x).abs() + (self.y - o.y).abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentClass {
    Routing,
    Logistic,
    Perception,
    Action,
}

impl AgentClass {
    /// 0 for the first class of a domain (routing/perception), 1 for the second.
    pub fn index(self) -> usize {
        match self {
            AgentClass::Routing | AgentClass::Perception => 0,
            AgentClass::Logistic | AgentClass::Action => 1,
        }
    }

    pub fn of(domain: Domain, index: usize) -> Self {
        match (domain, index) {
            (Domain::Marine, 0) => AgentClass::Routing,
            (Domain::Marine, _) => AgentClass::Logistic,
            (Domain::Fc, 0) => AgentClass::Perception,
            (Domain::Fc, _) => AgentClass::Action,
        }
    }

    pub fn n_actions(self) -> usize {
        match self {
            AgentClass::Action => 6,
            _ => 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
    Extinguish,
}

impl Action {
    pub const ALL: [Action; 6] =
        [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay, Action::Extinguish];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Action> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay | Action::Extinguish => (0, 0),
        }
    }

    pub fn valid_for(self, class: AgentClass) -> bool {
        (self.code() as usize) < class.n_actions()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DomainState {
    Marine(MarineState),
    Fc(FcState),
}

/// Full simulator state of one environment instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub step: usize,
    pub positions: Vec<Pos>,
    pub domain: DomainState,
    pub rng: ChaCha8Rng,
}

impl WorldState {
    pub fn marine(&self) -> Option<&MarineState> {
        match &self.domain {
            DomainState::Marine(m) => Some(m),
            DomainState::Fc(_) => None,
        }
    }

    pub fn fc(&self) -> Option<&FcState> {
        match &self.domain {
            DomainState::Fc(f) => Some(f),
            DomainState::Marine(_) => None,
        }
    }

    /// Moves the state's RNG onto an independent stream, e.g. for lookahead
    /// simulations that must not disturb the main episode.
    pub fn fork_rng(&mut self, stream: u64) {
        self.rng.set_stream(stream);
    }
}

/// Local observation of one agent, flattened as `fov×fov` channel patches
/// followed by class-specific scalars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentObservation {
    pub class: AgentClass,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub extinguished: usize,
    pub fuel_transferred: f64,
    pub arrived: usize,
}

/// Outcome of one joint action, without observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub rewards: Vec<f64>,
    pub done: bool,
    pub success: bool,
    pub failure: bool,
    pub info: StepInfo,
}

impl Transition {
    pub fn team_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observations: Vec<AgentObservation>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub success: bool,
    pub info: StepInfo,
}

/// Serialized, checksummed copy of a [`WorldState`] including its RNG.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    bytes: Vec<u8>,
}

impl Snapshot {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

pub fn snapshot(state: &WorldState) -> Snapshot {
    let mut bytes = serde_json::to_vec(state).expect("world state serializes");
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    Snapshot { bytes }
}

pub fn restore(token: &Snapshot) -> Result<WorldState, EnvError> {
    let b = &token.bytes;
    if b.len() < 32 {
        return Err(EnvError::CorruptSnapshot("token too short".into()));
    }
    let (body, digest) = b.split_at(b.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(EnvError::CorruptSnapshot("checksum mismatch".into()));
    }
    serde_json::from_slice(body).map_err(|e| EnvError::CorruptSnapshot(e.to_string()))
}

/// Step-level reward constants.
pub mod rewards {
    pub const STEP_PENALTY: f64 = -0.01;
    pub const ARRIVAL: f64 = 1.0;
    pub const DISTANCE_SHAPING: f64 = -0.001;
    pub const DEPLETION: f64 = -1.0;
    pub const REFUEL_PER_UNIT: f64 = 0.1;
    pub const EXTINGUISH: f64 = 0.5;
}

/// A configured simulator. Stateless; all episode data lives in [`WorldState`].
#[derive(Clone, Debug)]
pub struct Env {
    cfg: EnvConfig,
    classes: Vec<AgentClass>,
    subareas: Vec<Rect>,
}

/// Inclusive-exclusive cell rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Rect {
    pub fn contains(&self, p: Pos) -> bool {
        p.x >= self.x0 && p.x < self.x1 && p.y >= self.y0 && p.y < self.y1
    }

    pub fn center(&self) -> Pos {
        Pos::new((self.x0 + self.x1 - 1) / 2, (self.y0 + self.y1 - 1) / 2)
    }

    pub fn area(&self) -> usize {
        ((self.x1 - self.x0) * (self.y1 - self.y0)) as usize
    }

    /// Manhattan distance from `p` to the nearest cell of the rectangle.
    pub fn distance(&self, p: Pos) -> i32 {
        let dx = (self.x0 - p.x).max(0).max(p.x - (self.x1 - 1));
        let dy = (self.y0 - p.y).max(0).max(p.y - (self.y1 - 1));
        dx + dy
    }

    pub fn cells(&self) -> impl Iterator<Item = Pos> + '_ {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| Pos::new(x, y)))
    }
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let classes = (0..cfg.n_type1)
            .map(|_| AgentClass::of(cfg.domain, 0))
            .chain((0..cfg.n_type2).map(|_| AgentClass::of(cfg.domain, 1)))
            .collect();
        let mut subareas = Vec::new();
        if cfg.domain == Domain::Fc {
            let s = cfg.subarea_side as i32;
            let (w, h) = (cfg.width as i32, cfg.height as i32);
            let mut y = 0;
            while y < h {
                let mut x = 0;
                while x < w {
                    subareas.push(Rect { x0: x, y0: y, x1: (x + s).min(w), y1: (y + s).min(h) });
                    x += s;
                }
                y += s;
            }
        }
        Ok(Self { cfg, classes, subareas })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn domain(&self) -> Domain {
        self.cfg.domain
    }

    pub fn n_agents(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[AgentClass] {
        &self.classes
    }

    pub fn class_of(&self, agent: usize) -> AgentClass {
        self.classes[agent]
    }

    /// Agent index of the `k`-th agent of class index `c`.
    pub fn agent_of_class(&self, c: usize, k: usize) -> usize {
        if c == 0 {
            k
        } else {
            self.cfg.n_type1 + k
        }
    }

    pub fn subareas(&self) -> &[Rect] {
        &self.subareas
    }

    pub fn in_bounds(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as usize) < self.cfg.width && (p.y as usize) < self.cfg.height
    }

    pub fn cell_index(&self, p: Pos) -> usize {
        p.y as usize * self.cfg.width + p.x as usize
    }

    pub fn cell_pos(&self, idx: usize) -> Pos {
        Pos::new((idx % self.cfg.width) as i32, (idx / self.cfg.width) as i32)
    }

    pub fn n_cells(&self) -> usize {
        self.cfg.width * self.cfg.height
    }

    fn clamp_move(&self, p: Pos, a: Action) -> Pos {
        let (dx, dy) = a.delta();
        Pos::new(
            (p.x + dx).clamp(0, self.cfg.width as i32 - 1),
            (p.y + dy).clamp(0, self.cfg.height as i32 - 1),
        )
    }

    /// Resets with the configured seed.
    pub fn reset(&self) -> (WorldState, Vec<AgentObservation>) {
        let s = self.reset_seeded(self.cfg.seed);
        let obs = self.observe(&s);
        (s, obs)
    }

    pub fn reset_seeded(&self, seed: u64) -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entities = self.n_agents() + self.cfg.n_targets;
        let cells = rand::seq::index::sample(&mut rng, self.n_cells(), entities).into_vec();
        let positions: Vec<Pos> = cells[..self.n_agents()].iter().map(|&c| self.cell_pos(c)).collect();
        let targets: Vec<Pos> = cells[self.n_agents()..].iter().map(|&c| self.cell_pos(c)).collect();
        let domain = match self.cfg.domain {
            Domain::Marine => DomainState::Marine(marine::init(self, targets, &mut rng)),
            Domain::Fc => DomainState::Fc(fc::init(self, &targets, &mut rng)),
        };
        let mut s = WorldState { step: 0, positions, domain, rng };
        if let DomainState::Fc(_) = s.domain {
            fc::sense(self, &mut s);
        }
        s
    }

    fn check_actions(&self, s: &WorldState, actions: &[Action]) -> Result<(), EnvError> {
        if actions.len() != self.n_agents() {
            return Err(EnvError::ActionCount { expected: self.n_agents(), got: actions.len() });
        }
        for (i, &a) in actions.iter().enumerate() {
            if !a.valid_for(self.classes[i]) {
                return Err(EnvError::InvalidAction { agent: i, action: a, class: self.classes[i] });
            }
        }
        if self.is_done(s) {
            return Err(EnvError::Finished);
        }
        Ok(())
    }

    /// Applies one joint action in place without building observations.
    pub fn advance(&self, s: &mut WorldState, actions: &[Action]) -> Result<Transition, EnvError> {
        self.check_actions(s, actions)?;
        let mut t = match self.cfg.domain {
            Domain::Marine => marine::advance(self, s, actions),
            Domain::Fc => fc::advance(self, s, actions),
        };
        s.step += 1;
        t.success = self.success(s);
        t.failure = self.failure(s);
        t.done = self.is_done(s);
        Ok(t)
    }

    pub fn step(&self, s: &mut WorldState, actions: &[Action]) -> Result<StepResult, EnvError> {
        let t = self.advance(s, actions)?;
        Ok(StepResult {
            observations: self.observe(s),
            rewards: t.rewards,
            done: t.done,
            success: t.success,
            info: t.info,
        })
    }

    pub fn success(&self, s: &WorldState) -> bool {
        match &s.domain {
            DomainState::Marine(m) => m.docked.iter().all(|&d| d),
            DomainState::Fc(f) => f.burning_count() == 0,
        }
    }

    pub fn failure(&self, s: &WorldState) -> bool {
        match &s.domain {
            DomainState::Marine(m) => !self.success(s) && m.depleted(),
            DomainState::Fc(f) => s.step >= self.cfg.max_steps && f.burning_count() > 0,
        }
    }

    pub fn is_done(&self, s: &WorldState) -> bool {
        s.step >= self.cfg.max_steps || self.success(s) || self.failure(s)
    }

    /// Number of high-level targets an agent of `class` chooses among.
    pub fn n_targets_for(&self, class: AgentClass) -> usize {
        match class {
            AgentClass::Routing => self.cfg.n_type2 + self.cfg.n_targets,
            AgentClass::Logistic => self.cfg.n_type1,
            AgentClass::Perception | AgentClass::Action => self.subareas.len(),
        }
    }

    pub fn row_dim(&self) -> usize {
        match self.cfg.domain {
            Domain::Marine => MARINE_ROW_DIM,
            Domain::Fc => FC_ROW_DIM,
        }
    }

    pub fn obs_dim(&self, class: AgentClass) -> usize {
        features::obs_dim(self, class)
    }

    pub fn observe(&self, s: &WorldState) -> Vec<AgentObservation> {
        (0..self.n_agents()).map(|i| self.observe_agent(s, i)).collect()
    }

    pub fn observe_agent(&self, s: &WorldState, agent: usize) -> AgentObservation {
        features::observe_agent(self, s, agent)
    }

    /// Centralized agent-target feature matrix.
    pub fn global_observe(&self, s: &WorldState) -> JointFeatures {
        features::global_observe(self, s)
    }

    /// The concrete target an agent pursues under subgoal bits `bits`.
    pub fn goal_target(&self, s: &WorldState, agent: usize, bits: &[bool]) -> Option<GoalTarget> {
        features::goal_target(self, s, agent, bits)
    }

    /// Executor input for one agent under a subgoal.
    pub fn executor_features(&self, s: &WorldState, agent: usize, bits: &[bool]) -> Vec<f64> {
        let goal = self.goal_target(s, agent, bits);
        features::executor_features_at(self, s, agent, goal)
    }

    /// Index of the target nearest to `agent` (used to repair empty assignments).
    pub fn nearest_target(&self, s: &WorldState, agent: usize) -> usize {
        features::nearest_target(self, s, agent)
    }

    /// Text dump of the grid for debugging.
    pub fn render(&self, s: &WorldState) -> String {
        let mut rows = vec![vec!['.'; self.cfg.width]; self.cfg.height];
        match &s.domain {
            DomainState::Marine(m) => {
                for d in &m.destinations {
                    rows[d.y as usize][d.x as usize] = 'D';
                }
            }
            DomainState::Fc(f) => {
                for (i, c) in f.fire.iter().enumerate() {
                    let p = self.cell_pos(i);
                    let ch = match (c, f.discovered[i]) {
                        (FireCell::Burning, true) => '#',
                        (FireCell::Burning, false) => '*',
                        (FireCell::Extinguished, _) => 'x',
                        (FireCell::None, _) => '.',
                    };
                    rows[p.y as usize][p.x as usize] = ch;
                }
            }
        }
        for (i, p) in s.positions.iter().enumerate() {
            let ch = match self.classes[i] {
                AgentClass::Routing => 'R',
                AgentClass::Logistic => 'L',
                AgentClass::Perception => 'P',
                AgentClass::Action => 'A',
            };
            rows[p.y as usize][p.x as usize] = ch;
        }
        let mut out = format!("t={}\n", s.step);
        for r in rows {
            out.extend(r);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests;
