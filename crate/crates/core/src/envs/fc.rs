use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rewards, Action, AgentClass, DomainState, Env, Pos, StepInfo, Transition, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FireCell {
    None,
    Burning,
    Extinguished,
}

/// Binary entropy in nats; 0 at p ∈ {0, 1}, ln 2 at p = 0.5.
pub fn binary_entropy(p: f64) -> f64 {
    let h = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    h(p) + h(1.0 - p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcState {
    pub fire: Vec<FireCell>,
    pub discovered: Vec<bool>,
    /// Team belief that each cell is burning.
    pub prob: Vec<f64>,
    /// Unit cardinal vector the wind blows toward.
    pub wind: (i32, i32),
    pub extinguished_total: usize,
}

impl FcState {
    pub fn burning_count(&self) -> usize {
        self.fire.iter().filter(|&&c| c == FireCell::Burning).count()
    }

    pub fn discovered_burning(&self, idx: usize) -> bool {
        self.discovered[idx] && self.fire[idx] == FireCell::Burning
    }

    pub fn entropy(&self, idx: usize) -> f64 {
        binary_entropy(self.prob[idx])
    }
}

const WINDS: [(i32, i32); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

pub(super) fn init(env: &Env, fires: &[Pos], rng: &mut ChaCha8Rng) -> FcState {
    let n = env.n_cells();
    let mut fire = vec![FireCell::None; n];
    for &p in fires {
        fire[env.cell_index(p)] = FireCell::Burning;
    }
    let p0 = fires.len() as f64 / n as f64;
    FcState {
        fire,
        discovered: vec![false; n],
        prob: vec![p0; n],
        wind: WINDS[rng.random_range(0..4)],
        extinguished_total: 0,
    }
}

/// Ignition probability from a burning cell at offset `d` (source → target).
fn spread_prob(env: &Env, wind: (i32, i32), d: (i32, i32)) -> f64 {
    let q = env.config().fire_spread;
    if d == wind {
        q * env.config().downwind_factor
    } else {
        q
    }
}

fn neighbours(env: &Env, p: Pos) -> impl Iterator<Item = ((i32, i32), Pos)> + '_ {
    WINDS.iter().map(move |&d| (d, Pos::new(p.x + d.0, p.y + d.1))).filter(move |(_, q)| env.in_bounds(*q))
}

/// Overwrites the belief with ground truth inside every perception agent's field of view.
pub(super) fn sense(env: &Env, s: &mut WorldState) {
    let r = (env.config().fov / 2) as i32;
    let DomainState::Fc(f) = &mut s.domain else { unreachable!("fc env with marine state") };
    for (i, p) in s.positions.iter().enumerate() {
        if env.class_of(i) != AgentClass::Perception {
            continue;
        }
        for dy in -r..=r {
            for dx in -r..=r {
                let q = Pos::new(p.x + dx, p.y + dy);
                if !env.in_bounds(q) {
                    continue;
                }
                let c = env.cell_index(q);
                let burning = f.fire[c] == FireCell::Burning;
                f.prob[c] = if burning { 1.0 } else { 0.0 };
                f.discovered[c] |= burning;
            }
        }
    }
}

pub(super) fn advance(env: &Env, s: &mut WorldState, actions: &[Action]) -> Transition {
    let mut rewards = vec![0.0; env.n_agents()];
    let mut info = StepInfo::default();
    for (i, &a) in actions.iter().enumerate() {
        s.positions[i] = env.clamp_move(s.positions[i], a);
    }
    {
        let DomainState::Fc(f) = &mut s.domain else { unreachable!("fc env with marine state") };
        for (i, &a) in actions.iter().enumerate() {
            if a != Action::Extinguish {
                continue;
            }
            let c = env.cell_index(s.positions[i]);
            if f.discovered_burning(c) {
                f.fire[c] = FireCell::Extinguished;
                f.prob[c] = 0.0;
                f.extinguished_total += 1;
                info.extinguished += 1;
                rewards[i] += rewards::EXTINGUISH;
            }
        }

        let mut ignite = Vec::new();
        for c in 0..env.n_cells() {
            if f.fire[c] != FireCell::Burning {
                continue;
            }
            for (d, q) in neighbours(env, env.cell_pos(c)) {
                let qi = env.cell_index(q);
                if f.fire[qi] == FireCell::None && s.rng.random_bool(spread_prob(env, f.wind, d)) {
                    ignite.push(qi);
                }
            }
        }
        for c in ignite {
            f.fire[c] = FireCell::Burning;
        }

        let old = f.prob.clone();
        for c in 0..env.n_cells() {
            if f.fire[c] == FireCell::Extinguished {
                f.prob[c] = 0.0;
                continue;
            }
            let p = env.cell_pos(c);
            let mut stay_clear = 1.0 - old[c];
            for (d, q) in neighbours(env, p) {
                // Source q spreads toward c along -d.
                stay_clear *= 1.0 - spread_prob(env, f.wind, (-d.0, -d.1)) * old[env.cell_index(q)];
            }
            f.prob[c] = (1.0 - stay_clear).clamp(0.0, 1.0);
        }
    }
    sense(env, s);
    let burning = s.fc().map(FcState::burning_count).unwrap_or(0) as f64;
    for r in &mut rewards {
        *r += rewards::STEP_PENALTY * burning;
    }
    Transition { rewards, done: false, success: false, failure: false, info }
}
