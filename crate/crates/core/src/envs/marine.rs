use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rewards, Action, AgentClass, Env, Pos, StepInfo, Transition, WorldState};

/// Wave heights are clamped to `[-WAVE_LIMIT, WAVE_LIMIT]`; refuel bins split this range.
pub const WAVE_LIMIT: f64 = 1.0;
const NOISE_DECAY: f64 = 0.9;
const SWELL_AMPLITUDE: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveComponent {
    pub kx: f64,
    pub ky: f64,
    pub omega: f64,
    pub phase: f64,
    pub amp: f64,
}

/// Synthetic sea state: travelling sinusoids plus per-cell AR(1) noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveField {
    pub components: Vec<WaveComponent>,
    pub noise: Vec<f64>,
    pub sigma: f64,
    pub heights: Vec<f64>,
    pub t: u64,
}

impl WaveField {
    pub fn random(width: usize, height: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        let components = (0..3)
            .map(|_| {
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                let wavelength = rng.random_range(3.0..12.0);
                let k = std::f64::consts::TAU / wavelength;
                WaveComponent {
                    kx: k * dir.cos(),
                    ky: k * dir.sin(),
                    omega: rng.random_range(0.05..0.3),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amp: rng.random_range(0.5..1.0),
                }
            })
            .collect();
        let mut w = WaveField {
            components,
            noise: vec![0.0; width * height],
            sigma,
            heights: vec![0.0; width * height],
            t: 0,
        };
        w.recompute(width);
        w
    }

    /// A time-invariant field with the given heights.
    pub fn constant(heights: Vec<f64>) -> Self {
        let n = heights.len();
        WaveField { components: Vec::new(), noise: vec![0.0; n], sigma: 0.0, heights, t: 0 }
    }

    fn recompute(&mut self, width: usize) {
        if self.components.is_empty() {
            if self.sigma > 0.0 {
                for (h, n) in self.heights.iter_mut().zip(&self.noise) {
                    *h = n.clamp(-WAVE_LIMIT, WAVE_LIMIT);
                }
            }
            return;
        }
        let total: f64 = self.components.iter().map(|c| c.amp).sum();
        let t = self.t as f64;
        for (i, h) in self.heights.iter_mut().enumerate() {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            let swell: f64 = self
                .components
                .iter()
                .map(|c| c.amp * (c.kx * x + c.ky * y - c.omega * t + c.phase).sin())
                .sum();
            *h = (SWELL_AMPLITUDE * swell / total + self.noise[i]).clamp(-WAVE_LIMIT, WAVE_LIMIT);
        }
    }

    pub fn advance(&mut self, width: usize, rng: &mut ChaCha8Rng) {
        self.t += 1;
        if self.sigma > 0.0 {
            // Uniform on [-sqrt3, sqrt3] has unit variance.
            let half = 3f64.sqrt();
            for n in &mut self.noise {
                *n = NOISE_DECAY * *n + self.sigma * rng.random_range(-half..half);
            }
        }
        self.recompute(width);
    }
}

/// Fraction of capacity refuelled at a given wave height.
///
/// The range `[-WAVE_LIMIT, WAVE_LIMIT]` is cut into four equal bins mapping to
/// 0.0, 0.15, 0.30 and 0.50 from the lowest level to the highest.
pub fn refuel_fraction(wave_height: f64) -> f64 {
    const LEVELS: [f64; 4] = [0.0, 0.15, 0.30, 0.50];
    let h = wave_height.clamp(-WAVE_LIMIT, WAVE_LIMIT);
    let level = (h + WAVE_LIMIT) / (2.0 * WAVE_LIMIT);
    LEVELS[((level * 4.0).floor() as usize).min(3)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarineState {
    /// Fuel per routing agent, indexed by routing rank.
    pub fuel: Vec<f64>,
    pub capacity: f64,
    pub destinations: Vec<Pos>,
    pub docked: Vec<bool>,
    pub waves: WaveField,
}

impl MarineState {
    pub fn destination_of(&self, routing_rank: usize) -> Pos {
        self.destinations[routing_rank % self.destinations.len()]
    }

    /// Some routing agent is out of fuel away from its destination.
    pub fn depleted(&self) -> bool {
        self.fuel.iter().zip(&self.docked).any(|(&f, &d)| !d && f <= 0.0)
    }

    pub fn total_fuel(&self) -> f64 {
        self.fuel.iter().sum()
    }

    pub fn wave_at(&self, env: &Env, p: Pos) -> f64 {
        self.waves.heights[env.cell_index(p)]
    }
}

pub(super) fn init(env: &Env, destinations: Vec<Pos>, rng: &mut ChaCha8Rng) -> MarineState {
    let cfg = env.config();
    MarineState {
        fuel: vec![cfg.initial_fuel; cfg.n_type1],
        capacity: cfg.initial_fuel,
        destinations,
        docked: vec![false; cfg.n_type1],
        waves: WaveField::random(cfg.width, cfg.height, cfg.wave_noise, rng),
    }
}

pub(super) fn advance(env: &Env, s: &mut WorldState, actions: &[Action]) -> Transition {
    let n1 = env.config().n_type1;
    let width = env.config().width;
    let super::DomainState::Marine(m) = &mut s.domain else { unreachable!("marine env with fc state") };
    let mut rewards = vec![rewards::STEP_PENALTY; env.n_agents()];
    let mut info = StepInfo::default();

    for (i, &a) in actions.iter().enumerate() {
        let from = s.positions[i];
        let to = env.clamp_move(from, a);
        if env.class_of(i) == AgentClass::Routing {
            if m.docked[i] || m.fuel[i] <= 0.0 || to == from {
                continue;
            }
            m.fuel[i] = (m.fuel[i] - 1.0).max(0.0);
        }
        s.positions[i] = to;
    }

    for r in 0..n1 {
        if !m.docked[r] && s.positions[r] == m.destination_of(r) {
            m.docked[r] = true;
            rewards[r] += rewards::ARRIVAL;
            info.arrived += 1;
        }
    }

    for r in 0..n1 {
        if m.docked[r] {
            continue;
        }
        let here = s.positions[r];
        let helpers: Vec<usize> = (n1..env.n_agents()).filter(|&l| s.positions[l] == here).collect();
        if helpers.is_empty() {
            continue;
        }
        let frac = refuel_fraction(m.waves.heights[env.cell_index(here)]);
        let amount = (frac * m.capacity).min(m.capacity - m.fuel[r]).max(0.0);
        if amount > 0.0 {
            m.fuel[r] += amount;
            info.fuel_transferred += amount;
            let share = rewards::REFUEL_PER_UNIT * amount / helpers.len() as f64;
            for l in helpers {
                rewards[l] += share;
            }
        }
    }

    for r in 0..n1 {
        if m.docked[r] {
            continue;
        }
        rewards[r] += rewards::DISTANCE_SHAPING * s.positions[r].manhattan(m.destination_of(r)) as f64;
        if m.fuel[r] <= 0.0 {
            rewards[r] += rewards::DEPLETION;
        }
    }

    m.waves.advance(width, &mut s.rng);
    Transition { rewards, done: false, success: false, failure: false, info }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuel_bins_are_monotone_in_height() {
        assert_eq!(refuel_fraction(-1.0), 0.0);
        assert_eq!(refuel_fraction(-0.9), 0.0);
        assert_eq!(refuel_fraction(-0.25), 0.15);
        assert_eq!(refuel_fraction(0.25), 0.30);
        assert_eq!(refuel_fraction(0.9), 0.5);
        assert_eq!(refuel_fraction(1.0), 0.5);
        let levels: Vec<f64> = (0..=200).map(|i| refuel_fraction(-1.0 + i as f64 / 100.0)).collect();
        assert!(levels.windows(2).all(|w| w[0] <= w[1]));
        let mut distinct = levels.clone();
        distinct.dedup();
        assert_eq!(distinct, vec![0.0, 0.15, 0.30, 0.5]);
    }

    #[test]
    fn wave_field_stays_clamped() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = WaveField::random(10, 10, 2.0, &mut rng);
        for _ in 0..50 {
            w.advance(10, &mut rng);
            assert!(w.heights.iter().all(|h| h.abs() <= WAVE_LIMIT));
        }
    }
}
