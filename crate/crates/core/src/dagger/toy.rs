//! A 3×3 MARINE fixture small enough to enumerate: one routing agent, one
//! logistic agent, time-invariant waves and a scripted deterministic expert.

use crate::envs::{
    Action, ActOutcome, AgentClass, DomainState, Env, EnvConfig, MarineState, Pos, Policy, WaveField, WorldState,
};
use crate::numgrad::GradError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 3;

/// Wave heights, row-major; they fall in all four refuel bins.
pub const HEIGHTS: [f64; 9] = [-0.9, -0.4, 0.1, 0.6, -0.9, 0.6, 0.1, -0.4, 0.6];

pub fn env(capacity: f64, horizon: usize) -> Env {
    let mut cfg = EnvConfig::named("marine-easy").expect("preset");
    cfg.width = SIDE;
    cfg.height = SIDE;
    cfg.n_type1 = 1;
    cfg.n_type2 = 1;
    cfg.n_targets = 1;
    cfg.initial_fuel = capacity;
    cfg.max_steps = horizon;
    cfg.wave_noise = 0.0;
    Env::new(cfg).expect("toy config is valid")
}

/// A state with the routing agent at `routing`, the logistic agent at `logistic`.
pub fn state(env: &Env, routing: Pos, logistic: Pos, dest: Pos, fuel: f64, step: usize, docked: bool) -> WorldState {
    WorldState {
        step,
        positions: vec![routing, logistic],
        domain: DomainState::Marine(MarineState {
            fuel: vec![fuel],
            capacity: env.config().initial_fuel,
            destinations: vec![dest],
            docked: vec![docked],
            waves: WaveField::constant(HEIGHTS.to_vec()),
        }),
        rng: ChaCha8Rng::seed_from_u64(0),
    }
}

/// One step from `from` toward `to`, x first.
pub fn toward(from: Pos, to: Pos) -> Action {
    if from.x < to.x {
        Action::Right
    } else if from.x > to.x {
        Action::Left
    } else if from.y < to.y {
        Action::Down
    } else if from.y > to.y {
        Action::Up
    } else {
        Action::Stay
    }
}

/// Scripted expert: the routing agent heads for its destination when its fuel
/// covers the distance and waits otherwise; logistic agents chase it.
#[derive(Clone, Copy, Debug, Default)]
pub struct Courier;

impl Policy for Courier {
    type Memory = ();

    fn init_memory(&self, _env: &Env) {}

    fn act(
        &self,
        env: &Env,
        s: &WorldState,
        _memory: &mut (),
        _rng: &mut dyn rand::RngCore,
        _greedy: bool,
    ) -> Result<ActOutcome, GradError> {
        let m = s.marine().expect("marine state");
        let actions = (0..env.n_agents())
            .map(|i| match env.class_of(i) {
                AgentClass::Routing => {
                    let dest = m.destination_of(i);
                    let d = s.positions[i].manhattan(dest) as f64;
                    if m.docked[i] || m.fuel[i] < d {
                        Action::Stay
                    } else {
                        toward(s.positions[i], dest)
                    }
                }
                _ => toward(s.positions[i], s.positions[0]),
            })
            .collect();
        Ok(ActOutcome { actions, logp: 0.0 })
    }
}
