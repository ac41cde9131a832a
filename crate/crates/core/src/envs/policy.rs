use rand::Rng;

use super::{Action, Env, WorldState};
use crate::numgrad::GradError;

/// One joint decision.
#[derive(Clone, Debug, PartialEq)]
pub struct ActOutcome {
    pub actions: Vec<Action>,
    /// Joint log-probability of `actions` under the acting policy.
    pub logp: f64,
}

/// Anything that can drive every agent of an environment.
pub trait Policy: Sync {
    /// Per-episode state threaded between steps (recurrent state, cached subgoals).
    type Memory: Clone + Send;

    fn init_memory(&self, env: &Env) -> Self::Memory;

    fn act(
        &self,
        env: &Env,
        state: &WorldState,
        memory: &mut Self::Memory,
        rng: &mut dyn rand::RngCore,
        greedy: bool,
    ) -> Result<ActOutcome, GradError>;
}

/// Samples an index from a probability vector; greedy picks the first maximum.
pub fn sample_index(probs: &[f64], rng: &mut dyn rand::RngCore, greedy: bool) -> usize {
    if greedy {
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        return best;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Uniformly random joint actions; a baseline and test fixture.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    type Memory = ();

    fn init_memory(&self, _env: &Env) {}

    fn act(
        &self,
        env: &Env,
        _state: &WorldState,
        _memory: &mut (),
        rng: &mut dyn rand::RngCore,
        _greedy: bool,
    ) -> Result<ActOutcome, GradError> {
        let mut logp = 0.0;
        let actions = env
            .classes()
            .iter()
            .map(|c| {
                logp -= (c.n_actions() as f64).ln();
                Action::ALL[rng.random_range(0..c.n_actions())]
            })
            .collect();
        Ok(ActOutcome { actions, logp })
    }
}

/// Every agent stays put.
#[derive(Clone, Copy, Debug, Default)]
pub struct StayPolicy;

impl Policy for StayPolicy {
    type Memory = ();

    fn init_memory(&self, _env: &Env) {}

    fn act(
        &self,
        env: &Env,
        _state: &WorldState,
        _memory: &mut (),
        _rng: &mut dyn rand::RngCore,
        _greedy: bool,
    ) -> Result<ActOutcome, GradError> {
        Ok(ActOutcome { actions: vec![Action::Stay; env.n_agents()], logp: 0.0 })
    }
}
