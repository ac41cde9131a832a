use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{low_level_logprobs, TeacherParams};
use crate::envs::{executor_input, sample_index, Action, AgentClass, ExecStatus, GoalKind, GoalTarget, Pos};
use crate::numgrad::GradError;

pub(super) const REACH_SUCCESS: f64 = 1.0;
pub(super) const REACH_STEP: f64 = -0.01;

/// Single-agent reach-the-target task for executor pretraining.
///
/// The agent must move onto its goal and then hold it (stay), or extinguish when
/// the goal is a fire. With no goal the correct action is to stay.
#[derive(Clone, Debug)]
pub struct ReachTask {
    pub width: usize,
    pub height: usize,
    pub class: AgentClass,
    pub pos: Pos,
    pub goal: Option<GoalTarget>,
    pub fuel_frac: f64,
    pub steps: usize,
    pub max_steps: usize,
}

impl ReachTask {
    pub fn new(width: usize, height: usize, class: AgentClass, rng: &mut ChaCha8Rng) -> Self {
        let mut t = Self {
            width,
            height,
            class,
            pos: Pos::new(0, 0),
            goal: None,
            fuel_frac: 1.0,
            steps: 0,
            max_steps: 2 * (width + height),
        };
        t.reset(rng);
        t
    }

    fn random_pos(&self, rng: &mut ChaCha8Rng) -> Pos {
        Pos::new(rng.random_range(0..self.width as i32), rng.random_range(0..self.height as i32))
    }

    pub fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.steps = 0;
        self.pos = self.random_pos(rng);
        let pos = self.random_pos(rng);
        let u: f64 = rng.random();
        let kind = match self.class {
            AgentClass::Routing => Some(if u < 0.5 { GoalKind::Destination } else { GoalKind::Logistic }),
            AgentClass::Logistic => (u < 0.9).then_some(GoalKind::Routing),
            AgentClass::Perception => Some(GoalKind::Entropy),
            AgentClass::Action => {
                if u < 0.5 {
                    Some(GoalKind::Fire)
                } else if u < 0.9 {
                    Some(GoalKind::Subarea)
                } else {
                    None
                }
            }
        };
        self.goal = kind.map(|kind| GoalTarget { pos, kind, target: 0 });
        self.fuel_frac = if self.class == AgentClass::Routing { rng.random_range(0.2..1.0) } else { 1.0 };
    }

    fn at_goal(&self) -> bool {
        self.goal.is_some_and(|g| g.pos == self.pos)
    }

    pub fn features(&self) -> Vec<f64> {
        let on_fire = self.at_goal() && self.goal.is_some_and(|g| g.kind == GoalKind::Fire);
        let st = ExecStatus { on_fire, fuel_frac: self.fuel_frac, can_move: true };
        executor_input(self.pos, self.goal, self.width, self.height, st)
    }

    /// Applies `a`; returns `(reward, done, success)`.
    pub fn step(&mut self, a: Action) -> (f64, bool, bool) {
        self.steps += 1;
        let holding = matches!(a, Action::Stay | Action::Extinguish);
        let success = match self.goal {
            None => holding,
            Some(g) if g.pos == self.pos && holding => g.kind != GoalKind::Fire || a == Action::Extinguish,
            _ => false,
        };
        if !holding {
            let (dx, dy) = a.delta();
            self.pos = Pos::new(
                (self.pos.x + dx).clamp(0, self.width as i32 - 1),
                (self.pos.y + dy).clamp(0, self.height as i32 - 1),
            );
        }
        let done = success || self.steps >= self.max_steps;
        (if success { REACH_SUCCESS } else { REACH_STEP }, done, success)
    }
}

/// Fraction of `episodes` random reach tasks solved by the class executor.
pub fn reach_rate(
    params: &TeacherParams,
    class: AgentClass,
    width: usize,
    height: usize,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, GradError> {
    let set = params.low_for(class);
    let mut wins = 0;
    for _ in 0..episodes {
        let mut task = ReachTask::new(width, height, class, rng);
        loop {
            let lp = low_level_logprobs(set, &[task.features()])?;
            let probs: Vec<f64> = lp[0].iter().map(|v| v.exp()).collect();
            let a = Action::ALL[sample_index(&probs, rng, false)];
            let (_, done, success) = task.step(a);
            if done {
                wins += success as usize;
                break;
            }
        }
    }
    Ok(wins as f64 / episodes as f64)
}
