use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};

/// Adam moment accumulators for one parameter set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Default for OptState {
    fn default() -> Self {
        Self::new()
    }
}

/// Outcome of one optimizer call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub updated: usize,
    pub skipped_zero: usize,
    pub skipped_non_finite: Vec<String>,
}

impl OptState {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Applies one Adam descent step in place.
///
/// Entries whose gradient is identically zero are left untouched (their moments
/// are not decayed either), so a zero gradient is an exact no-op. Entries with a
/// non-finite gradient are skipped and reported.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptState,
    lr: f64,
) -> StepReport {
    assert!(lr > 0.0, "learning rate must be positive");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut report = StepReport::default();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let Some(g) = grads.get(&name) else { continue };
        if !g.is_finite() {
            log::warn!("adam: non-finite gradient for {name}; entry skipped");
            report.skipped_non_finite.push(name);
            continue;
        }
        if g.data().iter().all(|v| *v == 0.0) {
            report.skipped_zero += 1;
            continue;
        }
        let p = params.get_mut(&name).expect("name from params");
        assert_eq!(p.shape(), g.shape(), "gradient shape for {name}");
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.second.entry(name).or_insert_with(|| vec![0.0; g.len()]);
        for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
            let mh = *mv / bc1;
            let vh = *vv / bc2;
            *pv -= lr * mh / (vh.sqrt() + state.eps);
        }
        report.updated += 1;
    }
    report
}
