use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::envs::EnvConfig;
use crate::numgrad::{grad_check, ParamSet, Role};
use crate::student::{CommMode, StudentConfig};

fn env(name: &str) -> Env {
    Env::new(EnvConfig::named(name).unwrap()).unwrap()
}

fn teacher(e: &Env, k: usize, seed: u64) -> Teacher {
    Teacher::new(TeacherParams::init(e, 8, seed), k)
}

fn student(e: &Env, seed: u64) -> StudentParams {
    StudentParams::init(e, StudentConfig { hidden: 8, message: 4, comm: CommMode::Heterogeneous }, seed).unwrap()
}

/// Σ_{j≥t} γ^{j−t} r_j up to the first terminal or the segment end, plus the discounted bootstrap.
fn n_step_return(r: &[f64], dones: &[bool], boot: f64, gamma: f64, t: usize) -> f64 {
    let mut g = 0.0;
    let mut disc = 1.0;
    for j in t..r.len() {
        g += disc * r[j];
        disc *= gamma;
        if dones[j] {
            return g;
        }
    }
    g + disc * boot
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn on_policy_targets_are_n_step_returns(
        steps in prop::collection::vec((-2.0f64..2.0, -5.0f64..5.0, -3.0f64..-0.01, prop::bool::weighted(0.15)), 1..40),
        boot in -5.0f64..5.0,
        gamma in 0.5f64..0.999,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let lp: Vec<f64> = steps.iter().map(|s| s.2).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.3).collect();
        let b = vtrace_targets(&VTraceInput {
            rewards: &r, values: &v, bootstrap: boot, target_logp: &lp, behavior_logp: &lp, dones: &d, gamma,
        }).unwrap();
        for t in 0..r.len() {
            prop_assert_eq!(b.rho[t], 1.0);
            prop_assert_eq!(b.c[t], 1.0);
            let g = n_step_return(&r, &d, boot, gamma, t);
            prop_assert!((b.v[t] - g).abs() < 1e-12, "t={} {} vs {}", t, b.v[t], g);
        }
    }

    #[test]
    fn truncated_weights_lie_in_unit_interval(
        steps in prop::collection::vec((-5.0f64..0.0, -5.0f64..0.0), 1..30),
    ) {
        let n = steps.len();
        let lt: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let lb: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let z = vec![0.0; n];
        let b = vtrace_targets(&VTraceInput {
            rewards: &z, values: &z, bootstrap: 0.0, target_logp: &lt, behavior_logp: &lb, dones: &vec![false; n], gamma: 0.9,
        }).unwrap();
        for (j, r) in b.rho.iter().enumerate() {
            prop_assert!(*r > 0.0 && *r <= 1.0);
            prop_assert_eq!(*r, (lt[j] - lb[j]).exp().min(1.0));
        }
    }
}

#[test]
fn ratio_above_one_is_truncated() {
    let b = vtrace_targets(&VTraceInput {
        rewards: &[1.0],
        values: &[0.0],
        bootstrap: 0.0,
        target_logp: &[2.5f64.ln()],
        behavior_logp: &[0.0],
        dones: &[true],
        gamma: 0.9,
    })
    .unwrap();
    assert_eq!(b.rho, vec![1.0]);
    assert_eq!(b.v, vec![1.0]);
}

#[test]
fn impossible_behavior_action_is_rejected() {
    let r = vtrace_targets(&VTraceInput {
        rewards: &[0.0, 0.0],
        values: &[0.0, 0.0],
        bootstrap: 0.0,
        target_logp: &[-1.0, -1.0],
        behavior_logp: &[-1.0, f64::NEG_INFINITY],
        dones: &[false, true],
        gamma: 0.9,
    });
    assert!(matches!(r, Err(PseudoError::ImpossibleAction(_, 1))));
    let r = vtrace_targets(&VTraceInput {
        rewards: &[0.0],
        values: &[0.0, 1.0],
        bootstrap: 0.0,
        target_logp: &[-1.0],
        behavior_logp: &[-1.0],
        dones: &[true],
        gamma: 0.9,
    });
    assert!(matches!(r, Err(PseudoError::Length(_))));
}

/// A 3-state, 2-action MDP with tabular policies.
struct Chain {
    p: [[[f64; 3]; 2]; 3],
    r: [[f64; 2]; 3],
}

impl Chain {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut p = [[[0.0; 3]; 2]; 3];
        let mut r = [[0.0; 2]; 3];
        for s in 0..3 {
            for a in 0..2 {
                let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
                let z: f64 = w.iter().sum();
                for k in 0..3 {
                    p[s][a][k] = w[k] / z;
                }
                r[s][a] = rng.random_range(-1.0..1.0);
            }
        }
        Self { p, r }
    }
}

fn random_policy(rng: &mut ChaCha8Rng) -> [[f64; 2]; 3] {
    let mut pi = [[0.0; 2]; 3];
    for row in &mut pi {
        let q = rng.random_range(0.02..0.98);
        *row = [q, 1.0 - q];
    }
    pi
}

fn pick(w: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, x) in w.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    w.len() - 1
}

#[test]
fn matches_term_by_term_summation_on_chain_mdp() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let m = Chain::random(&mut rng);
        let (mu, pi) = (random_policy(&mut rng), random_policy(&mut rng));
        let vtab: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let n = rng.random_range(1..10);
        let gamma = rng.random_range(0.5..0.99);
        let mut s = rng.random_range(0..3);
        let (mut states, mut acts, mut rews, mut dones) = (vec![], vec![], vec![], vec![]);
        for j in 0..n {
            let a = pick(&mu[s], &mut rng);
            states.push(s);
            acts.push(a);
            rews.push(m.r[s][a]);
            dones.push(j + 1 == n && rng.random_bool(0.3));
            s = pick(&m.p[s][a], &mut rng);
        }
        let boot = vtab[s];
        let values: Vec<f64> = states.iter().map(|&s| vtab[s]).collect();
        let lt: Vec<f64> = states.iter().zip(&acts).map(|(&s, &a)| pi[s][a].ln()).collect();
        let lb: Vec<f64> = states.iter().zip(&acts).map(|(&s, &a)| mu[s][a].ln()).collect();
        let b = vtrace_targets(&VTraceInput {
            rewards: &rews,
            values: &values,
            bootstrap: boot,
            target_logp: &lt,
            behavior_logp: &lb,
            dones: &dones,
            gamma,
        })
        .unwrap();
        // Oracle: the defining double sum with explicit products of probability ratios.
        let ratio = |j: usize| (pi[states[j]][acts[j]] / mu[states[j]][acts[j]]).min(1.0);
        let vnext = |j: usize| if dones[j] { 0.0 } else if j + 1 < n { vtab[states[j + 1]] } else { boot };
        for t in 0..n {
            let mut v = vtab[states[t]];
            for j in t..n {
                let mut prod = 1.0;
                for i in t..j {
                    prod *= ratio(i);
                }
                let delta = ratio(j) * (rews[j] + gamma * vnext(j) - vtab[states[j]]);
                v += gamma.powi((j - t) as i32) * prod * delta;
            }
            assert!((b.v[t] - v).abs() < 1e-10, "{} vs {v}", b.v[t]);
        }
    }
}

/// Expected one-segment V-trace operator on the chain MDP, by exhaustive enumeration of n-step paths.
fn vtrace_operator(m: &Chain, mu: &[[f64; 2]; 3], pi: &[[f64; 2]; 3], v: &[f64; 3], gamma: f64, n: usize) -> [f64; 3] {
    fn walk(
        m: &Chain,
        mu: &[[f64; 2]; 3],
        pi: &[[f64; 2]; 3],
        v: &[f64; 3],
        gamma: f64,
        s: usize,
        depth: usize,
        n: usize,
        weight: f64,
    ) -> f64 {
        if depth == n {
            return 0.0;
        }
        let mut total = 0.0;
        for a in 0..2 {
            let c = (pi[s][a] / mu[s][a]).min(1.0);
            for s2 in 0..3 {
                let pr = mu[s][a] * m.p[s][a][s2];
                let delta = c * (m.r[s][a] + gamma * v[s2] - v[s]);
                total += pr * weight * delta;
                total += pr * walk(m, mu, pi, v, gamma, s2, depth + 1, n, weight * gamma * c);
            }
        }
        total
    }
    let mut out = [0.0; 3];
    for s in 0..3 {
        out[s] = v[s] + walk(m, mu, pi, v, gamma, s, 0, n, 1.0);
    }
    out
}

#[test]
fn vtrace_operator_contracts_on_chain_mdp() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let m = Chain::random(&mut rng);
        let (mu, pi) = (random_policy(&mut rng), random_policy(&mut rng));
        let mut v = [0.0; 3];
        for x in &mut v {
            *x = rng.random_range(-5.0..5.0);
        }
        let mut last = f64::INFINITY;
        for it in 0..400 {
            let next = vtrace_operator(&m, &mu, &pi, &v, 0.9, 3);
            let gap = (0..3).map(|s| (next[s] - v[s]).abs()).fold(0.0, f64::max);
            if it > 0 {
                assert!(gap <= last + 1e-15, "iteration {it}: {gap} > {last}");
            }
            last = gap;
            v = next;
        }
        assert!(last < 1e-6, "did not converge: {last}");
    }
}

#[test]
fn value_loss_arithmetic() {
    assert_eq!(value_loss(&[1.0], &[3.0]), 4.0);
    assert_eq!(value_loss(&[0.5, -1.0], &[0.5, -1.0]), 0.0);
}

#[test]
fn policy_objective_reduces_for_teacher_batches() {
    let terms: Vec<PolicyTerm> = [(-0.5, 2.0), (-1.5, -1.0), (-0.1, 0.3)]
        .iter()
        .map(|&(lp, adv)| PolicyTerm { tag: Tag::Teacher, target_logp: lp, behavior_logp: -9.0, adv })
        .collect();
    let expect = terms.iter().map(|t| t.target_logp * t.adv).sum::<f64>() / 3.0;
    assert!((policy_objective(&terms) - expect).abs() < 1e-15);
    let student = PolicyTerm { tag: Tag::Student, target_logp: -1.0, behavior_logp: -2.0, adv: 1.0 };
    assert!((student.weight() - 1f64.exp()).abs() < 1e-15);
}

/// Tabular log-softmax policy logits `[3, 2]` as a parameter set.
fn tabular(rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new(Role::Other);
    let data: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
    p.insert("logits", Tensor::matrix(3, 2, data).unwrap()).unwrap();
    p
}

#[test]
fn mixed_objective_gradient_matches_hand_sum_on_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let p = tabular(&mut rng);
        let n = rng.random_range(1..12);
        let states: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let acts: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let tags: Vec<Tag> = (0..n).map(|_| if rng.random_bool(0.5) { Tag::Student } else { Tag::Teacher }).collect();
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95f64).ln()).collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let logits = p.get("logits").unwrap().data().to_vec();
        let pi = |s: usize, a: usize| {
            let z = logits[2 * s].exp() + logits[2 * s + 1].exp();
            logits[2 * s + a].exp() / z
        };
        let weights: Vec<f64> = (0..n)
            .map(|t| match tags[t] {
                Tag::Student => pi(states[t], acts[t]).ln().exp() / mu[t].exp(),
                Tag::Teacher => 1.0,
            })
            .collect();
        let r = crate::numgrad::evaluate_with_gradients(&p, &[], |t, s, _| {
            let l = t.param(s, "logits")?;
            let lp = t.log_softmax(l)?;
            let picked: Vec<Var> = (0..n).map(|k| t.index(lp, 2 * states[k] + acts[k])).collect::<Result<_, _>>()?;
            let v = t.stack(&picked)?;
            policy_objective_graph(t, v, &weights, &adv)
        })
        .unwrap();
        // ∂ log π(a|s) / ∂ logits[s', b] = 1{s'=s}(1{b=a} − π(b|s)).
        let mut oracle = [0.0; 6];
        for k in 0..n {
            let s = states[k];
            for b in 0..2 {
                let ind = if b == acts[k] { 1.0 } else { 0.0 };
                oracle[2 * s + b] += weights[k] * adv[k] * (ind - pi(s, b)) / n as f64;
            }
        }
        for (g, o) in r.grads["logits"].data().iter().zip(oracle) {
            assert!((g - o).abs() < 1e-10, "{g} vs {o}");
        }
    }
}

#[test]
fn zero_advantage_gives_zero_policy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = tabular(&mut rng);
    let r = crate::numgrad::evaluate_with_gradients(&p, &[], |t, s, _| {
        let l = t.param(s, "logits")?;
        let lp = t.log_softmax(l)?;
        let v = t.gather(lp, &[0, 1, 1])?;
        policy_objective_graph(t, v, &[1.0, 2.0, 0.5], &[0.0; 3])
    })
    .unwrap();
    assert!(r.grads["logits"].data().iter().all(|g| *g == 0.0));
}

#[test]
fn switch_point_splits_student_and_teacher_steps() {
    let e = env("fc-easy");
    let (st, te) = (student(&e, 1), teacher(&e, 1, 2));
    let h = e.config().max_steps;
    let full = rollout_mixed(&e, &st, &te, Some(h), 5).unwrap();
    assert!(full.steps.iter().all(|s| s.tag == Tag::Student));
    let one = rollout_mixed(&e, &st, &te, Some(1), 5).unwrap();
    assert_eq!(one.steps[0].tag, Tag::Student);
    assert!(one.steps[1..].iter().all(|s| s.tag == Tag::Teacher));
    for seed in 0..10 {
        let tr = rollout_mixed(&e, &st, &te, None, seed).unwrap();
        assert!((1..=h).contains(&tr.switch));
        for (t, s) in tr.steps.iter().enumerate() {
            assert_eq!(s.tag, if t < tr.switch { Tag::Student } else { Tag::Teacher });
            if s.tag == Tag::Teacher {
                assert_eq!(s.behavior_logp, s.teacher_logp);
            }
            assert!(s.behavior_logp.is_finite() && s.teacher_logp.is_finite());
        }
        assert!(tr.steps.last().unwrap().done);
        assert_eq!(tr.steps.iter().filter(|s| s.done).count(), 1);
    }
}

#[test]
fn refresh_steps_follow_k() {
    let e = env("fc-medium");
    let tr = rollout_mixed(&e, &student(&e, 1), &teacher(&e, 3, 2), None, 9).unwrap();
    for (t, s) in tr.steps.iter().enumerate() {
        assert_eq!(s.refresh.is_some(), t % 3 == 0);
    }
}

#[test]
fn buffer_splits_with_bootstraps() {
    let e = env("fc-easy");
    let (st, te) = (student(&e, 1), teacher(&e, 1, 2));
    let tr = rollout_mixed(&e, &st, &te, Some(3), 1).unwrap();
    assert!(tr.len() > 7);
    let mut l = PseudoLearner::new();
    let full = l.push(&tr, 4);
    assert_eq!(full.len(), tr.len() / 4);
    assert_eq!(l.pending_steps(), tr.len() % 4);
    let first = &full[0];
    assert_eq!(first.len(), 1);
    assert_eq!(first[0].steps.len(), 4);
    assert_eq!(first[0].bootstrap.as_ref(), Some(&tr.steps[4].pooled));
    let mut l = PseudoLearner::new();
    assert!(l.push(&tr, tr.len() + 5).is_empty());
    let tail = l.push(&tr, tr.len() + 5);
    assert_eq!(tail.len(), 1);
    assert_eq!(tail[0].len(), 2);
    assert!(tail[0][0].bootstrap.is_none());
    assert_eq!(tail[0][1].steps.len(), 5);
}

fn some_chunks(e: &Env, te: &Teacher, n: usize, seed: u64) -> Vec<Chunk> {
    let st = student(e, seed);
    let mut l = PseudoLearner::new();
    let mut i = 0;
    loop {
        let tr = rollout_mixed(e, &st, te, None, seed * 100 + i).unwrap();
        if let Some(c) = l.push(&tr, n).into_iter().next() {
            return c;
        }
        i += 1;
    }
}

#[test]
fn value_and_policy_gradients_match_finite_differences() {
    let e = env("fc-easy");
    for seed in 0..3 {
        let te = teacher(&e, 2, seed);
        let chunks = some_chunks(&e, &te, 12, seed);
        let targets = compute_targets(&te.params, &chunks, 0.9).unwrap();
        let ev = grad_check(&te.params.value, &[], 1e-3, |t, s, _| value_loss_graph(t, s, &chunks, &targets)).unwrap();
        let eh = grad_check(&te.params.high, &[], 1e-3, |t, s, _| objective_graph(t, s, &chunks, &targets)).unwrap();
        assert!(ev < 1e-4 && eh < 1e-4, "seed {seed}: value {ev}, policy {eh}");
    }
}

#[test]
fn graph_objective_matches_scalar_formula() {
    let e = env("marine-easy");
    let te = teacher(&e, 1, 5);
    let chunks = some_chunks(&e, &te, 30, 5);
    let targets = compute_targets(&te.params, &chunks, 0.9).unwrap();
    let mut terms = Vec::new();
    let mut t = Tape::new();
    let sh = t.bind_frozen(&te.params.high);
    let sv = t.bind_frozen(&te.params.value);
    for (c, b) in chunks.iter().zip(&targets.batches) {
        for (k, s) in c.steps.iter().enumerate() {
            let lt = match &s.refresh {
                Some((jf, bits)) => crate::teacher::high_level_logp(&te.params, jf, bits).unwrap() + s.low_logp,
                None => s.low_logp,
            };
            terms.push(PolicyTerm { tag: s.tag, target_logp: lt, behavior_logp: s.behavior_logp, adv: b.adv[k] });
        }
    }
    let j = objective_graph(&mut t, sh, &chunks, &targets).unwrap();
    assert!((t.scalar(j) - policy_objective(&terms)).abs() < 1e-10);
    let vl = value_loss_graph(&mut t, sv, &chunks, &targets).unwrap();
    let preds: Vec<f64> = chunks
        .iter()
        .flat_map(|c| c.steps.iter())
        .map(|s| {
            let mut tt = Tape::new();
            let ss = tt.bind_frozen(&te.params.value);
            let x = tt.constant(Tensor::matrix(1, s.pooled.len(), s.pooled.clone()).unwrap());
            let v = value_batch(&mut tt, ss, x).unwrap();
            tt.value(v).data()[0]
        })
        .collect();
    let tv: Vec<f64> = targets.batches.iter().flat_map(|b| b.v.clone()).collect();
    assert!((t.scalar(vl) - value_loss(&preds, &tv)).abs() < 1e-12);
}

#[test]
fn refinement_freezes_student_and_executors() {
    let e = env("fc-easy");
    let st = student(&e, 3);
    let st_before = st.clone();
    let mut te = teacher(&e, 1, 4);
    let before = te.params.clone();
    let cfg = PseudoConfig { n: 20, n_pseudo: 6, workers: 3, lr_value: 1e-3, lr_policy: 1e-3, ..Default::default() };
    let mut l = PseudoLearner::new();
    let rep = pseudo_update(&mut te, &mut l, &e, &st, &cfg, 1).unwrap();
    assert_eq!(rep.episodes, 6);
    assert!(rep.updates >= 1, "{rep:?}");
    assert_eq!(rep.updates, (rep.steps) / 20);
    assert_eq!(l.pending_steps(), rep.steps % 20);
    assert!(st.same_bits(&st_before));
    assert!(te.params.low[0].same_bits(&before.low[0]) && te.params.low[1].same_bits(&before.low[1]));
    assert!(!te.params.high.same_bits(&before.high));
    assert!(!te.params.value.same_bits(&before.value));
}

#[test]
fn refinement_is_deterministic() {
    let e = env("marine-easy");
    let st = student(&e, 3);
    let cfg = PseudoConfig { n: 16, n_pseudo: 5, workers: 2, ..Default::default() };
    let run = || {
        let mut te = teacher(&e, 1, 4);
        let mut l = PseudoLearner::new();
        let rep = pseudo_update(&mut te, &mut l, &e, &st, &cfg, 9).unwrap();
        (te.params, rep)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert!(a.same_bits(&b));
    assert_eq!(ra, rb);
}

#[test]
fn config_validation() {
    assert!(PseudoConfig::default().validate().is_ok());
    assert!(PseudoConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
    assert!(PseudoConfig { n: 0, ..Default::default() }.validate().is_err());
}
