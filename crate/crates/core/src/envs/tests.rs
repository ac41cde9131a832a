use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn env(name: &str) -> Env {
    Env::new(EnvConfig::named(name).unwrap()).unwrap()
}

fn random_actions(env: &Env, rng: &mut ChaCha8Rng) -> Vec<Action> {
    env.classes().iter().map(|c| Action::ALL[rng.random_range(0..c.n_actions())]).collect()
}

fn rollout(env: &Env, seed: u64, action_seed: u64) -> Vec<(WorldState, Vec<f64>)> {
    let mut s = env.reset_seeded(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
    let mut out = vec![(s.clone(), Vec::new())];
    while !env.is_done(&s) {
        let a = random_actions(env, &mut rng);
        let t = env.advance(&mut s, &a).unwrap();
        out.push((s.clone(), t.rewards));
    }
    out
}

#[test]
fn reset_places_agents_on_distinct_cells() {
    for name in ["marine-easy", "marine-hard", "fc-easy", "fc-hard"] {
        let e = env(name);
        for seed in 0..20 {
            let s = e.reset_seeded(seed);
            let mut cells: Vec<_> = s.positions.iter().map(|p| e.cell_index(*p)).collect();
            cells.sort();
            cells.dedup();
            assert_eq!(cells.len(), e.n_agents());
            assert_eq!(s.step, 0);
        }
    }
    let e = env("marine-easy");
    let m = e.reset_seeded(1);
    let m = m.marine().unwrap();
    assert_eq!(m.fuel, vec![5.0, 5.0]);
    assert_eq!(e.classes(), &[AgentClass::Routing, AgentClass::Routing, AgentClass::Logistic]);
    let f = env("fc-hard");
    assert_eq!((f.config().width, f.config().fov, f.config().max_steps), (21, 5, 210));
    assert_eq!(f.subareas().len(), 9);
    assert_eq!(f.reset_seeded(0).fc().unwrap().burning_count(), 1);
}

#[test]
fn same_seed_same_trajectory() {
    for name in ["marine-medium", "fc-medium"] {
        let e = env(name);
        assert_eq!(rollout(&e, 9, 4), rollout(&e, 9, 4));
        assert_ne!(e.reset_seeded(9), e.reset_seeded(10));
    }
}

#[test]
fn episode_length_bounded() {
    for name in ["marine-easy", "fc-easy", "fc-medium"] {
        let e = env(name);
        for seed in 0..10 {
            let r = rollout(&e, seed, seed + 100);
            assert!(r.len() - 1 <= e.config().max_steps);
            let last = &r.last().unwrap().0;
            assert!(e.is_done(last));
            assert!(last.step == e.config().max_steps || e.success(last) || e.failure(last));
        }
    }
}

#[test]
fn invalid_actions_rejected() {
    let e = env("marine-easy");
    let mut s = e.reset_seeded(0);
    let err = e.advance(&mut s, &[Action::Stay, Action::Extinguish, Action::Stay]).unwrap_err();
    assert!(matches!(err, EnvError::InvalidAction { agent: 1, .. }));
    assert!(matches!(e.advance(&mut s, &[Action::Stay]), Err(EnvError::ActionCount { .. })));
    assert_eq!(s, e.reset_seeded(0));
    assert_eq!(Action::from_code(6), None);
    assert_eq!(Action::from_code(5), Some(Action::Extinguish));
}

#[test]
fn stay_keeps_fuel_and_moves_cost_one() {
    let e = env("marine-easy");
    let mut s = e.reset_seeded(2);
    // Park the logistic agent far from both routing agents so no refuel happens.
    let before = s.marine().unwrap().fuel.clone();
    e.advance(&mut s, &[Action::Stay, Action::Stay, Action::Stay]).unwrap();
    assert_eq!(s.marine().unwrap().fuel, before);

    let mut s = e.reset_seeded(2);
    s.positions = vec![Pos::new(2, 2), Pos::new(0, 4), Pos::new(4, 4)];
    if let DomainState::Marine(m) = &mut s.domain {
        m.destinations = vec![Pos::new(0, 0)];
    }
    e.advance(&mut s, &[Action::Up, Action::Left, Action::Stay]).unwrap();
    let m = s.marine().unwrap();
    assert_eq!(s.positions[0], Pos::new(2, 1));
    assert_eq!(m.fuel[0], 4.0);
    // Bumping into the wall leaves the position and fuel unchanged.
    assert_eq!(s.positions[1], Pos::new(0, 4));
    assert_eq!(m.fuel[1], 5.0);
}

#[test]
fn marine_arrival_docks_and_succeeds() {
    let e = env("marine-easy");
    let mut s = e.reset_seeded(0);
    s.positions = vec![Pos::new(1, 0), Pos::new(0, 1), Pos::new(4, 4)];
    if let DomainState::Marine(m) = &mut s.domain {
        m.destinations = vec![Pos::new(0, 0)];
    }
    let t = e.advance(&mut s, &[Action::Left, Action::Stay, Action::Stay]).unwrap();
    assert!(!t.done);
    assert_eq!(t.info.arrived, 1);
    assert!((t.rewards[0] - (1.0 - 0.01)).abs() < 1e-12);
    // A docked agent ignores moves.
    let t = e.advance(&mut s, &[Action::Right, Action::Up, Action::Stay]).unwrap();
    assert_eq!(s.positions[0], Pos::new(0, 0));
    assert!(t.success && t.done && !t.failure);
}

#[test]
fn marine_depletion_is_failure() {
    let e = env("marine-easy");
    let mut s = e.reset_seeded(0);
    s.positions = vec![Pos::new(2, 2), Pos::new(0, 1), Pos::new(4, 4)];
    if let DomainState::Marine(m) = &mut s.domain {
        m.destinations = vec![Pos::new(0, 0)];
        m.fuel[0] = 1.0;
    }
    let t = e.advance(&mut s, &[Action::Right, Action::Stay, Action::Stay]).unwrap();
    assert!(t.failure && t.done && !t.success);
    assert!(t.rewards[0] < -0.99);
    assert!(e.failure(&s));
}

#[test]
fn refuel_follows_wave_bin_and_capacity() {
    let e = env("marine-easy");
    for (h, frac) in [(-0.9, 0.0), (-0.3, 0.15), (0.3, 0.30), (0.9, 0.5)] {
        let mut s = e.reset_seeded(0);
        s.positions = vec![Pos::new(2, 2), Pos::new(0, 4), Pos::new(2, 2)];
        if let DomainState::Marine(m) = &mut s.domain {
            m.destinations = vec![Pos::new(0, 0)];
            m.fuel[0] = 1.0;
            m.waves = WaveField::constant(vec![h; 25]);
        }
        let t = e.advance(&mut s, &[Action::Stay, Action::Stay, Action::Stay]).unwrap();
        let m = s.marine().unwrap();
        assert!((m.fuel[0] - (1.0 + frac * 5.0)).abs() < 1e-12, "h={h}");
        assert!((t.info.fuel_transferred - frac * 5.0).abs() < 1e-12);
        assert!((t.rewards[2] - (-0.01 + 0.1 * frac * 5.0)).abs() < 1e-12);
    }
    // Capped at capacity.
    let mut s = e.reset_seeded(0);
    s.positions = vec![Pos::new(2, 2), Pos::new(0, 4), Pos::new(2, 2)];
    if let DomainState::Marine(m) = &mut s.domain {
        m.destinations = vec![Pos::new(0, 0)];
        m.fuel[0] = 4.0;
        m.waves = WaveField::constant(vec![0.9; 25]);
    }
    e.advance(&mut s, &[Action::Stay, Action::Stay, Action::Stay]).unwrap();
    assert_eq!(s.marine().unwrap().fuel[0], 5.0);
}

#[test]
fn fuel_only_grows_through_bounded_refuels() {
    let e = env("marine-medium");
    for seed in 0..30 {
        let mut s = e.reset_seeded(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while !e.is_done(&s) {
            let before = s.marine().unwrap().total_fuel();
            let a = random_actions(&e, &mut rng);
            let t = e.advance(&mut s, &a).unwrap();
            let after = s.marine().unwrap().total_fuel();
            assert!(after <= before + t.info.fuel_transferred + 1e-12);
            assert!(t.info.fuel_transferred <= 0.5 * 10.0 * 3.0 + 1e-12);
            assert!(s.marine().unwrap().fuel.iter().all(|f| *f >= 0.0 && *f <= 10.0));
        }
    }
}

#[test]
fn extinguish_requires_discovery() {
    let e = env("fc-easy");
    let mut s = e.reset_seeded(0);
    let fire = (0..25).find(|&c| s.fc().unwrap().fire[c] == FireCell::Burning).unwrap();
    let fp = e.cell_pos(fire);
    // Perception agent in the far corner so the fire stays hidden.
    let far = Pos::new(if fp.x < 2 { 4 } else { 0 }, if fp.y < 2 { 4 } else { 0 });
    s.positions = vec![far, fp, Pos::new(2, 2)];
    if let DomainState::Fc(f) = &mut s.domain {
        f.discovered = vec![false; 25];
        f.fire.iter_mut().filter(|c| **c == FireCell::Burning).for_each(|c| *c = FireCell::None);
        f.fire[fire] = FireCell::Burning;
        f.wind = (0, 0);
    }
    let cfg = EnvConfig { fire_spread: 0.0, ..e.config().clone() };
    let e = Env::new(cfg).unwrap();
    let t = e.advance(&mut s, &[Action::Stay, Action::Extinguish, Action::Stay]).unwrap();
    assert_eq!(t.info.extinguished, 0);
    assert_eq!(s.fc().unwrap().fire[fire], FireCell::Burning);
    if let DomainState::Fc(f) = &mut s.domain {
        f.discovered[fire] = true;
    }
    let t = e.advance(&mut s, &[Action::Stay, Action::Extinguish, Action::Stay]).unwrap();
    assert_eq!(t.info.extinguished, 1);
    assert!(t.success);
    assert_eq!(s.fc().unwrap().fire[fire], FireCell::Extinguished);
    assert_eq!(t.rewards[1], 0.5);
}

#[test]
fn perception_discovers_fires_in_view() {
    let e = env("fc-easy");
    let mut s = e.reset_seeded(4);
    let fire = (0..25).find(|&c| s.fc().unwrap().fire[c] == FireCell::Burning).unwrap();
    let fp = e.cell_pos(fire);
    s.positions[0] = fp;
    e.advance(&mut s, &[Action::Stay, Action::Stay, Action::Stay]).unwrap();
    let f = s.fc().unwrap();
    assert!(f.discovered[fire]);
    assert_eq!(f.prob[fire], 1.0);
}

#[test]
fn fc_monotone_maps() {
    let e = env("fc-medium");
    for seed in 0..20 {
        let mut s = e.reset_seeded(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        while !e.is_done(&s) {
            let prev = s.fc().unwrap().clone();
            let a = random_actions(&e, &mut rng);
            e.advance(&mut s, &a).unwrap();
            let f = s.fc().unwrap();
            for c in 0..e.n_cells() {
                if prev.fire[c] == FireCell::Extinguished {
                    assert_eq!(f.fire[c], FireCell::Extinguished);
                }
                if prev.discovered[c] {
                    assert!(f.discovered[c]);
                }
                assert!((0.0..=1.0).contains(&f.prob[c]));
            }
        }
    }
}

#[test]
fn expected_burning_count_non_decreasing_without_extinguishing() {
    let e = env("fc-medium");
    let runs = 1000;
    let horizon = 40;
    let mut mean = vec![0.0; horizon + 1];
    for seed in 0..runs {
        let mut s = e.reset_seeded(seed);
        let stay = vec![Action::Stay; e.n_agents()];
        mean[0] += s.fc().unwrap().burning_count() as f64;
        for m in mean.iter_mut().skip(1) {
            if !e.is_done(&s) {
                e.advance(&mut s, &stay).unwrap();
            }
            *m += s.fc().unwrap().burning_count() as f64;
        }
    }
    for w in mean.windows(2) {
        assert!(w[1] >= w[0], "{mean:?}");
    }
    assert!(mean[horizon] > mean[0]);
}

#[test]
fn snapshot_restore_replays_exactly() {
    for name in ["marine-medium", "fc-medium"] {
        let e = env(name);
        let mut s = e.reset_seeded(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..7 {
            let a = random_actions(&e, &mut rng);
            e.advance(&mut s, &a).unwrap();
        }
        let token = snapshot(&s);
        let mut r = restore(&token).unwrap();
        assert_eq!(r, s);
        let mut rng2 = rng.clone();
        while !e.is_done(&s) {
            let a = random_actions(&e, &mut rng);
            let b = random_actions(&e, &mut rng2);
            assert_eq!(e.advance(&mut s, &a).unwrap(), e.advance(&mut r, &b).unwrap());
        }
        assert_eq!(r, s);
        // Terminal states restore too.
        let t = restore(&snapshot(&s)).unwrap();
        assert_eq!(t, s);
        assert!(e.is_done(&t));
    }
}

#[test]
fn nested_snapshots_to_horizon_depth() {
    let e = env("fc-easy");
    let mut s = e.reset_seeded(3);
    let mut stack = vec![snapshot(&s)];
    let stay = vec![Action::Stay; e.n_agents()];
    while !e.is_done(&s) {
        e.advance(&mut s, &stay).unwrap();
        stack.push(snapshot(&s));
    }
    for (k, tok) in stack.iter().enumerate() {
        assert_eq!(restore(tok).unwrap().step, k);
    }
}

#[test]
fn corrupted_snapshot_rejected() {
    let e = env("marine-easy");
    let s = e.reset_seeded(0);
    let mut bytes = snapshot(&s).as_bytes().to_vec();
    bytes[10] ^= 0x01;
    assert!(matches!(restore(&Snapshot::from_bytes(bytes)), Err(EnvError::CorruptSnapshot(_))));
    assert!(restore(&Snapshot::from_bytes(vec![1, 2, 3])).is_err());
}

#[test]
fn forked_rng_diverges_from_main_stream() {
    let e = env("fc-medium");
    let s = e.reset_seeded(8);
    let stay = vec![Action::Stay; e.n_agents()];
    let mut a = s.clone();
    let mut b = s.clone();
    b.fork_rng(17);
    let mut c = s.clone();
    c.fork_rng(17);
    for _ in 0..30 {
        e.advance(&mut a, &stay).unwrap();
        e.advance(&mut b, &stay).unwrap();
        e.advance(&mut c, &stay).unwrap();
    }
    assert_eq!(b, c);
    assert_ne!(a.rng, b.rng);
}

#[test]
fn global_observe_shapes() {
    let e = env("fc-medium");
    let s = e.reset_seeded(0);
    let g = e.global_observe(&s);
    assert_eq!(g.n_rows(), 20);
    assert_eq!(g.rows.cols(), FC_ROW_DIM);
    let e = env("marine-medium");
    let s = e.reset_seeded(0);
    let g = e.global_observe(&s);
    // 3 routing × (2 logistics + 1 destination) + 2 logistics × 3 routing.
    assert_eq!(g.n_rows(), 15);
    assert!(g.rows.is_finite());
}

#[test]
fn distance_feature_zero_on_target() {
    let e = env("marine-easy");
    let mut s = e.reset_seeded(0);
    s.positions[2] = s.positions[0];
    let g = e.global_observe(&s);
    assert_eq!(g.row(0, 0)[7], 0.0);
    assert_eq!(g.row(2, 0)[7], 0.0);
    let e = env("fc-medium");
    let s = e.reset_seeded(0);
    let g = e.global_observe(&s);
    let p = s.positions[0];
    let j = e.subareas().iter().position(|a| a.contains(p)).unwrap();
    assert_eq!(g.row(0, j)[4], 0.0);
}

#[test]
fn uniform_probability_subarea_has_maximal_entropy_feature() {
    let e = env("fc-medium");
    let mut s = e.reset_seeded(0);
    if let DomainState::Fc(f) = &mut s.domain {
        for (c, p) in f.prob.iter_mut().enumerate() {
            *p = if e.subareas()[2].contains(e.cell_pos(c)) { 0.5 } else { 0.1 };
        }
    }
    let g = e.global_observe(&s);
    for i in 0..e.n_agents() {
        let hs: Vec<f64> = (0..4).map(|j| g.row(i, j)[6]).collect();
        assert_eq!(hs[2], 1.0);
        assert!(hs.iter().all(|h| *h <= hs[2]));
    }
}

#[test]
fn observations_have_declared_widths() {
    for name in ["marine-easy", "marine-hard", "fc-easy", "fc-hard"] {
        let e = env(name);
        let (s, obs) = e.reset();
        assert_eq!(obs.len(), e.n_agents());
        for (i, o) in obs.iter().enumerate() {
            assert_eq!(o.features.len(), e.obs_dim(e.class_of(i)));
            assert!(o.features.iter().all(|v| v.is_finite()));
        }
        for i in 0..e.n_agents() {
            let bits = vec![true; e.n_targets_for(e.class_of(i))];
            assert_eq!(e.executor_features(&s, i, &bits).len(), EXEC_DIM);
        }
    }
}

#[test]
fn goal_selection() {
    let e = env("marine-easy");
    let mut s = e.reset_seeded(0);
    s.positions = vec![Pos::new(0, 0), Pos::new(4, 0), Pos::new(1, 0)];
    if let DomainState::Marine(m) = &mut s.domain {
        m.destinations = vec![Pos::new(4, 4)];
    }
    let g = e.goal_target(&s, 0, &[true, true]).unwrap();
    assert_eq!((g.kind, g.pos), (GoalKind::Logistic, Pos::new(1, 0)));
    let g = e.goal_target(&s, 0, &[false, true]).unwrap();
    assert_eq!((g.kind, g.pos, g.target), (GoalKind::Destination, Pos::new(4, 4), 1));
    assert_eq!(e.goal_target(&s, 0, &[false, false]), None);
    let g = e.goal_target(&s, 2, &[true, true]).unwrap();
    assert_eq!((g.kind, g.target), (GoalKind::Routing, 0));
    let x = e.executor_features(&s, 0, &[false, true]);
    assert_eq!(&x[..6], &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn render_marks_entities() {
    let e = env("fc-easy");
    let s = e.reset_seeded(0);
    let r = e.render(&s);
    assert_eq!(r.lines().count(), 6);
    assert!(r.contains('P') && r.contains('A'));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn positions_stay_in_bounds(seed in 0u64..1000, aseed in 0u64..1000, fc in any::<bool>()) {
        let e = env(if fc { "fc-easy" } else { "marine-easy" });
        for (s, r) in rollout(&e, seed, aseed) {
            prop_assert!(s.positions.iter().all(|p| e.in_bounds(*p)));
            prop_assert!(r.iter().all(|v| v.is_finite()));
            prop_assert!(s.step <= e.config().max_steps);
        }
    }
}

#[test]
fn fractional_fuel_allows_one_last_move() {
    let e = env("marine-easy");
    let mut s = e.reset_seeded(0);
    s.positions = vec![Pos::new(2, 2), Pos::new(0, 1), Pos::new(4, 4)];
    if let DomainState::Marine(m) = &mut s.domain {
        m.destinations = vec![Pos::new(3, 3)];
        m.fuel[0] = 0.5;
    }
    let t = e.advance(&mut s, &[Action::Down, Action::Stay, Action::Stay]).unwrap();
    assert_eq!(s.positions[0], Pos::new(2, 3));
    assert_eq!(s.marine().unwrap().fuel[0], 0.0);
    assert!(t.failure);
    // Arriving on the last unit is a dock, not a failure.
    let mut s = e.reset_seeded(0);
    s.positions = vec![Pos::new(2, 2), Pos::new(3, 3), Pos::new(4, 4)];
    if let DomainState::Marine(m) = &mut s.domain {
        m.destinations = vec![Pos::new(2, 3)];
        m.fuel[0] = 0.5;
        m.docked[1] = true;
    }
    let t = e.advance(&mut s, &[Action::Down, Action::Stay, Action::Stay]).unwrap();
    assert!(!t.failure);
    assert!(s.marine().unwrap().docked[0]);
}
