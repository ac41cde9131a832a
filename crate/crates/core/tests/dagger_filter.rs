mod common;

use common::Toy;
use hint::dagger::{collect_episode_from, query_and_filter, suboptimal_demo_rate, toy, EpisodeSeeds, FilterConfig};
use hint::envs::{Pos, RandomPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CAP: f64 = 3.0;
const H: usize = 8;

fn world(e: &hint::envs::Env, t: &Toy) -> hint::envs::WorldState {
    let p = |c: (i32, i32)| Pos::new(c.0, c.1);
    toy::state(e, p(t.r), p(t.l), p(t.d), t.fuel, t.step, t.docked)
}

#[test]
fn filter_matches_exact_oracle_on_every_state() {
    let e = toy::env(CAP, H);
    let states = common::enumerate(&[0.0, 0.45, 0.9, 1.0, 1.5, 2.0, 3.0], &[0, 3, 6]);
    let (mut acc, mut rej) = (0, 0);
    for (i, t) in states.iter().enumerate() {
        let s = world(&e, t);
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let r = query_and_filter(&e, &s, &toy::Courier, &mut (), &mut rng, &EpisodeSeeds::new(i as u64), 0, &FilterConfig::default())
            .unwrap();
        let want = common::accepts(t, CAP, H);
        assert_eq!(r.accepted, want, "{t:?}");
        if want { acc += 1 } else { rej += 1 }
    }
    // Both outcomes are well represented.
    assert!(acc > 1000 && rej > 1000, "{acc} {rej}");
}

#[test]
fn empty_tank_off_destination_is_rejected() {
    let e = toy::env(CAP, H);
    let s = toy::state(&e, Pos::new(0, 0), Pos::new(0, 0), Pos::new(2, 2), 0.0, 1, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = query_and_filter(&e, &s, &toy::Courier, &mut (), &mut rng, &EpisodeSeeds::new(0), 0, &FilterConfig::default()).unwrap();
    assert!(!r.accepted);
}

#[test]
fn suboptimal_rate_is_exact_over_visited_states() {
    let e = toy::env(CAP, H);
    let starts = common::enumerate(&[1.0, 2.0, 3.0], &[0]);
    let (mut visited, mut failing) = (0usize, 0usize);
    let mut results = Vec::new();
    for (i, t) in starts.iter().filter(|t| !t.docked).enumerate() {
        let seeds = EpisodeSeeds::new(i as u64);
        let q = collect_episode_from(&e, &RandomPolicy, &toy::Courier, &FilterConfig::default(), &seeds, world(&e, t), 0).unwrap();
        let states = hint::dagger::student_episode_from(&e, &RandomPolicy, &seeds, world(&e, t)).unwrap();
        for s in &states[..states.len() - 1] {
            visited += 1;
            failing += !common::accepts(&Toy::of(s), CAP, H) as usize;
        }
        results.extend(q.results);
    }
    assert_eq!(results.len(), visited);
    assert_eq!(suboptimal_demo_rate(&results), failing as f64 / visited as f64);
    assert!(failing > 0 && failing < visited);
}
