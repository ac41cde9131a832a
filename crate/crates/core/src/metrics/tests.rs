use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::envs::{EnvConfig, RandomPolicy, StayPolicy};

fn env(name: &str) -> Env {
    Env::new(EnvConfig::named(name).unwrap()).unwrap()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

fn covariance(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, d) = (x.len(), x[0].len());
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    (0..d)
        .map(|i| (0..d).map(|j| x.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1) as f64).collect())
        .collect()
}

fn random_data(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = (0..d).map(|j| 1.0 + 0.7 * j as f64).collect();
    (0..n).map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn pca_matches_jacobi_oracle() {
    for seed in 0..10 {
        let x = random_data(20, 5, seed);
        let pca = pca_fit(&x, 5).unwrap();
        let oracle = jacobi_eigenvalues(covariance(&x));
        assert_eq!(pca.explained.len(), 5);
        for (a, b) in pca.explained.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn pca_basis_is_orthonormal_and_ordered() {
    let x = random_data(40, 6, 3);
    let pca = pca_fit(&x, 4).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let d: f64 = pca.components[i].iter().zip(&pca.components[j]).map(|(a, b)| a * b).sum();
            assert!((d - (i == j) as u8 as f64).abs() < 1e-8);
        }
    }
    assert!(pca.explained.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn line_data_is_one_dimensional() {
    let dir = [0.3, -1.0, 2.0, 0.5, 0.1];
    let x: Vec<Vec<f64>> = (0..30).map(|i| dir.iter().map(|d| d * (i as f64 - 12.0) + 4.0).collect()).collect();
    let pca = pca_fit(&x, 2).unwrap();
    assert!(pca.rank_deficient);
    assert_eq!(pca.components.len(), 1);
    let total: f64 = covariance(&x).iter().enumerate().map(|(i, r)| r[i]).sum();
    assert!(pca.explained[0] / total >= 0.999);
}

#[test]
fn pca_rejects_too_few_samples() {
    assert!(pca_fit(&random_data(2, 3, 0), 2).is_err());
    assert!(pca_fit(&[vec![1.0], vec![1.0, 2.0], vec![0.0]], 1).is_err());
}

#[test]
fn shared_basis_projects_identical_sets_identically() {
    let x = random_data(25, 4, 9);
    let p = pca_project(&x, &x, 2).unwrap();
    assert_eq!(p.teacher, p.student);
    assert!(histogram_kl(&p.teacher, &p.student, KL_BINS).unwrap() < 1e-9);
}

#[test]
fn kl_of_identical_sets_vanishes() {
    let x: Vec<Vec<f64>> = random_data(500, 2, 1);
    assert!(histogram_kl(&x, &x, 50).unwrap() < 1e-9);
}

#[test]
fn kl_of_disjoint_clusters_is_large() {
    let a: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 * 1e-3, 0.0]).collect();
    let b: Vec<Vec<f64>> = (0..100).map(|i| vec![10.0 + i as f64 * 1e-3, 5.0]).collect();
    assert!(histogram_kl(&a, &b, 50).unwrap() > 10.0);
}

#[test]
fn kl_matches_hand_computed_two_bin_case() {
    // One bin per axis split: teacher all in the low corner, student half there.
    let t = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
    let s = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
    let z = 1.0 + 4.0 * KL_EPS;
    let tp = [(1.0 + KL_EPS) / z, KL_EPS / z, KL_EPS / z, KL_EPS / z];
    let sp = [(0.5 + KL_EPS) / z, KL_EPS / z, KL_EPS / z, (0.5 + KL_EPS) / z];
    let want: f64 = sp.iter().zip(&tp).map(|(p, q)| p * (p / q).ln()).sum();
    assert!((histogram_kl(&t, &s, 2).unwrap() - want).abs() < 1e-12);
}

#[test]
fn kl_rejects_empty_sets() {
    assert!(histogram_kl(&[], &[vec![0.0, 0.0]], 50).is_err());
}

#[test]
fn idle_firefighters_never_succeed() {
    let e = env("fc-easy");
    let r = evaluate(&e, &StayPolicy, 5, &[0, 1], false).unwrap();
    assert_eq!(r.success_rate, 0.0);
    assert_eq!(r.steps_taken, e.config().max_steps as f64);
    assert_eq!(r.per_seed.len(), 2);
}

#[test]
fn evaluation_is_deterministic_and_bounded() {
    let e = env("marine-easy");
    let a = evaluate(&e, &RandomPolicy, 8, &EVAL_SEEDS, false).unwrap();
    let b = evaluate(&e, &RandomPolicy, 8, &EVAL_SEEDS, false).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.success_rate));
    assert!(a.steps_taken <= e.config().max_steps as f64);
    let mean: f64 = a.per_seed.iter().map(|s| s.success_rate).sum::<f64>() / 3.0;
    assert!((mean - a.success_rate).abs() < 1e-15);
    assert!(evaluate(&e, &RandomPolicy, 0, &[0], false).is_err());
}

#[test]
fn state_collection_counts_and_dims() {
    let e = env("fc-easy");
    let x = collect_states(&e, &RandomPolicy, 120, 0, false).unwrap();
    assert_eq!(x.len(), 120);
    assert!(x.iter().all(|r| r.len() == x[0].len()));
    assert_eq!(diagnostic_samples(Tier::Medium), 10_000);
}

#[test]
fn divergence_writes_points() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("points.csv");
    let t = random_data(30, 4, 1);
    let s = random_data(30, 4, 2);
    let rep = divergence(&t, &s, Some(&path)).unwrap();
    assert!(rep.kl >= 0.0);
    assert_eq!(rep.direction, "student||teacher");
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 61);
}

#[test]
fn curve_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    let rows = vec![
        CurveRow { timestep: 10, success_rate: 0.5, steps_taken: 30.0, suboptimal_demo_rate: 0.25, teacher_success_rate: 0.9 },
        CurveRow { timestep: 20, success_rate: 0.75, steps_taken: 22.5, suboptimal_demo_rate: 0.1, teacher_success_rate: 0.95 },
    ];
    save_curve(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("timestep,success_rate,steps_taken,suboptimal_demo_rate,teacher_success_rate\n"));
    assert_eq!(load_curve(&path).unwrap(), rows);
}

proptest! {
    #[test]
    fn kl_is_nonnegative(a in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..80),
                         b in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..80)) {
        let a: Vec<Vec<f64>> = a.into_iter().map(|(x, y)| vec![x, y]).collect();
        let b: Vec<Vec<f64>> = b.into_iter().map(|(x, y)| vec![x, y]).collect();
        prop_assert!(histogram_kl(&a, &b, 10).unwrap() >= 0.0);
    }
}
