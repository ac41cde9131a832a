//! Evaluation protocol, state-distribution diagnostics and learning-curve output.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Env, Policy, Tier};
use crate::numgrad::GradError;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Episodes per seed and seeds of the standard protocol.
pub const EVAL_EPISODES: usize = 50;
pub const EVAL_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub success_rate: f64,
    pub steps_taken: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate: f64,
    /// Mean episode length, with failed or timed-out episodes counted as the horizon.
    pub steps_taken: f64,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedReport>,
    pub greedy: bool,
}

fn eval_seed(seed: u64, episode: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1_0000_0000);
    r.set_stream(episode as u64 + 1);
    r.random()
}

/// Runs `episodes` fresh episodes per seed; success rate and steps are averaged per seed, then across seeds.
pub fn evaluate<P: Policy>(
    env: &Env,
    policy: &P,
    episodes: usize,
    seeds: &[u64],
    greedy: bool,
) -> Result<EvalReport, MetricsError> {
    if episodes == 0 || seeds.is_empty() {
        return Err(MetricsError::Invalid("need at least one episode and one seed".into()));
    }
    let horizon = env.config().max_steps;
    let jobs: Vec<(usize, usize)> = (0..seeds.len()).flat_map(|s| (0..episodes).map(move |e| (s, e))).collect();
    let outcomes: Vec<(bool, usize)> = jobs
        .par_iter()
        .map(|&(si, e)| {
            let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(seeds[si], e));
            let mut s = env.reset_seeded(rng.random());
            let mut mem = policy.init_memory(env);
            while !env.is_done(&s) {
                let a = policy.act(env, &s, &mut mem, &mut rng, greedy)?;
                env.advance(&mut s, &a.actions)?;
            }
            let ok = env.success(&s);
            Ok((ok, if ok { s.step } else { horizon }))
        })
        .collect::<Result<_, MetricsError>>()?;
    let per_seed: Vec<SeedReport> = seeds
        .iter()
        .enumerate()
        .map(|(si, &seed)| {
            let chunk = &outcomes[si * episodes..(si + 1) * episodes];
            SeedReport {
                seed,
                success_rate: chunk.iter().filter(|o| o.0).count() as f64 / episodes as f64,
                steps_taken: chunk.iter().map(|o| o.1 as f64).sum::<f64>() / episodes as f64,
            }
        })
        .collect();
    let n = per_seed.len() as f64;
    Ok(EvalReport {
        success_rate: per_seed.iter().map(|r| r.success_rate).sum::<f64>() / n,
        steps_taken: per_seed.iter().map(|r| r.steps_taken).sum::<f64>() / n,
        episodes,
        seeds: seeds.to_vec(),
        per_seed,
        greedy,
    })
}

/// Visited-state counts for the divergence diagnostic per tier.
pub fn diagnostic_samples(tier: Tier) -> usize {
    [5_000, 10_000, 15_000][tier.index()]
}

/// Pooled global features of the first `n` states visited by `policy` over consecutive episodes.
pub fn collect_states<P: Policy>(
    env: &Env,
    policy: &P,
    n: usize,
    seed: u64,
    greedy: bool,
) -> Result<Vec<Vec<f64>>, MetricsError> {
    let mut out = Vec::with_capacity(n);
    let mut episode = 0;
    while out.len() < n {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(seed, episode));
        let mut s = env.reset_seeded(rng.random());
        let mut mem = policy.init_memory(env);
        while !env.is_done(&s) && out.len() < n {
            out.push(env.global_observe(&s).pooled());
            let a = policy.act(env, &s, &mut mem, &mut rng, greedy)?;
            env.advance(&mut s, &a.actions)?;
        }
        episode += 1;
    }
    Ok(out)
}

const PCA_TOL: f64 = 1e-8;
const PCA_MAX_ITERS: usize = 1000;

/// A fitted principal basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Orthonormal directions, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub explained: Vec<f64>,
    /// Fewer components than requested because the data has lower rank.
    pub rank_deficient: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(c: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    c.iter().map(|row| dot(row, v)).collect()
}

/// Top `dims` principal directions by power iteration with deflation.
pub fn pca_fit(samples: &[Vec<f64>], dims: usize) -> Result<Pca, MetricsError> {
    if dims == 0 || samples.len() < dims + 1 {
        return Err(MetricsError::Invalid(format!("need at least {} samples, got {}", dims + 1, samples.len())));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(MetricsError::Invalid("samples must share one non-zero dimension".into()));
    }
    if samples.iter().flatten().any(|x| !x.is_finite()) {
        return Err(MetricsError::Invalid("non-finite sample".into()));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, x)| *m += x / n);
    }
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        let c: Vec<f64> = s.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += c[i] * c[j] / (n - 1.0);
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    let floor = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c0f_fee0);
    let mut pca = Pca { mean, components: Vec::new(), explained: Vec::new(), rank_deficient: false };
    for _ in 0..dims.min(d) {
        let orthogonalize = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
            for u in basis {
                let p = dot(v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
        };
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, &pca.components);
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        for _ in 0..PCA_MAX_ITERS {
            let mut w = matvec(&cov, &v);
            orthogonalize(&mut w, &pca.components);
            let norm = dot(&w, &w).sqrt();
            if norm <= floor {
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            if dot(&w, &v) < 0.0 {
                w.iter_mut().for_each(|x| *x = -*x);
            }
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            if delta < PCA_TOL {
                break;
            }
        }
        let lambda = dot(&v, &matvec(&cov, &v));
        if lambda <= floor {
            pca.rank_deficient = true;
            break;
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        pca.components.push(v);
        pca.explained.push(lambda);
    }
    if pca.components.len() < dims {
        pca.rank_deficient = true;
    }
    Ok(pca)
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.components.iter().map(|u| dot(u, &c)).collect()
    }
}

/// Both sample sets projected onto one basis fitted on their union.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub pca: Pca,
    pub teacher: Vec<Vec<f64>>,
    pub student: Vec<Vec<f64>>,
}

pub fn pca_project(teacher: &[Vec<f64>], student: &[Vec<f64>], dims: usize) -> Result<Projection, MetricsError> {
    let union: Vec<Vec<f64>> = teacher.iter().chain(student).cloned().collect();
    let pca = pca_fit(&union, dims)?;
    Ok(Projection {
        teacher: teacher.iter().map(|x| pca.project(x)).collect(),
        student: student.iter().map(|x| pca.project(x)).collect(),
        pca,
    })
}

pub const KL_EPS: f64 = 1e-6;
pub const KL_BINS: usize = 50;
pub const KL_DIRECTION: &str = "student||teacher";

fn histogram(points: &[Vec<f64>], lo: [f64; 2], hi: [f64; 2], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins * bins];
    let idx = |x: f64, a: usize| (((x - lo[a]) / (hi[a] - lo[a]) * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    for p in points {
        h[idx(p[0], 0) * bins + idx(p[1], 1)] += 1.0;
    }
    let n = points.len() as f64;
    let z = 1.0 + KL_EPS * (bins * bins) as f64;
    h.iter_mut().for_each(|c| *c = (*c / n + KL_EPS) / z);
    h
}

/// KL(student ‖ teacher) between smoothed 2-D histograms over the shared bounding box.
pub fn histogram_kl(teacher: &[Vec<f64>], student: &[Vec<f64>], bins: usize) -> Result<f64, MetricsError> {
    if teacher.is_empty() || student.is_empty() || bins == 0 {
        return Err(MetricsError::Invalid("histogram_kl needs non-empty point sets and bins >= 1".into()));
    }
    if teacher.iter().chain(student).any(|p| p.len() < 2 || !p[0].is_finite() || !p[1].is_finite()) {
        return Err(MetricsError::Invalid("points must be finite and 2-D".into()));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in teacher.iter().chain(student) {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    for a in 0..2 {
        if hi[a] - lo[a] <= 0.0 {
            lo[a] -= 0.5;
            hi[a] += 0.5;
        }
    }
    let t = histogram(teacher, lo, hi, bins);
    let s = histogram(student, lo, hi, bins);
    Ok(s.iter().zip(&t).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0))
}

/// Summary written by the divergence diagnostic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub samples: usize,
    pub kl: f64,
    pub direction: String,
    pub bins: usize,
    pub explained: Vec<f64>,
    pub rank_deficient: bool,
}

/// Fits the shared basis, writes the projected points as CSV and returns the report.
pub fn divergence(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    points_csv: Option<&Path>,
) -> Result<DivergenceReport, MetricsError> {
    let proj = pca_project(teacher, student, 2)?;
    let pad = |v: &Vec<f64>| vec![v.first().copied().unwrap_or(0.0), v.get(1).copied().unwrap_or(0.0)];
    let t: Vec<Vec<f64>> = proj.teacher.iter().map(pad).collect();
    let s: Vec<Vec<f64>> = proj.student.iter().map(pad).collect();
    if let Some(path) = points_csv {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["source", "pc1", "pc2"])?;
        for (tag, pts) in [("teacher", &t), ("student", &s)] {
            for p in pts.iter() {
                w.write_record([tag.to_string(), p[0].to_string(), p[1].to_string()])?;
            }
        }
        w.flush()?;
    }
    Ok(DivergenceReport {
        samples: teacher.len().min(student.len()),
        kl: histogram_kl(&t, &s, KL_BINS)?,
        direction: KL_DIRECTION.into(),
        bins: KL_BINS,
        explained: proj.pca.explained,
        rank_deficient: proj.pca.rank_deficient,
    })
}

/// Version tag of the learning-curve columns.
pub const CURVE_SCHEMA: &str = "curve/1";

/// One learning-curve row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// Student environment steps so far.
    pub timestep: u64,
    pub success_rate: f64,
    pub steps_taken: f64,
    pub suboptimal_demo_rate: f64,
    pub teacher_success_rate: f64,
}

/// Writes `rows` as CSV with a header.
pub fn write_curve<W: Write>(w: W, rows: &[CurveRow]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(w);
    if rows.is_empty() {
        w.write_record(["timestep", "success_rate", "steps_taken", "suboptimal_demo_rate", "teacher_success_rate"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_curve(path: &Path, rows: &[CurveRow]) -> Result<(), MetricsError> {
    write_curve(std::fs::File::create(path)?, rows)
}

pub fn load_curve(path: &Path) -> Result<Vec<CurveRow>, MetricsError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests;
