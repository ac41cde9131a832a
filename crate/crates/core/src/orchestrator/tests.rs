use std::path::Path;

use super::*;
use crate::envs::{Domain, Preset, Tier};

/// A run small enough for unit tests: a few short epochs against an untrained teacher.
fn tiny() -> HintConfig {
    let mut c = HintConfig::preset(Preset { domain: Domain::Marine, tier: Tier::Easy }, false);
    c.workers = 1;
    c.student_timesteps = 120;
    c.env.max_steps = 20;
    c.teacher.hidden = 8;
    c.student.hidden = 8;
    c.student.message = 4;
    c.distill.capacity = 20;
    c.pseudo.n = 20;
    c.pseudo.n_pseudo = 1;
    c.pseudo.workers = 1;
    c.query = QueryConfig { n_query: 2, dataset_budget: 6, initial_demos: 2, simulations: 1, required: 1 };
    c.eval = EvalSettings { epoch_episodes: 2, final_episodes: 2, final_seeds: vec![0], greedy: false };
    c
}

fn seed_teacher(cfg: &HintConfig, run: &Path) {
    let env = Env::new(cfg.env.clone()).unwrap();
    TeacherParams::init(&env, cfg.teacher.hidden, 1).save(&run.join(&cfg.teacher_checkpoint)).unwrap();
}

fn fresh_run(cfg: &HintConfig) -> (tempfile::TempDir, RunManifest) {
    let dir = tempfile::tempdir().unwrap();
    seed_teacher(cfg, dir.path());
    let m = train_hint(cfg, dir.path(), false).unwrap();
    (dir, m)
}

#[test]
fn presets_follow_the_hyperparameter_table() {
    let p = |s: &str| s.parse::<Preset>().unwrap();
    let c = HintConfig::preset(p("marine-medium"), true);
    assert_eq!(c.student_timesteps, 20_000_000);
    assert_eq!((c.query.dataset_budget, c.query.n_query, c.pseudo.n_pseudo, c.workers), (3000, 100, 150, 20));
    let c = HintConfig::preset(p("fc-hard"), true);
    assert_eq!(c.student_timesteps, 70_000_000);
    assert_eq!((c.query.dataset_budget, c.query.n_query, c.pseudo.n_pseudo, c.workers), (4000, 100, 40, 20));
    let c = HintConfig::preset(p("fc-easy"), false);
    assert_eq!(c.student_timesteps, 1_000_000);
    assert_eq!((c.query.dataset_budget, c.query.initial_demos, c.workers), (1000, 100, 10));
    assert_eq!((c.distill.lr, c.distill.alpha, c.distill.capacity), (1e-4, 0.01, 200));
    for name in ["marine-easy", "marine-medium", "marine-hard", "fc-easy", "fc-medium", "fc-hard"] {
        for scale in [false, true] {
            HintConfig::preset(p(name), scale).validate().unwrap();
        }
    }
}

#[test]
fn toml_layers_over_the_named_preset() {
    let c = HintConfig::from_toml("preset = \"marine-medium\"\nseed = 4\n[query]\nn_query = 7\n").unwrap();
    let mut want = HintConfig::preset("marine-medium".parse().unwrap(), false);
    want.seed = 4;
    want.query.n_query = 7;
    assert_eq!(c, want);
    assert_eq!(HintConfig::from_toml("").unwrap(), HintConfig::preset("fc-easy".parse().unwrap(), false));
    assert_eq!(HintConfig::from_toml(&want.to_toml()).unwrap(), want);
}

#[test]
fn bad_toml_is_rejected() {
    for text in [
        "bogus = 1",
        "[query]\nn_querry = 3",
        "preset = \"fc-impossible\"",
        "[query]\ninitial_demos = 5000",
        "[env]\ndomain = \"marine\"",
        "seed = \"zero\"",
        "[ablation]\nuse_filter = true\n[query]\nsimulations = 2\nrequired = 3",
    ] {
        assert!(matches!(HintConfig::from_toml(text), Err(OrchestratorError::Config(_))), "{text}");
    }
}

#[test]
fn hash_and_resume_key() {
    let a = tiny();
    let mut b = a.clone();
    b.student_timesteps *= 2;
    b.workers = 3;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.resume_key(), b.resume_key());
    b.seed = 9;
    assert_ne!(a.resume_key(), b.resume_key());
}

#[test]
fn worker_override_from_environment() {
    let c = tiny();
    std::env::set_var(WORKERS_ENV, "3");
    assert_eq!(c.effective_workers().unwrap(), 3);
    std::env::set_var(WORKERS_ENV, "zero");
    assert!(c.effective_workers().is_err());
    std::env::remove_var(WORKERS_ENV);
    assert_eq!(c.effective_workers().unwrap(), 1);
}

#[test]
fn missing_teacher_is_reported_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    match train_hint(&tiny(), dir.path(), false) {
        Err(e @ OrchestratorError::MissingCheckpoint { .. }) => {
            assert_eq!(e.kind(), "missing_checkpoint");
            assert!(e.to_string().contains("pretrain-teacher"));
        }
        other => panic!("expected a missing checkpoint, got {other:?}"),
    }
}

#[test]
fn epochs_run_the_phases_in_order_until_the_budget() {
    let cfg = tiny();
    let (dir, m) = fresh_run(&cfg);
    assert!(m.rows.len() >= 2);
    assert!(m.rows.last().unwrap().timestep >= cfg.student_timesteps);
    assert!(m.rows[m.rows.len() - 2].timestep < cfg.student_timesteps);
    for (i, r) in m.rows.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
        assert_eq!(r.phases, ["aggregate", "distill", "refine"]);
        assert!(r.pseudo.is_some() && r.aborted.is_none());
        assert_eq!(r.kd.len(), cfg.kd_passes);
        assert!(r.accepted <= r.queries);
        assert!(r.dataset.recent_trajectories <= 4);
        assert!((0.0..=1.0).contains(&r.suboptimal_demo_rate));
    }
    assert!(m.rows.windows(2).all(|w| w[0].timestep < w[1].timestep));
    assert_eq!(m.final_eval.as_ref().unwrap().episodes, 2);
    assert_eq!(m.checkpoints.len(), cfg.keep_checkpoints);
    let on_disk = std::fs::read_dir(dir.path().join("checkpoints")).unwrap().count();
    assert_eq!(on_disk, cfg.keep_checkpoints);
    assert_eq!(crate::metrics::load_curve(&dir.path().join("curve.csv")).unwrap(), m.curve());
    assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
}

#[test]
fn identical_seeds_give_identical_manifests() {
    let cfg = tiny();
    let (_a, ma) = fresh_run(&cfg);
    let mut wide = cfg.clone();
    wide.workers = 2;
    let (_b, mb) = fresh_run(&wide);
    let (ma, mut mb) = (ma.without_timing(), mb.without_timing());
    mb.config_hash = ma.config_hash.clone();
    assert_eq!(ma, mb);
    let mut other = cfg.clone();
    other.seed = 1;
    let (_c, mc) = fresh_run(&other);
    assert_ne!(ma.rows, mc.without_timing().rows);
}

#[test]
fn without_pseudo_rl_the_teacher_is_never_touched() {
    let mut cfg = tiny();
    cfg.ablation.use_pseudo_rl = false;
    let (dir, m) = fresh_run(&cfg);
    let read = |p: &Path| std::fs::read(p).unwrap();
    let original = dir.path().join("teacher");
    for ck in &m.checkpoints {
        for f in ["high.pset", "value.pset", "low0.pset", "low1.pset"] {
            let saved = dir.path().join(ck).join("teacher").join(f);
            assert_eq!(read(&saved), read(&original.join(f)), "{ck}/{f}");
        }
    }
    for r in &m.rows {
        assert_eq!(r.phases, ["aggregate", "distill"]);
        assert!(r.pseudo.is_none());
        assert_eq!(r.teacher_success_rate, m.initial_teacher_success);
    }
}

#[test]
fn plain_dagger_keeps_every_label() {
    let mut cfg = tiny();
    cfg.ablation = AblationFlags { use_filter: false, use_pseudo_rl: false, ..cfg.ablation };
    let (_dir, m) = fresh_run(&cfg);
    for r in &m.rows {
        assert_eq!(r.accepted, r.queries);
        assert_eq!(r.suboptimal_demo_rate, 0.0);
        assert_eq!(r.empty_trajectories, 0);
    }
}

#[test]
fn existing_runs_need_resume() {
    let cfg = tiny();
    let (dir, _) = fresh_run(&cfg);
    assert!(matches!(train_hint(&cfg, dir.path(), false), Err(OrchestratorError::RunDir(_))));
    let mut changed = cfg.clone();
    changed.distill.lr = 1e-3;
    assert!(matches!(train_hint(&changed, dir.path(), true), Err(OrchestratorError::Config(_))));
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let cfg = tiny();
    let (_full, whole) = fresh_run(&cfg);
    let mut short = cfg.clone();
    short.student_timesteps = 50;
    let (dir, first) = fresh_run(&short);
    assert!(first.rows.len() < whole.rows.len());
    let resumed = train_hint(&cfg, dir.path(), true).unwrap();
    assert_eq!(resumed.without_timing(), whole.without_timing());
    // Resuming a finished run only repeats the final evaluation.
    let again = train_hint(&cfg, dir.path(), true).unwrap();
    assert_eq!(again.without_timing(), whole.without_timing());
}

#[test]
fn ablation_writes_all_variants() {
    let mut cfg = tiny();
    cfg.student_timesteps = 30;
    let dir = tempfile::tempdir().unwrap();
    seed_teacher(&cfg, dir.path());
    let res = ablate(&cfg, dir.path()).unwrap();
    assert_eq!(res.iter().map(|r| r.variant.as_str()).collect::<Vec<_>>(), ["full", "no-filter", "no-pseudo", "neither"]);
    for r in &res {
        let curve = crate::metrics::load_curve(&dir.path().join(&r.curve)).unwrap();
        assert!(!curve.is_empty());
        assert!((0.0..=1.0).contains(&r.final_success_rate));
    }
    let saved: Vec<AblationResult> = read_json(&dir.path().join("ablation.json")).unwrap();
    assert_eq!(saved, res);
}

#[test]
fn eval_diagnose_and_inspect_read_a_finished_run() {
    let cfg = tiny();
    let (dir, m) = fresh_run(&cfg);
    let run = dir.path();
    let s = eval_run(&cfg, run, EvalTarget::Student, 3, &[5, 6]).unwrap();
    assert_eq!((s.episodes, s.seeds.len()), (3, 2));
    assert!(run.join("eval-student.json").exists());
    eval_run(&cfg, run, EvalTarget::Teacher, 2, &[0]).unwrap();
    assert!(run.join("eval-teacher.json").exists());

    let d = diagnose(&cfg, run, Some(40)).unwrap();
    assert!(d.kl >= 0.0);
    assert!(run.join("divergence.json").exists() && run.join("divergence_points.csv").exists());

    let ins = inspect_dataset(run).unwrap();
    assert_eq!(ins.epochs.len(), m.rows.len());
    assert_eq!(ins.stats, m.rows.last().unwrap().dataset);
    assert_eq!(ins.checkpoint, m.latest_checkpoint().unwrap());
}

#[test]
fn divergence_errors_are_recognized() {
    assert!(OrchestratorError::Distill(DistillError::NonFinite).is_divergence());
    assert!(!OrchestratorError::Config("x".into()).is_divergence());
}
