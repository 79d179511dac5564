use skillstart::experiment::{
    read_csv, summarize, write_outputs, Experiment, ExperimentConfig, Method, ResultRow, SummaryRow, TrialOutcome,
};
use skillstart::plot::parse_bars;
use skillstart::skill::SkillKind;
use skillstart::EnvFamily;

use TrialOutcome::*;

fn row(method: Method, family: EnvFamily, seed: u64, outcomes: &[TrialOutcome]) -> ResultRow {
    ResultRow::new(method, family, SkillKind::Grasp, seed, outcomes)
}

fn fixture() -> Vec<ResultRow> {
    vec![
        row(Method::Ours, EnvFamily::F4, 0, &[Success, Success, Collision, NoStart]),
        row(Method::Ours, EnvFamily::F4, 1, &[Success, PlanCollision, Collision, Timeout]),
        row(Method::Naive, EnvFamily::F4, 0, &[LostSight, PlanCollision, PlanCollision, Success]),
        row(Method::Naive, EnvFamily::F1, 0, &[Success, Success, Success, PlanInfeasible]),
    ]
}

#[test]
fn counts_cover_every_trial() {
    for r in fixture() {
        assert_eq!(r.successes + r.failures(), r.n_scenes);
    }
    let r = &fixture()[2];
    assert_eq!((r.lost_sight, r.plan_collision, r.successes), (1, 2, 1));
}

#[test]
fn summary_matches_hand_computed_statistics() {
    let s = summarize(&fixture());
    assert_eq!(s.len(), 3);
    let ours = s.iter().find(|r| r.method == Method::Ours).unwrap();
    // Rates 0.5 and 0.25: mean 0.375, population std 0.125.
    assert_eq!(ours.n_seeds, 2);
    assert!((ours.success_mean - 0.375).abs() < 1e-15);
    assert!((ours.success_std - 0.125).abs() < 1e-15);
    assert!((ours.plan_collision_mean - 0.125).abs() < 1e-15);
    assert!((ours.no_start_mean - 0.125).abs() < 1e-15);
    let naive_f4 = s.iter().find(|r| r.method == Method::Naive && r.family == EnvFamily::F4).unwrap();
    assert_eq!((naive_f4.success_mean, naive_f4.success_std, naive_f4.plan_collision_mean), (0.25, 0.0, 0.5));
}

#[test]
fn outputs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let rows = fixture();
    let summary = write_outputs(&cfg, &rows, dir.path()).unwrap();
    let back: Vec<ResultRow> = read_csv(&dir.path().join("results.csv")).unwrap();
    assert_eq!(back, rows);
    let sback: Vec<SummaryRow> = read_csv(&dir.path().join("summary.csv")).unwrap();
    assert_eq!(sback, summary);
    let cfg_back = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(cfg_back, cfg);

    let svg = std::fs::read_to_string(dir.path().join("plots/grasp_success.svg")).unwrap();
    let bars = parse_bars(&svg);
    assert_eq!(bars.len(), summary.len());
    for s in &summary {
        assert!(bars
            .iter()
            .any(|b| b.0 == s.method.name() && b.1 == format!("{:?}", s.family) && b.2 == s.success_mean));
    }
}

#[test]
fn config_survives_toml() {
    let cfg = ExperimentConfig {
        families: vec![EnvFamily::F2, EnvFamily::F5],
        methods: vec![Method::Naive, Method::EefOnly],
        seeds: vec![3, 9],
        scenes_per_family: 7,
        ..ExperimentConfig::default()
    };
    let s = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&s).unwrap(), cfg);
    assert!(ExperimentConfig::from_toml("methods = [\"nope\"]").is_err());
}

#[test]
fn empty_method_list_is_rejected() {
    let cfg = ExperimentConfig {
        methods: vec![],
        ..ExperimentConfig::default()
    };
    assert!(cfg.validate().is_err());
    assert!(Experiment::new(cfg, "/nonexistent").is_err());
}

#[test]
fn unlearned_runs_are_reproducible() {
    let cfg = ExperimentConfig {
        families: vec![EnvFamily::F1, EnvFamily::F3],
        methods: vec![Method::Naive],
        seeds: vec![0, 1],
        scenes_per_family: 3,
        ..ExperimentConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let a = Experiment::new(cfg.clone(), dir.path()).unwrap().run().unwrap();
    let b = Experiment::new(cfg, dir.path()).unwrap().run().unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    assert!(a.iter().all(|r| r.n_scenes == 3));
}
