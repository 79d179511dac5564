use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use skillstart::afford::{Scorer, ScorerKind};
use skillstart::hgraph::HGraphConfig;
use skillstart::rrtc::{plan, PlanConfig};
use skillstart::scene::{generate_scene, observe};
use skillstart::startopt::{solve_start, KnownObstacles, OptConfig, StartObjective};
use skillstart::{Aabb, ArmModel, EnvFamily, ObsConfig, Vec2};

fn kinematics(c: &mut Criterion) {
    let arm = ArmModel::default();
    let q = [0.4, -0.7, 1.1, 0.3];
    c.bench_function("forward_kinematics", |b| b.iter(|| arm.forward_kinematics(black_box(&q)).unwrap()));
    c.bench_function("key_point_jacobian", |b| b.iter(|| arm.key_point_jacobian(black_box(&q)).unwrap()));
}

fn scorer() -> Scorer {
    let cfg = HGraphConfig {
        hidden: 32,
        ..HGraphConfig::default()
    };
    Scorer::init(ScorerKind::Full, cfg, &ArmModel::default(), 0).unwrap()
}

fn affordance(c: &mut Criterion) {
    let arm = ArmModel::default();
    let s = scorer();
    let scene = generate_scene(EnvFamily::F6, 3).unwrap();
    let obs = observe(&scene, &ObsConfig::default(), 3).unwrap();
    let obj = s.objective(&obs, &arm).unwrap();
    let q = [0.9, 0.2, -0.4, 0.6];
    c.bench_function("scorer_objective", |b| b.iter(|| s.objective(black_box(&obs), &arm).unwrap()));
    c.bench_function("logit", |b| b.iter(|| obj.logit(black_box(&q)).unwrap()));
    c.bench_function("logit_grad", |b| b.iter(|| obj.logit_grad(black_box(&q)).unwrap()));
}

fn solve(c: &mut Criterion) {
    let arm = ArmModel::default();
    let s = scorer();
    let scene = generate_scene(EnvFamily::F4, 5).unwrap();
    let obs = observe(&scene, &ObsConfig::default(), 5).unwrap();
    let known = KnownObstacles::from_observation(&obs, scene.table_y);
    let obj = s.objective(&obs, &arm).unwrap();
    let cfg = OptConfig::default();
    let mut g = c.benchmark_group("solve");
    g.sample_size(10);
    g.bench_function("solve_start_f4", |b| b.iter(|| solve_start(&obj, &obs, &arm, &known, &cfg, 1).unwrap()));
    g.finish();
}

fn planning(c: &mut Criterion) {
    let arm = ArmModel::default();
    let gap = KnownObstacles::new(
        vec![
            Aabb {
                min: Vec2::new(0.75, 0.0),
                max: Vec2::new(0.85, 0.22),
            },
            Aabb {
                min: Vec2::new(0.75, 0.5),
                max: Vec2::new(0.85, 1.6),
            },
        ],
        0.0,
    );
    let (a, b) = ([2.2, 0.0, 0.0, 0.0], [0.55, -0.3, -0.2, -0.1]);
    let mut g = c.benchmark_group("plan");
    g.sample_size(20);
    g.bench_function("rrt_connect_gap", |bch| {
        let mut seed = 0;
        bch.iter(|| {
            seed += 1;
            plan(&arm, &gap, &a, &b, &PlanConfig { seed, ..PlanConfig::default() }).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, kinematics, affordance, solve, planning);
criterion_main!(benches);
