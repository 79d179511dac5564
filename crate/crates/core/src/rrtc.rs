//! Bidirectional RRT-Connect in joint space against the coarse obstacle map,
//! with shortcut smoothing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{ArmModel, JointConfig};
use crate::error::{Error, Result};
use crate::seed;
use crate::skill::CollisionWorld;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub step_size: f64,
    pub max_iterations: usize,
    pub resolution: f64,
    pub shortcut_passes: usize,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            step_size: 0.1,
            max_iterations: 20_000,
            resolution: 0.02,
            shortcut_passes: 100,
            seed: 0,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.resolution > 0.0) || self.resolution > self.step_size {
            return Err(Error::InvalidParameter(format!("invalid plan config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Path(pub Vec<JointConfig>);

impl Path {
    /// Sum of Euclidean joint-space segment lengths.
    pub fn length(&self) -> f64 {
        self.0.windows(2).map(|w| dist(&w[0], &w[1])).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Infeasible {
    StartInCollision,
    GoalInCollision,
    IterationCap,
    /// The finished path failed the half-resolution re-check.
    AuditFailed,
}

impl std::fmt::Display for Infeasible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Infeasible::StartInCollision => "start in collision",
            Infeasible::GoalInCollision => "goal in collision",
            Infeasible::IterationCap => "iteration cap reached",
            Infeasible::AuditFailed => "path failed the dense audit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanOutcome {
    Path(Path),
    Infeasible(Infeasible),
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + (y - x) * t).collect()
}

/// Within limits and collision-free.
pub fn config_valid<W: CollisionWorld + ?Sized>(arm: &ArmModel, world: &W, q: &[f64]) -> bool {
    arm.within_limits(q) && !world.collides(arm, &arm.fk_unchecked(q))
}

/// Checks the straight segment at spacing no larger than `resolution`,
/// excluding `a`.
pub fn edge_valid<W: CollisionWorld + ?Sized>(arm: &ArmModel, world: &W, a: &[f64], b: &[f64], resolution: f64) -> bool {
    let n = (dist(a, b) / resolution).ceil().max(1.0) as usize;
    (1..=n).all(|i| config_valid(arm, world, &lerp(a, b, i as f64 / n as f64)))
}

/// Independent dense audit: every configuration on the path's segments, at
/// `resolution` spacing, is valid.
pub fn audit_path<W: CollisionWorld + ?Sized>(arm: &ArmModel, world: &W, path: &Path, resolution: f64) -> bool {
    match path.0.first() {
        None => false,
        Some(q0) => {
            config_valid(arm, world, q0)
                && path.0.windows(2).all(|w| edge_valid(arm, world, &w[0], &w[1], resolution))
        }
    }
}

/// Splits segments longer than `step` into equal pieces.
pub fn densify(path: &[Vec<f64>], step: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(path.len());
    if let Some(first) = path.first() {
        out.push(first.clone());
    }
    for w in path.windows(2) {
        let n = (dist(&w[0], &w[1]) / step).ceil().max(1.0) as usize;
        for i in 1..n {
            out.push(lerp(&w[0], &w[1], i as f64 / n as f64));
        }
        out.push(w[1].clone());
    }
    out
}

struct Tree {
    nodes: Vec<Vec<f64>>,
    parent: Vec<usize>,
}

impl Tree {
    fn new(root: Vec<f64>) -> Self {
        Tree {
            nodes: vec![root],
            parent: vec![usize::MAX],
        }
    }

    fn nearest(&self, q: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = n.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    fn branch(&self, mut i: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        while i != usize::MAX {
            out.push(self.nodes[i].clone());
            i = self.parent[i];
        }
        out
    }
}

#[derive(PartialEq)]
enum Extend {
    Reached,
    Advanced,
    Trapped,
}

fn extend<W: CollisionWorld + ?Sized>(
    arm: &ArmModel,
    world: &W,
    tree: &mut Tree,
    q: &[f64],
    cfg: &PlanConfig,
) -> Extend {
    let near = tree.nearest(q);
    let qn = &tree.nodes[near];
    let d = dist(qn, q);
    let (target, reached) = if d <= cfg.step_size {
        (q.to_vec(), true)
    } else {
        (lerp(qn, q, cfg.step_size / d), false)
    };
    if !edge_valid(arm, world, qn, &target, cfg.resolution) {
        return Extend::Trapped;
    }
    tree.nodes.push(target);
    tree.parent.push(near);
    if reached {
        Extend::Reached
    } else {
        Extend::Advanced
    }
}

fn connect<W: CollisionWorld + ?Sized>(
    arm: &ArmModel,
    world: &W,
    tree: &mut Tree,
    q: &[f64],
    cfg: &PlanConfig,
) -> Extend {
    loop {
        match extend(arm, world, tree, q, cfg) {
            Extend::Advanced => continue,
            r => return r,
        }
    }
}

/// RRT-Connect from `q_start` to `q_goal`, shortcut-smoothed and densified
/// to `step_size`.
pub fn plan<W: CollisionWorld + ?Sized>(
    arm: &ArmModel,
    world: &W,
    q_start: &[f64],
    q_goal: &[f64],
    cfg: &PlanConfig,
) -> Result<PlanOutcome> {
    cfg.validate()?;
    for q in [q_start, q_goal] {
        if q.len() != arm.dof() {
            return Err(Error::DimensionMismatch {
                expected: arm.dof(),
                got: q.len(),
            });
        }
    }
    if !config_valid(arm, world, q_goal) {
        return Ok(PlanOutcome::Infeasible(Infeasible::GoalInCollision));
    }
    if !config_valid(arm, world, q_start) {
        return Ok(PlanOutcome::Infeasible(Infeasible::StartInCollision));
    }
    let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::tag("rrtc")]));
    let mut a = Tree::new(q_start.to_vec());
    let mut b = Tree::new(q_goal.to_vec());
    let mut a_is_start = true;
    let mut raw = None;
    if edge_valid(arm, world, q_start, q_goal, cfg.resolution) {
        raw = Some(vec![q_start.to_vec(), q_goal.to_vec()]);
    }
    let mut it = 0;
    while raw.is_none() && it < cfg.max_iterations {
        it += 1;
        let qr: Vec<f64> = arm.joint_limits.iter().map(|&[lo, hi]| rng.random_range(lo..=hi)).collect();
        if extend(arm, world, &mut a, &qr, cfg) != Extend::Trapped {
            let q_new = a.nodes.last().expect("just added").clone();
            if connect(arm, world, &mut b, &q_new, cfg) == Extend::Reached {
                let mut pa = a.branch(a.nodes.len() - 1);
                pa.reverse();
                let pb = b.branch(b.nodes.len() - 1);
                pa.extend(pb.into_iter().skip(1));
                if !a_is_start {
                    pa.reverse();
                }
                raw = Some(pa);
                break;
            }
        }
        std::mem::swap(&mut a, &mut b);
        a_is_start = !a_is_start;
    }
    let Some(raw) = raw else {
        return Ok(PlanOutcome::Infeasible(Infeasible::IterationCap));
    };
    let smoothed = shortcut_raw(arm, world, raw.clone(), cfg, &mut rng);
    for candidate in [smoothed, raw] {
        let path = Path(densify(&candidate, cfg.step_size).into_iter().map(JointConfig).collect());
        if audit_path(arm, world, &path, cfg.resolution / 2.0) {
            return Ok(PlanOutcome::Path(path));
        }
    }
    Ok(PlanOutcome::Infeasible(Infeasible::AuditFailed))
}

fn shortcut_raw<W: CollisionWorld + ?Sized>(
    arm: &ArmModel,
    world: &W,
    mut path: Vec<Vec<f64>>,
    cfg: &PlanConfig,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    for _ in 0..cfg.shortcut_passes {
        if path.len() < 3 {
            break;
        }
        let i = rng.random_range(0..path.len() - 2);
        let j = rng.random_range(i + 2..path.len());
        let direct = dist(&path[i], &path[j]);
        let current: f64 = path[i..=j].windows(2).map(|w| dist(&w[0], &w[1])).sum();
        if direct <= current && edge_valid(arm, world, &path[i], &path[j], cfg.resolution) {
            path.drain(i + 1..j);
        }
    }
    path
}

/// Shortcut smoothing of an existing path; endpoints are kept and the length
/// never increases.
pub fn shortcut<W: CollisionWorld + ?Sized>(arm: &ArmModel, world: &W, path: &Path, cfg: &PlanConfig) -> Result<Path> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::tag("shortcut")]));
    let raw: Vec<Vec<f64>> = path.0.iter().map(|q| q.0.clone()).collect();
    Ok(Path(shortcut_raw(arm, world, raw, cfg, &mut rng).into_iter().map(JointConfig).collect()))
}
