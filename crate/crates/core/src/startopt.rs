//! Start-configuration optimization: maximize a learned logit over joint
//! angles subject to joint limits and clearance against a coarse obstacle map.

use serde::{Deserialize, Serialize};

use crate::arm::{ArmModel, Fk, JointConfig, CAMERA_HALF_ANGLE};
use crate::error::{Error, Result};
use crate::geom::{Aabb, Shape, Vec2};
use crate::scene::LabeledPointCloud;
use crate::seed::{self, tag};
use crate::skill::{sample_start_config, CollisionWorld, START_HEADING_RANGE};

pub const BOX_MARGIN: f64 = 0.02;

/// Coarse planning map: one inflated axis-aligned rectangle per observed
/// obstacle id plus the table half-plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownObstacles {
    pub boxes: Vec<Aabb>,
    pub table_y: f64,
    #[serde(skip)]
    shapes: Vec<Shape>,
}

impl KnownObstacles {
    pub fn new(boxes: Vec<Aabb>, table_y: f64) -> Self {
        let shapes = boxes.iter().map(Aabb::to_shape).collect();
        KnownObstacles {
            boxes,
            table_y,
            shapes,
        }
    }

    /// Bounding rectangle of each obstacle id's points, inflated by `margin`.
    pub fn from_observation_with_margin(obs: &LabeledPointCloud, table_y: f64, margin: f64) -> Self {
        let mut ids: Vec<usize> = obs.obstacle_points.iter().map(|&(_, id)| id).collect();
        ids.sort_unstable();
        ids.dedup();
        let boxes = ids
            .iter()
            .filter_map(|&id| {
                Aabb::of_points(obs.obstacle_points.iter().filter(|p| p.1 == id).map(|p| p.0))
                    .map(|b| b.inflate(margin))
            })
            .collect();
        KnownObstacles::new(boxes, table_y)
    }

    pub fn from_observation(obs: &LabeledPointCloud, table_y: f64) -> Self {
        Self::from_observation_with_margin(obs, table_y, BOX_MARGIN)
    }

    fn shapes_owned(&self) -> Vec<Shape> {
        self.boxes.iter().map(Aabb::to_shape).collect()
    }

    /// Min clearance over links and boxes, and over joints against the table.
    pub fn min_clearance(&self, arm: &ArmModel, fk: &Fk) -> f64 {
        let shapes = if self.shapes.len() == self.boxes.len() {
            std::borrow::Cow::Borrowed(&self.shapes[..])
        } else {
            std::borrow::Cow::Owned(self.shapes_owned())
        };
        let links = arm
            .clearance_from_fk(fk, &shapes)
            .into_iter()
            .flatten()
            .fold(f64::INFINITY, f64::min);
        fk.joints
            .iter()
            .skip(1)
            .map(|p| p.y - self.table_y + arm.link_radius)
            .fold(links, f64::min)
    }
}

impl CollisionWorld for KnownObstacles {
    fn collides(&self, arm: &ArmModel, fk: &Fk) -> bool {
        if self.shapes.len() == self.boxes.len() {
            arm.fk_in_collision(fk, &self.shapes, self.table_y)
        } else {
            arm.fk_in_collision(fk, &self.shapes_owned(), self.table_y)
        }
    }
}

/// Clearance constraint values `c >= 0` and their gradients with respect to
/// `q`: one per (link, box) pair in link-major order, then one per moving
/// joint position against the table.
pub fn clearance_constraints(
    arm: &ArmModel,
    q: &[f64],
    known: &KnownObstacles,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let fk = arm.forward_kinematics(q)?;
    let shapes = known.shapes_owned();
    let n = arm.dof();
    let mut values = Vec::new();
    let mut grads = Vec::new();
    for l in 1..=n {
        let (a, b) = (fk.joints[l - 1], fk.joints[l]);
        for s in &shapes {
            let c = s.segment_contact(a, b);
            values.push(c.distance - arm.link_radius);
            let p = a.lerp(b, c.t);
            let jac = fk.point_jacobian(l, p);
            grads.push(jac.iter().map(|d| c.normal.dot(*d)).collect());
        }
    }
    for i in 1..=n {
        let p = fk.joints[i];
        values.push(p.y - known.table_y + arm.link_radius);
        grads.push(fk.point_jacobian(i, p).iter().map(|d| d.y).collect());
    }
    Ok((values, grads))
}

/// View constraint values `c >= 0` and gradients: the target inside the
/// camera cone (`h . d - cos(half_angle) |d|`, with `h` the heading unit
/// vector and `d` the end-effector-to-target vector), then the heading
/// range `pi - heading` and `pi + heading`.
pub fn view_constraints(
    arm: &ArmModel,
    q: &[f64],
    target: Vec2,
    half_angle: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let fk = arm.forward_kinematics(q)?;
    let n = arm.dof();
    let p = fk.ee();
    let d = target - p;
    let dn = d.norm().max(1e-12);
    let h = Vec2::from_angle(fk.heading);
    let cos_a = half_angle.cos();
    let cone = h.dot(d) - cos_a * dn;
    let dc_dp = -h + d * (cos_a / dn);
    let dc_dth = h.rot90().dot(d);
    let jac = fk.point_jacobian(n, p);
    let cone_grad = jac.iter().map(|j| dc_dp.dot(*j) + dc_dth).collect();
    let values = vec![cone, START_HEADING_RANGE - fk.heading, START_HEADING_RANGE + fk.heading];
    let grads = vec![cone_grad, vec![-1.0; n], vec![1.0; n]];
    Ok((values, grads))
}

/// A differentiable objective to maximize over joint angles.
pub trait StartObjective {
    fn logit(&self, q: &[f64]) -> Result<f64>;
    fn logit_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub n_starts: usize,
    pub max_iterations: usize,
    pub step_tol: f64,
    pub mu0: f64,
    pub mu_max: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    pub initial_step: f64,
    pub max_step: f64,
    pub feasibility_tol: f64,
    /// Inner iterations between multiplier updates.
    pub inner_iterations: usize,
    pub box_margin: f64,
    /// Treat the camera cone and heading range as constraints during the
    /// solve, not only when selecting among finishers.
    pub view_constraint: bool,
    /// Clearance the solver keeps from the coarse map (meters); the
    /// feasibility audit still only requires zero.
    pub clearance_margin: f64,
    /// Angle (radians) by which the solver's cone is narrower than the camera's.
    pub cone_margin: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            n_starts: 3,
            max_iterations: 300,
            step_tol: 1e-5,
            mu0: 10.0,
            mu_max: 1e8,
            armijo_c: 1e-4,
            shrink: 0.5,
            initial_step: 0.05,
            max_step: 1.0,
            feasibility_tol: 1e-6,
            inner_iterations: 25,
            box_margin: BOX_MARGIN,
            view_constraint: true,
            clearance_margin: 0.06,
            cone_margin: 0.2,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_starts > 0
            && self.max_iterations > 0
            && self.step_tol > 0.0
            && self.mu0 > 0.0
            && self.mu_max >= self.mu0
            && self.armijo_c > 0.0
            && self.armijo_c < 1.0
            && self.shrink > 0.0
            && self.shrink < 1.0
            && self.initial_step > 0.0
            && self.max_step >= self.initial_step
            && self.feasibility_tol >= 0.0
            && self.inner_iterations > 0
            && self.box_margin >= 0.0
            && self.clearance_margin >= 0.0
            && (0.0..CAMERA_HALF_ANGLE).contains(&self.cone_margin);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid optimizer config {self:?}")))
        }
    }
}

/// Outcome of one optimization start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    pub q_init: JointConfig,
    pub q_final: JointConfig,
    pub logit_init: f64,
    pub logit: f64,
    pub iterations: usize,
    pub min_clearance: f64,
    pub limit_violation: f64,
    pub sees_target: bool,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub q_star: JointConfig,
    pub score: f64,
    pub logit: f64,
    pub max_limit_violation: f64,
    pub min_clearance: f64,
    pub feasible: bool,
    /// True when no finisher was feasible and the best initial sample is returned.
    pub fallback: bool,
    pub iterations: usize,
    pub starts_tried: usize,
    pub starts: Vec<StartOutcome>,
}

/// Logistic function kept strictly inside (0, 1) where f64 would round.
fn sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn project(arm: &ArmModel, q: &mut [f64]) {
    arm.clamp_to_limits(q);
}

struct Augmented<'a, O: ?Sized> {
    obj: &'a O,
    arm: &'a ArmModel,
    known: &'a KnownObstacles,
    target: Option<Vec2>,
    clearance_margin: f64,
    half_angle: f64,
    lambda: Vec<f64>,
    mu: f64,
}

impl<O: StartObjective + ?Sized> Augmented<'_, O> {
    fn penalty(&self, c: &[f64]) -> f64 {
        c.iter()
            .zip(&self.lambda)
            .map(|(&c, &l)| {
                let v = (-c).max(0.0);
                l * v + 0.5 * self.mu * v * v
            })
            .sum()
    }

    fn constraints(&self, q: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let (mut c, mut g) = clearance_constraints(self.arm, q, self.known)?;
        for v in &mut c {
            *v -= self.clearance_margin;
        }
        if let Some(t) = self.target {
            let (cv, gv) = view_constraints(self.arm, q, t, self.half_angle)?;
            c.extend(cv);
            g.extend(gv);
        }
        Ok((c, g))
    }

    fn value(&self, q: &[f64]) -> Result<f64> {
        let (c, _) = self.constraints(q)?;
        Ok(-self.obj.logit(q)? + self.penalty(&c))
    }

    fn value_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (logit, gl) = self.obj.logit_grad(q)?;
        let (c, gc) = self.constraints(q)?;
        let mut g: Vec<f64> = gl.iter().map(|v| -v).collect();
        for ((&ci, gi), &l) in c.iter().zip(&gc).zip(&self.lambda) {
            let v = (-ci).max(0.0);
            if v > 0.0 {
                let w = l + self.mu * v;
                for (gj, d) in g.iter_mut().zip(gi) {
                    *gj -= w * d;
                }
            }
        }
        Ok((-logit + self.penalty(&c), g, c))
    }
}

/// Runs the augmented-Lagrangian projected-gradient loop from `q0`, with
/// view constraints towards `target` if given. Returns the final
/// configuration and the number of gradient evaluations.
pub fn optimize_from<O: StartObjective + ?Sized>(
    obj: &O,
    arm: &ArmModel,
    known: &KnownObstacles,
    q0: &[f64],
    target: Option<Vec2>,
    cfg: &OptConfig,
) -> Result<(Vec<f64>, usize)> {
    cfg.validate()?;
    if q0.len() != arm.dof() {
        return Err(Error::DimensionMismatch {
            expected: arm.dof(),
            got: q0.len(),
        });
    }
    let n_c = known.boxes.len() * arm.dof() + arm.dof() + if target.is_some() { 3 } else { 0 };
    let mut aug = Augmented {
        obj,
        arm,
        known,
        target,
        clearance_margin: cfg.clearance_margin,
        half_angle: CAMERA_HALF_ANGLE - cfg.cone_margin,
        lambda: vec![0.0; n_c],
        mu: cfg.mu0,
    };
    let mut q = q0.to_vec();
    project(arm, &mut q);
    let mut alpha = cfg.initial_step;
    let mut iters = 0;
    while iters < cfg.max_iterations {
        let mut converged = false;
        for _ in 0..cfg.inner_iterations {
            if iters >= cfg.max_iterations {
                break;
            }
            let (f, g, _) = aug.value_grad(&q)?;
            iters += 1;
            let mut step_norm;
            loop {
                let mut cand: Vec<f64> = q.iter().zip(&g).map(|(x, d)| x - alpha * d).collect();
                project(arm, &mut cand);
                let dir: f64 = cand.iter().zip(&q).zip(&g).map(|((c, x), d)| (c - x) * d).sum();
                step_norm = cand.iter().zip(&q).map(|(c, x)| (c - x) * (c - x)).sum::<f64>().sqrt();
                if step_norm < cfg.step_tol {
                    q = cand;
                    break;
                }
                let fc = aug.value(&cand)?;
                if fc <= f + cfg.armijo_c * dir {
                    q = cand;
                    alpha = (alpha * 2.0).min(cfg.max_step);
                    break;
                }
                alpha *= cfg.shrink;
                if alpha < 1e-14 {
                    step_norm = 0.0;
                    break;
                }
            }
            if step_norm < cfg.step_tol {
                converged = true;
                break;
            }
        }
        let (c, _) = aug.constraints(&q)?;
        let viol = c.iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max);
        if converged && viol <= cfg.feasibility_tol {
            break;
        }
        for (l, &ci) in aug.lambda.iter_mut().zip(&c) {
            *l = (*l + aug.mu * (-ci).max(0.0)).max(0.0);
        }
        aug.mu = (aug.mu * 2.0).min(cfg.mu_max);
        alpha = alpha.max(cfg.initial_step * 1e-3);
    }
    Ok((q, iters))
}

/// Feasibility re-audit of a start: limits, clearance on the coarse map,
/// heading range and camera cone.
pub fn audit_start(
    arm: &ArmModel,
    known: &KnownObstacles,
    target: Vec2,
    q: &[f64],
    tol: f64,
) -> Result<(bool, f64, f64, bool)> {
    let fk = arm.forward_kinematics(q)?;
    let viol = arm.limit_violation(q);
    let shapes: Vec<Shape> = known.boxes.iter().map(Aabb::to_shape).collect();
    let link_min = arm
        .clearance(q, &shapes)?
        .into_iter()
        .flatten()
        .fold(f64::INFINITY, f64::min);
    let table_min = fk
        .joints
        .iter()
        .skip(1)
        .map(|p| p.y - known.table_y + arm.link_radius)
        .fold(f64::INFINITY, f64::min);
    let min_c = link_min.min(table_min);
    let sees = fk.sees(target, CAMERA_HALF_ANGLE) && fk.heading.abs() <= START_HEADING_RANGE;
    Ok((viol <= tol && min_c >= -tol && sees, min_c, viol, sees))
}

/// Multi-start optimization from given initial configurations.
pub fn solve_from_inits<O: StartObjective + ?Sized>(
    obj: &O,
    arm: &ArmModel,
    known: &KnownObstacles,
    target: Vec2,
    inits: &[Vec<f64>],
    cfg: &OptConfig,
) -> Result<OptResult> {
    if inits.is_empty() {
        return Err(Error::NoStart("no initial configuration".into()));
    }
    let mut starts = Vec::with_capacity(inits.len());
    for q0 in inits {
        let logit_init = obj.logit(q0)?;
        let (q, iterations) = optimize_from(obj, arm, known, q0, cfg.view_constraint.then_some(target), cfg)?;
        let logit = obj.logit(&q)?;
        let (feasible, min_clearance, limit_violation, sees_target) =
            audit_start(arm, known, target, &q, cfg.feasibility_tol)?;
        starts.push(StartOutcome {
            q_init: JointConfig(q0.clone()),
            q_final: JointConfig(q),
            logit_init,
            logit,
            iterations,
            min_clearance,
            limit_violation,
            sees_target,
            feasible,
        });
    }
    let iterations = starts.iter().map(|s| s.iterations).sum();
    let best = starts
        .iter()
        .enumerate()
        .filter(|(_, s)| s.feasible)
        .max_by(|a, b| a.1.logit.total_cmp(&b.1.logit).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    let (q_star, logit, feasible, fallback) = match best {
        Some(i) => (starts[i].q_final.clone(), starts[i].logit, true, false),
        None => {
            let (_, s) = starts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.logit_init.total_cmp(&b.1.logit_init).then(b.0.cmp(&a.0)))
                .expect("nonempty");
            (s.q_init.clone(), s.logit_init, false, true)
        }
    };
    let (_, min_clearance, max_limit_violation, _) =
        audit_start(arm, known, target, &q_star, cfg.feasibility_tol)?;
    Ok(OptResult {
        q_star,
        score: sigmoid(logit),
        logit,
        max_limit_violation,
        min_clearance,
        feasible,
        fallback,
        iterations,
        starts_tried: starts.len(),
        starts,
    })
}

/// Seeds of the initial samples of [`solve_start`].
pub fn init_seed(seed: u64, i: usize) -> u64 {
    seed::derive(seed, &[tag("opt-init"), i as u64])
}

/// Draws `cfg.n_starts` initial configurations with the start sampler on
/// the coarse map and optimizes each.
pub fn solve_start<O: StartObjective + ?Sized>(
    obj: &O,
    obs: &LabeledPointCloud,
    arm: &ArmModel,
    known: &KnownObstacles,
    cfg: &OptConfig,
    seed: u64,
) -> Result<OptResult> {
    let target = obs.target_centroid().ok_or(Error::EmptyTarget)?;
    let mut inits = Vec::with_capacity(cfg.n_starts);
    for i in 0..cfg.n_starts {
        match sample_start_config(arm, known, target, init_seed(seed, i)) {
            Ok(q) => inits.push(q.0),
            Err(Error::Unsatisfiable(m)) => log::warn!("optimizer start {i}: {m}"),
            Err(e) => return Err(e),
        }
    }
    if inits.is_empty() {
        return Err(Error::NoStart("start sampler found no configuration".into()));
    }
    solve_from_inits(obj, arm, known, target, &inits, cfg)
}
