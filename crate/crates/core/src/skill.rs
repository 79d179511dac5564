//! A priori skills: the scripted grasp/place controller, rollout execution
//! through damped-least-squares IK, start sampling and the pose loss.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{ArmModel, Fk, JointConfig, CAMERA_HALF_ANGLE};
use crate::error::{Error, Result};
use crate::geom::{Scene, Shape, Vec2};
use crate::seed;

pub const MAX_STEPS: usize = 200;
pub const MAX_START_REJECTIONS: usize = 5000;
pub const STEP_CLAMP: f64 = 0.02;
pub const ROT_CLAMP: f64 = 0.1;
pub const IK_DAMPING: f64 = 0.01;
pub const NULLSPACE_GAIN: f64 = 0.05;
pub const TABLE_GAIN: f64 = 20.0;
pub const TABLE_MARGIN: f64 = 0.15;
/// Start configurations keep the unwrapped end-effector heading within
/// this bound, so the wrist is never wound a full turn around the target.
pub const START_HEADING_RANGE: f64 = std::f64::consts::PI;
pub const POS_TOLERANCE: f64 = 0.01;
pub const HEADING_TOLERANCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkillKind {
    Grasp,
    Place,
}

impl std::str::FromStr for SkillKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "grasp" => Ok(SkillKind::Grasp),
            "place" => Ok(SkillKind::Place),
            other => Err(Error::InvalidParameter(format!("unknown skill `{other}`"))),
        }
    }
}

impl std::fmt::Display for SkillKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SkillKind::Grasp => "grasp",
            SkillKind::Place => "place",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    None,
    Collision,
    Timeout,
    LostSight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutOutcome {
    pub label: u8,
    pub failure_reason: FailureReason,
    pub trajectory: Vec<JointConfig>,
}

impl RolloutOutcome {
    fn fail(reason: FailureReason, trajectory: Vec<JointConfig>) -> Self {
        RolloutOutcome {
            label: 0,
            failure_reason: reason,
            trajectory,
        }
    }
}

/// Anything the arm can collide with.
pub trait CollisionWorld {
    fn collides(&self, arm: &ArmModel, fk: &Fk) -> bool;
}

impl CollisionWorld for Scene {
    fn collides(&self, arm: &ArmModel, fk: &Fk) -> bool {
        arm.fk_in_collision(fk, &self.obstacles, self.table_y)
    }
}

/// Rejection-samples a collision-free configuration whose camera sees `target`
/// and whose unwrapped heading lies within [`START_HEADING_RANGE`].
pub fn sample_start_config<W: CollisionWorld + ?Sized>(
    arm: &ArmModel,
    world: &W,
    target: Vec2,
    seed: u64,
) -> Result<JointConfig> {
    sample_start_counted(arm, world, target, seed).map(|(q, _)| q)
}

/// As [`sample_start_config`], also returning the number of draws used.
pub fn sample_start_counted<W: CollisionWorld + ?Sized>(
    arm: &ArmModel,
    world: &W,
    target: Vec2,
    seed: u64,
) -> Result<(JointConfig, usize)> {
    let mut rng = seed::rng(seed);
    let mut q = vec![0.0; arm.dof()];
    for draw in 1..=MAX_START_REJECTIONS {
        for (v, [lo, hi]) in q.iter_mut().zip(&arm.joint_limits) {
            *v = rng.random_range(*lo..=*hi);
        }
        let fk = arm.fk_unchecked(&q);
        if (target - fk.ee()).norm() > 1e-9
            && fk.heading.abs() <= START_HEADING_RANGE
            && fk.sees(target, CAMERA_HALF_ANGLE)
            && !world.collides(arm, &fk)
        {
            return Ok((JointConfig(q), draw));
        }
    }
    Err(Error::Unsatisfiable(format!(
        "no start configuration after {MAX_START_REJECTIONS} draws"
    )))
}

/// What a policy observes at each step.
#[derive(Debug, Clone)]
pub struct SkillState {
    pub q: Vec<f64>,
    pub fk: Fk,
    pub gripper_closed: bool,
    pub step: usize,
}

impl SkillState {
    pub fn new(arm: &ArmModel, q: &[f64]) -> Self {
        SkillState {
            q: q.to_vec(),
            fk: arm.fk_unchecked(q),
            gripper_closed: false,
            step: 0,
        }
    }

    pub fn ee(&self) -> Vec2 {
        self.fk.ee()
    }

    pub fn heading(&self) -> f64 {
        self.fk.heading
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Gripper {
    Open,
    Close,
}

/// One control command: displacement and rotation in the end-effector frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub translation: Vec2,
    pub rotation: f64,
    pub gripper: Gripper,
    /// The controller gave up because the target left the camera cone.
    pub lost_sight: bool,
}

impl Action {
    pub fn world_translation(&self, heading: f64) -> Vec2 {
        self.translation.rotate(heading)
    }
}

/// Goal of a task instance, fixed when the episode starts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskGoal {
    pub kind: SkillKind,
    /// Final end-effector position.
    pub position: Vec2,
    /// Final end-effector heading.
    pub heading: f64,
    /// Point the camera must keep in view.
    pub focus: Vec2,
    /// Within this distance of `focus` the view check is waived.
    pub near: f64,
}

impl TaskGoal {
    pub fn new(kind: SkillKind, target: &Shape, ee0: Vec2) -> Self {
        let c = target.centroid();
        match (kind, *target) {
            (SkillKind::Place, Shape::Box { half_extents, .. }) => {
                let n = container_up(target);
                TaskGoal {
                    kind,
                    position: c,
                    heading: (-n).angle(),
                    focus: c,
                    near: half_extents.norm() + 0.12,
                }
            }
            _ => {
                let r = extent(target);
                TaskGoal {
                    kind,
                    position: c,
                    heading: (c - ee0).angle(),
                    focus: c,
                    near: 2.0 * r,
                }
            }
        }
    }

    pub fn reached(&self, ee: Vec2, heading: f64) -> bool {
        (ee - self.position).norm() <= POS_TOLERANCE
            && wrap(heading - self.heading).abs() <= HEADING_TOLERANCE
    }
}

fn extent(s: &Shape) -> f64 {
    match *s {
        Shape::Circle { radius, .. } => radius,
        Shape::Box { half_extents, .. } => half_extents.x.min(half_extents.y),
        Shape::Capsule { radius, .. } => radius,
    }
}

/// Outward normal of a container's mouth (local +y).
pub fn container_up(target: &Shape) -> Vec2 {
    match *target {
        Shape::Box { angle, .. } => Vec2::new(0.0, 1.0).rotate(angle),
        _ => Vec2::new(0.0, 1.0),
    }
}

pub fn wrap(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let r = (a + std::f64::consts::PI).rem_euclid(t) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI {
        r + t
    } else {
        r
    }
}

/// Per-episode information a policy receives when a rollout starts.
#[derive(Debug, Clone, Copy)]
pub struct Episode<'a> {
    pub arm: &'a ArmModel,
    pub scene: &'a Scene,
    pub goal: TaskGoal,
}

/// A closed-loop skill controller.
pub trait SkillPolicy {
    type Memory;
    fn begin(&self, episode: &Episode<'_>, state: &SkillState) -> Self::Memory;
    fn act(&self, episode: &Episode<'_>, memory: &mut Self::Memory, state: &SkillState) -> Action;
}

/// Waypoint controller with privileged scene knowledge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedPolicy {
    pub step_clamp: f64,
    pub rot_clamp: f64,
    pub half_angle: f64,
}

impl Default for ScriptedPolicy {
    fn default() -> Self {
        ScriptedPolicy {
            step_clamp: STEP_CLAMP,
            rot_clamp: ROT_CLAMP,
            half_angle: CAMERA_HALF_ANGLE,
        }
    }
}

/// Scripted controller progress: waypoints still to visit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedMemory {
    pub waypoints: Vec<Vec2>,
    pub next: usize,
}

impl ScriptedPolicy {
    pub fn waypoints(episode: &Episode<'_>, ee0: Vec2) -> Vec<Vec2> {
        let target = &episode.scene.target;
        let c = target.centroid();
        match episode.goal.kind {
            SkillKind::Grasp => {
                let u = (ee0 - c).normalized().unwrap_or(Vec2::new(0.0, 1.0));
                vec![c + u * (1.5 * extent(target)), c]
            }
            SkillKind::Place => {
                let n = container_up(target);
                let mouth = match *target {
                    Shape::Box { half_extents, .. } => c + n * half_extents.y,
                    _ => c,
                };
                vec![mouth + n * 0.1, c]
            }
        }
    }
}

impl SkillPolicy for ScriptedPolicy {
    type Memory = ScriptedMemory;

    fn begin(&self, episode: &Episode<'_>, state: &SkillState) -> ScriptedMemory {
        ScriptedMemory {
            waypoints: Self::waypoints(episode, state.ee()),
            next: 0,
        }
    }

    fn act(&self, episode: &Episode<'_>, mem: &mut ScriptedMemory, state: &SkillState) -> Action {
        let ee = state.ee();
        let heading = state.heading();
        let goal = &episode.goal;
        if goal.reached(ee, heading) {
            return Action {
                translation: Vec2::ZERO,
                rotation: 0.0,
                gripper: match goal.kind {
                    SkillKind::Grasp => Gripper::Close,
                    SkillKind::Place => Gripper::Open,
                },
                lost_sight: false,
            };
        }
        if (goal.focus - ee).norm() > goal.near && !state.fk.sees(goal.focus, self.half_angle) {
            return Action {
                translation: Vec2::ZERO,
                rotation: 0.0,
                gripper: Gripper::Open,
                lost_sight: true,
            };
        }
        while mem.next + 1 < mem.waypoints.len()
            && (mem.waypoints[mem.next] - ee).norm() <= POS_TOLERANCE
        {
            mem.next += 1;
        }
        let mut d = mem.waypoints[mem.next] - ee;
        let n = d.norm();
        if n > self.step_clamp {
            d = d * (self.step_clamp / n);
        }
        let rot = wrap(goal.heading - heading).clamp(-self.rot_clamp, self.rot_clamp);
        Action {
            translation: d.rotate(-heading),
            rotation: rot,
            gripper: match goal.kind {
                SkillKind::Grasp => Gripper::Open,
                SkillKind::Place => Gripper::Close,
            },
            lost_sight: false,
        }
    }
}

/// Joint update for a desired end-effector twist by damped least squares.
///
/// Joints that would leave their limits are locked at the limit and the
/// remaining task is re-solved with the free joints. The redundant direction
/// pulls free joints toward the middle of their range and lifts joints that
/// come close to the table.
pub fn dls_step(
    arm: &ArmModel,
    q: &[f64],
    fk: &Fk,
    dx: Vec2,
    dtheta: f64,
    table_y: f64,
) -> Vec<f64> {
    let damping = IK_DAMPING;
    let jac: Vec<Vector3<f64>> = arm
        .ee_jacobian(fk)
        .iter()
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect();
    let l = jac.len();
    let task = Vector3::new(dx.x, dx.y, dtheta);
    let mut locked = vec![false; l];
    let mut dq = vec![0.0; l];
    for _ in 0..=l {
        let mut rhs = task;
        let mut jjt = Matrix3::<f64>::identity() * (damping * damping);
        let mut jz = Vector3::zeros();
        let mut z = vec![0.0; l];
        for j in 0..l {
            if locked[j] {
                rhs -= jac[j] * dq[j];
            } else {
                jjt += jac[j] * jac[j].transpose();
                let [lo, hi] = arm.joint_limits[j];
                z[j] = NULLSPACE_GAIN * (0.5 * (lo + hi) - q[j]);
                for p in &fk.joints[j + 1..] {
                    let gap = table_y + TABLE_MARGIN - p.y;
                    if gap > 0.0 {
                        z[j] += TABLE_GAIN * gap * (*p - fk.joints[j]).rot90().y;
                    }
                }
                jz += jac[j] * z[j];
            }
        }
        let Some(ch) = jjt.cholesky() else {
            return vec![0.0; l];
        };
        let y = ch.solve(&(rhs - jz));
        let mut violated = false;
        for j in 0..l {
            if locked[j] {
                continue;
            }
            dq[j] = jac[j].dot(&y) + z[j];
            let [lo, hi] = arm.joint_limits[j];
            let next = q[j] + dq[j];
            if next > hi || next < lo {
                dq[j] = next.clamp(lo, hi) - q[j];
                locked[j] = true;
                violated = true;
            }
        }
        if !violated {
            break;
        }
    }
    dq
}

/// Whether the task predicate holds in the final state.
fn task_succeeded(kind: SkillKind, scene: &Scene, goal: &TaskGoal, state: &SkillState) -> bool {
    match kind {
        SkillKind::Grasp => state.gripper_closed && goal.reached(state.ee(), state.heading()),
        SkillKind::Place => scene.target.contains(state.ee()),
    }
}

/// Rolls out `policy` from `q0` against the true scene geometry.
pub fn execute_skill<P: SkillPolicy>(
    arm: &ArmModel,
    scene: &Scene,
    q0: &[f64],
    kind: SkillKind,
    policy: &P,
    max_steps: usize,
) -> Result<RolloutOutcome> {
    execute_skill_traced(arm, scene, q0, kind, policy, max_steps, |_, _, _| {})
}

/// As [`execute_skill`], calling `trace(state, action, goal)` before each step is applied.
pub fn execute_skill_traced<P: SkillPolicy>(
    arm: &ArmModel,
    scene: &Scene,
    q0: &[f64],
    kind: SkillKind,
    policy: &P,
    max_steps: usize,
    mut trace: impl FnMut(&SkillState, &Action, &TaskGoal),
) -> Result<RolloutOutcome> {
    if q0.len() != arm.dof() {
        return Err(Error::DimensionMismatch {
            expected: arm.dof(),
            got: q0.len(),
        });
    }
    if !arm.within_limits(q0) {
        return Err(Error::InvalidParameter("start outside joint limits".into()));
    }
    let mut state = SkillState::new(arm, q0);
    if scene.collides(arm, &state.fk) {
        return Ok(RolloutOutcome::fail(FailureReason::Collision, Vec::new()));
    }
    if kind == SkillKind::Place {
        state.gripper_closed = true;
    }
    let goal = TaskGoal::new(kind, &scene.target, state.ee());
    let episode = Episode { arm, scene, goal };
    let mut memory = policy.begin(&episode, &state);
    let mut trajectory = vec![JointConfig(q0.to_vec())];
    for step in 0..max_steps {
        state.step = step;
        let action = policy.act(&episode, &mut memory, &state);
        trace(&state, &action, &goal);
        if action.lost_sight {
            return Ok(RolloutOutcome::fail(FailureReason::LostSight, trajectory));
        }
        let release = kind == SkillKind::Place && action.gripper == Gripper::Open;
        if release {
            state.gripper_closed = false;
            if task_succeeded(kind, scene, &goal, &state) {
                return Ok(RolloutOutcome {
                    label: 1,
                    failure_reason: FailureReason::None,
                    trajectory,
                });
            }
            return Ok(RolloutOutcome::fail(FailureReason::Timeout, trajectory));
        }
        if kind == SkillKind::Grasp {
            state.gripper_closed = action.gripper == Gripper::Close;
            if task_succeeded(kind, scene, &goal, &state) {
                return Ok(RolloutOutcome {
                    label: 1,
                    failure_reason: FailureReason::None,
                    trajectory,
                });
            }
        }
        let dx = action.world_translation(state.heading());
        let dq = dls_step(arm, &state.q, &state.fk, dx, action.rotation, scene.table_y);
        for (q, d) in state.q.iter_mut().zip(&dq) {
            *q += d;
        }
        arm.clamp_to_limits(&mut state.q);
        state.fk = arm.fk_unchecked(&state.q);
        trajectory.push(JointConfig(state.q.clone()));
        if scene.collides(arm, &state.fk) {
            return Ok(RolloutOutcome::fail(FailureReason::Collision, trajectory));
        }
    }
    Ok(RolloutOutcome::fail(FailureReason::Timeout, trajectory))
}

/// Planar rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Se2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Se2 {
    pub const IDENTITY: Se2 = Se2 {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn apply(&self, p: Vec2) -> Vec2 {
        p.rotate(self.theta) + Vec2::new(self.x, self.y)
    }
}

/// Points on the gripper used by the pose loss, in the end-effector frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperPoints(pub Vec<Vec2>);

impl Default for GripperPoints {
    fn default() -> Self {
        GripperPoints(vec![
            Vec2::new(0.0, 0.03),
            Vec2::new(0.0, -0.03),
            Vec2::new(0.04, 0.0),
        ])
    }
}

impl GripperPoints {
    pub fn validate(&self) -> Result<()> {
        let p = &self.0;
        let spread = p.iter().enumerate().any(|(i, a)| {
            p.iter().enumerate().any(|(j, b)| {
                p.iter()
                    .enumerate()
                    .any(|(k, c)| i < j && j < k && (*b - *a).cross(*c - *a).abs() > 1e-12)
            })
        });
        if p.len() < 3 || !spread {
            return Err(Error::InvalidParameter(
                "gripper points must include three non-collinear points".into(),
            ));
        }
        Ok(())
    }
}

/// Mean L1 distance between the gripper points under two transforms.
pub fn loss_pose(t1: &Se2, t2: &Se2, xg: &GripperPoints) -> f64 {
    let n = xg.0.len() as f64;
    xg.0
        .iter()
        .map(|&p| {
            let d = t1.apply(p) - t2.apply(p);
            d.x.abs() + d.y.abs()
        })
        .sum::<f64>()
        / n
}
