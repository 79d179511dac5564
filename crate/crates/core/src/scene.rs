//! Procedural scenes for the six environment families, observation synthesis
//! and oracle feasibility checks.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::ArmModel;
use crate::error::{Error, Result};
use crate::geom::{sample_boundary, shape_gap, Aabb, Scene, Shape, Vec2};
use crate::seed::{self, tag};
use crate::skill::{self, ScriptedPolicy, SkillKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EnvFamily {
    F1,
    F2,
    F3,
    F4,
    F5,
    F6,
}

impl EnvFamily {
    pub const ALL: [EnvFamily; 6] = [
        EnvFamily::F1,
        EnvFamily::F2,
        EnvFamily::F3,
        EnvFamily::F4,
        EnvFamily::F5,
        EnvFamily::F6,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn has_enclosure(self) -> bool {
        matches!(self, EnvFamily::F3 | EnvFamily::F4 | EnvFamily::F5 | EnvFamily::F6)
    }

    pub fn has_clutter(self) -> bool {
        matches!(self, EnvFamily::F4 | EnvFamily::F6)
    }
}

impl fmt::Display for EnvFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F{}", self.index() + 1)
    }
}

impl FromStr for EnvFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "F1" => Ok(EnvFamily::F1),
            "F2" => Ok(EnvFamily::F2),
            "F3" => Ok(EnvFamily::F3),
            "F4" => Ok(EnvFamily::F4),
            "F5" => Ok(EnvFamily::F5),
            "F6" => Ok(EnvFamily::F6),
            other => Err(Error::InvalidParameter(format!("unknown family `{other}`"))),
        }
    }
}

/// Scene generation ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub workspace: Aabb,
    pub table_y: f64,
    /// Radial range of the target centre around the arm base.
    pub target_rho: [f64; 2],
    /// Polar-angle range of the target centre, radians from +x.
    pub target_phi: [f64; 2],
    pub target_radius: [f64; 2],
    pub container_mouth: [f64; 2],
    pub container_height: [f64; 2],
    pub wall_radius: f64,
    /// Maximum enclosure rotation away from its nominal opening direction.
    pub enclosure_tilt: f64,
    pub scatter_count: [usize; 2],
    pub scatter_distance: [f64; 2],
    pub scatter_size: [f64; 2],
    pub clutter_count: [usize; 2],
    pub clutter_size: [f64; 2],
    /// Configuration the arm rests in before each trial.
    pub home: Vec<f64>,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            workspace: Aabb {
                min: Vec2::new(-1.6, -0.1),
                max: Vec2::new(1.6, 1.6),
            },
            table_y: 0.0,
            target_rho: [0.6, 1.05],
            target_phi: [20f64.to_radians(), 70f64.to_radians()],
            target_radius: [0.03, 0.07],
            container_mouth: [0.10, 0.18],
            container_height: [0.06, 0.10],
            wall_radius: 0.015,
            enclosure_tilt: 30f64.to_radians(),
            scatter_count: [3, 6],
            scatter_distance: [0.12, 0.35],
            scatter_size: [0.03, 0.07],
            clutter_count: [1, 3],
            clutter_size: [0.015, 0.03],
            home: vec![2.0, 0.6, 0.5, 0.3],
            max_attempts: 1000,
        }
    }
}

/// Generates a grasp scene with default ranges.
pub fn generate_scene(family: EnvFamily, seed: u64) -> Result<Scene> {
    generate_scene_with(
        family,
        SkillKind::Grasp,
        &ArmModel::default(),
        &SceneConfig::default(),
        seed,
    )
}

pub fn generate_scene_with(
    family: EnvFamily,
    kind: SkillKind,
    arm: &ArmModel,
    cfg: &SceneConfig,
    seed: u64,
) -> Result<Scene> {
    let mut rng = seed::rng(seed::derive(seed, &[tag("scene"), family.index() as u64]));
    for _ in 0..cfg.max_attempts {
        if let Some(scene) = try_scene(family, kind, arm, cfg, &mut rng) {
            return Ok(scene);
        }
    }
    Err(Error::Unsatisfiable(format!(
        "no {family} scene after {} attempts",
        cfg.max_attempts
    )))
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn try_scene(
    family: EnvFamily,
    kind: SkillKind,
    arm: &ArmModel,
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Scene> {
    let rho = uniform(rng, cfg.target_rho);
    let phi = uniform(rng, cfg.target_phi);
    let center = arm.base + Vec2::from_angle(phi) * rho;
    let target = match kind {
        SkillKind::Grasp => Shape::Circle {
            center,
            radius: uniform(rng, cfg.target_radius),
        },
        SkillKind::Place => Shape::Box {
            center,
            half_extents: Vec2::new(
                0.5 * uniform(rng, cfg.container_mouth),
                0.5 * uniform(rng, cfg.container_height),
            ),
            angle: rng.random_range(-0.3..0.3),
        },
    };
    let mut obstacles = Vec::new();
    match family {
        EnvFamily::F1 => {}
        EnvFamily::F2 => scatter(&target, cfg, rng, &mut obstacles)?,
        _ => {
            let nominal = if matches!(family, EnvFamily::F3 | EnvFamily::F4) {
                FRAC_PI_2
            } else {
                (arm.base - center).angle()
            };
            let open = nominal + rng.random_range(-cfg.enclosure_tilt..cfg.enclosure_tilt);
            let interior = enclosure(&target, open, cfg, rng, &mut obstacles);
            if family.has_clutter() {
                clutter(&target, &interior, cfg, rng, &mut obstacles)?;
            }
        }
    }
    let scene = Scene {
        workspace: cfg.workspace,
        table_y: cfg.table_y,
        family,
        target,
        obstacles,
    };
    if scene.check_invariants().is_err() {
        return None;
    }
    if target.bounds().min.y < cfg.table_y
        || scene.obstacles.iter().any(|o| o.bounds().min.y < cfg.table_y - cfg.wall_radius)
    {
        return None;
    }
    match arm.in_collision(&cfg.home, &scene.obstacles, scene.table_y) {
        Ok(false) => Some(scene),
        _ => None,
    }
}

fn target_extent(target: &Shape) -> f64 {
    match *target {
        Shape::Circle { radius, .. } => radius,
        Shape::Box { half_extents, .. } => half_extents.norm(),
        Shape::Capsule { a, b, radius } => 0.5 * (b - a).norm() + radius,
    }
}

/// Interior of an enclosure: origin at the middle of the closed side, `u`
/// pointing out of the opening, `w` the inner width and `d` the depth.
struct Interior {
    origin: Vec2,
    u: Vec2,
    w: f64,
    d: f64,
}

impl Interior {
    fn to_world(&self, x: f64, y: f64) -> Vec2 {
        self.origin + self.u.rot90() * (-x) + self.u * y
    }
}

fn enclosure(
    target: &Shape,
    open: f64,
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Shape>,
) -> Interior {
    let ext = target_extent(target);
    let edge = (ext + 0.035).max(0.075);
    let w = 2.0 * edge + rng.random_range(0.02..0.14);
    let d = edge + ext + rng.random_range(0.0..0.1);
    let x = rng.random_range(-(w / 2.0 - edge)..=(w / 2.0 - edge));
    let y = rng.random_range(edge..=(d - ext));
    let u = Vec2::from_angle(open);
    let side = u.rot90() * (-1.0);
    let origin = target.centroid() - side * x - u * y;
    let interior = Interior { origin, u, w, d };
    let r = cfg.wall_radius;
    let c0 = interior.to_world(-w / 2.0, 0.0);
    let c1 = interior.to_world(w / 2.0, 0.0);
    out.push(Shape::Capsule { a: c0, b: c1, radius: r });
    out.push(Shape::Capsule {
        a: c0,
        b: interior.to_world(-w / 2.0, d),
        radius: r,
    });
    out.push(Shape::Capsule {
        a: c1,
        b: interior.to_world(w / 2.0, d),
        radius: r,
    });
    interior
}

fn small_shape(center: Vec2, size: f64, rng: &mut ChaCha8Rng) -> Shape {
    if rng.random_bool(0.5) {
        Shape::Circle {
            center,
            radius: size,
        }
    } else {
        let aspect = rng.random_range(0.6..1.0);
        Shape::Box {
            center,
            half_extents: Vec2::new(size, size * aspect),
            angle: rng.random_range(-PI..PI),
        }
    }
}

fn scatter(
    target: &Shape,
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Shape>,
) -> Option<()> {
    let n = rng.random_range(cfg.scatter_count[0]..=cfg.scatter_count[1]);
    let c = target.centroid();
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..50 {
            let dist = uniform(rng, cfg.scatter_distance);
            let ang = rng.random_range(-PI..PI);
            let size = uniform(rng, cfg.scatter_size);
            let s = small_shape(c + Vec2::from_angle(ang) * dist, size, rng);
            if shape_gap(&s, target) >= 0.02 && s.bounds().min.y >= cfg.table_y {
                out.push(s);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(())
}

fn clutter(
    target: &Shape,
    interior: &Interior,
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Shape>,
) -> Option<()> {
    let walls = out.clone();
    let n = rng.random_range(cfg.clutter_count[0]..=cfg.clutter_count[1]);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..50 {
            let size = uniform(rng, cfg.clutter_size);
            let x = rng.random_range(-interior.w / 2.0..interior.w / 2.0);
            let y = rng.random_range(0.0..interior.d);
            let s = small_shape(interior.to_world(x, y), size, rng);
            let clear_walls = walls.iter().all(|wl| shape_gap(&s, wl) >= 0.005);
            if clear_walls && shape_gap(&s, target) >= 0.02 {
                out.push(s);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(())
}

/// Segmented point-cloud observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPointCloud {
    pub target_points: Vec<Vec2>,
    pub obstacle_points: Vec<(Vec2, usize)>,
}

impl LabeledPointCloud {
    pub fn target_centroid(&self) -> Option<Vec2> {
        if self.target_points.is_empty() {
            return None;
        }
        let n = self.target_points.len() as f64;
        let s = self
            .target_points
            .iter()
            .fold(Vec2::ZERO, |acc, &p| acc + p);
        Some(s * (1.0 / n))
    }

    pub fn translated(&self, t: Vec2) -> LabeledPointCloud {
        LabeledPointCloud {
            target_points: self.target_points.iter().map(|&p| p + t).collect(),
            obstacle_points: self
                .obstacle_points
                .iter()
                .map(|&(p, id)| (p + t, id))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsConfig {
    pub n_target: usize,
    pub n_obstacle: usize,
    pub noise_sigma: f64,
    pub dropout: f64,
    pub flip_rate: f64,
}

impl Default for ObsConfig {
    fn default() -> Self {
        ObsConfig {
            n_target: 128,
            n_obstacle: 64,
            noise_sigma: 0.003,
            dropout: 0.05,
            flip_rate: 0.02,
        }
    }
}

impl ObsConfig {
    pub fn noiseless() -> Self {
        ObsConfig {
            noise_sigma: 0.0,
            dropout: 0.0,
            flip_rate: 0.0,
            ..ObsConfig::default()
        }
    }
}

pub fn observe(scene: &Scene, cfg: &ObsConfig, seed: u64) -> Result<LabeledPointCloud> {
    if !(0.0..=1.0).contains(&cfg.flip_rate) {
        return Err(Error::InvalidParameter("flip rate outside [0, 1]".into()));
    }
    let mut target_points = sample_boundary(
        &scene.target,
        cfg.n_target,
        cfg.noise_sigma,
        cfg.dropout,
        seed::derive(seed, &[tag("target")]),
    )?;
    if target_points.is_empty() {
        target_points.push(scene.target.centroid());
    }
    let mut flip_rng = seed::rng(seed::derive(seed, &[tag("flip")]));
    let mut obstacle_points = Vec::new();
    for (id, o) in scene.obstacles.iter().enumerate() {
        let pts = sample_boundary(
            o,
            cfg.n_obstacle,
            cfg.noise_sigma,
            cfg.dropout,
            seed::derive(seed, &[tag("obstacle"), id as u64]),
        )?;
        for p in pts {
            if flip_rng.random::<f64>() < cfg.flip_rate {
                target_points.push(p);
            } else {
                obstacle_points.push((p, id));
            }
        }
    }
    Ok(LabeledPointCloud {
        target_points,
        obstacle_points,
    })
}

/// Oracle feasibility: true if some sampled start yields a successful
/// scripted rollout with full knowledge of the scene.
pub fn validate_scene(scene: &Scene, arm: &ArmModel, kind: SkillKind, n_probe: usize) -> bool {
    validate_scene_seeded(scene, arm, kind, n_probe, 0)
}

pub fn validate_scene_seeded(
    scene: &Scene,
    arm: &ArmModel,
    kind: SkillKind,
    n_probe: usize,
    seed: u64,
) -> bool {
    let policy = ScriptedPolicy::default();
    let centroid = scene.target.centroid();
    (0..n_probe).any(|i| {
        let s = seed::derive(seed, &[tag("probe"), i as u64]);
        match skill::sample_start_config(arm, scene, centroid, s) {
            Ok(q) => {
                skill::execute_skill(arm, scene, &q, kind, &policy, skill::MAX_STEPS)
                    .map(|o| o.label == 1)
                    .unwrap_or(false)
            }
            Err(_) => false,
        }
    })
}
