//! Planar revolute arm: kinematics, key points, Jacobians and collision queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Shape, Vec2};

/// Default wrist-camera half-angle (30 degrees).
pub const CAMERA_HALF_ANGLE: f64 = std::f64::consts::PI / 6.0;

/// A key point on link `link` (1-based), at `fraction` of the way from the
/// link's proximal joint to its distal end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, f64)", into = "(usize, f64)")]
pub struct KeyPointSpec {
    pub link: usize,
    pub fraction: f64,
}

impl From<(usize, f64)> for KeyPointSpec {
    fn from((link, fraction): (usize, f64)) -> Self {
        KeyPointSpec { link, fraction }
    }
}

impl From<KeyPointSpec> for (usize, f64) {
    fn from(k: KeyPointSpec) -> Self {
        (k.link, k.fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub base: Vec2,
    pub link_lengths: Vec<f64>,
    pub link_radius: f64,
    pub joint_limits: Vec<[f64; 2]>,
    pub key_point_spec: Vec<KeyPointSpec>,
}

impl Default for ArmModel {
    fn default() -> Self {
        ArmModel::planar(Vec2::ZERO, &[0.5, 0.4, 0.3, 0.2], 0.04, 2.8)
    }
}

impl ArmModel {
    /// Arm with symmetric limits and link-midpoint plus tip key points.
    pub fn planar(base: Vec2, lengths: &[f64], link_radius: f64, limit: f64) -> Self {
        let l = lengths.len();
        let mut key_point_spec: Vec<KeyPointSpec> = (1..=l)
            .map(|link| KeyPointSpec {
                link,
                fraction: 0.5,
            })
            .collect();
        key_point_spec.push(KeyPointSpec {
            link: l,
            fraction: 1.0,
        });
        ArmModel {
            base,
            link_lengths: lengths.to_vec(),
            link_radius,
            joint_limits: vec![[-limit, limit]; l],
            key_point_spec,
        }
    }

    /// Same arm with the robot represented by the end-effector tip only.
    pub fn eef_only(&self) -> Self {
        ArmModel {
            key_point_spec: vec![KeyPointSpec {
                link: self.dof(),
                fraction: 1.0,
            }],
            ..self.clone()
        }
    }

    pub fn with_base(&self, base: Vec2) -> Self {
        ArmModel {
            base,
            ..self.clone()
        }
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn num_key_points(&self) -> usize {
        self.key_point_spec.len()
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.dof();
        if l < 2 {
            return Err(Error::InvalidParameter("arm needs at least two links".into()));
        }
        if self.joint_limits.len() != l {
            return Err(Error::DimensionMismatch {
                expected: l,
                got: self.joint_limits.len(),
            });
        }
        if self.joint_limits.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(Error::InvalidParameter("joint limits need q_min < q_max".into()));
        }
        if self.link_lengths.iter().any(|&x| !(x > 0.0)) || !(self.link_radius >= 0.0) {
            return Err(Error::InvalidParameter("non-positive link dimension".into()));
        }
        if self
            .key_point_spec
            .iter()
            .any(|k| k.link == 0 || k.link > l || !(0.0..=1.0).contains(&k.fraction))
        {
            return Err(Error::InvalidParameter("key point outside the arm".into()));
        }
        if !self
            .key_point_spec
            .iter()
            .any(|k| k.link == l && k.fraction == 1.0)
        {
            return Err(Error::InvalidParameter(
                "key points must include the end-effector tip".into(),
            ));
        }
        Ok(())
    }

    fn check_dim(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.len() == self.dof()
            && q.iter()
                .zip(&self.joint_limits)
                .all(|(v, [lo, hi])| v.is_finite() && *v >= *lo && *v <= *hi)
    }

    /// Largest violation of the joint limits (0 when inside).
    pub fn limit_violation(&self, q: &[f64]) -> f64 {
        q.iter()
            .zip(&self.joint_limits)
            .map(|(v, [lo, hi])| (lo - v).max(v - hi).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (v, [lo, hi]) in q.iter_mut().zip(&self.joint_limits) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Fk> {
        self.check_dim(q)?;
        Ok(self.fk_unchecked(q))
    }

    pub fn fk_unchecked(&self, q: &[f64]) -> Fk {
        let mut joints = Vec::with_capacity(self.dof() + 1);
        let mut p = self.base;
        let mut theta = 0.0;
        joints.push(p);
        for (len, qi) in self.link_lengths.iter().zip(q) {
            theta += qi;
            p = p + Vec2::from_angle(theta) * *len;
            joints.push(p);
        }
        Fk {
            joints,
            heading: theta,
        }
    }

    pub fn key_points(&self, q: &[f64]) -> Result<KeyPointSet> {
        let fk = self.forward_kinematics(q)?;
        Ok(self.key_points_from_fk(&fk))
    }

    pub fn key_points_from_fk(&self, fk: &Fk) -> KeyPointSet {
        let k = self.num_key_points();
        let positions = self
            .key_point_spec
            .iter()
            .map(|s| fk.joints[s.link - 1].lerp(fk.joints[s.link], s.fraction))
            .collect();
        let ids = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        KeyPointSet { positions, ids }
    }

    /// `J[k][j] = d p_k / d q_j`.
    pub fn key_point_jacobian(&self, q: &[f64]) -> Result<Vec<Vec<Vec2>>> {
        let fk = self.forward_kinematics(q)?;
        let kp = self.key_points_from_fk(&fk);
        Ok(self
            .key_point_spec
            .iter()
            .zip(&kp.positions)
            .map(|(s, &p)| point_jacobian(&fk, s.link, p))
            .collect())
    }

    /// End-effector Jacobian rows (dx, dy, dheading) per joint.
    pub fn ee_jacobian(&self, fk: &Fk) -> Vec<[f64; 3]> {
        let ee = fk.ee();
        (0..self.dof())
            .map(|j| {
                let d = (ee - fk.joints[j]).rot90();
                [d.x, d.y, 1.0]
            })
            .collect()
    }

    /// Clearance of every link capsule against every obstacle, `[link][obstacle]`.
    pub fn clearance(&self, q: &[f64], obstacles: &[Shape]) -> Result<Vec<Vec<f64>>> {
        let fk = self.forward_kinematics(q)?;
        Ok(self.clearance_from_fk(&fk, obstacles))
    }

    pub fn clearance_from_fk(&self, fk: &Fk, obstacles: &[Shape]) -> Vec<Vec<f64>> {
        fk.joints
            .windows(2)
            .map(|w| {
                obstacles
                    .iter()
                    .map(|o| o.segment_distance(w[0], w[1]) - self.link_radius)
                    .collect()
            })
            .collect()
    }

    /// True if any link capsule penetrates an obstacle or dips below the table.
    pub fn in_collision(&self, q: &[f64], obstacles: &[Shape], table_y: f64) -> Result<bool> {
        let fk = self.forward_kinematics(q)?;
        Ok(self.fk_in_collision(&fk, obstacles, table_y))
    }

    pub fn fk_in_collision(&self, fk: &Fk, obstacles: &[Shape], table_y: f64) -> bool {
        if self.below_table(fk, table_y) {
            return true;
        }
        fk.joints.windows(2).any(|w| {
            obstacles
                .iter()
                .any(|o| o.segment_distance(w[0], w[1]) - self.link_radius < 0.0)
        })
    }

    pub fn below_table(&self, fk: &Fk, table_y: f64) -> bool {
        fk.joints.iter().any(|p| p.y < table_y - self.link_radius)
    }

    pub fn camera_cone_check(&self, q: &[f64], target: Vec2, half_angle: f64) -> Result<bool> {
        let fk = self.forward_kinematics(q)?;
        Ok(fk.sees(target, half_angle))
    }
}

fn point_jacobian(fk: &Fk, link: usize, p: Vec2) -> Vec<Vec2> {
    (0..fk.joints.len() - 1)
        .map(|j| {
            if j < link {
                (p - fk.joints[j]).rot90()
            } else {
                Vec2::ZERO
            }
        })
        .collect()
}

/// Forward kinematics result: joint positions `p_0..p_L` and the end-effector heading.
#[derive(Debug, Clone, PartialEq)]
pub struct Fk {
    pub joints: Vec<Vec2>,
    pub heading: f64,
}

impl Fk {
    pub fn ee(&self) -> Vec2 {
        *self.joints.last().expect("non-empty chain")
    }

    /// Camera-cone predicate, inclusive of the boundary.
    pub fn sees(&self, target: Vec2, half_angle: f64) -> bool {
        let d = target - self.ee();
        let h = Vec2::from_angle(self.heading);
        let angle = h.cross(d).abs().atan2(h.dot(d));
        angle <= half_angle + 1e-12
    }

    /// Jacobian of a point rigidly attached to link `link` (1-based).
    pub fn point_jacobian(&self, link: usize, p: Vec2) -> Vec<Vec2> {
        point_jacobian(self, link, p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyPointSet {
    pub positions: Vec<Vec2>,
    pub ids: Vec<Vec<f64>>,
}

/// A vector of joint angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfig(pub Vec<f64>);

impl std::ops::Deref for JointConfig {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for JointConfig {
    fn from(v: Vec<f64>) -> Self {
        JointConfig(v)
    }
}
