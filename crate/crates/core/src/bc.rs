//! Behaviour-cloned skill: a set-abstraction encoder of the target cloud in
//! the end-effector frame, a recurrent cell and an action head, trained on
//! scripted demonstrations with the point-matching pose loss.

use serde::{Deserialize, Serialize};

use crate::arm::{ArmModel, CAMERA_HALF_ANGLE};
use crate::error::{Error, Result};
use crate::geom::{sample_boundary, Vec2};
use crate::hgraph::{group_points, Grouping, HGraphConfig};
use crate::scene::{generate_scene_with, EnvFamily, SceneConfig};
use crate::seed::{self, tag};
use crate::skill::{
    execute_skill_traced, sample_start_config, Action, Episode, GripperPoints, Gripper, Se2, ScriptedPolicy,
    SkillKind, SkillPolicy, SkillState, MAX_STEPS,
};
use crate::tensor::{AdamState, BoundParams, ParamSet, Tape, Tensor, Var};

/// One demonstration step: the end-effector pose and the expert action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub ee: Vec2,
    pub heading: f64,
    pub gripper_closed: bool,
    pub action: Action,
    /// The action issues the skill's terminal gripper command.
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub kind: SkillKind,
    pub scene_seed: u64,
    /// Observed target points, world frame.
    pub target_points: Vec<Vec2>,
    pub steps: Vec<DemoStep>,
}

fn terminal_command(kind: SkillKind) -> Gripper {
    match kind {
        SkillKind::Grasp => Gripper::Close,
        SkillKind::Place => Gripper::Open,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcConfig {
    pub hidden: usize,
    pub embed: usize,
    pub sa_widths: Vec<usize>,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub epochs: usize,
    /// Episodes per mini-batch.
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub pos_weight: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            hidden: 32,
            embed: 32,
            sa_widths: vec![16, 32],
            n_points: 64,
            noise_sigma: 0.0,
            epochs: 40,
            batch_size: 16,
            lr: 1e-4,
            alpha: 1.0,
            beta: 1e-3,
            pos_weight: 10.0,
            seed: 0,
        }
    }
}

/// Successful scripted rollouts from obstacle-free scenes.
pub fn generate_demos(arm: &ArmModel, kind: SkillKind, n: usize, cfg: &BcConfig, seed: u64) -> Result<Vec<Demo>> {
    let policy = ScriptedPolicy::default();
    let scene_cfg = SceneConfig::default();
    let mut out = Vec::with_capacity(n);
    let mut i = 0u64;
    while out.len() < n {
        if i as usize > 20 * n + 100 {
            return Err(Error::Unsatisfiable(format!("only {} demos collected", out.len())));
        }
        let s = seed::derive(seed, &[tag("demo"), i]);
        i += 1;
        let Ok(scene) = generate_scene_with(EnvFamily::F1, kind, arm, &scene_cfg, s) else {
            continue;
        };
        let Ok(q0) = sample_start_config(arm, &scene, scene.target.centroid(), seed::derive(s, &[tag("start")])) else {
            continue;
        };
        let mut steps = Vec::new();
        let r = execute_skill_traced(arm, &scene, &q0, kind, &policy, MAX_STEPS, |st, a, _| {
            steps.push(DemoStep {
                ee: st.ee(),
                heading: st.heading(),
                gripper_closed: st.gripper_closed,
                action: *a,
                terminal: a.gripper == terminal_command(kind),
            })
        })?;
        if r.label != 1 {
            continue;
        }
        let target_points = sample_boundary(&scene.target, cfg.n_points, cfg.noise_sigma, 0.0, seed::derive(s, &[tag("points")]))?;
        out.push(Demo {
            kind,
            scene_seed: s,
            target_points,
            steps,
        });
    }
    Ok(out)
}

/// Combined per-step loss `alpha * pose + beta * weighted BCE` for scalar
/// inputs; the reference for the tape version.
pub fn bc_step_loss(
    pred: &Se2,
    expert: &Se2,
    terminal_prob: f64,
    terminal: bool,
    xg: &GripperPoints,
    cfg: &BcConfig,
) -> f64 {
    cfg.alpha * crate::skill::loss_pose(pred, expert, xg)
        + cfg.beta * crate::tensor::bce_loss(terminal_prob, if terminal { 1.0 } else { 0.0 }, cfg.pos_weight)
}

/// Expert action as a transform in the end-effector frame.
pub fn action_transform(a: &Action) -> Se2 {
    Se2 {
        x: a.translation.x,
        y: a.translation.y,
        theta: a.rotation,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcPolicy {
    pub config: BcConfig,
    pub params: ParamSet,
    pub kind: SkillKind,
}

fn lin(ps: &mut ParamSet, rng: &mut impl rand::Rng, name: &str, i: usize, o: usize) {
    ps.insert(format!("{name}.w"), Tensor::glorot(i, o, rng));
    ps.insert(format!("{name}.b"), Tensor::zeros(1, o));
}

fn dense(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    tape.add_row(y, p.get(&format!("{prefix}.b"))?)
}

/// World-frame grouping of a demo cloud; reused at every step since the
/// end-effector frame change is rigid.
fn grouping(points: &[Vec2]) -> Grouping {
    let cfg = HGraphConfig::default();
    group_points(points, &cfg)
}

fn local_inputs(g: &Grouping, ee: Vec2, heading: f64) -> (Vec<f64>, Vec<f64>) {
    // Offsets are stored scaled; rotating them keeps the scale.
    let off: Vec<f64> = g.offsets.iter().flat_map(|o| {
        let r = o.rotate(-heading);
        [r.x, r.y]
    }).collect();
    let cen: Vec<f64> = g.centers.iter().flat_map(|c| {
        let r = (*c - ee).rotate(-heading);
        [r.x, r.y]
    }).collect();
    (off, cen)
}

impl BcPolicy {
    pub fn init(config: BcConfig, kind: SkillKind, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut ps = ParamSet::new();
        let mut i = 2;
        for (l, &o) in config.sa_widths.iter().enumerate() {
            lin(&mut ps, &mut rng, &format!("sa.{l}"), i, o);
            i = o;
        }
        lin(&mut ps, &mut rng, "enc", i + 2, config.embed);
        let h = config.hidden;
        lin(&mut ps, &mut rng, "lstm.x", config.embed + 1, 4 * h);
        ps.insert("lstm.h.w", Tensor::glorot(h, 4 * h, &mut rng));
        lin(&mut ps, &mut rng, "out", h, 5);
        BcPolicy {
            config,
            params: ps,
            kind,
        }
    }

    /// Embeddings (`B x E`) of a batch of clouds given per-row local inputs.
    fn encode(&self, tape: &mut Tape, p: &BoundParams, groups: &[&Grouping], poses: &[(Vec2, f64)]) -> Result<Var> {
        let mut off = Vec::new();
        let mut cen = Vec::new();
        let mut center_of = Vec::new();
        let mut scene_of = Vec::new();
        let mut base = 0;
        for (b, (g, &(ee, h))) in groups.iter().zip(poses).enumerate() {
            let (o, c) = local_inputs(g, ee, h);
            off.extend(o);
            cen.extend(c);
            center_of.extend(g.center_of.iter().map(|c| c + base));
            scene_of.extend(std::iter::repeat(b).take(g.len()));
            base += g.len();
        }
        let n_off = off.len() / 2;
        let mut x = tape.constant(Tensor::from_vec(n_off, 2, off)?);
        for l in 0..self.config.sa_widths.len() {
            x = dense(tape, p, &format!("sa.{l}"), x)?;
            x = tape.relu(x);
        }
        let f = tape.segment_max(x, &center_of, base)?;
        let c = tape.constant(Tensor::from_vec(base, 2, cen)?);
        let fc = tape.concat_cols(&[f, c])?;
        let e = dense(tape, p, "enc", fc)?;
        let e = tape.relu(e);
        tape.segment_max(e, &scene_of, groups.len())
    }

    /// One recurrent step; returns (output `B x 5`, h, c).
    fn cell(&self, tape: &mut Tape, p: &BoundParams, x: Var, h: Var, c: Var) -> Result<(Var, Var, Var)> {
        let hd = self.config.hidden;
        let gx = dense(tape, p, "lstm.x", x)?;
        let gh = tape.matmul(h, p.get("lstm.h.w")?)?;
        let g = tape.add(gx, gh)?;
        let i = tape.slice_cols(g, 0, hd)?;
        let f = tape.slice_cols(g, hd, 2 * hd)?;
        let o = tape.slice_cols(g, 2 * hd, 3 * hd)?;
        let u = tape.slice_cols(g, 3 * hd, 4 * hd)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let o = tape.sigmoid(o);
        let u = tape.tanh(u);
        let fc = tape.mul(f, c)?;
        let iu = tape.mul(i, u)?;
        let c2 = tape.add(fc, iu)?;
        let tc = tape.tanh(c2);
        let h2 = tape.mul(o, tc)?;
        let out = dense(tape, p, "out", h2)?;
        Ok((out, h2, c2))
    }

    /// Tape pose loss per row (`B x 1`) between the predicted transform
    /// (tx, ty, unnormalized cos/sin) and expert transforms.
    fn pose_loss(tape: &mut Tape, out: Var, expert: &[Se2], xg: &GripperPoints) -> Result<Var> {
        let tx = tape.slice_cols(out, 0, 1)?;
        let ty = tape.slice_cols(out, 1, 2)?;
        let c = tape.slice_cols(out, 2, 3)?;
        let s = tape.slice_cols(out, 3, 4)?;
        let c2 = tape.square(c);
        let s2 = tape.square(s);
        let n2 = tape.add(c2, s2)?;
        let n2 = tape.add_scalar(n2, 1e-12);
        let ln = tape.log(n2);
        let ln = tape.scale(ln, -0.5);
        let inv = tape.exp(ln);
        let c = tape.mul(c, inv)?;
        let s = tape.mul(s, inv)?;
        let mut total: Option<Var> = None;
        for &x in &xg.0 {
            let ex: Vec<f64> = expert.iter().map(|t| t.apply(x).x).collect();
            let ey: Vec<f64> = expert.iter().map(|t| t.apply(x).y).collect();
            let cx = tape.scale(c, x.x);
            let sy = tape.scale(s, -x.y);
            let px = tape.add(cx, sy)?;
            let px = tape.add(px, tx)?;
            let sx = tape.scale(s, x.x);
            let cy = tape.scale(c, x.y);
            let py = tape.add(sx, cy)?;
            let py = tape.add(py, ty)?;
            let ex = tape.constant(Tensor::col_vector(ex));
            let ey = tape.constant(Tensor::col_vector(ey));
            let dx = tape.sub(px, ex)?;
            let dy = tape.sub(py, ey)?;
            let dx = tape.abs(dx);
            let dy = tape.abs(dy);
            let d = tape.add(dx, dy)?;
            total = Some(match total {
                None => d,
                Some(t) => tape.add(t, d)?,
            });
        }
        Ok(tape.scale(total.expect("three points"), 1.0 / xg.0.len() as f64))
    }

    /// Mean per-step (pose, weighted BCE) losses of a batch of demos; the
    /// combined objective is returned as a tape variable.
    fn batch_loss(&self, tape: &mut Tape, p: &BoundParams, demos: &[&Demo], groups: &[Grouping], xg: &GripperPoints) -> Result<(Var, f64, f64, usize)> {
        let b = demos.len();
        let hd = self.config.hidden;
        let t_max = demos.iter().map(|d| d.steps.len()).max().unwrap_or(0);
        let mut h = tape.constant(Tensor::zeros(b, hd));
        let mut c = tape.constant(Tensor::zeros(b, hd));
        let gref: Vec<&Grouping> = groups.iter().collect();
        let mut total: Option<Var> = None;
        let (mut pose_sum, mut bce_sum, mut count) = (0.0, 0.0, 0usize);
        for t in 0..t_max {
            let steps: Vec<&DemoStep> = demos.iter().map(|d| &d.steps[t.min(d.steps.len() - 1)]).collect();
            let mask: Vec<f64> = demos.iter().map(|d| if t < d.steps.len() { 1.0 } else { 0.0 }).collect();
            let poses: Vec<(Vec2, f64)> = steps.iter().map(|s| (s.ee, s.heading)).collect();
            let e = self.encode(tape, p, &gref, &poses)?;
            let gr = tape.constant(Tensor::col_vector(steps.iter().map(|s| s.gripper_closed as u8 as f64).collect()));
            let x = tape.concat_cols(&[e, gr])?;
            let (out, h2, c2) = self.cell(tape, p, x, h, c)?;
            h = h2;
            c = c2;
            let expert: Vec<Se2> = steps.iter().map(|s| action_transform(&s.action)).collect();
            let pose = Self::pose_loss(tape, out, &expert, xg)?;
            let z = tape.slice_cols(out, 4, 5)?;
            let labels: Vec<f64> = steps.iter().map(|s| s.terminal as u8 as f64).collect();
            let m = tape.constant(Tensor::col_vector(mask.clone()));
            // Per-row weighted BCE via the mean primitive on single rows.
            let mut bce_rows = Vec::with_capacity(b);
            for r in 0..b {
                let zr = tape.gather_rows(z, &[r])?;
                bce_rows.push(tape.bce_with_logits(zr, &labels[r..=r], self.config.pos_weight)?);
            }
            let bce = tape.concat_rows(&bce_rows)?;
            let pm = tape.mul(pose, m)?;
            let bm = tape.mul(bce, m)?;
            pose_sum += tape.value(pm).data().iter().sum::<f64>();
            bce_sum += tape.value(bm).data().iter().sum::<f64>();
            count += mask.iter().filter(|&&v| v > 0.0).count();
            let pa = tape.scale(pm, self.config.alpha);
            let bb = tape.scale(bm, self.config.beta);
            let step = tape.add(pa, bb)?;
            let s = tape.sum(step);
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        let total = total.ok_or_else(|| Error::EmptyDataset("demo without steps".into()))?;
        let total = tape.scale(total, 1.0 / count.max(1) as f64);
        Ok((total, pose_sum, bce_sum, count))
    }

    /// Mean per-step pose loss of the policy on demos (teacher forcing).
    pub fn pose_error(&self, demos: &[Demo]) -> Result<f64> {
        let xg = GripperPoints::default();
        let (mut s, mut n) = (0.0, 0);
        for chunk in demos.chunks(self.config.batch_size.max(1)) {
            let refs: Vec<&Demo> = chunk.iter().collect();
            let groups: Vec<Grouping> = chunk.iter().map(|d| grouping(&d.target_points)).collect();
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let (_, ps, _, c) = self.batch_loss(&mut tape, &p, &refs, &groups, &xg)?;
            s += ps;
            n += c;
        }
        Ok(s / n.max(1) as f64)
    }

    pub fn to_param_set(&self) -> Result<ParamSet> {
        let mut ps = self.params.clone();
        ps.meta = Some(serde_json::json!({
            "model": "bc",
            "kind": serde_json::to_value(self.kind)?,
            "config": serde_json::to_value(&self.config)?,
        }));
        Ok(ps)
    }

    pub fn from_params(mut ps: ParamSet) -> Result<Self> {
        let meta = ps.meta.take().ok_or_else(|| Error::MissingParameter("meta".into()))?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("bc") {
            return Err(Error::InvalidParameter("weight file is not a bc policy".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::MissingParameter(k.into()));
        Ok(BcPolicy {
            config: serde_json::from_value(field("config")?)?,
            kind: serde_json::from_value(field("kind")?)?,
            params: ps,
        })
    }
}

/// Recurrent state and the episode's target grouping.
pub struct BcMemory {
    grouping: Grouping,
    focus: Vec2,
    h: Tensor,
    c: Tensor,
}

impl SkillPolicy for BcPolicy {
    type Memory = BcMemory;

    fn begin(&self, episode: &Episode<'_>, _state: &SkillState) -> BcMemory {
        let pts = sample_boundary(
            &episode.scene.target,
            self.config.n_points,
            self.config.noise_sigma,
            0.0,
            seed::derive(self.config.seed, &[tag("bc-points")]),
        )
        .unwrap_or_else(|_| vec![episode.scene.target.centroid()]);
        let n = pts.len() as f64;
        let focus = pts.iter().fold(Vec2::ZERO, |a, &p| a + p) * (1.0 / n);
        BcMemory {
            grouping: grouping(&pts),
            focus,
            h: Tensor::zeros(1, self.config.hidden),
            c: Tensor::zeros(1, self.config.hidden),
        }
    }

    fn act(&self, episode: &Episode<'_>, mem: &mut BcMemory, state: &SkillState) -> Action {
        let goal = episode.goal;
        if (mem.focus - state.ee()).norm() > goal.near && !state.fk.sees(mem.focus, CAMERA_HALF_ANGLE) {
            return Action {
                translation: Vec2::ZERO,
                rotation: 0.0,
                gripper: Gripper::Open,
                lost_sight: true,
            };
        }
        let run = || -> Result<(Vec<f64>, Tensor, Tensor)> {
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let e = self.encode(&mut tape, &p, &[&mem.grouping], &[(state.ee(), state.heading())])?;
            let g = tape.constant(Tensor::scalar(state.gripper_closed as u8 as f64));
            let x = tape.concat_cols(&[e, g])?;
            let h = tape.constant(mem.h.clone());
            let c = tape.constant(mem.c.clone());
            let (out, h2, c2) = self.cell(&mut tape, &p, x, h, c)?;
            Ok((tape.value(out).data().to_vec(), tape.value(h2).clone(), tape.value(c2).clone()))
        };
        let Ok((o, h, c)) = run() else {
            return Action {
                translation: Vec2::ZERO,
                rotation: 0.0,
                gripper: Gripper::Open,
                lost_sight: true,
            };
        };
        mem.h = h;
        mem.c = c;
        let mut t = Vec2::new(o[0], o[1]);
        let n = t.norm();
        if n > crate::skill::STEP_CLAMP {
            t = t * (crate::skill::STEP_CLAMP / n);
        }
        let rot = o[3].atan2(o[2]).clamp(-crate::skill::ROT_CLAMP, crate::skill::ROT_CLAMP);
        let terminal = o[4] > 0.0;
        let gripper = match (self.kind, terminal) {
            (SkillKind::Grasp, true) | (SkillKind::Place, false) => Gripper::Close,
            _ => Gripper::Open,
        };
        Action {
            translation: t,
            rotation: rot,
            gripper,
            lost_sight: false,
        }
    }
}

/// Per-epoch mean losses of BC training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcEpoch {
    pub epoch: usize,
    pub pose: f64,
    pub bce: f64,
}

/// Trains a behaviour-cloned policy by full-episode backpropagation through time.
pub fn train_bc_skill(demos: &[Demo], cfg: &BcConfig) -> Result<(BcPolicy, Vec<BcEpoch>)> {
    let Some(first) = demos.first() else {
        return Err(Error::EmptyDataset("no demonstrations".into()));
    };
    let kind = first.kind;
    let mut policy = BcPolicy::init(cfg.clone(), kind, seed::derive(cfg.seed, &[tag("bc-init")]));
    let groups: Vec<Grouping> = demos.iter().map(|d| grouping(&d.target_points)).collect();
    let xg = GripperPoints::default();
    let mut adam = AdamState::new();
    let mut rng = seed::rng(seed::derive(cfg.seed, &[tag("bc-order")]));
    let mut order: Vec<usize> = (0..demos.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut ps, mut bs, mut n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let refs: Vec<&Demo> = chunk.iter().map(|&i| &demos[i]).collect();
            let g: Vec<Grouping> = chunk.iter().map(|&i| groups[i].clone()).collect();
            let mut tape = Tape::new();
            let p = policy.params.bind(&mut tape);
            let (loss, pose, bce, count) = policy.batch_loss(&mut tape, &p, &refs, &g, &xg)?;
            ps += pose;
            bs += bce;
            n += count;
            let mut gr = tape.backward(loss);
            let grads = p.gradients(&tape, &mut gr);
            adam.step(&mut policy.params, &grads, cfg.lr)?;
        }
        log.push(BcEpoch {
            epoch,
            pose: ps / n.max(1) as f64,
            bce: bs / n.max(1) as f64,
        });
    }
    Ok((policy, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_prediction_leaves_only_the_bce_term() {
        let cfg = BcConfig::default();
        let t = Se2 {
            x: 0.01,
            y: -0.02,
            theta: 0.05,
        };
        let xg = GripperPoints::default();
        let l = bc_step_loss(&t, &t, 0.3, true, &xg, &cfg);
        let bce = cfg.beta * cfg.pos_weight * -(0.3f64.ln());
        assert!((l - bce).abs() < 1e-15);
    }

    #[test]
    fn tape_pose_loss_matches_scalar_loss() {
        let xg = GripperPoints::default();
        let pred = [0.01, -0.005, 0.8, 0.3, 0.0];
        let expert = Se2 {
            x: 0.02,
            y: 0.0,
            theta: -0.04,
        };
        let mut tape = Tape::new();
        let out = tape.constant(Tensor::row_vector(pred.to_vec()));
        let l = BcPolicy::pose_loss(&mut tape, out, &[expert], &xg).unwrap();
        let p = Se2 {
            x: pred[0],
            y: pred[1],
            theta: pred[3].atan2(pred[2]),
        };
        let want = crate::skill::loss_pose(&p, &expert, &xg);
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn demos_and_short_training() {
        let arm = ArmModel::default();
        let cfg = BcConfig {
            epochs: 3,
            lr: 1e-3,
            batch_size: 4,
            ..BcConfig::default()
        };
        let demos = generate_demos(&arm, SkillKind::Grasp, 4, &cfg, 1).unwrap();
        assert_eq!(demos.len(), 4);
        assert!(demos.iter().all(|d| d.steps.last().unwrap().terminal));
        let (policy, log) = train_bc_skill(&demos, &cfg).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log[2].pose < log[0].pose);
        assert!(train_bc_skill(&[], &cfg).is_err());
        let ps = policy.to_param_set().unwrap();
        assert_eq!(BcPolicy::from_params(ps).unwrap(), policy);
    }
}
