//! Comparison methods sharing the start-then-skill skeleton: naive start
//! sampling, a conditional VAE over start configurations, and PointNet-style
//! concatenation scorers.

use serde::{Deserialize, Serialize};

use crate::arm::{ArmModel, JointConfig, CAMERA_HALF_ANGLE};
use crate::error::{Error, Result};
use crate::geom::{Scene, Vec2};
use crate::hgraph::{prepare_observation, Grouping, HGraphConfig, PreparedObservation};
use crate::scene::LabeledPointCloud;
use crate::seed::{self, tag};
use crate::skill::{sample_start_config, CollisionWorld, START_HEADING_RANGE};
use crate::startopt::KnownObstacles;
use crate::tensor::{AdamState, BoundParams, ParamSet, Tape, Tensor, Var};

/// Uniform in-cone collision-free start; the same sampler the optimizer uses
/// for its initial points.
pub fn naive_start(arm: &ArmModel, scene: &Scene, seed: u64) -> Result<JointConfig> {
    sample_start_config(arm, scene, scene.target.centroid(), seed)
}

/// Ablation variants of the affordance scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    PointNetJoint,
    PointNetCartesian,
    EefOnly,
}

/// Robot input of a PointNet scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotInput {
    Joints,
    KeyPoints,
}

fn dense(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    tape.add_row(y, p.get(&format!("{prefix}.b"))?)
}

fn lin(ps: &mut ParamSet, rng: &mut impl rand::Rng, name: &str, i: usize, o: usize) {
    ps.insert(format!("{name}.w"), Tensor::glorot(i, o, rng));
    ps.insert(format!("{name}.b"), Tensor::zeros(1, o));
}

fn rows_tensor(v: &[Vec2]) -> Tensor {
    Tensor::from_vec(v.len(), 2, v.iter().flat_map(|p| [p.x, p.y]).collect()).expect("two columns")
}

/// Parameters of the pooled scene encoder under `prefix`.
fn init_scene_encoder(ps: &mut ParamSet, rng: &mut impl rand::Rng, prefix: &str, cfg: &HGraphConfig) {
    let d_local = *cfg.sa_widths.last().expect("validated");
    for t in ["t", "o"] {
        let mut i = 2;
        for (l, &o) in cfg.sa_widths.iter().enumerate() {
            lin(ps, rng, &format!("{prefix}sa.{t}.{l}"), i, o);
            i = o;
        }
        lin(ps, rng, &format!("{prefix}enc.{t}"), d_local + 2, cfg.hidden);
    }
}

/// Pooled scene embedding per observation (`S x 2H`): set abstraction,
/// center position appended, shared encoder, max over centers, per cloud.
fn scene_embedding(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    cfg: &HGraphConfig,
    scenes: &[&PreparedObservation],
) -> Result<Var> {
    let mut parts = Vec::new();
    for t in ["t", "o"] {
        let groups: Vec<&Grouping> = scenes
            .iter()
            .map(|s| if t == "t" { &s.target } else { &s.obstacles })
            .collect();
        let mut offsets = Vec::new();
        let mut center_of = Vec::new();
        let mut centers = Vec::new();
        let mut scene_of = Vec::new();
        let mut base = 0;
        for (si, g) in groups.iter().enumerate() {
            offsets.extend_from_slice(&g.offsets);
            center_of.extend(g.center_of.iter().map(|c| c + base));
            centers.extend_from_slice(&g.centers);
            scene_of.extend(std::iter::repeat(si).take(g.len()));
            base += g.len();
        }
        let mut h = tape.constant(rows_tensor(&offsets));
        for l in 0..cfg.sa_widths.len() {
            h = dense(tape, p, &format!("{prefix}sa.{t}.{l}"), h)?;
            h = tape.relu(h);
        }
        let f = tape.segment_max(h, &center_of, base)?;
        let c = tape.constant(rows_tensor(&centers));
        let x = tape.concat_cols(&[f, c])?;
        let e = dense(tape, p, &format!("{prefix}enc.{t}"), x)?;
        let e = tape.relu(e);
        parts.push(tape.segment_max(e, &scene_of, scenes.len())?);
    }
    tape.concat_cols(&parts)
}

/// PointNet-concat scorer: pooled scene embedding joined with the robot
/// input, then a three-layer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct PointNetModel {
    pub config: HGraphConfig,
    pub input: RobotInput,
    pub head_width: usize,
    pub params: ParamSet,
}

impl PointNetModel {
    pub fn init(
        config: HGraphConfig,
        input: RobotInput,
        arm: &ArmModel,
        head_width: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let mut ps = ParamSet::new();
        init_scene_encoder(&mut ps, &mut rng, "", &config);
        let d_in = 2 * config.hidden + Self::input_dim(input, arm);
        lin(&mut ps, &mut rng, "head.0", d_in, head_width);
        lin(&mut ps, &mut rng, "head.1", head_width, head_width);
        lin(&mut ps, &mut rng, "head.2", head_width, 1);
        Ok(PointNetModel {
            config,
            input,
            head_width,
            params: ps,
        })
    }

    /// Head width whose total parameter count is closest to `target`.
    pub fn matched_width(config: &HGraphConfig, input: RobotInput, arm: &ArmModel, target: usize) -> usize {
        let count = |w: usize| {
            Self::init(config.clone(), input, arm, w, 0)
                .map(|m| m.params.num_scalars())
                .unwrap_or(0)
        };
        let base = count(1);
        let d_in = 2 * config.hidden + Self::input_dim(input, arm);
        // Count is base + (w - 1) * (d_in + 3) + (w^2 - 1).
        let b = (d_in + 3) as f64;
        let c = base as f64 - target as f64 - b - 1.0;
        let w = ((-b + (b * b - 4.0 * c).max(0.0).sqrt()) / 2.0).round().max(1.0) as usize;
        (w.saturating_sub(2).max(1)..=w + 2)
            .min_by_key(|&w| (count(w) as i64 - target as i64).abs())
            .expect("nonempty range")
    }

    pub fn input_dim(input: RobotInput, arm: &ArmModel) -> usize {
        match input {
            RobotInput::Joints => arm.dof(),
            RobotInput::KeyPoints => 2 * arm.num_key_points(),
        }
    }

    pub fn prepare(&self, obs: &LabeledPointCloud, arm: &ArmModel) -> Result<PreparedObservation> {
        prepare_observation(obs, arm.base, &self.config)
    }

    /// Robot input row for `q` (joint angles or flattened base-frame key points).
    pub fn robot_row(&self, arm: &ArmModel, q: &[f64]) -> Result<Vec<f64>> {
        match self.input {
            RobotInput::Joints => {
                arm.forward_kinematics(q)?;
                Ok(q.to_vec())
            }
            RobotInput::KeyPoints => Ok(arm
                .with_base(Vec2::ZERO)
                .key_points(q)?
                .positions
                .iter()
                .flat_map(|p| [p.x, p.y])
                .collect()),
        }
    }

    pub fn embed(&self, tape: &mut Tape, p: &BoundParams, scenes: &[&PreparedObservation]) -> Result<Var> {
        scene_embedding(tape, p, "", &self.config, scenes)
    }

    /// Logits (`B x 1`) from scene embeddings (`S x 2H`), the scene of each
    /// sample, and the stacked robot inputs (`B x d`).
    pub fn head(&self, tape: &mut Tape, p: &BoundParams, emb: Var, scene_of: &[usize], robot: Var) -> Result<Var> {
        let e = tape.gather_rows(emb, scene_of)?;
        let x = tape.concat_cols(&[e, robot])?;
        let h = dense(tape, p, "head.0", x)?;
        let h = tape.relu(h);
        let h = dense(tape, p, "head.1", h)?;
        let h = tape.relu(h);
        dense(tape, p, "head.2", h)
    }

    /// Chain rule from robot-input gradient to joint-angle gradient.
    pub fn input_grad_to_q(&self, arm: &ArmModel, q: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        match self.input {
            RobotInput::Joints => Ok(g.to_vec()),
            RobotInput::KeyPoints => {
                let jac = arm.key_point_jacobian(q)?;
                let mut out = vec![0.0; q.len()];
                for (k, jk) in jac.iter().enumerate() {
                    for (j, d) in jk.iter().enumerate() {
                        out[j] += g[2 * k] * d.x + g[2 * k + 1] * d.y;
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn to_param_set(&self) -> Result<ParamSet> {
        let mut ps = self.params.clone();
        ps.meta = Some(serde_json::json!({
            "model": "pointnet",
            "input": serde_json::to_value(self.input)?,
            "head_width": self.head_width,
            "config": serde_json::to_value(&self.config)?,
        }));
        Ok(ps)
    }

    pub fn from_params(mut ps: ParamSet) -> Result<Self> {
        let meta = ps.meta.take().ok_or_else(|| Error::MissingParameter("meta".into()))?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("pointnet") {
            return Err(Error::InvalidParameter("weight file is not a pointnet model".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::MissingParameter(k.into()));
        Ok(PointNetModel {
            config: serde_json::from_value(field("config")?)?,
            input: serde_json::from_value(field("input")?)?,
            head_width: serde_json::from_value(field("head_width")?)?,
            params: ps,
        })
    }
}

/// Conditional VAE over start configurations given the observation.
#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    pub config: HGraphConfig,
    pub latent: usize,
    pub width: usize,
    pub dof: usize,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub latent: usize,
    pub width: usize,
    pub kl_weight: f64,
}

impl Default for CvaeTrainConfig {
    fn default() -> Self {
        CvaeTrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
            latent: 8,
            width: 128,
            kl_weight: 1.0,
        }
    }
}

/// One positive example: the observation's prepared form and a start.
pub struct CvaeExample<'a> {
    pub prepared: &'a PreparedObservation,
    pub q: &'a [f64],
}

/// Per-epoch averages of the negative ELBO terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvaeEpoch {
    pub epoch: usize,
    pub reconstruction: f64,
    pub kl: f64,
}

impl CvaeEpoch {
    pub fn elbo(&self) -> f64 {
        -(self.reconstruction + self.kl)
    }
}

impl CvaeModel {
    pub fn init(config: HGraphConfig, dof: usize, latent: usize, width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let mut ps = ParamSet::new();
        init_scene_encoder(&mut ps, &mut rng, "ctx.", &config);
        let c = 2 * config.hidden;
        lin(&mut ps, &mut rng, "rec.0", dof + c, width);
        lin(&mut ps, &mut rng, "rec.mu", width, latent);
        lin(&mut ps, &mut rng, "rec.logvar", width, latent);
        lin(&mut ps, &mut rng, "dec.0", latent + c, width);
        lin(&mut ps, &mut rng, "dec.1", width, width);
        lin(&mut ps, &mut rng, "dec.2", width, dof);
        Ok(CvaeModel {
            config,
            latent,
            width,
            dof,
            params: ps,
        })
    }

    fn context(&self, tape: &mut Tape, p: &BoundParams, scenes: &[&PreparedObservation]) -> Result<Var> {
        scene_embedding(tape, p, "ctx.", &self.config, scenes)
    }

    fn decode(&self, tape: &mut Tape, p: &BoundParams, z: Var, ctx: Var) -> Result<Var> {
        let x = tape.concat_cols(&[z, ctx])?;
        let h = dense(tape, p, "dec.0", x)?;
        let h = tape.relu(h);
        let h = dense(tape, p, "dec.1", h)?;
        let h = tape.relu(h);
        dense(tape, p, "dec.2", h)
    }

    /// Negative ELBO terms for a batch: (reconstruction, KL), each averaged
    /// over the batch. `eps` holds the reparameterization noise (`B x latent`).
    fn loss_terms(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        batch: &[CvaeExample<'_>],
        eps: Tensor,
    ) -> Result<(Var, Var)> {
        let scenes: Vec<&PreparedObservation> = batch.iter().map(|e| e.prepared).collect();
        let ctx = self.context(tape, p, &scenes)?;
        let qs: Vec<f64> = batch.iter().flat_map(|e| e.q.iter().copied()).collect();
        let q = tape.constant(Tensor::from_vec(batch.len(), self.dof, qs)?);
        let x = tape.concat_cols(&[q, ctx])?;
        let h = dense(tape, p, "rec.0", x)?;
        let h = tape.relu(h);
        let mu = dense(tape, p, "rec.mu", h)?;
        let logvar = dense(tape, p, "rec.logvar", h)?;
        let half = tape.scale(logvar, 0.5);
        let sd = tape.exp(half);
        let e = tape.constant(eps);
        let noise = tape.mul(sd, e)?;
        let z = tape.add(mu, noise)?;
        let qhat = self.decode(tape, p, z, ctx)?;
        let diff = tape.sub(qhat, q)?;
        let sq = tape.square(diff);
        let rec = tape.sum(sq);
        let n = batch.len() as f64;
        let rec = tape.scale(rec, 1.0 / n);
        let kl = kl_standard_normal(tape, mu, logvar)?;
        let kl = tape.scale(kl, 1.0 / n);
        Ok((rec, kl))
    }

    /// Decodes `k` prior samples; returns the first that lies within the
    /// limits, sees the observed target, keeps the heading range and clears
    /// the coarse obstacle map.
    pub fn sample_start(
        &self,
        obs: &LabeledPointCloud,
        arm: &ArmModel,
        known: &KnownObstacles,
        k: usize,
        seed: u64,
    ) -> Result<Option<JointConfig>> {
        let Some(target) = obs.target_centroid() else {
            return Err(Error::EmptyTarget);
        };
        let prepared = prepare_observation(obs, arm.base, &self.config)?;
        let decoded = self.decode_prior(&prepared, k, seed)?;
        Ok(decoded.into_iter().find_map(|q| {
            if !arm.within_limits(&q) {
                return None;
            }
            let fk = arm.fk_unchecked(&q);
            let ok = fk.heading.abs() <= START_HEADING_RANGE
                && fk.sees(target, CAMERA_HALF_ANGLE)
                && !known.collides(arm, &fk);
            ok.then_some(JointConfig(q))
        }))
    }

    /// `k` decoded configurations from prior samples.
    pub fn decode_prior(&self, prepared: &PreparedObservation, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = seed::rng(seed::derive(seed, &[tag("cvae-prior")]));
        let normal = rand_distr::StandardNormal;
        let z: Vec<f64> = (0..k * self.latent)
            .map(|_| rand_distr::Distribution::<f64>::sample(&normal, &mut rng))
            .collect();
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let ctx = self.context(&mut tape, &p, &[prepared])?;
        let ctx = tape.gather_rows(ctx, &vec![0; k])?;
        let zv = tape.constant(Tensor::from_vec(k, self.latent, z)?);
        let out = self.decode(&mut tape, &p, zv, ctx)?;
        let t = tape.value(out);
        Ok((0..k).map(|i| t.row(i).to_vec()).collect())
    }

    /// Reconstruction through the posterior mean, for diagnostics.
    pub fn reconstruct(&self, prepared: &PreparedObservation, q: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let ctx = self.context(&mut tape, &p, &[prepared])?;
        let qv = tape.constant(Tensor::row_vector(q.to_vec()));
        let x = tape.concat_cols(&[qv, ctx])?;
        let h = dense(&mut tape, &p, "rec.0", x)?;
        let h = tape.relu(h);
        let mu = dense(&mut tape, &p, "rec.mu", h)?;
        let out = self.decode(&mut tape, &p, mu, ctx)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn to_param_set(&self) -> Result<ParamSet> {
        let mut ps = self.params.clone();
        ps.meta = Some(serde_json::json!({
            "model": "cvae",
            "latent": self.latent,
            "width": self.width,
            "dof": self.dof,
            "config": serde_json::to_value(&self.config)?,
        }));
        Ok(ps)
    }

    pub fn from_params(mut ps: ParamSet) -> Result<Self> {
        let meta = ps.meta.take().ok_or_else(|| Error::MissingParameter("meta".into()))?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("cvae") {
            return Err(Error::InvalidParameter("weight file is not a cvae model".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::MissingParameter(k.into()));
        Ok(CvaeModel {
            config: serde_json::from_value(field("config")?)?,
            latent: serde_json::from_value(field("latent")?)?,
            width: serde_json::from_value(field("width")?)?,
            dof: serde_json::from_value(field("dof")?)?,
            params: ps,
        })
    }
}

/// `KL(N(mu, exp(logvar)) || N(0, I))` summed over rows and dimensions.
pub fn kl_standard_normal(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = tape.square(mu);
    let ev = tape.exp(logvar);
    let a = tape.add(m2, ev)?;
    let a = tape.sub(a, logvar)?;
    let a = tape.add_scalar(a, -1.0);
    let s = tape.sum(a);
    Ok(tape.scale(s, 0.5))
}

/// Trains a CVAE on successful starts. Returns the model and the per-epoch
/// loss terms.
pub fn train_cvae(
    examples: &[CvaeExample<'_>],
    config: HGraphConfig,
    dof: usize,
    tc: &CvaeTrainConfig,
) -> Result<(CvaeModel, Vec<CvaeEpoch>)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("no positive examples".into()));
    }
    if let Some(e) = examples.iter().find(|e| e.q.len() != dof) {
        return Err(Error::DimensionMismatch {
            expected: dof,
            got: e.q.len(),
        });
    }
    let mut model = CvaeModel::init(config, dof, tc.latent, tc.width, seed::derive(tc.seed, &[tag("cvae-init")]))?;
    let mut adam = AdamState::new();
    let mut rng = seed::rng(seed::derive(tc.seed, &[tag("cvae-train")]));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let normal = rand_distr::StandardNormal;
    let mut log = Vec::new();
    for epoch in 0..tc.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut rec_sum, mut kl_sum) = (0.0, 0.0);
        for chunk in order.chunks(tc.batch_size.max(1)) {
            let batch: Vec<CvaeExample<'_>> = chunk
                .iter()
                .map(|&i| CvaeExample {
                    prepared: examples[i].prepared,
                    q: examples[i].q,
                })
                .collect();
            let eps: Vec<f64> = (0..batch.len() * tc.latent)
                .map(|_| rand_distr::Distribution::<f64>::sample(&normal, &mut rng))
                .collect();
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let (rec, kl) = model.loss_terms(&mut tape, &p, &batch, Tensor::from_vec(batch.len(), tc.latent, eps)?)?;
            let klw = tape.scale(kl, tc.kl_weight);
            let loss = tape.add(rec, klw)?;
            rec_sum += tape.value(rec).item() * batch.len() as f64;
            kl_sum += tape.value(kl).item() * batch.len() as f64;
            let mut g = tape.backward(loss);
            let grads = p.gradients(&tape, &mut g);
            adam.step(&mut model.params, &grads, tc.lr)?;
        }
        let n = examples.len() as f64;
        log.push(CvaeEpoch {
            epoch,
            reconstruction: rec_sum / n,
            kl: kl_sum / n,
        });
    }
    Ok((model, log))
}
