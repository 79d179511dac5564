//! Rollout datasets, affordance-classifier training and classifier metrics.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{ArmModel, JointConfig, CAMERA_HALF_ANGLE};
use crate::baselines::{PointNetModel, RobotInput};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::hgraph::{AffordanceModel, HGraphConfig, PreparedObservation, RobotNodes, SampleRef, SceneCache};
use crate::scene::{generate_scene_with, observe, validate_scene_seeded, EnvFamily, LabeledPointCloud, ObsConfig, SceneConfig};
use crate::seed::{self, tag};
use crate::skill::{execute_skill, sample_start_config, FailureReason, ScriptedPolicy, SkillKind, MAX_STEPS};
use crate::startopt::StartObjective;
use crate::tensor::{AdamState, BoundParams, ParamSet, Tape, Tensor, Var};
use crate::geom::Scene;

/// One labeled start configuration with the observation it was taken under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSample {
    pub q: JointConfig,
    pub observation: LabeledPointCloud,
    pub label: u8,
    pub failure_reason: FailureReason,
    pub family: EnvFamily,
    pub skill: SkillKind,
    pub scene_seed: u64,
    /// Camera-away negative added without a rollout.
    pub injected: bool,
}

impl RolloutSample {
    /// Samples sharing this key share one scene and observation.
    pub fn scene_key(&self) -> (EnvFamily, SkillKind, u64) {
        (self.family, self.skill, self.scene_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub families: Vec<EnvFamily>,
    pub scenes_per_family: usize,
    pub starts_per_scene: usize,
    pub skill: SkillKind,
    pub seed: u64,
    /// Injected negatives as a fraction of the rollout count.
    pub negative_ratio: f64,
    /// Sampled starts tried when validating a scene.
    pub validation_probes: usize,
    /// Scene draws allowed per requested scene before giving up on a family.
    pub max_scene_attempts: usize,
    pub max_steps: usize,
    pub workers: usize,
    pub obs: ObsConfig,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            families: EnvFamily::ALL.to_vec(),
            scenes_per_family: 60,
            starts_per_scene: 10,
            skill: SkillKind::Grasp,
            seed: 0,
            negative_ratio: 0.1,
            validation_probes: 40,
            max_scene_attempts: 10,
            max_steps: MAX_STEPS,
            workers: 1,
            obs: ObsConfig::default(),
            scene: SceneConfig::default(),
        }
    }
}

/// Seed of the `index`-th scene draw of a family.
pub fn scene_seed(seed: u64, family: EnvFamily, skill: SkillKind, index: usize) -> u64 {
    seed::derive(
        seed,
        &[tag("scene"), family.index() as u64, skill as u64, index as u64],
    )
}

/// Generates and validates a scene; `None` if generation or validation fails.
pub fn validated_scene(
    family: EnvFamily,
    skill: SkillKind,
    arm: &ArmModel,
    cfg: &SceneConfig,
    probes: usize,
    seed: u64,
) -> Option<Scene> {
    match generate_scene_with(family, skill, arm, cfg, seed) {
        Ok(scene) => {
            if validate_scene_seeded(&scene, arm, skill, probes, seed::derive(seed, &[tag("validate")])) {
                Some(scene)
            } else {
                log::warn!("{family:?} scene {seed:#x} failed validation; skipped");
                None
            }
        }
        Err(e) => {
            log::warn!("{family:?} scene {seed:#x} not generated: {e}; skipped");
            None
        }
    }
}

/// First `count` validated scene seeds of a family, in draw order.
pub fn validated_scene_seeds(
    family: EnvFamily,
    skill: SkillKind,
    arm: &ArmModel,
    cfg: &SceneConfig,
    probes: usize,
    seed: u64,
    count: usize,
    max_attempts: usize,
    workers: usize,
) -> Result<Vec<(u64, Scene)>> {
    let mut out = Vec::with_capacity(count);
    let limit = count.saturating_mul(max_attempts.max(1));
    let mut next = 0;
    while out.len() < count && next < limit {
        let chunk: Vec<usize> = (next..(next + (count - out.len()).max(1)).min(limit)).collect();
        next += chunk.len();
        let found = parallel_map(&chunk, workers, |&i| {
            let s = scene_seed(seed, family, skill, i);
            validated_scene(family, skill, arm, cfg, probes, s).map(|sc| (s, sc))
        });
        out.extend(found.into_iter().flatten().take(count - out.len()));
    }
    if out.len() < count {
        return Err(Error::Unsatisfiable(format!(
            "{family:?}: only {} validated scenes after {limit} draws",
            out.len()
        )));
    }
    Ok(out)
}

/// Order-preserving map over a fixed worker pool.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Rotates the wrist so the camera faces away from `target`; `None` if no
/// such rotation stays within the limits.
pub fn camera_away(arm: &ArmModel, q: &[f64], target: Vec2, rng: &mut impl Rng) -> Option<Vec<f64>> {
    let last = arm.dof() - 1;
    let [lo, hi] = arm.joint_limits[last];
    for _ in 0..32 {
        let mag = rng.random_range(std::f64::consts::FRAC_PI_3..=std::f64::consts::PI);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mut qn = q.to_vec();
        qn[last] += sign * mag;
        if qn[last] < lo || qn[last] > hi {
            qn[last] -= 2.0 * sign * mag;
        }
        if qn[last] < lo || qn[last] > hi {
            continue;
        }
        let fk = arm.fk_unchecked(&qn);
        if !fk.sees(target, CAMERA_HALF_ANGLE) {
            return Some(qn);
        }
    }
    None
}

/// Rollouts (and injected negatives) for one validated scene.
pub fn scene_samples(
    arm: &ArmModel,
    scene: &Scene,
    family: EnvFamily,
    scene_seed: u64,
    cfg: &DatasetConfig,
) -> Result<Vec<RolloutSample>> {
    let observation = observe(scene, &cfg.obs, seed::derive(scene_seed, &[tag("obs")]))?;
    let centroid = scene.target.centroid();
    let policy = ScriptedPolicy::default();
    let mut out = Vec::new();
    let mut starts = Vec::new();
    for j in 0..cfg.starts_per_scene {
        let q = sample_start_config(arm, scene, centroid, seed::derive(scene_seed, &[tag("start"), j as u64]))?;
        let r = execute_skill(arm, scene, &q, cfg.skill, &policy, cfg.max_steps)?;
        starts.push(q.clone());
        out.push(RolloutSample {
            q,
            observation: observation.clone(),
            label: r.label,
            failure_reason: r.failure_reason,
            family,
            skill: cfg.skill,
            scene_seed,
            injected: false,
        });
    }
    let n_neg = (cfg.starts_per_scene as f64 * cfg.negative_ratio).round() as usize;
    let mut rng = seed::rng(seed::derive(scene_seed, &[tag("negatives")]));
    for k in 0..n_neg {
        let base = &starts[k % starts.len().max(1)];
        if let Some(q) = camera_away(arm, base, centroid, &mut rng) {
            out.push(RolloutSample {
                q: JointConfig(q),
                observation: observation.clone(),
                label: 0,
                failure_reason: FailureReason::LostSight,
                family,
                skill: cfg.skill,
                scene_seed,
                injected: true,
            });
        }
    }
    Ok(out)
}

/// Per-family rollout datasets over validated scenes, deterministic per seed.
pub fn generate_dataset(arm: &ArmModel, cfg: &DatasetConfig) -> Result<Vec<RolloutSample>> {
    if cfg.starts_per_scene == 0 || !(0.0..=1.0).contains(&cfg.negative_ratio) {
        return Err(Error::InvalidParameter("dataset config".into()));
    }
    let mut out = Vec::new();
    for &family in &cfg.families {
        let scenes = validated_scene_seeds(
            family,
            cfg.skill,
            arm,
            &cfg.scene,
            cfg.validation_probes,
            cfg.seed,
            cfg.scenes_per_family,
            cfg.max_scene_attempts,
            cfg.workers,
        )?;
        let per_scene = parallel_map(&scenes, cfg.workers, |(s, scene)| {
            scene_samples(arm, scene, family, *s, cfg)
        });
        for r in per_scene {
            match r {
                Ok(v) => out.extend(v),
                Err(Error::Unsatisfiable(m)) => log::warn!("{family:?}: {m}; scene skipped"),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

pub fn save_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in items {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Which affordance scorer to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Full,
    EefOnly,
    PointNetJoint,
    PointNetCartesian,
}

/// A trained or trainable affordance classifier.
#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    Graph(AffordanceModel),
    PointNet(PointNetModel),
}

/// Per-scene cached quantities for repeated evaluation.
pub enum ScorerCache {
    Graph(SceneCache),
    PointNet(Arc<Tensor>),
}

impl Scorer {
    pub fn init(kind: ScorerKind, config: HGraphConfig, arm: &ArmModel, seed: u64) -> Result<Self> {
        let full = |cfg: HGraphConfig| {
            let k = cfg.robot_arm(arm).num_key_points();
            AffordanceModel::init(cfg, k, seed)
        };
        Ok(match kind {
            ScorerKind::Full => Scorer::Graph(full(HGraphConfig {
                robot_nodes: RobotNodes::All,
                ..config
            })?),
            ScorerKind::EefOnly => Scorer::Graph(full(HGraphConfig {
                robot_nodes: RobotNodes::EefOnly,
                ..config
            })?),
            ScorerKind::PointNetJoint | ScorerKind::PointNetCartesian => {
                let input = if kind == ScorerKind::PointNetJoint {
                    RobotInput::Joints
                } else {
                    RobotInput::KeyPoints
                };
                let cfg = HGraphConfig {
                    robot_nodes: RobotNodes::All,
                    ..config
                };
                let reference = AffordanceModel::init(cfg.clone(), arm.num_key_points(), 0)?.params.num_scalars();
                let w = PointNetModel::matched_width(&cfg, input, arm, reference);
                Scorer::PointNet(PointNetModel::init(cfg, input, arm, w, seed)?)
            }
        })
    }

    pub fn kind(&self) -> ScorerKind {
        match self {
            Scorer::Graph(m) if m.config.robot_nodes == RobotNodes::EefOnly => ScorerKind::EefOnly,
            Scorer::Graph(_) => ScorerKind::Full,
            Scorer::PointNet(m) if m.input == RobotInput::Joints => ScorerKind::PointNetJoint,
            Scorer::PointNet(_) => ScorerKind::PointNetCartesian,
        }
    }

    pub fn config(&self) -> &HGraphConfig {
        match self {
            Scorer::Graph(m) => &m.config,
            Scorer::PointNet(m) => &m.config,
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Scorer::Graph(m) => &m.params,
            Scorer::PointNet(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Scorer::Graph(m) => &mut m.params,
            Scorer::PointNet(m) => &mut m.params,
        }
    }

    pub fn prepare(&self, obs: &LabeledPointCloud, arm: &ArmModel) -> Result<PreparedObservation> {
        crate::hgraph::prepare_observation(obs, arm.base, self.config())
    }

    /// Logits (`B x 1`) for samples given as (scene index, joint angles).
    pub fn batch_logits(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        scenes: &[&PreparedObservation],
        samples: &[(usize, &[f64])],
        arm: &ArmModel,
    ) -> Result<Var> {
        match self {
            Scorer::Graph(m) => {
                let enc = m.encode_scenes(tape, p, scenes)?;
                let mut pos = Vec::new();
                for (_, q) in samples {
                    pos.extend(m.robot_positions(arm, q)?);
                }
                let rp = tape.constant(Tensor::from_vec(pos.len(), 2, pos.iter().flat_map(|v| [v.x, v.y]).collect())?);
                let refs: Vec<SampleRef> = samples.iter().map(|&(s, _)| SampleRef { scene: s }).collect();
                m.forward_samples(tape, p, &enc, &refs, rp)
            }
            Scorer::PointNet(m) => {
                let emb = m.embed(tape, p, scenes)?;
                let mut rows = Vec::new();
                for (_, q) in samples {
                    rows.push(m.robot_row(arm, q)?);
                }
                let r = tape.constant(Tensor::from_rows(&rows)?);
                let scene_of: Vec<usize> = samples.iter().map(|s| s.0).collect();
                m.head(tape, p, emb, &scene_of, r)
            }
        }
    }

    /// Logits for several starts under one observation.
    pub fn logits(&self, prepared: &PreparedObservation, arm: &ArmModel, qs: &[&[f64]]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params().bind_frozen(&mut tape);
        let samples: Vec<(usize, &[f64])> = qs.iter().map(|q| (0, *q)).collect();
        let out = self.batch_logits(&mut tape, &p, &[prepared], &samples, arm)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn cache(&self, prepared: &PreparedObservation) -> Result<ScorerCache> {
        match self {
            Scorer::Graph(m) => Ok(ScorerCache::Graph(m.scene_cache(prepared)?)),
            Scorer::PointNet(m) => {
                let mut tape = Tape::new();
                let p = m.params.bind_frozen(&mut tape);
                let e = m.embed(&mut tape, &p, &[prepared])?;
                Ok(ScorerCache::PointNet(tape.value_shared(e)))
            }
        }
    }

    fn pointnet_eval(m: &PointNetModel, emb: &Arc<Tensor>, arm: &ArmModel, q: &[f64], grad: bool) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = m.params.bind_frozen(&mut tape);
        let e = tape.constant_shared(Arc::clone(emb));
        let row = Tensor::row_vector(m.robot_row(arm, q)?);
        let r = if grad { tape.param(row) } else { tape.constant(row) };
        let out = m.head(&mut tape, &p, e, &[0], r)?;
        let logit = tape.value(out).item();
        if !grad {
            return Ok((logit, Vec::new()));
        }
        let g = tape.backward(out);
        let gr = g.get(r).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; tape.shape(r)[1]]);
        Ok((logit, m.input_grad_to_q(arm, q, &gr)?))
    }

    pub fn logit_cached(&self, cache: &ScorerCache, arm: &ArmModel, q: &[f64]) -> Result<f64> {
        match (self, cache) {
            (Scorer::Graph(m), ScorerCache::Graph(c)) => m.logit_cached(c, arm, q),
            (Scorer::PointNet(m), ScorerCache::PointNet(e)) => Ok(Self::pointnet_eval(m, e, arm, q, false)?.0),
            _ => Err(Error::InvalidParameter("cache built by a different scorer".into())),
        }
    }

    pub fn logit_grad_cached(&self, cache: &ScorerCache, arm: &ArmModel, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        match (self, cache) {
            (Scorer::Graph(m), ScorerCache::Graph(c)) => m.logit_grad_cached(c, arm, q),
            (Scorer::PointNet(m), ScorerCache::PointNet(e)) => Self::pointnet_eval(m, e, arm, q, true),
            _ => Err(Error::InvalidParameter("cache built by a different scorer".into())),
        }
    }

    /// Start objective over one observation.
    pub fn objective<'a>(&'a self, obs: &LabeledPointCloud, arm: &'a ArmModel) -> Result<ScorerObjective<'a>> {
        let prepared = self.prepare(obs, arm)?;
        Ok(ScorerObjective {
            scorer: self,
            arm,
            cache: self.cache(&prepared)?,
        })
    }

    pub fn to_param_set(&self) -> Result<ParamSet> {
        match self {
            Scorer::Graph(m) => {
                let mut ps = m.params.clone();
                ps.meta = Some(serde_json::json!({
                    "model": "hgraph",
                    "config": serde_json::to_value(&m.config)?,
                }));
                Ok(ps)
            }
            Scorer::PointNet(m) => m.to_param_set(),
        }
    }

    pub fn from_param_set(ps: ParamSet) -> Result<Self> {
        let model = ps.meta.as_ref().and_then(|m| m.get("model")).and_then(|m| m.as_str());
        match model {
            Some("hgraph") => Ok(Scorer::Graph(AffordanceModel::from_params(ps)?)),
            Some("pointnet") => Ok(Scorer::PointNet(PointNetModel::from_params(ps)?)),
            _ => Err(Error::InvalidParameter("weight file holds no affordance scorer".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_param_set()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_param_set(ParamSet::load(path)?)
    }
}

/// A scorer bound to one observation, as an optimizer objective.
pub struct ScorerObjective<'a> {
    scorer: &'a Scorer,
    arm: &'a ArmModel,
    cache: ScorerCache,
}

impl StartObjective for ScorerObjective<'_> {
    fn logit(&self, q: &[f64]) -> Result<f64> {
        self.scorer.logit_cached(&self.cache, self.arm, q)
    }
    fn logit_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.scorer.logit_grad_cached(&self.cache, self.arm, q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Target samples per mini-batch; batches hold whole scenes.
    pub batch_size: usize,
    pub lr: f64,
    pub pos_weight: f64,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 32,
            lr: 1e-4,
            pos_weight: 1.0,
            seed: 0,
            val_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || !(self.lr > 0.0)
            || !(self.pos_weight > 0.0)
            || !(0.0..1.0).contains(&self.val_fraction)
        {
            return Err(Error::InvalidParameter(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub val_accuracy: f64,
}

/// Samples grouped by scene with the observation prepared once.
pub struct SceneGroup {
    pub prepared: PreparedObservation,
    pub samples: Vec<usize>,
}

/// Groups samples by scene, in first-appearance order.
pub fn group_by_scene(scorer: &Scorer, data: &[RolloutSample], arm: &ArmModel) -> Result<Vec<SceneGroup>> {
    let mut index: BTreeMap<(EnvFamily, SkillKind, u64), usize> = BTreeMap::new();
    let mut groups: Vec<SceneGroup> = Vec::new();
    for (i, s) in data.iter().enumerate() {
        match index.get(&s.scene_key()) {
            Some(&g) => groups[g].samples.push(i),
            None => {
                index.insert(s.scene_key(), groups.len());
                groups.push(SceneGroup {
                    prepared: scorer.prepare(&s.observation, arm)?,
                    samples: vec![i],
                });
            }
        }
    }
    Ok(groups)
}

/// Consecutive runs of groups holding at least `batch_size` samples.
fn make_batches(groups: &[usize], sizes: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut n = 0;
    for &g in groups {
        cur.push(g);
        n += sizes[g];
        if n >= batch_size {
            out.push(std::mem::take(&mut cur));
            n = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn batch_forward(
    scorer: &Scorer,
    tape: &mut Tape,
    p: &BoundParams,
    groups: &[SceneGroup],
    batch: &[usize],
    data: &[RolloutSample],
    arm: &ArmModel,
) -> Result<(Var, Vec<f64>)> {
    let scenes: Vec<&PreparedObservation> = batch.iter().map(|&g| &groups[g].prepared).collect();
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (si, &g) in batch.iter().enumerate() {
        for &i in &groups[g].samples {
            samples.push((si, &data[i].q.0[..]));
            labels.push(data[i].label as f64);
        }
    }
    Ok((scorer.batch_logits(tape, p, &scenes, &samples, arm)?, labels))
}

/// Logits of every sample, in dataset order.
pub fn predict_logits(scorer: &Scorer, data: &[RolloutSample], arm: &ArmModel) -> Result<Vec<f64>> {
    let groups = group_by_scene(scorer, data, arm)?;
    let mut out = vec![0.0; data.len()];
    let all: Vec<usize> = (0..groups.len()).collect();
    let sizes: Vec<usize> = groups.iter().map(|g| g.samples.len()).collect();
    for batch in make_batches(&all, &sizes, 64) {
        let mut tape = Tape::new();
        let p = scorer.params().bind_frozen(&mut tape);
        let (z, _) = batch_forward(scorer, &mut tape, &p, &groups, &batch, data, arm)?;
        let zs = tape.value(z).data();
        let mut k = 0;
        for &g in &batch {
            for &i in &groups[g].samples {
                out[i] = zs[k];
                k += 1;
            }
        }
    }
    Ok(out)
}

fn mean_bce(logits: &[f64], labels: &[f64], pos_weight: f64) -> f64 {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::col_vector(logits.to_vec()));
    tape.bce_with_logits(z, labels, pos_weight)
        .map(|l| tape.value(l).item())
        .unwrap_or(f64::NAN)
}

/// Scene-level train/validation split: indices of validation scenes' samples.
pub fn split_by_scene(data: &[RolloutSample], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut keys: Vec<_> = data.iter().map(RolloutSample::scene_key).collect();
    keys.sort();
    keys.dedup();
    keys.shuffle(&mut seed::rng(seed::derive(seed, &[tag("split")])));
    let n_val = ((keys.len() as f64) * val_fraction).round() as usize;
    let val: std::collections::BTreeSet<_> = keys[..n_val.min(keys.len())].iter().copied().collect();
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, s) in data.iter().enumerate() {
        if val.contains(&s.scene_key()) {
            va.push(i);
        } else {
            tr.push(i);
        }
    }
    (tr, va)
}

/// Trains `scorer` in place with Adam on weighted BCE over the logits.
/// Returns the per-epoch log (row 0 is the initialization) and leaves the
/// best-validation parameters in `scorer`.
pub fn train_scorer(
    scorer: &mut Scorer,
    data: &[RolloutSample],
    arm: &ArmModel,
    cfg: &TrainConfig,
) -> Result<Vec<TrainLogRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    let pos = data.iter().filter(|s| s.label == 1).count();
    if pos == 0 || pos == data.len() {
        return Err(Error::SingleClass);
    }
    let (tr_idx, va_idx) = split_by_scene(data, cfg.val_fraction, cfg.seed);
    let train: Vec<RolloutSample> = tr_idx.iter().map(|&i| data[i].clone()).collect();
    let val: Vec<RolloutSample> = va_idx.iter().map(|&i| data[i].clone()).collect();
    let groups = group_by_scene(scorer, &train, arm)?;
    let sizes: Vec<usize> = groups.iter().map(|g| g.samples.len()).collect();
    let train_labels: Vec<f64> = train.iter().map(|s| s.label as f64).collect();
    let val_labels: Vec<f64> = val.iter().map(|s| s.label as f64).collect();
    let val_y: Vec<u8> = val.iter().map(|s| s.label).collect();

    let eval_val = |scorer: &Scorer| -> Result<(f64, f64, f64)> {
        if val.is_empty() {
            return Ok((f64::NAN, f64::NAN, f64::NAN));
        }
        let z = predict_logits(scorer, &val, arm)?;
        let acc = z
            .iter()
            .zip(&val_y)
            .filter(|(z, y)| (**z >= 0.0) == (**y == 1))
            .count() as f64
            / z.len() as f64;
        Ok((mean_bce(&z, &val_labels, cfg.pos_weight), roc_auc(&z, &val_y).unwrap_or(f64::NAN), acc))
    };

    let mut log = Vec::new();
    let z0 = predict_logits(scorer, &train, arm)?;
    let (vl, va, vacc) = eval_val(scorer)?;
    log.push(TrainLogRow {
        epoch: 0,
        train_loss: mean_bce(&z0, &train_labels, cfg.pos_weight),
        val_loss: vl,
        val_auc: va,
        val_accuracy: vacc,
    });
    let mut best = (vl, scorer.params().clone());
    let mut adam = AdamState::new();
    let mut rng = seed::rng(seed::derive(cfg.seed, &[tag("train-order")]));
    let mut order: Vec<usize> = (0..groups.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        for batch in make_batches(&order, &sizes, cfg.batch_size) {
            let mut tape = Tape::new();
            let p = scorer.params().bind(&mut tape);
            let (z, labels) = batch_forward(scorer, &mut tape, &p, &groups, &batch, &train, arm)?;
            let loss = tape.bce_with_logits(z, &labels, cfg.pos_weight)?;
            loss_sum += tape.value(loss).item() * labels.len() as f64;
            n += labels.len();
            let mut g = tape.backward(loss);
            let grads = p.gradients(&tape, &mut g);
            drop(p);
            drop(tape);
            adam.step(scorer.params_mut(), &grads, cfg.lr)?;
        }
        let (vl, va, vacc) = eval_val(scorer)?;
        log.push(TrainLogRow {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss: vl,
            val_auc: va,
            val_accuracy: vacc,
        });
        log::info!("epoch {epoch}: train {:.4} val {vl:.4} auc {va:.4}", loss_sum / n as f64);
        if !(vl >= best.0) {
            best = (vl, scorer.params().clone());
        }
    }
    if !val.is_empty() {
        *scorer.params_mut() = best.1;
    }
    Ok(log)
}

/// Builds a scorer of `kind` and trains it.
pub fn train_affordance(
    kind: ScorerKind,
    config: HGraphConfig,
    data: &[RolloutSample],
    arm: &ArmModel,
    cfg: &TrainConfig,
) -> Result<(Scorer, Vec<TrainLogRow>)> {
    let mut scorer = Scorer::init(kind, config, arm, seed::derive(cfg.seed, &[tag("init")]))?;
    let log = train_scorer(&mut scorer, data, arm, cfg)?;
    Ok((scorer, log))
}

pub fn write_train_log(rows: &[TrainLogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Rank-statistic ROC-AUC with tied scores sharing their average rank.
/// `None` if either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * avg;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_score: f64,
    pub positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub n: usize,
    pub positive_rate: f64,
    pub mean_score: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub calibration: Vec<CalibrationBin>,
}

/// Accuracy at 0.5, ROC-AUC and a 10-bin reliability table from scores in [0, 1].
pub fn classifier_metrics(scores: &[f64], labels: &[u8]) -> Result<ClassifierMetrics> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset("no samples to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let n = scores.len();
    let mut bins: Vec<(usize, f64, f64)> = vec![(0, 0.0, 0.0); 10];
    for (&s, &y) in scores.iter().zip(labels) {
        let b = ((s * 10.0).floor() as usize).min(9);
        bins[b].0 += 1;
        bins[b].1 += s;
        bins[b].2 += y as f64;
    }
    let calibration = bins
        .iter()
        .enumerate()
        .map(|(i, &(c, s, p))| CalibrationBin {
            lo: i as f64 / 10.0,
            hi: (i + 1) as f64 / 10.0,
            count: c,
            mean_score: if c > 0 { s / c as f64 } else { 0.0 },
            positive_rate: if c > 0 { p / c as f64 } else { 0.0 },
        })
        .collect();
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, y)| (**s >= 0.5) == (**y == 1))
        .count();
    Ok(ClassifierMetrics {
        n,
        positive_rate: labels.iter().filter(|&&y| y == 1).count() as f64 / n as f64,
        mean_score: scores.iter().sum::<f64>() / n as f64,
        accuracy: correct as f64 / n as f64,
        auc: roc_auc(scores, labels),
        calibration,
    })
}

/// Metrics of a scorer on a dataset.
pub fn evaluate_classifier(scorer: &Scorer, data: &[RolloutSample], arm: &ArmModel) -> Result<ClassifierMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no samples to evaluate".into()));
    }
    let z = predict_logits(scorer, data, arm)?;
    let s: Vec<f64> = z.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
    let y: Vec<u8> = data.iter().map(|d| d.label).collect();
    classifier_metrics(&s, &y)
}
