//! Experiment harness: datasets, per-method training under the pooled or
//! leave-one-family-out protocol, and closed-loop evaluation
//! (start selection, planning, plan execution, skill execution).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::afford::{
    generate_dataset, load_jsonl, parallel_map, save_jsonl, train_affordance, validated_scene_seeds,
    write_train_log, DatasetConfig, RolloutSample, Scorer, ScorerKind, TrainConfig,
};
use crate::arm::{ArmModel, JointConfig};
use crate::bc::BcPolicy;
use crate::baselines::{naive_start, train_cvae, CvaeExample, CvaeModel, CvaeTrainConfig};
use crate::error::{Error, Result};
use crate::geom::Scene;
use crate::hgraph::{HGraphConfig, PreparedObservation};
use crate::rrtc::{plan, PlanConfig, PlanOutcome};
use crate::scene::{observe, EnvFamily, ObsConfig, SceneConfig};
use crate::seed::{self, tag};
use crate::skill::{execute_skill, FailureReason, ScriptedPolicy, SkillKind, SkillPolicy, MAX_STEPS};
use crate::startopt::{solve_start, KnownObstacles, OptConfig};
use crate::tensor::ParamSet;

pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ours,
    Naive,
    Cvae,
    PnJoint,
    PnCart,
    EefOnly,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ours,
        Method::Naive,
        Method::Cvae,
        Method::PnJoint,
        Method::PnCart,
        Method::EefOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Naive => "naive",
            Method::Cvae => "cvae",
            Method::PnJoint => "pn-joint",
            Method::PnCart => "pn-cart",
            Method::EefOnly => "eef-only",
        }
    }

    pub fn scorer_kind(self) -> Option<ScorerKind> {
        match self {
            Method::Ours => Some(ScorerKind::Full),
            Method::EefOnly => Some(ScorerKind::EefOnly),
            Method::PnJoint => Some(ScorerKind::PointNetJoint),
            Method::PnCart => Some(ScorerKind::PointNetCartesian),
            Method::Naive | Method::Cvae => None,
        }
    }

    pub fn is_learned(self) -> bool {
        self != Method::Naive
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// One model per method trained on every family.
    Pooled,
    /// One model per method and held-out family, trained on the other five.
    Lofo,
}

/// Rollout-dataset section of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub scenes_per_family: usize,
    pub starts_per_scene: usize,
    pub seed: u64,
    pub negative_ratio: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            scenes_per_family: 60,
            starts_per_scene: 10,
            seed: 1000,
            negative_ratio: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub families: Vec<EnvFamily>,
    pub scenes_per_family: usize,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub skill: SkillKind,
    pub protocol: Protocol,
    pub workers: usize,
    pub validation_probes: usize,
    pub max_steps: usize,
    pub cvae_samples: usize,
    pub arm: ArmModel,
    pub obs: ObsConfig,
    pub scene: SceneConfig,
    pub data: DataSection,
    pub model: HGraphConfig,
    pub train: TrainConfig,
    pub cvae: CvaeTrainConfig,
    pub opt: OptConfig,
    pub plan: PlanConfig,
    /// Weights of a behaviour-cloned skill to run instead of the scripted one.
    pub bc_weights: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            families: EnvFamily::ALL.to_vec(),
            scenes_per_family: 100,
            seeds: (0..6).collect(),
            methods: Method::ALL.to_vec(),
            skill: SkillKind::Grasp,
            protocol: Protocol::Lofo,
            workers: 1,
            validation_probes: 40,
            max_steps: MAX_STEPS,
            cvae_samples: 10,
            arm: ArmModel::default(),
            obs: ObsConfig::default(),
            scene: SceneConfig::default(),
            data: DataSection::default(),
            model: HGraphConfig {
                hidden: 32,
                ..HGraphConfig::default()
            },
            train: TrainConfig::default(),
            cvae: CvaeTrainConfig::default(),
            opt: OptConfig::default(),
            plan: PlanConfig::default(),
            bc_weights: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidParameter(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidParameter(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidParameter("empty method list".into()));
        }
        if self.families.is_empty() || self.seeds.is_empty() || self.scenes_per_family == 0 {
            return Err(Error::InvalidParameter("empty family, seed or scene list".into()));
        }
        self.arm.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.opt.validate()?;
        self.plan.validate()
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            families: EnvFamily::ALL.to_vec(),
            scenes_per_family: self.data.scenes_per_family,
            starts_per_scene: self.data.starts_per_scene,
            skill: self.skill,
            seed: self.data.seed,
            negative_ratio: self.data.negative_ratio,
            validation_probes: self.validation_probes,
            max_steps: self.max_steps,
            workers: self.workers,
            obs: self.obs.clone(),
            scene: self.scene.clone(),
            ..DatasetConfig::default()
        }
    }

    /// Training-set families of the model used on `family`.
    pub fn training_families(&self, family: EnvFamily) -> Vec<EnvFamily> {
        match self.protocol {
            Protocol::Pooled => EnvFamily::ALL.to_vec(),
            Protocol::Lofo => EnvFamily::ALL.into_iter().filter(|&f| f != family).collect(),
        }
    }

    /// Model slot name: `all` when pooled, else the held-out family.
    pub fn model_slot(&self, family: EnvFamily) -> String {
        match self.protocol {
            Protocol::Pooled => "all".into(),
            Protocol::Lofo => format!("{family:?}"),
        }
    }
}

/// 64-bit FNV-1a of a string.
pub fn fingerprint(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn json_fingerprint<T: Serialize>(v: &T) -> Result<u64> {
    Ok(fingerprint(&serde_json::to_string(v)?))
}

/// How a trial ended; every non-success has exactly one reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Success,
    Collision,
    Timeout,
    LostSight,
    NoStart,
    PlanInfeasible,
    PlanCollision,
}

/// Per (method, family, seed) counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub method: Method,
    pub family: EnvFamily,
    pub skill: SkillKind,
    pub seed: u64,
    pub n_scenes: usize,
    pub successes: usize,
    pub collision: usize,
    pub timeout: usize,
    pub lost_sight: usize,
    pub no_start: usize,
    pub plan_infeasible: usize,
    pub plan_collision: usize,
}

impl ResultRow {
    pub fn new(method: Method, family: EnvFamily, skill: SkillKind, seed: u64, outcomes: &[TrialOutcome]) -> Self {
        let c = |o: TrialOutcome| outcomes.iter().filter(|&&x| x == o).count();
        ResultRow {
            schema_version: CSV_SCHEMA_VERSION,
            method,
            family,
            skill,
            seed,
            n_scenes: outcomes.len(),
            successes: c(TrialOutcome::Success),
            collision: c(TrialOutcome::Collision),
            timeout: c(TrialOutcome::Timeout),
            lost_sight: c(TrialOutcome::LostSight),
            no_start: c(TrialOutcome::NoStart),
            plan_infeasible: c(TrialOutcome::PlanInfeasible),
            plan_collision: c(TrialOutcome::PlanCollision),
        }
    }

    pub fn failures(&self) -> usize {
        self.collision + self.timeout + self.lost_sight + self.no_start + self.plan_infeasible + self.plan_collision
    }

    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.n_scenes.max(1) as f64
    }
}

/// A trained start selector.
pub enum StartModel {
    Naive,
    Scorer(Scorer),
    Cvae(CvaeModel),
}

/// Everything a trial needs besides the model.
pub struct TrialContext<'a> {
    pub arm: &'a ArmModel,
    pub scene: &'a Scene,
    pub skill: SkillKind,
    pub scene_cfg: &'a SceneConfig,
    pub obs_cfg: &'a ObsConfig,
    pub opt: &'a OptConfig,
    pub plan: &'a PlanConfig,
    pub cvae_samples: usize,
    pub max_steps: usize,
    pub seed: u64,
}

/// Details of one trial, for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub outcome: TrialOutcome,
    pub start: Option<JointConfig>,
    pub optimizer_feasible: Option<bool>,
}

fn map_skill_failure(r: FailureReason) -> TrialOutcome {
    match r {
        FailureReason::None => TrialOutcome::Success,
        FailureReason::Collision => TrialOutcome::Collision,
        FailureReason::Timeout => TrialOutcome::Timeout,
        FailureReason::LostSight => TrialOutcome::LostSight,
    }
}

/// True if the arm hits the true scene anywhere along the path, checked at
/// `resolution` spacing.
pub fn path_collides(arm: &ArmModel, scene: &Scene, path: &[JointConfig], resolution: f64) -> bool {
    let hit = |q: &[f64]| arm.fk_in_collision(&arm.fk_unchecked(q), &scene.obstacles, scene.table_y);
    if path.first().is_some_and(|q| hit(q)) {
        return true;
    }
    path.windows(2).any(|w| {
        let d = crate::rrtc::dist(&w[0], &w[1]);
        let n = (d / resolution).ceil().max(1.0) as usize;
        (1..=n).any(|i| {
            let t = i as f64 / n as f64;
            let q: Vec<f64> = w[0].iter().zip(w[1].iter()).map(|(a, b)| a + (b - a) * t).collect();
            hit(&q)
        })
    })
}

/// One closed-loop trial: start selection, planning from the home
/// configuration on the coarse map, plan execution against the true scene,
/// then the skill.
pub fn run_trial<P: SkillPolicy>(model: &StartModel, ctx: &TrialContext<'_>, policy: &P) -> Result<TrialRecord> {
    let arm = ctx.arm;
    let obs = observe(ctx.scene, ctx.obs_cfg, seed::derive(ctx.seed, &[tag("obs")]))?;
    let known = KnownObstacles::from_observation_with_margin(&obs, ctx.scene.table_y, ctx.opt.box_margin);
    let start_seed = seed::derive(ctx.seed, &[tag("start")]);
    let mut optimizer_feasible = None;
    let start = match model {
        StartModel::Naive => match naive_start(arm, ctx.scene, start_seed) {
            Ok(q) => Some(q),
            Err(Error::Unsatisfiable(_)) => None,
            Err(e) => return Err(e),
        },
        StartModel::Scorer(s) => {
            let obj = s.objective(&obs, arm)?;
            match solve_start(&obj, &obs, arm, &known, ctx.opt, start_seed) {
                Ok(r) => {
                    optimizer_feasible = Some(r.feasible);
                    Some(r.q_star)
                }
                Err(Error::NoStart(_)) => None,
                Err(e) => return Err(e),
            }
        }
        StartModel::Cvae(m) => m.sample_start(&obs, arm, &known, ctx.cvae_samples, start_seed)?,
    };
    let record = |outcome, start: Option<JointConfig>| TrialRecord {
        outcome,
        start,
        optimizer_feasible,
    };
    let Some(q) = start else {
        return Ok(record(TrialOutcome::NoStart, None));
    };
    let plan_cfg = PlanConfig {
        seed: seed::derive(ctx.seed, &[tag("plan")]),
        ..ctx.plan.clone()
    };
    let path = match plan(arm, &known, &ctx.scene_cfg.home, &q, &plan_cfg)? {
        PlanOutcome::Path(p) => p,
        PlanOutcome::Infeasible(_) => return Ok(record(TrialOutcome::PlanInfeasible, Some(q))),
    };
    if path_collides(arm, ctx.scene, &path.0, plan_cfg.resolution) {
        return Ok(record(TrialOutcome::PlanCollision, Some(q)));
    }
    let r = execute_skill(arm, ctx.scene, &q, ctx.skill, policy, ctx.max_steps)?;
    Ok(record(map_skill_failure(r.failure_reason), Some(q)))
}

/// Evaluation scenes of one family and seed.
pub fn evaluation_scenes(cfg: &ExperimentConfig, family: EnvFamily, seed: u64) -> Result<Vec<(u64, Scene)>> {
    validated_scene_seeds(
        family,
        cfg.skill,
        &cfg.arm,
        &cfg.scene,
        cfg.validation_probes,
        seed::derive(seed, &[tag("evaluation")]),
        cfg.scenes_per_family,
        10,
        cfg.workers,
    )
}

/// Wall-clock timings of a run (not part of the deterministic outputs).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunTimings {
    pub dataset_s: f64,
    pub training_s: BTreeMap<String, f64>,
    pub evaluation_s: BTreeMap<String, f64>,
    pub total_s: f64,
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub out_dir: PathBuf,
    pub timings: RunTimings,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Experiment {
            cfg,
            out_dir: out_dir.into(),
            timings: RunTimings::default(),
        })
    }

    /// Dataset settings that change its content; the worker count does not.
    fn data_key(&self) -> DatasetConfig {
        DatasetConfig {
            workers: 1,
            ..self.cfg.dataset_config()
        }
    }

    fn dataset_path(&self) -> Result<PathBuf> {
        let fp = json_fingerprint(&self.data_key())?;
        Ok(self.out_dir.join("data").join(format!("rollouts_{fp:016x}.jsonl")))
    }

    /// The rollout dataset, generated on first use.
    pub fn dataset(&mut self) -> Result<Vec<RolloutSample>> {
        let path = self.dataset_path()?;
        if path.exists() {
            return load_jsonl(&path);
        }
        let t = Instant::now();
        let data = generate_dataset(&self.cfg.arm, &self.cfg.dataset_config())?;
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        save_jsonl(&data, &path)?;
        self.timings.dataset_s += t.elapsed().as_secs_f64();
        Ok(data)
    }

    pub fn model_path(&self, method: Method, slot: &str) -> Result<PathBuf> {
        let fp = json_fingerprint(&(
            self.data_key(),
            &self.cfg.model,
            &self.cfg.train,
            &self.cfg.cvae,
            self.cfg.protocol,
            &self.cfg.arm,
        ))?;
        Ok(self
            .out_dir
            .join("models")
            .join(format!("{}_{slot}_{fp:016x}.json", method.name())))
    }

    /// The model of `method` for evaluation on `family`, trained on first use.
    pub fn model(&mut self, method: Method, family: EnvFamily, data: &[RolloutSample]) -> Result<StartModel> {
        if method == Method::Naive {
            return Ok(StartModel::Naive);
        }
        let slot = self.cfg.model_slot(family);
        let path = self.model_path(method, &slot)?;
        if path.exists() {
            let ps = ParamSet::load(&path)?;
            return Ok(match method {
                Method::Cvae => StartModel::Cvae(CvaeModel::from_params(ps)?),
                _ => StartModel::Scorer(Scorer::from_param_set(ps)?),
            });
        }
        let fams = self.cfg.training_families(family);
        let subset: Vec<RolloutSample> = data.iter().filter(|s| fams.contains(&s.family)).cloned().collect();
        let t = Instant::now();
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        let model = match method.scorer_kind() {
            Some(kind) => {
                let (scorer, log) = train_affordance(kind, self.cfg.model.clone(), &subset, &self.cfg.arm, &self.cfg.train)?;
                write_train_log(&log, &path.with_extension("csv"))?;
                scorer.save(&path)?;
                StartModel::Scorer(scorer)
            }
            None => {
                let model = train_cvae_on(&subset, &self.cfg)?;
                model.to_param_set()?.save(&path)?;
                StartModel::Cvae(model)
            }
        };
        self.timings
            .training_s
            .insert(format!("{}_{slot}", method.name()), t.elapsed().as_secs_f64());
        Ok(model)
    }

    /// Runs every requested (method, family, seed) cell.
    pub fn run(&mut self) -> Result<Vec<ResultRow>> {
        match &self.cfg.bc_weights {
            Some(path) => {
                let policy = BcPolicy::from_params(ParamSet::load(path)?)?;
                if policy.kind != self.cfg.skill {
                    return Err(Error::InvalidParameter("bc policy was trained for another skill".into()));
                }
                self.run_with(&policy)
            }
            None => self.run_with(&ScriptedPolicy::default()),
        }
    }

    pub fn run_with<P: SkillPolicy + Sync>(&mut self, policy: &P) -> Result<Vec<ResultRow>> {
        let t0 = Instant::now();
        let data = if self.cfg.methods.iter().any(|m| m.is_learned()) {
            self.dataset()?
        } else {
            Vec::new()
        };
        let mut scenes = BTreeMap::new();
        for &family in &self.cfg.families {
            for &seed in &self.cfg.seeds {
                scenes.insert((family, seed), evaluation_scenes(&self.cfg, family, seed)?);
            }
        }
        let mut rows = Vec::new();
        for &method in &self.cfg.methods.clone() {
            for &family in &self.cfg.families.clone() {
                let model = self.model(method, family, &data)?;
                let t = Instant::now();
                for &seed in &self.cfg.seeds {
                    let list = &scenes[&(family, seed)];
                    let cfg = &self.cfg;
                    let outcomes = parallel_map(list, cfg.workers, |(scene_seed, scene)| {
                        let ctx = TrialContext {
                            arm: &cfg.arm,
                            scene,
                            skill: cfg.skill,
                            scene_cfg: &cfg.scene,
                            obs_cfg: &cfg.obs,
                            opt: &cfg.opt,
                            plan: &cfg.plan,
                            cvae_samples: cfg.cvae_samples,
                            max_steps: cfg.max_steps,
                            seed: seed::derive(*scene_seed, &[tag("trial")]),
                        };
                        run_trial(&model, &ctx, policy).map(|r| r.outcome)
                    });
                    let outcomes: Vec<TrialOutcome> = outcomes.into_iter().collect::<Result<_>>()?;
                    rows.push(ResultRow::new(method, family, self.cfg.skill, seed, &outcomes));
                }
                *self
                    .timings
                    .evaluation_s
                    .entry(method.name().to_string())
                    .or_default() += t.elapsed().as_secs_f64();
            }
        }
        self.timings.total_s += t0.elapsed().as_secs_f64();
        Ok(rows)
    }
}

/// Trains the CVAE on the successful (non-injected) rollouts of `data`.
pub fn train_cvae_on(data: &[RolloutSample], cfg: &ExperimentConfig) -> Result<CvaeModel> {
    let pos: Vec<&RolloutSample> = data.iter().filter(|s| s.label == 1 && !s.injected).collect();
    let mut prepared: BTreeMap<(EnvFamily, SkillKind, u64), PreparedObservation> = BTreeMap::new();
    for s in &pos {
        if !prepared.contains_key(&s.scene_key()) {
            let p = crate::hgraph::prepare_observation(&s.observation, cfg.arm.base, &cfg.model)?;
            prepared.insert(s.scene_key(), p);
        }
    }
    let examples: Vec<CvaeExample<'_>> = pos
        .iter()
        .map(|s| CvaeExample {
            prepared: &prepared[&s.scene_key()],
            q: &s.q.0,
        })
        .collect();
    let tc = CvaeTrainConfig {
        seed: seed::derive(cfg.train.seed, &[tag("cvae")]),
        ..cfg.cvae.clone()
    };
    Ok(train_cvae(&examples, cfg.model.clone(), cfg.arm.dof(), &tc)?.0)
}

/// Mean and population standard deviation of per-seed success rates per
/// (method, family).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub family: EnvFamily,
    pub skill: SkillKind,
    pub n_seeds: usize,
    pub success_mean: f64,
    pub success_std: f64,
    pub plan_collision_mean: f64,
    pub no_start_mean: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(Method, EnvFamily, SkillKind), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.method, r.family, r.skill)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((method, family, skill), rs)| {
            let rate = |f: &dyn Fn(&ResultRow) -> usize| -> Vec<f64> {
                rs.iter().map(|r| f(r) as f64 / r.n_scenes.max(1) as f64).collect()
            };
            let (m, s) = mean_std(&rate(&|r| r.successes));
            SummaryRow {
                method,
                family,
                skill,
                n_seeds: rs.len(),
                success_mean: m,
                success_std: s,
                plan_collision_mean: mean_std(&rate(&|r| r.plan_collision)).0,
                no_start_mean: mean_std(&rate(&|r| r.no_start)).0,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Writes `results.csv`, `summary.csv`, the plots and the configuration
/// into `dir`.
pub fn write_outputs(cfg: &ExperimentConfig, rows: &[ResultRow], dir: &Path) -> Result<Vec<SummaryRow>> {
    std::fs::create_dir_all(dir)?;
    let summary = summarize(rows);
    write_csv(rows, &dir.join("results.csv"))?;
    write_csv(&summary, &dir.join("summary.csv"))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    crate::plot::emit_plots(&summary, &dir.join("plots"))?;
    Ok(summary)
}
