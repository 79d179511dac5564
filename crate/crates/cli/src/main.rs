use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use skillstart::afford::{
    generate_dataset, load_jsonl, save_jsonl, train_affordance, validated_scene, write_train_log, DatasetConfig,
    RolloutSample, Scorer, TrainConfig,
};
use skillstart::bc::{generate_demos, train_bc_skill, BcConfig, BcPolicy};
use skillstart::experiment::{
    read_csv, train_cvae_on, write_outputs, Experiment, ExperimentConfig, Method, SummaryRow,
};
use skillstart::hgraph::HGraphConfig;
use skillstart::rrtc::{plan, PlanConfig, PlanOutcome};
use skillstart::scene::{generate_scene_with, observe, ObsConfig};
use skillstart::seed::{self, tag};
use skillstart::startopt::{solve_start, KnownObstacles, OptConfig};
use skillstart::tensor::ParamSet;
use skillstart::{ArmModel, EnvFamily, Error, Result, Scene, SceneConfig, SkillKind};

#[derive(Parser)]
#[command(name = "skillstart", version, about = "Learned start configurations for a priori skills")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and validate scenes, one JSON file each plus manifest.csv.
    GenScenes(GenScenes),
    /// Roll out the scripted skill from sampled starts into a JSONL dataset.
    GenRollouts(GenRollouts),
    /// Train an affordance scorer on a rollout dataset.
    Train(Train),
    /// Train a behaviour-cloned skill on scripted obstacle-free demos.
    TrainBc(TrainBc),
    /// Train the conditional VAE start generator.
    TrainCvae(TrainCvae),
    /// Optimize a start configuration for one scene.
    Solve(Solve),
    /// Plan a joint-space path on the coarse obstacle map of a scene.
    Plan(PlanCmd),
    /// Run an experiment: train what is missing, evaluate, write CSV and plots.
    Evaluate(Evaluate),
    /// Render plots from a summary CSV.
    Plot(PlotCmd),
    /// Print the structure of a weight file.
    ModelInspect(ModelInspect),
}

#[derive(Args)]
struct GenScenes {
    #[arg(long, value_delimiter = ',', default_value = "F1,F2,F3,F4,F5,F6")]
    families: Vec<EnvFamily>,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "grasp")]
    skill: SkillKind,
    /// Scripted-skill probes per scene for validation.
    #[arg(long, default_value_t = 40)]
    probes: usize,
    #[arg(long, env = "SKILLSTART_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GenRollouts {
    #[arg(long, value_delimiter = ',', default_value = "F1,F2,F3,F4,F5,F6")]
    families: Vec<EnvFamily>,
    #[arg(long, default_value_t = 60)]
    scenes_per_family: usize,
    #[arg(long, default_value_t = 10)]
    starts_per_scene: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "grasp")]
    skill: SkillKind,
    #[arg(long, default_value_t = 0.1)]
    negative_ratio: f64,
    #[arg(long, env = "SKILLSTART_WORKERS", default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 80)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_weights: PathBuf,
    /// Scorer variant: ours, eef-only, pn-joint or pn-cart.
    #[arg(long, default_value = "ours")]
    method: Method,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// Leave this family out of the training data.
    #[arg(long)]
    exclude_family: Option<EnvFamily>,
    /// Training log CSV; defaults to the weight path with a .csv extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainBc {
    #[arg(long, default_value_t = 500)]
    demos: usize,
    #[arg(long, default_value = "grasp")]
    skill: SkillKind,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_weights: PathBuf,
}

#[derive(Args)]
struct TrainCvae {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    exclude_family: Option<EnvFamily>,
    #[arg(long)]
    out_weights: PathBuf,
}

#[derive(Args)]
struct Solve {
    #[arg(long)]
    weights: PathBuf,
    /// Scene JSON as written by gen-scenes.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    n_starts: usize,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanCmd {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    q_start: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    q_goal: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    /// Experiment configuration (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<EnvFamily>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    scenes_per_family: Option<usize>,
    /// Behaviour-cloned skill weights to use instead of the scripted skill.
    #[arg(long)]
    bc_weights: Option<PathBuf>,
    #[arg(long, env = "SKILLSTART_WORKERS")]
    workers: Option<usize>,
    #[arg(long, env = "SKILLSTART_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args)]
struct PlotCmd {
    #[arg(long)]
    summary: PathBuf,
    #[arg(long, env = "SKILLSTART_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ModelInspect {
    #[arg(long)]
    weights: PathBuf,
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, s + "\n")?,
        None => println!("{s}"),
    }
    Ok(())
}

fn read_scene(path: &Path) -> Result<Scene> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn training_subset(data: Vec<RolloutSample>, exclude: Option<EnvFamily>) -> Result<Vec<RolloutSample>> {
    let out: Vec<RolloutSample> = data.into_iter().filter(|s| Some(s.family) != exclude).collect();
    if out.is_empty() {
        return Err(Error::EmptyDataset("no samples after filtering".into()));
    }
    Ok(out)
}

fn gen_scenes(a: GenScenes) -> Result<()> {
    let arm = ArmModel::default();
    let cfg = SceneConfig::default();
    std::fs::create_dir_all(&a.out_dir)?;
    let mut manifest = csv::Writer::from_path(a.out_dir.join("manifest.csv")).map_err(Error::from)?;
    manifest.write_record(["seed", "family", "validated", "file"]).map_err(Error::from)?;
    for family in a.families {
        for i in 0..a.count {
            let s = seed::derive(a.seed, &[tag("cli-scene"), family.index() as u64, i as u64]);
            let scene = generate_scene_with(family, a.skill, &arm, &cfg, s)?;
            let ok = validated_scene(family, a.skill, &arm, &cfg, a.probes, s).is_some();
            let name = format!("scene_{family:?}_{s:016x}.json");
            std::fs::write(a.out_dir.join(&name), serde_json::to_string_pretty(&scene)? + "\n")?;
            manifest
                .write_record([s.to_string(), format!("{family:?}"), (ok as u8).to_string(), name])
                .map_err(Error::from)?;
        }
    }
    manifest.flush()?;
    Ok(())
}

fn gen_rollouts(a: GenRollouts) -> Result<()> {
    let cfg = DatasetConfig {
        families: a.families,
        scenes_per_family: a.scenes_per_family,
        starts_per_scene: a.starts_per_scene,
        skill: a.skill,
        seed: a.seed,
        negative_ratio: a.negative_ratio,
        workers: a.workers,
        ..DatasetConfig::default()
    };
    let data = generate_dataset(&ArmModel::default(), &cfg)?;
    if let Some(dir) = a.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_jsonl(&data, &a.out)?;
    let pos = data.iter().filter(|s| s.label == 1).count();
    eprintln!("{} samples, {} positive", data.len(), pos);
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let kind = a
        .method
        .scorer_kind()
        .ok_or_else(|| Error::InvalidParameter(format!("`{}` is not a scorer", a.method)))?;
    let data = training_subset(load_jsonl(&a.dataset)?, a.exclude_family)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let cfg = HGraphConfig {
        hidden: a.hidden,
        ..HGraphConfig::default()
    };
    let (scorer, log) = train_affordance(kind, cfg, &data, &ArmModel::default(), &tc)?;
    scorer.save(&a.out_weights)?;
    write_train_log(&log, &a.log.unwrap_or_else(|| a.out_weights.with_extension("csv")))?;
    if let Some(best) = log.iter().skip(1).min_by(|x, y| x.val_loss.total_cmp(&y.val_loss)) {
        eprintln!("best epoch {}: val loss {:.4}, val auc {:.3}", best.epoch, best.val_loss, best.val_auc);
    }
    Ok(())
}

fn train_bc(a: TrainBc) -> Result<()> {
    let cfg = BcConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        ..BcConfig::default()
    };
    let arm = ArmModel::default();
    let demos = generate_demos(&arm, a.skill, a.demos, &cfg, seed::derive(a.seed, &[tag("demos")]))?;
    let (policy, log) = train_bc_skill(&demos, &cfg)?;
    policy.to_param_set()?.save(&a.out_weights)?;
    let mut w = csv::Writer::from_path(a.out_weights.with_extension("csv")).map_err(Error::from)?;
    for r in &log {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}

fn train_cvae(a: TrainCvae) -> Result<()> {
    let data = training_subset(load_jsonl(&a.dataset)?, a.exclude_family)?;
    let mut cfg = ExperimentConfig::default();
    cfg.cvae.epochs = a.epochs;
    cfg.cvae.lr = a.lr;
    cfg.train.seed = a.seed;
    let model = train_cvae_on(&data, &cfg)?;
    model.to_param_set()?.save(&a.out_weights)
}

fn solve(a: Solve) -> Result<()> {
    let arm = ArmModel::default();
    let scene = read_scene(&a.scene)?;
    let scorer = Scorer::load(&a.weights)?;
    let obs = observe(&scene, &ObsConfig::default(), seed::derive(a.seed, &[tag("obs")]))?;
    let cfg = OptConfig {
        n_starts: a.n_starts,
        ..OptConfig::default()
    };
    let known = KnownObstacles::from_observation_with_margin(&obs, scene.table_y, cfg.box_margin);
    let obj = scorer.objective(&obs, &arm)?;
    let r = solve_start(&obj, &obs, &arm, &known, &cfg, seed::derive(a.seed, &[tag("start")]))?;
    write_json(&r, a.json_out.as_deref())
}

fn plan_cmd(a: PlanCmd) -> Result<()> {
    let arm = ArmModel::default();
    let scene = read_scene(&a.scene)?;
    let obs = observe(&scene, &ObsConfig::default(), seed::derive(a.seed, &[tag("obs")]))?;
    let known = KnownObstacles::from_observation(&obs, scene.table_y);
    let cfg = PlanConfig {
        seed: a.seed,
        ..PlanConfig::default()
    };
    match plan(&arm, &known, &a.q_start, &a.q_goal, &cfg)? {
        PlanOutcome::Path(p) => write_json(&p, a.json_out.as_deref()),
        PlanOutcome::Infeasible(r) => Err(Error::Unsatisfiable(format!("no path: {r}"))),
    }
}

fn evaluate(a: Evaluate) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = a.methods {
        cfg.methods = m;
    }
    if let Some(f) = a.families {
        cfg.families = f;
    }
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(n) = a.scenes_per_family {
        cfg.scenes_per_family = n;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if a.bc_weights.is_some() {
        cfg.bc_weights = a.bc_weights;
    }
    if a.dump_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let mut exp = Experiment::new(cfg, &a.out_dir)?;
    let rows = exp.run()?;
    let summary = write_outputs(&exp.cfg, &rows, &a.out_dir)?;
    for s in &summary {
        println!(
            "{:<9} {:?} {:>5.1} ± {:>4.1}",
            s.method,
            s.family,
            100.0 * s.success_mean,
            100.0 * s.success_std
        );
    }
    eprintln!("timings: {}", serde_json::to_string(&exp.timings)?);
    Ok(())
}

fn plot_cmd(a: PlotCmd) -> Result<()> {
    let rows: Vec<SummaryRow> = read_csv(&a.summary)?;
    for p in skillstart::plot::emit_plots(&rows, &a.out_dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn model_inspect(a: ModelInspect) -> Result<()> {
    let ps = ParamSet::load(&a.weights)?;
    if let Some(meta) = &ps.meta {
        println!("meta: {meta}");
    }
    let kind = ps
        .meta
        .as_ref()
        .and_then(|m| m.get("model"))
        .and_then(|m| m.as_str())
        .unwrap_or("unknown")
        .to_string();
    match kind.as_str() {
        "bc" => {
            let p = BcPolicy::from_params(ps.clone())?;
            println!("bc policy for {}", p.kind);
        }
        "hgraph" | "pointnet" => {
            let s = Scorer::from_param_set(ps.clone())?;
            println!("scorer {:?}", s.kind());
        }
        _ => {}
    }
    for name in ps.names() {
        let t = ps.get(name)?;
        println!("{name:<28} {:>4} x {:<4}", t.rows(), t.cols());
    }
    println!("total scalars: {}", ps.num_scalars());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let r = match cli.command {
        Command::GenScenes(a) => gen_scenes(a),
        Command::GenRollouts(a) => gen_rollouts(a),
        Command::Train(a) => train(a),
        Command::TrainBc(a) => train_bc(a),
        Command::TrainCvae(a) => train_cvae(a),
        Command::Solve(a) => solve(a),
        Command::Plan(a) => plan_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Plot(a) => plot_cmd(a),
        Command::ModelInspect(a) => model_inspect(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
