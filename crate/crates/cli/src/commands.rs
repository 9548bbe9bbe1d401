use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use mcpersona::data::io::{load_scenario, read_json, save_scenario, write_json};
use mcpersona::data::{build_all, generate_synthetic_scenario, DataConfig, Scenario, ScenarioSpec, TemplatePool, TrainSample};
use mcpersona::eval::{compose_suite, evaluate, grounding_banks, summarize, validate_suite, EvalSuite};
use mcpersona::grounding::ground;
use mcpersona::persist::{
    bundled_base, load_banks, load_base, load_checkpoint, save_banks, save_base, save_checkpoint, write_atomic,
};
use mcpersona::pretrain::{pretrain, PretrainConfig};
use mcpersona::trainer::{train, InitMode, TrainConfig};
use mcpersona::vision::{load_rgb, png_bytes, TowerConfig, VisionTower};
use mcpersona::vlm::{BaseModel, ModelConfig};
use serde::Serialize;

use crate::config::{Invalid, RunConfig};
use crate::{Cli, Command, Common};

pub const TRAIN_QA: &str = "qa/train.json";
pub const SUITE_QA: &str = "qa/suite.json";
pub const BANKS: &str = "banks";

pub fn checkpoint_stem(seed: u64) -> String {
    format!("seed-{seed}")
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(t) = common.tau {
        cfg.grounding.tau = t;
    }
    if let Some(g) = common.gamma {
        cfg.grounding.gamma = g;
    }
    if let Some(k) = common.k {
        cfg.train.k = k;
    }
    if let Some(i) = common.init {
        cfg.train.init = i;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::BuildDataset { out, concepts, images, joint_mode } => {
            let out = out.unwrap_or_else(|| cfg.paths.scenario.clone());
            let seed = cli.common.seed.unwrap_or(0);
            build_dataset(&out, concepts as usize, images as usize, seed, joint_mode.unwrap_or(cfg.data.joint_mode))
        }
        Command::Train => {
            for seed in &cfg.seeds {
                train_seed(&cfg, TrainConfig { seed: *seed, ..cfg.train }, &cfg.paths.checkpoints)?;
            }
            Ok(())
        }
        Command::Ground { image, out } => {
            let out = out.unwrap_or_else(|| cfg.paths.reports.join("ground"));
            cmd_ground(&cfg, &image, &out)
        }
        Command::Evaluate => cmd_evaluate(&cfg),
        Command::AblateInit => cmd_ablate(&cfg),
        Command::Pretrain { out, steps } => {
            let mut pcfg = PretrainConfig::default();
            if let Some(s) = steps {
                pcfg.steps = s;
            }
            let tcfg = TowerConfig::default();
            let model = pretrain(ModelConfig::default(), tcfg, &pcfg)?;
            save_base(&model, &tcfg, &out)?;
            info!("wrote base model to {}", out.display());
            Ok(())
        }
    }
}

pub fn build_dataset(out: &Path, m: usize, n: usize, seed: u64, joint_mode: mcpersona::data::JointMode) -> Result<()> {
    let scenario = generate_synthetic_scenario(&ScenarioSpec::new(m, n, seed))?;
    let samples = build_all(&scenario, &TemplatePool::default(), &DataConfig { joint_mode, seed })?;
    let suite = compose_suite(&scenario)?;
    validate_suite(&suite, m)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_scenario(&scenario, out)?;
    write_json(&out.join(TRAIN_QA), &samples)?;
    write_json(&out.join(SUITE_QA), &suite)?;
    info!("wrote scenario {} with {} training samples to {}", scenario.id, samples.len(), out.display());
    Ok(())
}

fn base(cfg: &RunConfig) -> Result<(BaseModel, VisionTower)> {
    let (model, tcfg) = match &cfg.paths.base_model {
        Some(p) => load_base(p).with_context(|| format!("loading base model {}", p.display()))?,
        None => bundled_base()?,
    };
    let tower = tcfg.build(model.dim());
    Ok((model, tower))
}

fn scenario(cfg: &RunConfig) -> Result<Scenario> {
    let dir = &cfg.paths.scenario;
    load_scenario(dir).with_context(|| format!("loading scenario from {}", dir.display()))
}

fn samples(cfg: &RunConfig) -> Result<Vec<TrainSample>> {
    let path = cfg.paths.scenario.join(TRAIN_QA);
    read_json(&path).with_context(|| format!("reading {}", path.display()))
}

/// Trains one checkpoint and refreshes the grounding banks next to it.
pub fn train_seed(cfg: &RunConfig, tcfg: TrainConfig, dir: &Path) -> Result<Vec<f64>> {
    let (model, tower) = base(cfg)?;
    let sc = scenario(cfg)?;
    let samples = samples(cfg)?;
    info!("training seed {} on {} samples ({:?} init, k={})", tcfg.seed, samples.len(), tcfg.init, tcfg.k);
    let ckpt = train(&model, &tower, &sc, &samples, &tcfg)?;
    save_checkpoint(&ckpt, dir, &checkpoint_stem(tcfg.seed))?;
    save_banks(&grounding_banks(&tower, &sc, tcfg.n)?, dir, BANKS)?;
    info!("seed {} loss history {:?}", tcfg.seed, ckpt.loss_history);
    Ok(ckpt.loss_history)
}

#[derive(Debug, Serialize)]
struct GroundReport<'a> {
    detections: &'a [mcpersona::grounding::Detection],
    prompt: &'a str,
}

fn cmd_ground(cfg: &RunConfig, image: &Path, out: &Path) -> Result<()> {
    let (_, tower) = base(cfg)?;
    let dir = &cfg.paths.checkpoints;
    let seed = cfg.seeds[0];
    let ckpt = load_checkpoint(dir, &checkpoint_stem(seed)).with_context(|| format!("loading checkpoint from {}", dir.display()))?;
    let banks = load_banks(dir, BANKS).with_context(|| format!("loading banks from {}", dir.display()))?;
    let img = load_rgb(image).with_context(|| format!("reading image {}", image.display()))?;
    let g = ground(&tower.encoder, &banks, &ckpt.identifiers, &img, &cfg.grounding)?;
    let report = serde_json::to_string_pretty(&GroundReport { detections: &g.detections, prompt: &g.prompt })? + "\n";
    let png = png_bytes(&g.annotated)?;
    write_atomic(&out.join("annotated.png"), &png)?;
    write_atomic(&out.join("detections.json"), report.as_bytes())?;
    write_atomic(&out.join("prompt.txt"), format!("{}\n", g.prompt).as_bytes())?;
    for d in &g.detections {
        info!("{}: present={} location={:?} max={:.3}", d.concept, d.present, d.location, d.max_confidence);
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let (model, tower) = base(cfg)?;
    let sc = scenario(cfg)?;
    let path = cfg.paths.scenario.join(SUITE_QA);
    let suite: EvalSuite = read_json(&path).with_context(|| format!("reading {}", path.display()))?;
    validate_suite(&suite, sc.m())?;
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let ckpt = load_checkpoint(&cfg.paths.checkpoints, &checkpoint_stem(seed))
            .with_context(|| format!("loading checkpoint for seed {seed}"))?;
        if ckpt.identifiers != sc.identifiers() {
            return Err(Invalid(format!("checkpoint for seed {seed} belongs to a different scenario")).into());
        }
        let (report, audit) = evaluate(&model, &tower, &sc, &ckpt.theta, &suite, &cfg.grounding, ckpt.config.n, seed)?;
        let stem = checkpoint_stem(seed);
        write_json(&cfg.paths.reports.join(format!("{stem}.json")), &report)?;
        let mut lines = String::new();
        for a in &audit {
            lines.push_str(&serde_json::to_string(a)?);
            lines.push('\n');
        }
        write_atomic(&cfg.paths.reports.join(format!("{stem}.audit.jsonl")), lines.as_bytes())?;
        info!("seed {seed}: recognition {:.3}", report.recognition_overall);
        reports.push(report);
    }
    write_json(&cfg.paths.reports.join("summary.json"), &summarize(&reports)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationArm {
    seed: u64,
    kmeans: Vec<f64>,
    random: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct Ablation {
    /// Epoch whose mean loss is compared (1-based).
    epoch: usize,
    kmeans_wins: usize,
    runs: Vec<AblationArm>,
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let dir: PathBuf = cfg.paths.reports.join("ablation");
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let arm = |init| train_seed(cfg, TrainConfig { seed, init, ..cfg.train }, &dir.join(format!("{init:?}").to_lowercase()));
        runs.push(AblationArm { seed, kmeans: arm(InitMode::Kmeans)?, random: arm(InitMode::Random)? });
    }
    let epoch = cfg.train.epochs.min(3);
    let kmeans_wins = runs.iter().filter(|r| r.kmeans[epoch - 1] <= r.random[epoch - 1]).count();
    info!("k-means init reached a lower epoch-{epoch} loss in {kmeans_wins} of {} seeds", runs.len());
    write_json(&cfg.paths.reports.join("ablation.json"), &Ablation { epoch, kmeans_wins, runs })?;
    Ok(())
}
