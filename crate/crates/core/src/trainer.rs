//! Joint optimization of the concept parameters over a frozen base model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchBuilder, Scenario, TrainSample};
use crate::error::{Error, Result};
use crate::linalg;
use crate::token_init::{init_block, random_block, reference_norm, ConceptTokenBlock};
use crate::vision::{FeatureSpace, VisionTower};
use crate::vlm::{grad_theta, BaseModel, SequenceBatch, ThetaParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(len: usize, cfg: AdamWConfig) -> Self {
        Self { cfg, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// Advances the step counter; call once before the `apply` calls of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates `params` (occupying `offset..offset + len` of the state) with
    /// bias-corrected moments and decoupled weight decay scaled by `decay`.
    pub fn apply(&mut self, offset: usize, params: &mut [f64], grads: &[f64], lr: f64, decay: bool) -> Result<()> {
        if params.len() != grads.len() || offset + params.len() > self.m.len() {
            return Err(Error::dim("optimizer slice does not match its state"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at optimizer step {}", self.t)));
        }
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let wd = if decay { c.weight_decay } else { 0.0 };
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            params[i] -= lr * (mh / (vh.sqrt() + c.eps) + wd * params[i]);
        }
        Ok(())
    }

    /// One full step over a single flat vector.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        self.begin_step();
        self.apply(0, params, grads, lr, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    #[default]
    Kmeans,
    Random,
}

impl std::str::FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kmeans" => Ok(InitMode::Kmeans),
            "random" => Ok(InitMode::Random),
            other => Err(format!("unknown init mode {other:?} (expected kmeans or random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    pub init: InitMode,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 15, batch_size: 1, k: 16, n: 10, seed: 0, init: InitMode::Kmeans, optimizer: AdamWConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.k == 0 || self.n == 0 {
            return Err(Error::Validation("batch size, k and n must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub scenario: String,
    pub identifiers: Vec<String>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub theta: ThetaParams,
}

/// Initial concept blocks, one per concept, aligned to the frozen table's
/// mean row norm.
pub fn init_blocks(model: &BaseModel, tower: &VisionTower, scenario: &Scenario, cfg: &TrainConfig) -> Result<Vec<ConceptTokenBlock>> {
    let target = reference_norm(&model.params.tok_emb, model.dim())?;
    let mut blocks = Vec::with_capacity(scenario.m());
    for (j, c) in scenario.concepts.iter().enumerate() {
        let seed = cfg.seed.wrapping_mul(1000).wrapping_add(j as u64);
        let block = match cfg.init {
            InitMode::Kmeans => {
                let n = cfg.n.min(scenario.train[j].len());
                let images: Vec<_> = scenario.train[j][..n].iter().map(|s| s.image.clone()).collect();
                let bank = tower.build_bank(&c.id, &images, &scenario.masks[j][..n], FeatureSpace::Projector)?;
                init_block(&bank, cfg.k, seed, target)?
            }
            InitMode::Random => random_block(&c.id, cfg.k, model.dim(), target, seed)?,
        };
        blocks.push(block);
    }
    Ok(blocks)
}

pub fn prepare_batches(builder: &mut BatchBuilder, samples: &[TrainSample]) -> Result<Vec<SequenceBatch>> {
    samples.iter().map(|s| builder.sample(s)).collect()
}

/// Optimizes `theta` over `batches` and returns the per-epoch mean loss.
pub fn fit(model: &BaseModel, batches: &[SequenceBatch], theta: &mut ThetaParams, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::input("no training samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1);
    let mut opt = AdamW::new(theta.len(), cfg.optimizer);
    let mut flat = theta.flatten();
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = vec![0.0; flat.len()];
            for &i in chunk {
                let (loss, g) = grad_theta(model, &batches[i], theta)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss {loss} at epoch {} on sample {i}", epoch + 1)));
                }
                total += loss;
                acc.iter_mut().zip(g.flatten()).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / chunk.len() as f64;
            acc.iter_mut().for_each(|a| *a *= scale);
            opt.step(&mut flat, &acc, cfg.lr)?;
            theta.assign(&flat);
        }
        let mean = total / batches.len() as f64;
        log::info!("epoch {}/{}: mean loss {mean:.4}", epoch + 1, cfg.epochs);
        history.push(mean);
    }
    linalg::round_f32(&mut flat);
    theta.assign(&flat);
    Ok(history)
}

/// Initializes, trains and packages the concept parameters of a scenario.
pub fn train(
    model: &BaseModel,
    tower: &VisionTower,
    scenario: &Scenario,
    samples: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let blocks = init_blocks(model, tower, scenario, cfg)?;
    let mut builder = BatchBuilder::new(scenario, tower, &blocks)?;
    let batches = prepare_batches(&mut builder, samples)?;
    let mut theta = ThetaParams::new(blocks)?;
    let loss_history = fit(model, &batches, &mut theta, cfg)?;
    Ok(Checkpoint {
        scenario: scenario.id.clone(),
        identifiers: scenario.identifiers(),
        config: *cfg,
        epoch: cfg.epochs,
        loss_history,
        theta,
    })
}
