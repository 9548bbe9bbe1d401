//! Seeded pre-training of the base model on synthetic template dialogues.
//!
//! Every sequence has the personalized layout used later (image tokens,
//! identifier clauses, question, answer), but the identifier and soft-token
//! embeddings are visual initializations of randomly drawn entities instead of
//! learned vectors. The resulting weights are then frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{multi_scene, single_scene, templates, ObjectDesc, Shape, TemplatePool};
use crate::error::{Error, Result};
use crate::linalg;
use crate::token_init::{init_block_unaligned, reference_norm};
use crate::trainer::{AdamW, AdamWConfig};
use crate::vision::{FeatureGrid, FeatureSpace, TowerConfig, VisionTower};
use crate::vlm::{BaseModel, GradMode, ModelConfig, Piece, Vocabulary, BOS, EOS, USER};

/// Colours entities are drawn from: every level-{0, 128, 255} colour with at
/// least one saturated channel, plus three darker mixtures.
pub const PALETTE: [(&str, [u8; 3]); 22] = [
    ("red", [255, 0, 0]),
    ("green", [0, 255, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("cyan", [0, 255, 255]),
    ("magenta", [255, 0, 255]),
    ("white", [255, 255, 255]),
    ("orange", [255, 128, 0]),
    ("rose", [255, 0, 128]),
    ("lime", [128, 255, 0]),
    ("spring", [0, 255, 128]),
    ("violet", [128, 0, 255]),
    ("azure", [0, 128, 255]),
    ("salmon", [255, 128, 128]),
    ("mint", [128, 255, 128]),
    ("periwinkle", [128, 128, 255]),
    ("cream", [255, 255, 128]),
    ("pink", [255, 128, 255]),
    ("aqua", [128, 255, 255]),
    ("purple", [128, 0, 128]),
    ("teal", [0, 128, 128]),
    ("olive", [128, 128, 0]),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub k: usize,
    pub entity_images: usize,
    pub max_clauses: usize,
    /// Fraction of recognition samples (the rest are attribute questions).
    pub recognition_share: f64,
    pub weight_decay: f64,
    /// Leading steps restricted to single-clause recognition.
    pub warm_start_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch: 4,
            lr: 1e-3,
            warmup: 200,
            seed: 2024,
            k: 16,
            entity_images: 10,
            max_clauses: 4,
            recognition_share: 0.75,
            weight_decay: 0.01,
            warm_start_steps: 2500,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.k == 0 || self.entity_images == 0 {
            return Err(Error::Validation("pre-training steps, batch, k and entity_images must be positive".into()));
        }
        if !(1..=4).contains(&self.max_clauses) {
            return Err(Error::Validation("max_clauses must be within 1..=4".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.recognition_share) {
            return Err(Error::Validation("invalid pre-training learning rate or task share".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let t = (step - self.warmup) as f64 / (self.steps - self.warmup).max(1) as f64;
        self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// A colored shape with unit-norm visual initialization directions.
#[derive(Debug, Clone)]
pub struct Entity {
    pub color: usize,
    pub shape: Shape,
    pub sks: Vec<f64>,
    pub tokens: Vec<Vec<f64>>,
}

impl Entity {
    pub fn color_name(&self) -> &'static str {
        PALETTE[self.color].0
    }

    fn object(&self, concept: Option<usize>) -> ObjectDesc {
        (concept, PALETTE[self.color].1, self.color_name().to_string(), self.shape)
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = linalg::norm(v).max(1e-12);
    v.iter().map(|x| x / n).collect()
}

/// One entity per (palette colour, shape), each initialized like a concept.
pub fn entity_library(tower: &VisionTower, cfg: &PretrainConfig) -> Result<Vec<Entity>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE471);
    let mut out = Vec::new();
    for color in 0..PALETTE.len() {
        for shape in Shape::ALL {
            let mut e = Entity { color, shape, sks: Vec::new(), tokens: Vec::new() };
            let (images, masks): (Vec<_>, Vec<_>) = (0..cfg.entity_images)
                .map(|_| {
                    let (s, m) = single_scene(&mut rng, e.object(Some(0)), 20..=28);
                    (s.image, m)
                })
                .unzip();
            let bank = tower.build_bank("entity", &images, &masks, FeatureSpace::Projector)?;
            let block = init_block_unaligned(&bank, cfg.k.min(bank.len()), rng.gen())?;
            e.sks = unit(&block.sks);
            e.tokens = block.tokens.iter().map(|t| unit(t)).collect();
            out.push(e);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    Single { yes: bool },
    Joint,
    Conversation,
}

/// A pre-training sequence in token/vector form.
#[derive(Debug, Clone)]
pub struct Episode {
    pub image: FeatureGrid,
    /// Entities bound to the identifier slots, in clause order.
    pub clauses: Vec<usize>,
    pub k: usize,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    /// Whether this is a recognition item and its expected answer.
    pub recognition: Option<bool>,
}

fn slot_vocab(n: usize) -> Vocabulary {
    Vocabulary::new((0..n).map(|i| format!("<e{i}>")).collect()).expect("distinct slot names")
}

/// Draws one synthetic episode.
pub fn sample_episode<R: Rng>(
    rng: &mut R,
    tower: &VisionTower,
    entities: &[Entity],
    pool: &TemplatePool,
    cfg: &PretrainConfig,
) -> Result<Episode> {
    let clauses_n = rng.gen_range(1..=cfg.max_clauses);
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    colors.shuffle(rng);
    let pick = |c: usize, rng: &mut R| c * Shape::ALL.len() + rng.gen_range(0..Shape::ALL.len());
    let clauses: Vec<usize> = colors[..clauses_n].iter().map(|&c| pick(c, rng)).collect();
    let asked = rng.gen_range(0..clauses_n);
    let task = if !rng.gen_bool(cfg.recognition_share) {
        Task::Conversation
    } else if clauses_n >= 2 && rng.gen_bool(0.2) {
        Task::Joint
    } else {
        Task::Single { yes: rng.gen_bool(0.5) }
    };
    let present: Vec<bool> = (0..clauses_n)
        .map(|i| match task {
            Task::Single { yes } if i == asked => yes,
            Task::Conversation if i == asked => true,
            _ => rng.gen_bool(0.5),
        })
        .collect();
    let n_present = present.iter().filter(|&&p| p).count();
    let room = 4 - n_present;
    let mut extra = rng.gen_range(0..=room.min(2));
    if n_present + extra == 0 {
        extra = 1;
    }
    let mut objs: Vec<ObjectDesc> = clauses
        .iter()
        .enumerate()
        .filter(|(i, _)| present[*i])
        .map(|(i, &e)| entities[e].object(Some(i)))
        .collect();
    objs.extend(colors[clauses_n..clauses_n + extra].iter().map(|&c| entities[pick(c, rng)].object(None)));
    objs.shuffle(rng);
    let scene = if objs.len() == 1 {
        single_scene(rng, objs.pop().expect("one object"), 15..=28).0
    } else {
        multi_scene(rng, objs)
    };
    let image = tower.encode_projected(&scene.image)?;
    let vocab = slot_vocab(clauses_n);
    let name = |i: usize| format!("<e{i}>");
    let k = if rng.gen_bool(0.7) { cfg.k } else { rng.gen_range(1..=cfg.k) };

    let (question, answer, recognition) = if task == Task::Conversation {
        let obj = scene.object_of(asked).expect("present entity is drawn");
        let (tq, ta) = pool.conversation.choose(rng).expect("non-empty pool");
        let ans = templates::fill(ta, &name(asked))
            .replace("{color}", &obj.color)
            .replace("{shape}", obj.shape.name())
            .replace("{position}", templates::position_phrase(obj.third()));
        (templates::fill(tq, &name(asked)), ans, None)
    } else {
        let (asked, yes) = if task == Task::Joint {
            let mut idx: Vec<usize> = (0..clauses_n).collect();
            idx.shuffle(rng);
            let take = rng.gen_range(2..=clauses_n);
            let asked: Vec<usize> = idx[..take].to_vec();
            let yes = asked.iter().all(|&i| present[i]);
            (asked, yes)
        } else {
            (vec![asked], present[asked])
        };
        let ident = asked.iter().map(|&i| name(i)).collect::<Vec<_>>().join(" and ");
        let all: Vec<&String> = pool.positive.iter().chain(&pool.negative).collect();
        let t = all.choose(rng).expect("non-empty pools");
        (templates::fill(t, &ident), if yes { "Yes" } else { "No" }.to_string(), Some(yes))
    };
    let mut answer = vocab.encode(&answer);
    answer.push(EOS);
    Ok(Episode { image, clauses, k, question: vocab.encode(&question), answer, recognition })
}

/// Owned embedding vectors for an episode at target norm `k_o`.
struct Injected {
    sks: Vec<Vec<f64>>,
    tokens: Vec<Vec<Vec<f64>>>,
}

fn inject(ep: &Episode, entities: &[Entity], k_o: f64) -> Injected {
    let scale = |v: &[f64]| v.iter().map(|x| x * k_o).collect::<Vec<f64>>();
    Injected {
        sks: ep.clauses.iter().map(|&e| scale(&entities[e].sks)).collect(),
        tokens: ep
            .clauses
            .iter()
            .map(|&e| entities[e].tokens.iter().take(ep.k).map(|t| scale(t)).collect())
            .collect(),
    }
}

/// Pieces for `BOS ++ image ++ clauses ++ USER ++ question ++ answer[..answer_inputs]`, and
/// the loss targets over answer tokens that are not identifiers.
fn pieces<'a>(ep: &'a Episode, inj: &'a Injected, base: usize, answer_inputs: usize) -> (Vec<Piece<'a>>, Vec<(usize, u32)>) {
    let mut out = vec![Piece::Token(BOS)];
    out.extend(ep.image.rows().map(Piece::Image));
    let tok = |id: u32| {
        if (id as usize) < base {
            Piece::Token(id)
        } else {
            Piece::Vector(&inj.sks[id as usize - base])
        }
    };
    for (j, soft) in inj.tokens.iter().enumerate() {
        out.push(Piece::Vector(&inj.sks[j]));
        out.extend(" is ".bytes().map(|b| Piece::Token(b as u32)));
        out.extend(soft.iter().map(|t| Piece::Vector(t)));
        out.push(Piece::Token(b'.' as u32));
    }
    out.push(Piece::Token(USER));
    out.extend(ep.question.iter().map(|&id| tok(id)));
    let start = out.len();
    out.extend(ep.answer[..answer_inputs].iter().map(|&id| tok(id)));
    let targets = ep
        .answer
        .iter()
        .enumerate()
        .filter(|(_, &id)| (id as usize) < base)
        .map(|(t, &id)| (start + t - 1, id))
        .collect();
    (out, targets)
}

/// Summary of a held-out recognition check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub yes_recall: f64,
    pub no_recall: f64,
    pub mean_loss: f64,
}

/// Next-token choice between "Yes" and "No" on recognition episodes.
pub fn probe(model: &BaseModel, entities: &[Entity], episodes: &[Episode]) -> Result<ProbeScore> {
    let k_o = reference_norm(&model.params.tok_emb, model.dim())?;
    let (mut tp, mut pos, mut tn, mut neg, mut loss, mut cnt) = (0, 0, 0, 0, 0.0, 0);
    let (yes, no) = (b'Y' as usize, b'N' as usize);
    for ep in episodes {
        let Some(truth) = ep.recognition else { continue };
        let inj = inject(ep, entities, k_o);
        let (p, targets) = pieces(ep, &inj, model.cfg.vocab, ep.answer.len() - 1);
        let pass = model.run(&p, &targets, &[], GradMode::None)?;
        loss += pass.loss;
        cnt += 1;
        let (p1, _) = pieces(ep, &inj, model.cfg.vocab, 0);
        let x0 = model.embed(&p1)?;
        let acts = model.forward(&x0);
        let d = model.dim();
        let logits = model.logits(&acts.z[(p1.len() - 1) * d..], &[]);
        let said_yes = logits[yes] > logits[no];
        if truth {
            pos += 1;
            tp += usize::from(said_yes);
        } else {
            neg += 1;
            tn += usize::from(!said_yes);
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ProbeScore { yes_recall: ratio(tp, pos), no_recall: ratio(tn, neg), mean_loss: loss / cnt.max(1) as f64 })
}

/// Tensors excluded from weight decay (layer-norm parameters and biases).
fn decays(name: &str) -> bool {
    !(name.contains("ln") || name.ends_with(".b1") || name.ends_with(".b2") || name == "img_emb")
}

/// Trains a base model from a seeded random start. Deterministic in `cfg`.
pub fn pretrain(model_cfg: ModelConfig, tower_cfg: TowerConfig, cfg: &PretrainConfig) -> Result<BaseModel> {
    cfg.validate()?;
    let mut model = BaseModel::random(model_cfg, cfg.seed)?;
    // tied query/key start: first-layer attention begins as a similarity search
    let first = &mut model.params.layers[0];
    first.wk = first.wq.clone();
    let tower = tower_cfg.build(model_cfg.dim);
    let entities = entity_library(&tower, cfg)?;
    let pool = TemplatePool::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9B0B);
    let held_out: Vec<Episode> =
        (0..200).map(|_| sample_episode(&mut probe_rng, &tower, &entities, &pool, cfg)).collect::<Result<_>>()?;
    let names: Vec<String> = model.params.tensors().into_iter().map(|(n, _)| n).collect();
    let total: usize = model.params.tensors().iter().map(|(_, t)| t.len()).sum();
    let mut opt = AdamW::new(total, AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let warm = PretrainConfig { max_clauses: 1, recognition_share: 1.0, ..*cfg };
    let mut running = 0.0;
    for step in 0..cfg.steps {
        let k_o = reference_norm(&model.params.tok_emb, model.dim())?;
        let phase = if step < cfg.warm_start_steps { &warm } else { cfg };
        let mut grads: Option<crate::vlm::Params> = None;
        let mut batch_loss = 0.0;
        let mut count = 0usize;
        for _ in 0..cfg.batch {
            let ep = sample_episode(&mut rng, &tower, &entities, &pool, phase)?;
            if 2 + ep.image.patches() + ep.question.len() + ep.answer.len() + ep.clauses.len() * (ep.k + 6) > model.cfg.context {
                continue;
            }
            let inj = inject(&ep, &entities, k_o);
            let (p, targets) = pieces(&ep, &inj, model.cfg.vocab, ep.answer.len() - 1);
            let pass = model.run(&p, &targets, &[], GradMode::All)?;
            if !pass.loss.is_finite() {
                return Err(Error::NonFinite(format!("pre-training loss at step {step}")));
            }
            // every sample weighs the same regardless of answer length
            let w = 1.0 / targets.len() as f64;
            batch_loss += pass.loss * w;
            count += 1;
            let mut g = pass.dparams.expect("parameter gradients requested");
            g.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|x| *x *= w));
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                        a.iter_mut().zip(b.1).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let Some(mut grads) = grads else { continue };
        let scale = 1.0 / count.max(1) as f64;
        let lr = cfg.lr_at(step);
        opt.begin_step();
        let mut offset = 0;
        for ((p, g), name) in model.params.tensors_mut().into_iter().zip(grads.tensors_mut()).zip(&names) {
            g.iter_mut().for_each(|x| *x *= scale);
            opt.apply(offset, p, g, lr, decays(name))?;
            offset += p.len();
        }
        running = if step == 0 { batch_loss * scale } else { 0.98 * running + 0.02 * batch_loss * scale };
        if (step + 1) % 500 == 0 || step + 1 == cfg.steps {
            let s = probe(&model, &entities, &held_out)?;
            log::info!(
                "pretrain step {}/{}: token loss {running:.4}, held-out yes {:.3} no {:.3}",
                step + 1,
                cfg.steps,
                s.yes_recall,
                s.no_recall
            );
        }
    }
    model.params.round_to_f32();
    Ok(model)
}
