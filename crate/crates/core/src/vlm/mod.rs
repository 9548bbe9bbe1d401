//! Miniature frozen vision-language model and its trainable concept parameters.
//!
//! Concept embeddings never enter the base embedding table: identifier and
//! soft-token vectors are injected at their sequence positions, and the
//! classifier is widened by appending one row per concept after the frozen
//! base rows.

pub mod model;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::token_init::ConceptTokenBlock;
use crate::vision::FeatureGrid;

pub use model::{BaseModel, GradMode, ModelConfig, Params, Piece};
pub use tokenizer::{Vocabulary, BASE_VOCAB, BOS, EOS, USER};

/// A system-prompt position: either a vocabulary token or one of a
/// concept's soft tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Token(u32),
    Soft { concept: usize, index: usize },
}

/// `(image, system prompt, question, answer)`; the answer ends with [`EOS`].
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    /// Projected image grid; its `h * w` tokens lead the sequence.
    pub image: Option<FeatureGrid>,
    pub prompt: Vec<Slot>,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}

impl SequenceBatch {
    /// Positions before the answer, including the [`BOS`] and [`USER`] framing tokens.
    pub fn prefix_len(&self) -> usize {
        2 + self.image.as_ref().map_or(0, FeatureGrid::patches) + self.prompt.len() + self.question.len()
    }
}

/// The trainable set: every concept's `k + 1` embedding rows plus one new
/// classifier row per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    pub blocks: Vec<ConceptTokenBlock>,
    pub classifier: Vec<Vec<f64>>,
}

impl ThetaParams {
    /// New classifier rows start at zero.
    pub fn new(blocks: Vec<ConceptTokenBlock>) -> Result<Self> {
        let dim = blocks.first().map(ConceptTokenBlock::dim).unwrap_or(0);
        let classifier = vec![vec![0.0; dim]; blocks.len()];
        let t = Self { blocks, classifier };
        t.validate(dim)?;
        Ok(t)
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.classifier.len() != self.blocks.len() {
            return Err(Error::input("one classifier row per concept is required"));
        }
        for b in &self.blocks {
            if b.dim() != dim || b.tokens.iter().any(|t| t.len() != dim) || b.k() == 0 {
                return Err(Error::dim(format!("concept block {} does not match width {dim}", b.concept)));
            }
        }
        if self.classifier.iter().any(|r| r.len() != dim) {
            return Err(Error::dim("classifier row width mismatch"));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|x| *x = 0.0);
        z
    }

    pub fn len(&self) -> usize {
        self.flatten().len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    fn visit_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for b in &mut self.blocks {
            b.sks.iter_mut().for_each(&mut f);
            b.tokens.iter_mut().flatten().for_each(&mut f);
        }
        self.classifier.iter_mut().flatten().for_each(&mut f);
    }

    /// Concept blocks in order (identifier row then soft tokens), then the
    /// classifier rows.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend_from_slice(&b.sks);
            b.tokens.iter().for_each(|t| out.extend_from_slice(t));
        }
        self.classifier.iter().for_each(|r| out.extend_from_slice(r));
        out
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        self.visit_mut(|x| *x = *it.next().expect("flat theta too short"));
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
enum Origin {
    Frozen,
    Sks(usize),
    Soft(usize, usize),
}

fn assemble<'a>(
    model: &BaseModel,
    batch: &'a SequenceBatch,
    theta: &'a ThetaParams,
    answer_inputs: usize,
) -> Result<(Vec<Piece<'a>>, Vec<Origin>)> {
    let n = model.cfg.vocab;
    let m = theta.m();
    let mut pieces = vec![Piece::Token(BOS)];
    let mut origin = vec![Origin::Frozen];
    if let Some(img) = &batch.image {
        if img.c != model.dim() {
            return Err(Error::dim(format!("image tokens have width {}, model {}", img.c, model.dim())));
        }
        for row in img.rows() {
            pieces.push(Piece::Image(row));
            origin.push(Origin::Frozen);
        }
    }
    let token = |id: u32, pieces: &mut Vec<Piece<'a>>, origin: &mut Vec<Origin>| -> Result<()> {
        let id_us = id as usize;
        if id_us < n {
            pieces.push(Piece::Token(id));
            origin.push(Origin::Frozen);
        } else if id_us < n + m {
            let c = id_us - n;
            pieces.push(Piece::Vector(&theta.blocks[c].sks));
            origin.push(Origin::Sks(c));
        } else {
            return Err(Error::input(format!("token id {id} outside vocabulary of {}", n + m)));
        }
        Ok(())
    };
    for slot in &batch.prompt {
        match *slot {
            Slot::Token(id) => token(id, &mut pieces, &mut origin)?,
            Slot::Soft { concept, index } => {
                let row = theta
                    .blocks
                    .get(concept)
                    .and_then(|b| b.tokens.get(index))
                    .ok_or_else(|| Error::input(format!("soft token {concept}/{index} missing")))?;
                pieces.push(Piece::Vector(row));
                origin.push(Origin::Soft(concept, index));
            }
        }
    }
    pieces.push(Piece::Token(USER));
    origin.push(Origin::Frozen);
    for &id in batch.question.iter().chain(&batch.answer[..answer_inputs]) {
        token(id, &mut pieces, &mut origin)?;
    }
    Ok((pieces, origin))
}

fn check_batch(model: &BaseModel, batch: &SequenceBatch) -> Result<()> {
    if batch.answer.is_empty() {
        return Err(Error::input("answer must hold at least one token"));
    }
    let len = batch.prefix_len() + batch.answer.len();
    if len > model.cfg.context {
        return Err(Error::Capacity { len, max: model.cfg.context });
    }
    Ok(())
}

fn targets(batch: &SequenceBatch) -> Vec<(usize, u32)> {
    let start = batch.prefix_len();
    batch.answer.iter().enumerate().map(|(t, &id)| (start + t - 1, id)).collect()
}

/// Logits over the expanded vocabulary at every position of
/// `BOS ++ image ++ prompt ++ USER ++ question ++ answer`.
pub fn forward(model: &BaseModel, batch: &SequenceBatch, theta: &ThetaParams) -> Result<Vec<Vec<f64>>> {
    theta.validate(model.dim())?;
    let (pieces, _) = assemble(model, batch, theta, batch.answer.len())?;
    let x0 = model.embed(&pieces)?;
    let acts = model.forward(&x0);
    let d = model.dim();
    Ok(acts.z.chunks_exact(d).map(|z| model.logits(z, &theta.classifier)).collect())
}

/// Summed negative log-likelihood of the answer tokens.
pub fn loss(model: &BaseModel, batch: &SequenceBatch, theta: &ThetaParams) -> Result<f64> {
    check_batch(model, batch)?;
    theta.validate(model.dim())?;
    let (pieces, _) = assemble(model, batch, theta, batch.answer.len() - 1)?;
    Ok(model.run(&pieces, &targets(batch), &theta.classifier, GradMode::None)?.loss)
}

/// Loss and its exact gradient with respect to every entry of `theta`.
pub fn grad_theta(model: &BaseModel, batch: &SequenceBatch, theta: &ThetaParams) -> Result<(f64, ThetaParams)> {
    check_batch(model, batch)?;
    theta.validate(model.dim())?;
    let (pieces, origin) = assemble(model, batch, theta, batch.answer.len() - 1)?;
    let pass = model.run(&pieces, &targets(batch), &theta.classifier, GradMode::Inputs)?;
    let d = model.dim();
    let dx0 = pass.dx0.expect("input gradients requested");
    let mut grads = theta.zeros_like();
    for (t, o) in origin.iter().enumerate() {
        let row = &dx0[t * d..(t + 1) * d];
        let dst = match *o {
            Origin::Frozen => continue,
            Origin::Sks(c) => &mut grads.blocks[c].sks,
            Origin::Soft(c, i) => &mut grads.blocks[c].tokens[i],
        };
        dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    grads.classifier = pass.dextra.expect("classifier gradients requested");
    Ok((pass.loss, grads))
}

/// Greedy decoding of up to `max_new` tokens after the prefix (the batch's
/// answer is ignored). Stops after emitting [`EOS`] or when the context is
/// full; the returned ids include the terminating [`EOS`] if one was produced.
pub fn generate(model: &BaseModel, batch: &SequenceBatch, theta: &ThetaParams, max_new: usize) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(Error::input("max_new must be at least 1"));
    }
    theta.validate(model.dim())?;
    let mut work = SequenceBatch { answer: Vec::new(), ..batch.clone() };
    if work.prefix_len() > model.cfg.context {
        return Err(Error::Capacity { len: work.prefix_len(), max: model.cfg.context });
    }
    let d = model.dim();
    for _ in 0..max_new {
        if work.prefix_len() + work.answer.len() >= model.cfg.context {
            break;
        }
        let (pieces, _) = assemble(model, &work, theta, work.answer.len())?;
        let x0 = model.embed(&pieces)?;
        let acts = model.forward(&x0);
        let last = &acts.z[(pieces.len() - 1) * d..];
        let logits = model.logits(last, &theta.classifier);
        let next = argmax(&logits) as u32;
        work.answer.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(work.answer)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
