//! Test-suite composition, model querying and metric reports.

pub mod metrics;
pub mod suite;

use serde::{Deserialize, Serialize};

use crate::data::{third_of, BatchBuilder, ImageRef, Scenario, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::grounding::{ground, GroundingConfig};
use crate::vision::{FeatureBank, FeatureSpace, VisionTower};
use crate::vlm::{generate, loss, BaseModel, ThetaParams};
pub use metrics::{balanced_recall, bleu, captioning_recall, parse_yes_no, weighted, TaskScore};
pub use suite::{
    caption_query, compose_captions, compose_grounding, compose_qa, compose_recognition, compose_suite, grounding_query,
    recognition_query, validate_suite, CaptionItem, ChoiceItem, Choice, EvalSuite, GroundingItem, RecognitionItem, Split, VqaItem,
};

pub const RECOGNITION_TOKENS: usize = 4;
pub const OPEN_TOKENS: usize = 48;
pub const CAPTION_TOKENS: usize = 32;

/// Encoder-space feature banks of every concept from its training images.
pub fn grounding_banks(tower: &VisionTower, scenario: &Scenario, n: usize) -> Result<Vec<FeatureBank>> {
    scenario
        .concepts
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let n = n.min(scenario.train[j].len());
            let images: Vec<_> = scenario.train[j][..n].iter().map(|s| s.image.clone()).collect();
            tower.build_bank(&c.id, &images, &scenario.masks[j][..n], FeatureSpace::Encoder)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub item: String,
    pub task: String,
    pub query: String,
    pub reply: String,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario: String,
    pub seeds: Vec<u64>,
    /// Balanced recall over every recognition item.
    pub recognition_overall: f64,
    pub recognition: TaskScore,
    pub grounding: TaskScore,
    pub choice: TaskScore,
    pub vqa_bleu: TaskScore,
    pub captioning: TaskScore,
}

/// Queries a personalized model.
pub struct Evaluator<'a> {
    pub model: &'a BaseModel,
    pub theta: &'a ThetaParams,
    builder: BatchBuilder<'a>,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a BaseModel, tower: &'a VisionTower, scenario: &'a Scenario, theta: &'a ThetaParams) -> Result<Self> {
        if theta.m() != scenario.m() {
            return Err(Error::Validation(format!("checkpoint holds {} concepts, scenario {}", theta.m(), scenario.m())));
        }
        theta.validate(model.dim())?;
        Ok(Self { model, theta, builder: BatchBuilder::new(scenario, tower, &theta.blocks)? })
    }

    pub fn reply(&mut self, image: Option<&ImageRef>, question: &str, max_new: usize) -> Result<String> {
        let batch = self.builder.batch(image, question, "")?;
        let ids = generate(self.model, &batch, self.theta, max_new)?;
        Ok(self.builder.vocab.decode(&ids))
    }

    /// Summed answer negative log-likelihood of `answer`.
    pub fn answer_loss(&mut self, image: Option<&ImageRef>, question: &str, answer: &str) -> Result<f64> {
        let batch = self.builder.batch(image, question, answer)?;
        loss(self.model, &batch, self.theta)
    }

    fn identifiers(&self, concepts: &[usize]) -> Vec<String> {
        concepts.iter().map(|&j| self.builder.scenario.concepts[j].identifier.clone()).collect()
    }

    pub fn recognition(&mut self, items: &[RecognitionItem], audit: &mut Vec<AuditEntry>) -> Result<(f64, TaskScore)> {
        let mut replies = Vec::with_capacity(items.len());
        for it in items {
            let ids = self.identifiers(&it.concepts);
            let q = recognition_query(&ids.iter().map(String::as_str).collect::<Vec<_>>())?;
            let reply = self.reply(Some(&it.image), &q, RECOGNITION_TOKENS)?;
            let parsed = parse_yes_no(&reply);
            audit.push(AuditEntry {
                item: it.id.clone(),
                task: "recognition".into(),
                query: q,
                reply,
                verdict: verdict(parsed == Some(it.expected)),
            });
            replies.push(parsed);
        }
        let expected: Vec<bool> = items.iter().map(|i| i.expected).collect();
        let overall = balanced_recall(&expected, &replies)?;
        let split = |s: Split| {
            let (e, r): (Vec<bool>, Vec<Option<bool>>) =
                items.iter().zip(&replies).filter(|(i, _)| i.split == s).map(|(i, r)| (i.expected, *r)).unzip();
            (balanced_recall(&e, &r).ok(), e.len())
        };
        let (s, ns) = split(Split::Single);
        let (m, nm) = split(Split::Multi);
        Ok((overall, TaskScore::new(s, ns, m, nm)))
    }

    pub fn choice(&mut self, items: &[ChoiceItem], audit: &mut Vec<AuditEntry>) -> Result<TaskScore> {
        let mut hits = Vec::with_capacity(items.len());
        for it in items {
            let mut best = (f64::INFINITY, 0);
            for (o, opt) in it.options.iter().enumerate() {
                let l = self.answer_loss(it.image.as_ref(), &it.question, opt)?;
                if l < best.0 {
                    best = (l, o);
                }
            }
            let ok = best.1 == it.correct;
            audit.push(AuditEntry {
                item: it.id.clone(),
                task: "choice".into(),
                query: it.question.clone(),
                reply: it.options[best.1].clone(),
                verdict: verdict(ok),
            });
            hits.push((it.split, if ok { 1.0 } else { 0.0 }));
        }
        Ok(split_means(&hits))
    }

    pub fn vqa(&mut self, items: &[VqaItem], audit: &mut Vec<AuditEntry>) -> Result<TaskScore> {
        let mut scores = Vec::with_capacity(items.len());
        for it in items {
            let reply = self.reply(it.image.as_ref(), &it.question, OPEN_TOKENS)?;
            let b = bleu(&reply, &it.reference)?;
            audit.push(AuditEntry {
                item: it.id.clone(),
                task: "vqa".into(),
                query: it.question.clone(),
                reply,
                verdict: format!("bleu={b:.6}"),
            });
            scores.push((it.split, b));
        }
        Ok(split_means(&scores))
    }

    pub fn captioning(&mut self, items: &[CaptionItem], audit: &mut Vec<AuditEntry>) -> Result<TaskScore> {
        let all = self.builder.scenario.identifiers();
        let q = caption_query(&all.iter().map(String::as_str).collect::<Vec<_>>());
        let mut per_split: [(Vec<String>, Vec<Vec<String>>); 2] = Default::default();
        for it in items {
            let reply = self.reply(Some(&it.image), &q, CAPTION_TOKENS)?;
            let required = self.identifiers(&it.required);
            let found = required.iter().filter(|r| reply.contains(r.as_str())).count();
            audit.push(AuditEntry {
                item: it.id.clone(),
                task: "caption".into(),
                query: q.clone(),
                reply: reply.clone(),
                verdict: format!("{found}/{}", required.len()),
            });
            let slot = &mut per_split[usize::from(it.split == Split::Multi)];
            slot.0.push(reply);
            slot.1.push(required);
        }
        let score = |(c, r): &(Vec<String>, Vec<Vec<String>>)| (captioning_recall(c, r).ok(), c.len());
        let (s, ns) = score(&per_split[0]);
        let (m, nm) = score(&per_split[1]);
        Ok(TaskScore::new(s, ns, m, nm))
    }
}

fn verdict(ok: bool) -> String {
    if ok { "correct" } else { "wrong" }.to_string()
}

fn split_means(values: &[(Split, f64)]) -> TaskScore {
    let part = |s: Split| {
        let v: Vec<f64> = values.iter().filter(|(x, _)| *x == s).map(|(_, v)| *v).collect();
        ((!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64), v.len())
    };
    let (s, ns) = part(Split::Single);
    let (m, nm) = part(Split::Multi);
    TaskScore::new(s, ns, m, nm)
}

/// Predicted option for a concept from the grounding engine; `None` when
/// the concept is not detected.
pub fn grounding_prediction(
    tower: &VisionTower,
    banks: &[FeatureBank],
    identifiers: &[String],
    image: &image::RgbImage,
    concept: usize,
    cfg: &GroundingConfig,
) -> Result<Option<Choice>> {
    let g = ground(&tower.encoder, banks, identifiers, image, cfg)?;
    let det = g.detections.get(concept).ok_or_else(|| Error::input(format!("no bank for concept {concept}")))?;
    Ok(det.location.map(|(x, _)| Choice::from_third(third_of(x as f64, IMAGE_SIZE as f64))))
}

pub fn grounding_choice(
    tower: &VisionTower,
    scenario: &Scenario,
    banks: &[FeatureBank],
    items: &[GroundingItem],
    cfg: &GroundingConfig,
    audit: &mut Vec<AuditEntry>,
) -> Result<TaskScore> {
    let ids = scenario.identifiers();
    let mut hits = Vec::with_capacity(items.len());
    for it in items {
        let img = &scenario.image(&it.image)?.image;
        let pred = grounding_prediction(tower, banks, &ids, img, it.concept, cfg)?;
        let ok = pred == Some(it.expected);
        audit.push(AuditEntry {
            item: it.id.clone(),
            task: "grounding".into(),
            query: grounding_query(&ids[it.concept]),
            reply: pred.map_or("not detected".to_string(), |c| c.label().to_string()),
            verdict: verdict(ok),
        });
        hits.push((Split::Multi, if ok { 1.0 } else { 0.0 }));
    }
    Ok(split_means(&hits))
}

/// Runs every task of `suite` against one checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &BaseModel,
    tower: &VisionTower,
    scenario: &Scenario,
    theta: &ThetaParams,
    suite: &EvalSuite,
    grounding_cfg: &GroundingConfig,
    n: usize,
    seed: u64,
) -> Result<(MetricReport, Vec<AuditEntry>)> {
    let mut audit = Vec::new();
    let mut ev = Evaluator::new(model, tower, scenario, theta)?;
    let (overall, recognition) = ev.recognition(&suite.recognition, &mut audit)?;
    let banks = grounding_banks(tower, scenario, n)?;
    let grounding = grounding_choice(tower, scenario, &banks, &suite.grounding, grounding_cfg, &mut audit)?;
    let choice = ev.choice(&suite.choice, &mut audit)?;
    let vqa_bleu = ev.vqa(&suite.vqa, &mut audit)?;
    let captioning = ev.captioning(&suite.caption, &mut audit)?;
    let report = MetricReport {
        scenario: scenario.id.clone(),
        seeds: vec![seed],
        recognition_overall: overall,
        recognition,
        grounding,
        choice,
        vqa_bleu,
        captioning,
    };
    Ok((report, audit))
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.collect::<Option<Vec<f64>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean_score(scores: &[TaskScore]) -> TaskScore {
    TaskScore {
        single: mean_opt(scores.iter().map(|s| s.single)),
        multi: mean_opt(scores.iter().map(|s| s.multi)),
        weighted: mean_opt(scores.iter().map(|s| s.weighted)),
        n_single: scores.first().map_or(0, |s| s.n_single),
        n_multi: scores.first().map_or(0, |s| s.n_multi),
    }
}

/// Arithmetic mean of per-seed reports.
pub fn summarize(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports.first().ok_or_else(|| Error::input("no reports to summarize"))?;
    let pick = |f: fn(&MetricReport) -> TaskScore| mean_score(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(MetricReport {
        scenario: first.scenario.clone(),
        seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
        recognition_overall: reports.iter().map(|r| r.recognition_overall).sum::<f64>() / reports.len() as f64,
        recognition: pick(|r| r.recognition),
        grounding: pick(|r| r.grounding),
        choice: pick(|r| r.choice),
        vqa_bleu: pick(|r| r.vqa_bleu),
        captioning: pick(|r| r.captioning),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(seed: u64, x: f64) -> MetricReport {
        let t = TaskScore::new(Some(x), 3, Some(x / 2.0), 1);
        MetricReport {
            scenario: "s".into(),
            seeds: vec![seed],
            recognition_overall: x,
            recognition: t,
            grounding: t,
            choice: t,
            vqa_bleu: t,
            captioning: TaskScore::new(None, 0, Some(x), 2),
        }
    }

    #[test]
    fn summary_is_the_mean() {
        let s = summarize(&[report(1, 0.2), report(2, 0.6)]).unwrap();
        assert_eq!(s.seeds, vec![1, 2]);
        assert!((s.recognition_overall - 0.4).abs() < 1e-12);
        assert!((s.choice.single.unwrap() - 0.4).abs() < 1e-12);
        assert!((s.choice.multi.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(s.captioning.single, None);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn weighted_lies_between_parts() {
        let t = TaskScore::new(Some(0.3), 7, Some(0.9), 2);
        let w = t.weighted.unwrap();
        assert!((0.3..=0.9).contains(&w));
    }
}
