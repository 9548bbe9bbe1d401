//! Scalar metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reply parsed from free text: a leading "yes" or "no", ignoring case and
/// leading whitespace.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let r = reply.trim_start().to_ascii_lowercase();
    if r.starts_with("yes") {
        Some(true)
    } else if r.starts_with("no") {
        Some(false)
    } else {
        None
    }
}

/// Mean of the recall on positive items and the recall on negative items.
/// Unparseable replies count as wrong.
pub fn balanced_recall(expected: &[bool], replies: &[Option<bool>]) -> Result<f64> {
    if expected.len() != replies.len() {
        return Err(Error::input(format!("{} items but {} replies", expected.len(), replies.len())));
    }
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&e, &r) in expected.iter().zip(replies) {
        if e {
            pos += 1;
            tp += usize::from(r == Some(true));
        } else {
            neg += 1;
            tn += usize::from(r == Some(false));
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("balanced recall needs positive and negative items".into()));
    }
    Ok(0.5 * tp as f64 / pos as f64 + 0.5 * tn as f64 / neg as f64)
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Sentence BLEU with up to 4-gram clipped precisions, add-one smoothing of
/// the 2- to 4-gram precisions and the usual brevity penalty.
pub fn bleu(candidate: &str, reference: &str) -> Result<f64> {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if refr.is_empty() {
        return Err(Error::input("BLEU needs a non-empty reference"));
    }
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let c = ngrams(&cand, n);
        let r = ngrams(&refr, n);
        let total: usize = c.values().sum();
        let matched: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
        let p = if n == 1 {
            if matched == 0 {
                return Ok(0.0);
            }
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln();
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok((bp * (log_sum / 4.0).exp()).clamp(0.0, 1.0))
}

/// Fraction of required identifier occurrences found across all captions.
pub fn captioning_recall(captions: &[String], required: &[Vec<String>]) -> Result<f64> {
    if captions.is_empty() {
        return Err(Error::input("captioning recall needs at least one caption"));
    }
    if captions.len() != required.len() {
        return Err(Error::input("one required-identifier list per caption is needed"));
    }
    let need: usize = required.iter().map(Vec::len).sum();
    if need == 0 {
        return Err(Error::UndefinedMetric("no identifiers are required".into()));
    }
    let found: usize = captions.iter().zip(required).map(|(c, req)| req.iter().filter(|id| c.contains(id.as_str())).count()).sum();
    Ok(found as f64 / need as f64)
}

/// Sample-count weighted mean of the single- and multi-concept scores.
pub fn weighted(single: f64, n_single: usize, multi: f64, n_multi: usize) -> Result<f64> {
    let total = n_single + n_multi;
    if total == 0 {
        return Err(Error::UndefinedMetric("weighted score over zero items".into()));
    }
    Ok(single + (multi - single) * (n_multi as f64 / total as f64))
}

/// Single, multi and weighted score of one task.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskScore {
    pub single: Option<f64>,
    pub multi: Option<f64>,
    pub weighted: Option<f64>,
    pub n_single: usize,
    pub n_multi: usize,
}

impl TaskScore {
    pub fn new(single: Option<f64>, n_single: usize, multi: Option<f64>, n_multi: usize) -> Self {
        let weighted = match (single, multi) {
            (Some(s), Some(m)) => weighted(s, n_single, m, n_multi).ok(),
            (Some(s), None) => Some(s),
            (None, Some(m)) => Some(m),
            (None, None) => None,
        };
        Self { single, multi, weighted, n_single, n_multi }
    }
}
