//! Similarity-map grounding and Set-of-Mark annotation.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, gemm};
use crate::vision::{Encoder, FeatureBank, FeatureGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingConfig {
    pub tau: f64,
    pub gamma: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self { tau: 0.32, gamma: 100.0 / 65536.0 }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > -1.0 && self.tau < 1.0) {
            return Err(Error::Validation(format!("tau must lie in (-1, 1), got {}", self.tau)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Validation(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Cosine similarity of every bank vector against every patch of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityStack {
    pub concept: String,
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    /// `l` maps of `h * w` values, row-major.
    pub maps: Vec<Vec<f64>>,
}

impl SimilarityStack {
    /// Pointwise average over the bank.
    pub fn mean_map(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.h * self.w];
        for m in &self.maps {
            out.iter_mut().zip(m).for_each(|(o, x)| *o += x);
        }
        let l = self.maps.len().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= l);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceMap {
    pub concept: String,
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub values: Vec<f64>,
}

fn unit_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, r) in rows.enumerate() {
        let n = linalg::norm(r);
        if n == 0.0 {
            return Err(Error::Degenerate(format!("{what} {i} has zero norm")));
        }
        out.extend(r.iter().map(|x| x / n));
    }
    Ok(out)
}

pub fn similarity_stack(bank: &FeatureBank, grid: &FeatureGrid) -> Result<SimilarityStack> {
    if bank.dim != grid.c {
        return Err(Error::dim(format!("bank vectors have width {}, grid features {}", bank.dim, grid.c)));
    }
    let b = unit_rows(bank.vectors.iter().map(Vec::as_slice), "bank vector")?;
    let g = unit_rows(grid.rows(), "patch feature")?;
    let (l, hw) = (bank.len(), grid.patches());
    let mut sims = vec![0.0; l * hw];
    gemm(l, grid.c, hw, &b, false, &g, true, 0.0, &mut sims);
    sims.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
    Ok(SimilarityStack {
        concept: bank.concept.clone(),
        h: grid.h,
        w: grid.w,
        patch: grid.patch,
        maps: sims.chunks_exact(hw).map(<[f64]>::to_vec).collect(),
    })
}

/// Bias-corrected maps: each concept's bank-averaged map minus the average
/// of those maps over all concepts.
pub fn confidence_maps(stacks: &[SimilarityStack]) -> Result<Vec<ConfidenceMap>> {
    let first = stacks.first().ok_or_else(|| Error::input("confidence maps need at least one concept"))?;
    if stacks.iter().any(|s| s.maps.is_empty()) {
        return Err(Error::input("similarity stack without maps"));
    }
    if stacks.iter().any(|s| (s.h, s.w) != (first.h, first.w)) {
        return Err(Error::dim("similarity stacks disagree in size"));
    }
    let means: Vec<Vec<f64>> = stacks.iter().map(SimilarityStack::mean_map).collect();
    let hw = first.h * first.w;
    let c = stacks.len();
    // m_j - mean_i m_i written as ((c-1) m_j - sum_{i != j} m_i) / c, which is
    // exactly zero for one concept and exactly antisymmetric for two
    let corrected = |j: usize, p: usize| {
        let others: f64 = (0..c).filter(|&i| i != j).map(|i| means[i][p]).sum();
        ((c - 1) as f64 * means[j][p] - others) / c as f64
    };
    Ok(stacks
        .iter()
        .enumerate()
        .map(|(j, s)| ConfidenceMap {
            concept: s.concept.clone(),
            h: s.h,
            w: s.w,
            patch: s.patch,
            values: (0..hw).map(|p| corrected(j, p)).collect(),
        })
        .collect())
}

/// Uncorrected bank-averaged map, used when only one concept exists.
pub fn raw_map(stack: &SimilarityStack) -> ConfidenceMap {
    ConfidenceMap { concept: stack.concept.clone(), h: stack.h, w: stack.w, patch: stack.patch, values: stack.mean_map() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub concept: String,
    pub present: bool,
    /// Pixel coordinate of the most confident patch centre, when present.
    pub location: Option<(u32, u32)>,
    pub max_confidence: f64,
    pub exceedance_ratio: f64,
}

pub fn detect(map: &ConfidenceMap, cfg: &GroundingConfig) -> Detection {
    let hw = map.values.len();
    let above = map.values.iter().filter(|&&v| v > cfg.tau).count();
    let ratio = above as f64 / hw.max(1) as f64;
    let mut best = 0;
    for (i, v) in map.values.iter().enumerate() {
        if *v > map.values[best] {
            best = i;
        }
    }
    let present = ratio > cfg.gamma;
    let half = map.patch as u32 / 2;
    let location = present.then(|| {
        let (r, c) = (best / map.w, best % map.w);
        (c as u32 * map.patch as u32 + half, r as u32 * map.patch as u32 + half)
    });
    Detection {
        concept: map.concept.clone(),
        present,
        location,
        max_confidence: map.values.get(best).copied().unwrap_or(f64::NAN),
        exceedance_ratio: ratio,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mark {
    /// Index of the concept in the scenario.
    pub concept: usize,
    pub identifier: String,
    pub x: u32,
    pub y: u32,
    pub number: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkSet {
    pub marks: Vec<Mark>,
}

impl MarkSet {
    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    /// Location prompt, one clause per mark in mark order.
    pub fn prompt(&self) -> String {
        self.marks
            .iter()
            .map(|m| format!("{} is located at \"Mark Number {}\".", m.identifier, m.number))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

/// Half-width of the square a mark glyph may touch.
pub fn glyph_radius(number: usize) -> u32 {
    let digits = number.to_string().len() as u32;
    5.max(2 * digits + 1)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

/// Draws a filled white disc with a black numeral at every mark.
pub fn annotate(image: &RgbImage, marks: &MarkSet) -> Result<(RgbImage, String)> {
    for m in &marks.marks {
        if m.x >= image.width() || m.y >= image.height() {
            return Err(Error::input(format!("mark {} at ({}, {}) lies outside the image", m.number, m.x, m.y)));
        }
    }
    let mut out = image.clone();
    for m in &marks.marks {
        let r = glyph_radius(m.number) as i64;
        let (cx, cy) = (m.x as i64, m.y as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    put(&mut out, cx + dx, cy + dy, [255, 255, 255]);
                }
            }
        }
        let text: Vec<usize> = m.number.to_string().bytes().map(|b| (b - b'0') as usize).collect();
        let width = text.len() as i64 * 4 - 1;
        let x0 = cx - width / 2;
        for (i, d) in text.iter().enumerate() {
            for (row, bits) in DIGITS[*d].iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        put(&mut out, x0 + i as i64 * 4 + col, cy - 2 + row as i64, [0, 0, 0]);
                    }
                }
            }
        }
    }
    Ok((out, marks.prompt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grounding {
    pub detections: Vec<Detection>,
    pub marks: MarkSet,
    pub prompt: String,
    pub annotated: RgbImage,
}

/// Encodes the image, builds one confidence map per concept (the raw map
/// when there is a single concept), detects each concept and marks the
/// present ones in concept order.
pub fn ground(
    encoder: &Encoder,
    banks: &[FeatureBank],
    identifiers: &[String],
    image: &RgbImage,
    cfg: &GroundingConfig,
) -> Result<Grounding> {
    cfg.validate()?;
    if banks.is_empty() {
        return Err(Error::input("grounding needs at least one feature bank"));
    }
    if banks.len() != identifiers.len() {
        return Err(Error::input("one identifier per bank is required"));
    }
    let grid = encoder.encode(image)?;
    let stacks = banks.iter().map(|b| similarity_stack(b, &grid)).collect::<Result<Vec<_>>>()?;
    let maps = if stacks.len() == 1 { vec![raw_map(&stacks[0])] } else { confidence_maps(&stacks)? };
    let detections: Vec<Detection> = maps.iter().map(|m| detect(m, cfg)).collect();
    let mut marks = MarkSet::default();
    for (j, d) in detections.iter().enumerate() {
        if let Some((x, y)) = d.location {
            marks.marks.push(Mark { concept: j, identifier: identifiers[j].clone(), x, y, number: marks.len() + 1 });
        }
    }
    let (annotated, prompt) = annotate(image, &marks)?;
    Ok(Grounding { detections, marks, prompt, annotated })
}
