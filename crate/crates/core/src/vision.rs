//! Synthetic vision encoder, projector and mask-filtered feature banks.
//!
//! The encoder maps every `patch x patch` pixel block to a fixed statistic
//! vector (channel means and deviations, a 2x2 down-sampling and a soft
//! 27-bin colour histogram), pushes it through a seeded semi-orthogonal
//! matrix and L2-normalizes the result. Each patch feature depends only on
//! the pixels of that patch.

use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Length of the per-patch statistic vector fed to the encoder projection.
pub const STAT_DIM: usize = 3 + 3 + 12 + 27;

const W_MEAN: f64 = 0.15;
const W_STD: f64 = 0.15;
const W_DOWN: f64 = 0.075;
const W_HIST: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Source pixels per patch side.
    pub patch: usize,
    /// `h * w` rows of `c` values, row-major over patches.
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(h: usize, w: usize, c: usize, patch: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::dim("feature grid needs h, w, c >= 1"));
        }
        if data.len() != h * w * c {
            return Err(Error::dim(format!(
                "grid data has {} values, expected {}",
                data.len(),
                h * w * c
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature grid".into()));
        }
        Ok(Self { h, w, c, patch, data })
    }

    pub fn patches(&self) -> usize {
        self.h * self.w
    }

    pub fn feature(&self, p: usize) -> &[f64] {
        &self.data[p * self.c..(p + 1) * self.c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl ConceptMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::dim("mask bit count does not match its dimensions"));
        }
        Ok(Self { width, height, bits })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![true; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        let bits = img.pixels().map(|p| p.0[0] != 0).collect();
        Self { width: w as usize, height: h as usize, bits }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSpace {
    Encoder,
    Projector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub concept: String,
    pub space: FeatureSpace,
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl FeatureBank {
    pub fn new(concept: impl Into<String>, space: FeatureSpace, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let concept = concept.into();
        let dim = vectors
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::input(format!("feature bank for {concept} is empty")))?;
        if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::dim("feature bank vectors have inconsistent dimension"));
        }
        if vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("feature bank for {concept}")));
        }
        Ok(Self { concept, space, dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for v in &self.vectors {
            m.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }
}

/// Per-patch pixel statistic. Exposed so tests can re-derive features.
pub fn patch_statistics(img: &RgbImage, px: usize, py: usize, patch: usize) -> [f64; STAT_DIM] {
    let n = (patch * patch) as f64;
    let mut mean = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut down = [0.0; 12];
    let mut hist = [0.0; 27];
    let half = (patch / 2).max(1);
    for dy in 0..patch {
        for dx in 0..patch {
            let p = img.get_pixel((px * patch + dx) as u32, (py * patch + dy) as u32).0;
            let quad = ((dy / half).min(1)) * 2 + (dx / half).min(1);
            let mut axis = [[0.0f64; 2]; 3];
            let mut lo = [0usize; 3];
            for ch in 0..3 {
                let x = p[ch] as f64 / 255.0;
                let u = 2.0 * x - 1.0;
                mean[ch] += u;
                sq[ch] += u * u;
                down[quad * 3 + ch] += u;
                let t = x * 2.0;
                let i0 = (t.floor() as usize).min(1);
                let f = t - i0 as f64;
                lo[ch] = i0;
                axis[ch] = [1.0 - f, f];
            }
            for (a, wa) in axis[0].iter().enumerate() {
                for (b, wb) in axis[1].iter().enumerate() {
                    for (c, wc) in axis[2].iter().enumerate() {
                        let idx = (lo[0] + a) * 9 + (lo[1] + b) * 3 + (lo[2] + c);
                        hist[idx] += wa * wb * wc;
                    }
                }
            }
        }
    }
    let quad_n = n / 4.0;
    let mut s = [0.0; STAT_DIM];
    for ch in 0..3 {
        let m = mean[ch] / n;
        let var = (sq[ch] / n - m * m).max(0.0);
        s[ch] = W_MEAN * m;
        s[3 + ch] = W_STD * var.sqrt();
    }
    for i in 0..12 {
        s[6 + i] = W_DOWN * down[i] / quad_n;
    }
    for i in 0..27 {
        s[18 + i] = W_HIST * hist[i] / n;
    }
    s
}

/// Fixed, seeded stand-in for a patch-level vision encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub patch: usize,
    pub channels: usize,
    /// `channels x STAT_DIM`, row-major.
    weight: Vec<f64>,
}

impl Encoder {
    pub fn new(patch: usize, channels: usize, seed: u64) -> Self {
        assert!(patch >= 2 && channels >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE1C0_DE00);
        let weight = if channels >= STAT_DIM {
            linalg::orthonormal_columns(&mut rng, channels, STAT_DIM)
        } else {
            linalg::gaussian(&mut rng, channels, STAT_DIM, 1.0 / (channels as f64).sqrt())
        };
        Self { patch, channels, weight }
    }

    pub fn grid_dims(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        if width == 0 || height == 0 {
            return Err(Error::input("empty image"));
        }
        if width % self.patch != 0 || height % self.patch != 0 {
            return Err(Error::dim(format!(
                "image {width}x{height} is not divisible by patch size {}",
                self.patch
            )));
        }
        Ok((height / self.patch, width / self.patch))
    }

    pub fn encode(&self, img: &RgbImage) -> Result<FeatureGrid> {
        let (h, w) = self.grid_dims(img.width() as usize, img.height() as usize)?;
        let c = self.channels;
        let mut data = vec![0.0; h * w * c];
        for py in 0..h {
            for px in 0..w {
                let s = patch_statistics(img, px, py, self.patch);
                let out = &mut data[(py * w + px) * c..(py * w + px + 1) * c];
                for (r, o) in out.iter_mut().enumerate() {
                    *o = linalg::dot(&self.weight[r * STAT_DIM..(r + 1) * STAT_DIM], &s);
                }
                let n = linalg::norm(out);
                out.iter_mut().for_each(|x| *x /= n);
            }
        }
        FeatureGrid::new(h, w, c, self.patch, data)
    }
}

/// Frozen linear map from encoder channels to the language-model width.
#[derive(Debug, Clone)]
pub struct Projector {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weight: Vec<f64>,
}

impl Projector {
    pub fn new(in_dim: usize, out_dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E0_1EC7);
        let mut weight = if out_dim >= in_dim {
            linalg::orthonormal_columns(&mut rng, out_dim, in_dim)
        } else {
            linalg::gaussian(&mut rng, out_dim, in_dim, 1.0 / (out_dim as f64).sqrt())
        };
        weight.iter_mut().for_each(|x| *x *= scale);
        Self { in_dim, out_dim, weight }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self { in_dim: dim, out_dim: dim, weight }
    }

    pub fn project_vec(&self, v: &[f64]) -> Vec<f64> {
        self.weight.chunks_exact(self.in_dim).map(|row| linalg::dot(row, v)).collect()
    }

    pub fn project(&self, grid: &FeatureGrid) -> Result<FeatureGrid> {
        if grid.c != self.in_dim {
            return Err(Error::dim(format!(
                "projector expects {} channels, grid has {}",
                self.in_dim, grid.c
            )));
        }
        let mut data = vec![0.0; grid.patches() * self.out_dim];
        linalg::gemm(
            grid.patches(),
            self.in_dim,
            self.out_dim,
            &grid.data,
            false,
            &self.weight,
            true,
            0.0,
            &mut data,
        );
        FeatureGrid::new(grid.h, grid.w, self.out_dim, grid.patch, data)
    }
}

/// Number of set mask pixels inside each patch, row-major over patches.
fn patch_coverage(grid: &FeatureGrid, mask: &ConceptMask) -> Result<Vec<usize>> {
    if mask.width != grid.w * grid.patch || mask.height != grid.h * grid.patch {
        return Err(Error::dim(format!(
            "mask {}x{} does not match a {}x{} grid of {}px patches",
            mask.width, mask.height, grid.w, grid.h, grid.patch
        )));
    }
    let mut counts = vec![0; grid.patches()];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                counts[(y / grid.patch) * grid.w + x / grid.patch] += 1;
            }
        }
    }
    Ok(counts)
}

/// Patch indices whose pixels are strictly more than half covered by the mask.
pub fn retained_patches(grid: &FeatureGrid, mask: &ConceptMask) -> Result<Vec<usize>> {
    let area = grid.patch * grid.patch;
    Ok(patch_coverage(grid, mask)?
        .into_iter()
        .enumerate()
        .filter(|(_, n)| 2 * n > area)
        .map(|(p, _)| p)
        .collect())
}

pub fn filter_by_mask(grid: &FeatureGrid, mask: &ConceptMask) -> Result<Vec<Vec<f64>>> {
    let keep = retained_patches(grid, mask)?;
    if keep.is_empty() {
        return Err(Error::EmptySelection("no patch is majority-covered".into()));
    }
    Ok(keep.into_iter().map(|p| grid.feature(p).to_vec()).collect())
}

/// Encoder (and optionally projector) shared by every pipeline stage.
/// Geometry and seed of the vision tower; part of the frozen backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TowerConfig {
    pub patch: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self { patch: 8, channels: 64, seed: 0 }
    }
}

impl TowerConfig {
    pub fn build(&self, model_dim: usize) -> VisionTower {
        VisionTower::new(self.patch, self.channels, model_dim, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct VisionTower {
    pub encoder: Encoder,
    pub projector: Projector,
}

impl VisionTower {
    pub fn new(patch: usize, channels: usize, model_dim: usize, seed: u64) -> Self {
        Self {
            encoder: Encoder::new(patch, channels, seed),
            projector: Projector::new(channels, model_dim, 1.0, seed),
        }
    }

    pub fn encode_projected(&self, img: &RgbImage) -> Result<FeatureGrid> {
        self.projector.project(&self.encoder.encode(img)?)
    }

    pub fn build_bank(
        &self,
        concept: &str,
        images: &[RgbImage],
        masks: &[ConceptMask],
        space: FeatureSpace,
    ) -> Result<FeatureBank> {
        if images.is_empty() {
            return Err(Error::input("feature bank needs at least one image"));
        }
        if images.len() != masks.len() {
            return Err(Error::input(format!(
                "{} images but {} masks",
                images.len(),
                masks.len()
            )));
        }
        let mut vectors = Vec::new();
        for (img, mask) in images.iter().zip(masks) {
            let mut grid = self.encoder.encode(img)?;
            if space == FeatureSpace::Projector {
                grid = self.projector.project(&grid)?;
            }
            vectors.extend(filter_by_mask(&grid, mask)?);
        }
        FeatureBank::new(concept, space, vectors)
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

pub fn load_mask(path: &Path) -> Result<ConceptMask> {
    Ok(ConceptMask::from_gray(&image::open(path)?.to_luma8()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn solid(w: u32, h: u32, c: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb(c))
    }

    #[test]
    fn grid_shape_from_patch_size() {
        let enc = Encoder::new(8, 64, 1);
        let g = enc.encode(&solid(64, 64, [10, 200, 30])).unwrap();
        assert_eq!((g.h, g.w, g.c), (8, 8, 64));
    }

    #[test]
    fn constant_image_has_equal_features() {
        let enc = Encoder::new(8, 64, 1);
        let g = enc.encode(&solid(64, 64, [90, 20, 240])).unwrap();
        for p in 1..g.patches() {
            assert_eq!(g.feature(p), g.feature(0));
        }
    }

    #[test]
    fn encoder_rejects_bad_sizes() {
        let enc = Encoder::new(8, 64, 1);
        assert!(matches!(enc.encode(&solid(60, 64, [0, 0, 0])), Err(Error::Dimension(_))));
        assert!(matches!(enc.encode(&RgbImage::new(0, 0)), Err(Error::Input(_))));
    }

    #[test]
    fn encoder_features_are_unit_norm() {
        let enc = Encoder::new(8, 64, 4);
        let img = RgbImage::from_fn(64, 64, |x, y| Rgb([(x * 4) as u8, (y * 4) as u8, ((x ^ y) * 3) as u8]));
        let g = enc.encode(&img).unwrap();
        for row in g.rows() {
            assert!((linalg::norm(row) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn projector_linear_and_identity() {
        let p = Projector::new(64, 64, 1.0, 3);
        assert!(p.project_vec(&[0.0; 64]).iter().all(|x| *x == 0.0));
        let enc = Encoder::new(8, 16, 1);
        let g = enc.encode(&solid(16, 16, [1, 2, 3])).unwrap();
        assert_eq!(Projector::identity(16).project(&g).unwrap().data, g.data);
        assert!(matches!(p.project(&g), Err(Error::Dimension(_))));
    }

    #[test]
    fn projector_matches_naive_product() {
        let p = Projector::new(64, 32, 1.5, 11);
        let enc = Encoder::new(8, 64, 2);
        let img = RgbImage::from_fn(16, 8, |x, y| Rgb([(x * 13) as u8, (y * 29) as u8, 77]));
        let g = enc.encode(&img).unwrap();
        let out = p.project(&g).unwrap();
        for patch in 0..g.patches() {
            for r in 0..32 {
                let mut acc = 0.0;
                for c in 0..64 {
                    acc += p.weight[r * 64 + c] * g.feature(patch)[c];
                }
                assert!((out.feature(patch)[r] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn filter_full_mask_keeps_everything_in_order() {
        let enc = Encoder::new(8, 64, 1);
        let img = RgbImage::from_fn(64, 64, |x, y| Rgb([x as u8 * 3, y as u8 * 3, 0]));
        let g = enc.encode(&img).unwrap();
        let v = filter_by_mask(&g, &ConceptMask::full(64, 64)).unwrap();
        assert_eq!(v.len(), 64);
        for (p, row) in v.iter().enumerate() {
            assert_eq!(row.as_slice(), g.feature(p));
        }
    }

    #[test]
    fn filter_left_half_and_empty() {
        let enc = Encoder::new(8, 64, 1);
        let g = enc.encode(&solid(64, 64, [5, 5, 5])).unwrap();
        let bits = (0..64 * 64).map(|i| (i % 64) < 32).collect();
        let mask = ConceptMask::new(64, 64, bits).unwrap();
        // per-patch pixel counting oracle
        let mut expected = 0;
        for py in 0..8 {
            for px in 0..8 {
                let mut set = 0;
                for y in py * 8..py * 8 + 8 {
                    for x in px * 8..px * 8 + 8 {
                        set += usize::from(x < 32);
                        let _ = y;
                    }
                }
                expected += usize::from(set * 2 > 64);
            }
        }
        assert_eq!(expected, 32);
        assert_eq!(filter_by_mask(&g, &mask).unwrap().len(), expected);
        let empty = ConceptMask::new(64, 64, vec![false; 64 * 64]).unwrap();
        assert!(matches!(filter_by_mask(&g, &empty), Err(Error::EmptySelection(_))));
    }

    #[test]
    fn exactly_half_covered_patch_is_dropped() {
        let enc = Encoder::new(8, 16, 1);
        let g = enc.encode(&solid(8, 8, [5, 5, 5])).unwrap();
        let half = ConceptMask::new(8, 8, (0..64).map(|i| i < 32).collect()).unwrap();
        assert!(filter_by_mask(&g, &half).is_err());
        let more = ConceptMask::new(8, 8, (0..64).map(|i| i < 33).collect()).unwrap();
        assert_eq!(filter_by_mask(&g, &more).unwrap().len(), 1);
    }

    #[test]
    fn bank_counts_add_up() {
        let tower = VisionTower::new(8, 64, 64, 5);
        let imgs = vec![solid(64, 64, [200, 0, 0]), solid(64, 64, [0, 0, 200])];
        let masks = vec![
            ConceptMask::full(64, 64),
            ConceptMask::new(64, 64, (0..4096).map(|i| i / 64 < 16).collect()).unwrap(),
        ];
        let bank = tower.build_bank("a", &imgs, &masks, FeatureSpace::Encoder).unwrap();
        assert_eq!(bank.len(), 64 + 16);
        let proj = tower.build_bank("a", &imgs, &masks, FeatureSpace::Projector).unwrap();
        assert_eq!(proj.len(), 80);
        assert!(tower.build_bank("a", &imgs, &masks[..1], FeatureSpace::Encoder).is_err());
        assert!(tower.build_bank("a", &[], &[], FeatureSpace::Encoder).is_err());
    }
}
