//! Concept-token initialization from clustered visual tokens.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::vision::{FeatureBank, FeatureSpace};

/// Identifier embedding plus the `k` soft tokens of one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTokenBlock {
    pub concept: String,
    pub sks: Vec<f64>,
    pub tokens: Vec<Vec<f64>>,
}

impl ConceptTokenBlock {
    pub fn k(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.sks.len()
    }

    /// Row 0 is the identifier, rows 1..=k the soft tokens.
    pub fn row(&self, i: usize) -> &[f64] {
        if i == 0 {
            &self.sks
        } else {
            &self.tokens[i - 1]
        }
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        if i == 0 {
            &mut self.sks
        } else {
            &mut self.tokens[i - 1]
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        std::iter::once(self.sks.as_slice()).chain(self.tokens.iter().map(Vec::as_slice))
    }

    pub fn is_finite(&self) -> bool {
        self.rows().flatten().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after seeding and after every Lloyd iteration.
    pub history: Vec<f64>,
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = linalg::sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_seeds<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| linalg::sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&dist) {
            Ok(w) => w.sample(rng),
            // every point already coincides with a center
            Err(_) => rng.gen_range(0..points.len()),
        };
        centers.push(points[next].clone());
        let c = centers.last().unwrap();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(linalg::sq_dist(p, c));
        }
    }
    centers
}

/// Lloyd's algorithm from k-means++ seeds with Euclidean distance.
///
/// A cluster that loses all of its points is moved onto the point that is
/// currently farthest from its own center.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<ClusterResult> {
    if k == 0 || max_iters == 0 {
        return Err(Error::input("k-means needs k >= 1 and max_iters >= 1"));
    }
    if points.len() < k {
        return Err(Error::input(format!("{} points cannot form {k} clusters", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::dim("k-means points have inconsistent dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_seeds(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut dists = vec![0.0; points.len()];
    let mut history = Vec::new();
    let mut inertia = f64::INFINITY;

    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centers);
            changed |= assignments[i] != c;
            assignments[i] = c;
            dists[i] = d;
        }
        if history.is_empty() {
            history.push(dists.iter().sum());
        }
        if !changed && inertia.is_finite() {
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centers[c] = sums[c].iter().map(|s| s / n).collect();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // only reassign points whose cluster keeps at least one member
            let far = (0..points.len())
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]));
            if let Some(i) = far {
                counts[assignments[i]] -= 1;
                assignments[i] = c;
                counts[c] = 1;
                dists[i] = 0.0;
                centers[c] = points[i].clone();
            }
        }
        // recompute the members' centers so inertia reflects the update step
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centers[c] = sums[c].iter().map(|s| s / n).collect();
            }
        }
        inertia = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| linalg::sq_dist(p, &centers[a]))
            .sum();
        history.push(inertia);
    }

    // final assignment against the final centers
    let mut final_inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest(p, &centers);
        assignments[i] = c;
        final_inertia += d;
    }
    if final_inertia < *history.last().unwrap() {
        history.push(final_inertia);
    }
    let inertia = *history.last().unwrap();
    if centers.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("k-means center".into()));
    }
    Ok(ClusterResult { centers, assignments, inertia, history })
}

/// Rescale `v` to L2 norm `target`, keeping its direction.
pub fn norm_align(v: &[f64], target: f64) -> Result<Vec<f64>> {
    if !(target > 0.0) {
        return Err(Error::Degenerate("target norm must be positive".into()));
    }
    let n = linalg::norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("cannot align a zero-norm vector".into()));
    }
    Ok(v.iter().map(|x| x / n * target).collect())
}

/// Mean L2 row norm of a row-major `rows x dim` embedding table.
pub fn reference_norm(table: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || table.is_empty() || table.len() % dim != 0 {
        return Err(Error::input("reference norm needs a non-empty vocabulary table"));
    }
    let rows = table.len() / dim;
    Ok(table.chunks_exact(dim).map(linalg::norm).sum::<f64>() / rows as f64)
}

/// Cluster the bank and take `sks` as the mean of the centers, before any
/// norm alignment.
pub fn init_block_unaligned(bank: &FeatureBank, k: usize, seed: u64) -> Result<ConceptTokenBlock> {
    if bank.space != FeatureSpace::Projector {
        return Err(Error::input("token initialization needs a projector-space bank"));
    }
    if bank.len() < k {
        return Err(Error::input(format!(
            "bank for {} holds {} vectors, fewer than k = {k}",
            bank.concept,
            bank.len()
        )));
    }
    let clusters = kmeans(&bank.vectors, k, seed, 100)?;
    let mut sks = vec![0.0; bank.dim];
    for c in &clusters.centers {
        sks.iter_mut().zip(c).for_each(|(s, x)| *s += x);
    }
    sks.iter_mut().for_each(|s| *s /= k as f64);
    Ok(ConceptTokenBlock { concept: bank.concept.clone(), sks, tokens: clusters.centers })
}

pub fn align_block(block: &mut ConceptTokenBlock, target: f64) -> Result<()> {
    for i in 0..=block.k() {
        let aligned = norm_align(block.row(i), target)?;
        block.row_mut(i).copy_from_slice(&aligned);
    }
    Ok(())
}

/// k-means initialization followed by alignment of all `k + 1` rows to `target`.
pub fn init_block(bank: &FeatureBank, k: usize, seed: u64, target: f64) -> Result<ConceptTokenBlock> {
    let mut block = init_block_unaligned(bank, k, seed)?;
    align_block(&mut block, target)?;
    Ok(block)
}

/// Random-direction block with every row at norm `target`; the ablation arm.
pub fn random_block(concept: &str, k: usize, dim: usize, target: f64, seed: u64) -> Result<ConceptTokenBlock> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A_4D0E);
    let mut block = ConceptTokenBlock {
        concept: concept.to_string(),
        sks: linalg::gaussian(&mut rng, 1, dim, 1.0),
        tokens: (0..k).map(|_| linalg::gaussian(&mut rng, 1, dim, 1.0)).collect(),
    };
    align_block(&mut block, target)?;
    Ok(block)
}
