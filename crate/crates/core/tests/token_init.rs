use mcpersona::token_init::{
    init_block, init_block_unaligned, kmeans, norm_align, random_block, reference_norm,
};
use mcpersona::vision::{FeatureBank, FeatureSpace};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn separated_blobs_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let anchors = [[10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0], [-10.0, -10.0, 0.0]];
    let mut pts = Vec::new();
    for a in &anchors {
        for _ in 0..25 {
            pts.push(a.iter().map(|x| x + rng.gen_range(-0.5..0.5)).collect::<Vec<f64>>());
        }
    }
    let r = kmeans(&pts, 4, 3, 100).unwrap();
    for blob in 0..4 {
        let label = r.assignments[blob * 25];
        assert!(r.assignments[blob * 25..(blob + 1) * 25].iter().all(|&a| a == label));
        let c = &r.centers[label];
        assert!(sq(c, &anchors[blob]) < 0.1);
    }
    let mut labels = r.assignments.clone();
    labels.sort();
    labels.dedup();
    assert_eq!(labels.len(), 4);
}

#[test]
fn k_equal_to_n_puts_each_point_at_its_own_center() {
    let pts = cloud(1, 16, 8);
    let r = kmeans(&pts, 16, 0, 50).unwrap();
    assert!(r.inertia < 1e-20);
    let mut seen = r.assignments.clone();
    seen.sort();
    assert_eq!(seen, (0..16).collect::<Vec<_>>());
}

#[test]
fn rejects_bad_arguments() {
    let pts = cloud(1, 5, 3);
    assert!(kmeans(&pts, 0, 0, 10).is_err());
    assert!(kmeans(&pts, 6, 0, 10).is_err());
    assert!(kmeans(&pts, 2, 0, 0).is_err());
    let mut ragged = pts.clone();
    ragged[2].pop();
    assert!(kmeans(&ragged, 2, 0, 10).is_err());
}

#[test]
fn sks_is_mean_of_centers_before_alignment() {
    let bank = FeatureBank::new("dog", FeatureSpace::Projector, cloud(4, 80, 12)).unwrap();
    let block = init_block_unaligned(&bank, 16, 5).unwrap();
    let centers = kmeans(&bank.vectors, 16, 5, 100).unwrap().centers;
    assert_eq!(block.tokens, centers);
    for d in 0..12 {
        let mean = centers.iter().map(|c| c[d]).sum::<f64>() / 16.0;
        assert!((block.sks[d] - mean).abs() < 1e-12);
    }
}

#[test]
fn aligned_block_rows_share_the_reference_norm_and_keep_direction() {
    let bank = FeatureBank::new("cat", FeatureSpace::Projector, cloud(6, 60, 10)).unwrap();
    let raw = init_block_unaligned(&bank, 8, 2).unwrap();
    let block = init_block(&bank, 8, 2, 3.5).unwrap();
    assert_eq!(block.k(), 8);
    for (a, r) in block.rows().zip(raw.rows()) {
        assert!((norm(a) - 3.5).abs() < 1e-9);
        let cos = a.iter().zip(r).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(r));
        assert!((cos - 1.0).abs() < 1e-12);
    }
}

#[test]
fn encoder_space_bank_and_small_bank_are_rejected() {
    let enc = FeatureBank::new("x", FeatureSpace::Encoder, cloud(1, 40, 6)).unwrap();
    assert!(init_block(&enc, 4, 0, 1.0).is_err());
    let small = FeatureBank::new("x", FeatureSpace::Projector, cloud(1, 3, 6)).unwrap();
    assert!(init_block(&small, 4, 0, 1.0).is_err());
}

#[test]
fn random_block_is_seeded_and_aligned() {
    let a = random_block("c", 16, 32, 2.0, 7).unwrap();
    assert_eq!(a, random_block("c", 16, 32, 2.0, 7).unwrap());
    assert_ne!(a, random_block("c", 16, 32, 2.0, 8).unwrap());
    assert!(a.rows().all(|r| (norm(r) - 2.0).abs() < 1e-9));
}

#[test]
fn reference_norm_is_mean_row_norm() {
    let table = [3.0, 4.0, 0.0, 1.0, 6.0, 8.0];
    assert!((reference_norm(&table, 2).unwrap() - (5.0 + 1.0 + 10.0) / 3.0).abs() < 1e-12);
    assert!(reference_norm(&table, 4).is_err());
    assert!(norm_align(&[0.0, 0.0], 1.0).is_err());
    assert!(norm_align(&[1.0, 0.0], 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lloyd_fixed_point_properties(seed in 0u64..1000, n in 8usize..60, k in 1usize..8, d in 1usize..6) {
        let pts = cloud(seed, n, d);
        let r = kmeans(&pts, k, seed, 200).unwrap();
        prop_assert_eq!(r.centers.len(), k);
        // inertia never increases
        for w in r.history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
        // every point is assigned to a nearest center
        let mut total = 0.0;
        for (p, &a) in pts.iter().zip(&r.assignments) {
            let best = r.centers.iter().map(|c| sq(p, c)).fold(f64::INFINITY, f64::min);
            prop_assert!(sq(p, &r.centers[a]) <= best + 1e-12);
            total += sq(p, &r.centers[a]);
        }
        prop_assert!((total - r.inertia).abs() <= 1e-9 * total.max(1.0));
        // no empty clusters
        for c in 0..k {
            prop_assert!(r.assignments.contains(&c));
        }
        // same seed, same result
        let again = kmeans(&pts, k, seed, 200).unwrap();
        prop_assert_eq!(again.assignments, r.assignments);
    }

    #[test]
    fn norm_align_hits_target(v in prop::collection::vec(-5.0f64..5.0, 1..20), t in 0.01f64..20.0) {
        prop_assume!(norm(&v) > 1e-6);
        let a = norm_align(&v, t).unwrap();
        prop_assert!((norm(&a) - t).abs() < 1e-9 * t.max(1.0));
    }
}
