use image::{Rgb, RgbImage};
use mcpersona::data::{generate_synthetic_scenario, third_of, ScenarioSpec};
use mcpersona::eval::grounding_banks;
use mcpersona::grounding::{
    annotate, confidence_maps, detect, ground, glyph_radius, similarity_stack, ConfidenceMap, GroundingConfig, Mark,
    MarkSet,
};
use mcpersona::vision::{Encoder, FeatureBank, FeatureSpace, VisionTower};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy(seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(64, 64, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

fn random_bank(seed: u64, l: usize, d: usize) -> FeatureBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..l).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    FeatureBank::new(format!("b{seed}"), FeatureSpace::Encoder, v).unwrap()
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn similarity_stack_matches_naive_cosine() {
    let enc = Encoder::new(8, 32, 5);
    let grid = enc.encode(&noisy(1)).unwrap();
    let bank = random_bank(2, 7, 32);
    let s = similarity_stack(&bank, &grid).unwrap();
    assert_eq!(s.maps.len(), 7);
    for (b, map) in bank.vectors.iter().zip(&s.maps) {
        for p in 0..grid.patches() {
            assert!((map[p] - naive_cos(b, grid.feature(p))).abs() < 1e-6);
        }
    }
    assert!(similarity_stack(&random_bank(0, 2, 16), &grid).is_err());
}

#[test]
fn corrected_maps_sum_to_zero() {
    let enc = Encoder::new(8, 32, 5);
    let grid = enc.encode(&noisy(3)).unwrap();
    for c in 1..=4 {
        let stacks: Vec<_> = (0..c).map(|j| similarity_stack(&random_bank(j as u64 + 10, 5, 32), &grid).unwrap()).collect();
        let maps = confidence_maps(&stacks).unwrap();
        for p in 0..64 {
            let sum: f64 = maps.iter().map(|m| m.values[p]).sum();
            assert!(sum.abs() < 1e-9);
            // corrected value is the bank mean minus the mean over concepts
            let means: Vec<f64> = stacks.iter().map(|s| s.maps.iter().map(|m| m[p]).sum::<f64>() / 5.0).collect();
            let avg = means.iter().sum::<f64>() / c as f64;
            for (m, mean) in maps.iter().zip(&means) {
                assert!((m.values[p] - (mean - avg)).abs() < 1e-12);
            }
        }
        if c == 1 {
            assert!(maps[0].values.iter().all(|&v| v == 0.0));
        }
        if c == 2 {
            assert!(maps[0].values.iter().zip(&maps[1].values).all(|(a, b)| *a == -*b));
        }
    }
    assert!(confidence_maps(&[]).is_err());
}

#[test]
fn detection_threshold_and_location() {
    let cfg = GroundingConfig { tau: 0.5, gamma: 0.02 };
    let mut values = vec![0.0; 64];
    values[2 * 8 + 5] = 0.9;
    let map = ConfidenceMap { concept: "c".into(), h: 8, w: 8, patch: 8, values: values.clone() };
    // one patch of 64 exceeds tau: ratio 1/64 is below gamma
    let d = detect(&map, &cfg);
    assert!(!d.present && d.location.is_none());
    assert!((d.exceedance_ratio - 1.0 / 64.0).abs() < 1e-15);
    values[2 * 8 + 6] = 0.6;
    let d = detect(&ConfidenceMap { values, ..map }, &cfg);
    assert!(d.present);
    assert_eq!(d.location, Some((5 * 8 + 4, 2 * 8 + 4)));
    assert_eq!(d.max_confidence, 0.9);
}

#[test]
fn annotation_only_touches_mark_discs() {
    let img = noisy(4);
    let marks = MarkSet {
        marks: vec![
            Mark { concept: 0, identifier: "<a>".into(), x: 12, y: 12, number: 1 },
            Mark { concept: 1, identifier: "<b>".into(), x: 50, y: 40, number: 2 },
        ],
    };
    let (out, prompt) = annotate(&img, &marks).unwrap();
    assert!(prompt.contains("<a>") && prompt.contains("<b>"));
    assert!(prompt.find("<a>").unwrap() < prompt.find("<b>").unwrap());
    for (x, y, px) in out.enumerate_pixels() {
        let near = marks.marks.iter().any(|m| {
            let (dx, dy) = (x as f64 - m.x as f64, y as f64 - m.y as f64);
            (dx * dx + dy * dy).sqrt() <= glyph_radius(m.number) as f64 + 1.0
        });
        if !near {
            assert_eq!(px, img.get_pixel(x, y));
        }
    }
    assert_ne!(out, img);
    let (same, empty) = annotate(&img, &MarkSet::default()).unwrap();
    assert_eq!(same, img);
    assert!(empty.is_empty() || !empty.contains('<'));
}

#[test]
fn two_concept_images_are_grounded_in_the_right_third() {
    let s = generate_synthetic_scenario(&ScenarioSpec::new(2, 10, 3)).unwrap();
    let tower = VisionTower::new(8, 64, 64, 0);
    let banks = grounding_banks(&tower, &s, 10).unwrap();
    let cfg = GroundingConfig::default();
    let (mut hits, mut total) = (0, 0);
    for t in 0..20 {
        let scene = s.render_multi(100 + t);
        let g = ground(&tower.encoder, &banks, &s.identifiers(), &scene.image, &cfg).unwrap();
        for (j, d) in g.detections.iter().enumerate() {
            let obj = scene.object_of(j).unwrap();
            total += 1;
            if let Some((x, _)) = d.location {
                hits += usize::from(third_of(x as f64, 64.0) == obj.third());
            }
        }
    }
    assert!(hits as f64 >= 0.9 * total as f64, "{hits}/{total}");

    let mut clean = 0;
    for t in 0..20 {
        let scene = s.render_distractor(500 + t, 1 + t as usize % 3);
        let g = ground(&tower.encoder, &banks, &s.identifiers(), &scene.image, &cfg).unwrap();
        clean += usize::from(g.marks.is_empty());
    }
    assert!(clean >= 19, "{clean}/20");
}

#[test]
fn bad_grounding_inputs() {
    let tower = VisionTower::new(8, 16, 16, 0);
    let img = noisy(0);
    let bank = random_bank(1, 3, 16);
    let ids = vec!["<a>".to_string()];
    assert!(ground(&tower.encoder, &[], &[], &img, &GroundingConfig::default()).is_err());
    assert!(ground(&tower.encoder, &[bank.clone()], &[], &img, &GroundingConfig::default()).is_err());
    assert!(ground(&tower.encoder, &[bank], &ids, &img, &GroundingConfig { tau: 1.5, gamma: 0.1 }).is_err());
}
