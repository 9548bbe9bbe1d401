use mcpersona::data::{generate_synthetic_scenario, ImageRef, ScenarioSpec};
use mcpersona::eval::{
    balanced_recall, bleu, captioning_recall, compose_suite, parse_yes_no, validate_suite, weighted, Split, TaskScore,
};

#[test]
fn always_yes_scores_one_half() {
    let expected: Vec<bool> = (0..37).map(|i| i % 3 == 0).collect();
    let replies = vec![Some(true); expected.len()];
    assert_eq!(balanced_recall(&expected, &replies).unwrap(), 0.5);
    let replies = vec![Some(false); expected.len()];
    assert_eq!(balanced_recall(&expected, &replies).unwrap(), 0.5);
    let perfect: Vec<Option<bool>> = expected.iter().map(|&e| Some(e)).collect();
    assert_eq!(balanced_recall(&expected, &perfect).unwrap(), 1.0);
    assert!(balanced_recall(&[true, true], &[Some(true), None]).is_err());
    assert!(balanced_recall(&[true], &[]).is_err());
}

#[test]
fn unparseable_replies_are_wrong() {
    let expected = [true, true, false, false];
    let replies = ["Yes.", "maybe", " no", "Nope"].map(parse_yes_no);
    // positives 1/2, negatives 2/2
    assert_eq!(balanced_recall(&expected, &replies).unwrap(), 0.75);
}

#[test]
fn bleu_fixed_points_and_worksheet() {
    assert_eq!(bleu("a red circle on the left", "a red circle on the left").unwrap(), 1.0);
    assert_eq!(bleu("x y z", "a b c d").unwrap(), 0.0);
    // clipped precisions 3/3, (2+1)/(2+1), (1+1)/(1+1), (0+1)/(0+1);
    // brevity penalty exp(1 - 4/3)
    let hand = (1.0f64 - 4.0 / 3.0).exp();
    assert!((bleu("the cat sat", "the cat sat down").unwrap() - hand).abs() < 1e-9);
    // p1 = 2/4, p2 = (1+1)/(3+1), p3 = (0+1)/(2+1), p4 = (0+1)/(1+1), no penalty
    let hand = (0.5f64.ln() + 0.5f64.ln() + (1.0f64 / 3.0).ln() + 0.5f64.ln()) / 4.0;
    assert!((bleu("the cat ran off", "the cat sat").unwrap() - hand.exp()).abs() < 1e-9);
    assert_eq!(bleu("the  cat\tsat", "the cat sat").unwrap(), bleu("the cat sat", "the cat sat").unwrap());
    assert!(bleu("x", "").is_err());
}

#[test]
fn weighted_choice_reproduces_the_reported_aggregate() {
    let w = weighted(0.882, 1180, 0.905, 600).unwrap();
    assert_eq!((w * 1000.0).round() / 1000.0, 0.890);
    let direct = (0.882 * 1180.0 + 0.905 * 600.0) / 1780.0;
    assert!((w - direct).abs() < 1e-12);
    assert_eq!(weighted(0.7, 3, 0.7, 9).unwrap(), 0.7);
    assert!(weighted(0.5, 0, 0.5, 0).is_err());
    let s = TaskScore::new(Some(0.882), 1180, Some(0.905), 600);
    assert_eq!(s.weighted, Some(w));
    assert_eq!(TaskScore::new(None, 0, Some(0.3), 4).weighted, Some(0.3));
}

#[test]
fn captioning_recall_counts_required_mentions() {
    let caps = vec!["<a> next to <b>".to_string(), "only <b>".to_string()];
    let req = vec![vec!["<a>".to_string(), "<b>".to_string()], vec!["<a>".to_string()]];
    assert!((captioning_recall(&caps, &req).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!(captioning_recall(&[], &[]).is_err());
}

#[test]
fn suite_sizes_follow_the_counting_identities() {
    for m in 1..=4usize {
        let s = generate_synthetic_scenario(&ScenarioSpec::new(m, 2, 9)).unwrap();
        let suite = compose_suite(&s).unwrap();
        validate_suite(&suite, m).unwrap();
        let pos = suite.recognition.iter().filter(|r| r.expected).count();
        assert_eq!(suite.recognition.len(), 5 * m * m + 5 * (m + 1) + 100, "m={m}");
        assert_eq!(pos, 5 * m + 5 * (m + 1));
        assert_eq!(suite.choice.len(), 5 * (m + (1 << m) - 1));
        assert_eq!(suite.vqa.len(), 5 * m + 5);
        // splits follow the number of objects in the image
        for r in &suite.recognition {
            let objects = s.image(&r.image).unwrap().objects.len();
            let single_concept_image = matches!(r.image, ImageRef::TestSingle { .. } | ImageRef::EvalExternalSingle(_));
            assert_eq!(r.split == Split::Single, single_concept_image, "{r:?} with {objects} objects");
        }
        // labels agree with the image contents
        for r in &suite.recognition {
            let present = s.image(&r.image).unwrap().concepts();
            assert_eq!(r.expected, r.concepts.iter().all(|c| present.contains(c)));
        }
        let mut broken = suite.clone();
        broken.vqa.pop();
        assert!(validate_suite(&broken, m).is_err());
    }
}

#[test]
fn suite_is_deterministic() {
    let s = generate_synthetic_scenario(&ScenarioSpec::new(3, 2, 1)).unwrap();
    assert_eq!(compose_suite(&s).unwrap(), compose_suite(&s).unwrap());
    let mut small = ScenarioSpec::new(2, 2, 1);
    small.eval_externals = 10;
    assert!(compose_suite(&generate_synthetic_scenario(&small).unwrap()).is_err());
}
