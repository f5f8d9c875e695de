use delta_metrics::choice::parse_letters;
use delta_metrics::cider::{cider_one, Corpus};
use delta_metrics::*;
use proptest::prelude::*;

fn rec(id: &str, format: AnswerFormat, pred: &str, reference: &str) -> QAEvalRecord {
    QAEvalRecord {
        id: id.into(),
        task: "CIC".into(),
        format,
        prediction: pred.into(),
        references: vec![reference.into()],
        score: 0.0,
    }
}

#[test]
fn letters_parse() {
    assert_eq!(parse_letters(" B "), Some(['b'].into()));
    assert_eq!(parse_letters("a , c"), Some(['a', 'c'].into()));
    assert_eq!(parse_letters("c,a"), Some(['a', 'c'].into()));
    for bad in ["", "ab", "a , 3", "option b", ","] {
        assert_eq!(parse_letters(bad), None, "{bad}");
    }
}

#[test]
fn all_correct_scores_one() {
    let mut r = vec![
        rec("1", AnswerFormat::SingleChoice, "b", "b"),
        rec("2", AnswerFormat::MultiChoice, "a , d", "a , d"),
    ];
    let s = choice_accuracy(&mut r).unwrap();
    assert_eq!((s.single, s.multi), (Some(1.0), Some(1.0)));
    assert!(r.iter().all(|x| x.score == 1.0));
}

#[test]
fn empty_record_set_is_a_contract_error() {
    assert!(matches!(choice_accuracy(&mut []), Err(MetricsError::Contract(_))));
    let mut open = vec![rec("1", AnswerFormat::Open, "x", "y")];
    assert!(matches!(choice_accuracy(&mut open), Err(MetricsError::Contract(_))));
}

#[test]
fn mixed_records_match_hand_count() {
    let mut r = vec![
        rec("1", AnswerFormat::SingleChoice, "B", "b"),
        rec("2", AnswerFormat::SingleChoice, "the answer is c", "c"),
        rec("3", AnswerFormat::MultiChoice, "c , a", "a , c"),
        rec("4", AnswerFormat::MultiChoice, "a", "a , c"),
        rec("5", AnswerFormat::Open, "anything", "else"),
    ];
    let s = choice_accuracy(&mut r).unwrap();
    assert_eq!((s.single, s.multi), (Some(0.5), Some(0.5)));
    assert_eq!((s.n_single, s.n_multi), (2, 2));
    assert_eq!(s.unparseable, vec!["2".to_string()]);
    let scores: Vec<f64> = r.iter().map(|x| x.score).collect();
    assert_eq!(scores, vec![1.0, 0.0, 1.0, 0.0, 0.0]);

    let mut only_single = vec![rec("1", AnswerFormat::SingleChoice, "a", "b")];
    let s = choice_accuracy(&mut only_single).unwrap();
    assert_eq!((s.single, s.multi), (Some(0.0), None));
}

fn toy() -> (Vec<Vec<String>>, Corpus) {
    let refs: Vec<Vec<String>> = ["a b", "a c", "d e"].iter().map(|s| vec![s.to_string()]).collect();
    let corpus = Corpus::from_references(&refs).unwrap();
    (refs, corpus)
}

#[test]
fn cider_matches_hand_computed_tf_idf_cosine() {
    let (refs, corpus) = toy();
    // identical: unigram and bigram cosines are 1, no tri/4-grams
    assert!((cider_one("a b", &refs[0], &corpus) - 5.0).abs() < 1e-12);
    // shared unigram "a" only: idf(a) = ln 3/2, idf(b) = idf(c) = ln 3
    let (x, y) = ((1.5f64).ln(), 3f64.ln());
    let want = 10.0 * (x * x / (x * x + y * y)) / 4.0;
    assert!((cider_one("a c", &refs[0], &corpus) - want).abs() < 1e-12);
    // repeated tokens weigh by count; bigrams "a a" (unseen, idf ln 3) and "a b"
    let uni = (2.0 * x * x + y * y) / ((4.0 * x * x + y * y).sqrt() * (x * x + y * y).sqrt());
    let bi = 1.0 / 2f64.sqrt();
    let want = 10.0 * (uni + bi) / 4.0;
    assert!((cider_one("a a b", &refs[0], &corpus) - want).abs() < 1e-12);
}

#[test]
fn cider_disjoint_and_empty() {
    let (refs, corpus) = toy();
    assert_eq!(cider_one("d e", &refs[0], &corpus), 0.0);
    let preds = vec!["a b".to_string(), "   ".to_string(), "x y".to_string()];
    let s = cider(&preds, &refs, &corpus).unwrap();
    assert_eq!(s.empty, vec![1]);
    assert_eq!(s.per_sample[1], 0.0);
    assert_eq!(s.per_sample[2], 0.0);
    assert!((s.mean - 5.0 / 3.0).abs() < 1e-12);
    assert!(matches!(Corpus::from_references(&[]), Err(MetricsError::Input(_))));
    assert!(matches!(cider(&preds[..1], &refs, &corpus), Err(MetricsError::Input(_))));
}

#[test]
fn identical_prediction_is_maximal_for_its_reference() {
    let refs: Vec<Vec<String>> = [
        "2 patches covering 40 pixels , 0.98% of the image .",
        "mainly vegetation succession ( 3.10% of the image ) .",
        "changes are located in the north-west , center .",
        "no area changed into water .",
    ]
    .iter()
    .map(|s| vec![s.to_string()])
    .collect();
    let corpus = Corpus::from_references(&refs).unwrap();
    for (i, r) in refs.iter().enumerate() {
        let own = cider_one(&r[0], r, &corpus);
        for (j, other) in refs.iter().enumerate() {
            if i != j {
                assert!(own > cider_one(&other[0], r, &corpus));
            }
        }
        assert!(own > 7.0, "{own}");
    }
}

proptest! {
    #[test]
    fn self_similarity_dominates(
        words in prop::collection::vec(prop::collection::vec(0u8..6, 1..8), 2..6),
    ) {
        let sents: Vec<String> = words
            .iter()
            .map(|w| w.iter().map(|t| format!("w{t}")).collect::<Vec<_>>().join(" "))
            .collect();
        let refs: Vec<Vec<String>> = sents.iter().map(|s| vec![s.clone()]).collect();
        let corpus = Corpus::from_references(&refs).unwrap();
        let pred = &sents[0];
        let own = cider_one(pred, &[pred.clone()], &corpus);
        for other in &sents {
            prop_assert!(own + 1e-12 >= cider_one(pred, &[other.clone()], &corpus));
        }
    }

    #[test]
    fn multi_choice_accuracy_ignores_option_order(mask in 1u8..64, rot in 0usize..6) {
        let letters: Vec<char> = (0..6).filter(|i| mask & (1 << i) != 0).map(|i| (b'a' + i) as char).collect();
        let mut shuffled = letters.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let join = |v: &[char]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" , ");
        let mut r = vec![rec("1", AnswerFormat::MultiChoice, &join(&shuffled), &join(&letters))];
        prop_assert_eq!(choice_accuracy(&mut r).unwrap().multi, Some(1.0));
    }
}

#[test]
fn report_round_trips_and_writes_csv() {
    let c = scd_confusion(&[vec![0, 1, 2, 0]], &[vec![0, 1, 1, 0]], 3).unwrap();
    let s = scd_scores(&c).unwrap();
    let mut rep = EvalReport::new("full", serde_json::json!({"cea": true}), c, s, &["unchanged", "low vegetation"]);
    rep.records.push(rec("1", AnswerFormat::SingleChoice, "a", "a"));
    assert_eq!(rep.per_class[2].name, "class 2");
    let dir = tempfile::tempdir().unwrap();
    let (json, csv) = rep.write(dir.path(), "report_full").unwrap();
    assert_eq!(EvalReport::read(&json).unwrap(), rep);
    assert_eq!(std::fs::read_to_string(csv).unwrap(), "gt,pred0,pred1,pred2\n0,2,0,0\n1,0,1,1\n2,0,0,0\n");
    assert!(rep.conventions.iter().any(|c| c.contains("zero denominator")));
}
