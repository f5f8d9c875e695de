use std::collections::BTreeMap;

use delta_core::changeseg::PromptGeometry;
use delta_deltagen::grid::{LabelGrid, Mask};
use delta_deltagen::qa::*;
use delta_deltagen::transitions::{extract_transitions, Transitions};
use delta_deltagen::trend::TrendTable;
use delta_deltagen::GenError;
use numcore::SeedStream;

fn grid(rows: &[&str]) -> LabelGrid {
    LabelGrid {
        width: rows[0].len(),
        height: rows.len(),
        cells: rows.iter().flat_map(|r| r.bytes().map(|b| b - b'0')).collect(),
    }
}

fn facts<'a>(t: &'a Transitions, table: &'a TrendTable) -> PairFacts<'a> {
    PairFacts {
        scene_id: "g",
        pair: (1, 2),
        transitions: t,
        classes: 6,
        table,
    }
}

fn all_samples(f: PairFacts, max_prompts: usize) -> Vec<QASample> {
    let mut out = Vec::new();
    for scope in [Scope::H, Scope::P] {
        for task in Task::ALL {
            out.extend(gen_qa(f, scope, task, max_prompts, SeedStream::new(4)).unwrap());
        }
    }
    for (i, s) in out.iter_mut().enumerate() {
        s.id = format!("g-{i:03}");
    }
    out
}

#[test]
fn single_transition_scene_answers() {
    let a = grid(&["1111", "1111", "2222", "2222"]);
    let b = grid(&["1111", "1331", "2222", "2222"]);
    let t = extract_transitions(&a, &b, SeedStream::new(0)).unwrap();
    let table = TrendTable::default();
    let samples = all_samples(facts(&t, &table), 1);
    let single = samples.iter().find(|s| s.format == Format::SingleChoice && s.scope == Scope::H).unwrap();
    let letters = QASample::answer_letters(&single.answer).unwrap();
    assert_eq!(letters.len(), 1);
    assert_eq!(single.options[letters[0]], "low vegetation to tree");
    assert_eq!(single.options.len(), 4);

    let cqs = samples.iter().find(|s| s.task == Task::Cqs && s.scope == Scope::H).unwrap();
    let (patches, pixels, pct) = parse_quantity(&cqs.answer).unwrap();
    assert_eq!((patches, pixels), (1, 2));
    assert!((pct - t.records[0].area_proportion * 100.0).abs() <= 0.005);
    assert_eq!(cqs.answer, "1 patch covering 2 pixels , 12.50% of the image .");

    let seg: Vec<&QASample> = samples.iter().filter(|s| s.target_class.is_some()).collect();
    assert_eq!(seg.len(), 6);
    assert_eq!(seg[2].answer, "<T1T2> [SEG]");
    assert_eq!(seg[2].mask_refs, vec!["g/1_3_t1t2".to_string()]);
    assert_eq!(seg[0].answer, "no area changed into low vegetation .");

    let csa = samples.iter().find(|s| s.task == Task::Csa && s.scope == Scope::H).unwrap();
    assert_eq!(csa.answer, "changes are located in the center .");
    let cti = samples.iter().find(|s| s.task == Task::Cti && s.scope == Scope::H).unwrap();
    assert_eq!(cti.answer, "mainly vegetation succession ( 12.50% of the image ) .");
}

#[test]
fn quantity_text_round_trips() {
    let s = AreaStats {
        patches: 3,
        pixels: 41,
    };
    let a = quantity_answer(s, 4096);
    assert_eq!(a, "3 patches covering 41 pixels , 1.00% of the image .");
    assert_eq!(parse_quantity(&a), Some((3, 41, 1.0)));
    assert_eq!(parse_quantity(NO_CHANGE_REGION), None);
}

#[test]
fn sectors_follow_three_by_three_grid() {
    assert_eq!(sector(0.0, 0.0, 9), "north-west");
    assert_eq!(sector(4.5, 4.5, 9), "center");
    assert_eq!(sector(8.9, 3.0, 9), "east");
    assert_eq!(sector(1.0, 8.0, 9), "south-west");
    let m = Mask::from_rows(&["100000001", "000000000", "000000000", "000000000", "000010000", "000000000", "000000000", "000000000", "000000000"]);
    assert_eq!(mask_sectors(&m), vec!["north-west", "north-east", "center"]);
}

#[test]
fn prompt_without_change_gets_explicit_answer() {
    let a = grid(&["1111", "1111", "2222", "2222"]);
    let b = grid(&["1111", "1331", "2222", "2222"]);
    let t = extract_transitions(&a, &b, SeedStream::new(0)).unwrap();
    let table = TrendTable::default();
    let p = PromptGeometry::Box { x1: 0, y1: 2, x2: 3, y2: 3 };
    let out = prompt_samples(facts(&t, &table), p, SeedStream::new(1)).unwrap();
    assert_eq!(out.len(), 2);
    assert!(out.iter().all(|s| s.answer == NO_CHANGE_REGION && s.prompt == p && s.scope == Scope::P));
}

#[test]
fn point_prompt_region_is_the_instance_under_it() {
    let changed = Mask::from_rows(&["0110", "0000", "1001", "1001"]);
    let r = prompt_region(&PromptGeometry::Point { x: 3, y: 3 }, &changed);
    assert_eq!(r, Mask::from_rows(&["0000", "0000", "0001", "0001"]));
    let off = prompt_region(&PromptGeometry::Point { x: 0, y: 0 }, &changed);
    assert_eq!(off.count(), 1);
    let b = prompt_region(&PromptGeometry::Box { x1: 1, y1: 0, x2: 2, y2: 1 }, &changed);
    assert_eq!(b, Mask::from_rows(&["0110", "0110", "0000", "0000"]));
}

#[test]
fn mask_refs_round_trip() {
    let r = MaskRef { scene: "s0003", from: 2, to: 5, pair: (2, 3) };
    let s = r.to_string();
    assert_eq!(s, "s0003/2_5_t2t3");
    assert_eq!(MaskRef::parse(&s), Some(r));
    for bad in ["s0003", "s/2_5", "s/2_5_t2", "s/2_5_t2t3_x", "s/a_5_t1t2"] {
        assert_eq!(MaskRef::parse(bad), None, "{bad}");
    }
    assert_eq!(seg_pairs_in("<T1T2> [SEG] <T2T3> [SEG]"), vec![(1, 2), (2, 3)]);
    assert_eq!(seg_pairs_in("x [SEG]"), vec![(1, 2)]);
}

/// Stage grids with a 1->2->3 chain, a stage-2-only change and a stage-1-only change.
fn tri() -> Vec<Transitions> {
    let g1 = grid(&["1111", "1111", "4444", "5555"]);
    let g2 = grid(&["2211", "1111", "6444", "5555"]);
    let g3 = grid(&["3211", "1111", "6444", "5556"]);
    vec![
        extract_transitions(&g1, &g2, SeedStream::new(0)).unwrap(),
        extract_transitions(&g2, &g3, SeedStream::new(1)).unwrap(),
    ]
}

#[test]
fn composite_events_chain_and_single_stage() {
    let stages = tri();
    let events = composite_events(&stages).unwrap();
    let chain: Vec<_> = events.iter().filter(|e| e.path.len() == 3).collect();
    assert_eq!(chain.len(), 1);
    assert_eq!(chain[0].path, vec![1, 2, 3]);
    assert_eq!(chain[0].describe(), "low vegetation to ground to tree");
    // the composite pixel set is the intersection of the two stage masks
    let r12 = stages[0].get(1, 2).unwrap();
    let r23 = stages[1].get(2, 3).unwrap();
    assert_eq!(chain[0].mask, r12.mask.and(&r23.mask));
    assert_eq!(chain[0].mask.count(), 1);

    let only2: Vec<_> = events.iter().filter(|e| e.stages == vec![(2, 3)]).collect();
    assert_eq!(only2.len(), 1);
    assert_eq!(only2[0].path, vec![5, 6]);
    let only1: Vec<_> = events.iter().filter(|e| e.stages == vec![(1, 2)]).collect();
    let paths: Vec<&Vec<u8>> = only1.iter().map(|e| &e.path).collect();
    assert_eq!(paths, vec![&vec![1, 2], &vec![4, 6]]);
    assert_eq!(only1[0].mask.count(), 1);

    let (_, qa) = compose_tritemporal("t", &stages).unwrap();
    assert_eq!(qa.len(), 2);
    assert_eq!(qa[0].answer, "low vegetation to ground to tree ( 6.25% of the image ) .");
    let seg = &qa[1];
    assert_eq!(seg.answer, "<T1T2> [SEG] <T2T3> [SEG]");
    assert_eq!(seg.mask_refs, vec!["t/1_2_t1t2".to_string(), "t/2_3_t2t3".to_string()]);
    let masks: BTreeMap<String, Mask> = [
        ("t/1_2_t1t2".to_string(), r12.mask.clone()),
        ("t/2_3_t2t3".to_string(), r23.mask.clone()),
    ]
    .into();
    let targets = seg_targets(seg, |r| Ok(masks[r].clone())).unwrap();
    assert_eq!(targets.len(), 2);
    assert_eq!(targets[0].0, (1, 2));
    assert_eq!(targets[1].0, (2, 3));
    assert!(targets.iter().all(|(_, m)| *m == chain[0].mask));

    assert!(matches!(composite_events(&stages[..1]), Err(GenError::Input(_))));
    assert!(matches!(compose_tritemporal("t", &stages[..1]), Err(GenError::Input(_))));
}

#[test]
fn prompt_scope_targets_are_clipped_to_region() {
    let a = grid(&["11111111"; 8]);
    let b = grid(&[
        "33111111", "33111111", "11111111", "11111111", "11111111", "11111111", "11111133", "11111133",
    ]);
    let t = extract_transitions(&a, &b, SeedStream::new(0)).unwrap();
    assert_eq!(t.records.len(), 1);
    let table = TrendTable::default();
    let p = PromptGeometry::Point { x: 7, y: 7 };
    let out = prompt_samples(facts(&t, &table), p, SeedStream::new(2)).unwrap();
    let seg = out.iter().find(|s| s.answer.contains("[SEG]")).unwrap();
    let full = t.records[0].mask.clone();
    let targets = seg_targets(seg, |_| Ok(full.clone())).unwrap();
    let mut rows = ["00000000"; 8];
    rows[6] = "00000011";
    rows[7] = "00000011";
    assert_eq!(targets[0].1, Mask::from_rows(&rows));
    let cqs = out.iter().find(|s| s.task == Task::Cqs).unwrap();
    assert_eq!(cqs.answer, "1 patch covering 4 pixels , 6.25% of the image .");
    let csa = out.iter().find(|s| s.task == Task::Csa).unwrap();
    assert_eq!(csa.answer, "it is located in the south-east .");
}

/// Two transitions on an 8x8 scene; the expected file was generated once and
/// checked line by line against the grids below.
#[test]
fn two_transition_scene_matches_golden_file() {
    let a = grid(&[
        "11112222", "11112222", "11112222", "11112222", "33334444", "33334444", "33334444", "33334444",
    ]);
    let b = grid(&[
        "55112222", "55112222", "11112222", "11112222", "33334444", "33334444", "33334411", "33334411",
    ]);
    let t = extract_transitions(&a, &b, SeedStream::new(9)).unwrap();
    let table = TrendTable::default();
    let samples = all_samples(facts(&t, &table), 2);
    let got: String = samples.iter().map(|s| serde_json::to_string(s).unwrap() + "\n").collect();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/two_transitions.jsonl");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(path, &got).unwrap();
    }
    let want = std::fs::read_to_string(path).unwrap();
    assert_eq!(got, want);
}
