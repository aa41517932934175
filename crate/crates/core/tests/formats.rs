use std::path::Path;

use xsrl::conllu::{derive_triplets, parse_conllu_plus_str, LabeledTriplet};
use xsrl::features::build_vocabularies;
use xsrl::metrics::score;

fn sample_text() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/en_sample.conllu")).unwrap()
}

#[test]
fn english_sample_has_known_structure() {
    let c = parse_conllu_plus_str(&sample_text()).unwrap();
    assert_eq!(c.len(), 4);
    let frames: usize = c.sentences.iter().map(|s| s.frames.len()).sum();
    assert_eq!(frames, 4);
    let triplets: Vec<_> = c.sentences.iter().map(derive_triplets).collect();
    assert_eq!(triplets.iter().map(|t| t.len()).collect::<Vec<_>>(), vec![3, 4, 0, 0]);
    assert!(triplets[1].contains(&LabeledTriplet {
        predicate: 7,
        argument: 1,
        label: "A0".into(),
    }));
    let v = build_vocabularies(&c, 1).unwrap();
    let roles: Vec<&str> = v.roles.iter().collect();
    assert_eq!(roles, ["A0", "A1", "A2", "AM-TMP"]);
}

#[test]
fn english_sample_round_trips_verbatim() {
    let text = sample_text();
    let c = parse_conllu_plus_str(&text).unwrap();
    assert_eq!(c.to_conllu_plus(), text);
}

#[test]
fn gold_scored_against_itself_is_perfect() {
    let c = parse_conllu_plus_str(&sample_text()).unwrap();
    let gold: Vec<_> = c.sentences.iter().map(derive_triplets).collect();
    let r = score(&gold, &gold);
    assert_eq!((r.precision(), r.recall(), r.f1()), (100.0, 100.0, 100.0));
    for label in ["A0", "A1", "A2", "AM-TMP"] {
        assert_eq!(r.per_label[label].f1(), 100.0, "{label}");
    }
    let gold_by_bucket: usize = r.by_distance.iter().map(|c| c.gold).sum();
    assert_eq!(gold_by_bucket, 7);
}

#[test]
fn malformed_rows_report_their_line() {
    let bad = "# sent_id = x\n# language = en\n1\tDogs\tdog\tNOUN\t_\t_\t2\tnsubj\n";
    let err = parse_conllu_plus_str(bad).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
}
