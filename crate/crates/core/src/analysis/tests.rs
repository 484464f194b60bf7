use super::*;
use crate::alignment::{FrameAlignment, FrameLabel};
use crate::lexicon::{SymbolId, SIL, SPACE};
use ndarray::array;
use proptest::prelude::*;

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn ali(symbols: &[u32]) -> FrameAlignment {
    FrameAlignment {
        labels: symbols
            .iter()
            .map(|&s| FrameLabel {
                symbol: SymbolId(s),
                state: 0,
                word: Some(0),
                position: 0,
            })
            .collect(),
        frame_shift_ms: 10.0,
    }
}

fn set(symbols: &[&str], utts: &[(&str, &[u32])]) -> AlignmentSet {
    let mut s = AlignmentSet::new(names(symbols));
    for (id, labels) in utts {
        s.utterances.insert(id.to_string(), ali(labels));
    }
    s
}

/// One column per entry of `cols`, each given as phoneme counts.
fn matrix(cols: &[&[u64]]) -> ConfusionMatrix {
    let p = cols[0].len();
    let counts = Array2::from_shape_fn((p, cols.len()), |(i, j)| cols[j][i]);
    ConfusionMatrix::from_counts(
        (0..cols.len()).map(|j| format!("g{j}")).collect(),
        (0..p).map(|i| format!("p{i}")).collect(),
        counts,
    )
}

fn score(cm: &ConfusionMatrix, threshold: f64) -> f64 {
    agreement_score(
        cm,
        &AgreementConfig {
            threshold,
            exclude_reserved: true,
        },
    )
    .unwrap()
    .score
}

#[test]
fn self_comparison_is_identity() {
    let s = set(&["a", "b", "c"], &[("u1", &[0, 0, 1, 2, 2]), ("u2", &[1, 2])]);
    let cm = confusion_matrix(&s, &s).unwrap();
    assert_eq!(cm.normalized(), Array2::<f64>::eye(3));
    assert_eq!(cm.total(), 7);
    assert_eq!(score(&cm, 0.5), 1.0);
}

#[test]
fn hand_counted_column() {
    let g = set(&["a"], &[("u", &[0; 10])]);
    let p = set(&["p1", "p2"], &[("u", &[0, 0, 0, 0, 0, 0, 1, 1, 1, 1])]);
    let cm = confusion_matrix(&g, &p).unwrap();
    assert_eq!(cm.counts, array![[6u64], [4]]);
    let n = cm.normalized();
    assert_eq!((n[[0, 0]], n[[1, 0]]), (0.6, 0.4));
}

#[test]
fn disjoint_sets_give_empty_matrix() {
    let g = set(&["a"], &[("u1", &[0, 0])]);
    let p = set(&["p"], &[("u2", &[0, 0])]);
    let cm = confusion_matrix(&g, &p).unwrap();
    assert_eq!(cm.total(), 0);
    assert!(matches!(
        agreement_score(&cm, &AgreementConfig::default()),
        Err(AnalysisError::Empty)
    ));
}

#[test]
fn one_sided_utterances_are_skipped() {
    let g = set(&["a"], &[("u1", &[0, 0]), ("u2", &[0])]);
    let p = set(&["p"], &[("u1", &[0, 0]), ("u3", &[0, 0, 0])]);
    assert_eq!(confusion_matrix(&g, &p).unwrap().total(), 2);
}

#[test]
fn frame_mismatch_is_an_error() {
    let g = set(&["a"], &[("u1", &[0, 0, 0])]);
    let p = set(&["p"], &[("u1", &[0, 0])]);
    assert!(matches!(
        confusion_matrix(&g, &p),
        Err(AnalysisError::FrameMismatch { .. })
    ));
    let mut p = set(&["p"], &[("u1", &[0, 0, 0])]);
    p.utterances.get_mut("u1").unwrap().frame_shift_ms = 30.0;
    assert!(matches!(confusion_matrix(&g, &p), Err(AnalysisError::RateMismatch { .. })));
}

#[test]
fn half_counts_as_agreement() {
    let cm = matrix(&[&[5, 5], &[4, 6]]);
    let r = agreement_score(&cm, &AgreementConfig::default()).unwrap();
    assert_eq!(r.score, 1.0);
    assert_eq!(r.graphemes[1].best_phoneme, "p1");
    assert_eq!(r.graphemes[1].fraction, 0.6);
}

#[test]
fn two_of_four_pass() {
    let cm = matrix(&[&[90, 10, 0], &[49, 26, 25], &[51, 49, 0], &[30, 35, 35]]);
    let r = agreement_score(&cm, &AgreementConfig::default()).unwrap();
    let best: Vec<f64> = r.graphemes.iter().map(|g| g.fraction).collect();
    assert_eq!(best, vec![0.9, 0.49, 0.51, 0.35]);
    assert_eq!(r.score, 0.5);
    assert_eq!(r.agreeing, 2);
}

#[test]
fn empty_columns_leave_the_denominator() {
    let cm = matrix(&[&[3, 0, 0], &[0, 0, 0], &[1, 1, 1]]);
    let r = agreement_score(&cm, &AgreementConfig::default()).unwrap();
    assert_eq!(r.populated, 2);
    assert_eq!(r.score, 0.5);
}

#[test]
fn reserved_symbols_are_separable() {
    let g = set(&[SIL, SPACE, "a"], &[("u", &[0, 0, 2, 2, 1, 2])]);
    let p = set(&[SIL, "p"], &[("u", &[0, 1, 1, 1, 0, 0])]);
    let cm = confusion_matrix(&g, &p).unwrap();
    assert_eq!(cm.total(), 6);
    let scored = agreement_score(&cm, &AgreementConfig::default()).unwrap();
    assert_eq!(scored.populated, 1);
    assert_eq!(scored.graphemes[0].fraction, 1.0);
    let all = agreement_score(
        &cm,
        &AgreementConfig {
            threshold: 0.5,
            exclude_reserved: false,
        },
    )
    .unwrap();
    assert_eq!(all.populated, 3);
    assert_eq!(all.graphemes[2].fraction, 2.0 / 3.0);
}

#[test]
fn threshold_outside_unit_interval_rejected() {
    let cm = matrix(&[&[1]]);
    for t in [-0.1, 1.5, f64::NAN] {
        assert!(agreement_score(
            &cm,
            &AgreementConfig {
                threshold: t,
                exclude_reserved: true
            }
        )
        .is_err());
    }
}

#[test]
fn report_serializes() {
    let cm = matrix(&[&[5, 5]]);
    let json = agreement_score(&cm, &AgreementConfig::default()).unwrap().to_json();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["score"], 1.0);
    assert_eq!(v["graphemes"][0]["grapheme"], "g0");
}

#[test]
fn csv_shape_and_round_trip() {
    let cm = matrix(&[&[1, 2], &[3, 0]]);
    let mut buf = Vec::new();
    write_csv(&cm, &mut buf, None).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l.split(',').count() == 3));
    assert!(lines[0].starts_with('"'));
    let (g, p, v) = read_csv(buf.as_slice()).unwrap();
    assert_eq!(g, cm.graphemes);
    assert_eq!(p, cm.phonemes);
    let n = cm.normalized();
    for (a, b) in v.iter().zip(n.iter()) {
        let printed: f64 = format!("{b:.11e}").parse().unwrap();
        assert_eq!(*a, printed);
    }
}

#[test]
fn csv_quotes_awkward_symbols() {
    let cm = ConfusionMatrix::from_counts(names(&["a,b", "\"q\""]), names(&["p"]), array![[1u64, 1]]);
    let mut buf = Vec::new();
    write_csv(&cm, &mut buf, None).unwrap();
    let (g, _, _) = read_csv(buf.as_slice()).unwrap();
    assert_eq!(g, cm.graphemes);
}

#[test]
fn identity_svg_has_two_max_cells() {
    let cm = matrix(&[&[4, 0], &[0, 7]]);
    let mut buf = Vec::new();
    write_svg(&cm, &mut buf, None).unwrap();
    let svg = String::from_utf8(buf).unwrap();
    assert_eq!(svg.matches(MAX_INTENSITY_FILL).count(), 2);
    assert_eq!(svg.matches("class=\"cell\"").count(), 4);
    assert!(svg.contains(">g0<") && svg.contains(">p1<"));
}

#[test]
fn subset_filter_keeps_values() {
    let cm = matrix(&[&[1, 3], &[2, 2]]);
    let filter = SymbolFilter {
        graphemes: Some(names(&["g0"])),
        phonemes: None,
    };
    let mut buf = Vec::new();
    write_csv(&cm, &mut buf, Some(&filter)).unwrap();
    let (g, _, v) = read_csv(buf.as_slice()).unwrap();
    assert_eq!(g, names(&["g0"]));
    assert_eq!(v.column(0).to_vec(), vec![0.25, 0.75]);

    let rows_only = SymbolFilter {
        graphemes: None,
        phonemes: Some(names(&["p1"])),
    };
    let mut buf = Vec::new();
    write_csv(&cm, &mut buf, Some(&rows_only)).unwrap();
    let (_, p, v) = read_csv(buf.as_slice()).unwrap();
    assert_eq!(p, names(&["p1"]));
    assert_eq!(v.row(0).to_vec(), vec![0.75, 0.5]);
}

#[test]
fn emit_writes_both_files() {
    let dir = tempfile::tempdir().unwrap();
    let cm = matrix(&[&[1, 0], &[0, 1]]);
    let (c, s) = emit_heatmap(&cm, &dir.path().join("cm"), None).unwrap();
    assert!(c.is_file() && s.is_file());
    assert!(emit_heatmap(&cm, &dir.path().join("missing/dir/cm"), None).is_err());
}

fn arb_pair() -> impl Strategy<Value = (Vec<u32>, Vec<u32>)> {
    (1usize..60).prop_flat_map(|n| {
        (
            proptest::collection::vec(0u32..6, n),
            proptest::collection::vec(0u32..5, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn populated_columns_sum_to_one((g, p) in arb_pair()) {
        let gs = set(&["a", "b", "c", "d", "e", "f"], &[("u", &g)]);
        let ps = set(&["p", "q", "r", "s", "t"], &[("u", &p)]);
        let cm = confusion_matrix(&gs, &ps).unwrap();
        prop_assert_eq!(cm.total(), g.len() as u64);
        let n = cm.normalized();
        for j in 0..6 {
            let s: f64 = n.column(j).sum();
            if cm.column_total(j) > 0 {
                prop_assert!((s - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn raising_threshold_never_raises_score(
        cols in proptest::collection::vec(proptest::collection::vec(0u64..20, 3), 1..6),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let refs: Vec<&[u64]> = cols.iter().map(|c| c.as_slice()).collect();
        let cm = matrix(&refs);
        prop_assume!(cm.total() > 0);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(score(&cm, hi) <= score(&cm, lo));
    }
}
