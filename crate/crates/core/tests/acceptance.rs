//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line before
//! asserting; run with `--nocapture` to see them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use graphalign_core::alignment::{AlignmentSet, FrameAlignment, FrameLabel, Target};
use graphalign_core::analysis::{agreement_score, confusion_matrix, AgreementConfig, ConfusionMatrix};
use graphalign_core::corpus::{augment_noise, AudioSegment, NoiseProfile};
use graphalign_core::decoder::{transliterated_wer_counts, wer_counts, TransliterationMap};
use graphalign_core::features::{FeatureKind, FeatureMatrix};
use graphalign_core::hmm_gmm::{train_em, viterbi_align, DiagGmm, HmmGmmConfig, HmmGmmModel};
use graphalign_core::lexicon::SymbolId;
use graphalign_core::neural_am::{
    ce_loss, grad_check, AmConfig, Gate, GradCheckOptions, PosteriorMatrix, RecurrentAm,
};
use graphalign_core::pipeline::{run_stages, LoadedConfig, PipelineConfig, Stage};
use graphalign_core::synthetic::{PronunciationMode, SyntheticSpec};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, title: &str, ok: bool, detail: &str) {
    println!("{} [{id:>2}] {title}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} ({title}) failed: {detail}");
}

fn features(values: Array2<f64>, kind: FeatureKind) -> FeatureMatrix {
    FeatureMatrix {
        values,
        frame_shift_ms: if kind == FeatureKind::Stacked { 30.0 } else { 10.0 },
        window_ms: 25.0,
        kind,
    }
}

fn random_model(rng: &mut ChaCha8Rng, n_symbols: usize, dims: usize) -> HmmGmmModel {
    let n = n_symbols * 3;
    let gmms = (0..n)
        .map(|_| {
            let mix = rng.random_range(1..=3);
            let mut w: Vec<f64> = (0..mix).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            DiagGmm::new(
                w,
                Array2::from_shape_fn((mix, dims), |_| rng.random_range(-2.0..2.0)),
                Array2::from_shape_fn((mix, dims), |_| rng.random_range(0.2..2.0)),
            )
        })
        .collect();
    let transitions = (0..n)
        .map(|_| {
            let p = rng.random_range(0.05..0.95);
            (p, 1.0 - p)
        })
        .collect();
    HmmGmmModel::new(
        (0..n_symbols).map(|i| format!("s{i}")).collect(),
        3,
        gmms,
        transitions,
        Array1::from_elem(dims, 1e-3),
    )
    .unwrap()
}

/// Best monotone path by enumerating every stay/advance pattern.
fn exhaustive_best(model: &HmmGmmModel, fm: &FeatureMatrix, targets: &[Target]) -> (Vec<usize>, f64) {
    let states: Vec<usize> = targets
        .iter()
        .flat_map(|t| (0..3).map(move |s| t.symbol.index() * 3 + s))
        .collect();
    let n = states.len();
    let frames = fm.frames();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for mask in 0u32..(1 << (frames - 1)) {
        let mut path = vec![0usize];
        for t in 1..frames {
            path.push(path[t - 1] + ((mask >> (t - 1)) & 1) as usize);
        }
        if path[frames - 1] != n - 1 {
            continue;
        }
        let mut score = 0.0;
        for t in 0..frames {
            score += model.gmms[states[path[t]]].log_likelihood(&fm.values.row(t).to_vec());
            if t > 0 {
                let (stay, adv) = model.transitions[states[path[t - 1]]];
                score += if path[t] == path[t - 1] { stay.ln() } else { adv.ln() };
            }
        }
        if best.as_ref().is_none_or(|b| score > b.1) {
            best = Some((path, score));
        }
    }
    best.expect("instance is feasible")
}

#[test]
fn c01_viterbi_matches_exhaustive_search() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut path_mismatches = 0;
    for _ in 0..200 {
        let model = random_model(&mut rng, 3, 2);
        let k = rng.random_range(1..=3);
        let targets: Vec<Target> = (0..k)
            .map(|_| Target {
                symbol: SymbolId(rng.random_range(0..3)),
                word: Some(0),
            })
            .collect();
        let frames = rng.random_range(3 * k..=10);
        let fm = features(
            Array2::from_shape_fn((frames, 2), |_| rng.random_range(-3.0..3.0)),
            FeatureKind::Plp,
        );
        let (ali, score) = viterbi_align(&model, &fm, &targets, None).unwrap();
        let (path, best) = exhaustive_best(&model, &fm, &targets);
        let got: Vec<usize> = ali
            .labels
            .iter()
            .map(|l| l.position as usize * 3 + l.state as usize)
            .collect();
        if got != path {
            path_mismatches += 1;
        }
        worst = worst.max((score - best).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "Viterbi oracle",
        path_mismatches == 0 && worst <= 1e-9 && elapsed < Duration::from_secs(10),
        &format!(
            "200 instances, {path_mismatches} path mismatches, max score gap {worst:.2e} (<= 1e-9), {:.2}s (< 10 s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c02_em_log_likelihood_is_monotone() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = 3;
    let targets = [
        Target {
            symbol: SymbolId(0),
            word: Some(0),
        },
        Target {
            symbol: SymbolId(1),
            word: Some(0),
        },
    ];
    let n = 500;
    let path: Vec<usize> = (0..n).map(|t| t * 6 / n).collect();
    // Each state draws from its own three-cluster mixture.
    let centres: Vec<Array2<f64>> = (0..6)
        .map(|_| Array2::from_shape_fn((3, dims), |_| rng.random_range(-6.0..6.0)))
        .collect();
    let values = Array2::from_shape_fn((n, dims), |(t, d)| {
        let c = (t * 7919) % 3;
        centres[path[t]][[c, d]] + rng.random_range(-1.0..1.0)
    });
    let fm = features(values, FeatureKind::Plp);
    let ali = FrameAlignment::from_state_path(&path, &targets, 3, 10.0);
    let cfg = HmmGmmConfig {
        target_mixtures: 14,
        em_iters_per_split: 20,
        ..Default::default()
    };
    let (_, trace) = train_em(&["x".into(), "y".into()], &[fm], &[ali], &cfg).unwrap();
    let mixtures: Vec<usize> = trace.stages.iter().map(|s| s.0).collect();
    let mut worst = 0.0f64;
    let mut iterations = usize::MAX;
    for (_, lls) in &trace.stages {
        iterations = iterations.min(lls.len().saturating_sub(1));
        for w in lls.windows(2) {
            worst = worst.max((w[0] - w[1]) / w[0].abs());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "EM monotonicity",
        mixtures == [1, 2, 4, 8, 14] && iterations >= 20 && worst <= 1e-6 && elapsed < Duration::from_secs(30),
        &format!(
            "mixtures {mixtures:?}, {iterations} iterations each, worst relative decrease {worst:.2e} (<= 1e-6), {:.2}s (< 30 s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c03_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = AmConfig {
        layers: 2,
        hidden: 16,
        label_states: 1,
        seed: 5,
    };
    let am = RecurrentAm::new(&cfg, 6, (0..5).map(|i| format!("g{i}")).collect());
    let fm = features(
        Array2::from_shape_fn((10, 6), |_| rng.random_range(-1.5..1.5)),
        FeatureKind::Stacked,
    );
    let labels: Vec<usize> = (0..10).map(|_| rng.random_range(0..5)).collect();
    let err = grad_check(&am, &fm, &labels, &GradCheckOptions::default()).unwrap();
    let control = [Gate::Input, Gate::Forget, Gate::Cell, Gate::Output]
        .into_iter()
        .map(|g| {
            grad_check(
                &am,
                &fm,
                &labels,
                &GradCheckOptions {
                    corrupt_gate: Some(g),
                    ..Default::default()
                },
            )
            .unwrap()
        })
        .fold(f64::INFINITY, f64::min);
    let elapsed = start.elapsed();
    verdict(
        3,
        "gradient oracle",
        err < 1e-4 && control > 1e-2 && elapsed < Duration::from_secs(30),
        &format!(
            "2x16 LSTM, 10 frames: max relative error {err:.2e} (< 1e-4), mutated-gradient control {control:.2e} (> 1e-2), {:.2}s (< 30 s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c04_uniform_posteriors_give_t_log_k() {
    let mut worst = 0.0f64;
    for k in [2usize, 26, 96] {
        for t in [1usize, 50] {
            let p = PosteriorMatrix {
                values: Array2::from_elem((t, k), 1.0 / k as f64),
            };
            let labels: Vec<usize> = (0..t).map(|i| i % k).collect();
            let loss = ce_loss(&p, &labels).unwrap();
            let expected = t as f64 * (k as f64).ln();
            worst = worst.max((loss - expected).abs() / expected);
        }
    }
    verdict(
        4,
        "CE arithmetic",
        worst < 1e-12,
        &format!("K in {{2, 26, 96}}, T in {{1, 50}}: max relative deviation from T*ln K {worst:.2e}"),
    );
}

/// Outcome of one synthetic end-to-end run.
struct EndToEnd {
    _dir: tempfile::TempDir,
    initial_wer: f64,
    realigned_wer: f64,
    initial_translit_wer: f64,
    realigned_translit_wer: f64,
    gmm_accuracy: f64,
    ce_accuracy: f64,
    agreement: f64,
    elapsed: Duration,
}

fn synthetic_config(mode: PronunciationMode) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.synthetic = SyntheticSpec {
        mode,
        ..SyntheticSpec::with_graphemes(10)
    };
    cfg.paths.truth_alignments = Some("data/truth_graphemic.ali".into());
    cfg.paths.phonemic_alignments = Some("data/truth_phonemic.ali".into());
    cfg
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn run_end_to_end(mode: PronunciationMode) -> EndToEnd {
    let dir = tempfile::tempdir().unwrap();
    let loaded = LoadedConfig::new(synthetic_config(mode), dir.path()).unwrap();
    let start = Instant::now();
    run_stages(&loaded, &Stage::ALL).unwrap();
    let elapsed = start.elapsed();
    let work = loaded.work_dir();
    let report = json(&work.join("score/report.json"));
    let agreement = json(&work.join("analyze/agreement.json"));
    let f = |v: &serde_json::Value| v.as_f64().unwrap();
    EndToEnd {
        initial_wer: f(&report["models"]["initial"]["wer"]),
        realigned_wer: f(&report["models"]["realigned"]["wer"]),
        initial_translit_wer: f(&report["models"]["initial"]["transliterated_wer"]),
        realigned_translit_wer: f(&report["models"]["realigned"]["transliterated_wer"]),
        gmm_accuracy: f(&report["alignment_accuracy"]["gmm"]),
        ce_accuracy: f(&report["alignment_accuracy"]["ce"]),
        agreement: f(&agreement["score"]),
        elapsed,
        _dir: dir,
    }
}

fn end_to_end(mode: PronunciationMode) -> &'static EndToEnd {
    static RUNS: [OnceLock<EndToEnd>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let slot = match mode {
        PronunciationMode::Injective => 0,
        PronunciationMode::TwoToOne => 1,
        PronunciationMode::Randomized => 2,
    };
    RUNS[slot].get_or_init(|| run_end_to_end(mode))
}

#[test]
fn c05_end_to_end_synthetic_asr() {
    let r = end_to_end(PronunciationMode::Injective);
    verdict(
        5,
        "end-to-end synthetic ASR",
        r.realigned_translit_wer < 0.05 && r.ce_accuracy > 0.90 && r.elapsed < Duration::from_secs(15 * 60),
        &format!(
            "transliterated WER {:.2}% (< 5%), final neural alignment accuracy {:.2}% (> 90%; GMM {:.2}%), {:.0}s (< 900 s)",
            100.0 * r.realigned_translit_wer,
            100.0 * r.ce_accuracy,
            100.0 * r.gmm_accuracy,
            r.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c06_realignment_does_not_hurt() {
    let r = end_to_end(PronunciationMode::Injective);
    verdict(
        6,
        "realignment direction",
        r.realigned_wer <= r.initial_wer + 0.005,
        &format!(
            "WER with CE-alignment training {:.2}% vs GMM-alignment training {:.2}% (+0.5 allowed); transliterated {:.2}% vs {:.2}%",
            100.0 * r.realigned_wer,
            100.0 * r.initial_wer,
            100.0 * r.realigned_translit_wer,
            100.0 * r.initial_translit_wer
        ),
    );
}

fn named(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn score_of(columns: &[&[u64]], threshold: f64) -> f64 {
    let g = columns.len();
    let p = columns[0].len();
    let counts = Array2::from_shape_fn((p, g), |(r, c)| columns[c][r]);
    let cm = ConfusionMatrix::from_counts(named("g", g), named("p", p), counts);
    agreement_score(
        &cm,
        &AgreementConfig {
            threshold,
            exclude_reserved: true,
        },
    )
    .unwrap()
    .score
}

#[test]
fn c07_agreement_score_by_hand() {
    let mut checks = Vec::new();
    // Column fractions of the best phoneme: 0.9, 0.5 (boundary), 0.49, 0.7.
    let cols: [&[u64]; 4] = [&[9, 1, 0], &[5, 3, 2], &[49, 26, 25], &[0, 7, 3]];
    checks.push(("mixed columns", score_of(&cols, 0.5), 0.75));
    checks.push(("f = 0.5 exactly", score_of(&[&[1, 1]], 0.5), 1.0));
    checks.push(("just below half", score_of(&[&[49, 51, 0], &[0, 0, 0]], 0.52), 0.0));
    checks.push(("empty column ignored", score_of(&[&[4, 0], &[0, 0]], 0.5), 1.0));
    checks.push(("identity", score_of(&[&[3, 0, 0], &[0, 2, 0], &[0, 0, 7]], 0.5), 1.0));
    checks.push(("uniform over four", score_of(&[&[1, 1, 1, 1], &[2, 2, 2, 2]], 0.5), 0.0));
    let exact = checks.iter().all(|(_, got, want)| got == want);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut monotone = true;
    for _ in 0..50 {
        let g = rng.random_range(1..8);
        let p = rng.random_range(1..6);
        let counts = Array2::from_shape_fn((p, g), |_| rng.random_range(0..20u64));
        let cm = ConfusionMatrix::from_counts(named("g", g), named("p", p), counts);
        let mut last = f64::INFINITY;
        for step in 0..=100 {
            let cfg = AgreementConfig {
                threshold: step as f64 / 100.0,
                exclude_reserved: true,
            };
            let Ok(rep) = agreement_score(&cm, &cfg) else {
                break;
            };
            monotone &= rep.score <= last;
            last = rep.score;
        }
    }
    let detail: Vec<String> = checks
        .iter()
        .map(|(name, got, want)| format!("{name} {got} (want {want})"))
        .collect();
    verdict(
        7,
        "agreement-score correctness",
        exact && monotone,
        &format!(
            "{}; non-increasing over a 101-point threshold sweep on 50 random matrices: {monotone}",
            detail.join(", ")
        ),
    );
}

#[test]
fn c08_agreement_and_wer_rank_together() {
    let modes = [
        PronunciationMode::Injective,
        PronunciationMode::TwoToOne,
        PronunciationMode::Randomized,
    ];
    let runs: Vec<&EndToEnd> = modes.iter().map(|&m| end_to_end(m)).collect();
    let scores: Vec<f64> = runs.iter().map(|r| r.agreement).collect();
    let wers: Vec<f64> = runs.iter().map(|r| r.realigned_wer).collect();
    let strictly_down = scores.windows(2).all(|w| w[0] > w[1]);
    let weakly_up = wers.windows(2).all(|w| w[0] <= w[1]);
    verdict(
        8,
        "agreement/WER rank correlation",
        strictly_down && weakly_up,
        &format!(
            "injective / 2-to-1 / randomized: agreement {:.3} / {:.3} / {:.3}, WER {:.2}% / {:.2}% / {:.2}%",
            scores[0],
            scores[1],
            scores[2],
            100.0 * wers[0],
            100.0 * wers[1],
            100.0 * wers[2]
        ),
    );
}

fn random_alignment(rng: &mut ChaCha8Rng, frames: usize, symbols: usize) -> FrameAlignment {
    let labels = (0..frames)
        .map(|t| FrameLabel {
            symbol: SymbolId(rng.random_range(0..symbols as u32)),
            state: 0,
            word: None,
            position: t as u32,
        })
        .collect();
    FrameAlignment {
        labels,
        frame_shift_ms: 10.0,
    }
}

#[test]
fn c09_confusion_columns_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut populated = 0usize;
    for _ in 0..1000 {
        let g = rng.random_range(1..8);
        let p = rng.random_range(1..8);
        let mut gs = AlignmentSet::new(named("g", g));
        let mut ps = AlignmentSet::new(named("p", p));
        for u in 0..rng.random_range(1..4) {
            let frames = rng.random_range(1..40);
            gs.utterances.insert(format!("u{u}"), random_alignment(&mut rng, frames, g));
            ps.utterances.insert(format!("u{u}"), random_alignment(&mut rng, frames, p));
        }
        let cm = confusion_matrix(&gs, &ps).unwrap();
        let norm = cm.normalized();
        for c in 0..g {
            if cm.column_total(c) > 0 {
                populated += 1;
                worst = worst.max((norm.column(c).sum() - 1.0).abs());
            } else {
                worst = worst.max(norm.column(c).sum().abs());
            }
        }
    }
    verdict(
        9,
        "confusion-matrix normalization",
        worst <= 1e-9,
        &format!("1000 fuzzed alignment pairs, {populated} populated columns, max |sum - 1| {worst:.2e} (<= 1e-9)"),
    );
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[test]
fn c10_snr_fidelity() {
    let profile = NoiseProfile::new(Vec::new(), 0.0, 30.0, 12.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let draws: Vec<f64> = (0..10_000).map(|_| profile.sample_snr(&mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let in_range = draws.iter().all(|s| (0.0..=30.0).contains(s));

    let sr = 16000;
    let signal = AudioSegment {
        id: "s".into(),
        samples: (0..sr)
            .map(|i| (0.2 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin()) as f32)
            .collect(),
        sample_rate: sr,
        transcript: String::new(),
    };
    let noise = AudioSegment {
        id: "n".into(),
        samples: (0..7001).map(|_| rng.random_range(-0.1f32..0.1)).collect(),
        sample_rate: sr,
        transcript: String::new(),
    };
    let mut worst = 0.0f64;
    for target in [0.0, 6.0, 12.0, 24.0, 30.0] {
        let mixed = augment_noise(&signal, &noise, target).unwrap();
        let s: Vec<f64> = signal.samples.iter().map(|&v| v as f64).collect();
        let n: Vec<f64> = mixed
            .samples
            .iter()
            .zip(&signal.samples)
            .map(|(&m, &v)| m as f64 - v as f64)
            .collect();
        let achieved = 10.0 * (power(&s) / power(&n)).log10();
        worst = worst.max((achieved - target).abs());
    }
    verdict(
        10,
        "SNR fidelity",
        (mean - 12.0).abs() <= 0.2 && in_range && worst <= 0.01,
        &format!(
            "10000 draws: mean {mean:.3} dB (12 +/- 0.2), all in [0, 30]: {in_range}; max achieved-SNR error {worst:.2e} dB (<= 0.01) over {{0, 6, 12, 24, 30}}"
        ),
    );
}

/// Edit distance by trying every operation at every step.
fn brute_distance(h: &[&str], r: &[&str]) -> usize {
    match (h.split_first(), r.split_first()) {
        (None, None) => 0,
        (Some(_), None) => h.len(),
        (None, Some(_)) => r.len(),
        (Some((hf, hrest)), Some((rf, rrest))) => {
            let sub = brute_distance(hrest, rrest) + usize::from(hf != rf);
            let ins = brute_distance(hrest, r) + 1;
            let del = brute_distance(h, rrest) + 1;
            sub.min(ins).min(del)
        }
    }
}

fn all_sequences<'a>(vocab: &[&'a str], max_len: usize) -> Vec<Vec<&'a str>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for w in vocab {
                let mut t = s.clone();
                t.push(*w);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn c11_scoring_oracles() {
    let vocab = ["a", "b", "c"];
    let seqs = all_sequences(&vocab, 4);
    let empty = TransliterationMap::new();
    let mut pairs = 0;
    let mut mismatches = 0;
    for h in &seqs {
        for r in &seqs {
            pairs += 1;
            let c = wer_counts(h, r);
            let d = brute_distance(h, r);
            let rate_ok = r.is_empty() || (c.rate() - d as f64 / r.len() as f64).abs() < 1e-12;
            let t = transliterated_wer_counts(h, r, &empty);
            if c.errors() != d || !rate_ok || t != c {
                mismatches += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let words = ["x", "y", "z", "ex", "why", "zed", "q"];
    let mut violations = 0;
    for _ in 0..1000 {
        let mut map = TransliterationMap::new();
        for _ in 0..rng.random_range(0..4) {
            let a = words[rng.random_range(0..words.len())];
            let b = words[rng.random_range(0..words.len())];
            if a != b {
                map.insert(a, b).unwrap();
            }
        }
        let h: Vec<&str> = (0..rng.random_range(0..6)).map(|_| words[rng.random_range(0..words.len())]).collect();
        let r: Vec<&str> = (1..rng.random_range(2..7)).map(|_| words[rng.random_range(0..words.len())]).collect();
        let plain = wer_counts(&h, &r);
        let tl = transliterated_wer_counts(&h, &r, &map);
        if tl.errors() > plain.errors() || tl.rate() > plain.rate() {
            violations += 1;
        }
        if transliterated_wer_counts(&h, &r, &empty) != plain {
            violations += 1;
        }
    }
    verdict(
        11,
        "scoring oracles",
        mismatches == 0 && violations == 0,
        &format!(
            "{pairs} exhaustive pairs (len <= 4, 3 words): {mismatches} mismatches vs brute-force edit distance; 1000 fuzzed pairs: {violations} transliterated > plain or empty-map differences"
        ),
    );
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn c12_full_pipeline_determinism() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = synthetic_config(PronunciationMode::Injective);
        cfg.seed = 12;
        cfg.workers = 2;
        cfg.synthetic.utterances = 120;
        cfg.synthetic.held_out = 20;
        cfg.train.epochs = 3;
        let loaded = LoadedConfig::new(cfg, dir.path()).unwrap();
        run_stages(&loaded, &Stage::ALL).unwrap();
        let files = tree_bytes(dir.path());
        (dir, files)
    };
    let (_a, first) = run();
    let (_b, second) = run();
    let differing: Vec<String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let key_files = [
        "work/score/report.json",
        "work/analyze/agreement.json",
        "work/gmm/model.gahm",
        "work/am/model.garm",
        "work/realign/model.garm",
    ];
    let present = key_files.iter().all(|k| first.contains_key(Path::new(k)));
    verdict(
        12,
        "determinism",
        differing.is_empty() && present,
        &format!(
            "two full runs (seed 12, 2 workers): {} files compared, reports and checkpoints present: {present}, differing: {differing:?}",
            first.len()
        ),
    );
}
