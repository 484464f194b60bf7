//! Synthetic corpora with exact ground truth: every sound unit is a pair of
//! sinusoids, so alignments and recognizability are known by construction.
//!
//! Sound unit `i` uses the carrier of grapheme `i`. How graphemes map onto
//! sound units (the "phonemes") is set by [`PronunciationMode`]; in the
//! injective mode every grapheme is rendered as its own token.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{AlignmentSet, FrameAlignment, FrameLabel};
use crate::corpus::{utterance_rng, write_wav, CorpusError};
use crate::features::FrontendConfig;
use crate::lexicon::{SymbolId, SIL, SPACE};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("graphemes {a} and {b} share carrier frequency {hz} Hz")]
    DuplicateCarrier { a: usize, b: usize, hz: f64 },
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SyntheticError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenSpec {
    pub carrier_hz: f64,
    pub duration_ms: f64,
}

/// Grapheme to sound-unit mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PronunciationMode {
    /// Grapheme `i` is always unit `i`.
    Injective,
    /// Even graphemes are regular. Each odd grapheme `i` is pronounced, per
    /// word, as unit `i - 1` (its partner's), `i` or `i + 1`, in rotation over
    /// the vocabulary, so units `i - 1` and `i + 1` are each shared by two
    /// graphemes.
    TwoToOne,
    /// Every grapheme rotates over units `i`, `i + 1`, `i + 2`.
    Randomized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// One token per grapheme; graphemes are named `a`, `b`, ...
    pub tokens: Vec<TokenSpec>,
    pub vocabulary: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub utterances: usize,
    /// Trailing utterances written to the test manifest.
    pub held_out: usize,
    /// Token durations are drawn uniformly within ± this fraction.
    pub duration_jitter: f64,
    pub space_ms: f64,
    pub sil_ms: f64,
    pub amplitude: f64,
    /// Standard deviation of the additive white noise.
    pub noise_level: f64,
    pub sample_rate: u32,
    pub mode: PronunciationMode,
}

impl SyntheticSpec {
    /// `k` graphemes with evenly spaced carriers from 300 Hz.
    /// `k` tokens of 180 ms with carriers 350 Hz apart, starting at 300 Hz.
    pub fn with_graphemes(k: usize) -> Self {
        Self {
            tokens: spaced_tokens(k),
            ..Self::default()
        }
    }

    pub fn graphemes(&self) -> Vec<String> {
        (0..self.tokens.len())
            .map(|i| char::from(b'a' + i as u8).to_string())
            .collect()
    }

    pub fn phonemes(&self) -> Vec<String> {
        (0..self.tokens.len()).map(|i| format!("p{i}")).collect()
    }

    pub fn validate(&self, framing: &FrontendConfig) -> Result<()> {
        let bad = |m: String| Err(SyntheticError::Invalid(m));
        let k = self.tokens.len();
        if k == 0 || k > 26 {
            return bad(format!("grapheme count {k} outside 1..=26"));
        }
        for a in 0..k {
            for b in a + 1..k {
                if self.tokens[a].carrier_hz == self.tokens[b].carrier_hz {
                    return Err(SyntheticError::DuplicateCarrier {
                        a,
                        b,
                        hz: self.tokens[a].carrier_hz,
                    });
                }
            }
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if let Some(t) = self
            .tokens
            .iter()
            .find(|t| !(t.carrier_hz > 0.0 && 2.0 * t.carrier_hz < nyquist))
        {
            return bad(format!("carrier {} Hz: harmonic above Nyquist", t.carrier_hz));
        }
        if !(0.0..1.0).contains(&self.duration_jitter) {
            return bad(format!("duration jitter {}", self.duration_jitter));
        }
        let shortest = self
            .tokens
            .iter()
            .map(|t| t.duration_ms)
            .chain([self.space_ms])
            .fold(f64::INFINITY, f64::min)
            * (1.0 - self.duration_jitter);
        if shortest < framing.window_ms {
            return bad(format!(
                "shortest token {shortest} ms is below the {} ms analysis window",
                framing.window_ms
            ));
        }
        if self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            return bad("word length range".into());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("words-per-utterance range".into());
        }
        let possible: f64 = (self.min_word_len..=self.max_word_len)
            .map(|l| (k as f64).powi(l as i32))
            .sum();
        if self.vocabulary == 0 || self.vocabulary as f64 > possible {
            return bad(format!("cannot build {} distinct words", self.vocabulary));
        }
        if self.held_out >= self.utterances {
            return bad("held-out set must leave training utterances".into());
        }
        if self.sil_ms < 0.0 || self.noise_level < 0.0 {
            return bad("negative silence or noise".into());
        }
        Ok(())
    }
}

fn spaced_tokens(k: usize) -> Vec<TokenSpec> {
    (0..k)
        .map(|i| TokenSpec {
            carrier_hz: 300.0 + 350.0 * i as f64,
            duration_ms: 180.0,
        })
        .collect()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            tokens: spaced_tokens(10),
            vocabulary: 50,
            min_word_len: 2,
            max_word_len: 5,
            min_words: 2,
            max_words: 5,
            utterances: 500,
            held_out: 100,
            duration_jitter: 0.2,
            space_ms: 80.0,
            sil_ms: 150.0,
            amplitude: 0.3,
            noise_level: 0.01,
            sample_rate: 16000,
            mode: PronunciationMode::Injective,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub id: String,
    pub transcript: String,
    pub samples: Vec<f32>,
    pub graphemic: FrameAlignment,
    pub phonemic: FrameAlignment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    /// Reserved symbols first, then graphemes.
    pub grapheme_symbols: Vec<String>,
    pub phoneme_symbols: Vec<String>,
    /// Sound-unit indices for every vocabulary word.
    pub pronunciations: BTreeMap<String, Vec<usize>>,
    pub utterances: Vec<SyntheticUtterance>,
}

impl SyntheticCorpus {
    pub fn train(&self) -> &[SyntheticUtterance] {
        &self.utterances[..self.utterances.len() - self.spec.held_out]
    }

    pub fn test(&self) -> &[SyntheticUtterance] {
        &self.utterances[self.utterances.len() - self.spec.held_out..]
    }

    pub fn graphemic_truth(&self) -> AlignmentSet {
        let mut set = AlignmentSet::new(self.grapheme_symbols.clone());
        for u in &self.utterances {
            set.utterances.insert(u.id.clone(), u.graphemic.clone());
        }
        set
    }

    pub fn phonemic_truth(&self) -> AlignmentSet {
        let mut set = AlignmentSet::new(self.phoneme_symbols.clone());
        for u in &self.utterances {
            set.utterances.insert(u.id.clone(), u.phonemic.clone());
        }
        set
    }
}

fn reserved_then(names: Vec<String>) -> Vec<String> {
    let mut v = vec![SIL.to_string(), SPACE.to_string()];
    v.extend(names);
    v
}

fn make_vocabulary(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = utterance_rng(seed, "#vocabulary");
    let k = spec.tokens.len();
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(spec.vocabulary);
    while words.len() < spec.vocabulary {
        let len = rng.random_range(spec.min_word_len..=spec.max_word_len);
        let w: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Sound units for every word. Irregular graphemes rotate through their
/// candidate units in order of occurrence across the vocabulary.
fn pronounce(words: &[Vec<usize>], k: usize, mode: PronunciationMode) -> Vec<Vec<usize>> {
    let mut turn = vec![0usize; k];
    words
        .iter()
        .map(|w| {
            w.iter()
                .map(|&g| {
                    let pool = match mode {
                        PronunciationMode::Injective => return g,
                        PronunciationMode::TwoToOne if g % 2 == 0 => return g,
                        PronunciationMode::TwoToOne => [g - 1, g, (g + 1) % k],
                        PronunciationMode::Randomized => [g, (g + 1) % k, (g + 2) % k],
                    };
                    let unit = pool[turn[g] % pool.len()];
                    turn[g] += 1;
                    unit
                })
                .collect()
        })
        .collect()
}

/// A segment of the rendered signal: grapheme symbol, sound unit symbol,
/// target position and word index.
struct Segment {
    grapheme: usize,
    unit: usize,
    position: u32,
    word: Option<u32>,
    start: usize,
    end: usize,
}

fn render_unit(out: &mut [f32], hz: f64, amplitude: f64, sample_rate: f64) {
    let ramp = (0.005 * sample_rate) as usize;
    let n = out.len();
    for (i, s) in out.iter_mut().enumerate() {
        let t = i as f64 / sample_rate;
        let edge = i.min(n - 1 - i);
        let env = if edge < ramp {
            0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
        } else {
            1.0
        };
        let v = (2.0 * PI * hz * t).sin() + 0.5 * (2.0 * PI * 2.0 * hz * t).sin();
        *s += (amplitude * env * v / 1.5) as f32;
    }
}

/// Label of each analysis frame: the segment containing the window centre.
fn frame_labels(segments: &[Segment], n_samples: usize, framing: &FrontendConfig, sr: f64, phonemic: bool) -> FrameAlignment {
    let window = (framing.window_ms * sr / 1000.0).round() as usize;
    let shift = (framing.shift_ms * sr / 1000.0).round() as usize;
    let frames = if n_samples < window {
        0
    } else {
        1 + (n_samples - window) / shift
    };
    let mut labels = Vec::with_capacity(frames);
    let mut seg = 0;
    for t in 0..frames {
        let centre = t * shift + window / 2;
        while segments[seg].end <= centre {
            seg += 1;
        }
        let s = &segments[seg];
        let symbol = if phonemic { s.unit } else { s.grapheme };
        labels.push(FrameLabel {
            symbol: SymbolId(symbol as u32),
            state: 0,
            word: s.word,
            position: s.position,
        });
    }
    FrameAlignment {
        labels,
        frame_shift_ms: framing.shift_ms,
    }
}

/// Builds the corpus in memory. Identical inputs give identical corpora.
pub fn synthesize(spec: &SyntheticSpec, framing: &FrontendConfig, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate(framing)?;
    let k = spec.tokens.len();
    let graphemes = spec.graphemes();
    let words = make_vocabulary(spec, seed);
    let units = pronounce(&words, k, spec.mode);
    let spelled: Vec<String> = words
        .iter()
        .map(|w| w.iter().map(|&g| graphemes[g].as_str()).collect())
        .collect();
    let sr = spec.sample_rate as f64;
    let ms = |x: f64| (x * sr / 1000.0).round() as usize;
    // Symbol indices: 0 = <sil>, 1 = <space>, then units/graphemes.
    let (sil, space) = (0usize, 1usize);
    let width = spec.utterances.to_string().len().max(4);

    let utterances = (0..spec.utterances)
        .map(|u| {
            let id = format!("utt{u:0width$}");
            let mut rng = utterance_rng(seed, &id);
            let n_words = rng.random_range(spec.min_words..=spec.max_words);
            let chosen: Vec<usize> = (0..n_words)
                .map(|_| rng.random_range(0..words.len()))
                .collect();
            let jitter = |rng: &mut rand_chacha::ChaCha8Rng, d: f64| {
                let f = if spec.duration_jitter > 0.0 {
                    rng.random_range(1.0 - spec.duration_jitter..=1.0 + spec.duration_jitter)
                } else {
                    1.0
                };
                ms(d * f)
            };

            let mut segments = Vec::new();
            let mut cursor = 0;
            let mut position = 0u32;
            let mut push = |grapheme: usize, unit: usize, word: Option<u32>, len: usize| {
                segments.push(Segment {
                    grapheme,
                    unit,
                    position,
                    word,
                    start: cursor,
                    end: cursor + len,
                });
                cursor += len;
                position += 1;
            };
            let sil_len = ms(spec.sil_ms);
            if sil_len > 0 {
                push(sil, sil, None, sil_len);
            }
            for (wi, &w) in chosen.iter().enumerate() {
                if wi > 0 {
                    let len = jitter(&mut rng, spec.space_ms);
                    push(space, space, None, len);
                }
                for (&g, &p) in words[w].iter().zip(&units[w]) {
                    let len = jitter(&mut rng, spec.tokens[g].duration_ms);
                    push(g + 2, p + 2, Some(wi as u32), len);
                }
            }
            if sil_len > 0 {
                push(sil, sil, None, sil_len);
            }

            let normal = Normal::new(0.0, spec.noise_level.max(f64::MIN_POSITIVE)).expect("finite noise level");
            let mut samples: Vec<f32> = (0..cursor)
                .map(|_| if spec.noise_level > 0.0 { normal.sample(&mut rng) as f32 } else { 0.0 })
                .collect();
            for s in &segments {
                if s.unit >= 2 {
                    let hz = spec.tokens[s.unit - 2].carrier_hz;
                    render_unit(&mut samples[s.start..s.end], hz, spec.amplitude, sr);
                }
            }
            let transcript = chosen.iter().map(|&w| spelled[w].as_str()).collect::<Vec<_>>().join(" ");
            SyntheticUtterance {
                graphemic: frame_labels(&segments, samples.len(), framing, sr, false),
                phonemic: frame_labels(&segments, samples.len(), framing, sr, true),
                id,
                transcript,
                samples,
            }
        })
        .collect();

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        grapheme_symbols: reserved_then(graphemes),
        phoneme_symbols: reserved_then(spec.phonemes()),
        pronunciations: spelled.into_iter().zip(units).collect(),
        utterances,
    })
}

/// Paths written by [`write_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFiles {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub graphemic_truth: PathBuf,
    pub phonemic_truth: PathBuf,
    pub pronunciations: PathBuf,
}

/// Writes WAVs, train/test manifests, both ground-truth alignment sets and
/// the word pronunciations under `dir`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<CorpusFiles> {
    fs::create_dir_all(dir.join("wav"))?;
    let files = CorpusFiles {
        train_manifest: dir.join("train.tsv"),
        test_manifest: dir.join("test.tsv"),
        graphemic_truth: dir.join("truth_graphemic.ali"),
        phonemic_truth: dir.join("truth_phonemic.ali"),
        pronunciations: dir.join("pronunciations.tsv"),
    };
    for (part, path) in [(corpus.train(), &files.train_manifest), (corpus.test(), &files.test_manifest)] {
        let mut manifest = String::new();
        for u in part {
            let rel = format!("wav/{}.wav", u.id);
            write_wav(&dir.join(&rel), &u.samples, corpus.spec.sample_rate)?;
            manifest.push_str(&format!("{rel}\t{}\n", u.transcript));
        }
        fs::write(path, manifest)?;
    }
    let mut w = fs::File::create(&files.graphemic_truth)?;
    corpus.graphemic_truth().write_text(&mut w)?;
    let mut w = fs::File::create(&files.phonemic_truth)?;
    corpus.phonemic_truth().write_text(&mut w)?;
    let mut w = fs::File::create(&files.pronunciations)?;
    for (word, units) in &corpus.pronunciations {
        let p: Vec<&str> = units.iter().map(|&u| corpus.phoneme_symbols[u + 2].as_str()).collect();
        writeln!(w, "{word}\t{}", p.join(" "))?;
    }
    Ok(files)
}

/// [`synthesize`] followed by [`write_corpus`].
pub fn generate_synthetic(spec: &SyntheticSpec, framing: &FrontendConfig, seed: u64, dir: &Path) -> Result<CorpusFiles> {
    let corpus = synthesize(spec, framing, seed)?;
    write_corpus(&corpus, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{agreement_score, confusion_matrix, AgreementConfig};

    fn small(k: usize, mode: PronunciationMode) -> SyntheticSpec {
        SyntheticSpec {
            vocabulary: 30,
            utterances: 40,
            held_out: 5,
            mode,
            ..SyntheticSpec::with_graphemes(k)
        }
    }

    #[test]
    fn duplicate_carrier_rejected() {
        let mut spec = small(3, PronunciationMode::Injective);
        spec.tokens[2].carrier_hz = spec.tokens[0].carrier_hz;
        assert!(matches!(
            synthesize(&spec, &FrontendConfig::default(), 0),
            Err(SyntheticError::DuplicateCarrier { a: 0, b: 2, .. })
        ));
    }

    #[test]
    fn token_shorter_than_window_rejected() {
        let mut spec = small(3, PronunciationMode::Injective);
        spec.tokens[1].duration_ms = 20.0;
        assert!(matches!(
            synthesize(&spec, &FrontendConfig::default(), 0),
            Err(SyntheticError::Invalid(_))
        ));
    }

    #[test]
    fn three_tokens_of_300ms_split_evenly() {
        let spec = SyntheticSpec {
            tokens: (0..3)
                .map(|i| TokenSpec {
                    carrier_hz: 500.0 + 500.0 * i as f64,
                    duration_ms: 300.0,
                })
                .collect(),
            vocabulary: 1,
            min_word_len: 3,
            max_word_len: 3,
            min_words: 1,
            max_words: 1,
            utterances: 2,
            held_out: 1,
            duration_jitter: 0.0,
            sil_ms: 0.0,
            ..SyntheticSpec::default()
        };
        let corpus = synthesize(&spec, &FrontendConfig::default(), 1).unwrap();
        let u = &corpus.utterances[0];
        assert_eq!(u.samples.len(), 14400);
        let ali = &u.graphemic;
        assert_eq!(ali.len(), 88);
        let mut runs: Vec<usize> = Vec::new();
        let mut prev = None;
        for l in &ali.labels {
            if Some(l.position) != prev {
                runs.push(0);
                prev = Some(l.position);
            }
            *runs.last_mut().unwrap() += 1;
        }
        assert_eq!(runs, vec![29, 30, 29]);
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = small(5, PronunciationMode::Randomized);
        let a = synthesize(&spec, &FrontendConfig::default(), 7).unwrap();
        let b = synthesize(&spec, &FrontendConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = synthesize(&spec, &FrontendConfig::default(), 8).unwrap();
        assert_ne!(a.utterances[0].samples, c.utterances[0].samples);

        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let f1 = write_corpus(&a, d1.path()).unwrap();
        let f2 = write_corpus(&b, d2.path()).unwrap();
        for (x, y) in [
            (&f1.train_manifest, &f2.train_manifest),
            (&f1.graphemic_truth, &f2.graphemic_truth),
            (&f1.phonemic_truth, &f2.phonemic_truth),
        ] {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let wav = |d: &Path| fs::read(d.join("wav").join(format!("{}.wav", a.utterances[3].id))).unwrap();
        assert_eq!(wav(d1.path()), wav(d2.path()));
    }

    #[test]
    fn manifests_load_back() {
        let spec = small(4, PronunciationMode::Injective);
        let dir = tempfile::tempdir().unwrap();
        let files = generate_synthetic(&spec, &FrontendConfig::default(), 3, dir.path()).unwrap();
        let train = crate::corpus::load_dataset(&files.train_manifest).unwrap();
        let test = crate::corpus::load_dataset(&files.test_manifest).unwrap();
        assert_eq!((train.len(), test.len()), (35, 5));
        let truth = AlignmentSet::read_text(
            std::io::BufReader::new(fs::File::open(&files.graphemic_truth).unwrap()),
            None,
        )
        .unwrap();
        assert_eq!(truth.utterances.len(), 40);
    }

    #[test]
    fn injective_oracle_agreement_is_one() {
        let spec = small(5, PronunciationMode::Injective);
        let c = synthesize(&spec, &FrontendConfig::default(), 2).unwrap();
        let cm = confusion_matrix(&c.graphemic_truth(), &c.phonemic_truth()).unwrap();
        let r = agreement_score(&cm, &AgreementConfig::default()).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.populated, 5);
    }

    #[test]
    fn oracle_agreement_orders_the_modes() {
        let scores: Vec<f64> = [
            PronunciationMode::Injective,
            PronunciationMode::TwoToOne,
            PronunciationMode::Randomized,
        ]
        .into_iter()
        .map(|mode| {
            let spec = SyntheticSpec {
                utterances: 200,
                held_out: 10,
                mode,
                ..SyntheticSpec::with_graphemes(10)
            };
            let c = synthesize(&spec, &FrontendConfig::default(), 5).unwrap();
            let cm = confusion_matrix(&c.graphemic_truth(), &c.phonemic_truth()).unwrap();
            agreement_score(&cm, &AgreementConfig::default()).unwrap().score
        })
        .collect();
        assert_eq!(scores, vec![1.0, 0.5, 0.0]);
    }

    #[test]
    fn labels_follow_the_transcript() {
        let spec = small(6, PronunciationMode::TwoToOne);
        let c = synthesize(&spec, &FrontendConfig::default(), 4).unwrap();
        for u in &c.utterances {
            let mut seq: Vec<u32> = Vec::new();
            let mut last = None;
            for l in &u.graphemic.labels {
                if Some(l.position) != last {
                    seq.push(l.symbol.0);
                    last = Some(l.position);
                }
            }
            let mut want = vec![0u32];
            for (i, w) in u.transcript.split(' ').enumerate() {
                if i > 0 {
                    want.push(1);
                }
                want.extend(w.bytes().map(|b| (b - b'a') as u32 + 2));
            }
            want.push(0);
            assert_eq!(seq, want, "{}", u.id);
        }
    }
}
