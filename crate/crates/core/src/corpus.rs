//! Dataset ingestion, transcript normalization and noise augmentation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest line {line}: audio file {path:?} not found")]
    MissingAudio { line: usize, path: PathBuf },
    #[error("manifest line {line}: expected `<audio-path>\\t<transcript>`")]
    MalformedLine { line: usize },
    #[error("manifest line {line}: duplicate utterance id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("{path:?}: unsupported audio encoding ({detail})")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("{path:?}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{0:?}: audio contains no samples")]
    EmptyAudio(PathBuf),
    #[error("SNR undefined: {0} has zero power")]
    ZeroPower(&'static str),
    #[error("sample rate mismatch: signal {signal} Hz, noise {noise} Hz")]
    SampleRateMismatch { signal: u32, noise: u32 },
    #[error("invalid noise profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// PCM waveform plus transcript: the ingestion unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    pub id: String,
    /// Mono samples in [-1, 1].
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub transcript: String,
}

impl AudioSegment {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// NFC-normalizes, replaces control characters with spaces and collapses runs
/// of whitespace.
pub fn normalize_transcript(raw: &str) -> String {
    let nfc: String = raw
        .nfc()
        .map(|c| if c.is_control() { ' ' } else { c })
        .collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reads an integer linear-PCM WAV file and mixes it down to mono by
/// averaging channels.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let wav_err = |source| CorpusError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample > 32 {
        return Err(CorpusError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        });
    }
    let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i32> = reader
        .into_samples::<i32>()
        .collect::<std::result::Result<_, _>>()
        .map_err(wav_err)?;
    if raw.is_empty() {
        return Err(CorpusError::EmptyAudio(path.to_path_buf()));
    }
    let samples = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f32 / scale).sum::<f32>() / frame.len() as f32)
        .collect();
    Ok((samples, spec.sample_rate))
}

/// Writes mono 16-bit PCM. Samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| CorpusError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// One parsed manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub line: usize,
    pub id: String,
    pub audio: PathBuf,
    pub transcript: String,
}

/// Parses a `<audio-path>\t<transcript>` manifest. Relative audio paths are
/// resolved against the manifest's directory; the utterance id is the audio
/// file stem. Entries with an empty transcript are skipped with a warning.
pub fn read_manifest(manifest_path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (audio, transcript) = raw
            .split_once('\t')
            .ok_or(CorpusError::MalformedLine { line })?;
        let audio = base.join(audio.trim());
        if !audio.is_file() {
            return Err(CorpusError::MissingAudio { line, path: audio });
        }
        let transcript = normalize_transcript(transcript);
        if transcript.is_empty() {
            warn!("manifest line {line}: empty transcript, skipping {}", audio.display());
            continue;
        }
        let id = audio
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { line, id });
        }
        out.push(ManifestEntry {
            line,
            id,
            audio,
            transcript,
        });
    }
    Ok(out)
}

/// Loads every manifest entry in manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<AudioSegment>> {
    read_manifest(manifest_path)?
        .into_iter()
        .map(|e| {
            let (samples, sample_rate) = read_wav(&e.audio)?;
            Ok(AudioSegment {
                id: e.id,
                samples,
                sample_rate,
                transcript: e.transcript,
            })
        })
        .collect()
}

/// RNG for one utterance, derived from the global seed and the utterance id
/// so that parallel and serial runs draw identical streams.
pub fn utterance_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Noise bank plus the SNR range augmentation draws from.
#[derive(Debug, Clone)]
pub struct NoiseProfile {
    pub noise_bank: Vec<AudioSegment>,
    pub snr_low: f64,
    pub snr_high: f64,
    pub snr_mean: f64,
}

/// Concentration a+b of the Beta distribution behind [`NoiseProfile::sample_snr`].
const SNR_BETA_CONCENTRATION: f64 = 5.0;

impl NoiseProfile {
    pub fn new(noise_bank: Vec<AudioSegment>, snr_low: f64, snr_high: f64, snr_mean: f64) -> Result<Self> {
        if !(snr_low <= snr_mean && snr_mean <= snr_high) {
            return Err(CorpusError::InvalidProfile(format!(
                "need snr_low <= snr_mean <= snr_high, got {snr_low} / {snr_mean} / {snr_high}"
            )));
        }
        Ok(Self {
            noise_bank,
            snr_low,
            snr_high,
            snr_mean,
        })
    }

    /// Draws a target SNR in dB from a Beta distribution scaled onto
    /// `[snr_low, snr_high]` whose mean is `snr_mean`. With 0/30/12 dB this is
    /// Beta(2, 3).
    pub fn sample_snr<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let span = self.snr_high - self.snr_low;
        if span <= 0.0 {
            return self.snr_low;
        }
        let a = SNR_BETA_CONCENTRATION * (self.snr_mean - self.snr_low) / span;
        let b = SNR_BETA_CONCENTRATION - a;
        if a <= 0.0 {
            return self.snr_low;
        }
        if b <= 0.0 {
            return self.snr_high;
        }
        let beta = Beta::new(a, b).expect("shape parameters are positive");
        let x: f64 = beta.sample(rng);
        (self.snr_low + span * x).clamp(self.snr_low, self.snr_high)
    }
}

fn mean_power(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len().max(1) as f64
}

/// Components of a noise mixture, kept so the achieved SNR can be measured.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub mixed: Vec<f32>,
    /// Signal after any peak normalization.
    pub signal: Vec<f32>,
    /// Noise after gain and peak normalization.
    pub noise: Vec<f32>,
    pub noise_gain: f64,
    /// Applied peak-normalization factor (1 if no clipping would occur).
    pub peak_scale: f64,
}

impl Mixture {
    pub fn measured_snr_db(&self) -> f64 {
        10.0 * (mean_power(&self.signal) / mean_power(&self.noise)).log10()
    }
}

/// Mixes `noise` (tiled cyclically to the signal length) into `signal` at
/// `target_snr_db`. The mixture is peak-normalized only if it would clip.
pub fn mix_at_snr(signal: &[f32], noise: &[f32], target_snr_db: f64) -> Result<Mixture> {
    let p_signal = mean_power(signal);
    if signal.is_empty() || p_signal == 0.0 {
        return Err(CorpusError::ZeroPower("signal"));
    }
    let tiled: Vec<f32> = noise.iter().copied().cycle().take(signal.len()).collect();
    let p_noise = mean_power(&tiled);
    if noise.is_empty() || p_noise == 0.0 {
        return Err(CorpusError::ZeroPower("noise"));
    }
    let gain = (p_signal / (p_noise * 10f64.powf(target_snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = tiled.iter().map(|&n| n as f64 * gain).collect();
    let peak = signal
        .iter()
        .zip(&scaled)
        .map(|(&s, &n)| (s as f64 + n).abs())
        .fold(0.0, f64::max);
    let peak_scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    let sig: Vec<f32> = signal.iter().map(|&s| (s as f64 * peak_scale) as f32).collect();
    let noi: Vec<f32> = scaled.iter().map(|&n| (n * peak_scale) as f32).collect();
    let mixed = sig.iter().zip(&noi).map(|(&s, &n)| s + n).collect();
    Ok(Mixture {
        mixed,
        signal: sig,
        noise: noi,
        noise_gain: gain,
        peak_scale,
    })
}

/// Returns a copy of `segment` with `noise` mixed in at `target_snr_db`.
pub fn augment_noise(segment: &AudioSegment, noise: &AudioSegment, target_snr_db: f64) -> Result<AudioSegment> {
    if segment.sample_rate != noise.sample_rate {
        return Err(CorpusError::SampleRateMismatch {
            signal: segment.sample_rate,
            noise: noise.sample_rate,
        });
    }
    let mix = mix_at_snr(&segment.samples, &noise.samples, target_snr_db)?;
    Ok(AudioSegment {
        id: segment.id.clone(),
        samples: mix.mixed,
        sample_rate: segment.sample_rate,
        transcript: segment.transcript.clone(),
    })
}
