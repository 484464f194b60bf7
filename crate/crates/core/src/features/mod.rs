//! Acoustic front-ends: log-mel for the neural model, PLP + deltas for the
//! GMM flat start, and frame stacking/downsampling.

mod container;
mod plp;

use std::sync::Arc;

use ndarray::{s, Array2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AudioSegment;

pub use container::{read_features, write_features, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use plp::plp_with_deltas;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("segment has {samples} samples, shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("sample rate {0} Hz is below 8 kHz")]
    SampleRate(u32),
    #[error("expected {expected:?} features, got {got:?}")]
    WrongKind { expected: FeatureKind, got: FeatureKind },
    #[error("empty feature matrix")]
    Empty,
    #[error("bad feature container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    LogMel,
    Plp,
    Stacked,
}

impl FeatureKind {
    fn code(self) -> u8 {
        match self {
            FeatureKind::LogMel => 0,
            FeatureKind::Plp => 1,
            FeatureKind::Stacked => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FeatureKind::LogMel),
            1 => Some(FeatureKind::Plp),
            2 => Some(FeatureKind::Stacked),
            _ => None,
        }
    }
}

/// frames × dims feature values plus framing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub frame_shift_ms: f64,
    pub window_ms: f64,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }
}

/// Front-end parameters shared by the log-mel and PLP pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub window_ms: f64,
    pub shift_ms: f64,
    pub n_mels: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub preemphasis: f64,
    pub energy_floor: f64,
    /// Critical-band filters used by PLP.
    pub plp_bands: usize,
    /// LPC order for PLP; cepstra returned = order + 1.
    pub plp_order: usize,
    pub cepstral_lifter: f64,
    /// Half-width of the delta regression window.
    pub delta_window: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            shift_ms: 10.0,
            n_mels: 80,
            low_hz: 125.0,
            high_hz: 7600.0,
            preemphasis: 0.97,
            energy_floor: 1e-10,
            plp_bands: 24,
            plp_order: 12,
            cepstral_lifter: 22.0,
            delta_window: 2,
        }
    }
}

/// Framing plus power spectrum, shared by both front-ends.
pub(crate) struct Framer {
    pub window: usize,
    pub shift: usize,
    pub fft_len: usize,
    hamming: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    preemphasis: f64,
}

impl Framer {
    pub fn new(cfg: &FrontendConfig, sample_rate: u32) -> Result<Self> {
        if sample_rate < 8000 {
            return Err(FeatureError::SampleRate(sample_rate));
        }
        let window = (sample_rate as f64 * cfg.window_ms / 1000.0).round() as usize;
        let shift = (sample_rate as f64 * cfg.shift_ms / 1000.0).round() as usize;
        let fft_len = window.next_power_of_two();
        let hamming = (0..window)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (window - 1) as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(fft_len);
        Ok(Self {
            window,
            shift,
            fft_len,
            hamming,
            fft,
            preemphasis: cfg.preemphasis,
        })
    }

    pub fn n_frames(&self, n_samples: usize) -> Result<usize> {
        if n_samples < self.window {
            return Err(FeatureError::TooShort {
                samples: n_samples,
                window: self.window,
            });
        }
        Ok(1 + (n_samples - self.window) / self.shift)
    }

    /// Power spectra (`fft_len / 2 + 1` bins) for every frame. Pre-emphasis is
    /// applied within each frame so the front-end is exactly shift-covariant.
    pub fn power_spectra(&self, samples: &[f32]) -> Result<Array2<f64>> {
        let frames = self.n_frames(samples.len())?;
        let bins = self.fft_len / 2 + 1;
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        for t in 0..frames {
            let frame = &samples[t * self.shift..t * self.shift + self.window];
            for (n, slot) in buf.iter_mut().enumerate() {
                *slot = if n < self.window {
                    let x = frame[n] as f64;
                    let prev = if n == 0 { x } else { frame[n - 1] as f64 };
                    Complex::new((x - self.preemphasis * prev) * self.hamming[n], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (k, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = buf[k].norm_sqr();
            }
        }
        Ok(out)
    }
}

pub(crate) fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub(crate) fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale, as an
/// `n_filters × bins` weight matrix. Also returns each filter's centre in Hz.
pub(crate) fn mel_filterbank(
    n_filters: usize,
    fft_len: usize,
    sample_rate: u32,
    low_hz: f64,
    high_hz: f64,
) -> (Array2<f64>, Vec<f64>) {
    let nyquist = sample_rate as f64 / 2.0;
    let high = high_hz.min(nyquist);
    let low = low_hz.clamp(0.0, high);
    let (mlo, mhi) = (hz_to_mel(low), hz_to_mel(high));
    let step = (mhi - mlo) / (n_filters + 1) as f64;
    let bins = fft_len / 2 + 1;
    let mut w = Array2::zeros((n_filters, bins));
    let mut centres = Vec::with_capacity(n_filters);
    for m in 0..n_filters {
        let left = mlo + step * m as f64;
        let centre = left + step;
        let right = centre + step;
        centres.push(mel_to_hz(centre));
        for k in 0..bins {
            let mel = hz_to_mel(k as f64 * sample_rate as f64 / fft_len as f64);
            let v = if mel > left && mel <= centre {
                (mel - left) / (centre - left)
            } else if mel > centre && mel < right {
                (right - mel) / (right - centre)
            } else {
                0.0
            };
            w[[m, k]] = v;
        }
    }
    (w, centres)
}

/// Natural-log mel filterbank energies, floored at `ln(energy_floor)`.
///
/// Frame count is `1 + (n_samples - window) / shift`.
pub fn log_mel(segment: &AudioSegment, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    let framer = Framer::new(cfg, segment.sample_rate)?;
    let power = framer.power_spectra(&segment.samples)?;
    let (bank, _) = mel_filterbank(cfg.n_mels, framer.fft_len, segment.sample_rate, cfg.low_hz, cfg.high_hz);
    let mut energies = power.dot(&bank.t());
    energies.mapv_inplace(|e| e.max(cfg.energy_floor).ln());
    Ok(FeatureMatrix {
        values: energies,
        frame_shift_ms: cfg.shift_ms,
        window_ms: cfg.window_ms,
        kind: FeatureKind::LogMel,
    })
}

/// Regression deltas over a ±`window` frame span with edge replication:
/// `d_t = Σ n (c_{t+n} - c_{t-n}) / (2 Σ n²)`.
pub fn deltas(base: &Array2<f64>, window: usize) -> Array2<f64> {
    let (frames, dims) = base.dim();
    let denom: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Array2::zeros((frames, dims));
    if frames == 0 || window == 0 {
        return out;
    }
    let last = frames as isize - 1;
    for t in 0..frames as isize {
        for n in 1..=window as isize {
            let fwd = base.row((t + n).min(last) as usize);
            let bwd = base.row((t - n).max(0) as usize);
            let mut row = out.row_mut(t as usize);
            for d in 0..dims {
                row[d] += n as f64 * (fwd[d] - bwd[d]);
            }
        }
    }
    out /= denom;
    out
}

/// Concatenates each kept frame with its `left_context` predecessors
/// (replicating the first frame at the utterance start) and keeps every
/// `rate_factor`-th frame. Output frame `t` holds input frames
/// `rate_factor*t - left_context ..= rate_factor*t`.
pub fn stack_downsample(fm: &FeatureMatrix, left_context: usize, rate_factor: usize) -> Result<FeatureMatrix> {
    if fm.kind != FeatureKind::LogMel {
        return Err(FeatureError::WrongKind {
            expected: FeatureKind::LogMel,
            got: fm.kind,
        });
    }
    let (frames, dims) = fm.values.dim();
    if frames == 0 || dims == 0 {
        return Err(FeatureError::Empty);
    }
    let out_frames = frames.div_ceil(rate_factor);
    let slots = left_context + 1;
    let mut out = Array2::zeros((out_frames, slots * dims));
    for t in 0..out_frames {
        let centre = t * rate_factor;
        for j in 0..slots {
            let src = (centre + j).saturating_sub(left_context);
            out.slice_mut(s![t, j * dims..(j + 1) * dims]).assign(&fm.values.row(src));
        }
    }
    Ok(FeatureMatrix {
        values: out,
        frame_shift_ms: fm.frame_shift_ms * rate_factor as f64,
        window_ms: fm.window_ms,
        kind: FeatureKind::Stacked,
    })
}

/// Majority vote over consecutive buckets of `factor` labels. Ties go to the
/// label that appears first in the bucket.
pub fn majority_downsample<T: Copy + PartialEq>(labels: &[T], factor: usize) -> Vec<T> {
    labels
        .chunks(factor.max(1))
        .map(|bucket| {
            let mut best = bucket[0];
            let mut best_count = 0;
            for (i, cand) in bucket.iter().enumerate() {
                if bucket[..i].contains(cand) {
                    continue;
                }
                let count = bucket.iter().filter(|x| *x == cand).count();
                if count > best_count {
                    best = *cand;
                    best_count = count;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn segment(samples: Vec<f32>) -> AudioSegment {
        AudioSegment {
            id: "t".into(),
            samples,
            sample_rate: 16000,
            transcript: "x".into(),
        }
    }

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.3..0.3)).collect()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let fm = log_mel(&segment(noise(16000, 1)), &FrontendConfig::default()).unwrap();
        assert_eq!(fm.frames(), 1 + (16000 - 400) / 160);
        assert_eq!(fm.frames(), 98);
        assert_eq!(fm.dims(), 80);
    }

    #[test]
    fn silence_hits_the_floor() {
        let fm = log_mel(&segment(vec![0.0; 4000]), &FrontendConfig::default()).unwrap();
        let floor = 1e-10f64.ln();
        assert!(fm.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn doubling_amplitude_adds_log_four() {
        let x = noise(8000, 2);
        let doubled: Vec<f32> = x.iter().map(|v| v * 2.0).collect();
        let cfg = FrontendConfig::default();
        let a = log_mel(&segment(x), &cfg).unwrap();
        let b = log_mel(&segment(doubled), &cfg).unwrap();
        for (va, vb) in a.values.iter().zip(b.values.iter()) {
            if *va > cfg.energy_floor.ln() + 1.0 {
                assert!((vb - va - 4f64.ln()).abs() < 1e-9, "{va} {vb}");
            }
        }
    }

    #[test]
    fn too_short_and_low_rate_are_errors() {
        let cfg = FrontendConfig::default();
        assert!(matches!(log_mel(&segment(vec![0.1; 399]), &cfg), Err(FeatureError::TooShort { .. })));
        let mut seg = segment(vec![0.1; 4000]);
        seg.sample_rate = 4000;
        assert!(matches!(log_mel(&seg, &cfg), Err(FeatureError::SampleRate(4000))));
    }

    #[test]
    fn delaying_by_one_shift_shifts_frames() {
        let x = noise(6000, 3);
        let mut delayed = noise(160, 4);
        delayed.extend_from_slice(&x);
        let cfg = FrontendConfig::default();
        let a = log_mel(&segment(x), &cfg).unwrap();
        let b = log_mel(&segment(delayed), &cfg).unwrap();
        assert_eq!(b.frames(), a.frames() + 1);
        assert_eq!(b.values.slice(s![1.., ..]), a.values);
    }

    #[test]
    fn stacking_shapes() {
        let fm = log_mel(&segment(noise(16000, 5)), &FrontendConfig::default()).unwrap();
        let st = stack_downsample(&fm, 7, 3).unwrap();
        assert_eq!(st.frames(), 33);
        assert_eq!(st.dims(), 640);
        assert_eq!(st.frame_shift_ms, 30.0);
        assert_eq!(st.kind, FeatureKind::Stacked);
    }

    #[test]
    fn single_frame_replicates() {
        let fm = FeatureMatrix {
            values: Array2::from_shape_fn((1, 80), |(_, d)| d as f64),
            frame_shift_ms: 10.0,
            window_ms: 25.0,
            kind: FeatureKind::LogMel,
        };
        let st = stack_downsample(&fm, 7, 3).unwrap();
        assert_eq!(st.frames(), 1);
        for j in 0..8 {
            assert_eq!(st.values.slice(s![0, j * 80..(j + 1) * 80]), fm.values.row(0));
        }
    }

    #[test]
    fn stacking_requires_log_mel() {
        let fm = FeatureMatrix {
            values: Array2::zeros((3, 2)),
            frame_shift_ms: 10.0,
            window_ms: 25.0,
            kind: FeatureKind::Plp,
        };
        assert!(stack_downsample(&fm, 7, 3).is_err());
    }

    #[test]
    fn ramp_delta_is_unit_slope() {
        let base = Array2::from_shape_fn((10, 1), |(t, _)| t as f64);
        let d = deltas(&base, 2);
        for t in 2..8 {
            assert!((d[[t, 0]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn majority_ties_go_to_earliest() {
        assert_eq!(majority_downsample(&[1, 2, 2, 3, 4, 5, 6, 6], 3), vec![2, 3, 6]);
        assert_eq!(majority_downsample(&[7, 8], 3), vec![7]);
    }

    proptest! {
        #[test]
        fn stacked_last_slot_is_source_frame(frames in 1usize..40, dims in 1usize..6, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fm = FeatureMatrix {
                values: Array2::from_shape_fn((frames, dims), |_| rng.random::<f64>()),
                frame_shift_ms: 10.0,
                window_ms: 25.0,
                kind: FeatureKind::LogMel,
            };
            let st = stack_downsample(&fm, 7, 3).unwrap();
            prop_assert_eq!(st.frames(), frames.div_ceil(3));
            for t in 0..st.frames() {
                prop_assert_eq!(st.values.slice(s![t, 7 * dims..]), fm.values.row(3 * t));
            }
        }

        #[test]
        fn features_are_finite(samples in proptest::collection::vec(-1.0f32..1.0, 400..2000)) {
            let seg = segment(samples);
            let cfg = FrontendConfig::default();
            prop_assert!(log_mel(&seg, &cfg).unwrap().values.iter().all(|v| v.is_finite()));
            prop_assert!(plp_with_deltas(&seg, &cfg).unwrap().values.iter().all(|v| v.is_finite()));
        }
    }
}
