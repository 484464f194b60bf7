use ndarray::{concatenate, Array2, Axis};

use super::{deltas, mel_filterbank, FeatureKind, FeatureMatrix, Framer, FrontendConfig, Result};
use crate::corpus::AudioSegment;

/// Equal-loudness weighting for a band centred at `hz`.
fn equal_loudness(hz: f64) -> f64 {
    let w2 = (2.0 * std::f64::consts::PI * hz).powi(2);
    (w2 + 56.8e6) * w2 * w2 / ((w2 + 6.3e6).powi(2) * (w2 + 0.38e9))
}

/// Levinson-Durbin recursion. Returns predictor coefficients `a[1..=order]`
/// (with `A(z) = 1 + Σ a_k z^-k`) and the final prediction error.
fn levinson(r: &[f64], order: usize) -> (Vec<f64>, f64) {
    let mut a = vec![0.0; order + 1];
    a[0] = 1.0;
    let mut err = r[0];
    for i in 1..=order {
        if err <= 0.0 {
            break;
        }
        let acc: f64 = (1..i).map(|j| a[j] * r[i - j]).sum::<f64>() + r[i];
        let k = -acc / err;
        let prev = a.clone();
        for j in 1..i {
            a[j] = prev[j] + k * prev[i - j];
        }
        a[i] = k;
        err *= 1.0 - k * k;
    }
    (a[1..].to_vec(), err)
}

/// LPC to cepstrum, `c_0 = ln(gain)`.
fn lpc_to_cepstrum(a: &[f64], gain: f64, n_ceps: usize) -> Vec<f64> {
    let p = a.len();
    let mut c = vec![0.0; n_ceps];
    c[0] = gain.ln();
    for n in 1..n_ceps {
        let mut acc = if n <= p { -a[n - 1] } else { 0.0 };
        for k in 1..n {
            if n - k <= p {
                acc -= (k as f64 / n as f64) * c[k] * a[n - k - 1];
            }
        }
        c[n] = acc;
    }
    c
}

/// Static PLP cepstra (`plp_order + 1` coefficients per frame).
pub(crate) fn plp_cepstra(segment: &AudioSegment, cfg: &FrontendConfig) -> Result<Array2<f64>> {
    let framer = Framer::new(cfg, segment.sample_rate)?;
    let power = framer.power_spectra(&segment.samples)?;
    let (bank, centres) = mel_filterbank(cfg.plp_bands, framer.fft_len, segment.sample_rate, cfg.low_hz, cfg.high_hz);
    let loudness: Vec<f64> = centres.iter().map(|&f| equal_loudness(f)).collect();
    let bands = power.dot(&bank.t());

    let n_ceps = cfg.plp_order + 1;
    // Auditory spectrum sampled at band centres with the edge bands repeated
    // to stand in for 0 Hz and Nyquist; autocorrelation is its inverse DFT.
    let m = cfg.plp_bands + 2;
    let cos_table: Vec<Vec<f64>> = (0..=cfg.plp_order)
        .map(|k| {
            (0..m)
                .map(|j| (std::f64::consts::PI * k as f64 * j as f64 / (m - 1) as f64).cos())
                .collect()
        })
        .collect();
    let lifter: Vec<f64> = (0..n_ceps)
        .map(|n| {
            if cfg.cepstral_lifter > 0.0 {
                1.0 + cfg.cepstral_lifter / 2.0 * (std::f64::consts::PI * n as f64 / cfg.cepstral_lifter).sin()
            } else {
                1.0
            }
        })
        .collect();

    let frames = bands.nrows();
    let mut out = Array2::zeros((frames, n_ceps));
    let mut spec = vec![0.0; m];
    for t in 0..frames {
        for (b, &e) in bands.row(t).iter().enumerate() {
            spec[b + 1] = (e.max(cfg.energy_floor) * loudness[b]).cbrt();
        }
        spec[0] = spec[1];
        spec[m - 1] = spec[m - 2];
        let r: Vec<f64> = cos_table
            .iter()
            .map(|row| {
                // DCT-I weights: interior points count twice
                let inner: f64 = (1..m - 1).map(|j| 2.0 * spec[j] * row[j]).sum();
                (spec[0] * row[0] + inner + spec[m - 1] * row[m - 1]) / (2.0 * (m - 1) as f64)
            })
            .collect();
        let (a, err) = levinson(&r, cfg.plp_order);
        let c = lpc_to_cepstrum(&a, err.max(f64::MIN_POSITIVE), n_ceps);
        for (n, v) in c.into_iter().enumerate() {
            out[[t, n]] = v * lifter[n];
        }
    }
    Ok(out)
}

/// PLP cepstra with deltas and delta-deltas: `3 * (plp_order + 1)` dims,
/// 39 with the defaults. Framing matches [`super::log_mel`].
pub fn plp_with_deltas(segment: &AudioSegment, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    let base = plp_cepstra(segment, cfg)?;
    let d1 = deltas(&base, cfg.delta_window);
    let d2 = deltas(&d1, cfg.delta_window);
    let values = concatenate(Axis(1), &[base.view(), d1.view(), d2.view()]).expect("row counts match");
    Ok(FeatureMatrix {
        values,
        frame_shift_ms: cfg.shift_ms,
        window_ms: cfg.window_ms,
        kind: FeatureKind::Plp,
    })
}
