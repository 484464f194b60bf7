use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lstm::{layer_backward, layer_forward, Gate, LayerCache};
use super::{log_softmax_rows, NeuralError, Params, RecurrentAm, Result};
use crate::alignment::FrameAlignment;
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Utterances per update.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Truncated BPTT chunk length in frames.
    pub bptt_chunk: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            learning_rate: 0.5,
            lr_decay: 0.85,
            momentum: 0.9,
            clip_norm: 5.0,
            bptt_chunk: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean per-frame cross-entropy of the batch.
    pub ce_loss: f64,
}

/// Loss and gradient of one utterance (loss summed over frames).
pub(crate) fn utterance_gradient(
    am: &RecurrentAm,
    x: &Array2<f64>,
    labels: &[usize],
    chunk: usize,
    fault: Option<Gate>,
) -> (f64, Params) {
    let p = &am.params;
    let mut grad = p.zeros_like();
    let n_layers = p.layers.len();
    let hd = am.hidden();
    let mut h: Vec<Array1<f64>> = vec![Array1::zeros(hd); n_layers];
    let mut c: Vec<Array1<f64>> = vec![Array1::zeros(hd); n_layers];
    let mut loss = 0.0;
    let t_len = x.nrows();
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < t_len {
        let end = (start + chunk).min(t_len);
        let mut caches: Vec<LayerCache> = Vec::with_capacity(n_layers);
        let mut input = x.slice(s![start..end, ..]).to_owned();
        for (l, layer) in p.layers.iter().enumerate() {
            let (out, h_t, c_t, cache) = layer_forward(layer, input.view(), h[l].view(), c[l].view());
            h[l] = h_t;
            c[l] = c_t;
            caches.push(cache);
            input = out;
        }
        let top = input;
        let mut logp = top.dot(&p.w_out.t());
        logp += &p.b_out;
        log_softmax_rows(&mut logp);
        let mut dlogits = logp.mapv(f64::exp);
        for (r, &lab) in labels[start..end].iter().enumerate() {
            loss -= logp[[r, lab]];
            dlogits[[r, lab]] -= 1.0;
        }
        grad.w_out += &dlogits.t().dot(&top);
        grad.b_out += &dlogits.sum_axis(ndarray::Axis(0));
        let mut dh = dlogits.dot(&p.w_out);
        for l in (0..n_layers).rev() {
            dh = layer_backward(&p.layers[l], &caches[l], dh.view(), &mut grad.layers[l], fault);
        }
        start = end;
    }
    (loss, grad)
}

fn batch_gradient(
    am: &RecurrentAm,
    batch: &[&(Array2<f64>, Vec<usize>)],
    chunk: usize,
) -> (f64, usize, Params) {
    let parts: Vec<(f64, Params)> = batch
        .par_iter()
        .map(|(x, labels)| utterance_gradient(am, x, labels, chunk, None))
        .collect();
    let mut total = am.params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    let frames = batch.iter().map(|b| b.1.len()).sum();
    (loss, frames, total)
}

/// Mini-batch momentum SGD with truncated BPTT. Returns the trained model
/// and the per-step loss trace. On a non-finite loss the error carries the
/// last model whose loss was finite (the
/// initial model if the very first loss is non-finite).
pub fn train_ce(
    am: RecurrentAm,
    features: &[FeatureMatrix],
    alignments: &[FrameAlignment],
    cfg: &TrainConfig,
) -> Result<(RecurrentAm, Vec<LossRecord>)> {
    if features.len() != alignments.len() {
        return Err(NeuralError::LengthMismatch {
            posteriors: features.len(),
            labels: alignments.len(),
        });
    }
    let mut data = Vec::with_capacity(features.len());
    for (f, a) in features.iter().zip(alignments) {
        if f.dims() != am.input_dim() {
            return Err(NeuralError::InputDims {
                expected: am.input_dim(),
                got: f.dims(),
            });
        }
        if f.frames() != a.len() {
            return Err(NeuralError::LengthMismatch {
                posteriors: f.frames(),
                labels: a.len(),
            });
        }
        if a.is_empty() {
            continue;
        }
        data.push((am.normalize(f.values.view()), am.frame_labels(a)?));
    }
    if data.is_empty() {
        return Err(NeuralError::NoData);
    }

    let mut am = am;
    let mut velocity = am.params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    let mut lr = cfg.learning_rate;
    let mut step = 0;
    let mut last_good: Option<RecurrentAm> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<_> = idx.iter().map(|&i| &data[i]).collect();
            let (loss, frames, mut grad) = batch_gradient(&am, &batch, cfg.bptt_chunk);
            let mean_loss = loss / frames as f64;
            if !mean_loss.is_finite() || !grad.all_finite() {
                return Err(NeuralError::NonFinite {
                    step,
                    last_good: Box::new(last_good.unwrap_or(am)),
                });
            }
            last_good = Some(am.clone());
            trace.push(LossRecord {
                step,
                epoch,
                ce_loss: mean_loss,
            });
            let scale = 1.0 / frames as f64;
            let norm = grad.norm() * scale;
            let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                cfg.clip_norm / norm
            } else {
                1.0
            };
            for t in grad.tensors_mut() {
                t.iter_mut().for_each(|g| *g *= scale * clip);
            }
            for ((p, v), g) in am
                .params
                .tensors_mut()
                .into_iter()
                .zip(velocity.tensors_mut())
                .zip(grad.tensors())
            {
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = cfg.momentum * *vi - lr * gi;
                    *pi += *vi;
                }
            }
            step += 1;
        }
        lr *= cfg.lr_decay;
        if let Some(last) = trace.last() {
            log::info!("epoch {}: ce {:.4}", epoch + 1, last.ce_loss);
        }
    }
    Ok((am, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Number of parameters to compare; `None` checks all of them.
    pub samples: Option<usize>,
    pub step: f64,
    pub seed: u64,
    /// Corrupts the analytic gradient of one gate (negative control).
    pub corrupt_gate: Option<Gate>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples: None,
            step: 1e-5,
            seed: 0,
            corrupt_gate: None,
        }
    }
}

/// Denominator floor for the relative error, so parameters with vanishing
/// gradients are compared on an absolute scale.
const REL_ERROR_FLOOR: f64 = 1e-5;

/// Max relative error between analytic gradients and central finite
/// differences of the CE loss over the whole sequence.
pub fn grad_check(am: &RecurrentAm, features: &FeatureMatrix, labels: &[usize], opts: &GradCheckOptions) -> Result<f64> {
    if features.frames() != labels.len() {
        return Err(NeuralError::LengthMismatch {
            posteriors: features.frames(),
            labels: labels.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= am.n_labels()) {
        return Err(NeuralError::LabelRange {
            label: l,
            size: am.n_labels(),
        });
    }
    let x = am.normalize(features.values.view());
    let full = x.nrows().max(1);
    let (_, grad) = utterance_gradient(am, &x, labels, full, opts.corrupt_gate);
    let analytic: Vec<f64> = grad.tensors().into_iter().flatten().copied().collect();

    let n = analytic.len();
    let mut indices: Vec<usize> = (0..n).collect();
    if let Some(k) = opts.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        indices.shuffle(&mut rng);
        indices.truncate(k);
        indices.sort_unstable();
    }
    if indices.is_empty() {
        log::warn!("gradient check over an empty parameter subset");
        return Ok(0.0);
    }
    let loss_at = |model: &RecurrentAm| utterance_gradient(model, &x, labels, full, None).0;
    let max_err = indices
        .par_iter()
        .map(|&i| {
            let mut probe = am.clone();
            let base = flat_get(&probe.params, i);
            flat_set(&mut probe.params, i, base + opts.step);
            let up = loss_at(&probe);
            flat_set(&mut probe.params, i, base - opts.step);
            let down = loss_at(&probe);
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[i];
            (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(0.0, f64::max);
    Ok(max_err)
}

fn flat_get(p: &Params, mut i: usize) -> f64 {
    for t in p.tensors() {
        if i < t.len() {
            return t[i];
        }
        i -= t.len();
    }
    panic!("parameter index out of range")
}

fn flat_set(p: &mut Params, mut i: usize, v: f64) {
    for t in p.tensors_mut() {
        if i < t.len() {
            t[i] = v;
            return;
        }
        i -= t.len();
    }
    panic!("parameter index out of range")
}
