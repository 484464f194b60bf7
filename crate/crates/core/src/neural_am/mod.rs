//! Uni-directional LSTM acoustic model trained with frame-level
//! cross-entropy, and hybrid forced alignment with its posteriors.

mod io;
mod lstm;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{read_checkpoint, write_checkpoint, write_loss_trace, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use lstm::{Gate, LstmLayer};
pub use train::{grad_check, train_ce, GradCheckOptions, LossRecord, TrainConfig};

use crate::alignment::{FrameAlignment, Target};
use crate::features::{FeatureKind, FeatureMatrix};
use crate::lexicon::SymbolId;
use crate::viterbi::{best_path, min_frames, Chain};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("expected {expected}-dim input, got {got}")]
    InputDims { expected: usize, got: usize },
    #[error("expected stacked features, got {0:?}")]
    WrongKind(FeatureKind),
    #[error("{posteriors} posterior frames vs {labels} aligned frames")]
    LengthMismatch { posteriors: usize, labels: usize },
    #[error("label {label} outside the {size}-label output")]
    LabelRange { label: usize, size: usize },
    #[error("{got} frames cannot hold {needed} states")]
    InsufficientFrames { needed: usize, got: usize },
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize, last_good: Box<RecurrentAm> },
    #[error("no training frames")]
    NoData,
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Output labels per symbol: 1 collapses HMM states.
    pub label_states: usize,
    pub seed: u64,
}

impl Default for AmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            label_states: 1,
            seed: 0,
        }
    }
}

/// All trainable tensors. Gradients use the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<LstmLayer>,
    /// K × H
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl Params {
    fn zeros(input: usize, hidden: usize, layers: usize, labels: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|l| LstmLayer::zeros(if l == 0 { input } else { hidden }, hidden))
                .collect(),
            w_out: Array2::zeros((labels, hidden)),
            b_out: Array1::zeros(labels),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self::zeros(
            self.layers[0].input(),
            self.layers[0].hidden(),
            self.layers.len(),
            self.b_out.len(),
        )
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w_x.as_slice().expect("standard layout"));
            out.push(l.w_h.as_slice().expect("standard layout"));
            out.push(l.b.as_slice().expect("standard layout"));
        }
        out.push(self.w_out.as_slice().expect("standard layout"));
        out.push(self.b_out.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.w_x.as_slice_mut().expect("standard layout"));
            out.push(l.w_h.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.w_out.as_slice_mut().expect("standard layout"));
        out.push(self.b_out.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub(crate) fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Frames × labels probability matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    pub values: Array2<f64>,
}

impl PosteriorMatrix {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn labels(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentAm {
    pub symbols: Vec<String>,
    pub label_states: usize,
    /// Per-dimension input normalization applied before the first layer.
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
    pub params: Params,
}

impl RecurrentAm {
    /// Uniform init in ±1/√fan-in, forget-gate bias 1.
    pub fn new(cfg: &AmConfig, input_dim: usize, symbols: Vec<String>) -> Self {
        let mut am = Self::zeros(cfg, input_dim, symbols);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let h = cfg.hidden;
        for layer in &mut am.params.layers {
            let fan_in = (layer.input() + h) as f64;
            let r = 1.0 / fan_in.sqrt();
            layer.w_x.mapv_inplace(|_| rng.random_range(-r..r));
            layer.w_h.mapv_inplace(|_| rng.random_range(-r..r));
            layer.b.mapv_inplace(|_| rng.random_range(-r..r));
            layer.b.slice_mut(ndarray::s![h..2 * h]).fill(1.0);
        }
        let r = 1.0 / (h as f64).sqrt();
        am.params.w_out.mapv_inplace(|_| rng.random_range(-r..r));
        am.params.b_out.mapv_inplace(|_| rng.random_range(-r..r));
        am
    }

    /// All parameters zero: every output is uniform.
    pub fn zeros(cfg: &AmConfig, input_dim: usize, symbols: Vec<String>) -> Self {
        let labels = symbols.len() * cfg.label_states;
        Self {
            label_states: cfg.label_states,
            input_mean: Array1::zeros(input_dim),
            input_std: Array1::ones(input_dim),
            params: Params::zeros(input_dim, cfg.hidden, cfg.layers, labels),
            symbols,
        }
    }

    /// Sets the input normalization to the pooled statistics of `features`.
    pub fn fit_normalization(&mut self, features: &[FeatureMatrix]) {
        let views: Vec<_> = features.iter().map(|f| f.values.view()).collect();
        if views.is_empty() {
            return;
        }
        let pooled = ndarray::concatenate(Axis(0), &views).expect("same dims");
        if pooled.nrows() == 0 {
            return;
        }
        self.input_mean = pooled.mean_axis(Axis(0)).expect("non-empty");
        self.input_std = pooled.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
    }

    pub fn input_dim(&self) -> usize {
        self.params.layers[0].input()
    }

    pub fn hidden(&self) -> usize {
        self.params.layers[0].hidden()
    }

    pub fn n_layers(&self) -> usize {
        self.params.layers.len()
    }

    pub fn n_labels(&self) -> usize {
        self.params.b_out.len()
    }

    pub fn label(&self, symbol: SymbolId, state: usize) -> usize {
        symbol.index() * self.label_states + state.min(self.label_states - 1)
    }

    pub(crate) fn normalize(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.input_mean) / &self.input_std
    }

    fn check_input(&self, features: &FeatureMatrix) -> Result<()> {
        if features.dims() != self.input_dim() {
            return Err(NeuralError::InputDims {
                expected: self.input_dim(),
                got: features.dims(),
            });
        }
        Ok(())
    }

    /// Log-posteriors for every frame, starting from a zero state.
    pub fn log_posteriors(&self, features: &FeatureMatrix) -> Result<Array2<f64>> {
        self.check_input(features)?;
        let mut x = self.normalize(features.values.view());
        for layer in &self.params.layers {
            let h0 = Array1::zeros(layer.hidden());
            x = lstm::layer_forward(layer, x.view(), h0.view(), h0.view()).0;
        }
        let mut logits = x.dot(&self.params.w_out.t());
        logits += &self.params.b_out;
        log_softmax_rows(&mut logits);
        Ok(logits)
    }

    /// Output posteriors. Requires stacked features.
    pub fn forward(&self, features: &FeatureMatrix) -> Result<PosteriorMatrix> {
        if features.kind != FeatureKind::Stacked {
            return Err(NeuralError::WrongKind(features.kind));
        }
        Ok(PosteriorMatrix {
            values: self.log_posteriors(features)?.mapv(f64::exp),
        })
    }

    /// Label of every aligned frame.
    pub fn frame_labels(&self, alignment: &FrameAlignment) -> Result<Vec<usize>> {
        alignment
            .labels
            .iter()
            .map(|l| {
                let label = self.label(l.symbol, l.state as usize);
                if label >= self.n_labels() {
                    Err(NeuralError::LabelRange {
                        label,
                        size: self.n_labels(),
                    })
                } else {
                    Ok(label)
                }
            })
            .collect()
    }
}

pub(crate) fn log_softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
}

/// Cross-entropy: `−Σ_t ln y_{l_t}^t`.
pub fn ce_loss(posteriors: &PosteriorMatrix, labels: &[usize]) -> Result<f64> {
    if posteriors.frames() != labels.len() {
        return Err(NeuralError::LengthMismatch {
            posteriors: posteriors.frames(),
            labels: labels.len(),
        });
    }
    let mut loss = 0.0;
    for (t, &l) in labels.iter().enumerate() {
        if l >= posteriors.labels() {
            return Err(NeuralError::LabelRange {
                label: l,
                size: posteriors.labels(),
            });
        }
        loss -= posteriors.values[[t, l]].ln();
    }
    Ok(loss)
}

/// Add-one smoothed label frequencies.
pub fn label_priors(am: &RecurrentAm, alignments: &[FrameAlignment]) -> Result<Vec<f64>> {
    let mut counts = vec![1.0; am.n_labels()];
    for al in alignments {
        for l in am.frame_labels(al)? {
            counts[l] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    Ok(counts.into_iter().map(|c| c / total).collect())
}

/// Hybrid forced alignment: Viterbi over the target chain with emission
/// scores `ln y − κ·ln prior` and no transition scores.
pub fn neural_align(
    am: &RecurrentAm,
    priors: &[f64],
    features: &FeatureMatrix,
    targets: &[Target],
    kappa: f64,
    skippable: Option<SymbolId>,
) -> Result<FrameAlignment> {
    let log_post = am.log_posteriors(features)?;
    align_with_log_posteriors(am, &log_post, priors, targets, kappa, skippable, features.frame_shift_ms)
}

pub(crate) fn align_with_log_posteriors(
    am: &RecurrentAm,
    log_post: &Array2<f64>,
    priors: &[f64],
    targets: &[Target],
    kappa: f64,
    skippable: Option<SymbolId>,
    frame_shift_ms: f64,
) -> Result<FrameAlignment> {
    let s_per = am.label_states;
    let labels: Vec<usize> = targets
        .iter()
        .flat_map(|t| (0..s_per).map(move |s| t.symbol.index() * s_per + s))
        .collect();
    if let Some(&label) = labels.iter().find(|&&l| l >= am.n_labels()) {
        return Err(NeuralError::LabelRange {
            label,
            size: am.n_labels(),
        });
    }
    let (mut alt_start, mut alt_end) = (None, None);
    if let (Some(sil), true) = (skippable, targets.len() >= 2) {
        if targets[0].symbol == sil {
            alt_start = Some(s_per);
        }
        if targets[targets.len() - 1].symbol == sil {
            alt_end = Some((targets.len() - 1) * s_per - 1);
        }
    }
    let trans = |_: usize| (0.0, 0.0);
    let chain = Chain {
        n_states: labels.len(),
        alt_start,
        alt_end,
        transitions: &trans,
    };
    let frames = log_post.nrows();
    let needed = min_frames(&chain);
    let log_prior: Vec<f64> = priors.iter().map(|p| kappa * p.ln()).collect();
    let path = best_path(&chain, frames, |t, j| log_post[[t, labels[j]]] - log_prior[labels[j]])
        .ok_or(NeuralError::InsufficientFrames { needed, got: frames })?;
    Ok(FrameAlignment::from_state_path(&path.states, targets, s_per, frame_shift_ms))
}
