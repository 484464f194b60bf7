//! Flat-start grapheme HMM-GMM training and Viterbi forced alignment.
//!
//! Every symbol gets `states_per_symbol` left-to-right emitting states, each
//! with a diagonal-covariance GMM. Training starts from an even segmentation
//! of each utterance, grows the mixtures by binary splitting and alternates
//! forced alignment with re-estimation.

mod gmm;
mod io;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use gmm::DiagGmm;
pub use io::{read_model, write_model, MODEL_MAGIC, MODEL_VERSION};

use crate::alignment::{FrameAlignment, Target};
use crate::features::FeatureMatrix;
use crate::lexicon::SymbolId;
use crate::viterbi::{best_path, min_frames, Chain};

#[derive(Debug, Error)]
pub enum HmmError {
    #[error("{got} frames cannot hold {needed} states")]
    InsufficientFrames { needed: usize, got: usize },
    #[error("non-finite log-likelihood in {0}")]
    NonFinite(String),
    #[error("no training frames")]
    NoData,
    #[error("{0}")]
    Mismatch(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HmmError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmmGmmConfig {
    pub states_per_symbol: usize,
    pub target_mixtures: usize,
    pub em_iters_per_split: usize,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub var_floor_ratio: f64,
    /// Mean offset of split components, in standard deviations.
    pub split_perturbation: f64,
    /// Variance multiplier for states that receive no frames.
    pub empty_state_inflation: f64,
    pub min_transition: f64,
    /// Let alignments skip leading/trailing `<sil>`.
    pub skip_sil: bool,
    pub rounds: usize,
    /// Realignment rounds at each intermediate mixture count (1, 2, 4, ...)
    /// before training up to `target_mixtures`; 0 trains straight from the
    /// flat start.
    pub ramp_rounds: usize,
    /// Fraction of the corpus used for flat-start training.
    pub subsample: f64,
}

impl Default for HmmGmmConfig {
    fn default() -> Self {
        Self {
            states_per_symbol: 3,
            target_mixtures: 14,
            em_iters_per_split: 5,
            var_floor_ratio: 1e-3,
            split_perturbation: 0.1,
            empty_state_inflation: 2.0,
            min_transition: 1e-3,
            skip_sil: true,
            rounds: 4,
            ramp_rounds: 1,
            subsample: 0.06,
        }
    }
}

/// Per-symbol left-to-right HMMs with GMM emissions.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmGmmModel {
    pub symbols: Vec<String>,
    pub states_per_symbol: usize,
    /// Indexed by `symbol * states_per_symbol + state`.
    pub gmms: Vec<DiagGmm>,
    /// `(stay, advance)` probabilities per state.
    pub transitions: Vec<(f64, f64)>,
    pub var_floor: Array1<f64>,
}

impl HmmGmmModel {
    pub fn new(
        symbols: Vec<String>,
        states_per_symbol: usize,
        gmms: Vec<DiagGmm>,
        transitions: Vec<(f64, f64)>,
        var_floor: Array1<f64>,
    ) -> Result<Self> {
        let n = symbols.len() * states_per_symbol;
        if gmms.len() != n || transitions.len() != n {
            return Err(HmmError::Mismatch(format!(
                "{} symbols × {states_per_symbol} states need {n} GMMs and transitions",
                symbols.len()
            )));
        }
        if let Some(g) = gmms.iter().find(|g| g.dims() != var_floor.len()) {
            return Err(HmmError::Mismatch(format!("GMM has {} dims, floor has {}", g.dims(), var_floor.len())));
        }
        Ok(Self {
            symbols,
            states_per_symbol,
            gmms,
            transitions,
            var_floor,
        })
    }

    pub fn dims(&self) -> usize {
        self.var_floor.len()
    }

    pub fn state_index(&self, symbol: SymbolId, state: usize) -> usize {
        symbol.index() * self.states_per_symbol + state
    }

    /// Log-likelihoods of every frame under every model state (frames × states).
    pub fn emission_table(&self, features: &FeatureMatrix, used: &[usize]) -> Array2<f64> {
        let mut out = Array2::from_elem((features.frames(), self.gmms.len()), f64::NAN);
        for &s in used {
            let ll = self.gmms[s].log_likelihoods(features.values.view());
            out.column_mut(s).assign(&ll);
        }
        out
    }
}

/// Composed state-graph description of a target sequence.
fn chain_states(model_states: usize, targets: &[Target]) -> Vec<(usize, usize)> {
    targets
        .iter()
        .flat_map(|t| (0..model_states).map(move |s| (t.symbol.index(), s)))
        .collect()
}

fn sil_skips(targets: &[Target], states: usize, skippable: Option<SymbolId>) -> (Option<usize>, Option<usize>) {
    let Some(sil) = skippable else {
        return (None, None);
    };
    if targets.len() < 2 {
        return (None, None);
    }
    let start = (targets[0].symbol == sil).then_some(states);
    let end = (targets[targets.len() - 1].symbol == sil).then_some((targets.len() - 1) * states - 1);
    (start, end)
}

/// Even segmentation: the `S·len(targets)` states receive contiguous spans
/// whose lengths differ by at most one, with the remainder going to the
/// leftmost states.
pub fn flat_start_segment(
    n_frames: usize,
    targets: &[Target],
    states_per_symbol: usize,
    frame_shift_ms: f64,
) -> Result<FrameAlignment> {
    let n_states = targets.len() * states_per_symbol;
    if n_states == 0 || n_frames < n_states {
        return Err(HmmError::InsufficientFrames {
            needed: n_states,
            got: n_frames,
        });
    }
    let base = n_frames / n_states;
    let rem = n_frames % n_states;
    let path: Vec<usize> = (0..n_states)
        .flat_map(|s| std::iter::repeat_n(s, base + usize::from(s < rem)))
        .collect();
    Ok(FrameAlignment::from_state_path(&path, targets, states_per_symbol, frame_shift_ms))
}

/// Log-likelihood trace of one EM run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// `(mixtures, log-likelihood before each update and after the last)`.
    pub stages: Vec<(usize, Vec<f64>)>,
}

/// Frames gathered per model state.
fn gather_frames(
    n_states: usize,
    states_per_symbol: usize,
    features: &[FeatureMatrix],
    alignments: &[FrameAlignment],
) -> Result<(Vec<Array2<f64>>, Vec<(u64, u64)>)> {
    if features.len() != alignments.len() {
        return Err(HmmError::Mismatch("features and alignments differ in length".into()));
    }
    let dims = features.first().map(FeatureMatrix::dims).ok_or(HmmError::NoData)?;
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); n_states];
    let mut trans = vec![(0u64, 0u64); n_states];
    for (fm, al) in features.iter().zip(alignments) {
        if fm.frames() != al.len() {
            return Err(HmmError::Mismatch(format!(
                "alignment has {} frames, features {}",
                al.len(),
                fm.frames()
            )));
        }
        if fm.dims() != dims {
            return Err(HmmError::Mismatch("feature dimensions differ".into()));
        }
        for (t, l) in al.labels.iter().enumerate() {
            let s = l.symbol.index() * states_per_symbol + l.state as usize;
            if s >= n_states {
                return Err(HmmError::Mismatch(format!("symbol {} outside the model", l.symbol)));
            }
            rows[s].extend(fm.values.row(t).iter());
            if let Some(next) = al.labels.get(t + 1) {
                if next.position == l.position && next.state == l.state {
                    trans[s].0 += 1;
                } else {
                    trans[s].1 += 1;
                }
            }
        }
    }
    let mats = rows
        .into_iter()
        .map(|r| {
            let n = r.len() / dims;
            Array2::from_shape_vec((n, dims), r).expect("whole rows")
        })
        .collect();
    Ok((mats, trans))
}

fn transition_probs(counts: (u64, u64), min: f64) -> (f64, f64) {
    let total = counts.0 + counts.1;
    if total == 0 {
        return (0.5, 0.5);
    }
    let stay = (counts.0 as f64 / total as f64).clamp(min, 1.0 - min);
    (stay, 1.0 - stay)
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(HmmError::NonFinite(what.into()))
    }
}

/// Trains a model from scratch on fixed alignments, growing each state's
/// mixture 1→2→4→…→`target_mixtures` with `em_iters_per_split` EM updates
/// after every split.
pub fn train_em(
    symbols: &[String],
    features: &[FeatureMatrix],
    alignments: &[FrameAlignment],
    cfg: &HmmGmmConfig,
) -> Result<(HmmGmmModel, EmTrace)> {
    let s_per = cfg.states_per_symbol;
    let n_states = symbols.len() * s_per;
    let (data, trans_counts) = gather_frames(n_states, s_per, features, alignments)?;

    let all_rows: usize = data.iter().map(|d| d.nrows()).sum();
    if all_rows == 0 {
        return Err(HmmError::NoData);
    }
    let views: Vec<_> = data.iter().filter(|d| d.nrows() > 0).map(|d| d.view()).collect();
    let pooled = ndarray::concatenate(Axis(0), &views).expect("same dims");
    let (global_mean, global_var) = gmm::moments(pooled.view());
    let var_floor = global_var.mapv(|v| (v * cfg.var_floor_ratio).max(1e-12));

    let mut gmms: Vec<DiagGmm> = data
        .iter()
        .enumerate()
        .map(|(s, x)| {
            if x.nrows() == 0 {
                log::warn!("state {s} has no frames; using the global Gaussian");
                DiagGmm::single(global_mean.clone(), &global_var * cfg.empty_state_inflation)
            } else {
                let (m, v) = gmm::moments(x.view());
                DiagGmm::single(m, v.iter().zip(&var_floor).map(|(a, b)| a.max(*b)).collect())
            }
        })
        .collect();

    let mut trace = EmTrace::default();
    let mut mixtures = 1;
    loop {
        let mut lls = Vec::with_capacity(cfg.em_iters_per_split + 1);
        for _ in 0..cfg.em_iters_per_split {
            let (next, ll) = em_round(&gmms, &data, &var_floor);
            lls.push(check_finite(ll, "EM")?);
            gmms = next;
        }
        lls.push(check_finite(total_log_likelihood(&gmms, &data), "EM")?);
        trace.stages.push((mixtures, lls));
        if mixtures >= cfg.target_mixtures {
            break;
        }
        let add = mixtures.min(cfg.target_mixtures - mixtures);
        gmms = gmms
            .iter()
            .zip(&data)
            .map(|(g, x)| if x.nrows() == 0 { g.clone() } else { g.split(add, cfg.split_perturbation) })
            .collect();
        mixtures += add;
    }

    let transitions = trans_counts.iter().map(|&c| transition_probs(c, cfg.min_transition)).collect();
    let model = HmmGmmModel::new(symbols.to_vec(), s_per, gmms, transitions, var_floor)?;
    Ok((model, trace))
}

fn em_round(gmms: &[DiagGmm], data: &[Array2<f64>], floor: &Array1<f64>) -> (Vec<DiagGmm>, f64) {
    let results: Vec<(DiagGmm, f64)> = gmms
        .par_iter()
        .zip(data.par_iter())
        .map(|(g, x)| {
            if x.nrows() == 0 {
                (g.clone(), 0.0)
            } else {
                g.em_step(x.view(), floor)
            }
        })
        .collect();
    let total = results.iter().map(|r| r.1).sum();
    (results.into_iter().map(|r| r.0).collect(), total)
}

fn total_log_likelihood(gmms: &[DiagGmm], data: &[Array2<f64>]) -> f64 {
    gmms.par_iter()
        .zip(data.par_iter())
        .map(|(g, x)| if x.nrows() == 0 { 0.0 } else { g.log_likelihoods(x.view()).sum() })
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

impl HmmGmmModel {
    /// Continues EM from the current parameters on new alignments, keeping
    /// mixture sizes. States without frames keep their parameters.
    pub fn reestimate(
        &self,
        features: &[FeatureMatrix],
        alignments: &[FrameAlignment],
        iters: usize,
        min_transition: f64,
    ) -> Result<(Self, Vec<f64>)> {
        let (data, trans_counts) = gather_frames(self.gmms.len(), self.states_per_symbol, features, alignments)?;
        let mut gmms = self.gmms.clone();
        let mut lls = Vec::with_capacity(iters + 1);
        for _ in 0..iters {
            let (next, ll) = em_round(&gmms, &data, &self.var_floor);
            lls.push(check_finite(ll, "EM")?);
            gmms = next;
        }
        lls.push(check_finite(total_log_likelihood(&gmms, &data), "EM")?);
        let transitions = trans_counts
            .iter()
            .zip(&self.transitions)
            .map(|(&c, &old)| if c.0 + c.1 == 0 { old } else { transition_probs(c, min_transition) })
            .collect();
        let model = Self {
            gmms,
            transitions,
            ..self.clone()
        };
        Ok((model, lls))
    }
}

/// Best left-to-right path of `targets` through the model. Returns the
/// alignment and its joint log-probability (emissions plus transitions taken).
pub fn viterbi_align(
    model: &HmmGmmModel,
    features: &FeatureMatrix,
    targets: &[Target],
    skippable: Option<SymbolId>,
) -> Result<(FrameAlignment, f64)> {
    let s_per = model.states_per_symbol;
    let states = chain_states(s_per, targets);
    let model_states: Vec<usize> = states.iter().map(|&(sym, s)| sym * s_per + s).collect();
    if let Some(&bad) = model_states.iter().find(|&&s| s >= model.gmms.len()) {
        return Err(HmmError::Mismatch(format!("state {bad} outside the model")));
    }
    let (alt_start, alt_end) = sil_skips(targets, s_per, skippable);
    let trans = |j: usize| {
        let (stay, adv) = model.transitions[model_states[j]];
        (stay.ln(), adv.ln())
    };
    let chain = Chain {
        n_states: states.len(),
        alt_start,
        alt_end,
        transitions: &trans,
    };
    let needed = min_frames(&chain);
    if features.frames() < needed {
        return Err(HmmError::InsufficientFrames {
            needed,
            got: features.frames(),
        });
    }
    let mut used = model_states.clone();
    used.sort_unstable();
    used.dedup();
    let table = model.emission_table(features, &used);
    let path = best_path(&chain, features.frames(), |t, j| table[[t, model_states[j]]]).ok_or(
        HmmError::InsufficientFrames {
            needed,
            got: features.frames(),
        },
    )?;
    let score = check_finite(path.score, "Viterbi")?;
    Ok((
        FrameAlignment::from_state_path(&path.states, targets, s_per, features.frame_shift_ms),
        score,
    ))
}

/// Aligns every utterance in parallel; results keep input order.
pub fn align_all(
    model: &HmmGmmModel,
    features: &[FeatureMatrix],
    targets: &[Vec<Target>],
    skippable: Option<SymbolId>,
) -> Result<Vec<(FrameAlignment, f64)>> {
    features
        .par_iter()
        .zip(targets.par_iter())
        .map(|(f, t)| viterbi_align(model, f, t, skippable))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RealignOutcome {
    pub model: HmmGmmModel,
    pub alignments: Vec<FrameAlignment>,
    /// Total Viterbi log-likelihood of each round's alignment pass.
    pub scores: Vec<f64>,
}

/// Alternates forced alignment and re-estimation for `rounds` rounds.
pub fn realign_loop(
    model: HmmGmmModel,
    features: &[FeatureMatrix],
    targets: &[Vec<Target>],
    alignments: Vec<FrameAlignment>,
    rounds: usize,
    skippable: Option<SymbolId>,
    cfg: &HmmGmmConfig,
) -> Result<RealignOutcome> {
    let mut model = model;
    let mut alignments = alignments;
    let mut scores = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let aligned = align_all(&model, features, targets, skippable)?;
        let total: f64 = aligned.iter().map(|a| a.1).sum();
        log::info!("realign round {}: total log-likelihood {total:.3}", round + 1);
        scores.push(total);
        alignments = aligned.into_iter().map(|a| a.0).collect();
        model = model.reestimate(features, &alignments, cfg.em_iters_per_split, cfg.min_transition)?.0;
    }
    Ok(RealignOutcome {
        model,
        alignments,
        scores,
    })
}

#[derive(Debug, Clone)]
pub struct FlatStartOutcome {
    pub model: HmmGmmModel,
    pub alignments: Vec<FrameAlignment>,
    /// EM traces, one per `train_em` call, in order.
    pub em: Vec<EmTrace>,
    /// Realignment scores as `(mixtures, total log-likelihood)`.
    pub realign: Vec<(usize, f64)>,
}

/// Full training from flat-start alignments. With `ramp_rounds > 0`, models
/// with 1, 2, 4, ... mixtures (below the target) are each trained and used to
/// realign before the next size; the target-size model then gets `rounds`
/// further realignment rounds.
pub fn train_from_flat_start(
    symbols: &[String],
    features: &[FeatureMatrix],
    targets: &[Vec<Target>],
    flat: Vec<FrameAlignment>,
    skippable: Option<SymbolId>,
    cfg: &HmmGmmConfig,
) -> Result<FlatStartOutcome> {
    let mut em = Vec::new();
    let mut realign = Vec::new();
    let mut alignments = flat;
    if cfg.ramp_rounds > 0 {
        let mut m = 1;
        while m < cfg.target_mixtures {
            let step = HmmGmmConfig {
                target_mixtures: m,
                ..cfg.clone()
            };
            let (model, trace) = train_em(symbols, features, &alignments, &step)?;
            em.push(trace);
            let out = realign_loop(model, features, targets, alignments, cfg.ramp_rounds, skippable, &step)?;
            realign.extend(out.scores.iter().map(|&s| (m, s)));
            alignments = out.alignments;
            m *= 2;
        }
    }
    let (model, trace) = train_em(symbols, features, &alignments, cfg)?;
    em.push(trace);
    let out = realign_loop(model, features, targets, alignments, cfg.rounds, skippable, cfg)?;
    realign.extend(out.scores.iter().map(|&s| (cfg.target_mixtures, s)));
    Ok(FlatStartOutcome {
        model: out.model,
        alignments: out.alignments,
        em,
        realign,
    })
}

/// Deterministic subset of `ids`: the `⌊fraction·n⌋` (at least one) ids with
/// the smallest seeded hash. Returns indices in input order.
pub fn select_subset(ids: &[&str], fraction: f64, seed: u64) -> Vec<usize> {
    if ids.is_empty() {
        return Vec::new();
    }
    let k = ((fraction * ids.len() as f64).floor() as usize).clamp(1, ids.len());
    let mut keyed: Vec<([u8; 32], usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(id.as_bytes());
            (h.finalize().into(), i)
        })
        .collect();
    keyed.sort();
    let mut chosen: Vec<usize> = keyed.into_iter().take(k).map(|(_, i)| i).collect();
    chosen.sort_unstable();
    chosen
}
