//! Grapheme/phoneme alignment comparison: frame co-occurrence matrices and the
//! agreement score.

mod heatmap;

use log::warn;
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::alignment::AlignmentSet;
use crate::lexicon::is_reserved;

pub use heatmap::{emit_heatmap, read_csv, write_csv, write_svg, SymbolFilter, MAX_INTENSITY_FILL};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("utterance {id}: {graphemic} graphemic frames vs {phonemic} phonemic frames")]
    FrameMismatch {
        id: String,
        graphemic: usize,
        phonemic: usize,
    },
    #[error("utterance {id}: frame shift {graphemic} ms vs {phonemic} ms")]
    RateMismatch { id: String, graphemic: f64, phonemic: f64 },
    #[error("confusion matrix has no populated grapheme column")]
    Empty,
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Frame co-occurrence counts: phonemes on rows, graphemes on columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub graphemes: Vec<String>,
    pub phonemes: Vec<String>,
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(graphemes: Vec<String>, phonemes: Vec<String>, counts: Array2<u64>) -> Self {
        assert_eq!(counts.dim(), (phonemes.len(), graphemes.len()));
        Self {
            graphemes,
            phonemes,
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn column_total(&self, g: usize) -> u64 {
        self.counts.column(g).sum()
    }

    /// Column-stochastic view; empty columns stay zero.
    pub fn normalized(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.counts.dim());
        for (g, col) in self.counts.columns().into_iter().enumerate() {
            let total = col.sum();
            if total == 0 {
                continue;
            }
            for (p, &c) in col.iter().enumerate() {
                out[[p, g]] = c as f64 / total as f64;
            }
        }
        out
    }

    /// Drops reserved rows and columns; the remaining counts are untouched.
    pub fn without_reserved(&self) -> Self {
        let cols: Vec<usize> = (0..self.graphemes.len()).filter(|&g| !is_reserved(&self.graphemes[g])).collect();
        let rows: Vec<usize> = (0..self.phonemes.len()).filter(|&p| !is_reserved(&self.phonemes[p])).collect();
        let counts = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| self.counts[[rows[i], cols[j]]]);
        Self {
            graphemes: cols.iter().map(|&g| self.graphemes[g].clone()).collect(),
            phonemes: rows.iter().map(|&p| self.phonemes[p].clone()).collect(),
            counts,
        }
    }
}

/// Counts, for every frame of every shared utterance, the pair (graphemic
/// label, phonemic label). Utterances found in only one set are skipped.
pub fn confusion_matrix(graphemic: &AlignmentSet, phonemic: &AlignmentSet) -> Result<ConfusionMatrix> {
    let mut shared = Vec::new();
    for (id, g) in &graphemic.utterances {
        match phonemic.utterances.get(id) {
            Some(p) => shared.push((id, g, p)),
            None => warn!("utterance {id} has no phonemic alignment, skipping"),
        }
    }
    for id in phonemic.utterances.keys() {
        if !graphemic.utterances.contains_key(id) {
            warn!("utterance {id} has no graphemic alignment, skipping");
        }
    }
    if shared.is_empty() {
        warn!("alignment sets share no utterances; confusion matrix is empty");
    }
    for (id, g, p) in &shared {
        if (g.frame_shift_ms - p.frame_shift_ms).abs() > 1e-9 {
            return Err(AnalysisError::RateMismatch {
                id: id.to_string(),
                graphemic: g.frame_shift_ms,
                phonemic: p.frame_shift_ms,
            });
        }
        if g.len() != p.len() {
            return Err(AnalysisError::FrameMismatch {
                id: id.to_string(),
                graphemic: g.len(),
                phonemic: p.len(),
            });
        }
    }

    let dim = (phonemic.symbols.len(), graphemic.symbols.len());
    let counts = shared
        .par_iter()
        .map(|(_, g, p)| {
            let mut c = Array2::<u64>::zeros(dim);
            for (gl, pl) in g.labels.iter().zip(&p.labels) {
                c[[pl.symbol.index(), gl.symbol.index()]] += 1;
            }
            c
        })
        .reduce(|| Array2::zeros(dim), |a, b| a + b);

    Ok(ConfusionMatrix {
        graphemes: graphemic.symbols.clone(),
        phonemes: phonemic.symbols.clone(),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgreementConfig {
    pub threshold: f64,
    /// Score only non-reserved graphemes against non-reserved phonemes.
    pub exclude_reserved: bool,
}

impl Default for AgreementConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            exclude_reserved: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphemeAgreement {
    pub grapheme: String,
    pub frames: u64,
    pub best_phoneme: String,
    pub fraction: f64,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub threshold: f64,
    pub exclude_reserved: bool,
    pub score: f64,
    pub populated: usize,
    pub agreeing: usize,
    /// Populated graphemes only.
    pub graphemes: Vec<GraphemeAgreement>,
}

impl AgreementReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Fraction of populated grapheme columns whose largest normalized entry
/// reaches `threshold`.
pub fn agreement_score(cm: &ConfusionMatrix, cfg: &AgreementConfig) -> Result<AgreementReport> {
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(AnalysisError::Threshold(cfg.threshold));
    }
    let scored = if cfg.exclude_reserved {
        cm.without_reserved()
    } else {
        cm.clone()
    };
    let norm = scored.normalized();
    let mut rows = Vec::new();
    for (g, name) in scored.graphemes.iter().enumerate() {
        let frames = scored.column_total(g);
        if frames == 0 {
            continue;
        }
        let (best, fraction) = norm
            .column(g)
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (p, &f)| if f > acc.1 { (p, f) } else { acc });
        rows.push(GraphemeAgreement {
            grapheme: name.clone(),
            frames,
            best_phoneme: scored.phonemes[best].clone(),
            fraction,
            agrees: fraction >= cfg.threshold,
        });
    }
    if rows.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let agreeing = rows.iter().filter(|r| r.agrees).count();
    Ok(AgreementReport {
        threshold: cfg.threshold,
        exclude_reserved: cfg.exclude_reserved,
        score: agreeing as f64 / rows.len() as f64,
        populated: rows.len(),
        agreeing,
        graphemes: rows,
    })
}

#[cfg(test)]
mod tests;
