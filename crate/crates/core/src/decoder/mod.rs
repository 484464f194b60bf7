//! Language modeling, lexicon-constrained decoding and WER scoring.

mod beam;
mod ngram;
mod wer;

use thiserror::Error;

pub use beam::{beam_decode, decode_emissions, pseudo_log_likelihoods, DecodeConfig, DecodeGraph, DecodeResult};
pub use ngram::{NGramLm, BOS, EOS, UNK};
pub use wer::{
    align_errors, transliterated_wer, transliterated_wer_counts, wer, wer_counts, ErrorCounts, TransliterationMap,
};

use crate::neural_am::NeuralError;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("language model: {0}")]
    Lm(String),
    #[error("empty lexicon")]
    EmptyLexicon,
    #[error("lexicon: {0}")]
    Lexicon(String),
    #[error("transliteration map: {0}")]
    Transliteration(String),
    #[error(transparent)]
    Acoustic(#[from] NeuralError),
}

pub type Result<T> = std::result::Result<T, DecoderError>;
