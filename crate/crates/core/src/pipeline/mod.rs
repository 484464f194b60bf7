//! Staged training/evaluation driver. Every stage reads declared artifacts
//! from the work dir, writes its own, and records a run manifest.

mod artifacts;
mod config;
mod stages;

use std::path::PathBuf;

use thiserror::Error;

pub use artifacts::{
    read_feature_archive, read_priors, read_utterance_list, sha256_file, write_feature_archive, Artifact,
    RunManifest, WorkDir,
};
pub use config::{
    parse_config, AnalysisSettings, AugmentConfig, EvaluateConfig, LmConfig, LoadedConfig, ModelChoice,
    PathsConfig, PipelineConfig, RealignConfig, StackingConfig,
};
pub use stages::{alignment_accuracy, run_stage, run_stages, ScoreReport, StageOutcome};

use crate::alignment::AlignmentError;
use crate::analysis::AnalysisError;
use crate::corpus::CorpusError;
use crate::decoder::DecoderError;
use crate::features::FeatureError;
use crate::hmm_gmm::HmmError;
use crate::lexicon::LexiconError;
use crate::neural_am::NeuralError;
use crate::synthetic::SyntheticError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Prep,
    TrainGmm,
    Align,
    TrainAm,
    Realign,
    TrainLm,
    Decode,
    Score,
    Analyze,
}

impl Stage {
    /// The training/evaluation chain in dependency order (without `synth`
    /// and `analyze`).
    pub const CHAIN: [Stage; 8] = [
        Stage::Prep,
        Stage::TrainGmm,
        Stage::Align,
        Stage::TrainAm,
        Stage::Realign,
        Stage::TrainLm,
        Stage::Decode,
        Stage::Score,
    ];

    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::Prep,
        Stage::TrainGmm,
        Stage::Align,
        Stage::TrainAm,
        Stage::Realign,
        Stage::TrainLm,
        Stage::Decode,
        Stage::Score,
        Stage::Analyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Prep => "prep",
            Stage::TrainGmm => "train-gmm",
            Stage::Align => "align",
            Stage::TrainAm => "train-am",
            Stage::Realign => "realign",
            Stage::TrainLm => "train-lm",
            Stage::Decode => "decode",
            Stage::Score => "score",
            Stage::Analyze => "analyze",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing artifact {path} (produced by stage `{stage}`)")]
    MissingArtifact { path: PathBuf, stage: Stage },
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Synthetic(SyntheticError::DuplicateCarrier { .. } | SyntheticError::Invalid(_)) => 1,
            PipelineError::Numerical(_)
            | PipelineError::Hmm(HmmError::NonFinite(_))
            | PipelineError::Neural(NeuralError::NonFinite { .. })
            | PipelineError::Decoder(DecoderError::Acoustic(NeuralError::NonFinite { .. })) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
