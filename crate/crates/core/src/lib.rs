//! Lexicon-free grapheme acoustic modeling.
//!
//! The crate covers the whole training and analysis chain for grapheme-output
//! acoustic models:
//!
//! * [`corpus`]: manifest/WAV ingestion and SNR-controlled noise augmentation.
//! * [`features`]: log-mel and PLP front-ends, frame stacking, binary feature cache.
//! * [`lexicon`]: grapheme inventory and graphemic lexicon built from transcripts alone.
//! * [`hmm_gmm`]: flat-start HMM-GMM training and Viterbi forced alignment.
//! * [`neural_am`]: LSTM acoustic model trained with frame-level cross-entropy.
//! * [`decoder`]: Witten-Bell n-gram LM, lexicon-tree beam search, (transliterated) WER.
//! * [`analysis`]: grapheme/phoneme confusion matrices and the agreement score.
//! * [`pipeline`] and [`synthetic`]: the staged driver and the synthetic corpus generator.

pub mod alignment;
pub mod analysis;
pub mod corpus;
pub mod decoder;
pub mod features;
pub mod hmm_gmm;
pub mod lexicon;
pub mod neural_am;
pub mod pipeline;
pub mod synthetic;
mod viterbi;

pub use alignment::{AlignmentSet, FrameAlignment, FrameLabel, Target};
pub use corpus::AudioSegment;
pub use features::FeatureMatrix;
pub use lexicon::{GraphemeInventory, GraphemicLexicon, SymbolId};
