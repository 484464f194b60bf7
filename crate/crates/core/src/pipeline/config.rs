//! Pipeline configuration: one TOML file plus dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PipelineError, Result};
use crate::decoder::DecodeConfig;
use crate::features::FrontendConfig;
use crate::hmm_gmm::HmmGmmConfig;
use crate::lexicon::InventoryConfig;
use crate::neural_am::{AmConfig, TrainConfig};
use crate::synthetic::SyntheticSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Plain list of noise WAV paths, one per line.
    pub noise_list: Option<PathBuf>,
    pub work_dir: PathBuf,
    /// `native\tlatin` pairs for transliterated WER.
    pub transliteration: Option<PathBuf>,
    /// Extra LM training text, one sentence per line.
    pub lm_text: Option<PathBuf>,
    /// Phonemic alignments compared by `analyze`.
    pub phonemic_alignments: Option<PathBuf>,
    /// Reference graphemic alignments; `score` reports frame accuracy against them.
    pub truth_alignments: Option<PathBuf>,
    /// Output directory of `synth`.
    pub synthetic_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            train_manifest: "data/train.tsv".into(),
            test_manifest: "data/test.tsv".into(),
            noise_list: None,
            work_dir: "work".into(),
            transliteration: None,
            lm_text: None,
            phonemic_alignments: None,
            truth_alignments: None,
            synthetic_dir: "data".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackingConfig {
    pub left_context: usize,
    pub rate_factor: usize,
}

impl Default for StackingConfig {
    fn default() -> Self {
        Self {
            left_context: 7,
            rate_factor: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Noisy copies added per training utterance; 0 disables augmentation.
    pub copies: usize,
    pub snr_low: f64,
    pub snr_high: f64,
    pub snr_mean: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            copies: 0,
            snr_low: 0.0,
            snr_high: 30.0,
            snr_mean: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealignConfig {
    /// Prior scaling for hybrid alignment.
    pub kappa: f64,
}

impl Default for RealignConfig {
    fn default() -> Self {
        Self { kappa: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub order: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { order: 5 }
    }
}

/// Acoustic model a decode/score run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    /// Trained on GMM alignments.
    Initial,
    /// Retrained on its own alignments.
    Realigned,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Initial => "initial",
            ModelChoice::Realigned => "realigned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub models: Vec<ModelChoice>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            models: vec![ModelChoice::Initial, ModelChoice::Realigned],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    pub threshold: f64,
    pub exclude_reserved: bool,
    /// Graphemic alignment compared against the phonemic one.
    pub alignments: ModelChoice,
    /// Heatmap subsets; empty keeps every symbol.
    pub heatmap_graphemes: Vec<String>,
    pub heatmap_phonemes: Vec<String>,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            exclude_reserved: true,
            alignments: ModelChoice::Realigned,
            heatmap_graphemes: Vec::new(),
            heatmap_phonemes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub paths: PathsConfig,
    pub features: FrontendConfig,
    pub stacking: StackingConfig,
    pub augment: AugmentConfig,
    pub lexicon: InventoryConfig,
    pub gmm: HmmGmmConfig,
    pub am: AmConfig,
    pub train: TrainConfig,
    pub realign: RealignConfig,
    pub lm: LmConfig,
    pub decoder: DecodeConfig,
    pub evaluate: EvaluateConfig,
    pub analysis: AnalysisSettings,
    pub synthetic: SyntheticSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            paths: PathsConfig::default(),
            features: FrontendConfig::default(),
            stacking: StackingConfig::default(),
            augment: AugmentConfig::default(),
            lexicon: InventoryConfig::default(),
            gmm: HmmGmmConfig::default(),
            am: AmConfig::default(),
            train: TrainConfig::default(),
            realign: RealignConfig::default(),
            lm: LmConfig::default(),
            decoder: DecodeConfig::default(),
            evaluate: EvaluateConfig::default(),
            analysis: AnalysisSettings::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

/// A parsed configuration and the directory its relative paths refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn new(config: PipelineConfig, base_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            base_dir: base_dir.into(),
        })
    }

    /// Reads `path` and applies `overrides` (`("gmm.rounds", "2")`, ...).
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config = parse_config(&text, overrides)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn work_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.work_dir)
    }
}

/// Parses TOML text, applies dotted-key overrides and deserializes.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<PipelineConfig> {
    let mut root: toml::Table = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
    for (key, value) in overrides {
        set_dotted(&mut root, key, parse_value(value))?;
    }
    root.try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))
}

/// A TOML literal when `raw` parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("override {key:?}: {part:?} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        let counts = [
            (self.features.n_mels, "features.n_mels"),
            (self.stacking.rate_factor, "stacking.rate_factor"),
            (self.gmm.states_per_symbol, "gmm.states_per_symbol"),
            (self.gmm.target_mixtures, "gmm.target_mixtures"),
            (self.am.layers, "am.layers"),
            (self.am.hidden, "am.hidden"),
            (self.am.label_states, "am.label_states"),
            (self.train.batch_size, "train.batch_size"),
            (self.train.bptt_chunk, "train.bptt_chunk"),
            (self.lm.order, "lm.order"),
        ];
        for (v, name) in counts {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be positive")));
            }
        }
        if self.lexicon.min_count == 0 {
            return bad("lexicon.min_count must be positive");
        }
        if !(self.gmm.subsample > 0.0 && self.gmm.subsample <= 1.0) {
            return bad("gmm.subsample must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.analysis.threshold) {
            return bad("analysis.threshold must lie in [0, 1]");
        }
        if self.am.label_states != 1 && self.am.label_states != self.gmm.states_per_symbol {
            return bad("am.label_states must be 1 or gmm.states_per_symbol");
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate > 0.0) {
            return bad("train.learning_rate must be a positive finite number");
        }
        if !(self.realign.kappa.is_finite() && self.decoder.kappa.is_finite() && self.decoder.lm_weight.is_finite()) {
            return bad("realign.kappa, decoder.kappa and decoder.lm_weight must be finite");
        }
        if self.decoder.beam_width == Some(0) {
            return bad("decoder.beam_width must be positive");
        }
        if self.evaluate.models.is_empty() {
            return bad("evaluate.models must name at least one model");
        }
        if !(self.augment.snr_low <= self.augment.snr_mean && self.augment.snr_mean <= self.augment.snr_high) {
            return bad("augment: need snr_low <= snr_mean <= snr_high");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
