//! On-disk artifacts: the work-dir layout, feature archives, utterance lists
//! and per-stage run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PipelineError, Result, Stage};
use crate::features::{read_features, write_features, FeatureMatrix};

/// Files every stage reads or writes, relative to the work dir, with the
/// stage that produces them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Artifact {
    Inventory,
    Lexicon,
    TrainList,
    TestList,
    FilterReport,
    GmmFeatures,
    AmFeatures,
    TestFeatures,
    GmmModel,
    GmmSubset,
    EmTrace,
    GmmAlignments,
    AmCheckpoint,
    AmPriors,
    AmLoss,
    CeAlignments,
    RealignedCheckpoint,
    RealignedPriors,
    RealignedLoss,
    LanguageModel,
    Hypotheses(crate::pipeline::ModelChoice),
    ScoreReport,
    CorpusScores,
    UtteranceScores(crate::pipeline::ModelChoice),
    ConfusionCounts,
    Agreement,
    Heatmap,
}

impl Artifact {
    pub fn relative(self) -> PathBuf {
        use Artifact::*;
        let p = match self {
            Inventory => "prep/inventory.tsv".to_string(),
            Lexicon => "prep/lexicon.tsv".into(),
            TrainList => "prep/train.tsv".into(),
            TestList => "prep/test.tsv".into(),
            FilterReport => "prep/filter.json".into(),
            GmmFeatures => "prep/train_plp.feats".into(),
            AmFeatures => "prep/train_stacked.feats".into(),
            TestFeatures => "prep/test_stacked.feats".into(),
            GmmModel => "gmm/model.gahm".into(),
            GmmSubset => "gmm/subset.txt".into(),
            EmTrace => "gmm/em_trace.csv".into(),
            GmmAlignments => "align/gmm.ali".into(),
            AmCheckpoint => "am/model.garm".into(),
            AmPriors => "am/priors.txt".into(),
            AmLoss => "am/loss.csv".into(),
            CeAlignments => "realign/ce.ali".into(),
            RealignedCheckpoint => "realign/model.garm".into(),
            RealignedPriors => "realign/priors.txt".into(),
            RealignedLoss => "realign/loss.csv".into(),
            LanguageModel => "lm/lm.arpa".into(),
            Hypotheses(m) => format!("decode/{}.hyp", m.name()),
            ScoreReport => "score/report.json".into(),
            CorpusScores => "score/corpus.csv".into(),
            UtteranceScores(m) => format!("score/{}_utterances.csv", m.name()),
            ConfusionCounts => "analyze/counts.tsv".into(),
            Agreement => "analyze/agreement.json".into(),
            Heatmap => "analyze/confusion".into(),
        };
        PathBuf::from(p)
    }

    pub fn producer(self) -> Stage {
        use Artifact::*;
        match self {
            Inventory | Lexicon | TrainList | TestList | FilterReport | GmmFeatures | AmFeatures | TestFeatures => {
                Stage::Prep
            }
            GmmModel | GmmSubset | EmTrace => Stage::TrainGmm,
            GmmAlignments => Stage::Align,
            AmCheckpoint | AmPriors | AmLoss => Stage::TrainAm,
            CeAlignments | RealignedCheckpoint | RealignedPriors | RealignedLoss => Stage::Realign,
            LanguageModel => Stage::TrainLm,
            Hypotheses(_) => Stage::Decode,
            ScoreReport | CorpusScores | UtteranceScores(_) => Stage::Score,
            ConfusionCounts | Agreement | Heatmap => Stage::Analyze,
        }
    }
}

/// Work-dir handle that resolves artifacts and checks they exist.
#[derive(Debug, Clone)]
pub struct WorkDir {
    pub root: PathBuf,
}

impl WorkDir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn path(&self, a: Artifact) -> PathBuf {
        self.root.join(a.relative())
    }

    /// Path of an upstream artifact, or an error naming it and its producer.
    pub fn input(&self, a: Artifact) -> Result<PathBuf> {
        let p = self.path(a);
        if p.is_file() {
            Ok(p)
        } else {
            Err(PipelineError::MissingArtifact {
                path: p,
                stage: a.producer(),
            })
        }
    }

    /// Path of an output artifact, creating its directory.
    pub fn output(&self, a: Artifact) -> Result<PathBuf> {
        let p = self.path(a);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(p)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(fs::File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Named feature matrices in one file: a `u32` count, then per entry a
/// length-prefixed UTF-8 id followed by a feature container.
pub fn write_feature_archive(path: &Path, items: &[(String, FeatureMatrix)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for (id, fm) in items {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        write_features(&mut w, fm)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_archive(path: &Path) -> Result<Vec<(String, FeatureMatrix)>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut n = [0u8; 4];
    r.read_exact(&mut n)?;
    let count = u32::from_le_bytes(n) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut n)?;
        let mut id = vec![0u8; u32::from_le_bytes(n) as usize];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| PipelineError::Data(format!("{}: bad utterance id", path.display())))?;
        out.push((id, read_features(&mut r)?));
    }
    Ok(out)
}

/// `id\ttranscript` lines.
pub fn write_utterance_list(path: &Path, items: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    for (id, t) in items {
        s.push_str(id);
        s.push('\t');
        s.push_str(t);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_utterance_list(path: &Path) -> Result<Vec<(String, String)>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| PipelineError::Data(format!("{}: malformed line {l:?}", path.display())))
        })
        .collect()
}

/// One value per line, full precision.
pub fn write_priors(path: &Path, priors: &[f64]) -> Result<()> {
    let s: String = priors.iter().map(|p| format!("{p:e}\n")).collect();
    fs::write(path, s)?;
    Ok(())
}

pub fn read_priors(path: &Path) -> Result<Vec<f64>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| PipelineError::Data(format!("{}: bad prior {l:?}", path.display())))
        })
        .collect()
}

/// Record of one stage run. Holds no timestamps so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub workers: usize,
    /// Digest per input file (work-dir relative where possible).
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn path(work: &WorkDir, stage: Stage) -> PathBuf {
        work.root.join("manifests").join(format!("{}.json", stage.name()))
    }

    pub fn write(&self, work: &WorkDir) -> Result<PathBuf> {
        let stage = Stage::parse(&self.stage).expect("manifest names a stage");
        let p = Self::path(work, stage);
        fs::create_dir_all(p.parent().expect("manifest dir"))?;
        fs::write(&p, serde_json::to_string_pretty(self).expect("manifest serializes") + "\n")?;
        Ok(p)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
    }
}

/// Key used in manifests: relative to the work dir when inside it, else
/// relative to `base` (the config directory) when inside that.
pub fn manifest_key(work: &WorkDir, base: &Path, p: &Path) -> String {
    let rel = match p.strip_prefix(&work.root) {
        Ok(r) => r.to_path_buf(),
        Err(_) => match p.strip_prefix(base) {
            Ok(r) => Path::new("@config").join(r),
            Err(_) => p.to_path_buf(),
        },
    };
    rel.to_string_lossy().replace('\\', "/")
}
