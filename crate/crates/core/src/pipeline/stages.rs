//! Stage implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::artifacts::{
    manifest_key, read_feature_archive, read_priors, read_utterance_list, sha256_file, write_feature_archive,
    write_priors, write_utterance_list, Artifact, RunManifest, WorkDir,
};
use super::{LoadedConfig, ModelChoice, PipelineConfig, PipelineError, Result, Stage};
use crate::alignment::{AlignmentSet, FrameAlignment, Target};
use crate::analysis::{agreement_score, confusion_matrix, emit_heatmap, AgreementConfig, SymbolFilter};
use crate::corpus::{augment_noise, load_dataset, normalize_transcript, read_wav, utterance_rng, AudioSegment, NoiseProfile};
use crate::decoder::{
    beam_decode, transliterated_wer_counts, wer_counts, DecodeGraph, ErrorCounts, NGramLm, TransliterationMap,
};
use crate::features::{log_mel, plp_with_deltas, stack_downsample, FeatureMatrix};
use crate::hmm_gmm::{
    flat_start_segment, read_model, select_subset, train_from_flat_start, viterbi_align, write_model, HmmError,
};
use crate::lexicon::{build_inventory, filter_utterances, transcript_to_targets, GraphemeInventory, GraphemicLexicon, SymbolId};
use crate::neural_am::{
    label_priors, neural_align, read_checkpoint, train_ce, write_checkpoint, write_loss_trace, NeuralError, RecurrentAm,
};
use crate::synthetic::generate_synthetic;

const AUG_MARK: &str = "~aug";

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub manifest: PathBuf,
}

struct Ctx<'a> {
    loaded: &'a LoadedConfig,
    cfg: &'a PipelineConfig,
    work: WorkDir,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl<'a> Ctx<'a> {
    fn new(loaded: &'a LoadedConfig) -> Self {
        Self {
            loaded,
            cfg: &loaded.config,
            work: WorkDir::new(loaded.work_dir()),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn record(&mut self, p: &Path) -> Result<()> {
        let key = manifest_key(&self.work, &self.loaded.base_dir, p);
        self.inputs.insert(key, sha256_file(p)?);
        Ok(())
    }

    fn input(&mut self, a: Artifact) -> Result<PathBuf> {
        let p = self.work.input(a)?;
        self.record(&p)?;
        Ok(p)
    }

    /// A configured file outside the work dir.
    fn external(&mut self, p: &Path, what: &str) -> Result<PathBuf> {
        let p = self.loaded.resolve(p);
        if !p.is_file() {
            return Err(PipelineError::Data(format!("{what} {} not found", p.display())));
        }
        self.record(&p)?;
        Ok(p)
    }

    fn output(&mut self, a: Artifact) -> Result<PathBuf> {
        let p = self.work.output(a)?;
        self.outputs.push(p.clone());
        Ok(p)
    }

    fn finish(self, stage: Stage) -> Result<StageOutcome> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            outputs.insert(manifest_key(&self.work, &self.loaded.base_dir, p), sha256_file(p)?);
        }
        let manifest = RunManifest {
            stage: stage.name().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            workers: self.cfg.workers,
            inputs: self.inputs,
            outputs,
        };
        let path = manifest.write(&self.work)?;
        Ok(StageOutcome { stage, manifest: path })
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))
}

/// Runs one stage inside a pool of `workers` threads.
pub fn run_stage(loaded: &LoadedConfig, stage: Stage) -> Result<StageOutcome> {
    thread_pool(loaded.config.workers)?.install(|| run_in_pool(loaded, stage))
}

/// Runs stages in order, stopping at the first failure.
pub fn run_stages(loaded: &LoadedConfig, stages: &[Stage]) -> Result<Vec<StageOutcome>> {
    let pool = thread_pool(loaded.config.workers)?;
    pool.install(|| stages.iter().map(|&s| run_in_pool(loaded, s)).collect())
}

fn run_in_pool(loaded: &LoadedConfig, stage: Stage) -> Result<StageOutcome> {
    let start = Instant::now();
    info!("stage {stage}: start");
    let mut ctx = Ctx::new(loaded);
    match stage {
        Stage::Synth => synth(&mut ctx)?,
        Stage::Prep => prep(&mut ctx)?,
        Stage::TrainGmm => train_gmm(&mut ctx)?,
        Stage::Align => align(&mut ctx)?,
        Stage::TrainAm => train_am(&mut ctx)?,
        Stage::Realign => realign(&mut ctx)?,
        Stage::TrainLm => train_lm(&mut ctx)?,
        Stage::Decode => decode(&mut ctx)?,
        Stage::Score => score(&mut ctx)?,
        Stage::Analyze => analyze(&mut ctx)?,
    }
    let out = ctx.finish(stage)?;
    info!("stage {stage}: done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(out)
}

fn synth(ctx: &mut Ctx) -> Result<()> {
    let dir = ctx.loaded.resolve(&ctx.cfg.paths.synthetic_dir);
    let files = generate_synthetic(&ctx.cfg.synthetic, &ctx.cfg.features, ctx.cfg.seed, &dir)?;
    ctx.outputs.extend([
        files.train_manifest,
        files.test_manifest,
        files.graphemic_truth,
        files.phonemic_truth,
        files.pronunciations,
    ]);
    Ok(())
}

fn stacked(seg: &AudioSegment, cfg: &PipelineConfig) -> Result<FeatureMatrix> {
    let base = log_mel(seg, &cfg.features)?;
    Ok(stack_downsample(&base, cfg.stacking.left_context, cfg.stacking.rate_factor)?)
}

fn load_noise_bank(ctx: &mut Ctx) -> Result<NoiseProfile> {
    let aug = &ctx.cfg.augment;
    let list = ctx
        .cfg
        .paths
        .noise_list
        .clone()
        .ok_or_else(|| PipelineError::Config("augment.copies > 0 needs paths.noise_list".into()))?;
    let list = ctx.external(&list, "noise list")?;
    let base = list.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut bank = Vec::new();
    for line in fs::read_to_string(&list)?.lines().filter(|l| !l.trim().is_empty()) {
        let p = base.join(line.trim());
        let (samples, sample_rate) = read_wav(&p)?;
        bank.push(AudioSegment {
            id: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            samples,
            sample_rate,
            transcript: String::new(),
        });
    }
    if bank.is_empty() {
        return Err(PipelineError::Data(format!("noise list {} is empty", list.display())));
    }
    Ok(NoiseProfile::new(bank, aug.snr_low, aug.snr_high, aug.snr_mean)?)
}

/// Digest over the audio files of a manifest, in manifest order.
fn audio_digest(segments: &[AudioSegment]) -> String {
    let mut h = Sha256::new();
    for s in segments {
        h.update(s.id.as_bytes());
        for v in &s.samples {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn prep(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let train_manifest = ctx.external(&cfg.paths.train_manifest, "training manifest")?;
    let test_manifest = ctx.external(&cfg.paths.test_manifest, "test manifest")?;
    let train = load_dataset(&train_manifest)?;
    let test = load_dataset(&test_manifest)?;
    ctx.inputs.insert("audio:train".into(), audio_digest(&train));
    ctx.inputs.insert("audio:test".into(), audio_digest(&test));

    let inventory = build_inventory(train.iter().map(|s| s.transcript.as_str()), &cfg.lexicon)?;
    let (train, report) = filter_utterances(train, &inventory);
    if report.dropped > 0 {
        warn!("dropped {} training utterances with graphemes outside the inventory", report.dropped);
    }
    if train.is_empty() {
        return Err(PipelineError::Data("no training utterances left after filtering".into()));
    }
    let lexicon = GraphemicLexicon::from_transcripts(train.iter().map(|s| s.transcript.as_str()), &inventory)?;
    info!(
        "prep: {} training utterances, {} symbols, {} words",
        train.len(),
        inventory.len(),
        lexicon.len()
    );

    let gmm_feats: Vec<(String, FeatureMatrix)> = train
        .par_iter()
        .map(|s| Ok((s.id.clone(), plp_with_deltas(s, &cfg.features)?)))
        .collect::<Result<_>>()?;

    let noise = if cfg.augment.copies > 0 {
        Some(load_noise_bank(ctx)?)
    } else {
        None
    };
    let am_feats: Vec<Vec<(String, FeatureMatrix)>> = train
        .par_iter()
        .map(|s| {
            let mut out = vec![(s.id.clone(), stacked(s, cfg)?)];
            if let Some(profile) = &noise {
                for k in 1..=cfg.augment.copies {
                    let id = format!("{}{AUG_MARK}{k}", s.id);
                    let mut rng = utterance_rng(cfg.seed, &id);
                    let n = &profile.noise_bank[rng.random_range(0..profile.noise_bank.len())];
                    let snr = profile.sample_snr(&mut rng);
                    let noisy = augment_noise(s, n, snr)?;
                    out.push((id, stacked(&noisy, cfg)?));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let am_feats: Vec<(String, FeatureMatrix)> = am_feats.into_iter().flatten().collect();
    let test_feats: Vec<(String, FeatureMatrix)> = test
        .par_iter()
        .map(|s| Ok((s.id.clone(), stacked(s, cfg)?)))
        .collect::<Result<_>>()?;

    let mut w = BufWriter::new(fs::File::create(ctx.output(Artifact::Inventory)?)?);
    inventory.write_text(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(ctx.output(Artifact::Lexicon)?)?);
    lexicon.write_text(&mut w)?;
    w.flush()?;
    let list = |v: &[AudioSegment]| -> Vec<(String, String)> {
        v.iter().map(|s| (s.id.clone(), s.transcript.clone())).collect()
    };
    write_utterance_list(&ctx.output(Artifact::TrainList)?, &list(&train))?;
    write_utterance_list(&ctx.output(Artifact::TestList)?, &list(&test))?;
    fs::write(
        ctx.output(Artifact::FilterReport)?,
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    write_feature_archive(&ctx.output(Artifact::GmmFeatures)?, &gmm_feats)?;
    write_feature_archive(&ctx.output(Artifact::AmFeatures)?, &am_feats)?;
    write_feature_archive(&ctx.output(Artifact::TestFeatures)?, &test_feats)?;
    Ok(())
}

fn read_inventory(ctx: &mut Ctx) -> Result<GraphemeInventory> {
    let p = ctx.input(Artifact::Inventory)?;
    Ok(GraphemeInventory::read_text(BufReader::new(fs::File::open(p)?))?)
}

fn skippable(inv: &GraphemeInventory, allow: bool) -> Option<SymbolId> {
    if allow {
        inv.sil()
    } else {
        None
    }
}

/// Training ids with their target sequences, in list order.
fn training_targets(ctx: &mut Ctx, inv: &GraphemeInventory) -> Result<BTreeMap<String, Vec<Target>>> {
    let list = read_utterance_list(&ctx.input(Artifact::TrainList)?)?;
    list.into_iter()
        .map(|(id, t)| Ok((id, transcript_to_targets(&t, inv, ctx.cfg.lexicon.sil)?)))
        .collect()
}

fn write_alignments(path: &Path, set: &AlignmentSet) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    set.write_text(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_alignments(path: &Path, symbols: Option<&[String]>) -> Result<AlignmentSet> {
    Ok(AlignmentSet::read_text(BufReader::new(fs::File::open(path)?), symbols)?)
}

fn train_gmm(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let inv = read_inventory(ctx)?;
    let targets = training_targets(ctx, &inv)?;
    let feats = read_feature_archive(&ctx.input(Artifact::GmmFeatures)?)?;
    let ids: Vec<&str> = feats.iter().map(|(id, _)| id.as_str()).collect();
    let subset = select_subset(&ids, cfg.gmm.subsample, cfg.seed);

    let s_per = cfg.gmm.states_per_symbol;
    let (mut sub_feats, mut sub_targets, mut flat, mut used) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &i in &subset {
        let (id, fm) = &feats[i];
        let t = targets
            .get(id)
            .ok_or_else(|| PipelineError::Data(format!("utterance {id} missing from the training list")))?;
        match flat_start_segment(fm.frames(), t, s_per, fm.frame_shift_ms) {
            Ok(a) => {
                flat.push(a);
                sub_feats.push(fm.clone());
                sub_targets.push(t.clone());
                used.push(id.clone());
            }
            Err(HmmError::InsufficientFrames { needed, got }) => {
                warn!("flat start: {id} has {got} frames for {needed} states, skipping")
            }
            Err(e) => return Err(e.into()),
        }
    }
    if flat.is_empty() {
        return Err(PipelineError::Data("flat start: no usable utterances in the subset".into()));
    }
    info!("train-gmm: flat start on {} of {} utterances", flat.len(), feats.len());
    let outcome = train_from_flat_start(
        inv.symbols(),
        &sub_feats,
        &sub_targets,
        flat,
        skippable(&inv, cfg.gmm.skip_sil),
        &cfg.gmm,
    )?;

    let mut w = BufWriter::new(fs::File::create(ctx.output(Artifact::GmmModel)?)?);
    write_model(&mut w, &outcome.model)?;
    w.flush()?;
    fs::write(ctx.output(Artifact::GmmSubset)?, used.join("\n") + "\n")?;
    let mut csv = String::from("phase,mixtures,iteration,log_likelihood\n");
    for trace in &outcome.em {
        for (mixtures, lls) in &trace.stages {
            for (i, ll) in lls.iter().enumerate() {
                csv.push_str(&format!("em,{mixtures},{i},{ll:e}\n"));
            }
        }
    }
    for (i, (mixtures, s)) in outcome.realign.iter().enumerate() {
        csv.push_str(&format!("realign,{mixtures},{i},{s:e}\n"));
    }
    fs::write(ctx.output(Artifact::EmTrace)?, csv)?;
    Ok(())
}

fn align(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let model = read_model(BufReader::new(fs::File::open(ctx.input(Artifact::GmmModel)?)?))?;
    let inv = read_inventory(ctx)?;
    let targets = training_targets(ctx, &inv)?;
    let feats = read_feature_archive(&ctx.input(Artifact::GmmFeatures)?)?;
    let skip = skippable(&inv, cfg.gmm.skip_sil);
    let aligned: Vec<Option<(String, FrameAlignment)>> = feats
        .par_iter()
        .map(|(id, fm)| {
            let t = &targets[id];
            match viterbi_align(&model, fm, t, skip) {
                Ok((a, _)) => {
                    a.validate(t, model.states_per_symbol, skip)?;
                    Ok(Some((id.clone(), a)))
                }
                Err(HmmError::InsufficientFrames { needed, got }) => {
                    warn!("align: {id} has {got} frames for {needed} states, skipping");
                    Ok(None)
                }
                Err(e) => Err(e.into()),
            }
        })
        .collect::<Result<_>>()?;
    let mut set = AlignmentSet::new(inv.symbols().to_vec());
    set.utterances.extend(aligned.into_iter().flatten());
    if set.utterances.is_empty() {
        return Err(PipelineError::Data("align: no utterance could be aligned".into()));
    }
    write_alignments(&ctx.output(Artifact::GmmAlignments)?, &set)
}

fn base_id(id: &str) -> &str {
    id.split(AUG_MARK).next().unwrap_or(id)
}

/// Transfers an alignment to the acoustic model's label rate and label set.
fn bridge(ali: &FrameAlignment, label_states: usize, factor: usize) -> FrameAlignment {
    let labels = if label_states == 1 {
        ali.collapse_states()
    } else {
        ali.clone()
    };
    if factor > 1 {
        labels.downsample(factor)
    } else {
        labels
    }
}

/// Fresh model trained on `aligns` (keyed by clean id; augmented copies reuse
/// the clean alignment). Writes checkpoint, priors and loss trace.
fn fit_acoustic_model(
    ctx: &mut Ctx,
    inv: &GraphemeInventory,
    feats: Vec<(String, FeatureMatrix)>,
    aligns: &BTreeMap<String, FrameAlignment>,
    outputs: [Artifact; 3],
) -> Result<()> {
    let cfg = ctx.cfg;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut clean = Vec::new();
    for (id, fm) in feats {
        let Some(a) = aligns.get(base_id(&id)) else {
            continue;
        };
        if a.len() != fm.frames() {
            return Err(PipelineError::Data(format!(
                "{id}: {} alignment frames vs {} feature frames",
                a.len(),
                fm.frames()
            )));
        }
        if base_id(&id) == id {
            clean.push(a.clone());
        }
        xs.push(fm);
        ys.push(a.clone());
    }
    if xs.is_empty() {
        return Err(PipelineError::Data("no aligned training utterances".into()));
    }
    let mut am = RecurrentAm::new(&cfg.am, xs[0].dims(), inv.symbols().to_vec());
    am.fit_normalization(&xs);
    info!("training acoustic model on {} utterances", xs.len());
    let (am, trace) = match train_ce(am, &xs, &ys, &cfg.train) {
        Ok(r) => r,
        Err(NeuralError::NonFinite { step, last_good }) => {
            let p = ctx.work.root.join(outputs[0].relative()).with_extension("last_good.garm");
            fs::create_dir_all(p.parent().expect("checkpoint dir"))?;
            write_checkpoint(BufWriter::new(fs::File::create(&p)?), &last_good)?;
            return Err(PipelineError::Numerical(format!(
                "non-finite loss at step {step}; last good model saved to {}",
                p.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let priors = label_priors(&am, &clean)?;
    let mut w = BufWriter::new(fs::File::create(ctx.output(outputs[0])?)?);
    write_checkpoint(&mut w, &am)?;
    w.flush()?;
    write_priors(&ctx.output(outputs[1])?, &priors)?;
    let mut w = BufWriter::new(fs::File::create(ctx.output(outputs[2])?)?);
    write_loss_trace(&mut w, &trace)?;
    w.flush()?;
    Ok(())
}

fn train_am(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let inv = read_inventory(ctx)?;
    let set = read_alignments(&ctx.input(Artifact::GmmAlignments)?, Some(inv.symbols()))?;
    let feats = read_feature_archive(&ctx.input(Artifact::AmFeatures)?)?;
    let aligns: BTreeMap<String, FrameAlignment> = set
        .utterances
        .iter()
        .map(|(id, a)| (id.clone(), bridge(a, cfg.am.label_states, cfg.stacking.rate_factor)))
        .collect();
    fit_acoustic_model(
        ctx,
        &inv,
        feats,
        &aligns,
        [Artifact::AmCheckpoint, Artifact::AmPriors, Artifact::AmLoss],
    )
}

fn load_am(ctx: &mut Ctx, choice: ModelChoice) -> Result<(RecurrentAm, Vec<f64>)> {
    let (ckpt, priors) = match choice {
        ModelChoice::Initial => (Artifact::AmCheckpoint, Artifact::AmPriors),
        ModelChoice::Realigned => (Artifact::RealignedCheckpoint, Artifact::RealignedPriors),
    };
    let am = read_checkpoint(BufReader::new(fs::File::open(ctx.input(ckpt)?)?))?;
    let priors = read_priors(&ctx.input(priors)?)?;
    if priors.len() != am.n_labels() {
        return Err(PipelineError::Data(format!(
            "{} priors for {} labels",
            priors.len(),
            am.n_labels()
        )));
    }
    Ok((am, priors))
}

fn realign(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let inv = read_inventory(ctx)?;
    let targets = training_targets(ctx, &inv)?;
    let (am, priors) = load_am(ctx, ModelChoice::Initial)?;
    let feats = read_feature_archive(&ctx.input(Artifact::AmFeatures)?)?;
    let skip = skippable(&inv, cfg.gmm.skip_sil);
    let aligned: Vec<Option<(String, FrameAlignment)>> = feats
        .par_iter()
        .filter(|(id, _)| base_id(id) == id)
        .map(|(id, fm)| {
            let Some(t) = targets.get(id) else {
                return Ok(None);
            };
            match neural_align(&am, &priors, fm, t, cfg.realign.kappa, skip) {
                Ok(a) => Ok(Some((id.clone(), a))),
                Err(NeuralError::InsufficientFrames { needed, got }) => {
                    warn!("realign: {id} has {got} frames for {needed} labels, skipping");
                    Ok(None)
                }
                Err(e) => Err(e.into()),
            }
        })
        .collect::<Result<_>>()?;
    let mut set = AlignmentSet::new(inv.symbols().to_vec());
    set.utterances.extend(aligned.into_iter().flatten());
    if set.utterances.is_empty() {
        return Err(PipelineError::Data("realign: no utterance could be aligned".into()));
    }
    write_alignments(&ctx.output(Artifact::CeAlignments)?, &set)?;
    fit_acoustic_model(
        ctx,
        &inv,
        feats,
        &set.utterances,
        [
            Artifact::RealignedCheckpoint,
            Artifact::RealignedPriors,
            Artifact::RealignedLoss,
        ],
    )
}

fn train_lm(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let mut sentences: Vec<String> = read_utterance_list(&ctx.input(Artifact::TrainList)?)?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    if let Some(extra) = cfg.paths.lm_text.clone() {
        let p = ctx.external(&extra, "LM text")?;
        sentences.extend(
            fs::read_to_string(p)?
                .lines()
                .map(normalize_transcript)
                .filter(|s| !s.is_empty()),
        );
    }
    let lm = NGramLm::train(sentences.iter().map(String::as_str), cfg.lm.order)?;
    let mut w = BufWriter::new(fs::File::create(ctx.output(Artifact::LanguageModel)?)?);
    lm.write_arpa(&mut w)?;
    w.flush()?;
    Ok(())
}

fn decode(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let inv = read_inventory(ctx)?;
    let lexicon = GraphemicLexicon::read_text(BufReader::new(fs::File::open(ctx.input(Artifact::Lexicon)?)?))?;
    let lm = NGramLm::read_arpa(BufReader::new(fs::File::open(ctx.input(Artifact::LanguageModel)?)?))?;
    let feats = read_feature_archive(&ctx.input(Artifact::TestFeatures)?)?;
    for &choice in &cfg.evaluate.models {
        let (am, priors) = load_am(ctx, choice)?;
        let graph = DecodeGraph::new(&lexicon, &inv, &lm, am.label_states)?;
        let hyps: Vec<(String, String)> = feats
            .par_iter()
            .map(|(id, fm)| {
                let r = beam_decode(&am, &priors, &lm, &graph, fm, &cfg.decoder)?;
                Ok((id.clone(), r.words.join(" ")))
            })
            .collect::<Result<_>>()?;
        write_utterance_list(&ctx.output(Artifact::Hypotheses(choice))?, &hyps)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelScore {
    pub utterances: usize,
    pub ref_words: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub wer: f64,
    pub transliterated_wer: f64,
    /// Utterances with an empty reference but a non-empty hypothesis.
    pub empty_reference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub models: BTreeMap<String, ModelScore>,
    /// Frame-level symbol accuracy of training alignments against the
    /// configured reference alignments.
    pub alignment_accuracy: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct UtteranceRow<'a> {
    id: &'a str,
    ref_words: usize,
    substitutions: usize,
    deletions: usize,
    insertions: usize,
    wer: f64,
    transliterated_errors: usize,
    transliterated_wer: f64,
    hypothesis: &'a str,
}

#[derive(Serialize)]
struct CorpusRow<'a> {
    model: &'a str,
    utterances: usize,
    ref_words: usize,
    substitutions: usize,
    deletions: usize,
    insertions: usize,
    wer: f64,
    transliterated_wer: f64,
}

fn csv_error(e: csv::Error) -> PipelineError {
    PipelineError::Io(std::io::Error::other(e))
}

/// Fraction of frames whose symbol matches the reference. The reference is
/// brought to the hypothesis frame rate by majority vote first; symbols are
/// compared by name.
pub fn alignment_accuracy(reference: &AlignmentSet, hyp: &AlignmentSet) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for (id, h) in &hyp.utterances {
        let Some(r) = reference.utterances.get(id) else {
            continue;
        };
        let ratio = h.frame_shift_ms / r.frame_shift_ms;
        let factor = ratio.round() as usize;
        if factor == 0 || (ratio - factor as f64).abs() > 1e-6 {
            return Err(PipelineError::Data(format!(
                "{id}: frame shift {} ms is not a multiple of {} ms",
                h.frame_shift_ms, r.frame_shift_ms
            )));
        }
        let r = if factor > 1 { r.downsample(factor) } else { r.clone() };
        let n = r.len().max(h.len());
        total += n;
        correct += r
            .labels
            .iter()
            .zip(&h.labels)
            .filter(|(a, b)| reference.symbol_name(a.symbol) == hyp.symbol_name(b.symbol))
            .count();
    }
    if total == 0 {
        return Err(PipelineError::Data("no utterances shared with the reference alignments".into()));
    }
    Ok(correct as f64 / total as f64)
}

fn score(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let refs: BTreeMap<String, String> = read_utterance_list(&ctx.input(Artifact::TestList)?)?.into_iter().collect();
    let map = match cfg.paths.transliteration.clone() {
        Some(p) => {
            let p = ctx.external(&p, "transliteration map")?;
            TransliterationMap::read_tsv(BufReader::new(fs::File::open(p)?))?
        }
        None => TransliterationMap::new(),
    };
    let mut report = ScoreReport {
        models: BTreeMap::new(),
        alignment_accuracy: BTreeMap::new(),
    };
    let mut corpus = csv::Writer::from_writer(Vec::new());
    for &choice in &cfg.evaluate.models {
        let hyps = read_utterance_list(&ctx.input(Artifact::Hypotheses(choice))?)?;
        let mut rows = csv::Writer::from_writer(Vec::new());
        let (mut plain, mut translit) = (ErrorCounts::default(), ErrorCounts::default());
        let mut empty_reference = 0;
        for (id, hyp) in &hyps {
            let reference = refs
                .get(id)
                .ok_or_else(|| PipelineError::Data(format!("hypothesis for unknown utterance {id}")))?;
            let h: Vec<&str> = hyp.split_whitespace().collect();
            let r: Vec<&str> = reference.split_whitespace().collect();
            let c = wer_counts(&h, &r);
            let t = transliterated_wer_counts(&h, &r, &map);
            if c.empty_reference() {
                empty_reference += 1;
            }
            rows.serialize(UtteranceRow {
                id,
                ref_words: c.ref_words,
                substitutions: c.substitutions,
                deletions: c.deletions,
                insertions: c.insertions,
                wer: c.rate(),
                transliterated_errors: t.errors(),
                transliterated_wer: t.rate(),
                hypothesis: hyp,
            })
            .map_err(csv_error)?;
            plain.add(&c);
            translit.add(&t);
        }
        let bytes = rows.into_inner().map_err(|e| PipelineError::Io(e.into_error()))?;
        fs::write(ctx.output(Artifact::UtteranceScores(choice))?, bytes)?;
        let s = ModelScore {
            utterances: hyps.len(),
            ref_words: plain.ref_words,
            substitutions: plain.substitutions,
            deletions: plain.deletions,
            insertions: plain.insertions,
            wer: plain.rate(),
            transliterated_wer: translit.rate(),
            empty_reference,
        };
        corpus
            .serialize(CorpusRow {
                model: choice.name(),
                utterances: s.utterances,
                ref_words: s.ref_words,
                substitutions: s.substitutions,
                deletions: s.deletions,
                insertions: s.insertions,
                wer: s.wer,
                transliterated_wer: s.transliterated_wer,
            })
            .map_err(csv_error)?;
        info!("score {}: WER {:.4}, transliterated {:.4}", choice.name(), s.wer, s.transliterated_wer);
        report.models.insert(choice.name().to_string(), s);
    }
    let bytes = corpus.into_inner().map_err(|e| PipelineError::Io(e.into_error()))?;
    fs::write(ctx.output(Artifact::CorpusScores)?, bytes)?;

    if let Some(truth) = cfg.paths.truth_alignments.clone() {
        let truth = read_alignments(&ctx.external(&truth, "reference alignments")?, None)?;
        let mut sets = vec![("gmm", Artifact::GmmAlignments)];
        if cfg.evaluate.models.contains(&ModelChoice::Realigned) {
            sets.push(("ce", Artifact::CeAlignments));
        }
        for (name, artifact) in sets {
            let hyp = read_alignments(&ctx.input(artifact)?, None)?;
            let acc = alignment_accuracy(&truth, &hyp)?;
            info!("score: {name} alignment accuracy {acc:.4}");
            report.alignment_accuracy.insert(name.to_string(), acc);
        }
    }
    fs::write(
        ctx.output(Artifact::ScoreReport)?,
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    Ok(())
}

/// Brings two alignment sets to the coarser of their frame rates.
fn common_rate(a: AlignmentSet, b: AlignmentSet) -> Result<(AlignmentSet, AlignmentSet)> {
    let shift = |s: &AlignmentSet| s.utterances.values().next().map(|x| x.frame_shift_ms);
    let (Some(sa), Some(sb)) = (shift(&a), shift(&b)) else {
        return Ok((a, b));
    };
    let coarsen = |set: AlignmentSet, from: f64, to: f64| -> Result<AlignmentSet> {
        let ratio = to / from;
        let factor = ratio.round() as usize;
        if factor == 0 || (ratio - factor as f64).abs() > 1e-6 {
            return Err(PipelineError::Data(format!(
                "cannot bridge {from} ms and {to} ms alignments"
            )));
        }
        let mut out = AlignmentSet::new(set.symbols.clone());
        for (id, al) in set.utterances {
            out.utterances.insert(id, al.downsample(factor));
        }
        Ok(out)
    };
    if (sa - sb).abs() < 1e-9 {
        Ok((a, b))
    } else if sa < sb {
        Ok((coarsen(a, sa, sb)?, b))
    } else {
        Ok((a, coarsen(b, sb, sa)?))
    }
}

fn analyze(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let settings = &cfg.analysis;
    let phonemic_path = cfg
        .paths
        .phonemic_alignments
        .clone()
        .ok_or_else(|| PipelineError::Config("analyze needs paths.phonemic_alignments".into()))?;
    let phonemic = read_alignments(&ctx.external(&phonemic_path, "phonemic alignments")?, None)?;
    let graphemic_artifact = match settings.alignments {
        ModelChoice::Initial => Artifact::GmmAlignments,
        ModelChoice::Realigned => Artifact::CeAlignments,
    };
    let graphemic = read_alignments(&ctx.input(graphemic_artifact)?, None)?;
    let (graphemic, phonemic) = common_rate(graphemic, phonemic)?;
    let cm = confusion_matrix(&graphemic, &phonemic)?;
    let report = agreement_score(
        &cm,
        &AgreementConfig {
            threshold: settings.threshold,
            exclude_reserved: settings.exclude_reserved,
        },
    )?;
    info!("analyze: agreement score {:.4}", report.score);

    let mut counts = String::from("phoneme\tgrapheme\tframes\n");
    for ((p, g), &c) in cm.counts.indexed_iter() {
        if c > 0 {
            counts.push_str(&format!("{}\t{}\t{c}\n", cm.phonemes[p], cm.graphemes[g]));
        }
    }
    fs::write(ctx.output(Artifact::ConfusionCounts)?, counts)?;
    fs::write(ctx.output(Artifact::Agreement)?, report.to_json() + "\n")?;
    let non_empty = |v: &Vec<String>| (!v.is_empty()).then(|| v.clone());
    let filter = SymbolFilter {
        graphemes: non_empty(&settings.heatmap_graphemes),
        phonemes: non_empty(&settings.heatmap_phonemes),
    };
    let stem = ctx.work.output(Artifact::Heatmap)?;
    let (csv, svg) = emit_heatmap(&cm, &stem, Some(&filter))?;
    ctx.outputs.extend([csv, svg]);
    Ok(())
}
