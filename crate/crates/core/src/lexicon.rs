//! Grapheme inventory and graphemic lexicon, built from transcripts alone.
//!
//! A grapheme is an extended grapheme cluster, so Indic consonant+vowel-sign
//! sequences count as one written unit. Word boundaries are modeled by the
//! reserved `<space>` symbol; `<sil>` absorbs non-speech at utterance edges.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_properties::{GeneralCategoryGroup, UnicodeEmoji, UnicodeGeneralCategory};
use unicode_segmentation::UnicodeSegmentation;

use crate::alignment::Target;
use crate::corpus::AudioSegment;

pub const SPACE: &str = "<space>";
pub const SIL: &str = "<sil>";

pub fn is_reserved(symbol: &str) -> bool {
    symbol == SPACE || symbol == SIL
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("no transcripts to build an inventory from")]
    EmptyCorpus,
    #[error("empty transcript")]
    EmptyTranscript,
    #[error("grapheme {0:?} is not in the inventory")]
    OutOfInventory(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LexiconError>;

/// Index into a symbol table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SymbolId(pub u32);

impl SymbolId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SymbolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Which grapheme classes are treated as having no acoustic realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExclusionClasses {
    pub emoji: bool,
    pub control: bool,
    pub punctuation: bool,
    /// Punctuation characters retained despite `punctuation`.
    pub keep: String,
}

impl Default for ExclusionClasses {
    fn default() -> Self {
        Self {
            emoji: true,
            control: true,
            punctuation: true,
            keep: "'-".into(),
        }
    }
}

impl ExclusionClasses {
    pub fn excludes(&self, grapheme: &str) -> bool {
        let Some(first) = grapheme.chars().next() else {
            return true;
        };
        if self.emoji && is_emoji_cluster(grapheme) {
            return true;
        }
        if self.control && grapheme.chars().all(|c| c.general_category_group() == GeneralCategoryGroup::Other) {
            return true;
        }
        self.punctuation
            && first.general_category_group() == GeneralCategoryGroup::Punctuation
            && !self.keep.contains(first)
    }
}

fn is_emoji_cluster(g: &str) -> bool {
    g.chars().any(|c| {
        unicode_properties::emoji::is_regional_indicator(c)
            || unicode_properties::emoji::is_emoji_presentation_selector(c)
            || (c.is_emoji_char() && c.general_category_group() == GeneralCategoryGroup::Symbol)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InventoryConfig {
    pub min_count: u64,
    pub exclusions: ExclusionClasses,
    /// Add the `<sil>` symbol and pad transcripts with it.
    pub sil: bool,
}

impl Default for InventoryConfig {
    fn default() -> Self {
        Self {
            min_count: 10,
            exclusions: ExclusionClasses::default(),
            sil: true,
        }
    }
}

/// Splits a transcript into words of grapheme clusters.
pub fn words_as_graphemes(transcript: &str) -> Vec<Vec<&str>> {
    transcript
        .split_whitespace()
        .map(|w| w.graphemes(true).collect())
        .collect()
}

/// Ordered symbol table with training counts. Reserved symbols come first,
/// then graphemes in code-point order.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphemeInventory {
    symbols: Vec<String>,
    counts: Vec<u64>,
    index: BTreeMap<String, SymbolId>,
}

impl GraphemeInventory {
    fn from_parts(symbols: Vec<String>, counts: Vec<u64>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), SymbolId(i as u32)))
            .collect();
        Self { symbols, counts, index }
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of non-reserved graphemes.
    pub fn grapheme_count(&self) -> usize {
        self.symbols.iter().filter(|s| !is_reserved(s)).count()
    }

    pub fn id(&self, symbol: &str) -> Option<SymbolId> {
        self.index.get(symbol).copied()
    }

    pub fn name(&self, id: SymbolId) -> &str {
        &self.symbols[id.index()]
    }

    pub fn space(&self) -> SymbolId {
        self.id(SPACE).expect("inventory always holds <space>")
    }

    pub fn sil(&self) -> Option<SymbolId> {
        self.id(SIL)
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    /// True when every grapheme of `transcript` is in the inventory.
    pub fn covers(&self, transcript: &str) -> bool {
        words_as_graphemes(transcript)
            .iter()
            .flatten()
            .all(|g| self.contains(g) && !is_reserved(g))
    }

    /// `symbol\tcount` per line.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (s, c) in self.symbols.iter().zip(&self.counts) {
            writeln!(w, "{s}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut symbols = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parse_err = |reason: &str| LexiconError::Parse {
                line: i + 1,
                reason: reason.into(),
            };
            let (s, c) = line.split_once('\t').ok_or_else(|| parse_err("expected `symbol\\tcount`"))?;
            symbols.push(s.to_string());
            counts.push(c.parse().map_err(|_| parse_err("bad count"))?);
        }
        if symbols.iter().filter(|s| *s == SPACE).count() != 1 {
            return Err(LexiconError::Parse {
                line: 0,
                reason: "inventory must contain <space> exactly once".into(),
            });
        }
        Ok(Self::from_parts(symbols, counts))
    }
}

/// Enumerates graphemes observed in `transcripts`, keeping those seen at
/// least `min_count` times and not in an excluded class, plus the reserved
/// symbols.
pub fn build_inventory<'a, I>(transcripts: I, cfg: &InventoryConfig) -> Result<GraphemeInventory>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut boundaries = 0u64;
    let mut n_transcripts = 0usize;
    for t in transcripts {
        n_transcripts += 1;
        let words = words_as_graphemes(t);
        boundaries += words.len().saturating_sub(1) as u64;
        for g in words.into_iter().flatten() {
            *counts.entry(g).or_default() += 1;
        }
    }
    if n_transcripts == 0 {
        return Err(LexiconError::EmptyCorpus);
    }
    let mut symbols = Vec::new();
    let mut sym_counts = Vec::new();
    if cfg.sil {
        symbols.push(SIL.to_string());
        sym_counts.push(2 * n_transcripts as u64);
    }
    symbols.push(SPACE.to_string());
    sym_counts.push(boundaries);
    for (g, c) in counts {
        if c >= cfg.min_count && !cfg.exclusions.excludes(g) && !is_reserved(g) {
            symbols.push(g.to_string());
            sym_counts.push(c);
        }
    }
    Ok(GraphemeInventory::from_parts(symbols, sym_counts))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub retained: usize,
    pub dropped: usize,
    pub dropped_ids: Vec<String>,
}

/// Drops utterances whose transcripts contain graphemes outside the inventory.
pub fn filter_utterances(
    dataset: Vec<AudioSegment>,
    inventory: &GraphemeInventory,
) -> (Vec<AudioSegment>, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = Vec::with_capacity(dataset.len());
    for seg in dataset {
        if inventory.covers(&seg.transcript) {
            kept.push(seg);
        } else {
            report.dropped_ids.push(seg.id);
        }
    }
    report.retained = kept.len();
    report.dropped = report.dropped_ids.len();
    (kept, report)
}

/// Expands a transcript to its target sequence: the graphemes of each word
/// with `<space>` between words, optionally framed by `<sil>`.
pub fn transcript_to_targets(transcript: &str, inventory: &GraphemeInventory, sil_padding: bool) -> Result<Vec<Target>> {
    let words = words_as_graphemes(transcript);
    if words.is_empty() {
        return Err(LexiconError::EmptyTranscript);
    }
    let sil = if sil_padding { inventory.sil() } else { None };
    let mut out = Vec::new();
    if let Some(s) = sil {
        out.push(Target { symbol: s, word: None });
    }
    for (wi, word) in words.iter().enumerate() {
        if wi > 0 {
            out.push(Target {
                symbol: inventory.space(),
                word: None,
            });
        }
        for g in word {
            let id = inventory
                .id(g)
                .filter(|_| !is_reserved(g))
                .ok_or_else(|| LexiconError::OutOfInventory(g.to_string()))?;
            out.push(Target {
                symbol: id,
                word: Some(wi as u32),
            });
        }
    }
    if let Some(s) = sil {
        out.push(Target { symbol: s, word: None });
    }
    Ok(out)
}

pub fn transcript_to_symbols(transcript: &str, inventory: &GraphemeInventory, sil_padding: bool) -> Result<Vec<SymbolId>> {
    Ok(transcript_to_targets(transcript, inventory, sil_padding)?
        .into_iter()
        .map(|t| t.symbol)
        .collect())
}

/// word → grapheme sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphemicLexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl GraphemicLexicon {
    /// Collects every word of `transcripts`; all graphemes must be in the inventory.
    pub fn from_transcripts<'a, I>(transcripts: I, inventory: &GraphemeInventory) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut lex = Self::default();
        for t in transcripts {
            for word in t.split_whitespace() {
                lex.insert(word, inventory)?;
            }
        }
        Ok(lex)
    }

    pub fn insert(&mut self, word: &str, inventory: &GraphemeInventory) -> Result<()> {
        let graphemes: Vec<String> = word.graphemes(true).map(str::to_string).collect();
        if graphemes.is_empty() {
            return Err(LexiconError::EmptyTranscript);
        }
        if let Some(g) = graphemes.iter().find(|g| !inventory.contains(g) || is_reserved(g)) {
            return Err(LexiconError::OutOfInventory(g.clone()));
        }
        self.entries.insert(word.to_string(), graphemes);
        Ok(())
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<String>> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    /// `word\tg1 g2 …` per line.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (word, gs) in &self.entries {
            writeln!(w, "{word}\t{}", gs.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (word, gs) = line.split_once('\t').ok_or_else(|| LexiconError::Parse {
                line: i + 1,
                reason: "expected `word\\tg1 g2 …`".into(),
            })?;
            let gs: Vec<String> = gs.split(' ').filter(|s| !s.is_empty()).map(str::to_string).collect();
            if gs.is_empty() {
                return Err(LexiconError::Parse {
                    line: i + 1,
                    reason: "empty pronunciation".into(),
                });
            }
            entries.insert(word.to_string(), gs);
        }
        Ok(Self { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inv(transcripts: &[&str], min_count: u64) -> GraphemeInventory {
        let cfg = InventoryConfig {
            min_count,
            ..Default::default()
        };
        build_inventory(transcripts.iter().copied(), &cfg).unwrap()
    }

    #[test]
    fn threshold_met() {
        let t = vec!["aa"; 10];
        let i = inv(&t, 10);
        assert_eq!(i.symbols(), [SIL, SPACE, "a"]);
        assert_eq!(i.counts()[2], 20);
    }

    #[test]
    fn rare_grapheme_excluded() {
        let mut t = vec!["ab"; 10];
        t.extend(vec!["q"; 9]);
        let i = inv(&t, 10);
        assert!(!i.contains("q"));
        assert!(i.contains("a") && i.contains("b"));
    }

    #[test]
    fn emoji_excluded_despite_count() {
        let t = vec!["ok \u{1F600}"; 50];
        let i = inv(&t, 10);
        assert!(!i.contains("\u{1F600}"));
        assert!(i.contains("o"));
    }

    #[test]
    fn punctuation_rules() {
        let ex = ExclusionClasses::default();
        assert!(ex.excludes("!"));
        assert!(ex.excludes(","));
        assert!(!ex.excludes("'"));
        assert!(!ex.excludes("-"));
        assert!(!ex.excludes("7"));
        assert!(ex.excludes("\u{200B}"));
    }

    #[test]
    fn indic_clusters_are_single_graphemes() {
        // क + ि (vowel sign) is one cluster
        let words = words_as_graphemes("कि");
        assert_eq!(words, vec![vec!["कि"]]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            build_inventory(std::iter::empty(), &InventoryConfig::default()),
            Err(LexiconError::EmptyCorpus)
        ));
    }

    #[test]
    fn symbols_for_go_on() {
        let i = inv(&vec!["go on"; 10], 1);
        let syms = transcript_to_symbols("go on", &i, false).unwrap();
        let names: Vec<_> = syms.iter().map(|&s| i.name(s)).collect();
        assert_eq!(names, ["g", "o", SPACE, "o", "n"]);
        let padded = transcript_to_symbols("o", &i, true).unwrap();
        let names: Vec<_> = padded.iter().map(|&s| i.name(s)).collect();
        assert_eq!(names, [SIL, "o", SIL]);
        assert!(transcript_to_symbols("", &i, true).is_err());
        assert!(matches!(transcript_to_symbols("gz", &i, true), Err(LexiconError::OutOfInventory(_))));
    }

    fn seg(id: usize, t: &str) -> AudioSegment {
        AudioSegment {
            id: format!("u{id}"),
            samples: vec![0.0],
            sample_rate: 16000,
            transcript: t.into(),
        }
    }

    #[test]
    fn filter_counts_dropped() {
        let mut ds: Vec<_> = (0..93).map(|i| seg(i, "cat act")).collect();
        ds.extend((93..100).map(|i| seg(i, "quit")));
        let transcripts: Vec<String> = ds.iter().map(|s| s.transcript.clone()).collect();
        let i = inv(&transcripts.iter().map(String::as_str).collect::<Vec<_>>(), 10);
        assert!(!i.contains("q"));
        let (kept, report) = filter_utterances(ds, &i);
        assert_eq!(kept.len(), 93);
        assert_eq!(report.dropped, 7);
        assert_eq!(report.retained, 93);

        // fixed point: rebuilding from the filtered data changes nothing
        let again = inv(&kept.iter().map(|s| s.transcript.as_str()).collect::<Vec<_>>(), 10);
        assert_eq!(again.symbols(), i.symbols());
    }

    #[test]
    fn inventory_and_lexicon_round_trip() {
        let i = inv(&vec!["नमस्ते it's"; 12], 10);
        let mut buf = Vec::new();
        i.write_text(&mut buf).unwrap();
        assert_eq!(GraphemeInventory::read_text(&buf[..]).unwrap(), i);

        let lex = GraphemicLexicon::from_transcripts(["नमस्ते it's"], &i).unwrap();
        let mut buf = Vec::new();
        lex.write_text(&mut buf).unwrap();
        assert_eq!(GraphemicLexicon::read_text(&buf[..]).unwrap(), lex);
        assert_eq!(lex.get("it's").unwrap(), ["i", "t", "'", "s"]);
    }

    proptest! {
        #[test]
        fn joining_on_space_recovers_words(words in proptest::collection::vec("[a-e]{1,5}", 1..6)) {
            let transcript = words.join(" ");
            let i = inv(&vec!["abcde"; 10], 10);
            let syms = transcript_to_symbols(&transcript, &i, true).unwrap();
            let mut rebuilt = vec![String::new()];
            for s in syms {
                match i.name(s) {
                    SIL => {}
                    SPACE => rebuilt.push(String::new()),
                    g => rebuilt.last_mut().unwrap().push_str(g),
                }
            }
            prop_assert_eq!(rebuilt, words);
        }
    }
}
