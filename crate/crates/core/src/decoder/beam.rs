//! Frame-synchronous token passing over a grapheme prefix tree.
//!
//! A hypothesis spells its words grapheme by grapheme with `<space>`
//! between words and optional `<sil>` at both ends. Each symbol has
//! `label_states` left-to-right states with free self-loops. Scores are
//! pseudo-log-likelihoods plus `lm_weight · ln P` and the word penalty at
//! every word end, and `lm_weight · ln P(</s>)` at the end.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DecoderError, NGramLm, Result};
use crate::features::FeatureMatrix;
use crate::lexicon::{GraphemeInventory, GraphemicLexicon, SymbolId};
use crate::neural_am::RecurrentAm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Tokens kept per frame; `None` disables pruning.
    pub beam_width: Option<usize>,
    pub lm_weight: f64,
    /// Added at every word end (negative values discourage insertions).
    pub word_penalty: f64,
    /// Prior scaling in `ln y − κ·ln prior`.
    pub kappa: f64,
    /// Allow `<sil>` before the first and after the last word.
    pub sil: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: Some(256),
            lm_weight: 1.0,
            word_penalty: 0.0,
            kappa: 1.0,
            sil: true,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    symbol: SymbolId,
    children: Vec<u32>,
    /// (lexicon word index, LM id) of words spelled by the path to this node.
    words: Vec<(u32, u32)>,
}

/// Lexicon compiled to a prefix tree over inventory symbols.
#[derive(Debug, Clone)]
pub struct DecodeGraph {
    nodes: Vec<Node>,
    words: Vec<String>,
    space: SymbolId,
    sil: Option<SymbolId>,
    label_states: usize,
}

impl DecodeGraph {
    pub fn new(lexicon: &GraphemicLexicon, inventory: &GraphemeInventory, lm: &NGramLm, label_states: usize) -> Result<Self> {
        if lexicon.is_empty() {
            return Err(DecoderError::EmptyLexicon);
        }
        let mut nodes = vec![Node {
            symbol: SymbolId(u32::MAX),
            children: Vec::new(),
            words: Vec::new(),
        }];
        let mut words = Vec::with_capacity(lexicon.len());
        for (word, graphemes) in lexicon.entries() {
            let wi = words.len() as u32;
            words.push(word.clone());
            let mut cur = 0usize;
            for g in graphemes {
                let sym = inventory
                    .id(g)
                    .ok_or_else(|| DecoderError::Lexicon(format!("{g:?} in {word:?} is not in the inventory")))?;
                cur = match nodes[cur].children.iter().find(|&&c| nodes[c as usize].symbol == sym) {
                    Some(&c) => c as usize,
                    None => {
                        nodes.push(Node {
                            symbol: sym,
                            children: Vec::new(),
                            words: Vec::new(),
                        });
                        let id = nodes.len() - 1;
                        nodes[cur].children.push(id as u32);
                        id
                    }
                };
            }
            nodes[cur].words.push((wi, lm.id(word)));
        }
        Ok(Self {
            nodes,
            words,
            space: inventory.space(),
            sil: inventory.sil(),
            label_states: label_states.max(1),
        })
    }

    pub fn word(&self, index: u32) -> &str {
        &self.words[index as usize]
    }

    fn label(&self, symbol: SymbolId, state: u8) -> usize {
        symbol.index() * self.label_states + state as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pos {
    SilStart(u8),
    Word { node: u32, state: u8 },
    Space(u8),
    SilEnd(u8),
}

#[derive(Debug, Clone)]
struct Token {
    score: f64,
    history: u32,
}

const NO_HISTORY: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub words: Vec<String>,
    pub score: f64,
}

struct Search<'a> {
    graph: &'a DecodeGraph,
    lm: &'a NGramLm,
    cfg: &'a DecodeConfig,
    /// (lexicon word, previous entry)
    history: Vec<(u32, u32)>,
}

type Frontier = BTreeMap<(Pos, Vec<u32>), Token>;

impl Search<'_> {
    fn last_state(&self) -> u8 {
        (self.graph.label_states - 1) as u8
    }

    fn sil_enabled(&self) -> Option<SymbolId> {
        if self.cfg.sil {
            self.graph.sil
        } else {
            None
        }
    }

    fn symbol_of(&self, pos: Pos) -> (SymbolId, u8) {
        match pos {
            Pos::SilStart(s) | Pos::SilEnd(s) => (self.graph.sil.expect("sil positions need <sil>"), s),
            Pos::Word { node, state } => (self.graph.nodes[node as usize].symbol, state),
            Pos::Space(s) => (self.graph.space, s),
        }
    }

    fn relax(next: &mut Frontier, key: (Pos, Vec<u32>), score: f64, history: u32) {
        match next.get_mut(&key) {
            Some(tok) if tok.score >= score => {}
            Some(tok) => *tok = Token { score, history },
            None => {
                next.insert(key, Token { score, history });
            }
        }
    }

    /// Score of ending a word at `node` in `ctx`: one entry per word.
    fn word_ends(&self, node: u32, ctx: &[u32]) -> Vec<(u32, u32, f64)> {
        self.graph.nodes[node as usize]
            .words
            .iter()
            .map(|&(wi, lm_id)| {
                (
                    wi,
                    lm_id,
                    self.cfg.lm_weight * self.lm.ln_prob(ctx, lm_id) + self.cfg.word_penalty,
                )
            })
            .collect()
    }

    fn push_history(&mut self, word: u32, prev: u32) -> u32 {
        self.history.push((word, prev));
        (self.history.len() - 1) as u32
    }

    fn enter_words(&self, ctx: &[u32], tok: &Token, next: &mut Frontier) {
        for &c in &self.graph.nodes[0].children {
            Self::relax(next, (Pos::Word { node: c, state: 0 }, ctx.to_vec()), tok.score, tok.history);
        }
    }

    fn successors(&mut self, pos: Pos, ctx: &[u32], tok: &Token, next: &mut Frontier) {
        let last = self.last_state();
        let graph = self.graph;
        Self::relax(next, (pos, ctx.to_vec()), tok.score, tok.history);
        let mut advance = |p: Pos| Self::relax(next, (p, ctx.to_vec()), tok.score, tok.history);
        match pos {
            Pos::SilStart(s) if s < last => advance(Pos::SilStart(s + 1)),
            Pos::Space(s) if s < last => advance(Pos::Space(s + 1)),
            Pos::SilEnd(s) if s < last => advance(Pos::SilEnd(s + 1)),
            Pos::Word { node, state } if state < last => advance(Pos::Word { node, state: state + 1 }),
            Pos::SilStart(_) | Pos::Space(_) => self.enter_words(ctx, tok, next),
            Pos::SilEnd(_) => {}
            Pos::Word { node, .. } => {
                for &c in &graph.nodes[node as usize].children {
                    advance(Pos::Word { node: c, state: 0 });
                }
                for (wi, lm_id, add) in self.word_ends(node, ctx) {
                    let mut new_ctx = ctx.to_vec();
                    new_ctx.push(lm_id);
                    self.lm.truncate_context(&mut new_ctx);
                    let h = self.push_history(wi, tok.history);
                    let score = tok.score + add;
                    Self::relax(next, (Pos::Space(0), new_ctx.clone()), score, h);
                    if self.sil_enabled().is_some() {
                        Self::relax(next, (Pos::SilEnd(0), new_ctx), score, h);
                    }
                }
            }
        }
    }

    fn words_of(&self, mut h: u32) -> Vec<String> {
        let mut out = Vec::new();
        while h != NO_HISTORY {
            let (w, prev) = self.history[h as usize];
            out.push(self.graph.word(w).to_string());
            h = prev;
        }
        out.reverse();
        out
    }
}

fn prune(frontier: Frontier, width: Option<usize>) -> Frontier {
    match width {
        Some(k) if frontier.len() > k => {
            let mut items: Vec<_> = frontier.into_iter().collect();
            // stable sort keeps key order among equal scores
            items.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
            items.truncate(k);
            items.into_iter().collect()
        }
        _ => frontier,
    }
}

/// Decodes a frames × labels matrix of emission scores.
pub fn decode_emissions(
    graph: &DecodeGraph,
    lm: &NGramLm,
    emissions: &Array2<f64>,
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    let frames = emissions.nrows();
    let mut search = Search {
        graph,
        lm,
        cfg,
        history: Vec::new(),
    };
    let emit = |t: usize, pos: Pos, search: &Search<'_>| {
        let (sym, s) = search.symbol_of(pos);
        emissions[[t, graph.label(sym, s)]]
    };
    let needed = graph.nodes.iter().map(|n| n.symbol).chain(graph.sil).chain([graph.space]);
    if let Some(bad) = needed.filter(|s| s.0 != u32::MAX).find(|s| graph.label(*s, search.last_state()) >= emissions.ncols()) {
        return Err(DecoderError::Lexicon(format!("symbol {bad} outside the acoustic model's labels")));
    }

    let start_ctx = vec![lm.bos()];
    let mut frontier = Frontier::new();
    if frames > 0 {
        if search.sil_enabled().is_some() {
            let pos = Pos::SilStart(0);
            Search::relax(&mut frontier, (pos, start_ctx.clone()), emit(0, pos, &search), NO_HISTORY);
        }
        for &c in &graph.nodes[0].children {
            let pos = Pos::Word { node: c, state: 0 };
            Search::relax(&mut frontier, (pos, start_ctx.clone()), emit(0, pos, &search), NO_HISTORY);
        }
        frontier = prune(frontier, cfg.beam_width);
    }
    for t in 1..frames {
        let mut next = Frontier::new();
        for ((pos, ctx), tok) in &frontier {
            search.successors(*pos, ctx, tok, &mut next);
        }
        for ((pos, _), tok) in next.iter_mut() {
            tok.score += emit(t, *pos, &search);
        }
        frontier = prune(next, cfg.beam_width);
    }

    let last = search.last_state();
    let mut best: Option<(f64, u32)> = None;
    let mut consider = |score: f64, h: u32| {
        if best.is_none_or(|b| score > b.0) {
            best = Some((score, h));
        }
    };
    let mut finals = Vec::new();
    for ((pos, ctx), tok) in &frontier {
        match *pos {
            Pos::SilEnd(s) if s == last => {
                consider(tok.score + cfg.lm_weight * lm.ln_prob(ctx, lm.eos()), tok.history);
            }
            Pos::Word { node, state } if state == last => {
                for (wi, lm_id, add) in search.word_ends(node, ctx) {
                    let mut new_ctx = ctx.clone();
                    new_ctx.push(lm_id);
                    lm.truncate_context(&mut new_ctx);
                    let score = tok.score + add + cfg.lm_weight * lm.ln_prob(&new_ctx, lm.eos());
                    finals.push((score, wi, tok.history));
                }
            }
            _ => {}
        }
    }
    for (score, wi, prev) in finals {
        if best.is_none_or(|b| score > b.0) {
            let h = search.push_history(wi, prev);
            best = Some((score, h));
        }
    }
    match best {
        Some((score, h)) => Ok(DecodeResult {
            words: search.words_of(h),
            score,
        }),
        None => {
            log::warn!("no hypothesis survived decoding");
            Ok(DecodeResult {
                words: Vec::new(),
                score: f64::NEG_INFINITY,
            })
        }
    }
}

/// Pseudo-log-likelihoods `ln y − κ·ln prior` for every frame and label.
pub fn pseudo_log_likelihoods(am: &RecurrentAm, priors: &[f64], features: &FeatureMatrix, kappa: f64) -> Result<Array2<f64>> {
    let mut e = am.log_posteriors(features)?;
    for mut row in e.rows_mut() {
        for (v, p) in row.iter_mut().zip(priors) {
            *v -= kappa * p.ln();
        }
    }
    Ok(e)
}

pub fn beam_decode(
    am: &RecurrentAm,
    priors: &[f64],
    lm: &NGramLm,
    graph: &DecodeGraph,
    features: &FeatureMatrix,
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    let e = pseudo_log_likelihoods(am, priors, features, cfg.kappa)?;
    decode_emissions(graph, lm, &e, cfg)
}
