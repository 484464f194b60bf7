//! Witten-Bell smoothed backoff n-gram model with ARPA text I/O.
//!
//! Probabilities are stored as base-10 logs, exactly as written to ARPA, so
//! a write/read cycle reproduces the model bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use super::{DecoderError, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
/// log10 probability written for `<s>`, which is never predicted.
const BOS_LOGPROB: f64 = -99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    log10_prob: f64,
    log10_bow: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramLm {
    order: usize,
    /// Sorted vocabulary including `<s>`, `</s>` and `<unk>`.
    vocab: Vec<String>,
    index: BTreeMap<String, u32>,
    /// `ngrams[k]` holds the (k+1)-grams.
    ngrams: Vec<BTreeMap<Vec<u32>, Entry>>,
}

#[derive(Default)]
struct ContextStats {
    total: u64,
    followers: BTreeMap<u32, u64>,
}

impl NGramLm {
    /// Trains an order-`order` model on whitespace-tokenized sentences.
    pub fn train<'a, I>(sentences: I, order: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if order == 0 {
            return Err(DecoderError::Lm("order must be at least 1".into()));
        }
        let sentences: Vec<Vec<&str>> = sentences
            .into_iter()
            .map(|s| s.split_whitespace().collect::<Vec<_>>())
            .filter(|s| !s.is_empty())
            .collect();
        if sentences.is_empty() {
            return Err(DecoderError::Lm("empty training corpus".into()));
        }
        let mut words: BTreeSet<String> = [BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        for s in &sentences {
            words.extend(s.iter().map(|w| w.to_string()));
        }
        let vocab: Vec<String> = words.into_iter().collect();
        let index: BTreeMap<String, u32> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let bos = index[BOS];
        let eos = index[EOS];

        // stats[k]: contexts of length k
        let mut stats: Vec<BTreeMap<Vec<u32>, ContextStats>> = (0..order).map(|_| BTreeMap::new()).collect();
        for s in &sentences {
            let mut toks = vec![bos];
            toks.extend(s.iter().map(|w| index[*w]));
            toks.push(eos);
            for i in 1..toks.len() {
                for k in 0..order.min(i + 1) {
                    let ctx = toks[i - k..i].to_vec();
                    let st = stats[k].entry(ctx).or_default();
                    st.total += 1;
                    *st.followers.entry(toks[i]).or_default() += 1;
                }
            }
        }

        let predicted: Vec<u32> = (0..vocab.len() as u32).filter(|&w| w != bos).collect();
        let uniform = 1.0 / predicted.len() as f64;
        // interpolated Witten-Bell probability, computed recursively
        let prob = |ctx: &[u32], w: u32, stats: &[BTreeMap<Vec<u32>, ContextStats>]| -> f64 {
            let mut p = uniform;
            for k in 0..=ctx.len() {
                let h = &ctx[ctx.len() - k..];
                if let Some(st) = stats[k].get(h) {
                    let n1 = st.followers.len() as f64;
                    let c = st.followers.get(&w).copied().unwrap_or(0) as f64;
                    p = (c + n1 * p) / (st.total as f64 + n1);
                }
            }
            p
        };

        let mut ngrams: Vec<BTreeMap<Vec<u32>, Entry>> = (0..order).map(|_| BTreeMap::new()).collect();
        for &w in &predicted {
            ngrams[0].insert(
                vec![w],
                Entry {
                    log10_prob: prob(&[], w, &stats).log10(),
                    log10_bow: 0.0,
                },
            );
        }
        ngrams[0].insert(
            vec![bos],
            Entry {
                log10_prob: BOS_LOGPROB,
                log10_bow: 0.0,
            },
        );
        for k in 1..order {
            for (ctx, st) in &stats[k] {
                for &w in st.followers.keys() {
                    let mut key = ctx.clone();
                    key.push(w);
                    ngrams[k].insert(
                        key,
                        Entry {
                            log10_prob: prob(ctx, w, &stats).log10(),
                            log10_bow: 0.0,
                        },
                    );
                }
            }
        }
        let mut lm = Self {
            order,
            vocab,
            index,
            ngrams,
        };
        // backoff weights make every context's distribution sum to one
        for k in 1..order {
            for (ctx, st) in &stats[k] {
                let seen_mass: f64 = st.followers.keys().map(|&w| lm.prob_of(ctx, w)).sum();
                let lower_mass: f64 = st.followers.keys().map(|&w| lm.prob_of(&ctx[1..], w)).sum();
                let free = 1.0 - lower_mass;
                let bow = if free > 1e-15 { ((1.0 - seen_mass).max(0.0) / free).log10() } else { 0.0 };
                if let Some(e) = lm.ngrams[k - 1].get_mut(ctx) {
                    e.log10_bow = bow;
                }
            }
        }
        Ok(lm)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or_else(|| self.index[UNK])
    }

    pub fn word(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    pub fn bos(&self) -> u32 {
        self.index[BOS]
    }

    pub fn eos(&self) -> u32 {
        self.index[EOS]
    }

    /// Words that can be predicted (everything but `<s>`).
    pub fn predictable(&self) -> impl Iterator<Item = u32> + '_ {
        let bos = self.bos();
        (0..self.vocab.len() as u32).filter(move |&w| w != bos)
    }

    /// Backoff probability (not log) of `w` after `ctx`; only the last
    /// `order - 1` context words are used.
    pub fn prob_of(&self, ctx: &[u32], w: u32) -> f64 {
        10f64.powf(self.log10_prob(ctx, w))
    }

    pub fn log10_prob(&self, ctx: &[u32], w: u32) -> f64 {
        let ctx = &ctx[ctx.len().saturating_sub(self.order - 1)..];
        let mut bow = 0.0;
        for start in 0..=ctx.len() {
            let h = &ctx[start..];
            let mut key = h.to_vec();
            key.push(w);
            if let Some(e) = self.ngrams[h.len()].get(&key) {
                return bow + e.log10_prob;
            }
            if !h.is_empty() {
                if let Some(e) = self.ngrams[h.len() - 1].get(h) {
                    bow += e.log10_bow;
                }
            }
        }
        unreachable!("every predictable word has a unigram")
    }

    /// Natural-log probability.
    pub fn ln_prob(&self, ctx: &[u32], w: u32) -> f64 {
        self.log10_prob(ctx, w) * std::f64::consts::LN_10
    }

    /// Keeps the suffix of `ctx` the model can use.
    pub fn truncate_context(&self, ctx: &mut Vec<u32>) {
        let keep = self.order - 1;
        if ctx.len() > keep {
            ctx.drain(..ctx.len() - keep);
        }
    }

    /// Contexts with their own statistics (every stored n-gram below the
    /// top order, `<s>` included).
    pub fn contexts(&self) -> impl Iterator<Item = &[u32]> {
        self.ngrams[..self.order - 1].iter().flat_map(|m| m.keys().map(Vec::as_slice))
    }

    /// Perplexity over sentences, `</s>` included.
    pub fn perplexity<'a, I>(&self, sentences: I) -> f64
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut log10_sum = 0.0;
        let mut n = 0usize;
        for s in sentences {
            let mut ctx = vec![self.bos()];
            let ids: Vec<u32> = s.split_whitespace().map(|w| self.id(w)).chain([self.eos()]).collect();
            for w in ids {
                log10_sum += self.log10_prob(&ctx, w);
                ctx.push(w);
                self.truncate_context(&mut ctx);
                n += 1;
            }
        }
        10f64.powf(-log10_sum / n.max(1) as f64)
    }

    pub fn write_arpa<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "\\data\\")?;
        for (k, m) in self.ngrams.iter().enumerate() {
            writeln!(w, "ngram {}={}", k + 1, m.len())?;
        }
        for (k, m) in self.ngrams.iter().enumerate() {
            writeln!(w)?;
            writeln!(w, "\\{}-grams:", k + 1)?;
            for (key, e) in m {
                let words: Vec<&str> = key.iter().map(|&i| self.word(i)).collect();
                if k + 1 < self.order {
                    writeln!(w, "{}\t{}\t{}", e.log10_prob, words.join(" "), e.log10_bow)?;
                } else {
                    writeln!(w, "{}\t{}", e.log10_prob, words.join(" "))?;
                }
            }
        }
        writeln!(w)?;
        writeln!(w, "\\end\\")
    }

    pub fn read_arpa<R: BufRead>(r: R) -> Result<Self> {
        let bad = |line: usize, msg: &str| DecoderError::Lm(format!("ARPA line {line}: {msg}"));
        let mut counts: Vec<usize> = Vec::new();
        let mut raw: Vec<Vec<(Vec<String>, Entry)>> = Vec::new();
        let mut section: Option<usize> = None;
        let mut in_data = false;
        let mut ended = false;
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| DecoderError::Lm(e.to_string()))?;
            let line = line.trim();
            let n = i + 1;
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                in_data = true;
                continue;
            }
            if line == "\\end\\" {
                ended = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                if !in_data {
                    return Err(bad(n, "count before \\data\\"));
                }
                let (_, c) = rest.split_once('=').ok_or_else(|| bad(n, "bad count line"))?;
                counts.push(c.trim().parse().map_err(|_| bad(n, "bad count"))?);
                raw.push(Vec::new());
                continue;
            }
            if let Some(k) = line.strip_prefix('\\').and_then(|l| l.strip_suffix("-grams:")) {
                let k: usize = k.parse().map_err(|_| bad(n, "bad section header"))?;
                if k == 0 || k > counts.len() {
                    return Err(bad(n, "section without a count"));
                }
                section = Some(k - 1);
                continue;
            }
            let k = section.ok_or_else(|| bad(n, "entry outside a section"))?;
            let fields: Vec<&str> = line.split('\t').collect();
            let (prob, words, bow) = match fields.as_slice() {
                [p, w] => (p, w, None),
                [p, w, b] => (p, w, Some(b)),
                _ => return Err(bad(n, "expected tab-separated fields")),
            };
            let words: Vec<String> = words.split(' ').map(str::to_string).collect();
            if words.len() != k + 1 {
                return Err(bad(n, "n-gram length does not match its section"));
            }
            let entry = Entry {
                log10_prob: prob.parse().map_err(|_| bad(n, "bad probability"))?,
                log10_bow: bow.map(|b| b.parse()).transpose().map_err(|_| bad(n, "bad backoff"))?.unwrap_or(0.0),
            };
            raw[k].push((words, entry));
        }
        if !ended {
            return Err(DecoderError::Lm("missing \\end\\".into()));
        }
        if raw.is_empty() {
            return Err(DecoderError::Lm("no n-grams".into()));
        }
        for (k, (c, entries)) in counts.iter().zip(&raw).enumerate() {
            if *c != entries.len() {
                return Err(DecoderError::Lm(format!("{}-gram count {c} but {} entries", k + 1, entries.len())));
            }
        }
        let vocab: Vec<String> = raw[0].iter().map(|(w, _)| w[0].clone()).collect::<BTreeSet<_>>().into_iter().collect();
        for needed in [BOS, EOS, UNK] {
            if !vocab.iter().any(|w| w == needed) {
                return Err(DecoderError::Lm(format!("vocabulary lacks {needed}")));
            }
        }
        let index: BTreeMap<String, u32> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let mut ngrams = Vec::with_capacity(raw.len());
        for entries in raw {
            let mut m = BTreeMap::new();
            for (words, e) in entries {
                let key = words
                    .iter()
                    .map(|w| index.get(w).copied().ok_or_else(|| DecoderError::Lm(format!("{w} missing from unigrams"))))
                    .collect::<Result<Vec<u32>>>()?;
                m.insert(key, e);
            }
            ngrams.push(m);
        }
        Ok(Self {
            order: ngrams.len(),
            vocab,
            index,
            ngrams,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn check_normalized(lm: &NGramLm) {
        let contexts: Vec<Vec<u32>> = lm.contexts().map(<[u32]>::to_vec).filter(|c| c[c.len() - 1] != lm.eos()).collect();
        for ctx in contexts.iter().chain([&Vec::new()]) {
            let total: f64 = lm.predictable().map(|w| lm.prob_of(ctx, w)).sum();
            assert!((total - 1.0).abs() < 1e-6, "context {ctx:?}: {total}");
        }
    }

    #[test]
    fn witten_bell_by_hand() {
        // corpus "a b" × 3; vocab {</s>, <s>, <unk>, a, b}
        let lm = NGramLm::train(["a b"; 3], 2).unwrap();
        let (a, b) = (lm.id("a"), lm.id("b"));
        // unigram: 9 tokens (a,b,</s> × 3), 3 distinct, uniform over 4 predictable
        let p_uni_b = (3.0 + 3.0 * 0.25) / (9.0 + 3.0);
        assert!((lm.prob_of(&[], b) - p_uni_b).abs() < 1e-12);
        // bigram context "a": 3 tokens, 1 distinct follower
        let p_b_a = (3.0 + 1.0 * p_uni_b) / (3.0 + 1.0);
        assert!((lm.prob_of(&[a], b) - p_b_a).abs() < 1e-12);
        assert!(lm.prob_of(&[a], b) > 0.8);
        // unseen follower backs off
        let p_uni_a = (3.0 + 0.75) / 12.0;
        assert!((lm.prob_of(&[a], a) - p_uni_a / 4.0).abs() < 1e-12);
        check_normalized(&lm);
    }

    #[test]
    fn unseen_word_gets_mass() {
        let lm = NGramLm::train(["x y z", "x y"], 3).unwrap();
        let unk = lm.id("never-seen");
        assert_eq!(lm.word(unk), UNK);
        assert!(lm.prob_of(&[lm.id("x"), lm.id("y")], unk) > 0.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(NGramLm::train(std::iter::empty(), 5).is_err());
        assert!(NGramLm::train(["  "], 5).is_err());
    }

    #[test]
    fn training_perplexity_beats_uniform() {
        let corpus = ["the cat sat", "the cat ran", "a dog sat", "the dog ran"];
        let lm = NGramLm::train(corpus, 5).unwrap();
        let uniform = lm.predictable().count() as f64;
        assert!(lm.perplexity(corpus) <= uniform);
        check_normalized(&lm);
    }

    #[test]
    fn arpa_round_trip_is_exact() {
        let lm = NGramLm::train(["the cat sat", "the cat ran", "a dog sat on the mat"], 5).unwrap();
        let mut buf = Vec::new();
        lm.write_arpa(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("\\data\\\nngram 1="));
        let back = NGramLm::read_arpa(&buf[..]).unwrap();
        assert_eq!(back, lm);
        assert!(NGramLm::read_arpa(&buf[..buf.len() - 7]).is_err());
    }

    proptest! {
        #[test]
        fn rows_are_normalized(
            sentences in proptest::collection::vec(proptest::collection::vec(0u8..5, 1..6), 1..8),
            order in 1usize..5,
        ) {
            let text: Vec<String> = sentences
                .iter()
                .map(|s| s.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" "))
                .collect();
            let lm = NGramLm::train(text.iter().map(String::as_str), order).unwrap();
            check_normalized(&lm);
        }
    }
}
