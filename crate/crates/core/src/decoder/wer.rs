//! Word error rate and its transliteration-tolerant variant.

use std::collections::BTreeSet;
use std::io::BufRead;

use serde::Serialize;

use super::{DecoderError, Result};

/// Pairs of words written in different scripts that count as the same word.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransliterationMap {
    /// Each pair stored once, smaller word first.
    pairs: BTreeSet<(String, String)>,
}

impl TransliterationMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: &str, b: &str) -> Result<()> {
        if a == b {
            return Err(DecoderError::Transliteration(format!("{a:?} paired with itself")));
        }
        let pair = if a < b { (a, b) } else { (b, a) };
        self.pairs.insert((pair.0.to_string(), pair.1.to_string()));
        Ok(())
    }

    pub fn equivalent(&self, a: &str, b: &str) -> bool {
        let pair = if a < b { (a, b) } else { (b, a) };
        self.pairs.contains(&(pair.0.to_string(), pair.1.to_string()))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Reads `native\tlatin` lines.
    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut map = Self::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| DecoderError::Transliteration(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| DecoderError::Transliteration(format!("line {}: expected `native\\tlatin`", i + 1)))?;
            map.insert(a.trim(), b.trim())?;
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors over reference length. An empty reference divides by one, so a
    /// non-empty hypothesis against it scores its own length.
    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.ref_words.max(1) as f64
    }

    /// True when the reference was empty and the hypothesis was not.
    pub fn empty_reference(&self) -> bool {
        self.ref_words == 0 && self.insertions > 0
    }

    pub fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_words += other.ref_words;
    }
}

/// Levenshtein alignment with unit costs; `same` decides when a hypothesis
/// word matches a reference word. Ties prefer substitution, then deletion.
pub fn align_errors<S: AsRef<str>, T: AsRef<str>>(
    hyp: &[S],
    reference: &[T],
    same: impl Fn(&str, &str) -> bool,
) -> ErrorCounts {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(!same(hyp[j - 1].as_ref(), reference[i - 1].as_ref()));
            d[i][j] = (d[i - 1][j - 1] + cost).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut counts = ErrorCounts {
        ref_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(!same(hyp[j - 1].as_ref(), reference[i - 1].as_ref()));
            if d[i][j] == d[i - 1][j - 1] + cost {
                counts.substitutions += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

pub fn wer_counts<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T]) -> ErrorCounts {
    align_errors(hyp, reference, |a, b| a == b)
}

pub fn transliterated_wer_counts<S: AsRef<str>, T: AsRef<str>>(
    hyp: &[S],
    reference: &[T],
    map: &TransliterationMap,
) -> ErrorCounts {
    align_errors(hyp, reference, |a, b| a == b || map.equivalent(a, b))
}

pub fn wer<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T]) -> f64 {
    wer_counts(hyp, reference).rate()
}

pub fn transliterated_wer<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T], map: &TransliterationMap) -> f64 {
    transliterated_wer_counts(hyp, reference, map).rate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn basic_rates() {
        assert_eq!(wer(&w("a b c"), &w("a b c")), 0.0);
        assert!((wer(&w("a x c"), &w("a b c")) - 1.0 / 3.0).abs() < 1e-15);
        assert!((wer(&w("a b"), &w("a b c")) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer::<&str, &str>(&[], &[]), 0.0);
        let c = wer_counts(&w("a b"), &[] as &[&str]);
        assert_eq!(c.rate(), 2.0);
        assert!(c.empty_reference());
    }

    #[test]
    fn substitution_preferred_over_insert_delete() {
        let c = wer_counts(&w("x"), &w("a"));
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 0, 0));
    }

    #[test]
    fn transliteration_examples() {
        let mut map = TransliterationMap::new();
        map.insert("नमस्ते", "namaste").unwrap();
        assert_eq!(transliterated_wer(&w("namaste"), &w("नमस्ते"), &map), 0.0);
        assert_eq!(wer(&w("namaste"), &w("नमस्ते")), 1.0);
        let r = transliterated_wer(&w("namaste dost x"), &w("नमस्ते dost y"), &map);
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
        assert!(map.insert("a", "a").is_err());
    }

    #[test]
    fn map_reads_tsv() {
        let map = TransliterationMap::read_tsv("नमस्ते\tnamaste\n\nघर\tghar\n".as_bytes()).unwrap();
        assert_eq!(map.len(), 2);
        assert!(map.equivalent("ghar", "घर"));
        assert!(TransliterationMap::read_tsv("no-tab\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn transliterated_never_exceeds_plain(
            hyp in proptest::collection::vec(0u8..4, 0..6),
            reference in proptest::collection::vec(0u8..4, 0..6),
        ) {
            let h: Vec<String> = hyp.iter().map(|x| format!("w{x}")).collect();
            let r: Vec<String> = reference.iter().map(|x| format!("w{x}")).collect();
            let mut map = TransliterationMap::new();
            map.insert("w0", "w1").unwrap();
            prop_assert!(transliterated_wer(&h, &r, &map) <= wer(&h, &r));
            prop_assert_eq!(transliterated_wer(&h, &r, &TransliterationMap::new()), wer(&h, &r));
        }
    }
}
