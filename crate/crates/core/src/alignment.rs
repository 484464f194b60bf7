//! Frame-level alignments: the exchange format between the GMM, neural and
//! analysis stages.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::features::majority_downsample;
use crate::lexicon::{is_reserved, SymbolId};

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("alignment has {got} frames, expected {expected}")]
    FrameCount { expected: usize, got: usize },
    #[error("frame {frame}: {reason}")]
    Invalid { frame: usize, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One element of a target symbol sequence, tagged with the word it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub symbol: SymbolId,
    pub word: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameLabel {
    pub symbol: SymbolId,
    /// HMM state within the symbol (0 when states are collapsed).
    pub state: u8,
    pub word: Option<u32>,
    /// Index into the target sequence. Keeps repeated graphemes ("oo") apart.
    pub position: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameAlignment {
    pub labels: Vec<FrameLabel>,
    pub frame_shift_ms: f64,
}

impl FrameAlignment {
    /// Builds an alignment from a path through the composed left-to-right
    /// state graph (`states_per_symbol` states for each target).
    pub fn from_state_path(
        path: &[usize],
        targets: &[Target],
        states_per_symbol: usize,
        frame_shift_ms: f64,
    ) -> Self {
        let labels = path
            .iter()
            .map(|&s| {
                let pos = s / states_per_symbol;
                let t = targets[pos];
                FrameLabel {
                    symbol: t.symbol,
                    state: (s % states_per_symbol) as u8,
                    word: t.word,
                    position: pos as u32,
                }
            })
            .collect();
        Self {
            labels,
            frame_shift_ms,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Symbol sequence with one entry per aligned target position.
    pub fn symbol_sequence(&self) -> Vec<SymbolId> {
        let mut out = Vec::new();
        let mut last = None;
        for l in &self.labels {
            if last != Some(l.position) {
                out.push(l.symbol);
                last = Some(l.position);
            }
        }
        out
    }

    pub fn symbols(&self) -> impl Iterator<Item = SymbolId> + '_ {
        self.labels.iter().map(|l| l.symbol)
    }

    /// Checks the structural invariants against the target sequence.
    ///
    /// `skippable` names a symbol (normally `<sil>`) that may be left out at
    /// either end of the sequence.
    pub fn validate(
        &self,
        targets: &[Target],
        states_per_symbol: usize,
        skippable: Option<SymbolId>,
    ) -> Result<(), AlignmentError> {
        let invalid = |frame: usize, reason: String| AlignmentError::Invalid { frame, reason };
        if self.labels.is_empty() {
            return Err(invalid(0, "empty alignment".into()));
        }
        let first = self.labels[0].position as usize;
        let last = self.labels[self.labels.len() - 1].position as usize;
        let can_skip = |pos: usize| skippable.is_some() && targets.get(pos).map(|t| t.symbol) == skippable;
        if first != 0 && !(first == 1 && can_skip(0)) {
            return Err(invalid(0, format!("starts at target {first}")));
        }
        let end = targets.len().saturating_sub(1);
        if last != end && !(last + 1 == end && can_skip(end)) {
            return Err(invalid(self.labels.len() - 1, format!("ends at target {last} of {}", targets.len())));
        }
        let mut prev: Option<&FrameLabel> = None;
        for (f, l) in self.labels.iter().enumerate() {
            let pos = l.position as usize;
            let t = targets
                .get(pos)
                .ok_or_else(|| invalid(f, format!("position {pos} out of range")))?;
            if t.symbol != l.symbol || t.word != l.word {
                return Err(invalid(f, format!("label does not match target {pos}")));
            }
            if l.state as usize >= states_per_symbol {
                return Err(invalid(f, format!("state {} out of range", l.state)));
            }
            if let Some(p) = prev {
                match l.position.checked_sub(p.position) {
                    Some(0) if l.state < p.state => {
                        return Err(invalid(f, "state index decreased within a segment".into()))
                    }
                    Some(0) | Some(1) => {}
                    _ => return Err(invalid(f, "positions must advance by at most one".into())),
                }
            }
            prev = Some(l);
        }
        Ok(())
    }

    /// Transfers labels to a coarser frame rate by majority vote within each
    /// bucket of `factor` frames; ties go to the earliest label.
    pub fn downsample(&self, factor: usize) -> Self {
        Self {
            labels: majority_downsample(&self.labels, factor),
            frame_shift_ms: self.frame_shift_ms * factor as f64,
        }
    }

    /// Same labels with HMM states collapsed to a single state per symbol.
    pub fn collapse_states(&self) -> Self {
        Self {
            labels: self.labels.iter().map(|l| FrameLabel { state: 0, ..*l }).collect(),
            frame_shift_ms: self.frame_shift_ms,
        }
    }
}

/// A set of utterance alignments sharing one symbol table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignmentSet {
    pub symbols: Vec<String>,
    pub utterances: BTreeMap<String, FrameAlignment>,
}

impl AlignmentSet {
    pub fn new(symbols: Vec<String>) -> Self {
        Self {
            symbols,
            utterances: BTreeMap::new(),
        }
    }

    pub fn symbol_name(&self, id: SymbolId) -> &str {
        &self.symbols[id.index()]
    }

    /// Writes `utt-id frame symbol state word-index position` rows.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let shift = self
            .utterances
            .values()
            .next()
            .map(|a| a.frame_shift_ms)
            .unwrap_or(10.0);
        writeln!(w, "# frame_shift_ms={shift}")?;
        for (id, ali) in &self.utterances {
            for (f, l) in ali.labels.iter().enumerate() {
                let word = l.word.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
                writeln!(
                    w,
                    "{id} {f} {} {} {word} {}",
                    self.symbols[l.symbol.index()],
                    l.state,
                    l.position
                )?;
            }
        }
        Ok(())
    }

    /// Parses the text format. With `symbols` given, labels must come from that
    /// table; otherwise a table is built from the file (reserved symbols first,
    /// then sorted). Five-column rows without a position are accepted, in which
    /// case a new segment starts whenever the symbol or word changes or the
    /// state index drops.
    pub fn read_text<R: BufRead>(r: R, symbols: Option<&[String]>) -> Result<Self, AlignmentError> {
        struct Row {
            utt: String,
            frame: usize,
            symbol: String,
            state: u8,
            word: Option<u32>,
            position: Option<u32>,
        }
        let mut shift = 10.0;
        let mut rows = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("frame_shift_ms=") {
                    shift = v.parse().map_err(|_| AlignmentError::Parse {
                        line: lineno,
                        reason: format!("bad frame shift {v:?}"),
                    })?;
                }
                continue;
            }
            let cols: Vec<&str> = trimmed.split_whitespace().collect();
            if cols.len() != 5 && cols.len() != 6 {
                return Err(AlignmentError::Parse {
                    line: lineno,
                    reason: format!("expected 5 or 6 columns, got {}", cols.len()),
                });
            }
            let bad = |what: &str| AlignmentError::Parse {
                line: lineno,
                reason: format!("bad {what}"),
            };
            rows.push(Row {
                utt: cols[0].to_string(),
                frame: cols[1].parse().map_err(|_| bad("frame index"))?,
                symbol: cols[2].to_string(),
                state: cols[3].parse().map_err(|_| bad("state"))?,
                word: match cols[4] {
                    "-" => None,
                    w => Some(w.parse().map_err(|_| bad("word index"))?),
                },
                position: match cols.get(5) {
                    Some(p) => Some(p.parse().map_err(|_| bad("position"))?),
                    None => None,
                },
            });
        }

        let table: Vec<String> = match symbols {
            Some(s) => s.to_vec(),
            None => {
                let mut seen: Vec<String> = rows.iter().map(|r| r.symbol.clone()).collect();
                seen.sort_by(|a, b| (!is_reserved(a), a).cmp(&(!is_reserved(b), b)));
                seen.dedup();
                seen
            }
        };
        let index: BTreeMap<&str, SymbolId> = table
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), SymbolId(i as u32)))
            .collect();

        let mut set = AlignmentSet::new(table.clone());
        for (lineno, row) in rows.iter().enumerate() {
            let symbol = *index.get(row.symbol.as_str()).ok_or_else(|| AlignmentError::Parse {
                line: lineno + 1,
                reason: format!("unknown symbol {:?}", row.symbol),
            })?;
            let ali = set
                .utterances
                .entry(row.utt.clone())
                .or_insert_with(|| FrameAlignment {
                    labels: Vec::new(),
                    frame_shift_ms: shift,
                });
            if row.frame != ali.labels.len() {
                return Err(AlignmentError::Parse {
                    line: lineno + 1,
                    reason: format!("frame {} out of order for {}", row.frame, row.utt),
                });
            }
            let position = match row.position {
                Some(p) => p,
                None => match ali.labels.last() {
                    None => 0,
                    Some(prev) => {
                        let new_segment = prev.symbol != symbol || prev.word != row.word || row.state < prev.state;
                        prev.position + u32::from(new_segment)
                    }
                },
            };
            ali.labels.push(FrameLabel {
                symbol,
                state: row.state,
                word: row.word,
                position,
            });
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn targets(ids: &[u32]) -> Vec<Target> {
        ids.iter()
            .map(|&s| Target {
                symbol: SymbolId(s),
                word: Some(0),
            })
            .collect()
    }

    #[test]
    fn repeated_symbols_stay_distinct() {
        let t = targets(&[3, 3]);
        let ali = FrameAlignment::from_state_path(&[0, 0, 1, 1], &t, 1, 30.0);
        assert_eq!(ali.symbol_sequence(), vec![SymbolId(3), SymbolId(3)]);
        ali.validate(&t, 1, None).unwrap();
    }

    #[test]
    fn validate_rejects_skipped_target() {
        let t = targets(&[1, 2, 3]);
        let ali = FrameAlignment::from_state_path(&[0, 2, 2], &t, 1, 10.0);
        assert!(ali.validate(&t, 1, None).is_err());
    }

    #[test]
    fn validate_rejects_decreasing_state() {
        let t = targets(&[1]);
        let mut ali = FrameAlignment::from_state_path(&[0, 1, 2], &t, 3, 10.0);
        ali.labels[2].state = 0;
        assert!(ali.validate(&t, 3, None).is_err());
    }

    #[test]
    fn text_round_trip_and_five_column_rows() {
        let t = targets(&[0, 1, 1]);
        let ali = FrameAlignment::from_state_path(&[0, 1, 2, 3, 4, 5, 6, 7, 8], &t, 3, 10.0);
        let mut set = AlignmentSet::new(vec!["a".into(), "b".into()]);
        set.utterances.insert("u1".into(), ali);
        let mut buf = Vec::new();
        set.write_text(&mut buf).unwrap();
        let back = AlignmentSet::read_text(&buf[..], Some(&set.symbols)).unwrap();
        assert_eq!(back, set);

        let text: String = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| {
                if l.starts_with('#') {
                    l.to_string()
                } else {
                    l.rsplit_once(' ').unwrap().0.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        let five = AlignmentSet::read_text(text.as_bytes(), Some(&set.symbols)).unwrap();
        assert_eq!(five, set);
    }
}
