//! Forced Viterbi over a left-to-right chain of states.
//!
//! Shared by the GMM aligner and the hybrid neural aligner. Each state either
//! stays (self-loop) or advances to the next one; a path may optionally start
//! at `alt_start` and end at `alt_end`, which is how leading/trailing silence
//! skipping is expressed.

pub(crate) struct Chain<'a> {
    pub n_states: usize,
    pub alt_start: Option<usize>,
    pub alt_end: Option<usize>,
    /// `(stay, advance)` log-probabilities out of each state.
    pub transitions: &'a dyn Fn(usize) -> (f64, f64),
}

pub(crate) struct BestPath {
    pub states: Vec<usize>,
    pub score: f64,
}

/// Returns `None` when no path of `n_frames` frames can reach an end state.
/// Ties prefer staying in the current state.
pub(crate) fn best_path(
    chain: &Chain<'_>,
    n_frames: usize,
    emit: impl Fn(usize, usize) -> f64,
) -> Option<BestPath> {
    let n = chain.n_states;
    if n == 0 || n_frames == 0 {
        return None;
    }
    let trans: Vec<(f64, f64)> = (0..n).map(|j| (chain.transitions)(j)).collect();
    let mut prev = vec![f64::NEG_INFINITY; n];
    let mut cur = vec![f64::NEG_INFINITY; n];
    // false = stayed, true = advanced
    let mut back = vec![false; n_frames * n];

    prev[0] = emit(0, 0);
    if let Some(s) = chain.alt_start {
        prev[s] = emit(0, s);
    }
    for t in 1..n_frames {
        // states beyond t+offset are unreachable; bound the loop for speed
        let reach = (t + 1 + chain.alt_start.unwrap_or(0)).min(n);
        for j in 0..reach {
            let stay = prev[j] + trans[j].0;
            let adv = if j > 0 {
                prev[j - 1] + trans[j - 1].1
            } else {
                f64::NEG_INFINITY
            };
            let (best, advanced) = if adv > stay { (adv, true) } else { (stay, false) };
            cur[j] = if best == f64::NEG_INFINITY {
                best
            } else {
                best + emit(t, j)
            };
            back[t * n + j] = advanced;
        }
        for v in cur.iter_mut().skip(reach) {
            *v = f64::NEG_INFINITY;
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let mut end = n - 1;
    if let Some(a) = chain.alt_end {
        if prev[a] > prev[end] {
            end = a;
        }
    }
    if prev[end] == f64::NEG_INFINITY {
        return None;
    }
    let score = prev[end];
    let mut states = vec![0; n_frames];
    let mut j = end;
    for t in (0..n_frames).rev() {
        states[t] = j;
        if t > 0 && back[t * n + j] {
            j -= 1;
        }
    }
    let start_ok = states[0] == 0 || Some(states[0]) == chain.alt_start;
    start_ok.then_some(BestPath { states, score })
}

/// Minimum number of frames a chain needs.
pub(crate) fn min_frames(chain: &Chain<'_>) -> usize {
    let start = chain.alt_start.unwrap_or(0);
    let end = chain.alt_end.unwrap_or(chain.n_states - 1);
    end.saturating_sub(start) + 1
}
