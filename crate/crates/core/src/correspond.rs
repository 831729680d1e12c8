//! Lagged correspondence counts between a cause and an effect event series.
//!
//! For lag `l` and tolerance `tau`, slot `t` of the cause is paired with
//! slots `t + l ..= t + l + tau` of the effect, for every `t` in the window
//! `0 .. M - l - tau`. Each cause event is matched to at most one effect
//! event (the earliest unmatched one in its range) and each effect event
//! to at most one cause event.
//!
//! | cell  | meaning                                                       |
//! |-------|---------------------------------------------------------------|
//! | `a11` | cause event matched to an effect event                        |
//! | `a10` | cause event with no match                                     |
//! | `a01` | no cause event, unmatched effect event at exactly `t + l`     |
//! | `a00` | everything else in the window                                 |

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::EventSeries;

#[derive(Debug, Error, PartialEq)]
pub enum CorrespondError {
    #[error("lag must be at least 1")]
    ZeroLag,
    #[error("lag {lag} outside [1, {l_max}]")]
    Lag { lag: usize, l_max: usize },
    #[error("series lengths differ: {cause} vs {effect}")]
    LengthMismatch { cause: usize, effect: usize },
    #[error("lag {lag} + tolerance {tau} leaves no slots to compare in a series of {len}")]
    EmptyWindow { lag: usize, tau: usize, len: usize },
}

/// Sorted event positions of one series plus a bitset for O(1) membership.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventIndex {
    len: usize,
    positions: Vec<u32>,
    bits: Vec<u64>,
}

impl EventIndex {
    pub fn from_events(events: &[bool]) -> Self {
        let mut bits = vec![0u64; events.len().div_ceil(64)];
        let mut positions = Vec::new();
        for (t, _) in events.iter().enumerate().filter(|(_, &e)| e) {
            bits[t / 64] |= 1 << (t % 64);
            positions.push(t as u32);
        }
        Self {
            len: events.len(),
            positions,
            bits,
        }
    }

    pub fn from_series(series: &EventSeries) -> Self {
        Self::from_events(series.events())
    }

    /// Number of slots `M`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of events.
    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    #[inline]
    pub fn contains(&self, t: usize) -> bool {
        t < self.len && self.bits[t / 64] & (1 << (t % 64)) != 0
    }

    /// Event positions falling in `range`.
    fn within(&self, range: Range<usize>) -> &[u32] {
        let lo = self.positions.partition_point(|&p| (p as usize) < range.start);
        let hi = self.positions.partition_point(|&p| (p as usize) < range.end);
        &self.positions[lo..hi]
    }
}

/// Contingency counts for one `(cause, effect, lag, tau)` tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorrespondenceCounts {
    pub a00: u64,
    pub a01: u64,
    pub a10: u64,
    pub a11: u64,
    pub lag: usize,
    pub tau: usize,
    /// Number of compared slot pairs; equals `a00 + a01 + a10 + a11`.
    pub window: u64,
}

impl CorrespondenceCounts {
    /// Counts given cell by cell (e.g. read back from a file).
    pub fn from_cells(a00: u64, a01: u64, a10: u64, a11: u64) -> Self {
        Self {
            a00,
            a01,
            a10,
            a11,
            lag: 0,
            tau: 0,
            window: a00 + a01 + a10 + a11,
        }
    }

    pub fn cells(&self) -> [u64; 4] {
        [self.a00, self.a01, self.a10, self.a11]
    }

    pub fn scaled(&self, k: u64) -> Self {
        Self {
            a00: self.a00 * k,
            a01: self.a01 * k,
            a10: self.a10 * k,
            a11: self.a11 * k,
            window: self.window * k,
            ..*self
        }
    }
}

/// Count correspondences of `cause` against `effect` at `lag` with
/// tolerance `tau`. `lag` must be at least 1; callers sweeping a lag range
/// enforce its upper bound (see [`sweep_counts`]).
pub fn count_correspondences(
    cause: &EventIndex,
    effect: &EventIndex,
    lag: usize,
    tau: usize,
) -> Result<CorrespondenceCounts, CorrespondError> {
    if lag == 0 {
        return Err(CorrespondError::ZeroLag);
    }
    if cause.len != effect.len {
        return Err(CorrespondError::LengthMismatch {
            cause: cause.len,
            effect: effect.len,
        });
    }
    let len = cause.len;
    if lag + tau >= len {
        return Err(CorrespondError::EmptyWindow { lag, tau, len });
    }
    let window = len - lag - tau;
    let causes = cause.within(0..window);
    let effects = effect.within(lag..lag + window);

    let (a11, a10, a01) = if tau == 0 {
        // probe the smaller side against the other's bitset
        let a11 = if causes.len() <= effects.len() {
            causes.iter().filter(|&&t| effect.contains(t as usize + lag)).count()
        } else {
            effects.iter().filter(|&&p| cause.contains(p as usize - lag)).count()
        };
        (a11, causes.len() - a11, effects.len() - a11)
    } else {
        // Intervals [t+lag, t+lag+tau] all have the same width and arrive in
        // increasing order, so earliest-unmatched greedy matching is a single
        // forward pass: effect events left behind can never be matched later.
        let candidates = effect.within(lag..len);
        let mut next = 0;
        let mut a11 = 0;
        let mut matched_in_window = 0;
        for &t in causes {
            let lo = t as usize + lag;
            while next < candidates.len() && (candidates[next] as usize) < lo {
                next += 1;
            }
            if next < candidates.len() && candidates[next] as usize <= lo + tau {
                a11 += 1;
                if (candidates[next] as usize) < lag + window {
                    matched_in_window += 1;
                }
                next += 1;
            }
        }
        (a11, causes.len() - a11, effects.len() - matched_in_window)
    };

    let (a11, a10, a01) = (a11 as u64, a10 as u64, a01 as u64);
    let window = window as u64;
    Ok(CorrespondenceCounts {
        a00: window - a11 - a10 - a01,
        a01,
        a10,
        a11,
        lag,
        tau,
        window,
    })
}

/// Counts for one ordered station pair at one lag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCounts {
    pub cause: usize,
    pub effect: usize,
    pub counts: CorrespondenceCounts,
}

/// Count every ordered pair `i != j` at every lag `1..=l_max`.
///
/// Runs in parallel; the result is ordered by `(cause, effect, lag)`.
pub fn sweep_counts(indexes: &[EventIndex], l_max: usize, tau: usize) -> Result<Vec<PairCounts>, CorrespondError> {
    if l_max == 0 {
        return Err(CorrespondError::Lag { lag: 0, l_max });
    }
    let n = indexes.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let nested: Vec<Vec<PairCounts>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            (1..=l_max)
                .map(|lag| {
                    count_correspondences(&indexes[i], &indexes[j], lag, tau).map(|counts| PairCounts {
                        cause: i,
                        effect: j,
                        counts,
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(nested.into_iter().flatten().collect())
}
