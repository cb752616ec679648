use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which update a step triggered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    #[default]
    None,
    Short,
    Long,
}

/// Outcome of the per-frame decision rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decision {
    pub success: bool,
    pub update: UpdateKind,
}

/// The score test and update rule, kept separate from the network so the
/// control flow can be driven with scripted scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub tau_int: usize,
    pub threshold: f64,
}

impl Schedule {
    /// Frame `t` (1-based) with best score `score`: failure below the
    /// threshold triggers a short-term update; otherwise every `tau_int`-th
    /// frame triggers a long-term one. A score equal to the threshold
    /// counts as success.
    pub fn decide(&self, t: usize, score: f64) -> Decision {
        let success = score >= self.threshold;
        let update = if !success {
            UpdateKind::Short
        } else if self.tau_int > 0 && t.is_multiple_of(self.tau_int) {
            UpdateKind::Long
        } else {
            UpdateKind::None
        };
        Decision { success, update }
    }
}

/// Short- and long-term frame memories. Both receive every successful
/// frame and evict oldest first; the long memory keeps the positive
/// payload `P`, the short memory the negative payload `N`.
#[derive(Clone, Debug)]
pub struct MemoryStore<P, N> {
    tau_short: usize,
    tau_long: usize,
    short: VecDeque<(usize, N)>,
    long: VecDeque<(usize, P)>,
}

impl<P, N> MemoryStore<P, N> {
    pub fn new(tau_short: usize, tau_long: usize) -> Result<Self> {
        if tau_short == 0 || tau_short > tau_long {
            return Err(Error::InvalidArgument(format!(
                "memory sizes need 0 < tau_short ≤ tau_long, got {tau_short} and {tau_long}"
            )));
        }
        Ok(Self {
            tau_short,
            tau_long,
            short: VecDeque::with_capacity(tau_short + 1),
            long: VecDeque::with_capacity(tau_long + 1),
        })
    }

    pub fn push(&mut self, frame: usize, positives: P, negatives: N) {
        self.short.push_back((frame, negatives));
        self.long.push_back((frame, positives));
        while self.short.len() > self.tau_short {
            self.short.pop_front();
        }
        while self.long.len() > self.tau_long {
            self.long.pop_front();
        }
    }

    pub fn short_frames(&self) -> Vec<usize> {
        self.short.iter().map(|(t, _)| *t).collect()
    }

    pub fn long_frames(&self) -> Vec<usize> {
        self.long.iter().map(|(t, _)| *t).collect()
    }

    /// Positive payloads of frames in the short memory.
    pub fn short_positives(&self) -> impl Iterator<Item = &P> {
        let first = self.short.front().map_or(usize::MAX, |(t, _)| *t);
        self.long
            .iter()
            .filter(move |(t, _)| *t >= first)
            .map(|(_, p)| p)
    }

    pub fn long_positives(&self) -> impl Iterator<Item = &P> {
        self.long.iter().map(|(_, p)| p)
    }

    pub fn short_negatives(&self) -> impl Iterator<Item = &N> {
        self.short.iter().map(|(_, n)| n)
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.long.iter().any(|(t, _)| *t == frame)
    }

    /// One frame of bookkeeping: decides, and on success admits frame `t`
    /// with the samples `collect` produces. Failed frames never enter.
    pub fn record(
        &mut self,
        schedule: &Schedule,
        t: usize,
        score: f64,
        collect: impl FnOnce() -> Result<(P, N)>,
    ) -> Result<Decision> {
        let decision = schedule.decide(t, score);
        if decision.success {
            let (p, n) = collect()?;
            self.push(t, p, n);
        }
        Ok(decision)
    }

    /// Payloads an update of `kind` trains on: positives from the short
    /// (short update) or long (long update) memory, negatives always from
    /// the short memory. `None` when no update is due.
    pub fn training_set(&self, kind: UpdateKind) -> Option<(Vec<&P>, Vec<&N>)> {
        let pos = match kind {
            UpdateKind::None => return None,
            UpdateKind::Short => self.short_positives().collect(),
            UpdateKind::Long => self.long_positives().collect(),
        };
        Some((pos, self.short_negatives().collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_rule() {
        let s = Schedule {
            tau_int: 10,
            threshold: 0.5,
        };
        assert_eq!(s.decide(5, 0.2).update, UpdateKind::Short);
        assert_eq!(s.decide(10, 0.2).update, UpdateKind::Short);
        assert_eq!(s.decide(10, 0.9).update, UpdateKind::Long);
        assert_eq!(s.decide(11, 0.9).update, UpdateKind::None);
        let tie = s.decide(20, 0.5);
        assert!(tie.success);
        assert_eq!(tie.update, UpdateKind::Long);
    }

    #[test]
    fn eviction_and_subset() {
        let mut m: MemoryStore<usize, usize> = MemoryStore::new(2, 3).unwrap();
        for t in 1..=5 {
            m.push(t, t, 10 * t);
        }
        assert_eq!(m.short_frames(), vec![4, 5]);
        assert_eq!(m.long_frames(), vec![3, 4, 5]);
        assert_eq!(m.short_positives().copied().collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(
            m.short_negatives().copied().collect::<Vec<_>>(),
            vec![40, 50]
        );
        assert!(MemoryStore::<(), ()>::new(4, 3).is_err());
        assert!(MemoryStore::<(), ()>::new(0, 3).is_err());
    }
}
