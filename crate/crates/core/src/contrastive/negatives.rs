use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CpcError, Result};
use crate::rng::Rng;

/// Which latent frames may serve as negatives for a given positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSamplingStrategy {
    /// Any frame in the pool.
    #[default]
    MixedSource,
    /// Frames whose source matches the current sequence's source.
    SameSource,
    /// Any frame outside the current sequence.
    MixedSourceExcludingCurrent,
    /// Same-source frames from other sequences.
    SameSourceExcludingCurrent,
    /// Frames of the current sequence only.
    CurrentSequenceOnly,
}

impl NegativeSamplingStrategy {
    pub const ALL: [Self; 5] = [
        Self::MixedSource,
        Self::SameSource,
        Self::MixedSourceExcludingCurrent,
        Self::SameSourceExcludingCurrent,
        Self::CurrentSequenceOnly,
    ];

    /// Row label used in ablation reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::MixedSource => "Mixed speaker",
            Self::SameSource => "Same speaker",
            Self::MixedSourceExcludingCurrent => "Mixed speaker (excl.)",
            Self::SameSourceExcludingCurrent => "Same speaker (excl.)",
            Self::CurrentSequenceOnly => "Current sequence only",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::MixedSource => "mixed_source",
            Self::SameSource => "same_source",
            Self::MixedSourceExcludingCurrent => "mixed_source_excluding_current",
            Self::SameSourceExcludingCurrent => "same_source_excluding_current",
            Self::CurrentSequenceOnly => "current_sequence_only",
        }
    }

    /// Provenance predicate: may `frame` be a negative for a positive drawn
    /// from sequence `sequence` of source `source`?
    pub fn admits(self, sequence: usize, source: usize, frame: &FrameRef) -> bool {
        let same_seq = frame.sequence == sequence;
        let same_src = frame.source == source;
        match self {
            Self::MixedSource => true,
            Self::SameSource => same_src,
            Self::MixedSourceExcludingCurrent => !same_seq,
            Self::SameSourceExcludingCurrent => same_src && !same_seq,
            Self::CurrentSequenceOnly => same_seq,
        }
    }
}

/// Provenance of one latent frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub sequence: usize,
    pub source: usize,
    pub frame: usize,
}

/// Frames available for negative sampling, in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct FramePool {
    frames: Vec<FrameRef>,
}

impl FramePool {
    pub fn new(frames: Vec<FrameRef>) -> Self {
        Self { frames }
    }

    /// Pool over whole sequences given as `(sequence id, source id, frames)`.
    pub fn from_sequences(seqs: &[(usize, usize, usize)]) -> Self {
        let frames = seqs
            .iter()
            .flat_map(|&(sequence, source, n)| {
                (0..n).map(move |frame| FrameRef {
                    sequence,
                    source,
                    frame,
                })
            })
            .collect();
        Self { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, index: usize) -> FrameRef {
        self.frames[index]
    }

    pub fn frames(&self) -> &[FrameRef] {
        &self.frames
    }

    /// Pool indices admitted by `strategy` for the given positive.
    pub fn eligible(&self, strategy: NegativeSamplingStrategy, sequence: usize, source: usize) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| strategy.admits(sequence, source, f))
            .map(|(i, _)| i)
            .collect()
    }

    /// Draws `count` pool indices uniformly, with replacement, from the
    /// eligible set.
    pub fn draw(
        &self,
        strategy: NegativeSamplingStrategy,
        sequence: usize,
        source: usize,
        count: usize,
        rng: &mut Rng,
    ) -> Result<Vec<usize>> {
        let eligible = self.eligible(strategy, sequence, source);
        draw_from(&eligible, strategy, count, rng)
    }
}

pub(crate) fn draw_from(
    eligible: &[usize],
    strategy: NegativeSamplingStrategy,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if eligible.is_empty() {
        if count == 0 {
            return Ok(Vec::new());
        }
        return Err(CpcError::StrategyInfeasible {
            strategy: strategy.name(),
            reason: "no eligible frames in the pool".into(),
        });
    }
    Ok((0..count)
        .map(|_| eligible[rng.random_range(0..eligible.len())])
        .collect())
}

/// Draws `count` negatives for a positive from `(sequence, source)`.
pub fn draw_negatives(
    pool: &FramePool,
    strategy: NegativeSamplingStrategy,
    sequence: usize,
    source: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<FrameRef>> {
    Ok(pool
        .draw(strategy, sequence, source, count, rng)?
        .into_iter()
        .map(|i| pool.get(i))
        .collect())
}

/// Per-sequence cache of eligible sets, for drawing many negatives from one
/// pool under one strategy.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    strategy: NegativeSamplingStrategy,
    eligible: Vec<(usize, Vec<usize>)>,
}

impl NegativeSampler {
    /// Precomputes eligible sets for every sequence present in `pool`.
    pub fn new(pool: &FramePool, strategy: NegativeSamplingStrategy) -> Self {
        let mut seqs: Vec<(usize, usize)> = pool.frames.iter().map(|f| (f.sequence, f.source)).collect();
        seqs.sort_unstable();
        seqs.dedup();
        let eligible = seqs
            .into_iter()
            .map(|(seq, src)| (seq, pool.eligible(strategy, seq, src)))
            .collect();
        Self { strategy, eligible }
    }

    pub fn strategy(&self) -> NegativeSamplingStrategy {
        self.strategy
    }

    /// Fails when any sequence in the pool has an empty eligible set.
    pub fn check_feasible(&self) -> Result<()> {
        match self.eligible.iter().find(|(_, e)| e.is_empty()) {
            Some((seq, _)) => Err(CpcError::StrategyInfeasible {
                strategy: self.strategy.name(),
                reason: format!("sequence {seq} has no eligible negatives"),
            }),
            None => Ok(()),
        }
    }

    pub fn draw(&self, sequence: usize, count: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        let (_, e) = self
            .eligible
            .iter()
            .find(|(s, _)| *s == sequence)
            .ok_or_else(|| CpcError::invalid(format!("sequence {sequence} is not in the pool")))?;
        draw_from(e, self.strategy, count, rng)
    }
}
