use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, DomainManifest, SampleRecord};
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Record indices (into the manifest) for one training batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.source.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Source indices followed by target indices.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.source.iter().chain(&self.target).copied()
    }

    pub fn source_items<'a>(&self, m: &'a DomainManifest) -> Vec<&'a SampleRecord> {
        self.source.iter().map(|&i| m.record(i)).collect()
    }

    pub fn target_items<'a>(&self, m: &'a DomainManifest) -> Vec<&'a SampleRecord> {
        self.target.iter().map(|&i| m.record(i)).collect()
    }

    pub fn ids(&self, m: &DomainManifest) -> Vec<String> {
        self.indices()
            .map(|i| m.record(i).id().to_string())
            .collect()
    }
}

/// Draws `n` items from a queue that is refilled with a fresh shuffle of
/// `pool` whenever it runs dry.
fn draw_cycling<R: Rng>(
    queue: &mut Vec<usize>,
    pool: &[usize],
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    if pool.is_empty() {
        return out;
    }
    while out.len() < n {
        if queue.is_empty() {
            let mut fresh = pool.to_vec();
            fresh.shuffle(rng);
            // popped from the back, so reverse to serve in shuffled order
            fresh.reverse();
            *queue = fresh;
        }
        out.push(queue.pop().expect("queue refilled"));
    }
    out
}

fn source_share(batch_size: usize) -> usize {
    batch_size.div_ceil(2)
}

/// One-shot mixed batch: `ceil(B/2)` items from the active source set and
/// `floor(B/2)` target items. When either side is smaller than its share the
/// draw wraps around with a reshuffle.
pub fn sample_mixed_batch(
    m: &DomainManifest,
    active_source_ids: &BTreeSet<String>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MixedBatch> {
    if batch_size < 2 {
        return Err(Error::invalid("batch size must be at least 2"));
    }
    if active_source_ids.is_empty() {
        return Err(Error::invalid("active source set is empty"));
    }
    let active = resolve_active(m, active_source_ids)?;
    let targets = m.indices(Domain::Target);
    let source = draw_cycling(&mut Vec::new(), &active, source_share(batch_size), rng);
    let target = draw_cycling(&mut Vec::new(), &targets, batch_size / 2, rng);
    Ok(MixedBatch { source, target })
}

fn resolve_active(m: &DomainManifest, ids: &BTreeSet<String>) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| match m.index_of(id) {
            Some(i) if m.record(i).domain() == Domain::Source => Ok(i),
            _ => Err(Error::invalid(format!("{id:?} is not a source record"))),
        })
        .collect()
}

/// Resumable sampler state between epochs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub rng: RngState,
    pub target_queue: Vec<usize>,
}

/// Epoch-paced sampler: an epoch is one pass over the active source subset,
/// while target items cycle independently across epochs.
pub struct MixedBatchSampler {
    rng: ChaCha8Rng,
    batch_size: usize,
    targets: Vec<usize>,
    target_queue: Vec<usize>,
    active: Vec<usize>,
    source_queue: Vec<usize>,
    remaining: usize,
}

impl MixedBatchSampler {
    pub fn new(m: &DomainManifest, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        Ok(Self {
            rng,
            batch_size,
            targets: m.indices(Domain::Target),
            target_queue: Vec::new(),
            active: Vec::new(),
            source_queue: Vec::new(),
            remaining: 0,
        })
    }

    pub fn restore(m: &DomainManifest, batch_size: usize, state: &SamplerState) -> Result<Self> {
        let rng = state
            .rng
            .restore()
            .ok_or_else(|| Error::invalid("malformed sampler rng state"))?;
        let mut s = Self::new(m, batch_size, rng)?;
        if state.target_queue.iter().any(|i| !s.targets.contains(i)) {
            return Err(Error::invalid(
                "sampler state references non-target records",
            ));
        }
        s.target_queue = state.target_queue.clone();
        Ok(s)
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            rng: RngState::capture(&self.rng),
            target_queue: self.target_queue.clone(),
        }
    }

    /// Starts a pass over `active` (record indices of source items).
    pub fn begin_epoch(&mut self, active: &[usize]) -> Result<()> {
        if active.is_empty() {
            return Err(Error::invalid("active source set is empty"));
        }
        self.active = active.to_vec();
        self.source_queue.clear();
        self.remaining = active.len();
        Ok(())
    }

    /// Number of batches in the current epoch: `ceil(|A| / ceil(B/2))`.
    pub fn steps_per_epoch(&self) -> usize {
        self.active.len().div_ceil(source_share(self.batch_size))
    }

    pub fn next_batch(&mut self) -> Option<MixedBatch> {
        if self.remaining == 0 {
            return None;
        }
        let share = source_share(self.batch_size);
        let source = draw_cycling(&mut self.source_queue, &self.active, share, &mut self.rng);
        self.remaining = self.remaining.saturating_sub(share);
        let target = draw_cycling(
            &mut self.target_queue,
            &self.targets,
            self.batch_size / 2,
            &mut self.rng,
        );
        Some(MixedBatch { source, target })
    }
}
