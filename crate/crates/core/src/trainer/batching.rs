use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Utterances per shuffle window before length-sorted packing.
pub const SHUFFLE_WINDOW: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Manifest indices.
    pub ids: Vec<usize>,
    /// Frames used per utterance (after trimming).
    pub frames: Vec<usize>,
}

impl Batch {
    pub fn real_frames(&self) -> usize {
        self.frames.iter().sum()
    }

    /// Frames after padding every member to the longest one.
    pub fn padded_frames(&self) -> usize {
        self.frames.iter().max().copied().unwrap_or(0) * self.frames.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    /// `usize::MAX` for fixed-count plans.
    pub frame_budget: usize,
}

impl BatchPlan {
    /// `(padded − real) / padded` over the whole plan.
    pub fn padding_waste(&self) -> f64 {
        let padded: usize = self.batches.iter().map(Batch::padded_frames).sum();
        let real: usize = self.batches.iter().map(Batch::real_frames).sum();
        if padded == 0 {
            0.0
        } else {
            (padded - real) as f64 / padded as f64
        }
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng_for(seed, "batch_shuffle", &[]));
    order
}

/// Dynamic batching: shuffle, then first-fit-decreasing packing of each
/// window of [`SHUFFLE_WINDOW`] utterances so that no batch holds more than
/// `frame_budget` real frames. Longer utterances are trimmed to the budget.
pub fn plan_batches(frames: &[usize], frame_budget: usize, seed: u64) -> Result<BatchPlan> {
    if frames.is_empty() {
        return Err(Error::Config("cannot batch an empty manifest".into()));
    }
    if frame_budget == 0 {
        return Err(Error::Config("frame budget must be positive".into()));
    }
    let order = shuffled(frames.len(), seed);
    let mut batches = Vec::new();
    for window in order.chunks(SHUFFLE_WINDOW) {
        let mut items: Vec<(usize, usize)> = window.iter().map(|&i| (i, frames[i].min(frame_budget))).collect();
        // longest first; equal lengths keep their shuffled order
        items.sort_by(|a, b| b.1.cmp(&a.1));
        let mut bins: Vec<Batch> = Vec::new();
        for (id, len) in items {
            match bins.iter_mut().find(|b| b.real_frames() + len <= frame_budget) {
                Some(b) => {
                    b.ids.push(id);
                    b.frames.push(len);
                }
                None => bins.push(Batch { ids: vec![id], frames: vec![len] }),
            }
        }
        batches.extend(bins);
    }
    Ok(BatchPlan { batches, frame_budget })
}

/// Naive batching: shuffle, then consecutive groups of `per_batch`.
pub fn plan_fixed(frames: &[usize], per_batch: usize, seed: u64) -> Result<BatchPlan> {
    if frames.is_empty() {
        return Err(Error::Config("cannot batch an empty manifest".into()));
    }
    if per_batch == 0 {
        return Err(Error::Config("fixed batch size must be positive".into()));
    }
    let order = shuffled(frames.len(), seed);
    let batches = order
        .chunks(per_batch)
        .map(|c| Batch { ids: c.to_vec(), frames: c.iter().map(|&i| frames[i]).collect() })
        .collect();
    Ok(BatchPlan { batches, frame_budget: usize::MAX })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singletons() {
        assert_eq!(plan_batches(&[10], 100, 0).unwrap().batches.len(), 1);
        let p = plan_batches(&[50; 5], 50, 3).unwrap();
        assert_eq!(p.batches.len(), 5);
        assert!(p.batches.iter().all(|b| b.ids.len() == 1));
    }

    #[test]
    fn trims_and_rejects_empty() {
        let p = plan_batches(&[500, 20], 100, 1).unwrap();
        assert!(p.batches.iter().all(|b| b.real_frames() <= 100));
        assert!(plan_batches(&[], 100, 1).is_err());
    }
}
