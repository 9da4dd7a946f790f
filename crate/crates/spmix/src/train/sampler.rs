//! Batch composition: class-balanced draws with head partners for tail
//! samples (the online realization of the balanced dataset), plus the plain
//! shuffled sampler for the long-tailed CE baseline.

use crate::error::{Result, SpmixError};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One batch slot: a dataset index, plus a head-class partner index when the
/// sample belongs to a tail class and is eligible for mixing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub sample: usize,
    pub partner: Option<usize>,
}

/// Draws `batch` slots: class uniform over all classes, instance uniform
/// within the class. Tail-class draws get a partner drawn uniformly over
/// all head-class images; head-class draws pass through unmixed.
pub fn sample_balanced_batch(
    by_class: &[Vec<usize>],
    is_head: &[bool],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchItem>> {
    if by_class.is_empty() || by_class.iter().any(|c| c.is_empty()) {
        return Err(SpmixError::config(
            "balanced sampling needs at least one sample per class".to_string(),
        ));
    }
    if is_head.len() != by_class.len() {
        return Err(SpmixError::contract(format!(
            "head flags length {} does not match class count {}",
            is_head.len(),
            by_class.len()
        )));
    }
    let head_pool: Vec<usize> = by_class
        .iter()
        .zip(is_head)
        .filter(|(_, &h)| h)
        .flat_map(|(c, _)| c.iter().copied())
        .collect();
    if head_pool.is_empty() {
        return Err(SpmixError::config(
            "no head class configured: cannot draw mixup partners".to_string(),
        ));
    }
    let k = by_class.len();
    let mut items = Vec::with_capacity(batch);
    for _ in 0..batch {
        let class = rng.random_range(0..k);
        let sample = by_class[class][rng.random_range(0..by_class[class].len())];
        let partner = if is_head[class] {
            None
        } else {
            Some(head_pool[rng.random_range(0..head_pool.len())])
        };
        items.push(BatchItem { sample, partner });
    }
    Ok(items)
}

/// Natural-distribution epoch order for the CE baseline: one seeded shuffle
/// of all indices, chunked into batches by the caller.
pub fn shuffled_epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
