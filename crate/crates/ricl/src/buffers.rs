//! Bounded sample buffers with reservoir eviction: the delay partitions and
//! the long-lived replay stores.
//!
//! Eviction is reservoir sampling over the pushed stream, so after `t`
//! pushes into a buffer of capacity `k` every pushed item is resident with
//! probability `k/t`. An admission-stop policy (keep the first `k`, drop
//! the rest) is available behind a flag.

use rand::Rng;
use std::collections::HashSet;

use crate::error::{Result, RiclError};
use crate::stream::Sample;

/// What happened to a pushed sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    /// Stored without displacing anything.
    Stored,
    /// Stored by evicting the resident sample with the given id.
    Evicted(u64),
    /// Not admitted.
    Dropped,
}

/// Eviction policy once the buffer is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvictionPolicy {
    /// Uniform-over-stream retention.
    #[default]
    Reservoir,
    /// Keep the first `capacity` admissions, drop later pushes.
    AdmissionStop,
}

/// Fixed-capacity sample store with unique ids.
#[derive(Debug, Clone)]
pub struct BoundedBuffer {
    capacity: usize,
    items: Vec<Sample>,
    ids: HashSet<u64>,
    seen_count: u64,
    policy: EvictionPolicy,
}

impl BoundedBuffer {
    pub fn new(capacity: usize) -> Self {
        Self::with_policy(capacity, EvictionPolicy::Reservoir)
    }

    pub fn with_policy(capacity: usize, policy: EvictionPolicy) -> Self {
        BoundedBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(4096)),
            ids: HashSet::new(),
            seen_count: 0,
            policy,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of pushes attempted over the buffer's lifetime.
    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    pub fn contains_id(&self, id: u64) -> bool {
        self.ids.contains(&id)
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    /// Resident sample ids in storage order.
    pub fn ids_in_order(&self) -> Vec<u64> {
        self.items.iter().map(|s| s.id).collect()
    }

    pub fn clear(&mut self) {
        self.items.clear();
        self.ids.clear();
        self.seen_count = 0;
    }

    /// Admits a sample. Under capacity it is appended; at capacity the
    /// reservoir rule replaces a uniform-random resident with probability
    /// `capacity / seen_count`, otherwise the incoming sample is dropped.
    pub fn push<R: Rng>(&mut self, sample: Sample, rng: &mut R) -> Result<PushOutcome> {
        if self.ids.contains(&sample.id) {
            return Err(RiclError::DuplicateId(sample.id));
        }
        self.seen_count += 1;
        if self.capacity == 0 {
            return Ok(PushOutcome::Dropped);
        }
        if self.items.len() < self.capacity {
            self.ids.insert(sample.id);
            self.items.push(sample);
            return Ok(PushOutcome::Stored);
        }
        match self.policy {
            EvictionPolicy::AdmissionStop => Ok(PushOutcome::Dropped),
            EvictionPolicy::Reservoir => {
                let slot = rng.gen_range(0..self.seen_count);
                if (slot as usize) < self.capacity {
                    let evicted = std::mem::replace(&mut self.items[slot as usize], sample);
                    self.ids.remove(&evicted.id);
                    self.ids.insert(self.items[slot as usize].id);
                    Ok(PushOutcome::Evicted(evicted.id))
                } else {
                    Ok(PushOutcome::Dropped)
                }
            }
        }
    }

    /// Draws `n` samples uniformly without replacement (everything when
    /// `n >= len`). The buffer itself is unchanged.
    pub fn sample_batch<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<Sample>> {
        if self.items.is_empty() {
            return Err(RiclError::Empty("sample_batch: buffer".into()));
        }
        let take = n.min(self.items.len());
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        // Partial Fisher-Yates: fix the first `take` positions.
        for i in 0..take {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        Ok(idx[..take].iter().map(|i| self.items[*i].clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn sample(id: u64) -> Sample {
        Sample {
            id,
            tokens: vec!["tok".to_string()],
            y_true: 0,
            y: 0,
            y_model: None,
            task_id: 0,
            is_noisy: false,
        }
    }

    #[test]
    fn push_under_capacity_appends() {
        let mut buf = BoundedBuffer::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(buf.push(sample(1), &mut rng).unwrap(), PushOutcome::Stored);
        assert_eq!(buf.push(sample(2), &mut rng).unwrap(), PushOutcome::Stored);
        assert_eq!(buf.ids_in_order(), vec![1, 2]);
    }

    #[test]
    fn capacity_zero_drops_everything() {
        let mut buf = BoundedBuffer::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for id in 0..10 {
            assert_eq!(buf.push(sample(id), &mut rng).unwrap(), PushOutcome::Dropped);
        }
        assert!(buf.is_empty());
        assert_eq!(buf.seen_count(), 10);
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let mut buf = BoundedBuffer::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        buf.push(sample(7), &mut rng).unwrap();
        assert!(matches!(
            buf.push(sample(7), &mut rng),
            Err(RiclError::DuplicateId(7))
        ));
    }

    #[test]
    fn admission_stop_keeps_first_k() {
        let mut buf = BoundedBuffer::with_policy(3, EvictionPolicy::AdmissionStop);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for id in 0..10 {
            buf.push(sample(id), &mut rng).unwrap();
        }
        assert_eq!(buf.ids_in_order(), vec![0, 1, 2]);
    }

    #[test]
    fn reservoir_retention_is_uniform() {
        // Push 10k items through capacity 100 over 1000 trials; probe items
        // spread across the stream must each be retained with probability
        // 0.01 within 3 sigma.
        let capacity = 100;
        let stream_len = 10_000u64;
        let trials = 1000;
        let probes = [0u64, 99, 500, 5_000, 9_999];
        let mut retained: HashMap<u64, u32> = probes.iter().map(|p| (*p, 0)).collect();
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let mut buf = BoundedBuffer::new(capacity);
            for id in 0..stream_len {
                buf.push(sample(id), &mut rng).unwrap();
            }
            for p in probes {
                if buf.contains_id(p) {
                    *retained.get_mut(&p).unwrap() += 1;
                }
            }
        }
        let expected = capacity as f64 / stream_len as f64;
        let sigma = (expected * (1.0 - expected) / trials as f64).sqrt();
        for (p, count) in retained {
            let freq = count as f64 / trials as f64;
            assert!(
                (freq - expected).abs() < 3.0 * sigma,
                "probe {p}: retention {freq} outside 3 sigma of {expected}"
            );
        }
    }

    #[test]
    fn sample_batch_full_draw_returns_everything_once() {
        let mut buf = BoundedBuffer::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for id in 0..5 {
            buf.push(sample(id), &mut rng).unwrap();
        }
        let batch = buf.sample_batch(100, &mut rng).unwrap();
        let mut ids: Vec<u64> = batch.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sample_batch_rejects_empty_buffer() {
        let buf = BoundedBuffer::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(buf.sample_batch(1, &mut rng).is_err());
    }

    #[test]
    fn sample_batch_single_draw_is_uniform() {
        let mut buf = BoundedBuffer::new(16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for id in 0..10 {
            buf.push(sample(id), &mut rng).unwrap();
        }
        let mut counts = vec![0u32; 10];
        for _ in 0..10_000 {
            let batch = buf.sample_batch(1, &mut rng).unwrap();
            counts[batch[0].id as usize] += 1;
        }
        let sigma = (0.1f64 * 0.9 / 10_000.0).sqrt();
        for (id, c) in counts.iter().enumerate() {
            let freq = *c as f64 / 10_000.0;
            assert!(
                (freq - 0.1).abs() < 3.0 * sigma,
                "item {id} frequency {freq} outside 3 sigma of 0.1"
            );
        }
    }

    #[test]
    fn sample_batch_ids_are_subset_of_buffer() {
        let mut buf = BoundedBuffer::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in 0..8 {
            buf.push(sample(id * 3), &mut rng).unwrap();
        }
        for _ in 0..50 {
            let batch = buf.sample_batch(3, &mut rng).unwrap();
            for s in &batch {
                assert!(buf.contains_id(s.id));
            }
        }
    }

    proptest! {
        /// Capacity is never exceeded and ids stay unique over arbitrary
        /// push/sample/clear sequences.
        #[test]
        fn capacity_never_exceeded(
            capacity in 0usize..20,
            ops in proptest::collection::vec(0u8..10, 1..300),
            seed in 0u64..1000,
        ) {
            let mut buf = BoundedBuffer::new(capacity);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut next_id = 0u64;
            for op in ops {
                match op {
                    0..=6 => {
                        buf.push(sample(next_id), &mut rng).unwrap();
                        next_id += 1;
                    }
                    7..=8 => {
                        if !buf.is_empty() {
                            let _ = buf.sample_batch(3, &mut rng).unwrap();
                        }
                    }
                    _ => buf.clear(),
                }
                prop_assert!(buf.len() <= capacity);
                let ids = buf.ids_in_order();
                let unique: std::collections::HashSet<u64> = ids.iter().copied().collect();
                prop_assert_eq!(unique.len(), ids.len());
            }
        }
    }
}
