//! Prioritized experience replay: a sum tree over transition priorities
//! with stratified proportional sampling and importance-sampling weights.

use rand::Rng;
use thiserror::Error;

use crate::observation::InputSequence;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("requested {requested} samples from a buffer holding {len}")]
    NotEnough { requested: usize, len: usize },
}

/// Complete binary tree where every internal node stores the sum of its
/// children. Leaves hold per-slot priorities; the root is their total, so
/// a prefix-mass descent samples leaves proportionally.
#[derive(Clone, Debug)]
pub struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.next_power_of_two().max(1);
        SumTree {
            capacity,
            nodes: vec![0.0; 2 * capacity],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, index: usize) -> f64 {
        self.nodes[self.capacity + index]
    }

    /// Set the priority at `index` and refresh every ancestor as the sum of
    /// its children.
    pub fn update(&mut self, index: usize, priority: f64) {
        assert!(index < self.capacity, "leaf index out of range");
        assert!(
            priority >= 0.0 && priority.is_finite(),
            "priority must be finite and non-negative"
        );
        let mut i = self.capacity + index;
        self.nodes[i] = priority;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// Descend from the root, returning the leaf index whose cumulative
    /// priority interval contains `mass` (0 <= mass < total).
    pub fn find(&self, mut mass: f64) -> usize {
        let mut i = 1;
        while i < self.capacity {
            let left = 2 * i;
            if mass < self.nodes[left] {
                i = left;
            } else {
                mass -= self.nodes[left];
                i = left + 1;
            }
        }
        i - self.capacity
    }
}

/// A transition stored for replay. `terminal` is true only when the step
/// reached the goal; step-cap and lost-guidance stops bootstrap through
/// `next_state`.
#[derive(Clone, Debug)]
pub struct Transition {
    pub state: InputSequence,
    pub action: usize,
    pub reward: f64,
    pub next_state: InputSequence,
    pub terminal: bool,
}

/// A sampled slot: buffer index plus the normalized importance weight.
#[derive(Clone, Copy, Debug)]
pub struct SampleRef {
    pub index: usize,
    pub weight: f64,
}

/// Ring buffer of transitions with sum-tree priorities. Stored priorities
/// are `(|td| + eps)^alpha`; fresh transitions enter at the current maximum
/// so they are replayed at least once. Sampling is stratified: one uniform
/// draw inside each of `n` equal mass segments.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    tree: SumTree,
    data: Vec<Option<Transition>>,
    capacity: usize,
    next_slot: usize,
    len: usize,
    alpha: f64,
    eps: f64,
    max_priority: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, alpha: f64, eps: f64) -> Self {
        assert!(capacity > 0);
        assert!(eps > 0.0, "priority floor must be positive");
        ReplayBuffer {
            tree: SumTree::new(capacity),
            data: vec![None; capacity],
            capacity,
            next_slot: 0,
            len: 0,
            alpha,
            eps,
            max_priority: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn get(&self, index: usize) -> &Transition {
        self.data[index].as_ref().expect("occupied slot")
    }

    /// Insert a transition, overwriting the oldest slot once full.
    pub fn push(&mut self, transition: Transition) {
        let slot = self.next_slot;
        self.data[slot] = Some(transition);
        self.tree.update(slot, self.max_priority);
        self.next_slot = (self.next_slot + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    /// Re-prioritize a slot from its temporal-difference error magnitude.
    pub fn update_priority(&mut self, index: usize, td_abs: f64) {
        let p = (td_abs.abs() + self.eps).powf(self.alpha);
        self.tree.update(index, p);
        if p > self.max_priority {
            self.max_priority = p;
        }
    }

    /// Stratified proportional sample of `n` slots. Weights are
    /// `(len * P(i))^-beta`, normalized by the batch maximum.
    pub fn sample(
        &self,
        n: usize,
        beta: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<SampleRef>, ReplayError> {
        if n == 0 || self.len < n {
            return Err(ReplayError::NotEnough {
                requested: n,
                len: self.len,
            });
        }
        let total = self.tree.total();
        debug_assert!(total > 0.0);
        let segment = total / n as f64;
        let mut out = Vec::with_capacity(n);
        let mut max_weight = 0.0f64;
        for k in 0..n {
            let mass = segment * (k as f64 + rng.gen::<f64>());
            let mut index = self.tree.find(mass.min(total * (1.0 - 1e-12)));
            if index >= self.len {
                // Float edge at segment boundaries can land on an empty
                // leaf; clamp to the last occupied slot.
                index = self.len - 1;
            }
            let prob = self.tree.get(index) / total;
            let weight = (self.len as f64 * prob).powf(-beta);
            max_weight = max_weight.max(weight);
            out.push(SampleRef { index, weight });
        }
        for s in &mut out {
            s.weight /= max_weight;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::InputSequence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dummy_transition(reward: f64) -> Transition {
        let seq = InputSequence::empty(2, 3, 3);
        Transition {
            state: seq.clone(),
            action: 0,
            reward,
            next_state: seq,
            terminal: false,
        }
    }

    #[test]
    fn root_is_sum_of_leaves() {
        let mut tree = SumTree::new(8);
        tree.update(0, 1.5);
        tree.update(3, 2.5);
        tree.update(7, 4.0);
        assert!((tree.total() - 8.0).abs() < 1e-12);
        tree.update(3, 0.5);
        assert!((tree.total() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn root_invariant_under_random_ops() {
        let mut tree = SumTree::new(64);
        let mut shadow = vec![0.0f64; 64];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100_000 {
            let i = rng.gen_range(0..64);
            let p = rng.gen::<f64>() * 10.0;
            tree.update(i, p);
            shadow[i] = p;
            let brute: f64 = shadow.iter().sum();
            assert!(
                (tree.total() - brute).abs() <= 1e-9 * brute.max(1.0),
                "root {} vs brute {}",
                tree.total(),
                brute
            );
        }
    }

    #[test]
    fn find_maps_mass_to_leaf() {
        let mut tree = SumTree::new(4);
        tree.update(0, 1.0);
        tree.update(1, 1.0);
        tree.update(2, 2.0);
        assert_eq!(tree.find(0.5), 0);
        assert_eq!(tree.find(1.5), 1);
        assert_eq!(tree.find(2.5), 2);
        assert_eq!(tree.find(3.9), 2);
    }

    #[test]
    fn proportional_sampling_frequencies() {
        let mut buf = ReplayBuffer::new(4, 1.0, 1e-6);
        for _ in 0..3 {
            buf.push(dummy_transition(0.0));
        }
        // Priorities [1, 1, 2] at alpha = 1.
        buf.update_priority(0, 1.0 - 1e-6);
        buf.update_priority(1, 1.0 - 1e-6);
        buf.update_priority(2, 2.0 - 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 3];
        let draws = 100_000;
        for _ in 0..draws / 2 {
            for s in buf.sample(2, 1.0, &mut rng).unwrap() {
                counts[s.index] += 1;
            }
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
        assert!((freq[0] - 0.25).abs() < 0.02, "freq {freq:?}");
        assert!((freq[1] - 0.25).abs() < 0.02, "freq {freq:?}");
        assert!((freq[2] - 0.5).abs() < 0.02, "freq {freq:?}");
    }

    #[test]
    fn equal_priorities_give_unit_weights() {
        let mut buf = ReplayBuffer::new(8, 0.6, 1e-6);
        for _ in 0..8 {
            buf.push(dummy_transition(0.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = buf.sample(4, 0.7, &mut rng).unwrap();
        for s in samples {
            assert!((s.weight - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_td_keeps_floor_priority() {
        let mut buf = ReplayBuffer::new(4, 1.0, 1e-6);
        for _ in 0..2 {
            buf.push(dummy_transition(0.0));
        }
        buf.update_priority(0, 0.0);
        assert!(buf.tree.get(0) > 0.0);
        assert!((buf.tree.get(0) - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(4, 0.6, 1e-6);
        for i in 0..6 {
            buf.push(dummy_transition(i as f64));
        }
        assert_eq!(buf.len(), 4);
        // Slots 0 and 1 were overwritten by rewards 4 and 5.
        assert_eq!(buf.get(0).reward, 4.0);
        assert_eq!(buf.get(1).reward, 5.0);
        assert_eq!(buf.get(2).reward, 2.0);
    }

    #[test]
    fn sampling_underfilled_buffer_fails() {
        let mut buf = ReplayBuffer::new(8, 0.6, 1e-6);
        buf.push(dummy_transition(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(buf.sample(2, 0.4, &mut rng).is_err());
        assert!(ReplayBuffer::new(8, 0.6, 1e-6)
            .sample(1, 0.4, &mut rng)
            .is_err());
    }
}
