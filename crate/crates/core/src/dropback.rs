//! The Dropback optimizer.
//!
//! Only the `k` weights with the largest accumulated displacement from their
//! initial value are stored. Every other weight reads as its regenerated
//! initial value. Each unfrozen step, untracked weights compete for a slot
//! with the size of their would-be first update `|lr * g|`; a bounded
//! min-priority queue keeps the `k` best keys over tracked and candidate
//! weights, evicting the smallest.
//!
//! A tracked entry holds the current weight value rather than the raw
//! displacement, so updates are computed exactly as dense SGD computes them
//! (`w <- w - lr * v`); the displacement is `w - init(id)`.

use crate::error::{Error, Result};
use crate::init::{self, ParamId, ParamLayout, Seed};
use crate::nn::{GradientBuffer, ParamView};
use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

/// One stored weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackedEntry {
    pub id: ParamId,
    /// Current value `init(id) + delta`.
    pub value: f32,
    pub velocity: f32,
}

/// Churn observables of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step_index: u64,
    pub admitted: usize,
    pub evicted: usize,
    /// Smallest surviving key (the admission threshold once the set is full).
    pub lambda: f32,
    pub tracked: usize,
}

/// Ranking used by the queue: larger key wins, equal keys go to the lower id.
#[derive(Clone, Copy, Debug)]
struct Rank {
    key: f32,
    global: u64,
    slot: Slot,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    /// Index into the set's entry list.
    Tracked(usize),
    /// Untracked weight with this gradient.
    Candidate(f32),
}

impl PartialEq for Rank {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Rank {}
impl PartialOrd for Rank {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Rank {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key
            .total_cmp(&other.key)
            .then_with(|| other.global.cmp(&self.global))
    }
}

/// The bounded tracked set `T`.
#[derive(Clone, Debug)]
pub struct TrackedSet {
    capacity: usize,
    seed: Seed,
    layout: ParamLayout,
    /// Sorted by id.
    entries: Vec<TrackedEntry>,
    frozen: bool,
    steps: u64,
}

impl TrackedSet {
    pub fn new(capacity: usize, seed: Seed, layout: ParamLayout) -> Result<Self> {
        if capacity == 0 || capacity > layout.total() {
            return Err(Error::Config(format!(
                "tracked capacity {capacity} must be in 1..={}",
                layout.total()
            )));
        }
        Ok(Self {
            capacity,
            seed,
            layout,
            entries: Vec::with_capacity(capacity),
            frozen: false,
            steps: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seed(&self) -> Seed {
        self.seed
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn entries(&self) -> &[TrackedEntry] {
        &self.entries
    }

    /// Persistent scalars held: one value and one velocity per entry.
    pub fn stored_scalars(&self) -> usize {
        2 * self.entries.len()
    }

    pub fn init_of(&self, id: ParamId) -> f32 {
        init::init_value(self.seed, &self.layout, id)
    }

    /// Signed displacement of a tracked entry from its initial value.
    pub fn delta(&self, entry: &TrackedEntry) -> f32 {
        entry.value - self.init_of(entry.id)
    }

    pub fn is_tracked(&self, id: ParamId) -> bool {
        self.find(id).is_some()
    }

    fn find(&self, id: ParamId) -> Option<&TrackedEntry> {
        self.entries
            .binary_search_by(|e| e.id.cmp(&id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Current weight: stored value if tracked, otherwise the regenerated initial value.
    pub fn value(&self, id: ParamId) -> f32 {
        match self.find(id) {
            Some(e) => e.value,
            None => self.init_of(id),
        }
    }

    /// Stops admissions and evictions for good.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Tracked counts grouped by tensor.
    pub fn layer_retention(&self) -> Vec<usize> {
        let mut counts = vec![0; self.layout.num_tensors()];
        for e in &self.entries {
            counts[e.id.tensor_index as usize] += 1;
        }
        counts
    }

    /// Dense vector of displacements, zero for untracked weights.
    pub fn accumulated_deltas(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.layout.total()];
        for e in &self.entries {
            out[self.layout.global_index(e.id) as usize] = self.delta(e);
        }
        out
    }

    /// `||w - w0||` from the tracked entries alone.
    pub fn diffusion_l2(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| {
                let d = self.delta(e) as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// One masked update with momentum, followed by admission/eviction unless frozen.
    pub fn step(&mut self, grads: &GradientBuffer<f32>, lr: f32, momentum: f32) -> Result<StepStats> {
        if !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "need lr > 0 and 0 <= momentum < 1, got lr={lr} momentum={momentum}"
            )));
        }
        if grads.tensors.len() != self.layout.num_tensors()
            || grads
                .tensors
                .iter()
                .zip(self.layout.tensors())
                .any(|(g, s)| g.len() != s.len)
        {
            return Err(Error::Config("gradient buffer does not match the network".into()));
        }
        grads.check_finite()?;
        self.steps += 1;

        for e in &mut self.entries {
            let g = grads.get(e.id);
            e.velocity = momentum * e.velocity + g;
            e.value -= lr * e.velocity;
        }

        if self.frozen {
            let lambda = self
                .entries
                .iter()
                .map(|e| self.delta(e).abs())
                .fold(f32::INFINITY, f32::min);
            return Ok(StepStats {
                step_index: self.steps,
                admitted: 0,
                evicted: 0,
                lambda: if self.entries.is_empty() { 0.0 } else { lambda },
                tracked: self.entries.len(),
            });
        }

        let k = self.capacity;
        let mut queue: BinaryHeap<Reverse<Rank>> = BinaryHeap::with_capacity(k + 1);
        for (i, e) in self.entries.iter().enumerate() {
            queue.push(Reverse(Rank {
                key: self.delta(e).abs(),
                global: self.layout.global_index(e.id),
                slot: Slot::Tracked(i),
            }));
        }

        let mut evicted = 0usize;
        let mut tracked = self.entries.iter().map(|e| e.id).peekable();
        for (t, (g_tensor, slot)) in grads.tensors.iter().zip(self.layout.tensors()).enumerate() {
            for (o, &g) in g_tensor.iter().enumerate() {
                let id = ParamId::new(t as u32, o as u32);
                if tracked.peek() == Some(&id) {
                    tracked.next();
                    continue;
                }
                let key = (lr * g).abs();
                if key == 0.0 {
                    continue;
                }
                let cand = Rank {
                    key,
                    global: slot.offset + o as u64,
                    slot: Slot::Candidate(g),
                };
                if queue.len() < k {
                    queue.push(Reverse(cand));
                } else if queue.peek().is_some_and(|Reverse(worst)| cand > *worst) {
                    if let Some(Reverse(Rank {
                        slot: Slot::Tracked(_),
                        ..
                    })) = queue.pop()
                    {
                        evicted += 1;
                    }
                    queue.push(Reverse(cand));
                }
            }
        }

        let lambda = queue.peek().map_or(0.0, |Reverse(r)| r.key);
        let mut admitted = 0usize;
        let mut next = Vec::with_capacity(queue.len());
        for Reverse(rank) in queue.into_vec() {
            match rank.slot {
                Slot::Tracked(i) => next.push(self.entries[i]),
                Slot::Candidate(g) => {
                    admitted += 1;
                    let id = self.layout.param_id(rank.global);
                    let w0 = self.init_of(id);
                    next.push(TrackedEntry {
                        id,
                        value: w0 - lr * g,
                        velocity: g,
                    });
                }
            }
        }
        next.sort_unstable_by_key(|e| e.id);
        self.entries = next;
        debug_assert!(self.entries.len() <= self.capacity);

        Ok(StepStats {
            step_index: self.steps,
            admitted,
            evicted,
            lambda,
            tracked: self.entries.len(),
        })
    }

    /// Rebuilds a set from stored `(id, delta, velocity)` triples.
    pub fn restore(
        capacity: usize,
        seed: Seed,
        layout: ParamLayout,
        frozen: bool,
        steps: u64,
        triples: impl IntoIterator<Item = (ParamId, f64, f32)>,
    ) -> Result<Self> {
        let mut set = Self::new(capacity, seed, layout)?;
        set.frozen = frozen;
        set.steps = steps;
        for (id, delta, velocity) in triples {
            if id.tensor_index as usize >= set.layout.num_tensors()
                || id.flat_offset as usize >= set.layout.tensor(id.tensor_index as usize).len
            {
                return Err(Error::Checkpoint(format!("entry {id} outside the network")));
            }
            let value = (set.init_of(id) as f64 + delta) as f32;
            set.entries.push(TrackedEntry {
                id,
                value,
                velocity,
            });
        }
        set.entries.sort_unstable_by_key(|e| e.id);
        if set.entries.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Checkpoint("duplicate tracked ids".into()));
        }
        if set.entries.len() > capacity {
            return Err(Error::Checkpoint(format!(
                "{} entries exceed capacity {capacity}",
                set.entries.len()
            )));
        }
        Ok(set)
    }

    /// Stored triples; the delta is widened so `init + delta` restores the value exactly.
    pub fn triples(&self) -> impl Iterator<Item = (ParamId, f64, f32)> + '_ {
        self.entries
            .iter()
            .map(|e| (e.id, e.value as f64 - self.init_of(e.id) as f64, e.velocity))
    }
}

impl ParamView<f32> for TrackedSet {
    fn value(&self, id: ParamId) -> f32 {
        TrackedSet::value(self, id)
    }

    fn tensor(&self, tensor_index: usize) -> Cow<'_, [f32]> {
        let mut out = init::regen_tensor(self.seed, &self.layout, tensor_index);
        let t = tensor_index as u32;
        let start = self.entries.partition_point(|e| e.id.tensor_index < t);
        for e in self.entries[start..].iter().take_while(|e| e.id.tensor_index == t) {
            out[e.id.flat_offset as usize] = e.value;
        }
        Cow::Owned(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::InitSpec;

    fn zero_init_layout(n: usize) -> ParamLayout {
        ParamLayout::new([(vec![n], InitSpec::constant(0.0))])
    }

    fn grads(values: &[f32]) -> GradientBuffer<f32> {
        GradientBuffer {
            tensors: vec![values.to_vec()],
        }
    }

    fn id(o: u32) -> ParamId {
        ParamId::new(0, o)
    }

    #[test]
    fn zero_gradients_admit_nothing() {
        let layout = ParamLayout::new([(vec![4], InitSpec::scaled_normal(4))]);
        let mut set = TrackedSet::new(2, Seed(3), layout.clone()).unwrap();
        let stats = set.step(&grads(&[0.0; 4]), 0.1, 0.9).unwrap();
        assert_eq!((stats.admitted, stats.evicted, stats.tracked), (0, 0, 0));
        for o in 0..4 {
            assert_eq!(set.value(id(o)), init::init_value(Seed(3), &layout, id(o)));
        }
    }

    #[test]
    fn toy_trace_two_steps() {
        let mut set = TrackedSet::new(2, Seed(0), zero_init_layout(3)).unwrap();
        let s1 = set.step(&grads(&[0.5, -0.2, 0.1]), 1.0, 0.0).unwrap();
        assert_eq!((s1.admitted, s1.evicted), (2, 0));
        assert_eq!(s1.lambda, 0.2);
        assert_eq!(set.value(id(0)), -0.5);
        assert_eq!(set.value(id(1)), 0.2);
        assert_eq!(set.value(id(2)), 0.0);
        assert!(!set.is_tracked(id(2)));

        let s2 = set.step(&grads(&[0.0, 0.0, -0.9]), 1.0, 0.0).unwrap();
        assert_eq!((s2.admitted, s2.evicted), (1, 1));
        assert!(!set.is_tracked(id(1)));
        assert_eq!(set.value(id(1)), 0.0);
        assert_eq!(set.value(id(2)), 0.9);
        assert_eq!(set.value(id(0)), -0.5);
        assert_eq!(s2.lambda, 0.5);
    }

    #[test]
    fn equal_keys_prefer_lower_id() {
        let mut set = TrackedSet::new(2, Seed(0), zero_init_layout(4)).unwrap();
        set.step(&grads(&[0.0, 0.3, 0.3, 0.3]), 1.0, 0.0).unwrap();
        let ids: Vec<_> = set.entries().iter().map(|e| e.id).collect();
        assert_eq!(ids, vec![id(1), id(2)]);
    }

    #[test]
    fn readmission_starts_from_scratch() {
        let mut set = TrackedSet::new(1, Seed(0), zero_init_layout(2)).unwrap();
        set.step(&grads(&[0.4, 0.0]), 1.0, 0.5).unwrap();
        set.step(&grads(&[0.0, 1.0]), 1.0, 0.5).unwrap();
        assert!(!set.is_tracked(id(0)));
        set.step(&grads(&[3.0, 0.0]), 1.0, 0.5).unwrap();
        // w1: velocity 0.5 * 1 = 0.5 -> value -1.5 (key 1.5); w0 candidate key 3 wins
        let e = set.entries()[0];
        assert_eq!(e.id, id(0));
        assert_eq!(e.value, -3.0);
        assert_eq!(e.velocity, 3.0);
    }

    #[test]
    fn frozen_membership_is_constant() {
        let mut set = TrackedSet::new(2, Seed(0), zero_init_layout(4)).unwrap();
        set.step(&grads(&[1.0, 2.0, 0.0, 0.0]), 0.1, 0.9).unwrap();
        set.freeze();
        set.freeze();
        assert!(set.is_frozen());
        let before: Vec<_> = set.entries().iter().map(|e| e.id).collect();
        let stats = set.step(&grads(&[0.0, 0.0, 1e6, -1e6]), 0.1, 0.9).unwrap();
        assert_eq!((stats.admitted, stats.evicted), (0, 0));
        let after: Vec<_> = set.entries().iter().map(|e| e.id).collect();
        assert_eq!(before, after);
        assert_eq!(set.value(id(2)), 0.0);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let layout = ParamLayout::new([
            (vec![2], InitSpec::constant(0.0)),
            (vec![2], InitSpec::constant(0.0)),
        ]);
        let mut set = TrackedSet::new(2, Seed(0), layout).unwrap();
        let g = GradientBuffer {
            tensors: vec![vec![0.0, 1.0], vec![f32::NAN, 0.0]],
        };
        assert!(matches!(
            set.step(&g, 0.1, 0.0),
            Err(Error::NonFiniteGradient { tensor_index: 1, .. })
        ));
        assert_eq!(set.steps(), 0);
    }

    #[test]
    fn bad_hyperparameters_are_rejected() {
        let mut set = TrackedSet::new(1, Seed(0), zero_init_layout(2)).unwrap();
        assert!(set.step(&grads(&[0.0, 0.0]), 0.0, 0.0).is_err());
        assert!(set.step(&grads(&[0.0, 0.0]), 0.1, 1.0).is_err());
        assert!(TrackedSet::new(3, Seed(0), zero_init_layout(2)).is_err());
        assert!(TrackedSet::new(0, Seed(0), zero_init_layout(2)).is_err());
    }

    #[test]
    fn view_materializes_tracked_over_init() {
        let layout = ParamLayout::new([
            (vec![3], InitSpec::scaled_normal(3)),
            (vec![2], InitSpec::constant(0.25)),
        ]);
        let mut set = TrackedSet::new(2, Seed(8), layout.clone()).unwrap();
        let g = GradientBuffer {
            tensors: vec![vec![0.0, 2.0, 0.0], vec![0.0, -1.0]],
        };
        set.step(&g, 0.5, 0.0).unwrap();
        let t0 = ParamView::tensor(&set, 0);
        let t1 = ParamView::tensor(&set, 1);
        for o in 0..3 {
            assert_eq!(t0[o], set.value(ParamId::new(0, o as u32)));
        }
        assert_eq!(t1[0], 0.25);
        assert_eq!(t1[1], 0.75);
        assert_eq!(set.layer_retention(), vec![1, 1]);
    }

    #[test]
    fn triples_restore_bit_exactly() {
        let layout = ParamLayout::new([(vec![50], InitSpec::scaled_normal(50))]);
        let mut set = TrackedSet::new(10, Seed(21), layout.clone()).unwrap();
        for s in 0..5 {
            let g: Vec<f32> = (0..50).map(|i| ((i * 7 + s * 3) % 11) as f32 * 0.013 - 0.06).collect();
            set.step(&grads(&g), 0.37, 0.9).unwrap();
        }
        let restored =
            TrackedSet::restore(10, Seed(21), layout, false, set.steps(), set.triples().collect::<Vec<_>>())
                .unwrap();
        assert_eq!(restored.entries(), set.entries());
    }
}
