//! Replay storage: the main transition buffer, the per-episode staging
//! buffer, and the reduced Monte-Carlo buffer of `(s, a, R)` records.
//!
//! Transitions only reach the main buffer when their episode ends, at which
//! point the discounted return of every step is computed and pushed to the
//! Monte-Carlo buffer alongside.

use ndarray::{Array1, Array2};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// True terminal state only; time-limit truncation stores `false` so the
    /// TD target keeps bootstrapping.
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MCRecord {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub mc_return: f64,
}

/// Fixed-capacity FIFO that overwrites its oldest entry when full.
#[derive(Debug, Clone)]
pub struct RingBuffer<T> {
    capacity: usize,
    entries: Vec<T>,
    write_cursor: usize,
}

impl<T> RingBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring buffer capacity must be positive");
        Self {
            capacity,
            entries: Vec::with_capacity(capacity.min(1 << 16)),
            write_cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.entries.len() < self.capacity {
            self.entries.push(item);
        } else {
            self.entries[self.write_cursor] = item;
        }
        self.write_cursor = (self.write_cursor + 1) % self.capacity;
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let split = if self.entries.len() < self.capacity {
            0
        } else {
            self.write_cursor
        };
        self.entries[split..].iter().chain(self.entries[..split].iter())
    }

    /// Uniform sample with replacement. `None` when the buffer holds fewer
    /// than `batch_size` entries.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Option<Vec<&T>> {
        if batch_size == 0 || self.entries.len() < batch_size {
            return None;
        }
        let n = self.entries.len();
        Some((0..batch_size).map(|_| &self.entries[rng.gen_range(0..n)]).collect())
    }
}

/// Transitions of the episode in progress, in time order.
#[derive(Debug, Clone, Default)]
pub struct EpisodeBuffer {
    steps: Vec<Transition>,
}

impl EpisodeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stage_step(&mut self, t: Transition) {
        self.steps.push(t);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[Transition] {
        &self.steps
    }
}

/// Discounted returns `R_i = r_i + γ·R_{i+1}`, with `R_last = r_last`.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut next = None;
    for i in (0..rewards.len()).rev() {
        let r = match next {
            Some(n) => rewards[i] + gamma * n,
            None => rewards[i],
        };
        out[i] = r;
        next = Some(r);
    }
    out
}

/// Flush a finished episode: every staged transition goes to `main`, every
/// `(s, a, R)` to `mc`, and the staging buffer is emptied. A truncated
/// episode is treated as terminal for the returns (no bootstrapping).
pub fn finalize_episode(
    episodic: &mut EpisodeBuffer,
    main: &mut RingBuffer<Transition>,
    mc: &mut RingBuffer<MCRecord>,
    gamma: f64,
) {
    if episodic.is_empty() {
        return;
    }
    let rewards: Vec<f64> = episodic.steps.iter().map(|t| t.reward).collect();
    let returns = compute_returns(&rewards, gamma);
    for (t, mc_return) in episodic.steps.drain(..).zip(returns) {
        mc.push(MCRecord {
            state: t.state.clone(),
            action: t.action.clone(),
            mc_return,
        });
        main.push(t);
    }
}

/// Column-stacked mini-batch of transitions.
#[derive(Debug, Clone)]
pub struct TransitionBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// 1.0 for terminal transitions, 0.0 otherwise.
    pub dones: Array1<f64>,
}

impl TransitionBatch {
    pub fn from_refs(items: &[&Transition]) -> Self {
        assert!(!items.is_empty(), "empty batch");
        let obs = items[0].state.len();
        let act = items[0].action.len();
        let n = items.len();
        Self {
            states: stack(items.iter().map(|t| t.state.as_slice()), n, obs),
            actions: stack(items.iter().map(|t| t.action.as_slice()), n, act),
            rewards: items.iter().map(|t| t.reward).collect(),
            next_states: stack(items.iter().map(|t| t.next_state.as_slice()), n, obs),
            dones: items.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Column-stacked mini-batch of Monte-Carlo records.
#[derive(Debug, Clone)]
pub struct McBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub returns: Array1<f64>,
}

impl McBatch {
    pub fn from_refs(items: &[&MCRecord]) -> Self {
        assert!(!items.is_empty(), "empty batch");
        let obs = items[0].state.len();
        let act = items[0].action.len();
        let n = items.len();
        Self {
            states: stack(items.iter().map(|t| t.state.as_slice()), n, obs),
            actions: stack(items.iter().map(|t| t.action.as_slice()), n, act),
            returns: items.iter().map(|t| t.mc_return).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }
}

fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>, n: usize, dim: usize) -> Array2<f64> {
    let mut flat = Vec::with_capacity(n * dim);
    for r in rows {
        assert_eq!(r.len(), dim, "ragged batch");
        flat.extend_from_slice(r);
    }
    Array2::from_shape_vec((n, dim), flat).expect("shape checked")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn tr(i: usize, reward: f64) -> Transition {
        Transition {
            state: vec![i as f64],
            action: vec![-(i as f64)],
            reward,
            next_state: vec![i as f64 + 1.0],
            done: false,
        }
    }

    #[test]
    fn returns_examples() {
        assert_eq!(compute_returns(&[1.0, 1.0, 1.0], 0.0), vec![1.0, 1.0, 1.0]);
        assert_eq!(compute_returns(&[1.0, 1.0, 1.0], 0.5), vec![1.75, 1.5, 1.0]);
        let r = compute_returns(&[0.0, 0.0, 0.0, 1.0], 0.9);
        for (got, want) in r.iter().zip([0.729, 0.81, 0.9, 1.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(compute_returns(&[], 0.9).is_empty());
    }

    #[test]
    fn staging_keeps_order_and_rewards() {
        let mut eb = EpisodeBuffer::new();
        for i in 0..3 {
            eb.stage_step(tr(i, i as f64 * 0.5));
        }
        assert_eq!(eb.len(), 3);
        let rewards: Vec<f64> = eb.steps().iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![0.0, 0.5, 1.0]);
        assert_eq!(eb.steps()[2].state, vec![2.0]);
    }

    #[test]
    fn finalize_moves_everything() {
        let mut eb = EpisodeBuffer::new();
        let mut main = RingBuffer::new(100);
        let mut mc = RingBuffer::new(100);
        eb.stage_step(tr(0, 2.5));
        finalize_episode(&mut eb, &mut main, &mut mc, 0.99);
        assert!(eb.is_empty());
        assert_eq!(mc.iter().next().unwrap().mc_return, 2.5);

        for i in 0..5 {
            eb.stage_step(tr(i, 1.0));
        }
        finalize_episode(&mut eb, &mut main, &mut mc, 0.99);
        assert_eq!(main.len(), 6);
        assert_eq!(mc.len(), 6);

        // staging after a flush starts fresh
        eb.stage_step(tr(9, 0.0));
        assert_eq!(eb.len(), 1);

        // empty finalize is a no-op
        let mut empty = EpisodeBuffer::new();
        finalize_episode(&mut empty, &mut main, &mut mc, 0.99);
        assert_eq!(main.len(), 6);
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut rb = RingBuffer::new(4);
        for i in 0..7 {
            rb.push(i);
        }
        assert_eq!(rb.len(), 4);
        assert_eq!(rb.iter().copied().collect::<Vec<_>>(), vec![3, 4, 5, 6]);
    }

    #[test]
    fn sampling_contracts() {
        let mut rb = RingBuffer::new(10);
        assert!(rb.sample_uniform(1, &mut stream(0, Stream::Sampling)).is_none());
        rb.push(42);
        assert_eq!(
            rb.sample_uniform(1, &mut stream(0, Stream::Sampling)).unwrap(),
            vec![&42]
        );
        assert!(rb.sample_uniform(2, &mut stream(0, Stream::Sampling)).is_none());
        for i in 0..9 {
            rb.push(i);
        }
        let a = rb.sample_uniform(8, &mut stream(3, Stream::Sampling)).unwrap();
        let b = rb.sample_uniform(8, &mut stream(3, Stream::Sampling)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_uniform() {
        let mut rb = RingBuffer::new(10);
        for i in 0..10usize {
            rb.push(i);
        }
        let draws = 100_000;
        let mut counts = [0usize; 10];
        let mut rng = stream(11, Stream::Sampling);
        for _ in 0..draws / 10 {
            for &i in rb.sample_uniform(10, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let p = 0.1;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 5.0 * sd, "count {c} vs {mean}±{sd}");
        }
    }

    #[test]
    fn batches_stack_rows() {
        let items = [tr(1, 0.5), tr(2, 1.5)];
        let refs: Vec<&Transition> = items.iter().collect();
        let b = TransitionBatch::from_refs(&refs);
        assert_eq!(b.states[[1, 0]], 2.0);
        assert_eq!(b.actions[[0, 0]], -1.0);
        assert_eq!(b.rewards.to_vec(), vec![0.5, 1.5]);
        assert_eq!(b.dones.to_vec(), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn ring_keeps_newest_in_order(cap in 1usize..20, extra in 0usize..50) {
            let mut rb = RingBuffer::new(cap);
            for i in 0..cap + extra {
                rb.push(i);
            }
            let kept: Vec<usize> = rb.iter().copied().collect();
            let expected: Vec<usize> = (extra..cap + extra).collect();
            prop_assert_eq!(kept, expected);
        }

        #[test]
        fn finalize_never_drops_or_duplicates(
            rewards in prop::collection::vec(-5.0f64..5.0, 1..60),
            gamma in 0.0f64..=1.0,
        ) {
            let mut eb = EpisodeBuffer::new();
            let mut main = RingBuffer::new(1000);
            let mut mc = RingBuffer::new(1000);
            for (i, &r) in rewards.iter().enumerate() {
                eb.stage_step(tr(i, r));
            }
            finalize_episode(&mut eb, &mut main, &mut mc, gamma);
            prop_assert_eq!(main.len(), rewards.len());
            let states: Vec<f64> = main.iter().map(|t| t.state[0]).collect();
            let expected: Vec<f64> = (0..rewards.len()).map(|i| i as f64).collect();
            prop_assert_eq!(states, expected);
            let recs: Vec<&MCRecord> = mc.iter().collect();
            for i in 0..recs.len() {
                let next = if i + 1 < recs.len() { gamma * recs[i + 1].mc_return } else { 0.0 };
                if i + 1 < recs.len() {
                    prop_assert_eq!(recs[i].mc_return, rewards[i] + next);
                } else {
                    prop_assert_eq!(recs[i].mc_return, rewards[i]);
                }
            }
        }
    }
}
