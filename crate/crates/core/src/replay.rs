//! Bounded FIFO experience store with balanced good/bad batch sampling.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skills::MAX_PARAM_DIM;

pub const DEFAULT_CAPACITY: usize = 100_000;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay buffer is empty")]
    Empty,
    #[error("feedback value {0} outside {{-1, 0, 1}}")]
    Feedback(i8),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub skill_one_hot: Vec<f64>,
    /// Normalized parameters, zero past the skill's dimension.
    pub params_padded: [f64; MAX_PARAM_DIM],
    pub feedback: i8,
    pub affordance: f64,
    pub env_reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub executed: bool,
}

impl Transition {
    pub fn is_positive(&self) -> bool {
        self.feedback == 1
    }

    pub fn skill_index(&self) -> usize {
        self.skill_one_hot.iter().position(|v| *v == 1.0).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BufferStats {
    pub size: usize,
    pub positive_count: usize,
    pub capacity: usize,
}

/// Column-major view of a batch, ready for the loss functions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub obs: Vec<f64>,
    pub skill: Vec<usize>,
    pub params: Vec<[f64; MAX_PARAM_DIM]>,
    pub feedback: Vec<f64>,
    pub affordance: Vec<f64>,
    pub env_reward: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub done: Vec<bool>,
    pub executed: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(items: &[&Transition]) -> Self {
        let mut b = Batch {
            rows: items.len(),
            ..Default::default()
        };
        for t in items {
            b.obs.extend_from_slice(&t.obs);
            b.skill.push(t.skill_index());
            b.params.push(t.params_padded);
            b.feedback.push(t.feedback as f64);
            b.affordance.push(t.affordance);
            b.env_reward.push(t.env_reward);
            b.next_obs.extend_from_slice(&t.next_obs);
            b.done.push(t.done);
            b.executed.push(t.executed);
        }
        b
    }
}

/// Ring of transitions plus slot indices split by class. Slots are never
/// moved, so eviction only touches the evicted slot's class list.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    /// Absolute insertion index of `items[0]`.
    head: u64,
    positives: VecDeque<u64>,
    others: VecDeque<u64>,
}

impl Default for ReplayBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(4096)),
            head: 0,
            positives: VecDeque::new(),
            others: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn stats(&self) -> BufferStats {
        BufferStats {
            size: self.items.len(),
            positive_count: self.positives.len(),
            capacity: self.capacity,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn push(&mut self, t: Transition) -> Result<(), ReplayError> {
        if !(-1..=1).contains(&t.feedback) {
            return Err(ReplayError::Feedback(t.feedback));
        }
        if self.items.len() == self.capacity {
            let old = self.items.pop_front().expect("non-empty at capacity");
            let class = if old.is_positive() { &mut self.positives } else { &mut self.others };
            let front = class.pop_front();
            debug_assert_eq!(front, Some(self.head));
            self.head += 1;
        }
        let idx = self.head + self.items.len() as u64;
        if t.is_positive() {
            self.positives.push_back(idx);
        } else {
            self.others.push_back(idx);
        }
        self.items.push_back(t);
        Ok(())
    }

    fn get(&self, abs: u64) -> &Transition {
        &self.items[(abs - self.head) as usize]
    }

    fn draw<'a, R: Rng + ?Sized>(&'a self, class: &VecDeque<u64>, n: usize, rng: &mut R, out: &mut Vec<&'a Transition>) {
        for _ in 0..n {
            out.push(self.get(class[rng.random_range(0..class.len())]));
        }
    }

    /// Half positives, half non-positives, drawn uniformly with replacement
    /// within each class. A class that is both short of its half and the
    /// minority is scarce: each of its items appears once and the other class
    /// fills the rest. A single-class buffer is sampled uniformly.
    pub fn sample_balanced<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&Transition>, ReplayError> {
        if self.is_empty() {
            return Err(ReplayError::Empty);
        }
        let want_pos = batch_size.div_ceil(2);
        let want_neg = batch_size / 2;
        let (np, nn) = (self.positives.len(), self.others.len());
        let mut out = Vec::with_capacity(batch_size);
        if np == 0 {
            self.draw(&self.others, batch_size, rng, &mut out);
        } else if nn == 0 {
            self.draw(&self.positives, batch_size, rng, &mut out);
        } else if np < want_pos && np < nn {
            out.extend(self.positives.iter().map(|&i| self.get(i)));
            self.draw(&self.others, batch_size - np, rng, &mut out);
        } else if nn < want_neg && nn < np {
            out.extend(self.others.iter().map(|&i| self.get(i)));
            self.draw(&self.positives, batch_size - nn, rng, &mut out);
        } else {
            self.draw(&self.positives, want_pos, rng, &mut out);
            self.draw(&self.others, want_neg, rng, &mut out);
        }
        Ok(out)
    }

    /// Uniform with replacement over the whole buffer.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&Transition>, ReplayError> {
        if self.is_empty() {
            return Err(ReplayError::Empty);
        }
        Ok((0..batch_size)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }

    /// One JSON transition per line.
    pub fn dump_jsonl(&self, path: &Path) -> Result<(), ReplayError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.items {
            serde_json::to_writer(&mut w, t).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path, capacity: usize) -> Result<Self, ReplayError> {
        let mut buf = Self::new(capacity);
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Transition = serde_json::from_str(&line).map_err(|source| ReplayError::Parse { line: i + 1, source })?;
            buf.push(t)?;
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(tag: f64, feedback: i8) -> Transition {
        Transition {
            obs: vec![tag],
            skill_one_hot: vec![1.0, 0.0],
            params_padded: [0.0; 4],
            feedback,
            affordance: 0.0,
            env_reward: 0.0,
            next_obs: vec![tag],
            done: false,
            executed: feedback == 1,
        }
    }

    fn filled(pos: usize, neg: usize) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(10_000);
        for i in 0..pos {
            b.push(tr(i as f64, 1)).unwrap();
        }
        for i in 0..neg {
            b.push(tr(-(i as f64) - 1.0, if i % 5 == 0 { 0 } else { -1 })).unwrap();
        }
        b
    }

    fn positives(batch: &[&Transition]) -> usize {
        batch.iter().filter(|t| t.is_positive()).count()
    }

    #[test]
    fn push_one_positive() {
        let mut b = ReplayBuffer::new(4);
        b.push(tr(0.0, 1)).unwrap();
        assert_eq!(b.stats(), BufferStats { size: 1, positive_count: 1, capacity: 4 });
        assert!(matches!(b.push(tr(0.0, 2)), Err(ReplayError::Feedback(2))));
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..4 {
            b.push(tr(i as f64, if i == 0 { 1 } else { -1 })).unwrap();
        }
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|t| t.obs[0] != 0.0));
        assert_eq!(b.stats().positive_count, 0);
    }

    #[test]
    fn balanced_halves() {
        let b = filled(100, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = b.sample_balanced(256, &mut rng).unwrap();
        assert_eq!(batch.len(), 256);
        assert_eq!(positives(&batch), 128);
    }

    #[test]
    fn all_negatives() {
        let b = filled(0, 10);
        let batch = b.sample_balanced(32, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!((batch.len(), positives(&batch)), (32, 0));
    }

    #[test]
    fn scarce_positives_all_included() {
        let b = filled(3, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let batch = b.sample_balanced(64, &mut rng).unwrap();
            assert_eq!(positives(&batch), 3);
            assert_eq!(batch.len(), 64);
            let mut tags: Vec<f64> = batch.iter().filter(|t| t.is_positive()).map(|t| t.obs[0]).collect();
            tags.sort_by(f64::total_cmp);
            assert_eq!(tags, vec![0.0, 1.0, 2.0]);
        }
    }

    #[test]
    fn scarce_negatives_all_included() {
        let b = filled(1000, 5);
        let batch = b.sample_balanced(64, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(positives(&batch), 59);
    }

    #[test]
    fn empty_is_error() {
        let b = ReplayBuffer::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample_balanced(4, &mut rng), Err(ReplayError::Empty)));
        assert!(matches!(b.sample_uniform(4, &mut rng), Err(ReplayError::Empty)));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let b = filled(30, 70);
        let a: Vec<f64> = b.sample_balanced(50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().iter().map(|t| t.obs[0]).collect();
        let c: Vec<f64> = b.sample_balanced(50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().iter().map(|t| t.obs[0]).collect();
        assert_eq!(a, c);
    }

    #[test]
    fn within_class_uniformity() {
        // chi-squared over a 10-element class, 9 dof, critical value at p = 0.01 is 21.67
        let b = filled(10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 10];
        let mut total = 0;
        while total < 100_000 {
            for t in b.sample_balanced(100, &mut rng).unwrap() {
                if t.is_positive() {
                    counts[t.obs[0] as usize] += 1;
                    total += 1;
                }
            }
        }
        let expect = total as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 21.67, "chi2 {chi2}");
    }

    #[test]
    fn jsonl_round_trip() {
        let b = filled(3, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buf.jsonl");
        b.dump_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);
        let back = ReplayBuffer::load_jsonl(&path, 100).unwrap();
        assert_eq!(back.iter().collect::<Vec<_>>(), b.iter().collect::<Vec<_>>());
        assert_eq!(back.stats().positive_count, 3);
    }

    #[test]
    fn batch_columns() {
        let t1 = tr(1.0, 1);
        let mut t2 = tr(2.0, -1);
        t2.skill_one_hot = vec![0.0, 1.0];
        let b = Batch::from_transitions(&[&t1, &t2]);
        assert_eq!(b.rows, 2);
        assert_eq!(b.obs, vec![1.0, 2.0]);
        assert_eq!(b.skill, vec![0, 1]);
        assert_eq!(b.feedback, vec![1.0, -1.0]);
    }

    proptest! {
        #[test]
        fn positive_count_matches_recount(
            cap in 1usize..40,
            labels in prop::collection::vec(-1i8..=1, 0..200),
        ) {
            let mut b = ReplayBuffer::new(cap);
            for (i, l) in labels.iter().enumerate() {
                b.push(tr(i as f64, *l)).unwrap();
                let s = b.stats();
                prop_assert_eq!(s.positive_count, b.iter().filter(|t| t.feedback == 1).count());
                prop_assert!(s.positive_count <= s.size && s.size <= s.capacity);
            }
        }

        #[test]
        fn class_count_rule(pos in 0usize..50, neg in 0usize..50, batch in 1usize..80, seed in any::<u64>()) {
            prop_assume!(pos + neg > 0);
            let b = filled(pos, neg);
            let got = positives(&b.sample_balanced(batch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap());
            let (hp, hn) = (batch.div_ceil(2), batch / 2);
            let expected = if pos == 0 {
                0
            } else if neg == 0 {
                batch
            } else if pos < hp && pos < neg {
                pos
            } else if neg < hn && neg < pos {
                batch - neg
            } else {
                hp
            };
            prop_assert_eq!(got, expected);
        }
    }
}
