use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{MultiTaskBatch, MultiTaskDataset};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::rng::Rng;

/// How a batch is divided among tasks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixing {
    /// `⌊B/T⌋` or `⌊B/T⌋ + 1` examples per task; the extra slots rotate.
    #[default]
    Uniform,
    /// Quotas proportional to training-set size, at least one per task.
    Proportional,
}

/// Mixed-task batch sampler over training splits.
///
/// An epoch is one pass over the largest task (the first one on ties). Other
/// tasks draw from their own shuffled pools and reshuffle when exhausted, so
/// they may repeat within an epoch. In the final batch of an epoch the
/// largest task takes only what it has left; the freed slots go to the other
/// tasks round-robin so every batch has exactly `B` examples.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    batch: usize,
    mixing: Mixing,
    sizes: Vec<usize>,
    largest: usize,
    num_batches: usize,
    rng: Rng,
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
}

impl BatchSampler {
    pub fn new(train_counts: &[usize], batch: usize, mixing: Mixing, mut rng: Rng) -> Result<Self> {
        let t = train_counts.len();
        if t == 0 {
            return Err(Error::InvalidArgument(
                "sampler needs at least one task".into(),
            ));
        }
        if batch < t {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch} is smaller than the number of tasks {t}"
            )));
        }
        if let Some(i) = train_counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!(
                "task {i} has no training examples"
            )));
        }
        let mut largest = 0;
        for (i, &n) in train_counts.iter().enumerate() {
            if n > train_counts[largest] {
                largest = i;
            }
        }
        let pools: Vec<Vec<usize>> = train_counts
            .iter()
            .map(|&n| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let mut s = Self {
            batch,
            mixing,
            sizes: train_counts.to_vec(),
            largest,
            num_batches: 0,
            rng,
            pools,
            cursors: vec![0; t],
        };
        let mut taken = 0;
        while taken < s.sizes[largest] {
            taken += s.base_quotas(s.num_batches)[largest];
            s.num_batches += 1;
        }
        Ok(s)
    }

    pub fn num_batches(&self) -> usize {
        self.num_batches
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Task quotas of batch `b` before the end-of-epoch adjustment.
    fn base_quotas(&self, b: usize) -> Vec<usize> {
        let t = self.sizes.len();
        match self.mixing {
            Mixing::Uniform => {
                let base = self.batch / t;
                let extra = self.batch % t;
                let mut q = vec![base; t];
                for j in 0..extra {
                    q[(b * extra + j) % t] += 1;
                }
                q
            }
            Mixing::Proportional => {
                let total: usize = self.sizes.iter().sum();
                let free = self.batch - t;
                let shares: Vec<f64> = self
                    .sizes
                    .iter()
                    .map(|&n| free as f64 * n as f64 / total as f64)
                    .collect();
                let mut q: Vec<usize> = shares.iter().map(|s| 1 + s.floor() as usize).collect();
                let mut left = self.batch - q.iter().sum::<usize>();
                let mut order: Vec<usize> = (0..t).collect();
                order.sort_by(|&a, &c| {
                    let ra = shares[a] - shares[a].floor();
                    let rc = shares[c] - shares[c].floor();
                    rc.total_cmp(&ra).then(a.cmp(&c))
                });
                for &i in order.iter().cycle() {
                    if left == 0 {
                        break;
                    }
                    q[i] += 1;
                    left -= 1;
                }
                q
            }
        }
    }

    /// Task quotas of batch `b` of an epoch, summing to `B`.
    pub fn quotas(&self, b: usize) -> Vec<usize> {
        let mut q = self.base_quotas(b);
        if b + 1 == self.num_batches {
            let before: usize = (0..b).map(|i| self.base_quotas(i)[self.largest]).sum();
            let remaining = self.sizes[self.largest] - before;
            let mut shortfall = q[self.largest] - remaining;
            q[self.largest] = remaining;
            let t = self.sizes.len();
            let mut i = (self.largest + 1) % t;
            while shortfall > 0 && t > 1 {
                if i != self.largest {
                    q[i] += 1;
                    shortfall -= 1;
                }
                i = (i + 1) % t;
            }
        }
        q
    }

    fn draw(&mut self, task: usize) -> usize {
        if self.cursors[task] == self.pools[task].len() {
            self.pools[task].shuffle(&mut self.rng);
            self.cursors[task] = 0;
        }
        let idx = self.pools[task][self.cursors[task]];
        self.cursors[task] += 1;
        idx
    }

    /// The `(task, train index)` lists of every batch of the next epoch.
    pub fn next_epoch(&mut self) -> Vec<Vec<(usize, usize)>> {
        // The largest task always starts an epoch from a fresh permutation.
        if self.cursors[self.largest] != 0 {
            self.cursors[self.largest] = self.pools[self.largest].len();
        }
        let mut out = Vec::with_capacity(self.num_batches);
        for b in 0..self.num_batches {
            let q = self.quotas(b);
            let mut items = Vec::with_capacity(self.batch);
            for (task, &k) in q.iter().enumerate() {
                for _ in 0..k {
                    let i = self.draw(task);
                    items.push((task, i));
                }
            }
            out.push(items);
        }
        out
    }
}

impl MultiTaskDataset {
    /// Assemble a batch from `(task, train index)` pairs.
    pub fn train_batch(&self, items: &[(usize, usize)]) -> Result<MultiTaskBatch> {
        let mut features = Vec::with_capacity(items.len() * self.dx);
        let mut labels = Vec::with_capacity(items.len());
        let mut tasks = Vec::with_capacity(items.len());
        for &(t, i) in items {
            let split = &self
                .data
                .get(t)
                .ok_or_else(|| Error::InvalidArgument(format!("no task {t}")))?
                .train;
            if i >= split.len() {
                return Err(Error::InvalidArgument(format!(
                    "task {t} has no train example {i}"
                )));
            }
            features.extend_from_slice(split.row(i));
            labels.push(split.labels[i]);
            tasks.push(t);
        }
        Ok(MultiTaskBatch {
            features: Tensor::new(vec![items.len(), self.dx], features)?,
            labels,
            tasks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sampler(sizes: &[usize], batch: usize) -> BatchSampler {
        BatchSampler::new(sizes, batch, Mixing::Uniform, seeded(5)).unwrap()
    }

    #[test]
    fn six_way_split_of_128() {
        let s = sampler(&[500, 500, 500, 2000, 500, 500], 128);
        let mut q = s.quotas(0);
        assert_eq!(q.iter().sum::<usize>(), 128);
        q.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(q, vec![22, 22, 21, 21, 21, 21]);
    }

    #[test]
    fn rejects_batch_smaller_than_tasks() {
        assert!(BatchSampler::new(&[3, 3, 3], 2, Mixing::Uniform, seeded(0)).is_err());
    }

    #[test]
    fn epoch_covers_largest_task_once_and_all_tasks_each_batch() {
        let sizes = [40, 7, 133, 19, 25, 60];
        for mixing in [Mixing::Uniform, Mixing::Proportional] {
            let mut s = BatchSampler::new(&sizes, 32, mixing, seeded(11)).unwrap();
            for _ in 0..3 {
                let epoch = s.next_epoch();
                let mut seen = vec![0usize; sizes[2]];
                for batch in &epoch {
                    assert_eq!(batch.len(), 32);
                    for t in 0..sizes.len() {
                        assert!(batch.iter().any(|&(bt, _)| bt == t), "task {t} missing");
                    }
                    for &(t, i) in batch {
                        assert!(i < sizes[t]);
                        if t == 2 {
                            seen[i] += 1;
                        }
                    }
                }
                assert!(seen.iter().all(|&c| c == 1), "{mixing:?}");
            }
        }
    }

    #[test]
    fn uniform_counts_stay_balanced_across_an_epoch() {
        let sizes = [300, 90, 1000, 45, 500, 120];
        let mut s = sampler(&sizes, 128);
        let epoch = s.next_epoch();
        let mut counts = vec![0usize; 6];
        for batch in &epoch[..epoch.len() - 1] {
            let mut q = [0usize; 6];
            for &(t, _) in batch {
                q[t] += 1;
            }
            assert!(q.iter().all(|&c| c == 21 || c == 22));
            for t in 0..6 {
                counts[t] += q[t];
            }
        }
        let exact = (epoch.len() - 1) as f64 * 128.0 / 6.0;
        for c in counts {
            assert!((c as f64 - exact).abs() <= 6.0);
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let sizes = [30, 10, 17];
        let mut a = BatchSampler::new(&sizes, 9, Mixing::Uniform, seeded(2)).unwrap();
        let mut b = BatchSampler::new(&sizes, 9, Mixing::Uniform, seeded(2)).unwrap();
        for _ in 0..4 {
            assert_eq!(a.next_epoch(), b.next_epoch());
        }
        let mut c = BatchSampler::new(&sizes, 9, Mixing::Uniform, seeded(3)).unwrap();
        assert_ne!(a.next_epoch(), c.next_epoch());
    }

    #[test]
    fn smaller_tasks_exhaust_their_pool_before_repeating() {
        let mut s = sampler(&[100, 12], 20);
        let epoch = s.next_epoch();
        let small: Vec<usize> = epoch
            .iter()
            .flatten()
            .filter(|(t, _)| *t == 1)
            .map(|&(_, i)| i)
            .collect();
        for chunk in small.chunks(12).filter(|c| c.len() == 12) {
            let mut c = chunk.to_vec();
            c.sort_unstable();
            assert_eq!(c, (0..12).collect::<Vec<_>>());
        }
    }
}
