//! Compensated summation and a shard-ordered parallel reduction whose result does
//! not depend on the number of worker threads.

use rayon::prelude::*;

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &NeumaierSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = NeumaierSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    xs.into_iter().collect::<NeumaierSum>().value()
}

/// Fixed shard count; the shard boundaries depend only on the input length.
const SHARDS: usize = 16;
/// Below this length the parallel split is not worth it (and is skipped; the
/// result is identical either way).
const PARALLEL_MIN: usize = 64;

/// Sum `f(k)` for `k in 0..len`. Each shard is summed sequentially and the shard
/// partials are merged in index order, so the result is bit-identical for any
/// thread count.
pub fn sharded_sum<F>(len: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let shard = len.div_ceil(SHARDS).max(1);
    let partial = |s: usize| -> NeumaierSum {
        let lo = s * shard;
        let hi = ((s + 1) * shard).min(len);
        (lo..hi).map(&f).collect()
    };
    let shards = len.div_ceil(shard);
    let partials: Vec<NeumaierSum> = if len >= PARALLEL_MIN {
        (0..shards).into_par_iter().map(partial).collect()
    } else {
        (0..shards).map(partial).collect()
    };
    let mut total = NeumaierSum::new();
    for p in &partials {
        total.merge(p);
    }
    total.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cancelled_terms() {
        let xs = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(compensated_sum(xs), 2.0);
        assert_eq!(xs.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn sharded_matches_sequential_grouping() {
        let f = |k: usize| 1.0 / (k as f64 + 1.0);
        let a = sharded_sum(1000, f);
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| sharded_sum(1000, f));
        assert_eq!(a.to_bits(), b.to_bits());
        assert!((a - compensated_sum((0..1000).map(f))).abs() < 1e-14);
    }
}
