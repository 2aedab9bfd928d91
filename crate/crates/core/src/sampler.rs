//! Single-domain batches drawn from several pools.
//!
//! The domain of each batch follows a smooth weighted round-robin with
//! weights equal to pool sizes, so over any window the counts track the
//! size ratio as closely as integers allow. Within a pool, samples are
//! visited in a seeded shuffled order that is redrawn every epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Pool {
    size: usize,
    credit: i64,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Pool {
    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }
}

/// A batch: the pool it comes from and indices into that pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub pool: usize,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct UniversalSampler {
    pools: Vec<Pool>,
    total: i64,
    batch: usize,
}

impl UniversalSampler {
    pub fn new(pool_sizes: &[usize], batch: usize, seed: u64) -> Result<Self> {
        let total: usize = pool_sizes.iter().sum();
        if total == 0 {
            return Err(Error::Input("every sample pool is empty".into()));
        }
        if batch == 0 {
            return Err(Error::Input("batch size must be positive".into()));
        }
        let pools = pool_sizes
            .iter()
            .enumerate()
            .map(|(i, &size)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let mut order: Vec<usize> = (0..size).collect();
                order.shuffle(&mut rng);
                Pool {
                    size,
                    credit: 0,
                    order,
                    cursor: 0,
                    rng,
                }
            })
            .collect();
        Ok(Self {
            pools,
            total: total as i64,
            batch,
        })
    }

    fn next_pool(&mut self) -> usize {
        for p in &mut self.pools {
            p.credit += p.size as i64;
        }
        let best = (0..self.pools.len())
            .filter(|&i| self.pools[i].size > 0)
            .max_by(|&a, &b| {
                self.pools[a]
                    .credit
                    .cmp(&self.pools[b].credit)
                    .then(b.cmp(&a))
            })
            .expect("some pool is non-empty");
        self.pools[best].credit -= self.total;
        best
    }

    pub fn next_batch(&mut self) -> Batch {
        let pool = self.next_pool();
        let p = &mut self.pools[pool];
        let indices = (0..self.batch).map(|_| p.next()).collect();
        Batch { pool, indices }
    }
}

impl Iterator for UniversalSampler {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(sizes: &[usize], n: usize) -> Vec<usize> {
        let mut c = vec![0; sizes.len()];
        for b in UniversalSampler::new(sizes, 2, 1).unwrap().take(n) {
            c[b.pool] += 1;
        }
        c
    }

    #[test]
    fn single_pool() {
        assert_eq!(counts(&[7], 20), vec![20]);
    }

    #[test]
    fn equal_pools_split_exactly() {
        assert_eq!(counts(&[30, 30], 100), vec![50, 50]);
    }

    #[test]
    fn sizes_set_the_ratio() {
        assert_eq!(counts(&[200, 100], 300), vec![200, 100]);
        assert_eq!(counts(&[200, 100], 3), vec![2, 1]);
        assert_eq!(counts(&[0, 5], 4), vec![0, 4]);
    }

    #[test]
    fn all_empty_rejected() {
        assert!(UniversalSampler::new(&[0, 0], 2, 1).is_err());
        assert!(UniversalSampler::new(&[], 2, 1).is_err());
    }

    #[test]
    fn epochs_cover_each_pool_and_are_seeded() {
        let mut s = UniversalSampler::new(&[6], 3, 9).unwrap();
        let mut seen: Vec<usize> = s.next_batch().indices;
        seen.extend(s.next_batch().indices);
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        let a: Vec<Batch> = UniversalSampler::new(&[5, 3], 2, 4).unwrap().take(10).collect();
        let b: Vec<Batch> = UniversalSampler::new(&[5, 3], 2, 4).unwrap().take(10).collect();
        assert_eq!(a, b);
    }
}
