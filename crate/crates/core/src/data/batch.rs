use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded mini-batch index generator over `n` samples.
///
/// [`Batcher::epoch`] yields one reshuffled pass; [`Batcher::take`] draws from
/// a stream that reshuffles whenever it runs dry, used for the smaller domain.
#[derive(Clone, Debug)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    pending: Vec<usize>,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 for batch norm, got {batch_size}"
            )));
        }
        if n < 2 {
            return Err(Error::Data(format!("need at least 2 samples to batch, got {n}")));
        }
        Ok(Self {
            n,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: Vec::new(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn shuffled(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        order
    }

    /// One shuffled pass split into batches. A trailing batch of one sample
    /// is dropped; any other remainder is kept.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let order = self.shuffled();
        order
            .chunks(self.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// The next `count` indices of the cycling stream.
    pub fn take(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pending.is_empty() {
                self.pending = self.shuffled();
                self.pending.reverse();
            }
            out.push(self.pending.pop().expect("refilled"));
        }
        out
    }
}
