//! Frozen evaluation candidates: per example, [`POOL_SIZE`] text and
//! [`POOL_SIZE`] image responses drawn from the split, gold included in its
//! own modality's pool.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Modality};
use crate::error::{Error, Result};

pub const POOL_SIZE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolOptions {
    pub size: usize,
    /// One split-wide candidate set per modality, gold swapped in per example,
    /// instead of independent per-example draws.
    pub shared: bool,
}

impl Default for PoolOptions {
    fn default() -> Self {
        Self {
            size: POOL_SIZE,
            shared: false,
        }
    }
}

/// Candidate lists hold indices into the split's examples; a candidate is the
/// gold response of the example it points to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePools {
    pub text: Vec<Vec<usize>>,
    pub image: Vec<Vec<usize>>,
}

impl CandidatePools {
    pub fn for_modality(&self, modality: Modality) -> &[Vec<usize>] {
        match modality {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

pub fn build_pools(split: &Dataset, seed: u64) -> Result<CandidatePools> {
    build_pools_with(split, seed, PoolOptions::default())
}

pub fn build_pools_with(split: &Dataset, seed: u64, options: PoolOptions) -> Result<CandidatePools> {
    let stores = [split.indices_of(Modality::Text), split.indices_of(Modality::Image)];
    for (store, m) in stores.iter().zip([Modality::Text, Modality::Image]) {
        if store.len() < options.size || options.size == 0 {
            return Err(Error::Data(format!(
                "split has {} {m} responses, pools need {}",
                store.len(),
                options.size
            )));
        }
    }
    let mut pools = Vec::with_capacity(2);
    for (stream, (store, modality)) in stores.iter().zip([Modality::Text, Modality::Image]).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        let shared_base: Option<Vec<usize>> = options
            .shared
            .then(|| sample(&mut rng, store, options.size, None));
        let per_example = split
            .examples
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let gold = (ex.gold_modality() == modality).then_some(i);
                match (&shared_base, gold) {
                    (Some(base), Some(g)) if !base.contains(&g) => {
                        let mut pool = base.clone();
                        let slot = rng.random_range(0..pool.len());
                        pool[slot] = g;
                        pool
                    }
                    (Some(base), _) => base.clone(),
                    (None, Some(g)) => {
                        let mut pool = sample(&mut rng, store, options.size - 1, Some(g));
                        let slot = rng.random_range(0..=pool.len());
                        pool.insert(slot, g);
                        pool
                    }
                    (None, None) => sample(&mut rng, store, options.size, None),
                }
            })
            .collect();
        pools.push(per_example);
    }
    let image = pools.pop().expect("two modalities");
    let text = pools.pop().expect("two modalities");
    Ok(CandidatePools { text, image })
}

/// `amount` distinct entries of `store`, never `exclude`.
fn sample(rng: &mut ChaCha8Rng, store: &[usize], amount: usize, exclude: Option<usize>) -> Vec<usize> {
    match exclude.and_then(|g| store.iter().position(|&s| s == g)) {
        Some(pos) => index::sample(rng, store.len() - 1, amount)
            .into_iter()
            .map(|j| store[if j >= pos { j + 1 } else { j }])
            .collect(),
        None => index::sample(rng, store.len(), amount)
            .into_iter()
            .map(|j| store[j])
            .collect(),
    }
}
