use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Modality};
use crate::error::{Error, Result};

/// Which loss a batch feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Intent,
    Text,
    Image,
    Joint,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Intent => "intent",
            Objective::Text => "text",
            Objective::Image => "image",
            Objective::Joint => "joint",
        })
    }
}

/// Modality composition of joint batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "image_fraction", rename_all = "snake_case")]
pub enum JointMix {
    /// Shuffle both modalities together: dataset proportion in expectation,
    /// exact over an epoch.
    #[default]
    Proportional,
    /// Each batch holds `round(f · B)` image pairs.
    Fixed(f64),
}

/// Endless, seeded, epoch-shuffled stream of example-index batches.
#[derive(Debug, Clone)]
pub struct BatchStream {
    text: Vec<usize>,
    image: Vec<usize>,
    all: Vec<usize>,
    mix: Option<f64>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    queue: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    pub fn new(dataset: &Dataset, objective: Objective, batch_size: usize, seed: u64, mix: JointMix) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let text = dataset.indices_of(Modality::Text);
        let image = dataset.indices_of(Modality::Image);
        let all: Vec<usize> = match objective {
            Objective::Text => text.clone(),
            Objective::Image => image.clone(),
            Objective::Intent | Objective::Joint => (0..dataset.len()).collect(),
        };
        if all.is_empty() {
            return Err(Error::Data(format!("no examples left for the {objective} objective")));
        }
        let mix = match (objective, mix) {
            (Objective::Joint, JointMix::Fixed(f)) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::Config(format!("image fraction {f} outside [0, 1]")));
                }
                if (f > 0.0 && image.is_empty()) || (f < 1.0 && text.is_empty()) {
                    return Err(Error::Data("joint mix needs both modalities".into()));
                }
                Some(f)
            }
            _ => None,
        };
        let mut stream = Self {
            text,
            image,
            all,
            mix,
            batch_size,
            seed,
            epoch: 0,
            queue: Vec::new().into_iter(),
        };
        stream.queue = stream.epoch_batches(0).into_iter();
        Ok(stream)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.all.len().div_ceil(self.batch_size)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn example_count(&self) -> usize {
        self.all.len()
    }

    /// All batches of `epoch`; the final batch may be short.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        match self.mix {
            None => {
                let mut order = self.all.clone();
                order.shuffle(&mut rng);
                order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
            }
            Some(fraction) => {
                let n_image = (fraction * self.batch_size as f64).round() as usize;
                let n_text = self.batch_size - n_image;
                let mut text = self.text.clone();
                let mut image = self.image.clone();
                text.shuffle(&mut rng);
                image.shuffle(&mut rng);
                let (mut ti, mut ii) = (text.iter().cycle(), image.iter().cycle());
                (0..self.batches_per_epoch())
                    .map(|_| {
                        let mut batch: Vec<usize> = ii.by_ref().take(n_image).copied().collect();
                        batch.extend(ti.by_ref().take(n_text).copied());
                        batch.shuffle(&mut rng);
                        batch
                    })
                    .collect()
            }
        }
    }

    /// Next batch and the epoch it belongs to.
    pub fn next_batch(&mut self) -> (usize, Vec<usize>) {
        loop {
            if let Some(b) = self.queue.next() {
                return (self.epoch, b);
            }
            self.epoch += 1;
            self.queue = self.epoch_batches(self.epoch).into_iter();
        }
    }
}
