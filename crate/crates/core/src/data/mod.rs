//! Dialogue examples, synthetic generation, prefix augmentation, JSONL
//! serialization, candidate pools, and batching.

mod batches;
mod generate;
mod jsonl;
mod pools;

use serde::{Deserialize, Serialize};

pub use batches::{BatchStream, JointMix, Objective};
pub use generate::{generate, prefix_augment, IntentPrior, Range, Splits, SyntheticGenConfig};
pub use jsonl::{load_jsonl, read_jsonl, save_jsonl, write_jsonl};
pub use pools::{build_pools, build_pools_with, CandidatePools, PoolOptions, POOL_SIZE};

use crate::encoders::ImageResponse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Image => "image",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Text(Vec<u32>),
    Image(ImageResponse),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueExample {
    pub id: String,
    pub context: Vec<Vec<u32>>,
    pub response: Response,
    /// Generator metadata; never read by models.
    pub topic: Option<usize>,
}

impl DialogueExample {
    pub fn gold_modality(&self) -> Modality {
        match self.response {
            Response::Text(_) => Modality::Text,
            Response::Image(_) => Modality::Image,
        }
    }

    pub fn text_response(&self) -> Option<&[u32]> {
        match &self.response {
            Response::Text(t) => Some(t),
            Response::Image(_) => None,
        }
    }

    pub fn image_response(&self) -> Option<&ImageResponse> {
        match &self.response {
            Response::Image(img) => Some(img),
            Response::Text(_) => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<DialogueExample>,
}

impl Dataset {
    pub fn new(examples: Vec<DialogueExample>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Indices of examples whose gold response has `modality`.
    pub fn indices_of(&self, modality: Modality) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.gold_modality() == modality)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.examples.iter().filter(|e| e.gold_modality() == modality).count()
    }

    /// Largest token id anywhere in the split, if any.
    pub fn max_token(&self) -> Option<u32> {
        self.examples
            .iter()
            .flat_map(|e| {
                let resp: Box<dyn Iterator<Item = &u32>> = match &e.response {
                    Response::Text(t) => Box::new(t.iter()),
                    Response::Image(img) => Box::new(img.labels.iter()),
                };
                e.context.iter().flatten().chain(resp)
            })
            .copied()
            .max()
    }
}
