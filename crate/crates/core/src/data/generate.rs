//! Topic-conditioned synthetic dialogues.
//!
//! Vocabulary ids `1..vocab_size` are split into `n_topics` disjoint shards.
//! Every dialogue draws a topic and a small key set from that topic's shard;
//! its utterances, text response, and image labels are built from the key
//! set, so a response matches exactly one context up to noise. Each token is
//! replaced with probability `alignment_noise` by a token from another shard,
//! and image grids are the topic's pattern plus Gaussian noise of the same
//! scale.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DialogueExample, Response};
use crate::encoders::{ImageResponse, SEPARATOR_TOKEN};
use crate::error::{Error, Result};

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range {
    pub min: usize,
    pub max: usize,
}

impl Range {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

/// P(image response | topic).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum IntentPrior {
    /// Even topics always answer with an image, odd topics with text.
    Parity,
    Constant(f64),
    PerTopic(Vec<f64>),
}

impl IntentPrior {
    pub fn probability(&self, topic: usize) -> f64 {
        match self {
            IntentPrior::Parity => {
                if topic.is_multiple_of(2) {
                    1.0
                } else {
                    0.0
                }
            }
            IntentPrior::Constant(p) => *p,
            IntentPrior::PerTopic(ps) => ps[topic],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticGenConfig {
    pub n_topics: usize,
    pub vocab_size: usize,
    pub keys_per_dialogue: usize,
    pub train_dialogues: usize,
    pub dev_dialogues: usize,
    pub test_dialogues: usize,
    pub context_utterances: Range,
    pub utterance_tokens: Range,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub intent_prior: IntentPrior,
    pub alignment_noise: f64,
    pub intent_ambiguity: f64,
    /// Apply `intent_ambiguity` to the train split only, keeping dev/test clean.
    pub ambiguity_train_only: bool,
    pub seed: u64,
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        Self {
            n_topics: 8,
            vocab_size: 256,
            keys_per_dialogue: 3,
            train_dialogues: 2000,
            dev_dialogues: 400,
            test_dialogues: 400,
            context_utterances: Range::new(2, 6),
            utterance_tokens: Range::new(3, 10),
            image_height: 8,
            image_width: 8,
            image_channels: 3,
            intent_prior: IntentPrior::Parity,
            alignment_noise: 0.05,
            intent_ambiguity: 0.0,
            ambiguity_train_only: false,
            seed: 0,
        }
    }
}

impl SyntheticGenConfig {
    pub fn shard_size(&self) -> usize {
        (self.vocab_size.saturating_sub(1)) / self.n_topics.max(1)
    }

    /// Token ids belonging to `topic`.
    pub fn shard(&self, topic: usize) -> std::ops::Range<u32> {
        let s = self.shard_size();
        let start = 1 + topic * s;
        start as u32..(start + s) as u32
    }

    pub fn topic_of_token(&self, token: u32) -> Option<usize> {
        let s = self.shard_size();
        if token == SEPARATOR_TOKEN || s == 0 {
            return None;
        }
        let t = (token as usize - 1) / s;
        (t < self.n_topics).then_some(t)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_topics == 0 {
            return bad("n_topics must be positive".into());
        }
        if self.shard_size() < self.keys_per_dialogue.max(1) {
            return bad(format!(
                "vocab_size {} too small for {} topics with {} keys each",
                self.vocab_size, self.n_topics, self.keys_per_dialogue
            ));
        }
        if self.keys_per_dialogue == 0 {
            return bad("keys_per_dialogue must be positive".into());
        }
        for (name, n) in [
            ("train", self.train_dialogues),
            ("dev", self.dev_dialogues),
            ("test", self.test_dialogues),
        ] {
            if n == 0 {
                return bad(format!("{name} split needs at least one dialogue"));
            }
        }
        for (name, r) in [
            ("context_utterances", self.context_utterances),
            ("utterance_tokens", self.utterance_tokens),
        ] {
            if r.min == 0 || r.min > r.max {
                return bad(format!("{name} range {}..={} is invalid", r.min, r.max));
            }
        }
        if self.utterance_tokens.min < self.keys_per_dialogue {
            return bad(format!(
                "utterances of {} tokens cannot hold {} keys",
                self.utterance_tokens.min, self.keys_per_dialogue
            ));
        }
        if self.image_height == 0 || self.image_width == 0 || self.image_channels == 0 {
            return bad("image dimensions must be positive".into());
        }
        for (name, p) in [
            ("alignment_noise", self.alignment_noise),
            ("intent_ambiguity", self.intent_ambiguity),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        match &self.intent_prior {
            IntentPrior::Parity => {}
            IntentPrior::Constant(p) if (0.0..=1.0).contains(p) => {}
            IntentPrior::PerTopic(ps) if ps.len() == self.n_topics && ps.iter().all(|p| (0.0..=1.0).contains(p)) => {}
            other => return bad(format!("invalid intent prior {other:?}")),
        }
        // key sets are unique per (split, topic)
        let combos = binomial(self.shard_size(), self.keys_per_dialogue);
        let largest = self.train_dialogues.max(self.dev_dialogues).max(self.test_dialogues);
        if largest.div_ceil(self.n_topics) as f64 > combos / 2.0 {
            return bad(format!(
                "{largest} dialogues need more distinct key sets than {:.0} per topic allows",
                combos
            ));
        }
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn by_name(&self, name: &str) -> Option<&Dataset> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub fn generate(config: &SyntheticGenConfig) -> Result<Splits> {
    config.validate()?;
    let patterns = topic_patterns(config);
    let split = |name: &str, stream: u64, n: usize, ambiguity: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        generate_split(config, &patterns, name, n, ambiguity, &mut rng)
    };
    let eval_ambiguity = if config.ambiguity_train_only {
        0.0
    } else {
        config.intent_ambiguity
    };
    Ok(Splits {
        train: split("train", 1, config.train_dialogues, config.intent_ambiguity),
        dev: split("dev", 2, config.dev_dialogues, eval_ambiguity),
        test: split("test", 3, config.test_dialogues, eval_ambiguity),
    })
}

fn topic_patterns(config: &SyntheticGenConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let len = config.image_height * config.image_width * config.image_channels;
    (0..config.n_topics)
        .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn generate_split(
    config: &SyntheticGenConfig,
    patterns: &[Vec<f64>],
    name: &str,
    n: usize,
    ambiguity: f64,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let mut topics: Vec<usize> = (0..n).map(|i| i % config.n_topics).collect();
    topics.shuffle(rng);
    let noise = Normal::new(0.0, config.alignment_noise).expect("validated noise");
    let mut used_keys: HashSet<(usize, Vec<u32>)> = HashSet::new();

    let examples = topics
        .into_iter()
        .enumerate()
        .map(|(i, topic)| {
            let shard = config.shard(topic);
            let keys = loop {
                let mut k: Vec<u32> = rand::seq::index::sample(rng, shard.len(), config.keys_per_dialogue)
                    .into_iter()
                    .map(|j| shard.start + j as u32)
                    .collect();
                k.sort_unstable();
                if used_keys.insert((topic, k.clone())) {
                    break k;
                }
            };
            let n_utt = config.context_utterances.sample(rng);
            let context = (0..n_utt)
                .map(|_| {
                    let len = config.utterance_tokens.sample(rng);
                    keyed_tokens(config, topic, &keys, len, rng)
                })
                .collect();

            let mut image = rng.random::<f64>() < config.intent_prior.probability(topic);
            if rng.random::<f64>() < ambiguity {
                image = !image;
            }
            let response = if image {
                let extra = rng.random_range(0..=1);
                let labels = keyed_tokens(config, topic, &keys, keys.len() + extra, rng);
                let grid = patterns[topic]
                    .iter()
                    .map(|&p| {
                        if config.alignment_noise > 0.0 {
                            p + noise.sample(rng)
                        } else {
                            p
                        }
                    })
                    .collect();
                Response::Image(ImageResponse {
                    id: format!("{name}-img-{i:05}"),
                    height: config.image_height,
                    width: config.image_width,
                    channels: config.image_channels,
                    grid,
                    labels,
                })
            } else {
                let len = config.utterance_tokens.sample(rng);
                Response::Text(keyed_tokens(config, topic, &keys, len, rng))
            };
            DialogueExample {
                id: format!("{name}-{i:05}"),
                context,
                response,
                topic: Some(topic),
            }
        })
        .collect();
    Dataset::new(examples)
}

/// Every key once (shuffled) followed by random keys up to `len`, then
/// per-token off-shard noise.
fn keyed_tokens(config: &SyntheticGenConfig, topic: usize, keys: &[u32], len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut tokens: Vec<u32> = keys.to_vec();
    tokens.shuffle(rng);
    while tokens.len() < len {
        tokens.push(keys[rng.random_range(0..keys.len())]);
    }
    tokens.truncate(len);
    let shard = config.shard(topic);
    let off_shard = config.vocab_size - 1 - shard.len();
    for t in tokens.iter_mut() {
        if off_shard > 0 && rng.random::<f64>() < config.alignment_noise {
            // uniform over ids 1..vocab outside this topic's shard
            let mut id = 1 + rng.random_range(0..off_shard) as u32;
            if id >= shard.start {
                id += shard.len() as u32;
            }
            *t = id;
        }
    }
    tokens
}

/// One example per context prefix length `1..=l`, all sharing the gold
/// response. Ids gain a `#p{n}` suffix.
pub fn prefix_augment(dataset: &Dataset) -> Dataset {
    let examples = dataset
        .examples
        .iter()
        .flat_map(|ex| {
            (1..=ex.context.len()).map(move |n| DialogueExample {
                id: format!("{}#p{n}", ex.id),
                context: ex.context[..n].to_vec(),
                response: ex.response.clone(),
                topic: ex.topic,
            })
        })
        .collect();
    Dataset::new(examples)
}
