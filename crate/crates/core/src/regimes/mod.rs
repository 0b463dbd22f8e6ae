//! The three integration architectures and their inference rules.
//!
//! | regime | context encoders                         | intent head |
//! |--------|------------------------------------------|-------------|
//! | DR     | three: text retrieval, image retrieval, intent | yes   |
//! | SDR    | one, shared by all three roles           | yes         |
//! | MDR    | one                                      | no          |
//!
//! In every regime the text-retrieval context encoder doubles as the
//! text-response encoder.

mod train;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use train::{
    derive_seed, objective_loss, train, CheckpointEvent, EpochBudget, LogEntry, NoopObserver, Phase, PhaseResult,
    TrailEntry, TrainConfig, TrainObserver, TrainOutcome,
};

use crate::data::Modality;
use crate::encoders::{
    embed_contexts, embed_images, embed_text_responses, Dims, EncoderConfig, ImageEncoder, ImageGeometry,
    ImageResponse, IntentHead, TextEncoder, TextEncoderShape,
};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Dr,
    Sdr,
    Mdr,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Dr, Regime::Sdr, Regime::Mdr];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Dr => "DR",
            Regime::Sdr => "SDR",
            Regime::Mdr => "MDR",
        }
    }

    pub fn is_gated(self) -> bool {
        !matches!(self, Regime::Mdr)
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dr" => Ok(Regime::Dr),
            "sdr" => Ok(Regime::Sdr),
            "mdr" => Ok(Regime::Mdr),
            other => Err(Error::Config(format!("unknown regime {other:?} (expected dr, sdr or mdr)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    Small,
    Large,
}

impl SizePreset {
    pub fn dims(self) -> Dims {
        match self {
            SizePreset::Small => Dims::SMALL,
            SizePreset::Large => Dims::LARGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub preset: SizePreset,
    pub vocab_size: usize,
    pub geometry: ImageGeometry,
    pub encoder: EncoderConfig,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: SizePreset::Small,
            vocab_size: 256,
            geometry: ImageGeometry::default(),
            encoder: EncoderConfig::default(),
            temperature: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self) -> Dims {
        self.preset.dims()
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.encoder.dropout) || self.encoder.max_len == 0 {
            return Err(Error::Config(format!("invalid encoder config {:?}", self.encoder)));
        }
        Ok(())
    }
}

/// Intent predictor: its own context-encoder role plus a linear head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentPath {
    pub context: TextEncoder,
    pub head: IntentHead,
}

/// Full parameter set of one regime, including its sharing topology.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub regime: Regime,
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Context encoder of the text retriever, tied to the text-response encoder.
    pub text_context: TextEncoder,
    /// Context encoder of the image retriever.
    pub image_context: TextEncoder,
    pub image_encoder: ImageEncoder,
    pub intent: Option<IntentPath>,
}

pub fn build_model(regime: Regime, config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let dims = config.dims();
    let shape = TextEncoderShape {
        vocab: config.vocab_size,
        d_tok: dims.d_tok,
        d_hidden: dims.d_hidden,
        d_out: dims.d_joint,
    };
    let (text_context, image_context, intent_context) = match regime {
        Regime::Dr => {
            let t = TextEncoder::new(&mut store, "context_text", shape, &mut rng);
            let i = TextEncoder::new(&mut store, "context_image", shape, &mut rng);
            let n = TextEncoder::new(&mut store, "context_intent", shape, &mut rng);
            (t, i, Some(n))
        }
        Regime::Sdr => {
            let c = TextEncoder::new(&mut store, "context", shape, &mut rng);
            (c.clone(), c.clone(), Some(c))
        }
        Regime::Mdr => {
            let c = TextEncoder::new(&mut store, "context", shape, &mut rng);
            (c.clone(), c, None)
        }
    };
    let image_encoder = ImageEncoder::new(&mut store, "image", config.vocab_size, dims, config.geometry, &mut rng);
    let intent = intent_context.map(|context| IntentPath {
        context,
        head: IntentHead::new(&mut store, "intent", dims.d_joint, &mut rng),
    });
    Ok(ModelBundle {
        regime,
        config: config.clone(),
        store,
        text_context,
        image_context,
        image_encoder,
        intent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidateId {
    pub modality: Modality,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub id: CandidateId,
    pub score: f64,
}

/// Ranked candidates. For gated inference only the selected modality is
/// ranked; the other modality is unreachable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub intent_logit: Option<f64>,
    pub selected: Option<Modality>,
    pub ranked: Vec<ScoredCandidate>,
}

impl Ranking {
    pub fn ids(&self) -> Vec<CandidateId> {
        self.ranked.iter().map(|c| c.id).collect()
    }
}

/// Score descending, then text before image, then index ascending.
pub fn ranking_order(a: &ScoredCandidate, b: &ScoredCandidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.id.modality.cmp(&b.id.modality))
        .then(a.id.index.cmp(&b.id.index))
}

/// Score every candidate embedding against `query` and sort with
/// [`ranking_order`].
pub fn rank_candidates<'a>(
    query: &[f64],
    candidates: impl IntoIterator<Item = (CandidateId, &'a [f64])>,
) -> Vec<ScoredCandidate> {
    let mut scored: Vec<ScoredCandidate> = candidates
        .into_iter()
        .map(|(id, emb)| ScoredCandidate {
            id,
            score: crate::autodiff::dot(query, emb),
        })
        .collect();
    scored.sort_by(ranking_order);
    scored
}

impl ModelBundle {
    pub fn intent_path(&self) -> Result<&IntentPath> {
        self.intent
            .as_ref()
            .ok_or_else(|| Error::Structural(format!("{} has no intent predictor", self.regime)))
    }

    pub fn intent_head(&self) -> Result<&IntentHead> {
        self.intent_path().map(|p| &p.head)
    }

    /// The context encoder serving retrieval of `modality`.
    pub fn context_encoder(&self, modality: Modality) -> &TextEncoder {
        match modality {
            Modality::Text => &self.text_context,
            Modality::Image => &self.image_context,
        }
    }

    pub fn text_response_encoder(&self) -> &TextEncoder {
        &self.text_context
    }

    /// Distinct context-encoder instances.
    pub fn context_encoders(&self) -> Vec<&TextEncoder> {
        let mut out: Vec<&TextEncoder> = vec![&self.text_context];
        let extra = [Some(&self.image_context), self.intent.as_ref().map(|p| &p.context)];
        for enc in extra.into_iter().flatten() {
            if !out.contains(&enc) {
                out.push(enc);
            }
        }
        out
    }

    /// Parameters trained by the text-retrieval subtask.
    pub fn text_retrieval_params(&self) -> Vec<ParamId> {
        self.text_context.param_ids()
    }

    pub fn image_retrieval_params(&self) -> Vec<ParamId> {
        let mut ids = self.image_context.param_ids();
        ids.extend(self.image_encoder.param_ids());
        dedup(ids)
    }

    pub fn intent_params(&self) -> Result<Vec<ParamId>> {
        let p = self.intent_path()?;
        let mut ids = p.context.param_ids();
        ids.extend(p.head.param_ids());
        Ok(dedup(ids))
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.config.encoder
    }

    pub fn intent_logit(&self, context: &[Vec<u32>]) -> Result<f64> {
        let p = self.intent_path()?;
        let emb = embed_contexts(&p.context, &self.store, &[context], &self.config.encoder)?;
        p.head.logit(&self.store, &emb[0])
    }

    pub fn embed_context(&self, modality: Modality, context: &[Vec<u32>]) -> Result<Vec<f64>> {
        let enc = self.context_encoder(modality);
        Ok(embed_contexts(enc, &self.store, &[context], &self.config.encoder)?.remove(0))
    }

    pub fn embed_text_responses(&self, responses: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        embed_text_responses(&self.text_context, &self.store, responses, &self.config.encoder)
    }

    pub fn embed_images(&self, images: &[&ImageResponse]) -> Result<Vec<Vec<f64>>> {
        embed_images(&self.image_encoder, &self.store, images, &self.config.encoder)
    }

    fn rank_pool(
        &self,
        modality: Modality,
        context: &[Vec<u32>],
        text_pool: &[(usize, &[u32])],
        image_pool: &[(usize, &ImageResponse)],
    ) -> Result<Vec<ScoredCandidate>> {
        let query = self.embed_context(modality, context)?;
        Ok(match modality {
            Modality::Text => {
                let embs = self.embed_text_responses(&text_pool.iter().map(|(_, t)| *t).collect::<Vec<_>>())?;
                rank_candidates(&query, text_pool.iter().zip(&embs).map(|((i, _), e)| (text_id(*i), e.as_slice())))
            }
            Modality::Image => {
                let embs = self.embed_images(&image_pool.iter().map(|(_, img)| *img).collect::<Vec<_>>())?;
                rank_candidates(&query, image_pool.iter().zip(&embs).map(|((i, _), e)| (image_id(*i), e.as_slice())))
            }
        })
    }
}

pub fn text_id(index: usize) -> CandidateId {
    CandidateId {
        modality: Modality::Text,
        index,
    }
}

pub fn image_id(index: usize) -> CandidateId {
    CandidateId {
        modality: Modality::Image,
        index,
    }
}

fn dedup(mut ids: Vec<ParamId>) -> Vec<ParamId> {
    ids.sort();
    ids.dedup();
    ids
}

/// Two-step inference: the intent probability picks a modality
/// (`σ(logit) > 0.5` → image), then only that pool is ranked.
pub fn infer_gated(
    bundle: &ModelBundle,
    context: &[Vec<u32>],
    text_pool: &[(usize, &[u32])],
    image_pool: &[(usize, &ImageResponse)],
) -> Result<Ranking> {
    if text_pool.is_empty() || image_pool.is_empty() {
        return Err(Error::Data("gated inference needs non-empty text and image pools".into()));
    }
    let logit = bundle.intent_logit(context)?;
    let selected = if crate::encoders::predicts_image(logit) {
        Modality::Image
    } else {
        Modality::Text
    };
    Ok(Ranking {
        intent_logit: Some(logit),
        selected: Some(selected),
        ranked: bundle.rank_pool(selected, context, text_pool, image_pool)?,
    })
}

/// One-step inference over the union of both pools.
pub fn infer_joint(
    bundle: &ModelBundle,
    context: &[Vec<u32>],
    text_pool: &[(usize, &[u32])],
    image_pool: &[(usize, &ImageResponse)],
) -> Result<Ranking> {
    if text_pool.is_empty() && image_pool.is_empty() {
        return Err(Error::Data("joint inference needs candidates".into()));
    }
    let mut ranked = Vec::with_capacity(text_pool.len() + image_pool.len());
    if !text_pool.is_empty() {
        ranked.extend(bundle.rank_pool(Modality::Text, context, text_pool, image_pool)?);
    }
    if !image_pool.is_empty() {
        ranked.extend(bundle.rank_pool(Modality::Image, context, text_pool, image_pool)?);
    }
    ranked.sort_by(ranking_order);
    Ok(Ranking {
        intent_logit: None,
        selected: None,
        ranked,
    })
}

/// Regime-appropriate inference: gated for DR/SDR, joint for MDR.
pub fn infer(
    bundle: &ModelBundle,
    context: &[Vec<u32>],
    text_pool: &[(usize, &[u32])],
    image_pool: &[(usize, &ImageResponse)],
) -> Result<Ranking> {
    if bundle.regime.is_gated() {
        infer_gated(bundle, context, text_pool, image_pool)
    } else {
        infer_joint(bundle, context, text_pool, image_pool)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// Scalars per top-level component (`context_text`, `image`, `intent`, ...).
    pub components: BTreeMap<String, usize>,
    pub total: usize,
}

/// Exact scalar counts; shared tensors exist once in the store and are
/// counted once.
pub fn count_parameters(bundle: &ModelBundle) -> ParamCounts {
    let mut components = BTreeMap::new();
    for (_, p) in bundle.store.iter() {
        let component = p.name.split('.').next().unwrap_or(&p.name).to_string();
        *components.entry(component).or_insert(0) += p.value.len();
    }
    ParamCounts {
        total: bundle.store.total_scalars(),
        components,
    }
}
