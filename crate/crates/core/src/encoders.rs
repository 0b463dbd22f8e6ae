//! Desk-scale encoders mapping contexts, text responses, and image responses
//! into a shared unit-norm embedding space.
//!
//! Text: embedding lookup → masked mean-pool → tanh MLP → L2 normalize.
//! Image: P×P×C patches → linear → mean-pool → MLP (visual branch), object
//! labels through a separate text-shaped encoder (label branch), both
//! concatenated and projected, then L2 normalized.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Reserved token joining context utterances.
pub const SEPARATOR_TOKEN: u32 = 0;

/// Forward-pass mode. Dropout only fires in [`Mode::Train`].
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(rng) => Some(&mut **rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl Default for ImageGeometry {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 3,
            patch: 4,
        }
    }
}

impl ImageGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0
            || self.channels == 0
            || self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
        {
            return Err(Error::Config(format!(
                "image {}x{}x{} not divisible into {p}x{p} patches",
                self.height,
                self.width,
                self.channels,
                p = self.patch
            )));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn grid_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// An image candidate: an `H×W×C` grid plus its object-label tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResponse {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub grid: Vec<f64>,
    pub labels: Vec<u32>,
}

impl ImageResponse {
    pub fn validate(&self, geometry: &ImageGeometry) -> Result<()> {
        if (self.height, self.width, self.channels) != (geometry.height, geometry.width, geometry.channels) {
            return Err(Error::shape(
                "encode_image_response",
                &[self.height, self.width, self.channels],
                &[geometry.height, geometry.width, geometry.channels],
            ));
        }
        if self.grid.len() != geometry.grid_len() {
            return Err(Error::shape("encode_image_response", &[self.grid.len()], &[geometry.grid_len()]));
        }
        if self.labels.is_empty() {
            return Err(Error::degenerate("encode_image_response", format!("image {} has no labels", self.id)));
        }
        Ok(())
    }

    /// Non-overlapping patches as a `[num_patches × P·P·C]` matrix, patches in
    /// row-major grid order, each patch flattened as `(dy, dx, c)`.
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        let (h, w, c) = (self.height, self.width, self.channels);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::shape("patches", &[h, w, c], &[patch]));
        }
        let (ph, pw) = (h / patch, w / patch);
        let mut out = Vec::with_capacity(h * w * c);
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = (y * w + px * patch) * c;
                    out.extend_from_slice(&self.grid[start..start + patch * c]);
                }
            }
        }
        Tensor::matrix(ph * pw, patch * patch * c, out)
    }
}

/// Joins utterances with [`SEPARATOR_TOKEN`] and keeps the last `max_len`
/// tokens.
pub fn context_tokens(utterances: &[Vec<u32>], max_len: usize) -> Result<Vec<u32>> {
    if utterances.is_empty() || utterances.iter().all(|u| u.is_empty()) {
        return Err(Error::degenerate("encode_context", "empty context"));
    }
    let mut joined = Vec::new();
    for (i, u) in utterances.iter().enumerate() {
        if i > 0 {
            joined.push(SEPARATOR_TOKEN);
        }
        joined.extend_from_slice(u);
    }
    let start = joined.len().saturating_sub(max_len);
    Ok(joined.split_off(start))
}

/// Embedding + mean-pool + two-layer tanh MLP.
///
/// One value of this type is both the context encoder and the text-response
/// encoder of a retriever: the two are tied by holding the same ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderShape {
    pub vocab: usize,
    pub d_tok: usize,
    pub d_hidden: usize,
    pub d_out: usize,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, shape: TextEncoderShape, rng: &mut R) -> Self {
        Self {
            embedding: store.glorot(format!("{prefix}.embedding"), shape.vocab, shape.d_tok, rng),
            w1: store.glorot(format!("{prefix}.w1"), shape.d_tok, shape.d_hidden, rng),
            b1: store.zeros(format!("{prefix}.b1"), vec![shape.d_hidden]),
            w2: store.glorot(format!("{prefix}.w2"), shape.d_hidden, shape.d_out, rng),
            b2: store.zeros(format!("{prefix}.b2"), vec![shape.d_out]),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.embedding, self.w1, self.b1, self.w2, self.b2]
    }

    pub fn vocab(&self, store: &ParamStore) -> usize {
        store.get(self.embedding).shape()[0]
    }

    /// Un-normalized features `[B × d_out]`, one row per token sequence.
    pub fn features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sequences: &[Vec<u32>],
        dropout: f64,
        mode: &mut Mode,
    ) -> Result<Var> {
        let table = tape.param(store, self.embedding);
        let mut pooled = Vec::with_capacity(sequences.len());
        for seq in sequences {
            if seq.is_empty() {
                return Err(Error::degenerate("text encoder", "empty token sequence"));
            }
            let ids: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
            let rows = tape.embedding_lookup(table, &ids)?;
            pooled.push(tape.mean_pool_masked(rows, &vec![true; ids.len()])?);
        }
        let x = tape.stack_rows(&pooled)?;
        let (w1, b1, w2, b2) = (
            tape.param(store, self.w1),
            tape.param(store, self.b1),
            tape.param(store, self.w2),
            tape.param(store, self.b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.tanh(h);
        let h = tape.dropout(h, dropout, mode.rng())?;
        let out = tape.matmul(h, w2)?;
        tape.add_row_bias(out, b2)
    }

    /// Unit-norm embeddings of a batch of contexts.
    pub fn encode_contexts(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        contexts: &[&[Vec<u32>]],
        config: &EncoderConfig,
        mode: &mut Mode,
    ) -> Result<Var> {
        let seqs = contexts
            .iter()
            .map(|c| context_tokens(c, config.max_len))
            .collect::<Result<Vec<_>>>()?;
        let f = self.features(tape, store, &seqs, config.dropout, mode)?;
        tape.l2_normalize(f)
    }

    /// Unit-norm embeddings of text responses: the context pipeline applied to
    /// a single utterance each.
    pub fn encode_text_responses(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        responses: &[&[u32]],
        config: &EncoderConfig,
        mode: &mut Mode,
    ) -> Result<Var> {
        let seqs = responses
            .iter()
            .map(|r| context_tokens(std::slice::from_ref(&r.to_vec()), config.max_len))
            .collect::<Result<Vec<_>>>()?;
        let f = self.features(tape, store, &seqs, config.dropout, mode)?;
        tape.l2_normalize(f)
    }
}

/// Hyperparameters shared by every encoder of a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dropout: 0.2,
            max_len: 128,
        }
    }
}

/// Dimensions of one size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_tok: usize,
    pub d_hidden: usize,
    pub d_joint: usize,
    pub d_vis: usize,
    pub d_lab: usize,
}

impl Dims {
    pub const SMALL: Dims = Dims {
        d_tok: 32,
        d_hidden: 64,
        d_joint: 32,
        d_vis: 32,
        d_lab: 32,
    };
    pub const LARGE: Dims = Dims {
        d_tok: 64,
        d_hidden: 128,
        d_joint: 64,
        d_vis: 64,
        d_lab: 64,
    };
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub patch_proj: ParamId,
    pub patch_bias: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub label_encoder: TextEncoder,
    pub fusion_proj: ParamId,
    pub geometry: ImageGeometry,
}

impl ImageEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        dims: Dims,
        geometry: ImageGeometry,
        rng: &mut R,
    ) -> Self {
        let pl = geometry.patch_len();
        let patch_proj = store.glorot(format!("{prefix}.patch_proj"), pl, dims.d_hidden, rng);
        let patch_bias = store.zeros(format!("{prefix}.patch_bias"), vec![dims.d_hidden]);
        let mlp_w1 = store.glorot(format!("{prefix}.mlp_w1"), dims.d_hidden, dims.d_hidden, rng);
        let mlp_b1 = store.zeros(format!("{prefix}.mlp_b1"), vec![dims.d_hidden]);
        let mlp_w2 = store.glorot(format!("{prefix}.mlp_w2"), dims.d_hidden, dims.d_vis, rng);
        let mlp_b2 = store.zeros(format!("{prefix}.mlp_b2"), vec![dims.d_vis]);
        let label_encoder = TextEncoder::new(
            store,
            &format!("{prefix}.label"),
            TextEncoderShape {
                vocab,
                d_tok: dims.d_tok,
                d_hidden: dims.d_hidden,
                d_out: dims.d_lab,
            },
            rng,
        );
        let fusion_proj = store.glorot(format!("{prefix}.fusion_proj"), dims.d_vis + dims.d_lab, dims.d_joint, rng);
        Self {
            patch_proj,
            patch_bias,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            label_encoder,
            fusion_proj,
            geometry,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.patch_proj,
            self.patch_bias,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
        ];
        ids.extend(self.label_encoder.param_ids());
        ids.push(self.fusion_proj);
        ids
    }

    /// Visual-branch features `[B × d_vis]`.
    pub fn visual_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: &[&ImageResponse],
        dropout: f64,
        mode: &mut Mode,
    ) -> Result<Var> {
        let proj = tape.param(store, self.patch_proj);
        let bias = tape.param(store, self.patch_bias);
        let mut pooled = Vec::with_capacity(images.len());
        for img in images {
            img.validate(&self.geometry)?;
            let patches = tape.leaf(img.patches(self.geometry.patch)?);
            let embedded = tape.matmul(patches, proj)?;
            let embedded = tape.add_row_bias(embedded, bias)?;
            pooled.push(tape.mean_rows(embedded)?);
        }
        let x = tape.stack_rows(&pooled)?;
        let (w1, b1, w2, b2) = (
            tape.param(store, self.mlp_w1),
            tape.param(store, self.mlp_b1),
            tape.param(store, self.mlp_w2),
            tape.param(store, self.mlp_b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.tanh(h);
        let h = tape.dropout(h, dropout, mode.rng())?;
        let out = tape.matmul(h, w2)?;
        tape.add_row_bias(out, b2)
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: &[&ImageResponse],
        config: &EncoderConfig,
        mode: &mut Mode,
    ) -> Result<Var> {
        let visual = self.visual_features(tape, store, images, config.dropout, mode)?;
        let labels = images
            .iter()
            .map(|img| context_tokens(std::slice::from_ref(&img.labels), config.max_len))
            .collect::<Result<Vec<_>>>()?;
        let label = self.label_encoder.features(tape, store, &labels, config.dropout, mode)?;
        let fused = tape.concat_cols(visual, label)?;
        let fusion = tape.param(store, self.fusion_proj);
        let joint = tape.matmul(fused, fusion)?;
        tape.l2_normalize(joint)
    }
}

/// Linear intent head: `logit = wᵀx + b`, positive ⇔ image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl IntentHead {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_joint: usize, rng: &mut R) -> Self {
        Self {
            w: store.glorot(format!("{prefix}.w"), d_joint, 1, rng),
            b: store.zeros(format!("{prefix}.b"), vec![1]),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    /// Logits `[B × 1]` for context embeddings `[B × d_joint]`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, context_embs: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let z = tape.matmul(context_embs, w)?;
        tape.add_row_bias(z, b)
    }

    /// Logit for one precomputed context embedding.
    pub fn logit(&self, store: &ParamStore, context_embedding: &[f64]) -> Result<f64> {
        let w = store.get(self.w);
        if w.len() != context_embedding.len() {
            return Err(Error::shape("intent_logit", w.shape(), &[context_embedding.len()]));
        }
        Ok(crate::autodiff::dot(w.data(), context_embedding) + store.get(self.b).item())
    }
}

/// `σ(logit) > 0.5`, i.e. `logit > 0`.
pub fn predicts_image(logit: f64) -> bool {
    logit > 0.0
}

/// Eval-mode context embeddings as plain rows.
pub fn embed_contexts(
    encoder: &TextEncoder,
    store: &ParamStore,
    contexts: &[&[Vec<u32>]],
    config: &EncoderConfig,
) -> Result<Vec<Vec<f64>>> {
    if contexts.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let v = encoder.encode_contexts(&mut tape, store, contexts, config, &mut Mode::Eval)?;
    Ok(rows(tape.value(v)))
}

pub fn embed_text_responses(
    encoder: &TextEncoder,
    store: &ParamStore,
    responses: &[&[u32]],
    config: &EncoderConfig,
) -> Result<Vec<Vec<f64>>> {
    if responses.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let v = encoder.encode_text_responses(&mut tape, store, responses, config, &mut Mode::Eval)?;
    Ok(rows(tape.value(v)))
}

pub fn embed_images(
    encoder: &ImageEncoder,
    store: &ParamStore,
    images: &[&ImageResponse],
    config: &EncoderConfig,
) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let v = encoder.encode(&mut tape, store, images, config, &mut Mode::Eval)?;
    Ok(rows(tape.value(v)))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (m, _) = t.matrix_dims().expect("matrix");
    (0..m).map(|i| t.row(i).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autodiff::{dot, sigmoid};

    fn text_encoder(vocab: usize) -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = TextEncoder::new(
            &mut store,
            "ctx",
            TextEncoderShape {
                vocab,
                d_tok: 8,
                d_hidden: 16,
                d_out: 8,
            },
            &mut rng,
        );
        (store, enc)
    }

    fn random_image(rng: &mut ChaCha8Rng, geometry: ImageGeometry) -> ImageResponse {
        ImageResponse {
            id: "img".into(),
            height: geometry.height,
            width: geometry.width,
            channels: geometry.channels,
            grid: (0..geometry.grid_len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            labels: vec![3, 5, 9],
        }
    }

    #[test]
    fn context_truncation_keeps_suffix() {
        let utterances: Vec<Vec<u32>> = (0..20).map(|i| (1..=9).map(|t| t + i).collect()).collect();
        let joined = context_tokens(&utterances, usize::MAX).unwrap();
        assert_eq!(joined.len(), 20 * 9 + 19);
        let tail = context_tokens(&utterances, 128).unwrap();
        assert_eq!(tail.len(), 128);
        assert_eq!(tail.as_slice(), &joined[joined.len() - 128..]);
        assert!(context_tokens(&[], 128).is_err());
    }

    #[test]
    fn long_context_encodes_like_its_suffix() {
        let (store, enc) = text_encoder(64);
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let long: Vec<u32> = (0..200).map(|_| rng.random_range(1..64)).collect();
        let suffix = long[long.len() - 128..].to_vec();
        let a = embed_contexts(&enc, &store, &[&[long][..]], &cfg).unwrap();
        let b = embed_contexts(&enc, &store, &[&[suffix][..]], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn text_response_matches_single_utterance_context() {
        let (store, enc) = text_encoder(32);
        let cfg = EncoderConfig::default();
        let t = vec![4, 9, 2, 31];
        let a = embed_text_responses(&enc, &store, &[&t], &cfg).unwrap();
        let b = embed_contexts(&enc, &store, &[&[t.clone()][..]], &cfg).unwrap();
        assert_eq!(a, b);
        let norm = dot(&a[0], &a[0]).sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_token_is_an_index_error() {
        let (store, enc) = text_encoder(16);
        let cfg = EncoderConfig::default();
        let err = embed_contexts(&enc, &store, &[&[vec![1, 99]][..]], &cfg).unwrap_err();
        assert!(matches!(err, Error::Index { index: 99, .. }));
    }

    #[test]
    fn patch_extraction_and_order_invariance() {
        let geometry = ImageGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, geometry);
        let patches = img.patches(4).unwrap();
        assert_eq!(patches.shape(), &[4, 48]);
        // top-left patch begins with pixel (0,0) and its second row is pixel (1,0)
        assert_eq!(&patches.row(0)[..3], &img.grid[..3]);
        assert_eq!(&patches.row(0)[12..15], &img.grid[8 * 3..8 * 3 + 3]);

        // swapping two quadrants reorders patches only
        let mut swapped = img.clone();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    let a = (y * 8 + x) * 3 + c;
                    let b = ((y + 4) * 8 + x + 4) * 3 + c;
                    swapped.grid.swap(a, b);
                }
            }
        }
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, "image", 16, Dims::SMALL, geometry, &mut rng);
        let cfg = EncoderConfig::default();
        let a = embed_images(&enc, &store, &[&img], &cfg).unwrap();
        let b = embed_images(&enc, &store, &[&swapped], &cfg).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_grid_visual_branch_is_bias_path() {
        let geometry = ImageGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, "image", 16, Dims::SMALL, geometry, &mut rng);
        let bias: Vec<f64> = (0..Dims::SMALL.d_hidden).map(|i| 0.01 * i as f64).collect();
        store.assign(enc.patch_bias, &Tensor::vector(bias.clone())).unwrap();
        let mut img = random_image(&mut rng, geometry);
        img.grid.iter_mut().for_each(|v| *v = 0.0);

        let mut tape = Tape::new();
        let vis = enc
            .visual_features(&mut tape, &store, &[&img], 0.0, &mut Mode::Eval)
            .unwrap();
        let got = tape.value(vis).data().to_vec();

        // MLP applied to the patch bias alone
        let w1 = store.get(enc.mlp_w1);
        let w2 = store.get(enc.mlp_w2);
        let (dh, dv) = (Dims::SMALL.d_hidden, Dims::SMALL.d_vis);
        let hidden: Vec<f64> = (0..dh)
            .map(|j| (0..dh).map(|i| bias[i] * w1.data()[i * dh + j]).sum::<f64>().tanh())
            .collect();
        for k in 0..dv {
            let expect: f64 = (0..dh).map(|j| hidden[j] * w2.data()[j * dv + k]).sum();
            assert!((got[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn image_encoder_rejects_bad_inputs() {
        let geometry = ImageGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, "image", 16, Dims::SMALL, geometry, &mut rng);
        let cfg = EncoderConfig::default();
        let mut img = random_image(&mut rng, geometry);
        img.labels.clear();
        assert!(embed_images(&enc, &store, &[&img], &cfg).is_err());
        let mut img = random_image(&mut rng, geometry);
        img.height = 6;
        assert!(matches!(embed_images(&enc, &store, &[&img], &cfg), Err(Error::Shape { .. })));
    }

    #[test]
    fn intent_head_spot_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = IntentHead::new(&mut store, "intent", 4, &mut rng);
        let x = [0.5, -0.5, 0.5, 0.5];
        store.assign(head.w, &Tensor::zeros(vec![4, 1])).unwrap();
        let z = head.logit(&store, &x).unwrap();
        assert_eq!(z, 0.0);
        assert_eq!(sigmoid(z), 0.5);
        assert!(!predicts_image(z));

        store.assign(head.b, &Tensor::vector(vec![3.0])).unwrap();
        let z = head.logit(&store, &x).unwrap();
        assert!((sigmoid(z) - 0.9526).abs() < 1e-4);
        assert!(predicts_image(z));
    }

    #[test]
    fn intent_head_sign_flip_flips_predictions() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let head = IntentHead::new(&mut store, "intent", 6, &mut rng);
        store.assign(head.b, &Tensor::vector(vec![0.1])).unwrap();
        let xs: Vec<Vec<f64>> = (0..50).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let before: Vec<bool> = xs.iter().map(|x| predicts_image(head.logit(&store, x).unwrap())).collect();
        let w: Vec<f64> = store.get(head.w).data().iter().map(|v| -v).collect();
        store.assign(head.w, &Tensor::new(vec![6, 1], w).unwrap()).unwrap();
        store.assign(head.b, &Tensor::vector(vec![-0.1])).unwrap();
        for (x, b) in xs.iter().zip(before) {
            let z = head.logit(&store, x).unwrap();
            assert!(z != 0.0);
            assert_eq!(predicts_image(z), !b);
        }
    }
}
