//! Browser bindings: three small interactive operations over `mdr-core`,
//! each returning a JSON string for the static page in `www/`.

use mdr_core::autodiff::Tape;
use mdr_core::data::{build_pools, generate, Response, SyntheticGenConfig};
use mdr_core::eval::{evaluate, EvalRequest};
use mdr_core::objectives::{contrastive_loss, ContrastiveOptions};
use mdr_core::regimes::{build_model, train, LogEntry, ModelConfig, Regime, TrainConfig, TrainObserver};
use mdr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn to_js<T>(r: Result<T, String>) -> Result<T, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Contrastive loss of a synthetic batch across a log-spaced temperature grid.
#[wasm_bindgen]
pub fn temperature_sweep(batch: usize, misalignment: f64, seed: u64) -> Result<String, JsValue> {
    to_js(sweep(batch, misalignment, seed))
}

/// Train one regime on a small synthetic corpus and report dev curves plus
/// test recall.
#[wasm_bindgen]
pub fn train_regime(regime: &str, ambiguity: f64, noise: f64, steps: u32, seed: u64) -> Result<String, JsValue> {
    to_js(run_training(regime, ambiguity, noise, steps, seed))
}

/// A few generated dialogues with their gold responses.
#[wasm_bindgen]
pub fn preview_data(noise: f64, ambiguity: f64, seed: u64, count: usize) -> Result<String, JsValue> {
    to_js(preview(noise, ambiguity, seed, count))
}


pub fn sweep(batch: usize, misalignment: f64, seed: u64) -> Result<String, String> {
    const DIM: usize = 16;
    if !(1..=64).contains(&batch) {
        return Err("batch must be in 1..=64".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let c = draw(batch * DIM);
    let noise = draw(batch * DIM);
    let r: Vec<f64> = c.iter().zip(&noise).map(|(a, n)| a + misalignment * n).collect();
    let temperatures: Vec<f64> = (0..=40).map(|i| 10f64.powf(-3.0 + 3.0 * i as f64 / 40.0)).collect();
    let mut losses = Vec::with_capacity(temperatures.len());
    for &t in &temperatures {
        let mut tape = Tape::new();
        let cv = tape.leaf(Tensor::matrix(batch, DIM, c.clone()).map_err(|e| e.to_string())?);
        let rv = tape.leaf(Tensor::matrix(batch, DIM, r.clone()).map_err(|e| e.to_string())?);
        let cn = tape.l2_normalize(cv).map_err(|e| e.to_string())?;
        let rn = tape.l2_normalize(rv).map_err(|e| e.to_string())?;
        let l = contrastive_loss(&mut tape, cn, rn, &ContrastiveOptions::with_temperature(t)).map_err(|e| e.to_string())?;
        losses.push(tape.value(l).item());
    }
    Ok(json!({
        "temperatures": temperatures,
        "losses": losses,
        "uniform": 2.0 * (batch as f64).ln(),
    })
    .to_string())
}

#[derive(Default)]
struct Curve {
    points: Vec<serde_json::Value>,
}

impl TrainObserver for Curve {
    fn log(&mut self, entry: &LogEntry) -> mdr_core::Result<()> {
        let loss: f64 = entry.losses.values().sum();
        let dev = entry.dev.as_ref();
        self.points.push(json!({
            "phase": entry.phase,
            "step": entry.step,
            "loss": loss,
            "dev_r1": dev.and_then(|d| d.multimodal.as_ref().or(d.text.as_ref()).or(d.image.as_ref())).map(|p| p.recall.r1),
            "dev_intent": dev.and_then(|d| d.intent_accuracy()),
        }));
        Ok(())
    }
}

fn small_corpus(noise: f64, ambiguity: f64, seed: u64) -> SyntheticGenConfig {
    SyntheticGenConfig {
        train_dialogues: 400,
        dev_dialogues: 120,
        test_dialogues: 120,
        vocab_size: 128,
        alignment_noise: noise,
        intent_ambiguity: ambiguity,
        ambiguity_train_only: true,
        seed,
        ..Default::default()
    }
}

pub fn run_training(regime: &str, ambiguity: f64, noise: f64, steps: u32, seed: u64) -> Result<String, String> {
    let regime: Regime = regime.parse().map_err(|e: mdr_core::Error| e.to_string())?;
    let gen = small_corpus(noise, ambiguity, seed);
    let splits = generate(&gen).map_err(|e| e.to_string())?;
    let model = ModelConfig {
        vocab_size: gen.vocab_size,
        ..Default::default()
    };
    let cfg = TrainConfig {
        batch_size: 32,
        seed,
        eval_every: 10,
        max_steps: Some(u64::from(steps.max(1))),
        ..Default::default()
    };
    let bundle = build_model(regime, &model, seed).map_err(|e| e.to_string())?;
    let mut curve = Curve::default();
    let out = train(bundle, &splits.train, &splits.dev, &cfg, &mut curve).map_err(|e| e.to_string())?;
    let pools = build_pools(&splits.test, seed).map_err(|e| e.to_string())?;
    let test = evaluate(&out.bundle, &splits.test, &pools, &EvalRequest::all(), 1).map_err(|e| e.to_string())?;
    Ok(json!({
        "regime": regime,
        "curve": curve.points,
        "test": test,
        "table": test.to_table(),
    })
    .to_string())
}

#[derive(Serialize)]
struct PreviewItem<'a> {
    id: &'a str,
    topic: Option<usize>,
    context: &'a [Vec<u32>],
    modality: mdr_core::data::Modality,
    text: Option<&'a [u32]>,
    image: Option<PreviewImage<'a>>,
}

#[derive(Serialize)]
struct PreviewImage<'a> {
    height: usize,
    width: usize,
    channels: usize,
    grid: &'a [f64],
    labels: &'a [u32],
}

pub fn preview(noise: f64, ambiguity: f64, seed: u64, count: usize) -> Result<String, String> {
    let mut gen = small_corpus(noise, ambiguity, seed);
    gen.train_dialogues = count.clamp(1, 32);
    let splits = generate(&gen).map_err(|e| e.to_string())?;
    let items: Vec<PreviewItem> = splits
        .train
        .examples
        .iter()
        .map(|e| PreviewItem {
            id: &e.id,
            topic: e.topic,
            context: &e.context,
            modality: e.gold_modality(),
            text: e.text_response(),
            image: match &e.response {
                Response::Image(img) => Some(PreviewImage {
                    height: img.height,
                    width: img.width,
                    channels: img.channels,
                    grid: &img.grid,
                    labels: &img.labels,
                }),
                Response::Text(_) => None,
            },
        })
        .collect();
    serde_json::to_string(&items).map_err(|e| e.to_string())
}
