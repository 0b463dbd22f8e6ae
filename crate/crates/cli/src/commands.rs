use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mdr_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use mdr_core::data::{build_pools_with, generate, CandidatePools, PoolOptions, load_jsonl, save_jsonl, Dataset, Modality, SyntheticGenConfig};
use mdr_core::encoders::ImageGeometry;
use mdr_core::eval::{evaluate, EvalReport, EvalRequest, Protocol};
use mdr_core::regimes::{
    build_model, count_parameters, infer, CheckpointEvent, LogEntry, ModelConfig, ParamCounts, Phase, Regime,
    SizePreset, TrainObserver,
};
use mdr_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{EvalArgs, GenDataArgs, ReportArgs, RetrieveArgs, TrainArgs};

/// Malformed command-line input that clap cannot catch.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn pools(split: &Dataset, seed: u64, shared: bool) -> mdr_core::Result<CandidatePools> {
    build_pools_with(
        split,
        seed,
        PoolOptions {
            shared,
            ..PoolOptions::default()
        },
    )
}

const SPLITS: [&str; 3] = ["train", "dev", "test"];
const DATA_MANIFEST: &str = "manifest.json";

fn threads() -> anyhow::Result<usize> {
    match std::env::var("MDR_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(UsageError(format!("MDR_THREADS={v:?} is not a positive integer")).into()),
        },
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitCounts {
    examples: usize,
    text: usize,
    image: usize,
    image_ratio: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DataManifest {
    config: SyntheticGenConfig,
    config_sha256: String,
    splits: BTreeMap<String, SplitCounts>,
}

pub fn gen_data(args: &GenDataArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?.data;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.dialogues {
        cfg.train_dialogues = n;
    }
    if let Some(n) = args.dev_dialogues {
        cfg.dev_dialogues = n;
    }
    if let Some(n) = args.test_dialogues {
        cfg.test_dialogues = n;
    }
    if let Some(x) = args.noise {
        cfg.alignment_noise = x;
    }
    if let Some(x) = args.ambiguity {
        cfg.intent_ambiguity = x;
    }
    let splits = generate(&cfg)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut counts = BTreeMap::new();
    for name in SPLITS {
        let ds = splits.by_name(name).expect("known split");
        save_jsonl(ds, args.out.join(format!("{name}.jsonl")))?;
        let image = ds.count(Modality::Image);
        counts.insert(
            name.to_string(),
            SplitCounts {
                examples: ds.len(),
                text: ds.count(Modality::Text),
                image,
                image_ratio: image as f64 / ds.len() as f64,
            },
        );
    }
    let manifest = DataManifest {
        config_sha256: sha256_hex(&serde_json::to_vec(&cfg)?),
        config: cfg,
        splits: counts,
    };
    write_json(&args.out.join(DATA_MANIFEST), &manifest)
}

fn load_split(data: &Path, name: &str) -> anyhow::Result<Dataset> {
    if !SPLITS.contains(&name) {
        return Err(UsageError(format!("unknown split {name:?} (expected train, dev or test)")).into());
    }
    Ok(load_jsonl(data.join(format!("{name}.jsonl")))?)
}

/// Vocabulary and image geometry from the data manifest, or inferred from
/// the splits when the manifest is absent.
fn data_shape(data: &Path, splits: &[&Dataset]) -> anyhow::Result<(usize, ImageGeometry)> {
    let manifest_path = data.join(DATA_MANIFEST);
    if manifest_path.exists() {
        let m: DataManifest = serde_json::from_slice(&fs::read(&manifest_path)?)
            .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
        let geometry = ImageGeometry {
            height: m.config.image_height,
            width: m.config.image_width,
            channels: m.config.image_channels,
            ..ImageGeometry::default()
        };
        return Ok((m.config.vocab_size, geometry));
    }
    let vocab = splits.iter().filter_map(|d| d.max_token()).max().unwrap_or(0) as usize + 1;
    let image = splits
        .iter()
        .flat_map(|d| d.examples.iter())
        .find_map(|e| e.image_response())
        .ok_or_else(|| Error::Data("no image responses to infer geometry from".into()))?;
    let geometry = ImageGeometry {
        height: image.height,
        width: image.width,
        channels: image.channels,
        ..ImageGeometry::default()
    };
    Ok((vocab, geometry))
}

struct RunObserver {
    out: PathBuf,
    regime: Regime,
    seed: u64,
    metrics: BufWriter<File>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl TrainObserver for RunObserver {
    fn log(&mut self, entry: &LogEntry) -> mdr_core::Result<()> {
        let path = self.out.join("metrics.jsonl");
        serde_json::to_writer(&mut self.metrics, entry)?;
        self.metrics.write_all(b"\n").map_err(|e| io_err(&path, e))?;
        self.metrics.flush().map_err(|e| io_err(&path, e))
    }

    fn checkpoint(&mut self, event: CheckpointEvent<'_>) -> mdr_core::Result<()> {
        let meta = CheckpointMeta {
            seed: self.seed,
            step: event.step,
            phase: Some(event.phase),
            dev_report: Some(event.report.clone()),
        };
        let opt = [(event.phase, event.optimizer)];
        save_checkpoint(self.out.join("last.ckpt"), event.bundle, &meta, &opt)?;
        if event.best && self.regime == Regime::Dr {
            save_checkpoint(self.out.join(format!("{}.ckpt", event.phase)), event.bundle, &meta, &opt)?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct ResolvedRun<'a> {
    regime: Regime,
    data: &'a Path,
    vocab_size: usize,
    geometry: ImageGeometry,
    #[serde(flatten)]
    config: &'a RunConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct PhaseSummary {
    phase: Phase,
    steps: u64,
    best_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Summary {
    regime: Regime,
    preset: SizePreset,
    seed: u64,
    params: ParamCounts,
    phases: Vec<PhaseSummary>,
    dev: EvalReport,
    test: EvalReport,
}

#[derive(Debug, Serialize)]
struct Composition {
    components: Vec<CompositionEntry>,
}

#[derive(Debug, Serialize)]
struct CompositionEntry {
    phase: Phase,
    checkpoint: String,
    best_step: u64,
    params: Vec<String>,
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut run = RunConfig::load(args.config.as_deref())?;
    if let Some(s) = args.seed {
        run.train.seed = s;
    }
    if let Some(p) = args.preset {
        run.model.preset = p;
    }
    if args.max_steps.is_some() {
        run.train.max_steps = args.max_steps;
    }
    if let Some(n) = args.eval_every {
        run.train.eval_every = n;
    }
    if let Some(lr) = args.lr {
        run.train.base_lr = lr;
    }
    run.train.pool_seed = run.eval.pool_seed;
    run.train.eval_threads = threads()?;
    run.train.validate()?;

    let train_set = load_split(&args.data, "train")?;
    let dev = load_split(&args.data, "dev")?;
    let test = load_split(&args.data, "test")?;
    let (vocab_size, geometry) = data_shape(&args.data, &[&train_set, &dev, &test])?;
    let model_cfg = ModelConfig {
        preset: run.model.preset,
        vocab_size,
        geometry,
        encoder: run.model.encoder,
        temperature: run.model.temperature,
    };
    let seed = run.train.seed;
    let bundle = build_model(args.regime, &model_cfg, seed)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_json(
        &args.out.join("config.json"),
        &ResolvedRun {
            regime: args.regime,
            data: &args.data,
            vocab_size,
            geometry,
            config: &run,
        },
    )?;
    let metrics_path = args.out.join("metrics.jsonl");
    let metrics = File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut observer = RunObserver {
        out: args.out.clone(),
        regime: args.regime,
        seed,
        metrics: BufWriter::new(metrics),
    };
    let outcome = match mdr_core::regimes::train(bundle, &train_set, &dev, &run.train, &mut observer) {
        Ok(o) => o,
        Err(e) => {
            if let Error::Numerical { phase, step, detail } = &e {
                let last = args.out.join("last.ckpt");
                let diag = serde_json::json!({
                    "error": "numerical",
                    "phase": phase,
                    "step": step,
                    "detail": detail,
                    "last_checkpoint": last.exists().then(|| last.display().to_string()),
                });
                write_json(&args.out.join("diagnostics.json"), &diag)?;
            }
            return Err(e.into());
        }
    };

    let optimizers: Vec<(Phase, &_)> = outcome.phases.iter().map(|p| (p.phase, &p.optimizer)).collect();
    let meta = CheckpointMeta {
        seed,
        step: outcome.phases.iter().map(|p| p.best_step).max().unwrap_or(0),
        phase: None,
        dev_report: Some(outcome.dev_report.clone()),
    };
    save_checkpoint(args.out.join("best.ckpt"), &outcome.bundle, &meta, &optimizers)?;
    if args.regime == Regime::Dr {
        let components = outcome
            .phases
            .iter()
            .map(|p| {
                let ids = match p.phase {
                    Phase::Intent => outcome.bundle.intent_params()?,
                    Phase::Text => outcome.bundle.text_retrieval_params(),
                    _ => outcome.bundle.image_retrieval_params(),
                };
                Ok(CompositionEntry {
                    phase: p.phase,
                    checkpoint: format!("{}.ckpt", p.phase),
                    best_step: p.best_step,
                    params: ids.iter().map(|&id| outcome.bundle.store.name(id).to_string()).collect(),
                })
            })
            .collect::<mdr_core::Result<Vec<_>>>()?;
        write_json(&args.out.join("composition.json"), &Composition { components })?;
    }

    let pools = pools(&test, run.eval.pool_seed, run.eval.shared_pool)?;
    let test_report = evaluate(&outcome.bundle, &test, &pools, &EvalRequest::all(), run.train.eval_threads)?;
    let summary = Summary {
        regime: args.regime,
        preset: run.model.preset,
        seed,
        params: count_parameters(&outcome.bundle),
        phases: outcome
            .phases
            .iter()
            .map(|p| PhaseSummary {
                phase: p.phase,
                steps: p.steps,
                best_step: p.best_step,
            })
            .collect(),
        dev: outcome.dev_report,
        test: test_report,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    println!("{} test", args.regime);
    print!("{}", summary.test.to_table());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let run = RunConfig::load(args.config.as_deref())?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let split = load_split(&args.data, &args.split)?;
    let pools = pools(
        &split,
        args.pool_seed.unwrap_or(run.eval.pool_seed),
        args.shared_pool || run.eval.shared_pool,
    )?;
    let protocols = args.protocols.clone().unwrap_or(run.eval.protocols);
    if protocols.is_empty() {
        bail!(UsageError("no protocols requested".into()));
    }
    let report = evaluate(&ckpt.bundle, &split, &pools, &EvalRequest::only(&protocols), threads()?)?;
    println!("{}", serde_json::to_string(&report)?);
    print!("{}", report.to_table());
    Ok(())
}

fn parse_context(text: &str) -> anyhow::Result<Vec<Vec<u32>>> {
    let mut utterances = Vec::new();
    for utt in text.split('/') {
        let tokens = utt
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<u32>().map_err(|_| UsageError(format!("bad token id {t:?} in context"))))
            .collect::<Result<Vec<_>, _>>()?;
        if !tokens.is_empty() {
            utterances.push(tokens);
        }
    }
    if utterances.is_empty() {
        bail!(UsageError("context is empty".into()));
    }
    Ok(utterances)
}

#[derive(Debug, Serialize)]
struct Retrieved {
    id: String,
    modality: Modality,
    score: f64,
}

pub fn retrieve(args: &RetrieveArgs) -> anyhow::Result<()> {
    if args.k == 0 {
        bail!(UsageError("-k must be at least 1".into()));
    }
    let context = parse_context(&args.context)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let split = load_split(&args.data, &args.pool_from)?;
    let text_pool: Vec<(usize, &[u32])> = split
        .examples
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.text_response().map(|t| (i, t)))
        .collect();
    let image_pool: Vec<_> = split
        .examples
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.image_response().map(|img| (i, img)))
        .collect();
    let ranking = infer(&ckpt.bundle, &context, &text_pool, &image_pool)?;
    let results: Vec<Retrieved> = ranking
        .ranked
        .iter()
        .take(args.k)
        .map(|c| {
            let ex = &split.examples[c.id.index];
            Retrieved {
                id: ex.image_response().map_or_else(|| ex.id.clone(), |img| img.id.clone()),
                modality: c.id.modality,
                score: c.score,
            }
        })
        .collect();
    let out = serde_json::json!({
        "regime": ckpt.bundle.regime,
        "intent_logit": ranking.intent_logit,
        "selected": ranking.selected,
        "results": results,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportRow<'a> {
    run: &'a str,
    regime: Regime,
    preset: SizePreset,
    protocol: Protocol,
    r1: f64,
    r5: f64,
    r10: f64,
    param_total: usize,
}

pub fn report(args: &ReportArgs) -> anyhow::Result<()> {
    let paths: Vec<PathBuf> = args.runs.iter().map(|r| r.join("summary.json")).collect();
    let missing: Vec<String> = paths.iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing run summaries: {}", missing.join(", "))).into());
    }
    let mut writer = csv::Writer::from_path(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (dir, path) in args.runs.iter().zip(&paths) {
        let summary: Summary = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let name = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        for protocol in Protocol::ALL {
            if let Some(r) = summary.test.protocol(protocol) {
                writer.serialize(ReportRow {
                    run: &name,
                    regime: summary.regime,
                    preset: summary.preset,
                    protocol,
                    r1: r.recall.r1,
                    r5: r.recall.r5,
                    r10: r.recall.r10,
                    param_total: summary.params.total,
                })?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}
