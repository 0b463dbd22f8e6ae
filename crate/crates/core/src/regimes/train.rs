use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelBundle, Regime};
use crate::autodiff::{AdamState, Gradients, LrSchedule, Tape, Var};
use crate::data::{build_pools, prefix_augment, BatchStream, Dataset, JointMix, Modality, Objective, Response};
use crate::encoders::Mode;
use crate::error::{Error, Result};
use crate::eval::{evaluate, select_checkpoint_by, EvalReport, EvalRequest, Protocol, Selection};
use crate::objectives::{contrastive_loss, intent_loss, joint_loss, ContrastiveOptions};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochBudget {
    pub intent: usize,
    pub text: usize,
    pub image: usize,
    pub joint: usize,
}

impl Default for EpochBudget {
    fn default() -> Self {
        Self {
            intent: 10,
            text: 10,
            image: 20,
            joint: 20,
        }
    }
}

impl EpochBudget {
    pub fn for_objective(&self, objective: Objective) -> usize {
        match objective {
            Objective::Intent => self.intent,
            Objective::Text => self.text,
            Objective::Image => self.image,
            Objective::Joint => self.joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: EpochBudget,
    pub base_lr: f64,
    pub decay_fraction: f64,
    pub decay_interval: u64,
    pub seed: u64,
    /// Dev evaluation period in optimizer steps; the last step is always
    /// evaluated.
    pub eval_every: u64,
    pub joint_mix: JointMix,
    /// Exclude in-batch pairs sharing the same gold response from the
    /// contrastive denominators.
    pub mask_duplicates: bool,
    pub augment_prefixes: bool,
    /// Hard cap on optimizer steps per phase.
    pub max_steps: Option<u64>,
    pub pool_seed: u64,
    pub eval_threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: EpochBudget::default(),
            base_lr: 1e-3,
            decay_fraction: 0.001,
            decay_interval: 1000,
            seed: 0,
            eval_every: 100,
            joint_mix: JointMix::Proportional,
            mask_duplicates: false,
            augment_prefixes: true,
            max_steps: None,
            pool_seed: 0,
            eval_threads: 1,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for large pretrained encoders.
    pub fn pretrained_scale() -> Self {
        Self {
            base_lr: 5e-5,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            decay_fraction: self.decay_fraction,
            decay_interval: self.decay_interval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        let e = self.epochs;
        if self.batch_size == 0 || self.eval_every == 0 || [e.intent, e.text, e.image, e.joint].contains(&0) {
            return Err(Error::Config(
                "batch_size, eval_every and every epoch budget must be positive".into(),
            ));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Unit of training with its own optimizer and checkpoint selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Intent,
    Text,
    Image,
    /// The single optimization problem of SDR and MDR.
    Combined,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Intent => "intent",
            Phase::Text => "text",
            Phase::Image => "image",
            Phase::Combined => "combined",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Phase::Intent => 1,
            Phase::Text => 2,
            Phase::Image => 3,
            Phase::Combined => 4,
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub phase: Phase,
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrailEntry {
    pub phase: Phase,
    pub step: u64,
    pub report: EvalReport,
}

/// Snapshot handed to observers after each dev evaluation.
pub struct CheckpointEvent<'a> {
    pub phase: Phase,
    pub step: u64,
    pub bundle: &'a ModelBundle,
    pub optimizer: &'a AdamState,
    pub report: &'a EvalReport,
    /// This evaluation is the phase's best so far.
    pub best: bool,
}

pub trait TrainObserver {
    fn log(&mut self, _entry: &LogEntry) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _event: CheckpointEvent<'_>) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct PhaseResult {
    pub phase: Phase,
    pub steps: u64,
    pub best_step: u64,
    pub best_report: EvalReport,
    pub optimizer: AdamState,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-dev parameters (per phase for DR, then composed).
    pub bundle: ModelBundle,
    pub trail: Vec<TrailEntry>,
    pub phases: Vec<PhaseResult>,
    /// Dev report of the returned bundle.
    pub dev_report: EvalReport,
}

/// Mixes a tag into a base seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn response_key(response: &Response) -> u64 {
    let mut h = DefaultHasher::new();
    match response {
        Response::Text(t) => (0u8, t).hash(&mut h),
        Response::Image(img) => (1u8, &img.id).hash(&mut h),
    }
    h.finish()
}

/// Loss of one batch for one objective, built on `tape`.
///
/// Joint batches are reordered text-first so response rows can be encoded per
/// modality and stacked.
pub fn objective_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    data: &Dataset,
    objective: Objective,
    batch: &[usize],
    mask_duplicates: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let store = &bundle.store;
    let cfg = bundle.config.encoder;
    let examples: Vec<_> = batch.iter().map(|&i| &data.examples[i]).collect();
    let mut options = ContrastiveOptions::with_temperature(bundle.config.temperature);
    match objective {
        Objective::Intent => {
            let path = bundle.intent_path()?;
            let contexts: Vec<&[Vec<u32>]> = examples.iter().map(|e| e.context.as_slice()).collect();
            let embs = path
                .context
                .encode_contexts(tape, store, &contexts, &cfg, &mut Mode::Train(rng))?;
            let labels: Vec<bool> = examples.iter().map(|e| e.gold_modality() == Modality::Image).collect();
            intent_loss(tape, store, &path.head, embs, &labels)
        }
        Objective::Text | Objective::Image | Objective::Joint => {
            let mut ordered = examples.clone();
            if objective == Objective::Joint {
                ordered.sort_by_key(|e| e.gold_modality());
            } else if let Some(e) = ordered.iter().find(|e| e.gold_modality() != modality_of(objective)) {
                return Err(Error::Data(format!("{} is not a {objective} example", e.id)));
            }
            let encoder = match objective {
                Objective::Image => &bundle.image_context,
                _ => &bundle.text_context,
            };
            let contexts: Vec<&[Vec<u32>]> = ordered.iter().map(|e| e.context.as_slice()).collect();
            let c = encoder.encode_contexts(tape, store, &contexts, &cfg, &mut Mode::Train(rng))?;
            let texts: Vec<&[u32]> = ordered.iter().filter_map(|e| e.text_response()).collect();
            let images: Vec<_> = ordered.iter().filter_map(|e| e.image_response()).collect();
            let text_rows = (!texts.is_empty())
                .then(|| {
                    bundle
                        .text_context
                        .encode_text_responses(tape, store, &texts, &cfg, &mut Mode::Train(rng))
                })
                .transpose()?;
            let image_rows = (!images.is_empty())
                .then(|| bundle.image_encoder.encode(tape, store, &images, &cfg, &mut Mode::Train(rng)))
                .transpose()?;
            let r = match (text_rows, image_rows) {
                (Some(t), Some(i)) => tape.concat_rows(t, i)?,
                (Some(t), None) => t,
                (None, Some(i)) => i,
                (None, None) => return Err(Error::Data("empty batch".into())),
            };
            if mask_duplicates {
                options.duplicate_keys = Some(ordered.iter().map(|e| response_key(&e.response)).collect());
            }
            if objective == Objective::Joint {
                joint_loss(tape, c, r, &options)
            } else {
                contrastive_loss(tape, c, r, &options)
            }
        }
    }
}

fn modality_of(objective: Objective) -> Modality {
    match objective {
        Objective::Image => Modality::Image,
        _ => Modality::Text,
    }
}

struct PhasePlan {
    phase: Phase,
    objectives: Vec<Objective>,
    params: Vec<ParamId>,
    selection: Selection,
    request: EvalRequest,
}

fn plans(bundle: &ModelBundle) -> Result<Vec<PhasePlan>> {
    Ok(match bundle.regime {
        Regime::Dr => vec![
            PhasePlan {
                phase: Phase::Intent,
                objectives: vec![Objective::Intent],
                params: bundle.intent_params()?,
                selection: Selection::IntentAccuracy,
                request: EvalRequest::intent_only(),
            },
            PhasePlan {
                phase: Phase::Text,
                objectives: vec![Objective::Text],
                params: bundle.text_retrieval_params(),
                selection: Selection::Protocol(Protocol::Text),
                request: EvalRequest::only(&[Protocol::Text]),
            },
            PhasePlan {
                phase: Phase::Image,
                objectives: vec![Objective::Image],
                params: bundle.image_retrieval_params(),
                selection: Selection::Protocol(Protocol::Image),
                request: EvalRequest::only(&[Protocol::Image]),
            },
        ],
        Regime::Sdr => vec![PhasePlan {
            phase: Phase::Combined,
            objectives: vec![Objective::Intent, Objective::Image, Objective::Text],
            params: bundle.store.ids().collect(),
            selection: Selection::Protocol(Protocol::Multimodal),
            request: EvalRequest::all(),
        }],
        Regime::Mdr => vec![PhasePlan {
            phase: Phase::Combined,
            objectives: vec![Objective::Joint],
            params: bundle.store.ids().collect(),
            selection: Selection::Protocol(Protocol::Multimodal),
            request: EvalRequest::all(),
        }],
    })
}

/// Trains `bundle` on `train` with dev-based checkpoint selection.
pub fn train(
    mut bundle: ModelBundle,
    train: &Dataset,
    dev: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    for m in [Modality::Text, Modality::Image] {
        if train.count(m) == 0 {
            return Err(Error::Data(format!("training split has no {m} examples")));
        }
    }
    let augmented;
    let train = if config.augment_prefixes {
        augmented = prefix_augment(train);
        &augmented
    } else {
        train
    };
    let dev_pools = build_pools(dev, config.pool_seed)?;
    let mut trail = Vec::new();
    let mut phases = Vec::new();
    for plan in plans(&bundle)? {
        let result = run_phase(&mut bundle, &plan, train, dev, &dev_pools, config, observer, &mut trail)?;
        phases.push(result);
    }
    let dev_report = if bundle.regime == Regime::Dr {
        evaluate(&bundle, dev, &dev_pools, &EvalRequest::all(), config.eval_threads)?
    } else {
        phases[0].best_report.clone()
    };
    Ok(TrainOutcome {
        bundle,
        trail,
        phases,
        dev_report,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    bundle: &mut ModelBundle,
    plan: &PhasePlan,
    train: &Dataset,
    dev: &Dataset,
    dev_pools: &crate::data::CandidatePools,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
    trail: &mut Vec<TrailEntry>,
) -> Result<PhaseResult> {
    let base = derive_seed(config.seed, plan.phase.tag());
    let mut streams = plan
        .objectives
        .iter()
        .enumerate()
        .map(|(k, &o)| BatchStream::new(train, o, config.batch_size, derive_seed(base, 10 + k as u64), config.joint_mix))
        .collect::<Result<Vec<_>>>()?;
    let mut total: u64 = plan
        .objectives
        .iter()
        .zip(&streams)
        .map(|(&o, s)| (config.epochs.for_objective(o) * s.batches_per_epoch()) as u64)
        .max()
        .unwrap_or(0);
    if let Some(cap) = config.max_steps {
        total = total.min(cap);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, 1));
    let schedule = config.schedule();
    let mut adam = AdamState::default();
    let mut best: Option<(u64, EvalReport, ParamStore, AdamState)> = None;

    for step in 1..=total {
        let mut tape = Tape::new();
        let mut losses = BTreeMap::new();
        let mut sum: Option<Var> = None;
        let mut epoch = 0;
        for (k, (&objective, stream)) in plan.objectives.iter().zip(streams.iter_mut()).enumerate() {
            let (e, batch) = stream.next_batch();
            if k == 0 {
                epoch = e;
            }
            let l = objective_loss(&mut tape, bundle, train, objective, &batch, config.mask_duplicates, &mut rng)?;
            losses.insert(objective.to_string(), tape.value(l).item());
            sum = Some(match sum {
                None => l,
                Some(s) => tape.add(s, l)?,
            });
        }
        let loss = sum.expect("at least one objective");
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical {
                phase: plan.phase.to_string(),
                step: step as usize,
                detail: format!("loss is {value} ({losses:?})"),
            });
        }
        let mut grads = Gradients::default();
        tape.backward_into(loss, &mut grads)?;
        let lr = schedule.lr_at_step(adam.step);
        adam.step(&mut bundle.store, &grads.param_grads(), lr)?;

        let mut entry = LogEntry {
            phase: plan.phase,
            step,
            epoch,
            lr,
            losses,
            dev: None,
        };
        if step % config.eval_every == 0 || step == total {
            let report = evaluate(bundle, dev, dev_pools, &plan.request, config.eval_threads)?;
            let improved = match &best {
                None => true,
                Some((s, r, _, _)) => select_checkpoint_by(&[(*s, r), (step, &report)], plan.selection)? == 1,
            };
            if improved {
                best = Some((step, report.clone(), bundle.store.clone(), adam.clone()));
            }
            trail.push(TrailEntry {
                phase: plan.phase,
                step,
                report: report.clone(),
            });
            observer.checkpoint(CheckpointEvent {
                phase: plan.phase,
                step,
                bundle,
                optimizer: &adam,
                report: &report,
                best: improved,
            })?;
            entry.dev = Some(report);
        }
        observer.log(&entry)?;
    }
    let (best_step, best_report, store, optimizer) =
        best.ok_or_else(|| Error::Data(format!("{} phase ran no steps", plan.phase)))?;
    bundle.store.copy_from(&store, &plan.params)?;
    Ok(PhaseResult {
        phase: plan.phase,
        steps: total,
        best_step,
        best_report,
        optimizer,
    })
}
