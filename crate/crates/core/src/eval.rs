//! Recall@k over fixed candidate pools, the three evaluation protocols, and
//! dev-checkpoint selection.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{CandidatePools, Dataset, Modality};
use crate::encoders::{embed_contexts, predicts_image};
use crate::error::{Error, Result};
use crate::regimes::{image_id, rank_candidates, ranking_order, text_id, CandidateId, ModelBundle, ScoredCandidate};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Examples embedded per tape during evaluation.
const EMBED_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Text-gold examples ranked in their text pool, intent bypassed.
    Text,
    /// Image-gold examples ranked in their image pool, intent bypassed.
    Image,
    /// All examples through the regime's own inference rule.
    Multimodal,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Text, Protocol::Image, Protocol::Multimodal];
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" => Ok(Protocol::Text),
            "image" => Ok(Protocol::Image),
            "multimodal" => Ok(Protocol::Multimodal),
            other => Err(Error::Config(format!(
                "unknown protocol {other:?} (expected text, image or multimodal)"
            ))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Text => "text",
            Protocol::Image => "image",
            Protocol::Multimodal => "multimodal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl RecallAtK {
    pub fn as_array(&self) -> [f64; 3] {
        [self.r1, self.r5, self.r10]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub count: usize,
    /// Hits at k = 1, 5, 10.
    pub hits: [usize; 3],
    pub recall: RecallAtK,
}

impl ProtocolReport {
    fn from_ranks(ranks: impl Iterator<Item = Option<usize>>) -> Self {
        let mut count = 0;
        let mut hits = [0usize; 3];
        for rank in ranks {
            count += 1;
            for (h, &k) in hits.iter_mut().zip(&RECALL_KS) {
                *h += usize::from(rank.is_some_and(|r| r <= k));
            }
        }
        let frac = |h: usize| if count == 0 { 0.0 } else { h as f64 / count as f64 };
        ProtocolReport {
            count,
            hits,
            recall: RecallAtK {
                r1: frac(hits[0]),
                r5: frac(hits[1]),
                r10: frac(hits[2]),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentReport {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<ProtocolReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ProtocolReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multimodal: Option<ProtocolReport>,
    /// Absent for bundles without an intent head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<IntentReport>,
    /// Multimodal examples whose gold was unreachable after a wrong intent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cascade_misses: Option<usize>,
}

impl EvalReport {
    pub fn protocol(&self, protocol: Protocol) -> Option<&ProtocolReport> {
        match protocol {
            Protocol::Text => self.text.as_ref(),
            Protocol::Image => self.image.as_ref(),
            Protocol::Multimodal => self.multimodal.as_ref(),
        }
    }

    pub fn intent_accuracy(&self) -> Option<f64> {
        self.intent.as_ref().map(|i| i.accuracy)
    }

    /// Gated multimodal hits can never exceed correct intent predictions.
    pub fn check_cascade_bound(&self) -> Result<()> {
        if let (Some(mm), Some(intent)) = (&self.multimodal, &self.intent) {
            if let Some(k) = mm.hits.iter().position(|&h| h > intent.correct) {
                return Err(Error::Structural(format!(
                    "multimodal hits@{} = {} exceed correct intents {}",
                    RECALL_KS[k], mm.hits[k], intent.correct
                )));
            }
        }
        Ok(())
    }

    /// Aligned table: one column group per protocol, R@1/5/10 within each.
    pub fn to_table(&self) -> String {
        let groups: Vec<(&str, Option<&ProtocolReport>)> = vec![
            ("Text", self.text.as_ref()),
            ("Image", self.image.as_ref()),
            ("Multimodal", self.multimodal.as_ref()),
        ];
        let present: Vec<_> = groups.into_iter().filter_map(|(n, r)| r.map(|r| (n, r))).collect();
        let mut out = String::new();
        let mut head = String::new();
        let mut sub = String::new();
        let mut vals = String::new();
        for (name, report) in &present {
            let _ = write!(head, "| {name:^20} ");
            let _ = write!(sub, "| {:>6} {:>6} {:>6} ", "R@1", "R@5", "R@10");
            let r = report.recall;
            let _ = write!(vals, "| {:>6.3} {:>6.3} {:>6.3} ", r.r1, r.r5, r.r10);
        }
        for line in [head, sub, vals] {
            out.push_str(&line);
            out.push_str("|\n");
        }
        if let Some(intent) = &self.intent {
            let _ = writeln!(out, "intent accuracy {:.3} ({} / {})", intent.accuracy, intent.correct, intent.count);
        }
        if let Some(m) = self.cascade_misses {
            let _ = writeln!(out, "cascade misses {m}");
        }
        out
    }
}

/// 1 iff `gold` is among the first `k` entries.
pub fn recall_at_k(ranked: &[CandidateId], gold: CandidateId, k: usize) -> u8 {
    u8::from(ranked.iter().take(k).any(|&c| c == gold))
}

/// 1-based position of `gold`, `None` when absent.
pub fn rank_of(ranked: &[ScoredCandidate], gold: CandidateId) -> Option<usize> {
    ranked.iter().position(|c| c.id == gold).map(|p| p + 1)
}

/// Which protocols and intent statistics to compute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRequest {
    pub protocols: Vec<Protocol>,
    /// Report intent accuracy even when the multimodal protocol is off.
    pub intent: bool,
}

impl EvalRequest {
    pub fn all() -> Self {
        Self {
            protocols: Protocol::ALL.to_vec(),
            intent: true,
        }
    }

    pub fn only(protocols: &[Protocol]) -> Self {
        Self {
            protocols: protocols.to_vec(),
            intent: protocols.contains(&Protocol::Multimodal),
        }
    }

    pub fn intent_only() -> Self {
        Self {
            protocols: Vec::new(),
            intent: true,
        }
    }

    fn wants(&self, p: Protocol) -> bool {
        self.protocols.contains(&p)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Outcome {
    text_rank: Option<Option<usize>>,
    image_rank: Option<Option<usize>>,
    multimodal_rank: Option<Option<usize>>,
    intent_correct: Option<bool>,
}

/// Evaluate `bundle` on `split` against precomputed `pools`.
///
/// Per-example work is spread over `threads` workers; results are reduced in
/// example order so the report does not depend on the thread count.
pub fn evaluate(
    bundle: &ModelBundle,
    split: &Dataset,
    pools: &CandidatePools,
    request: &EvalRequest,
    threads: usize,
) -> Result<EvalReport> {
    if pools.len() != split.len() {
        return Err(Error::Data(format!(
            "pools cover {} examples, split has {}",
            pools.len(),
            split.len()
        )));
    }
    let need_text = request.wants(Protocol::Text) || request.wants(Protocol::Multimodal);
    let need_image = request.wants(Protocol::Image) || request.wants(Protocol::Multimodal);
    let gated = bundle.regime.is_gated();
    let need_intent = gated && (request.intent || request.wants(Protocol::Multimodal));

    let text_idx: Vec<usize> = if need_text { split.indices_of(Modality::Text) } else { Vec::new() };
    let image_idx: Vec<usize> = if need_image { split.indices_of(Modality::Image) } else { Vec::new() };
    let threads = threads.max(1);

    let text_embs = parallel_chunks(&text_idx, threads, |chunk| {
        let resp: Vec<&[u32]> = chunk
            .iter()
            .map(|&i| split.examples[i].text_response().expect("text-gold"))
            .collect();
        bundle.embed_text_responses(&resp)
    })?;
    let image_embs = parallel_chunks(&image_idx, threads, |chunk| {
        let imgs: Vec<_> = chunk
            .iter()
            .map(|&i| split.examples[i].image_response().expect("image-gold"))
            .collect();
        bundle.embed_images(&imgs)
    })?;
    let mut text_slot = vec![usize::MAX; split.len()];
    text_idx.iter().enumerate().for_each(|(s, &i)| text_slot[i] = s);
    let mut image_slot = vec![usize::MAX; split.len()];
    image_idx.iter().enumerate().for_each(|(s, &i)| image_slot[i] = s);

    let all: Vec<usize> = (0..split.len()).collect();
    let shared_context = bundle.text_context == bundle.image_context;
    let outcomes = parallel_chunks(&all, threads, |chunk| {
        let contexts: Vec<&[Vec<u32>]> = chunk.iter().map(|&i| split.examples[i].context.as_slice()).collect();
        let cfg = bundle.encoder_config();
        let text_q = if need_text {
            embed_contexts(&bundle.text_context, &bundle.store, &contexts, cfg)?
        } else {
            Vec::new()
        };
        let image_q = if !need_image {
            Vec::new()
        } else if shared_context && need_text {
            text_q.clone()
        } else {
            embed_contexts(&bundle.image_context, &bundle.store, &contexts, cfg)?
        };
        let logits: Vec<f64> = if need_intent {
            let path = bundle.intent_path()?;
            let q = if path.context == bundle.text_context && need_text {
                text_q.clone()
            } else {
                embed_contexts(&path.context, &bundle.store, &contexts, cfg)?
            };
            q.iter().map(|e| path.head.logit(&bundle.store, e)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let mut out = Vec::with_capacity(chunk.len());
        for (j, &i) in chunk.iter().enumerate() {
            let gold_modality = split.examples[i].gold_modality();
            let gold = match gold_modality {
                Modality::Text => text_id(i),
                Modality::Image => image_id(i),
            };
            let rank_text = || {
                rank_candidates(
                    &text_q[j],
                    pools.text[i].iter().map(|&c| (text_id(c), text_embs[text_slot[c]].as_slice())),
                )
            };
            let rank_image = || {
                rank_candidates(
                    &image_q[j],
                    pools.image[i].iter().map(|&c| (image_id(c), image_embs[image_slot[c]].as_slice())),
                )
            };
            let mut o = Outcome::default();
            if request.wants(Protocol::Text) && gold_modality == Modality::Text {
                o.text_rank = Some(rank_of(&rank_text(), gold));
            }
            if request.wants(Protocol::Image) && gold_modality == Modality::Image {
                o.image_rank = Some(rank_of(&rank_image(), gold));
            }
            let predicted = need_intent.then(|| {
                if predicts_image(logits[j]) {
                    Modality::Image
                } else {
                    Modality::Text
                }
            });
            o.intent_correct = predicted.map(|p| p == gold_modality);
            if request.wants(Protocol::Multimodal) {
                let ranked = match predicted {
                    Some(Modality::Text) => rank_text(),
                    Some(Modality::Image) => rank_image(),
                    None => {
                        let mut joint = rank_text();
                        joint.extend(rank_image());
                        joint.sort_by(ranking_order);
                        joint
                    }
                };
                o.multimodal_rank = Some(rank_of(&ranked, gold));
            }
            out.push(o);
        }
        Ok(out)
    })?;

    let report_for = |pick: fn(&Outcome) -> Option<Option<usize>>, p: Protocol| {
        request
            .wants(p)
            .then(|| ProtocolReport::from_ranks(outcomes.iter().filter_map(pick)))
    };
    let intent = need_intent.then(|| {
        let correct = outcomes.iter().filter(|o| o.intent_correct == Some(true)).count();
        IntentReport {
            count: outcomes.len(),
            correct,
            accuracy: if outcomes.is_empty() { 0.0 } else { correct as f64 / outcomes.len() as f64 },
        }
    });
    let cascade_misses = (gated && request.wants(Protocol::Multimodal))
        .then(|| outcomes.iter().filter(|o| o.intent_correct == Some(false)).count());
    let report = EvalReport {
        text: report_for(|o| o.text_rank, Protocol::Text),
        image: report_for(|o| o.image_rank, Protocol::Image),
        multimodal: report_for(|o| o.multimodal_rank, Protocol::Multimodal),
        intent,
        cascade_misses,
    };
    report.check_cascade_bound()?;
    Ok(report)
}

/// Applies `f` to fixed-size chunks of `items`, concatenating results in
/// chunk order. Chunks are dealt round-robin to `threads` scoped workers.
fn parallel_chunks<T, F>(items: &[usize], threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&[usize]) -> Result<Vec<T>> + Sync,
{
    let chunks: Vec<&[usize]> = items.chunks(EMBED_CHUNK).collect();
    if threads <= 1 || chunks.len() <= 1 {
        let mut out = Vec::with_capacity(items.len());
        for c in chunks {
            out.extend(f(c)?);
        }
        return Ok(out);
    }
    let workers = threads.min(chunks.len());
    let mut per_chunk: Vec<Option<Result<Vec<T>>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let chunks = &chunks;
                let f = &f;
                s.spawn(move || {
                    (w..chunks.len())
                        .step_by(workers)
                        .map(|ci| (ci, f(chunks[ci])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (ci, r) in h.join().expect("evaluation worker panicked") {
                per_chunk[ci] = Some(r);
            }
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for r in per_chunk {
        out.extend(r.expect("every chunk evaluated")?);
    }
    Ok(out)
}

/// Metric a checkpoint trail is ranked by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Protocol(Protocol),
    IntentAccuracy,
}

impl Selection {
    fn key(self, report: &EvalReport) -> [f64; 3] {
        match self {
            Selection::Protocol(p) => report
                .protocol(p)
                .map_or([f64::NEG_INFINITY; 3], |r| r.recall.as_array()),
            Selection::IntentAccuracy => [report.intent_accuracy().unwrap_or(f64::NEG_INFINITY), 0.0, 0.0],
        }
    }
}

/// Best entry of `trail` by multimodal R@1, then R@5, then R@10, then
/// earliest step. Returns its position.
pub fn select_checkpoint(trail: &[(u64, &EvalReport)]) -> Result<usize> {
    select_checkpoint_by(trail, Selection::Protocol(Protocol::Multimodal))
}

pub fn select_checkpoint_by(trail: &[(u64, &EvalReport)], selection: Selection) -> Result<usize> {
    if trail.is_empty() {
        return Err(Error::Data("cannot select from an empty checkpoint trail".into()));
    }
    let mut best = 0;
    for i in 1..trail.len() {
        let (a, b) = (selection.key(trail[i].1), selection.key(trail[best].1));
        let better = a
            .iter()
            .zip(&b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or_else(|| trail[best].0.cmp(&trail[i].0));
        if better.is_gt() {
            best = i;
        }
    }
    Ok(best)
}
