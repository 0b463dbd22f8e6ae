//! Training losses: bidirectional in-batch contrastive loss over
//! temperature-scaled cosine scores, and binary cross-entropy for intent.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::IntentHead;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Logit offset applied to masked duplicate pairs.
const DUPLICATE_MASK: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveOptions {
    pub temperature: f64,
    /// When set, entry `i` is a response key; off-diagonal pairs with equal
    /// keys are excluded from the softmax denominators.
    #[serde(default)]
    pub duplicate_keys: Option<Vec<u64>>,
}

impl ContrastiveOptions {
    pub fn with_temperature(temperature: f64) -> Self {
        Self {
            temperature,
            duplicate_keys: None,
        }
    }
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        Self::with_temperature(0.01)
    }
}

/// `mean_i CE(S_i,:, i) + mean_i CE(S_:,i, i)` with `S = C·Rᵀ / τ`.
///
/// `contexts` and `responses` are `[B × d]` unit rows, row `i` of each forming
/// the gold pair.
pub fn contrastive_loss(tape: &mut Tape, contexts: Var, responses: Var, options: &ContrastiveOptions) -> Result<Var> {
    let (b, _) = tape.value(contexts).matrix_dims()?;
    let (b2, _) = tape.value(responses).matrix_dims()?;
    if b != b2 {
        return Err(Error::shape(
            "contrastive_loss",
            tape.value(contexts).shape(),
            tape.value(responses).shape(),
        ));
    }
    let sims = tape.cosine_sim_matrix(contexts, responses)?;
    let mut scores = tape.div_scalar(sims, options.temperature)?;
    if let Some(keys) = &options.duplicate_keys {
        if keys.len() != b {
            return Err(Error::shape("contrastive_loss", &[b], &[keys.len()]));
        }
        let mut mask = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                if i != j && keys[i] == keys[j] {
                    mask[i * b + j] = DUPLICATE_MASK;
                }
            }
        }
        if mask.iter().any(|&m| m != 0.0) {
            let m = tape.leaf(Tensor::matrix(b, b, mask)?);
            scores = tape.add(scores, m)?;
        }
    }
    let targets: Vec<usize> = (0..b).collect();
    let forward = tape.softmax_cross_entropy_rows(scores, &targets)?;
    let transposed = tape.transpose(scores)?;
    let backward = tape.softmax_cross_entropy_rows(transposed, &targets)?;
    tape.add(forward, backward)
}

/// Joint loss over a heterogeneous batch. Response rows come from whichever
/// encoder matches their modality; the arithmetic is that of
/// [`contrastive_loss`].
pub fn joint_loss(tape: &mut Tape, contexts: Var, responses: Var, options: &ContrastiveOptions) -> Result<Var> {
    contrastive_loss(tape, contexts, responses, options)
}

/// Mean BCE of the intent logits; label 1 for image-gold, 0 for text-gold.
pub fn intent_loss(
    tape: &mut Tape,
    store: &ParamStore,
    head: &IntentHead,
    contexts: Var,
    image_labels: &[bool],
) -> Result<Var> {
    let logits = head.logits(tape, store, contexts)?;
    let labels: Vec<f64> = image_labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    tape.bce_with_logits(logits, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        let d = rows[0].len();
        let t = Tensor::matrix(rows.len(), d, rows.concat()).unwrap();
        let v = tape.leaf(t);
        tape.l2_normalize(v).unwrap()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let mut tape = Tape::new();
        let c = unit_rows(&mut tape, &[vec![0.3, 0.4]]);
        let r = unit_rows(&mut tape, &[vec![-1.0, 0.2]]);
        let l = contrastive_loss(&mut tape, c, r, &ContrastiveOptions::default()).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn identity_similarity_two_pairs() {
        let mut tape = Tape::new();
        let c = unit_rows(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = contrastive_loss(&mut tape, c, c, &ContrastiveOptions::with_temperature(1.0)).unwrap();
        let per_direction = (1.0 + (-1.0f64).exp()).ln();
        assert!((per_direction - 0.313262).abs() < 1e-6);
        assert!((tape.value(l).item() - 2.0 * per_direction).abs() < 1e-12);
        assert!((tape.value(l).item() - 0.626523).abs() < 1e-6);
    }

    #[test]
    fn masking_duplicates_removes_the_collision() {
        // two contexts share a gold response: unmasked, each row sees its twin
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let mut tape = Tape::new();
        let c = unit_rows(&mut tape, &rows);
        let plain = contrastive_loss(&mut tape, c, c, &ContrastiveOptions::with_temperature(1.0)).unwrap();
        assert!((tape.value(plain).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let masked_opts = ContrastiveOptions {
            temperature: 1.0,
            duplicate_keys: Some(vec![7, 7]),
        };
        let masked = contrastive_loss(&mut tape, c, c, &masked_opts).unwrap();
        assert!(tape.value(masked).item().abs() < 1e-12);
    }

    #[test]
    fn intent_loss_spot_values() {
        let mut store = ParamStore::new();
        let head = IntentHead {
            w: store.insert("w", Tensor::zeros(vec![2, 1])),
            b: store.insert("b", Tensor::vector(vec![0.0])),
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![0.6, 0.8, -0.8, 0.6]).unwrap());
        let l = intent_loss(&mut tape, &store, &head, x, &[true, false]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        // logits exactly ±10 with matching labels
        store.assign(head.w, &Tensor::new(vec![2, 1], vec![10.0, 0.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap());
        let l = intent_loss(&mut tape, &store, &head, x, &[true, false]).unwrap();
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-15);
        assert!((tape.value(l).item() - 4.54e-5).abs() < 1e-7);
    }
}
