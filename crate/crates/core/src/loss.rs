//! Training objectives: softmax cross-entropy, the word-embedding loss,
//! and their combination.
//!
//! Cross-entropy penalizes log-probability of the exact reference word.
//! The embedding loss instead charges each candidate word by its Euclidean
//! distance to the reference in a frozen embedding space, weighted by the
//! model's output probability — so probability mass on near-synonyms is
//! cheap and mass on unrelated words is expensive, even when the reference
//! itself is out of vocabulary (its distance row then comes from the UNK
//! mean vector). Distances are constants: gradients flow only through the
//! probabilities.
//!
//! Per-sentence losses are summed over positions, then averaged over batch
//! size — never token-averaged — so learning-rate behavior is comparable
//! across the two losses.

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::Batch;
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};

/// Floor applied to reference probabilities before the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Which objective is active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Phase {
    /// Cross-entropy only.
    Ent,
    /// Embedding loss only.
    Emb,
    /// `ℓ_ent + λ·ℓ_emb`.
    Combined { lambda: f64 },
}

impl Phase {
    /// (ent_weight, emb_weight) applied to the components.
    pub fn weights(self) -> (f64, f64) {
        match self {
            Phase::Ent => (1.0, 0.0),
            Phase::Emb => (0.0, 1.0),
            Phase::Combined { lambda } => (1.0, lambda),
        }
    }

    pub fn needs_embeddings(self) -> bool {
        !matches!(self, Phase::Ent)
    }

    /// Stable lowercase label used in training logs.
    pub fn label(self) -> &'static str {
        match self {
            Phase::Ent => "ent",
            Phase::Emb => "emb",
            Phase::Combined { .. } => "combined",
        }
    }
}

/// Scalar components of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ent: f64,
    pub emb: f64,
    /// Unpadded target tokens that contributed (EOS included, BOS not).
    pub token_count: usize,
}

impl LossBreakdown {
    pub const ZERO: LossBreakdown = LossBreakdown {
        total: 0.0,
        ent: 0.0,
        emb: 0.0,
        token_count: 0,
    };
}

/// Per-sentence cross-entropy: `−Σᵢ maskᵢ · log p(refᵢ)` with row `i` of
/// `probs` scoring `target_ids[i]`. Zero-probability references are
/// clamped to [`PROB_FLOOR`].
pub fn cross_entropy_loss(probs: &Tensor, target_ids: &[u32], target_mask: &[f64]) -> f64 {
    let (steps, vocab) = (probs.rows(), probs.cols());
    assert_eq!(target_ids.len(), steps, "one reference id per probs row");
    assert_eq!(target_mask.len(), steps, "one mask entry per probs row");
    let mut total = 0.0;
    for i in 0..steps {
        if target_mask[i] == 0.0 {
            continue;
        }
        let id = target_ids[i] as usize;
        assert!(id < vocab, "reference id {id} outside vocab {vocab}");
        total -= probs.at(i, id).max(PROB_FLOOR).ln();
    }
    total
}

/// Per-sentence embedding loss: `Σᵢ maskᵢ · Σₖ p(Vₖ)·d(E(Vₖ), E(refᵢ))`.
/// Distances are treated as constants.
pub fn embedding_loss(
    probs: &Tensor,
    target_ids: &[u32],
    target_mask: &[f64],
    store: &EmbeddingStore,
) -> f64 {
    let (steps, vocab) = (probs.rows(), probs.cols());
    assert_eq!(target_ids.len(), steps, "one reference id per probs row");
    assert_eq!(target_mask.len(), steps, "one mask entry per probs row");
    assert_eq!(
        vocab,
        store.vocab_size(),
        "probs width {vocab} does not match embedding store {}",
        store.vocab_size()
    );
    let mut total = 0.0;
    for i in 0..steps {
        if target_mask[i] == 0.0 {
            continue;
        }
        let row = store
            .distance_row(target_ids[i])
            .expect("reference id within vocabulary");
        for k in 0..vocab {
            total += probs.at(i, k) * row.distances[k];
        }
    }
    total
}

/// Per-sentence combination per the active [`Phase`]. The inactive
/// component is still computed and reported when its inputs are available.
pub fn combined_loss(
    probs: &Tensor,
    target_ids: &[u32],
    target_mask: &[f64],
    store: Option<&EmbeddingStore>,
    phase: Phase,
) -> Result<LossBreakdown> {
    let store = match (store, phase.needs_embeddings()) {
        (Some(s), _) => Some(s),
        (None, false) => None,
        (None, true) => {
            return Err(Error::Config(format!(
                "{} loss requires an embedding store",
                phase.label()
            )))
        }
    };
    let ent = cross_entropy_loss(probs, target_ids, target_mask);
    let emb = store.map_or(0.0, |s| embedding_loss(probs, target_ids, target_mask, s));
    let (we, wm) = phase.weights();
    Ok(LossBreakdown {
        total: we * ent + wm * emb,
        ent,
        emb,
        token_count: target_mask.iter().filter(|&&m| m == 1.0).count(),
    })
}

/// Build the batch loss on the tape and return its node plus the scalar
/// breakdown.
///
/// `probs_steps[i]` is the `[batch × vocab]` distribution predicting target
/// column `i + 1` (teacher forcing shifts by the BOS). Both components are
/// recorded when possible so logs can always report them; only the active
/// combination contributes gradient.
pub fn batch_loss(
    tape: &mut Tape,
    probs_steps: &[Var],
    batch: &Batch,
    store: Option<&EmbeddingStore>,
    phase: Phase,
) -> Result<(Var, LossBreakdown)> {
    if phase.needs_embeddings() && store.is_none() {
        return Err(Error::Config(format!(
            "{} loss requires an embedding store",
            phase.label()
        )));
    }
    let b = batch.size();
    assert!(b > 0, "batch_loss: empty batch");
    assert_eq!(
        probs_steps.len(),
        batch.tgt_len() - 1,
        "one probs step per teacher-forced position"
    );
    let inv_b = 1.0 / b as f64;

    let mut ent_acc: Option<Var> = None;
    let mut emb_acc: Option<Var> = None;
    for (i, &p) in probs_steps.iter().enumerate() {
        let refs = batch.target_col(i + 1);
        let mask = batch.target_mask_col(i + 1);

        let gathered = tape.gather_per_row(p, &refs);
        let clamped = tape.clamp_min(gathered, PROB_FLOOR);
        let logs = tape.log(clamped);
        let mask_col = tape.constant(Tensor::new(vec![b, 1], mask.clone()));
        let masked = tape.mul(logs, mask_col);
        let step_ent = tape.sum(masked);
        ent_acc = Some(match ent_acc {
            Some(acc) => tape.add(acc, step_ent),
            None => step_ent,
        });

        if let Some(store) = store {
            let vocab = store.vocab_size();
            assert_eq!(
                tape.value(p).cols(),
                vocab,
                "probs width {} does not match embedding store {vocab}",
                tape.value(p).cols()
            );
            let mut dist = vec![0.0; b * vocab];
            for (row, (&id, &m)) in refs.iter().zip(&mask).enumerate() {
                if m == 0.0 {
                    continue; // distance row stays zero: masked out of loss and gradient
                }
                let d = store.distance_row(id)?;
                dist[row * vocab..(row + 1) * vocab].copy_from_slice(&d.distances);
            }
            let d = tape.constant(Tensor::new(vec![b, vocab], dist));
            let weighted = tape.mul(p, d);
            let step_emb = tape.sum(weighted);
            emb_acc = Some(match emb_acc {
                Some(acc) => tape.add(acc, step_emb),
                None => step_emb,
            });
        }
    }

    let ent_node = {
        let acc = ent_acc.expect("targets have at least one real position");
        tape.scale(acc, -inv_b)
    };
    let emb_node = emb_acc.map(|acc| tape.scale(acc, inv_b));

    let total_node = match (phase, emb_node) {
        (Phase::Ent, _) => ent_node,
        (Phase::Emb, Some(e)) => e,
        (Phase::Combined { lambda }, Some(e)) => {
            let scaled = tape.scale(e, lambda);
            tape.add(ent_node, scaled)
        }
        (_, None) => unreachable!("embedding store checked above"),
    };

    let breakdown = LossBreakdown {
        total: tape.value(total_node).scalar_value(),
        ent: tape.value(ent_node).scalar_value(),
        emb: emb_node.map_or(0.0, |e| tape.value(e).scalar_value()),
        token_count: batch.target_token_count(),
    };
    Ok((total_node, breakdown))
}
