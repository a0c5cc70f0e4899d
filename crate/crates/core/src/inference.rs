//! Decoding: greedy and beam search over a trained model.
//!
//! Both decoders run the model with constant (non-trainable) parameters
//! and no dropout, so they are pure functions of the checkpoint and the
//! input ids. Greedy emits the argmax at every step with ties broken
//! toward the smaller id; beam search keeps the `width` best hypotheses
//! by cumulative log-probability, carrying finished hypotheses along so
//! they keep competing, and optionally length-normalizes final scores.

use crate::autodiff::Tape;
use crate::model::{Dropout, ModelParams};
use crate::vocab::EOS;

/// A (partial) decoded sequence.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Token ids starting with BOS; EOS terminates finished sequences
    /// that stopped before the length budget.
    pub ids: Vec<u32>,
    /// Sum of the log-probabilities of every emitted token.
    pub log_prob: f64,
    /// True once EOS was emitted or the length budget is spent.
    pub finished: bool,
}

impl Hypothesis {
    /// The emitted tokens (everything after BOS).
    pub fn emitted(&self) -> &[u32] {
        &self.ids[1..]
    }

    /// Ranking score: cumulative log-probability, divided by
    /// `len^alpha` when length normalization is enabled.
    pub fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.log_prob
        } else {
            self.log_prob / (self.emitted().len().max(1) as f64).powf(alpha)
        }
    }
}

fn single_row(ids: &[u32]) -> (Vec<Vec<u32>>, Vec<Vec<f64>>) {
    (vec![ids.to_vec()], vec![vec![1.0; ids.len()]])
}

/// Emit the argmax token at every step, feeding it back, until EOS or
/// `max_len` tokens. Ties go to the smaller id. The returned sequence
/// excludes BOS and includes EOS when one was emitted.
pub fn greedy_decode(params: &ModelParams, source_ids: &[u32], max_len: usize) -> Vec<u32> {
    assert!(max_len >= 1, "greedy_decode: max_len must be ≥ 1");
    assert!(!source_ids.is_empty(), "greedy_decode: empty source");
    let mut tape = Tape::new();
    let model = params.on_tape(&mut tape, false);
    let (ids, mask) = single_row(source_ids);
    let enc = model.encode(&mut tape, &ids, &mask, &mut Dropout::Off);
    let mut state = model.init_decoder_state(&mut tape, &enc, 1);
    let mut prev = crate::vocab::BOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let (next, d_tilde) =
            model.decoder_step(&mut tape, &state, &[prev], &enc, &[1.0], &mut Dropout::Off);
        let probs = model.output_distribution(&mut tape, d_tilde, &mut Dropout::Off);
        let row = tape.value(probs);
        let mut best = 0u32;
        let mut best_p = row.at(0, 0);
        for k in 1..row.cols() {
            let p = row.at(0, k);
            if p > best_p {
                best_p = p;
                best = k as u32;
            }
        }
        out.push(best);
        if best == EOS {
            break;
        }
        prev = best;
        state = next;
    }
    out
}

/// Probabilities below this floor contribute `ln(floor)` so log-scores
/// stay finite even for zero-probability tokens.
const LOG_FLOOR: f64 = 1e-300;

/// Beam search over cumulative log-probability.
///
/// `width` 1 with `alpha` 0 reproduces [`greedy_decode`] exactly,
/// including its tie-breaking. The best hypothesis under
/// [`Hypothesis::score`] is returned.
pub fn beam_search(
    params: &ModelParams,
    source_ids: &[u32],
    width: usize,
    max_len: usize,
    alpha: f64,
) -> Hypothesis {
    assert!(width >= 1, "beam_search: width must be ≥ 1");
    assert!(max_len >= 1, "beam_search: max_len must be ≥ 1");
    assert!(!source_ids.is_empty(), "beam_search: empty source");

    let mut tape = Tape::new();
    let model = params.on_tape(&mut tape, false);
    let (ids, mask) = single_row(source_ids);
    let enc = model.encode(&mut tape, &ids, &mask, &mut Dropout::Off);

    struct Entry {
        hyp: Hypothesis,
        state: Option<crate::model::DecoderState>,
    }
    let root_state = model.init_decoder_state(&mut tape, &enc, 1);
    let mut beam = vec![Entry {
        hyp: Hypothesis {
            ids: vec![crate::vocab::BOS],
            log_prob: 0.0,
            finished: false,
        },
        state: Some(root_state),
    }];

    for step in 0..max_len {
        if beam.iter().all(|e| e.hyp.finished) {
            break;
        }
        // candidate = carried finished hypothesis, or expansion of an
        // unfinished one by one token
        struct Candidate {
            parent: usize,
            token: Option<u32>,
            log_prob: f64,
        }
        let mut candidates = Vec::new();
        let mut next_states = Vec::new(); // per parent, the advanced state
        for (p, entry) in beam.iter().enumerate() {
            if entry.hyp.finished {
                candidates.push(Candidate {
                    parent: p,
                    token: None,
                    log_prob: entry.hyp.log_prob,
                });
                next_states.push(None);
                continue;
            }
            let prev = *entry.hyp.ids.last().expect("BOS-prefixed");
            let state = entry.state.as_ref().expect("unfinished entries keep state");
            let (next, d_tilde) =
                model.decoder_step(&mut tape, state, &[prev], &enc, &[1.0], &mut Dropout::Off);
            let probs = model.output_distribution(&mut tape, d_tilde, &mut Dropout::Off);
            let row = tape.value(probs).clone();
            for k in 0..row.cols() {
                candidates.push(Candidate {
                    parent: p,
                    token: Some(k as u32),
                    log_prob: entry.hyp.log_prob + row.at(0, k).max(LOG_FLOOR).ln(),
                });
            }
            next_states.push(Some(next));
        }
        // stable deterministic order: score desc, carries before
        // expansions, then smaller token, then older parent
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .expect("finite log-probabilities")
                .then(a.token.is_some().cmp(&b.token.is_some()))
                .then(a.token.cmp(&b.token))
                .then(a.parent.cmp(&b.parent))
        });
        candidates.truncate(width);

        let last_step = step + 1 == max_len;
        let mut next_beam = Vec::with_capacity(width);
        for c in candidates {
            match c.token {
                None => next_beam.push(Entry {
                    hyp: beam[c.parent].hyp.clone(),
                    state: None,
                }),
                Some(tok) => {
                    let mut ids = beam[c.parent].hyp.ids.clone();
                    ids.push(tok);
                    let finished = tok == EOS || last_step;
                    // states are bundles of Copy vars; forks share them
                    let state = if finished { None } else { next_states[c.parent] };
                    next_beam.push(Entry {
                        hyp: Hypothesis {
                            ids,
                            log_prob: c.log_prob,
                            finished,
                        },
                        state,
                    });
                }
            }
        }
        beam = next_beam;
    }

    beam.into_iter()
        .map(|e| {
            let mut h = e.hyp;
            h.finished = true;
            h
        })
        .max_by(|a, b| {
            a.score(alpha)
                .partial_cmp(&b.score(alpha))
                .expect("finite scores")
        })
        .expect("beam never empties")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn toy_params(tgt_vocab: usize, seed: u64) -> ModelParams {
        ModelParams::new(
            ModelDims {
                src_vocab: 9,
                tgt_vocab,
                embed_dim: 5,
                hidden_dim: 4,
            },
            seed,
        )
    }

    #[test]
    fn max_len_one_emits_exactly_one_token() {
        let params = toy_params(7, 1);
        let out = greedy_decode(&params, &[4, 5], 1);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn greedy_is_deterministic() {
        let params = toy_params(7, 2);
        assert_eq!(
            greedy_decode(&params, &[4, 6, 5], 12),
            greedy_decode(&params, &[4, 6, 5], 12)
        );
    }

    #[test]
    fn width_one_beam_equals_greedy() {
        use rand::{Rng, SeedableRng};
        let params = toy_params(8, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let len = rng.gen_range(1..=4);
            let src: Vec<u32> = (0..len).map(|_| rng.gen_range(4..9)).collect();
            let g = greedy_decode(&params, &src, 8);
            let b = beam_search(&params, &src, 1, 8, 0.0);
            assert_eq!(b.emitted(), &g[..], "source {src:?}");
        }
    }

    #[test]
    fn wider_beams_never_score_worse() {
        use rand::{Rng, SeedableRng};
        let params = toy_params(8, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let len = rng.gen_range(1..=4);
            let src: Vec<u32> = (0..len).map(|_| rng.gen_range(4..9)).collect();
            let narrow = beam_search(&params, &src, 1, 6, 0.0);
            let wide = beam_search(&params, &src, 4, 6, 0.0);
            assert!(
                wide.log_prob >= narrow.log_prob - 1e-12,
                "wide {} < narrow {}",
                wide.log_prob,
                narrow.log_prob
            );
        }
    }

    #[test]
    fn beam_matches_exhaustive_enumeration_on_a_tiny_model() {
        // 6 target ids, ≤ 2 steps → 6 + 36 candidate sequences
        let params = toy_params(6, 5);
        let src = [4u32, 7];
        let max_len = 2;

        // enumerate every sequence the decoder could emit
        let mut tape = Tape::new();
        let model = params.on_tape(&mut tape, false);
        let (ids, mask) = super::single_row(&src);
        let enc = model.encode(&mut tape, &ids, &mask, &mut Dropout::Off);
        let mut best: Option<(f64, Vec<u32>)> = None;
        let root = model.init_decoder_state(&mut tape, &enc, 1);
        let step_probs = |tape: &mut Tape,
                          state: &crate::model::DecoderState,
                          prev: u32|
         -> (crate::model::DecoderState, Vec<f64>) {
            let (next, d) =
                model.decoder_step(tape, state, &[prev], &enc, &[1.0], &mut Dropout::Off);
            let p = model.output_distribution(tape, d, &mut Dropout::Off);
            let row = tape.value(p).data().to_vec();
            (next, row)
        };
        let consider = |score: f64, seq: Vec<u32>, best: &mut Option<(f64, Vec<u32>)>| {
            if best.as_ref().map_or(true, |(s, _)| score > *s + 1e-15) {
                *best = Some((score, seq));
            }
        };
        let (after_bos, first) = step_probs(&mut tape, &root, crate::vocab::BOS);
        for (t1, p1) in first.iter().enumerate() {
            let lp1 = p1.max(LOG_FLOOR).ln();
            if t1 as u32 == EOS {
                consider(lp1, vec![t1 as u32], &mut best);
                continue;
            }
            let (_, second) = step_probs(&mut tape, &after_bos, t1 as u32);
            for (t2, p2) in second.iter().enumerate() {
                consider(
                    lp1 + p2.max(LOG_FLOOR).ln(),
                    vec![t1 as u32, t2 as u32],
                    &mut best,
                );
            }
        }
        let (best_score, best_seq) = best.unwrap();

        let hyp = beam_search(&params, &src, 36, max_len, 0.0);
        assert!((hyp.log_prob - best_score).abs() < 1e-12);
        assert_eq!(hyp.emitted(), &best_seq[..]);
    }

    #[test]
    fn surface_output_never_contains_pad_or_bos() {
        use crate::vocab::Vocabulary;
        let params = toy_params(8, 6);
        let vocab = Vocabulary::from_words((0..4).map(|i| format!("w{i}")));
        for src_len in 1..=3 {
            let src: Vec<u32> = (4..4 + src_len).collect();
            let out = greedy_decode(&params, &src, 10);
            let words = vocab.decode(&out).unwrap();
            assert!(words.iter().all(|w| w != "<pad>" && w != "<s>" && w != "</s>"));
        }
    }
}
