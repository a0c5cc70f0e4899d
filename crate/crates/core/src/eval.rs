//! Scoring translations: corpus BLEU, UNK rate, and an embedding-based
//! near-miss metric.
//!
//! Near-miss accuracy quantifies the synonym-substitution effect: over
//! positionally aligned positions where hypothesis and reference words
//! differ, it measures how often the hypothesis word lies within the
//! top-k embedding neighborhood of the reference word. A baseline that
//! emits `<unk>` scores zero on those positions (specials are never
//! neighbors), while a model that picks an in-vocabulary near-synonym
//! scores high.

use std::collections::HashMap;

use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::vocab::{BOS_WORD, EOS_WORD, PAD_WORD, UNK_WORD};

/// Corpus-level clipped n-gram counts: (matched, total hypothesis n-grams).
pub fn ngram_precision_counts(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    n: usize,
) -> (usize, usize) {
    assert!(n >= 1);
    let mut matched = 0usize;
    let mut total = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        if hyp.len() >= n {
            total += hyp.len() - n + 1;
        }
        let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
        if reference.len() >= n {
            for gram in reference.windows(n) {
                *ref_counts.entry(gram).or_insert(0) += 1;
            }
        }
        let mut hyp_counts: HashMap<&[String], usize> = HashMap::new();
        if hyp.len() >= n {
            for gram in hyp.windows(n) {
                *hyp_counts.entry(gram).or_insert(0) += 1;
            }
        }
        for (gram, count) in hyp_counts {
            matched += count.min(ref_counts.get(gram).copied().unwrap_or(0));
        }
    }
    (matched, total)
}

/// Corpus BLEU: geometric mean of clipped n-gram precisions (n = 1..=`max_n`)
/// times the brevity penalty, on corpus-level counts, as a percentage.
///
/// Without smoothing, any zero precision zeroes the whole score. With
/// `smooth` (add-one on n ≥ 2), tiny corpora keep a usable signal.
pub fn corpus_bleu(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    max_n: usize,
    smooth: bool,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LineCountMismatch {
            left: hypotheses.len(),
            right: references.len(),
        });
    }
    assert!(max_n >= 1, "corpus_bleu: max_n must be ≥ 1");

    let hyp_len: usize = hypotheses.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (matched, total) = ngram_precision_counts(hypotheses, references, n);
        let (num, den) = if smooth && n >= 2 {
            (matched + 1, total + 1)
        } else {
            (matched, total)
        };
        if num == 0 || den == 0 {
            return Ok(0.0);
        }
        log_sum += (num as f64 / den as f64).ln();
    }
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * brevity * (log_sum / max_n as f64).exp())
}

/// Fraction of hypothesis tokens that are the literal `<unk>`; 0 for an
/// empty corpus.
pub fn unk_rate(hypotheses: &[Vec<String>]) -> f64 {
    let total: usize = hypotheses.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let unks: usize = hypotheses
        .iter()
        .flat_map(|s| s.iter())
        .filter(|w| w.as_str() == UNK_WORD)
        .count();
    unks as f64 / total as f64
}

/// Near-miss result. `mismatches == 0` flags the vacuous case, where the
/// accuracy is reported as 1.0 by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearMissReport {
    pub accuracy: f64,
    pub mismatches: usize,
    pub hits: usize,
}

fn is_special_form(word: &str) -> bool {
    matches!(word, PAD_WORD | UNK_WORD | BOS_WORD | EOS_WORD)
}

/// Over positions (aligned up to the shorter sentence) where hypothesis
/// and reference words differ and the reference word is not a special
/// form: the fraction whose hypothesis word lies in the top-`k`
/// embedding neighborhood of the reference word.
///
/// Reference words missing from the store's vocabulary fall back to the
/// UNK embedding row; a literal `<unk>` hypothesis can never hit, since
/// specials are excluded from neighborhoods.
pub fn near_miss_accuracy(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    store: &EmbeddingStore,
    k: usize,
) -> Result<NearMissReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::LineCountMismatch {
            left: hypotheses.len(),
            right: references.len(),
        });
    }
    let vocab = store.vocab();
    let mut mismatches = 0usize;
    let mut hits = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        for (h, r) in hyp.iter().zip(reference) {
            if h == r || is_special_form(r) {
                continue;
            }
            mismatches += 1;
            let ref_id = vocab.id(r);
            let hyp_id = vocab.id(h);
            if store.nearest_neighbors(ref_id, k)?.contains(&hyp_id) {
                hits += 1;
            }
        }
    }
    let accuracy = if mismatches == 0 {
        1.0
    } else {
        hits as f64 / mismatches as f64
    };
    Ok(NearMissReport {
        accuracy,
        mismatches,
        hits,
    })
}

/// All scores for one hypothesis/reference pair of corpora.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub sentences: usize,
    pub bleu: f64,
    pub unk_rate: f64,
    /// Present only when an embedding store was supplied.
    pub near_miss: Option<NearMissReport>,
}

impl EvalReport {
    pub fn compute(
        hypotheses: &[Vec<String>],
        references: &[Vec<String>],
        store: Option<&EmbeddingStore>,
        k: usize,
        smooth_bleu: bool,
    ) -> Result<EvalReport> {
        Ok(EvalReport {
            sentences: hypotheses.len(),
            bleu: corpus_bleu(hypotheses, references, 4, smooth_bleu)?,
            unk_rate: unk_rate(hypotheses),
            near_miss: match store {
                Some(s) => Some(near_miss_accuracy(hypotheses, references, s, k)?),
                None => None,
            },
        })
    }

    /// Human-readable key-value block; near-miss lines appear only when
    /// the metric was computed.
    pub fn text_block(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("sentences: {}\n", self.sentences));
        out.push_str(&format!("bleu: {}\n", self.bleu));
        out.push_str(&format!("unk_rate: {}\n", self.unk_rate));
        if let Some(nm) = &self.near_miss {
            out.push_str(&format!("near_miss_accuracy: {}\n", nm.accuracy));
            out.push_str(&format!("near_miss_mismatches: {}\n", nm.mismatches));
        }
        out
    }

    /// Single tab-separated record in the fixed order: sentences, bleu,
    /// unk_rate, near_miss_accuracy, near_miss_mismatches. Missing
    /// near-miss fields are written as `-`.
    pub fn tsv_line(&self) -> String {
        match &self.near_miss {
            Some(nm) => format!(
                "{}\t{}\t{}\t{}\t{}",
                self.sentences, self.bleu, self.unk_rate, nm.accuracy, nm.mismatches
            ),
            None => format!("{}\t{}\t{}\t-\t-", self.sentences, self.bleu, self.unk_rate),
        }
    }
}
