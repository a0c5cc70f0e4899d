//! External word-embedding tables and the distance geometry they induce.
//!
//! Embeddings arrive as text ("<count> <dim>" header, then one
//! space-separated vector per word), get aligned to a target vocabulary
//! into a frozen [`EmbeddingStore`], and from then on only two queries
//! matter: the Euclidean distance row from a reference word to the whole
//! vocabulary (cached, feeds the loss) and nearest neighbors (feeds
//! evaluation). Vocabulary words missing from the file receive
//! deterministic seeded vectors scaled to the mean norm of the found ones;
//! UNK receives the mean vector itself so it sits centrally rather than at
//! any particular word.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{is_special, Vocabulary, UNK};

/// Parsed embedding file before vocabulary alignment.
#[derive(Debug, Clone)]
pub struct RawEmbeddings {
    pub dim: usize,
    words: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    /// Duplicate word lines encountered (first occurrence kept).
    pub duplicates: usize,
}

impl RawEmbeddings {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index.get(word).map(|&i| self.vectors[i].as_slice())
    }
}

/// Parse the textual embedding format. The header's count field is
/// informational; dimensionality is enforced per line.
pub fn load_text_embeddings(path: &Path) -> Result<RawEmbeddings> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io(path, e))?,
        None => {
            return Err(Error::EmbeddingFormat {
                line: 1,
                msg: "empty file, expected \"<count> <dim>\" header".into(),
            })
        }
    };
    let mut parts = header.split(' ');
    let parse_header = |field: Option<&str>, what: &str| -> Result<usize> {
        field
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::EmbeddingFormat {
                line: 1,
                msg: format!("header must be \"<count> <dim>\", bad {what}: {header:?}"),
            })
    };
    let _count: usize = parse_header(parts.next(), "count")?;
    let dim: usize = parse_header(parts.next(), "dim")?;
    if dim == 0 {
        return Err(Error::EmbeddingFormat {
            line: 1,
            msg: "dimension must be positive".into(),
        });
    }

    let mut words = Vec::new();
    let mut vectors = Vec::new();
    let mut index = HashMap::new();
    let mut duplicates = 0;
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let word = fields.next().expect("non-empty line has a first field");
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse().map_err(|_| Error::EmbeddingFormat {
                    line: line_no,
                    msg: format!("non-numeric value {f:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::EmbeddingFormat {
                line: line_no,
                msg: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if index.contains_key(word) {
            duplicates += 1;
            continue;
        }
        index.insert(word.to_string(), words.len());
        words.push(word.to_string());
        vectors.push(values);
    }
    Ok(RawEmbeddings {
        dim,
        words,
        vectors,
        index,
        duplicates,
    })
}

/// Euclidean distance between equal-length vectors.
pub fn distance(s: &[f64], t: &[f64]) -> f64 {
    assert_eq!(
        s.len(),
        t.len(),
        "distance: dimension mismatch {} vs {}",
        s.len(),
        t.len()
    );
    s.iter()
        .zip(t)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Distances from one vocabulary word to every vocabulary word.
#[derive(Debug, Clone)]
pub struct DistanceRow {
    pub ref_id: u32,
    pub distances: Arc<Vec<f64>>,
}

/// Frozen embedding matrix aligned 1:1 with a target vocabulary.
pub struct EmbeddingStore {
    vocab: Vocabulary,
    matrix: Vec<f64>, // row-major [vocab_size × embed_dim]
    pub embed_dim: usize,
    /// Fraction of vocabulary entries found verbatim in the source file.
    pub coverage: f64,
    cache: Mutex<HashMap<u32, Arc<Vec<f64>>>>,
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Build an [`EmbeddingStore`] for `vocab` from a raw table.
///
/// Found words are copied verbatim. Each missing word (specials included)
/// gets a vector drawn from a per-word RNG seeded by `hash(word) ^ seed`,
/// scaled to the mean norm of the found vectors — deterministic across
/// runs and insensitive to vocabulary order. UNK instead gets the mean of
/// the found vectors.
pub fn align_to_vocab(raw: &RawEmbeddings, vocab: &Vocabulary, seed: u64) -> EmbeddingStore {
    assert!(!raw.is_empty(), "align_to_vocab: raw table is empty");
    let dim = raw.dim;
    let size = vocab.len();

    let mut found_ids = Vec::new();
    let mut matrix = vec![0.0; size * dim];
    for id in 0..size as u32 {
        let word = vocab.word(id).expect("id < vocab len");
        if let Some(v) = raw.get(word) {
            matrix[id as usize * dim..(id as usize + 1) * dim].copy_from_slice(v);
            found_ids.push(id);
        }
    }

    let (mean, mean_norm) = if found_ids.is_empty() {
        (vec![0.0; dim], 1.0)
    } else {
        let mut mean = vec![0.0; dim];
        let mut norm_sum = 0.0;
        for &id in &found_ids {
            let row = &matrix[id as usize * dim..(id as usize + 1) * dim];
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
            norm_sum += row.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let n = found_ids.len() as f64;
        for m in mean.iter_mut() {
            *m /= n;
        }
        (mean, norm_sum / n)
    };

    for id in 0..size as u32 {
        if found_ids.binary_search(&id).is_ok() {
            continue;
        }
        let row = &mut matrix[id as usize * dim..(id as usize + 1) * dim];
        if id == UNK {
            row.copy_from_slice(&mean);
            continue;
        }
        let word = vocab.word(id).expect("id < vocab len");
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(word) ^ seed);
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v *= mean_norm / norm;
            }
        }
    }

    EmbeddingStore {
        vocab: vocab.clone(),
        matrix,
        embed_dim: dim,
        coverage: found_ids.len() as f64 / size as f64,
        cache: Mutex::new(HashMap::new()),
    }
}

impl EmbeddingStore {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Embedding row for a vocabulary id.
    pub fn row(&self, id: u32) -> Result<&[f64]> {
        let i = id as usize;
        if i >= self.vocab.len() {
            return Err(Error::IdOutOfRange {
                id,
                size: self.vocab.len(),
            });
        }
        Ok(&self.matrix[i * self.embed_dim..(i + 1) * self.embed_dim])
    }

    /// Distances from `ref_id` to every vocabulary word, cached after the
    /// first computation. Concurrent callers observe identical values.
    pub fn distance_row(&self, ref_id: u32) -> Result<DistanceRow> {
        let reference = self.row(ref_id)?;
        let mut cache = self.cache.lock().expect("distance cache poisoned");
        let distances = cache
            .entry(ref_id)
            .or_insert_with(|| {
                Arc::new(
                    (0..self.vocab.len())
                        .map(|k| {
                            let row = &self.matrix[k * self.embed_dim..(k + 1) * self.embed_dim];
                            distance(row, reference)
                        })
                        .collect(),
                )
            })
            .clone();
        Ok(DistanceRow { ref_id, distances })
    }

    /// The `k` non-special ids nearest to `word_id` (itself excluded),
    /// ascending by distance; ties break toward the smaller id.
    pub fn nearest_neighbors(&self, word_id: u32, k: usize) -> Result<Vec<u32>> {
        assert!(
            k < self.vocab.len(),
            "nearest_neighbors: k {k} must be below vocab size {}",
            self.vocab.len()
        );
        let row = self.distance_row(word_id)?;
        let mut candidates: Vec<u32> = (0..self.vocab.len() as u32)
            .filter(|&id| id != word_id && !is_special(id))
            .collect();
        candidates.sort_by(|&a, &b| {
            row.distances[a as usize]
                .partial_cmp(&row.distances[b as usize])
                .expect("distances are finite")
                .then(a.cmp(&b))
        });
        candidates.truncate(k);
        Ok(candidates)
    }
}
