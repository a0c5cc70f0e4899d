//! Parallel-corpus loading, length filtering, batching, and a synthetic
//! corpus generator with controlled synonym structure.
//!
//! Corpus files are UTF-8, one sentence per line, tokens separated by
//! spaces. Batching sorts by target length to reduce padding, chunks, and
//! then shuffles the batch order with a seeded RNG so epochs are
//! reproducible. Targets are wrapped in `<s> ... </s>`; the source side is
//! consumed raw.
//!
//! The toy generator builds a word-for-word translation task where every
//! source word has a cluster of target synonyms sampled with a skewed
//! distribution, plus an embedding file whose intra-cluster distances are
//! strictly smaller than all inter-cluster distances. Dropping the most
//! frequent synonym of each cluster from the target vocabulary then yields
//! a corpus where the reference is often out of vocabulary while close
//! in-vocabulary alternatives exist — the regime the embedding loss is
//! designed for.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, BOS, EOS, PAD};

/// One aligned sentence pair, whitespace-tokenized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// Ordered collection of sentence pairs.
#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub name: String,
    pub pairs: Vec<SentencePair>,
    /// Pairs dropped because either side was an empty line.
    pub dropped_empty: usize,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn source_sides(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.source.as_slice())
    }

    pub fn target_sides(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.target.as_slice())
    }
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        lines.push(line.split_whitespace().map(str::to_string).collect());
    }
    Ok(lines)
}

/// Pair two one-sentence-per-line files. Pairs where either side is empty
/// are dropped and counted in `dropped_empty`.
pub fn load_parallel(source_path: &Path, target_path: &Path) -> Result<ParallelCorpus> {
    let src = read_token_lines(source_path)?;
    let tgt = read_token_lines(target_path)?;
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch {
            left: src.len(),
            right: tgt.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src.len());
    let mut dropped = 0;
    for (source, target) in src.into_iter().zip(tgt) {
        if source.is_empty() || target.is_empty() {
            dropped += 1;
            continue;
        }
        pairs.push(SentencePair { source, target });
    }
    let name = source_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    Ok(ParallelCorpus {
        name,
        pairs,
        dropped_empty: dropped,
    })
}

/// Keep only pairs where both sides have at most `max_tokens` tokens.
/// Order is preserved; the operation is idempotent.
pub fn filter_by_length(corpus: ParallelCorpus, max_tokens: usize) -> ParallelCorpus {
    assert!(max_tokens >= 1, "filter_by_length: max_tokens must be ≥ 1");
    let pairs = corpus
        .pairs
        .into_iter()
        .filter(|p| p.source.len() <= max_tokens && p.target.len() <= max_tokens)
        .collect();
    ParallelCorpus { pairs, ..corpus }
}

/// Fixed-size padded id matrices for one minibatch.
///
/// `target_ids` rows are `<s> y₁ … yₙ </s>` followed by padding; masks are
/// 1.0 exactly on real tokens (including BOS/EOS on the target side).
#[derive(Debug, Clone)]
pub struct Batch {
    pub source_ids: Vec<Vec<u32>>,
    pub target_ids: Vec<Vec<u32>>,
    pub source_mask: Vec<Vec<f64>>,
    pub target_mask: Vec<Vec<f64>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.source_ids.len()
    }

    pub fn src_len(&self) -> usize {
        self.source_ids.first().map_or(0, |r| r.len())
    }

    pub fn tgt_len(&self) -> usize {
        self.target_ids.first().map_or(0, |r| r.len())
    }

    /// Column `j` of the source id matrix.
    pub fn source_col(&self, j: usize) -> Vec<u32> {
        self.source_ids.iter().map(|row| row[j]).collect()
    }

    pub fn target_col(&self, i: usize) -> Vec<u32> {
        self.target_ids.iter().map(|row| row[i]).collect()
    }

    pub fn source_mask_col(&self, j: usize) -> Vec<f64> {
        self.source_mask.iter().map(|row| row[j]).collect()
    }

    pub fn target_mask_col(&self, i: usize) -> Vec<f64> {
        self.target_mask.iter().map(|row| row[i]).collect()
    }

    /// Number of real (unpadded) target tokens excluding BOS — the count
    /// of positions that contribute to the loss.
    pub fn target_token_count(&self) -> usize {
        self.target_mask
            .iter()
            .map(|row| row.iter().filter(|&&m| m == 1.0).count() - 1)
            .sum()
    }
}

fn pad_rows(rows: Vec<Vec<u32>>) -> (Vec<Vec<u32>>, Vec<Vec<f64>>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(rows.len());
    let mut masks = Vec::with_capacity(rows.len());
    for mut row in rows {
        let real = row.len();
        row.resize(width, PAD);
        let mut mask = vec![0.0; width];
        mask[..real].fill(1.0);
        ids.push(row);
        masks.push(mask);
    }
    (ids, masks)
}

/// Encode and batch a corpus. Pairs are sorted by target length (stable),
/// chunked into batches of `batch_size`, and the batch order is shuffled
/// when a seed is given. Every pair lands in exactly one batch.
pub fn make_batches(
    corpus: &ParallelCorpus,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "make_batches: batch_size must be ≥ 1");
    let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
    order.sort_by_key(|&i| corpus.pairs[i].target.len());

    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|chunk| {
            let src_rows: Vec<Vec<u32>> = chunk
                .iter()
                .map(|&i| vocab_src.encode(&corpus.pairs[i].source))
                .collect();
            let tgt_rows: Vec<Vec<u32>> = chunk
                .iter()
                .map(|&i| {
                    let mut ids = vec![BOS];
                    ids.extend(vocab_tgt.encode(&corpus.pairs[i].target));
                    ids.push(EOS);
                    ids
                })
                .collect();
            let (source_ids, source_mask) = pad_rows(src_rows);
            let (target_ids, target_mask) = pad_rows(tgt_rows);
            Batch {
                source_ids,
                target_ids,
                source_mask,
                target_mask,
            }
        })
        .collect();

    if let Some(seed) = shuffle_seed {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        batches.shuffle(&mut rng);
    }
    batches
}

/// Shape of the synthetic synonym-cluster task.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusSpec {
    pub clusters: usize,
    pub cluster_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub embed_dim: usize,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            clusters: 10,
            cluster_size: 3,
            min_len: 3,
            max_len: 8,
            train_size: 2000,
            valid_size: 200,
            test_size: 200,
            embed_dim: 16,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.clusters == 0 || self.cluster_size == 0 {
            return fail("clusters and cluster_size must be positive".into());
        }
        if self.cluster_size > 26 {
            return fail("cluster_size above 26 exceeds the synonym naming scheme".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!(
                "sentence length range {}..{} is invalid",
                self.min_len, self.max_len
            ));
        }
        if self.train_size == 0 || self.valid_size == 0 || self.test_size == 0 {
            return fail("all split sizes must be positive".into());
        }
        if self.embed_dim < self.clusters {
            return fail(format!(
                "embed_dim {} cannot separate {} clusters (needs embed_dim ≥ clusters)",
                self.embed_dim, self.clusters
            ));
        }
        Ok(())
    }

    /// Source surface form for cluster `c`.
    pub fn source_word(&self, c: usize) -> String {
        format!("s{c:02}")
    }

    /// Target surface form for synonym `j` of cluster `c`.
    pub fn target_word(&self, c: usize, j: usize) -> String {
        format!("t{c:02}{}", (b'a' + j as u8) as char)
    }

    /// All target words, cluster-major.
    pub fn target_words(&self) -> Vec<String> {
        (0..self.clusters)
            .flat_map(|c| (0..self.cluster_size).map(move |j| (c, j)))
            .map(|(c, j)| self.target_word(c, j))
            .collect()
    }

    pub fn source_words(&self) -> Vec<String> {
        (0..self.clusters).map(|c| self.source_word(c)).collect()
    }

    /// Target words with the first (most frequent) synonym of every cluster
    /// removed — the vocabulary that makes those synonyms OOV.
    pub fn oov_target_words(&self) -> Vec<String> {
        (0..self.clusters)
            .flat_map(|c| (1..self.cluster_size).map(move |j| (c, j)))
            .map(|(c, j)| self.target_word(c, j))
            .collect()
    }

    /// Sampling weights over synonyms: the first synonym gets weight ∝ 4,
    /// the rest ∝ 3, so it is strictly the most frequent choice.
    fn synonym_weights(&self) -> Vec<u32> {
        (0..self.cluster_size)
            .map(|j| if j == 0 { 4 } else { 3 })
            .collect()
    }
}

/// Generated splits plus the embedding file content.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
    /// Textual embedding table covering every target word.
    pub embedding_text: String,
}

/// Deterministically generate the synonym-cluster task.
///
/// Cluster centers are scaled one-hot axes, so any two words from
/// different clusters are ≈ √2 apart while cluster mates differ only by
/// per-word noise bounded well below that.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec, seed: u64) -> Result<ToyCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Per-coordinate noise amplitude keeping the max intra-cluster
    // distance (≤ 2a·√dim = 0.2) strictly under the minimum inter-cluster
    // distance (≥ √2 − 0.2).
    let amp = 0.1 / (spec.embed_dim as f64).sqrt();
    let mut embedding_text = format!("{} {}\n", spec.clusters * spec.cluster_size, spec.embed_dim);
    for c in 0..spec.clusters {
        for j in 0..spec.cluster_size {
            let mut vec = vec![0.0f64; spec.embed_dim];
            vec[c] = 1.0;
            for v in vec.iter_mut() {
                *v += rng.gen_range(-amp..amp);
            }
            embedding_text.push_str(&spec.target_word(c, j));
            for v in &vec {
                embedding_text.push_str(&format!(" {v}"));
            }
            embedding_text.push('\n');
        }
    }

    let weights = WeightedIndex::new(spec.synonym_weights())
        .expect("synonym weights are positive by construction");
    let split = |name: &str, size: usize, rng: &mut ChaCha8Rng| {
        let pairs = (0..size)
            .map(|_| {
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let mut source = Vec::with_capacity(len);
                let mut target = Vec::with_capacity(len);
                for _ in 0..len {
                    let c = rng.gen_range(0..spec.clusters);
                    source.push(spec.source_word(c));
                    target.push(spec.target_word(c, weights.sample(rng)));
                }
                SentencePair { source, target }
            })
            .collect();
        ParallelCorpus {
            name: name.to_string(),
            pairs,
            dropped_empty: 0,
        }
    };

    let train = split("train", spec.train_size, &mut rng);
    let valid = split("valid", spec.valid_size, &mut rng);
    let test = split("test", spec.test_size, &mut rng);
    Ok(ToyCorpus {
        train,
        valid,
        test,
        embedding_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(path: &Path, lines: &[&str]) {
        let mut f = File::create(path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
    }

    #[test]
    fn load_pairs_lines_and_splits_on_whitespace() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s"), dir.path().join("t"));
        write_lines(&s, &["a b c", "d", "e  f"]);
        write_lines(&t, &["x", "y z", "w"]);
        let c = load_parallel(&s, &t).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.pairs[0].source, vec!["a", "b", "c"]);
        assert_eq!(c.pairs[2].source, vec!["e", "f"]); // double space collapses
        assert_eq!(c.pairs[1].target, vec!["y", "z"]);
    }

    #[test]
    fn load_reports_line_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s"), dir.path().join("t"));
        write_lines(&s, &["a", "b", "c"]);
        write_lines(&t, &["x", "y", "z", "w"]);
        let err = load_parallel(&s, &t).unwrap_err();
        assert_eq!(err.to_string(), "line count mismatch 3 vs 4");
    }

    #[test]
    fn load_drops_and_counts_empty_line_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s"), dir.path().join("t"));
        write_lines(&s, &["a b", "", "c"]);
        write_lines(&t, &["x", "y", "z"]);
        let c = load_parallel(&s, &t).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.dropped_empty, 1);
    }

    fn pair(src: &str, tgt: &str) -> SentencePair {
        SentencePair {
            source: src.split_whitespace().map(str::to_string).collect(),
            target: tgt.split_whitespace().map(str::to_string).collect(),
        }
    }

    fn corpus(pairs: Vec<SentencePair>) -> ParallelCorpus {
        ParallelCorpus {
            name: "test".into(),
            pairs,
            dropped_empty: 0,
        }
    }

    #[test]
    fn length_filter_is_boundary_inclusive_and_two_sided() {
        let sixty_src = vec!["w"; 60].join(" ");
        let sixty_one = vec!["w"; 61].join(" ");
        let c = corpus(vec![
            pair(&sixty_src, &sixty_src),
            pair(&sixty_one, "a b c d e"),
            pair("a b c d e", &sixty_one),
        ]);
        let f = filter_by_length(c, 60);
        assert_eq!(f.len(), 1);
        assert_eq!(f.pairs[0].source.len(), 60);
    }

    #[test]
    fn length_filter_is_idempotent() {
        let c = corpus(vec![pair("a b c", "x"), pair("a", "x y z w")]);
        let once = filter_by_length(c.clone(), 3);
        let twice = filter_by_length(once.clone(), 3);
        assert_eq!(once.pairs, twice.pairs);
    }

    fn toy_vocabs(c: &ParallelCorpus) -> (Vocabulary, Vocabulary) {
        (
            Vocabulary::build(c.source_sides(), 1000),
            Vocabulary::build(c.target_sides(), 1000),
        )
    }

    #[test]
    fn batches_cover_corpus_with_expected_sizes() {
        let pairs: Vec<SentencePair> = (0..130).map(|i| pair("a b", &format!("w{i}"))).collect();
        let c = corpus(pairs);
        let (vs, vt) = toy_vocabs(&c);
        let batches = make_batches(&c, &vs, &vt, 64, None);
        let mut sizes: Vec<usize> = batches.iter().map(|b| b.size()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 64, 64]);
        let total: usize = batches.iter().map(|b| b.size()).sum();
        assert_eq!(total, 130);
    }

    #[test]
    fn batch_rows_are_bos_wrapped_and_masked() {
        let c = corpus(vec![pair("a b c", "x y"), pair("d", "z z z z")]);
        let (vs, vt) = toy_vocabs(&c);
        let batches = make_batches(&c, &vs, &vt, 2, None);
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        for (row, mask) in b.target_ids.iter().zip(&b.target_mask) {
            assert_eq!(row[0], BOS);
            let real = mask.iter().filter(|&&m| m == 1.0).count();
            assert_eq!(row[real - 1], EOS);
            // mask is a prefix of ones
            assert!(mask[..real].iter().all(|&m| m == 1.0));
            assert!(mask[real..].iter().all(|&m| m == 0.0));
            assert!(row[real..].iter().all(|&id| id == PAD));
        }
        // mask row sums equal true lengths (+2 for BOS/EOS on target)
        let tgt_lens: Vec<usize> = b
            .target_mask
            .iter()
            .map(|m| m.iter().sum::<f64>() as usize)
            .collect();
        let mut expect: Vec<usize> = c.pairs.iter().map(|p| p.target.len() + 2).collect();
        expect.sort_unstable();
        let mut got = tgt_lens.clone();
        got.sort_unstable();
        assert_eq!(got, expect);
    }

    #[test]
    fn batching_is_deterministic_per_seed_and_varies_with_it() {
        let pairs: Vec<SentencePair> = (0..40)
            .map(|i| pair(&format!("a{i} b"), &format!("x{} y", i % 7)))
            .collect();
        let c = corpus(pairs);
        let (vs, vt) = toy_vocabs(&c);
        let a = make_batches(&c, &vs, &vt, 8, Some(3));
        let b = make_batches(&c, &vs, &vt, 8, Some(3));
        let order = |bs: &[Batch]| -> Vec<Vec<u32>> { bs.iter().map(|b| b.source_col(0)).collect() };
        assert_eq!(order(&a), order(&b));
        let d = make_batches(&c, &vs, &vt, 8, Some(4));
        assert_ne!(order(&a), order(&d), "different seed should reorder batches");
    }

    #[test]
    fn oov_tokens_encode_to_unk_in_batches() {
        let c = corpus(vec![pair("a rare", "x unseen")]);
        let vs = Vocabulary::from_words(["a".to_string()]);
        let vt = Vocabulary::from_words(["x".to_string()]);
        let b = &make_batches(&c, &vs, &vt, 1, None)[0];
        assert_eq!(b.source_ids[0][1], crate::vocab::UNK);
        assert_eq!(b.target_ids[0][2], crate::vocab::UNK);
    }

    #[test]
    fn toy_generator_is_deterministic() {
        let spec = ToyCorpusSpec {
            train_size: 30,
            valid_size: 5,
            test_size: 5,
            ..ToyCorpusSpec::default()
        };
        let a = generate_toy_corpus(&spec, 9).unwrap();
        let b = generate_toy_corpus(&spec, 9).unwrap();
        assert_eq!(a.embedding_text, b.embedding_text);
        assert_eq!(a.train.pairs, b.train.pairs);
        assert_eq!(a.test.pairs, b.test.pairs);
        let c = generate_toy_corpus(&spec, 10).unwrap();
        assert_ne!(a.train.pairs, c.train.pairs);
    }

    #[test]
    fn toy_target_vocabulary_has_clusters_times_size_words() {
        let spec = ToyCorpusSpec::default();
        assert_eq!(spec.target_words().len(), 30);
        assert_eq!(spec.oov_target_words().len(), 20);
        assert!(!spec.oov_target_words().contains(&spec.target_word(4, 0)));
        assert!(spec.oov_target_words().contains(&spec.target_word(4, 1)));
    }

    #[test]
    fn toy_embedding_geometry_separates_clusters() {
        let spec = ToyCorpusSpec {
            train_size: 1,
            valid_size: 1,
            test_size: 1,
            ..ToyCorpusSpec::default()
        };
        let toy = generate_toy_corpus(&spec, 5).unwrap();
        // exhaustive pairwise scan over the emitted file
        let mut vectors: Vec<(String, Vec<f64>)> = Vec::new();
        for line in toy.embedding_text.lines().skip(1) {
            let mut it = line.split(' ');
            let word = it.next().unwrap().to_string();
            let v: Vec<f64> = it.map(|x| x.parse().unwrap()).collect();
            assert_eq!(v.len(), spec.embed_dim);
            vectors.push((word, v));
        }
        assert_eq!(vectors.len(), 30);
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let cluster_of = |w: &str| w[1..3].parse::<usize>().unwrap();
        let mut max_intra = 0.0f64;
        let mut min_inter = f64::INFINITY;
        for i in 0..vectors.len() {
            for j in (i + 1)..vectors.len() {
                let d = dist(&vectors[i].1, &vectors[j].1);
                if cluster_of(&vectors[i].0) == cluster_of(&vectors[j].0) {
                    max_intra = max_intra.max(d);
                } else {
                    min_inter = min_inter.min(d);
                }
            }
        }
        assert!(
            max_intra < min_inter,
            "intra {max_intra} must stay below inter {min_inter}"
        );
    }

    #[test]
    fn toy_spec_validation_rejects_inconsistencies() {
        let bad = ToyCorpusSpec {
            cluster_size: 0,
            ..ToyCorpusSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad_dim = ToyCorpusSpec {
            clusters: 20,
            embed_dim: 10,
            ..ToyCorpusSpec::default()
        };
        assert!(bad_dim.validate().is_err());
        let bad_len = ToyCorpusSpec {
            min_len: 5,
            max_len: 4,
            ..ToyCorpusSpec::default()
        };
        assert!(bad_len.validate().is_err());
    }

    #[test]
    fn toy_first_synonym_is_sampled_most_often() {
        let spec = ToyCorpusSpec {
            train_size: 400,
            valid_size: 1,
            test_size: 1,
            ..ToyCorpusSpec::default()
        };
        let toy = generate_toy_corpus(&spec, 2).unwrap();
        let mut first = 0usize;
        let mut rest = 0usize;
        for p in &toy.train.pairs {
            for w in &p.target {
                if w.ends_with('a') {
                    first += 1;
                } else {
                    rest += 1;
                }
            }
        }
        let frac = first as f64 / (first + rest) as f64;
        // expected 0.4 with weights 4:3:3; allow generous sampling slack
        assert!((0.34..0.46).contains(&frac), "first-synonym fraction {frac}");
    }

    proptest::proptest! {
        #[test]
        fn every_pair_lands_in_exactly_one_batch(n in 1usize..60, bs in 1usize..10, seed in 0u64..20) {
            let pairs: Vec<SentencePair> = (0..n)
                .map(|i| pair(&format!("s{i}"), &vec![format!("t{i}"); i % 5 + 1].join(" ")))
                .collect();
            let c = corpus(pairs.clone());
            let (vs, vt) = toy_vocabs(&c);
            let batches = make_batches(&c, &vs, &vt, bs, Some(seed));
            let mut seen: Vec<String> = Vec::new();
            for b in &batches {
                for (row, mask) in b.source_ids.iter().zip(&b.source_mask) {
                    let real = mask.iter().filter(|&&m| m == 1.0).count();
                    let words = vs.decode(&row[..real]).unwrap().join(" ");
                    seen.push(words);
                }
            }
            seen.sort();
            let mut expect: Vec<String> = pairs.iter().map(|p| p.source.join(" ")).collect();
            expect.sort();
            proptest::prop_assert_eq!(seen, expect);
        }
    }
}
