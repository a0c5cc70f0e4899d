//! Token vocabularies with reserved special ids.
//!
//! Ids 0..=3 are always `<pad>`, `<unk>`, `<s>`, `</s>` in that order;
//! ordinary words start at id 4. Building from a corpus keeps the most
//! frequent words, breaking frequency ties by first occurrence, and the
//! size cap includes the four specials. The on-disk form is one ordinary
//! word per line (line `i` holds the word with id `i + 4`), so a hand-
//! written word list is also a valid vocabulary file.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

pub const PAD_WORD: &str = "<pad>";
pub const UNK_WORD: &str = "<unk>";
pub const BOS_WORD: &str = "<s>";
pub const EOS_WORD: &str = "</s>";

const SPECIALS: [&str; 4] = [PAD_WORD, UNK_WORD, BOS_WORD, EOS_WORD];

/// Immutable word ↔ id mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_word: Vec<String>,
    word_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from tokenized sentences, keeping at most `max_size` entries
    /// (specials included). Ties in frequency go to the earlier first
    /// occurrence, so the result is independent of hash-map iteration order.
    pub fn build<'a>(
        sentences: impl IntoIterator<Item = &'a [String]>,
        max_size: usize,
    ) -> Vocabulary {
        assert!(
            max_size > SPECIALS.len(),
            "vocabulary size {max_size} leaves no room beyond the {} special tokens",
            SPECIALS.len()
        );
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new(); // word -> (freq, first_pos)
        let mut pos = 0usize;
        for sent in sentences {
            for word in sent {
                let entry = counts.entry(word.as_str()).or_insert((0, pos));
                entry.0 += 1;
                pos += 1;
            }
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts
            .into_iter()
            .map(|(w, (freq, first))| (w, freq, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - SPECIALS.len());
        Self::from_words(ranked.into_iter().map(|(w, _, _)| w.to_string()))
    }

    /// Vocabulary with exactly the given ordinary words, in order, after
    /// the specials. Duplicates and special surface forms are skipped.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Vocabulary {
        let mut id_to_word: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut word_to_id: HashMap<String, u32> = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        for word in words {
            if word_to_id.contains_key(&word) {
                continue;
            }
            let id = id_to_word.len() as u32;
            word_to_id.insert(word.clone(), id);
            id_to_word.push(word);
        }
        Vocabulary {
            id_to_word,
            word_to_id,
        }
    }

    /// Total entries including the four specials.
    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds the specials
    }

    /// Id for `word`, or [`UNK`] when out of vocabulary.
    pub fn id(&self, word: &str) -> u32 {
        self.word_to_id.get(word).copied().unwrap_or(UNK)
    }

    /// True if `word` maps to a non-UNK id (or is itself a special form).
    pub fn contains(&self, word: &str) -> bool {
        self.word_to_id.contains_key(word)
    }

    /// Surface form for `id`.
    pub fn word(&self, id: u32) -> Result<&str> {
        self.id_to_word
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(Error::IdOutOfRange {
                id,
                size: self.id_to_word.len(),
            })
    }

    /// Ordinary words in id order (specials excluded).
    pub fn ordinary_words(&self) -> impl Iterator<Item = &str> {
        self.id_to_word[SPECIALS.len()..].iter().map(|s| s.as_str())
    }

    /// Encode a tokenized sentence; unknown words become [`UNK`].
    pub fn encode(&self, words: &[String]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Decode ids to surface tokens: `<pad>`, `<s>` and `</s>` are omitted,
    /// UNK renders as the literal `<unk>`. Fails on out-of-range ids.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let word = self.word(id)?;
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            out.push(word.to_string());
        }
        Ok(out)
    }

    /// Write ordinary words, one per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for word in self.ordinary_words() {
            writeln!(w, "{word}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Read a word-per-line file written by [`Vocabulary::save`] (or by hand).
    pub fn load(path: &Path) -> Result<Vocabulary> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut words = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let word = line.trim();
            if !word.is_empty() {
                words.push(word.to_string());
            }
        }
        Ok(Self::from_words(words))
    }
}

/// True for ids reserved for special tokens.
pub fn is_special(id: u32) -> bool {
    id < SPECIALS.len() as u32
}
