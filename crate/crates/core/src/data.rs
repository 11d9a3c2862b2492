//! Corpus ingestion, byte-level tokenization, chunking and batch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Vocabulary size of the byte tokenizer.
pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Vocab { id, vocab: vocab_size });
        }
        Ok(TokenSeq { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// All but the last token of a training chunk.
    pub fn inputs(&self) -> &[usize] {
        &self.ids[..self.ids.len().saturating_sub(1)]
    }

    /// The chunk shifted left by one.
    pub fn targets(&self) -> &[usize] {
        self.ids.get(1..).unwrap_or(&[])
    }
}

pub fn tokenize_bytes(text: &[u8]) -> TokenSeq {
    TokenSeq {
        ids: text.iter().map(|&b| b as usize).collect(),
    }
}

/// Inverse of [`tokenize_bytes`]. Ids above 255 are a vocab error.
pub fn detokenize(seq: &TokenSeq) -> Result<Vec<u8>> {
    seq.ids
        .iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::Vocab {
                id,
                vocab: BYTE_VOCAB,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub source: PathBuf,
    pub tokens: TokenSeq,
}

impl Corpus {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Corpus::from_bytes(path, &bytes))
    }

    pub fn from_bytes(source: impl Into<PathBuf>, bytes: &[u8]) -> Self {
        Corpus {
            source: source.into(),
            tokens: tokenize_bytes(bytes),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Split into non-overlapping chunks of `seq_len + 1` tokens, dropping the
/// tail.
pub fn chunk_corpus(corpus: &Corpus, seq_len: usize) -> Result<Vec<TokenSeq>> {
    if seq_len < 2 {
        return Err(Error::Config(format!("seq_len must be at least 2, got {seq_len}")));
    }
    let width = seq_len + 1;
    if corpus.len() < width {
        return Err(Error::EmptyCorpus {
            tokens: corpus.len(),
            needed: width,
        });
    }
    Ok(corpus
        .tokens
        .ids()
        .chunks_exact(width)
        .map(|c| TokenSeq { ids: c.to_vec() })
        .collect())
}

/// Split chunks into (train, held-out), keeping the last `holdout` chunks
/// for evaluation.
pub fn split_holdout(mut chunks: Vec<TokenSeq>, holdout: usize) -> Result<(Vec<TokenSeq>, Vec<TokenSeq>)> {
    if holdout >= chunks.len() {
        return Err(Error::EmptyCorpus {
            tokens: chunks.iter().map(TokenSeq::len).sum(),
            needed: (holdout + 1) * chunks.first().map_or(0, TokenSeq::len),
        });
    }
    let held = chunks.split_off(chunks.len() - holdout);
    Ok((chunks, held))
}

/// Epoch-wise shuffling sampler. Every epoch is a fresh permutation drawn
/// from the seeded generator; a batch that runs past the end of an epoch
/// continues into the next permutation.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(n_chunks: usize, seed: u64) -> Result<Self> {
        if n_chunks == 0 {
            return Err(Error::EmptyCorpus { tokens: 0, needed: 1 });
        }
        let mut s = BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n_chunks).collect(),
            cursor: 0,
            epoch: 0,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_indices(&mut self, batch_size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// A batch of `batch_size` sequences flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn from_chunks<'a>(chunks: impl IntoIterator<Item = &'a TokenSeq>) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut seq_len = None;
        let mut batch_size = 0;
        for c in chunks {
            let t = c.len().saturating_sub(1);
            if *seq_len.get_or_insert(t) != t || t == 0 {
                return Err(Error::Dimension(format!("chunk of {} tokens in a batch of {:?}", c.len(), seq_len)));
            }
            inputs.extend_from_slice(c.inputs());
            targets.extend_from_slice(c.targets());
            batch_size += 1;
        }
        let seq_len = seq_len.ok_or_else(|| Error::Dimension("empty batch".into()))?;
        Ok(Batch {
            inputs,
            targets,
            batch_size,
            seq_len,
        })
    }
}

pub fn sample_batch(chunks: &[TokenSeq], batch_size: usize, sampler: &mut BatchSampler) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let idx = sampler.next_indices(batch_size);
    Batch::from_chunks(idx.iter().map(|&i| &chunks[i]))
}

const NOUNS: &[&str] = &[
    "river", "house", "garden", "letter", "window", "captain", "village", "morning", "stone", "horse",
    "child", "mother", "road", "ship", "king", "forest", "door", "lamp", "city", "winter", "friend",
    "table", "voice", "field", "bird", "mountain", "book", "night", "sea", "bridge", "tower", "market",
];
const VERBS: &[&str] = &[
    "saw", "found", "carried", "opened", "followed", "remembered", "left", "heard", "built", "watched",
    "crossed", "kept", "loved", "answered", "painted", "closed", "called", "lost", "wrote", "reached",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "bright", "small", "dark", "long", "cold", "green", "broken", "early", "gentle",
    "strange", "heavy", "golden", "empty", "narrow",
];
const NAMES: &[&str] = &["Anna", "Thomas", "Marguerite", "Elias", "Rosa", "Henry", "Clara", "Jonah"];
const LINKS: &[&str] = &["and", "but", "while", "because", "so", "when", "after", "until"];
const PLACES: &[&str] = &["by the", "near the", "across the", "under the", "beyond the", "inside the"];

/// Deterministic English-like prose: paragraphs of short sentences drawn
/// from a small grammar with Zipf-skewed word choice. Used where no text
/// file is supplied.
pub fn synthetic_text(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 256);
    // Zipf-ish: index i drawn with weight 1/(i+1)
    fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
        let total: f64 = (1..=words.len()).map(|i| 1.0 / i as f64).sum();
        let mut u = rng.random::<f64>() * total;
        for (i, w) in words.iter().enumerate() {
            u -= 1.0 / (i + 1) as f64;
            if u <= 0.0 {
                return w;
            }
        }
        words[words.len() - 1]
    }
    let mut chapter = 1;
    while out.len() < n_bytes {
        if rng.random_bool(0.02) {
            out.push_str(&format!("CHAPTER {chapter}.\n\n"));
            chapter += 1;
        }
        let sentences = rng.random_range(2..7);
        for s in 0..sentences {
            let mut sentence = String::new();
            if rng.random_bool(0.3) {
                sentence.push_str(pick(&mut rng, NAMES));
            } else {
                sentence.push_str("The ");
                if rng.random_bool(0.5) {
                    sentence.push_str(pick(&mut rng, ADJECTIVES));
                    sentence.push(' ');
                }
                sentence.push_str(pick(&mut rng, NOUNS));
            }
            sentence.push(' ');
            sentence.push_str(pick(&mut rng, VERBS));
            sentence.push_str(" the ");
            sentence.push_str(pick(&mut rng, NOUNS));
            if rng.random_bool(0.4) {
                sentence.push(' ');
                sentence.push_str(pick(&mut rng, PLACES));
                sentence.push(' ');
                sentence.push_str(pick(&mut rng, NOUNS));
            }
            if rng.random_bool(0.3) {
                sentence.push_str(", ");
                sentence.push_str(pick(&mut rng, LINKS));
                sentence.push_str(" the ");
                sentence.push_str(pick(&mut rng, NOUNS));
                sentence.push(' ');
                sentence.push_str(pick(&mut rng, VERBS));
                sentence.push_str(" it");
            }
            sentence.push(if rng.random_bool(0.1) { '?' } else { '.' });
            if rng.random_bool(0.15) {
                out.push('"');
                out.push_str(&sentence);
                out.push('"');
            } else {
                out.push_str(&sentence);
            }
            if s + 1 < sentences {
                out.push(' ');
            }
        }
        out.push_str("\n\n");
    }
    out.truncate(n_bytes);
    out.into_bytes()
}
