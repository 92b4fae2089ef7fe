use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{GbreError, Result};
use crate::numerics::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Word to id map. Ids 0 and 1 are reserved for PAD and UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary holding the two reserved entries followed by `words`.
    /// Duplicates and reserved names in `words` are skipped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        vocab.insert(PAD_TOKEN.to_string());
        vocab.insert(UNK_TOKEN.to_string());
        for w in words {
            vocab.insert(w.into());
        }
        vocab
    }

    fn insert(&mut self, word: String) -> bool {
        if self.index.contains_key(&word) {
            return false;
        }
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        true
    }

    /// Id of `token`, falling back to its lowercase form and then UNK.
    pub fn lookup(&self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.index
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// SHA-256 over the newline-joined word list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Vocabulary plus a `len x dim` matrix of word vectors.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub vocab: Vocabulary,
    pub vectors: Tensor,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Table from explicit rows; the PAD row is zeroed and the UNK row is
    /// drawn uniformly from (-0.25, 0.25) with `seed`.
    pub fn from_words(words: Vec<(String, Vec<f64>)>, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; dim];
        data.extend((0..dim).map(|_| rng.gen_range(-0.25..0.25)));
        let mut vocab = Vocabulary::new(Vec::<String>::new());
        for (w, v) in words {
            if v.len() != dim {
                return Err(GbreError::Data(format!(
                    "vector for {w:?} has {} values, expected {dim}",
                    v.len()
                )));
            }
            if vocab.insert(w.clone()) {
                data.extend(v);
            } else {
                log::warn!("duplicate embedding for {w:?} ignored");
            }
        }
        let rows = vocab.len();
        Ok(EmbeddingTable {
            vocab,
            vectors: Tensor::matrix(rows, dim, data)?,
        })
    }

    /// Reads the text format: a `V d_w` header, then `word v1 ... v_dw`.
    pub fn load(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| GbreError::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| GbreError::Data(format!("{}: empty embeddings file", path.display())))?
            .map_err(|e| GbreError::io(path, e))?;
        let mut parts = header.split_whitespace();
        let parse_header = |p: Option<&str>| p.and_then(|s| s.parse::<usize>().ok());
        let (count, dim) = match (parse_header(parts.next()), parse_header(parts.next())) {
            (Some(v), Some(d)) if d > 0 => (v, d),
            _ => {
                return Err(GbreError::Data(format!(
                    "{}: header must be \"V d_w\", got {header:?}",
                    path.display()
                )))
            }
        };
        let mut words = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| GbreError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields.next().unwrap().to_string();
            let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
            let values = values.map_err(|_| {
                GbreError::Data(format!(
                    "{}: line {}: non-numeric value",
                    path.display(),
                    i + 2
                ))
            })?;
            words.push((word, values));
        }
        if words.len() != count {
            log::warn!(
                "{}: header announces {count} words, found {}",
                path.display(),
                words.len()
            );
        }
        Self::from_words(words, dim, seed)
    }
}
