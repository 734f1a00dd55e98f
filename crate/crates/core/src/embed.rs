//! Text embedding providers for dense channels.
//!
//! The model consumes precomputed document vectors. [`FileEmbeddings`] reads
//! vectors produced by an external encoder; [`HashingEmbedder`] is a
//! deterministic fallback so the pipeline runs without one.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_D_EM: usize = 768;

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Embed a non-empty document.
    fn embed_document(&self, document: &str) -> Result<Vec<f64>>;
}

/// Embed `document`; the empty document maps to the zero vector.
pub fn embed_text(document: &str, provider: &dyn EmbeddingProvider) -> Result<Vec<f64>> {
    if document.trim().is_empty() {
        return Ok(vec![0.0; provider.dim()]);
    }
    provider.embed_document(document)
}

/// Lookup key for a document in an embedding file: hex SHA-256 of its UTF-8 bytes.
pub fn document_key(document: &str) -> String {
    let digest = Sha256::digest(document.as_bytes());
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Seeded signed feature hashing: each lowercased whitespace token maps to a
/// pseudo-random ±1 vector; a document is the scaled sum of its tokens.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    d_em: usize,
    seed: u64,
}

impl HashingEmbedder {
    pub fn new(d_em: usize, seed: u64) -> Self {
        HashingEmbedder { d_em, seed }
    }

    fn token_rng(&self, token: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn dim(&self) -> usize {
        self.d_em
    }

    fn embed_document(&self, document: &str) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.d_em];
        let mut n = 0usize;
        for token in document.split_whitespace() {
            let token = token.to_lowercase();
            let mut rng = self.token_rng(&token);
            let mut bits = 0u64;
            for (i, o) in out.iter_mut().enumerate() {
                if i % 64 == 0 {
                    bits = rng.next_u64();
                }
                *o += if bits & 1 == 1 { 1.0 } else { -1.0 };
                bits >>= 1;
            }
            n += 1;
        }
        if n > 0 {
            let scale = 1.0 / ((n * self.d_em) as f64).sqrt();
            out.iter_mut().for_each(|x| *x *= scale);
        }
        Ok(out)
    }
}

/// Precomputed vectors keyed by [`document_key`].
///
/// File layout: a header line `d_em=<n>`, then one line per document:
/// `<key> <f_1> ... <f_n>`.
#[derive(Debug, Clone, Default)]
pub struct FileEmbeddings {
    d_em: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl FileEmbeddings {
    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing d_em header".into(),
        })?;
        let header = header.map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let d_em: usize = header
            .trim()
            .strip_prefix("d_em=")
            .and_then(|n| n.parse().ok())
            .ok_or(Error::Parse {
                line: 1,
                message: format!("bad header {header:?}, expected d_em=<n>"),
            })?;
        let mut vectors = HashMap::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            let mut fields = line.split_whitespace();
            let Some(key) = fields.next() else { continue };
            let v: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
            let v = v.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if v.len() != d_em {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("{} values, expected {d_em}", v.len()),
                });
            }
            vectors.insert(key.to_string(), v);
        }
        Ok(FileEmbeddings { d_em, vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl EmbeddingProvider for FileEmbeddings {
    fn dim(&self) -> usize {
        self.d_em
    }

    fn embed_document(&self, document: &str) -> Result<Vec<f64>> {
        let key = document_key(document);
        self.vectors.get(&key).cloned().ok_or(Error::Lookup(key))
    }
}
