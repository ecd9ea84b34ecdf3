//! Deterministic batching of a byte corpus with document segment ids.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Byte that separates documents in a corpus.
pub const DOC_DELIMITER: u8 = 0x00;

/// `batch` rows of `len` positions, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub len: usize,
    pub inputs: Vec<u32>,
    /// Byte following each input position.
    pub targets: Vec<u32>,
    /// Document index per position, starting at 0 in every row.
    pub segments: Vec<u32>,
}

impl Batch {
    pub fn row(&self, r: usize) -> &[u32] {
        &self.inputs[r * self.len..(r + 1) * self.len]
    }

    pub fn row_segments(&self, r: usize) -> &[u32] {
        &self.segments[r * self.len..(r + 1) * self.len]
    }
}

/// Samples windows of a corpus at seeded offsets; batch `k` depends only on
/// `(seed, k)`.
#[derive(Clone, Debug)]
pub struct Batcher {
    bytes: Vec<u8>,
    /// Number of delimiters strictly before each byte.
    docs: Vec<u32>,
    batch: usize,
    len: usize,
    seed: u64,
}

impl Batcher {
    /// `chunk`, when given, must divide `len`.
    pub fn new(bytes: Vec<u8>, batch: usize, len: usize, chunk: Option<usize>, seed: u64) -> Result<Self> {
        Self::with_delimiter(bytes, batch, len, chunk, seed, Some(DOC_DELIMITER))
    }

    pub fn with_delimiter(
        bytes: Vec<u8>,
        batch: usize,
        len: usize,
        chunk: Option<usize>,
        seed: u64,
        delimiter: Option<u8>,
    ) -> Result<Self> {
        if batch == 0 || len == 0 {
            return Err(Error::Config("batch size and length must be positive".into()));
        }
        if let Some(c) = chunk {
            if c == 0 || !len.is_multiple_of(c) {
                return Err(Error::Config(format!("chunk size {c} must divide sequence length {len}")));
            }
        }
        if bytes.len() <= len {
            return Err(Error::Config(format!(
                "corpus of {} bytes is too short for windows of {} + 1",
                bytes.len(),
                len
            )));
        }
        let mut docs = Vec::with_capacity(bytes.len());
        let mut count = 0u32;
        for &b in &bytes {
            docs.push(count);
            if Some(b) == delimiter {
                count += 1;
            }
        }
        Ok(Self {
            bytes,
            docs,
            batch,
            len,
            seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn corpus(&self) -> &[u8] {
        &self.bytes
    }

    /// The `step`-th batch.
    pub fn batch(&self, step: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        let starts: Vec<usize> = (0..self.batch)
            .map(|_| rng.random_range(0..self.bytes.len() - self.len))
            .collect();
        self.windows(&starts)
    }

    /// Rows starting at the given byte offsets.
    pub fn windows(&self, starts: &[usize]) -> Batch {
        let n = starts.len() * self.len;
        let (mut inputs, mut targets, mut segments) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for &s in starts {
            let window = &self.bytes[s..s + self.len + 1];
            inputs.extend(window[..self.len].iter().map(|&b| u32::from(b)));
            targets.extend(window[1..].iter().map(|&b| u32::from(b)));
            let first = self.docs[s];
            segments.extend(self.docs[s..s + self.len].iter().map(|d| d - first));
        }
        Batch {
            batch: starts.len(),
            len: self.len,
            inputs,
            targets,
            segments,
        }
    }

    /// Infinite stream of batches `0, 1, 2, ..`.
    pub fn iter(&self) -> impl Iterator<Item = Batch> + '_ {
        (0u64..).map(|k| self.batch(k))
    }
}

/// Splits off the trailing `fraction` of a corpus as held-out data.
pub fn split_holdout(bytes: &[u8], fraction: f64) -> (&[u8], &[u8]) {
    let held = ((bytes.len() as f64) * fraction.clamp(0.0, 1.0)) as usize;
    bytes.split_at(bytes.len() - held)
}
