use std::ops::Range;
use std::path::Path;

use rand::Rng;
use walkdir::WalkDir;

use crate::error::{FmError, Result};
use crate::model::SEP;

/// A byte stream with a train/test split. Documents are terminated by `SEP`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    bytes: Vec<u8>,
    train_end: usize,
}

impl Corpus {
    /// Splits `bytes` at `floor(len · train_fraction)`.
    pub fn new(bytes: Vec<u8>, train_fraction: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(FmError::Corpus("empty corpus".into()));
        }
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(FmError::Corpus(format!(
                "train fraction {train_fraction} outside (0, 1)"
            )));
        }
        let train_end = (bytes.len() as f64 * train_fraction).floor() as usize;
        let c = Self { bytes, train_end };
        assert!(
            c.train_range().end <= c.test_range().start,
            "train and test ranges overlap"
        );
        Ok(c)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn train_range(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn test_range(&self) -> Range<usize> {
        self.train_end..self.bytes.len()
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[self.train_range()]
    }

    pub fn test(&self) -> &[u8] {
        &self.bytes[self.test_range()]
    }

    /// A batch of random `len`-token windows from the training split.
    pub fn sample_train<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize, len: usize) -> Result<Vec<Vec<u32>>> {
        let train = self.train();
        if train.len() < len {
            return Err(FmError::Corpus(format!(
                "training split has {} bytes, need at least {len}",
                train.len()
            )));
        }
        let hi = train.len() - len;
        Ok((0..batch)
            .map(|_| {
                let start = rng.random_range(0..=hi);
                tokens(&train[start..start + len])
            })
            .collect())
    }

    /// `n` evenly spaced `len`-token windows from the test split; the same
    /// every time, so test losses are comparable across runs.
    pub fn test_windows(&self, n: usize, len: usize) -> Result<Vec<Vec<u32>>> {
        let test = self.test();
        if test.len() < len {
            return Err(FmError::Corpus(format!(
                "test split has {} bytes, need at least {len}",
                test.len()
            )));
        }
        let hi = test.len() - len;
        Ok((0..n)
            .map(|i| {
                let start = if n > 1 { hi * i / (n - 1) } else { 0 };
                tokens(&test[start..start + len])
            })
            .collect())
    }

    /// Test-split documents, split on `SEP` (which stays at each document end).
    /// The first piece may be the tail of a document that straddles the split.
    pub fn test_documents(&self) -> Vec<Vec<u32>> {
        self.test()
            .split_inclusive(|&b| b == SEP)
            .filter(|d| !d.is_empty())
            .map(tokens)
            .collect()
    }
}

pub fn tokens(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

/// Reads a file, or every file under a directory in sorted path order, and
/// joins them with a trailing `SEP` after each.
pub fn ingest(path: &Path) -> Result<Vec<u8>> {
    let mut files = Vec::new();
    if path.is_file() {
        files.push(path.to_path_buf());
    } else if path.is_dir() {
        for entry in WalkDir::new(path).sort_by_file_name() {
            let entry = entry.map_err(|e| FmError::Corpus(e.to_string()))?;
            if entry.file_type().is_file() {
                files.push(entry.into_path());
            }
        }
    } else {
        return Err(FmError::Corpus(format!(
            "{} is not a file or directory",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for f in &files {
        let bytes = std::fs::read(f)?;
        if bytes.is_empty() {
            continue;
        }
        out.extend_from_slice(&bytes);
        out.push(SEP);
    }
    if out.is_empty() {
        return Err(FmError::Corpus(format!("no bytes found under {}", path.display())));
    }
    Ok(out)
}
