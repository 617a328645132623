//! Byte-level corpora: every byte is a token, vocabulary size 256.

use std::path::Path;

use rand::Rng;

use crate::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    tokens: Vec<u8>,
    split: usize,
}

impl Corpus {
    /// Splits at `floor(len · train_fraction)`; both sides must be non-empty.
    pub fn from_bytes(tokens: Vec<u8>, train_fraction: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split fraction {train_fraction} must lie strictly between 0 and 1"
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Config("corpus is empty".into()));
        }
        let split = (tokens.len() as f64 * train_fraction).floor() as usize;
        if split == 0 || split == tokens.len() {
            return Err(Error::Config(format!(
                "corpus of {} bytes is too small to split at {train_fraction}",
                tokens.len()
            )));
        }
        Ok(Corpus { tokens, split })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn train(&self) -> &[u8] {
        &self.tokens[..self.split]
    }

    pub fn val(&self) -> &[u8] {
        &self.tokens[self.split..]
    }
}

pub fn load_corpus(path: impl AsRef<Path>, train_fraction: f64) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "corpus file is empty"),
        ));
    }
    Corpus::from_bytes(bytes, train_fraction)
}

/// A batch of next-token windows: `inputs[i]` predicts `targets[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
}

/// Uniformly placed contiguous windows of `seq_len + 1` bytes.
pub fn sample_batch<R: Rng>(
    split: &[u8],
    batch: usize,
    seq_len: usize,
    rng: &mut R,
) -> Result<Batch> {
    if split.len() < seq_len + 1 {
        return Err(Error::Config(format!(
            "split of {} bytes is shorter than one window of {}",
            split.len(),
            seq_len + 1
        )));
    }
    let max_start = split.len() - seq_len - 1;
    let mut inputs = Vec::with_capacity(batch * seq_len);
    let mut targets = Vec::with_capacity(batch * seq_len);
    for _ in 0..batch {
        let s = rng.random_range(0..=max_start);
        inputs.extend(split[s..s + seq_len].iter().map(|&b| b as usize));
        targets.extend(split[s + 1..s + seq_len + 1].iter().map(|&b| b as usize));
    }
    Ok(Batch {
        inputs,
        targets,
        batch,
    })
}

/// Non-overlapping evaluation windows covering every next-token pair of
/// `split` once: full windows of `seq_len` predictions grouped `batch` at a
/// time, then one shorter window for the tail.
pub fn eval_windows(split: &[u8], seq_len: usize, batch: usize) -> Vec<Batch> {
    let pairs = split.len().saturating_sub(1);
    let full = pairs / seq_len;
    let mut out = Vec::new();
    let mut w = 0;
    while w < full {
        let n = batch.min(full - w);
        let mut b = Batch {
            inputs: Vec::with_capacity(n * seq_len),
            targets: Vec::with_capacity(n * seq_len),
            batch: n,
        };
        for i in w..w + n {
            let s = i * seq_len;
            b.inputs
                .extend(split[s..s + seq_len].iter().map(|&x| x as usize));
            b.targets
                .extend(split[s + 1..s + seq_len + 1].iter().map(|&x| x as usize));
        }
        out.push(b);
        w += n;
    }
    let rest = pairs - full * seq_len;
    if rest > 0 {
        let s = full * seq_len;
        out.push(Batch {
            inputs: split[s..s + rest].iter().map(|&x| x as usize).collect(),
            targets: split[s + 1..s + rest + 1]
                .iter()
                .map(|&x| x as usize)
                .collect(),
            batch: 1,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn floor_split() {
        let c = Corpus::from_bytes(b"abc".to_vec(), 2.0 / 3.0).unwrap();
        assert_eq!(c.train(), &[97, 98]);
        assert_eq!(c.val(), &[99]);
    }

    #[test]
    fn empty_file_is_an_io_error() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(load_corpus(f.path(), 0.9), Err(Error::Io { .. })));
        assert!(matches!(
            load_corpus("/nonexistent/corpus.txt", 0.9),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn bad_fractions() {
        assert!(Corpus::from_bytes(b"abcd".to_vec(), 0.0).is_err());
        assert!(Corpus::from_bytes(b"abcd".to_vec(), 1.0).is_err());
        assert!(Corpus::from_bytes(b"ab".to_vec(), 0.1).is_err());
    }

    #[test]
    fn batches_are_shifted_windows() {
        let data: Vec<u8> = (0..200u8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_batch(&data, 3, 8, &mut rng).unwrap();
        assert_eq!(b.inputs.len(), 24);
        for (x, y) in b.inputs.iter().zip(&b.targets) {
            assert_eq!(x + 1, *y);
        }
        assert!(sample_batch(&data[..8], 1, 8, &mut rng).is_err());
    }

    #[test]
    fn eval_windows_cover_every_pair_once() {
        let data: Vec<u8> = (0..=100u8).collect();
        let ws = eval_windows(&data, 7, 4);
        let pairs: Vec<(usize, usize)> = ws
            .iter()
            .flat_map(|b| b.inputs.iter().copied().zip(b.targets.iter().copied()))
            .collect();
        assert_eq!(pairs.len(), 100);
        assert!(pairs
            .iter()
            .enumerate()
            .all(|(i, &(x, y))| x == i && y == i + 1));
        assert_eq!(ws.last().unwrap().inputs.len(), 100 % 7);
    }
}
