//! Token corpora: raw `u32` little-endian files and synthetic generators.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn read_tokens<R: Read>(mut r: R) -> Result<Vec<usize>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() % 4 != 0 {
        return Err(Error::Format(format!("token file length {} is not a multiple of 4", buf.len())));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("chunk of 4")) as usize)
        .collect())
}

pub fn write_tokens<W: Write>(tokens: &[usize], mut w: W) -> Result<()> {
    for &t in tokens {
        let t = u32::try_from(t).map_err(|_| Error::OutOfRange(format!("token {t} exceeds u32")))?;
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_tokens(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    read_tokens(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_tokens(tokens: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tokens(tokens, &mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Uniform random tokens.
    Random,
    /// A random pattern repeated end to end.
    Periodic,
    /// Random filler with key/value pairs planted early and queried late.
    Needle,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "periodic" => Ok(Self::Periodic),
            "needle" => Ok(Self::Needle),
            other => Err(Error::Config(format!("unknown synthetic corpus {other:?} (random|periodic|needle)"))),
        }
    }
}

/// Period of [`SyntheticKind::Periodic`] corpora.
pub const PERIOD: usize = 16;

/// `n` synthetic tokens over `vocab` ids.
pub fn synthetic(kind: SyntheticKind, n: usize, vocab: usize, seed: u64) -> Result<Vec<usize>> {
    if vocab < 4 {
        return Err(Error::Config(format!("synthetic corpora need a vocabulary of at least 4, got {vocab}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match kind {
        SyntheticKind::Random => (0..n).map(|_| rng.random_range(0..vocab)).collect(),
        SyntheticKind::Periodic => {
            let pattern: Vec<usize> = (0..PERIOD).map(|_| rng.random_range(0..vocab)).collect();
            (0..n).map(|i| pattern[i % PERIOD]).collect()
        }
        SyntheticKind::Needle => {
            // The last id marks a key; filler never uses it. Each 256-token
            // block plants `marker key value` in its first quarter and asks
            // `marker key` again at its end.
            let marker = vocab - 1;
            let mut out: Vec<usize> = (0..n).map(|_| rng.random_range(0..marker)).collect();
            let block = 256.min(n);
            let mut start = 0;
            while block >= 8 && start + block <= n {
                let (key, value) = (rng.random_range(0..marker), rng.random_range(0..marker));
                let at = start + rng.random_range(0..block / 4);
                out[at..at + 3].copy_from_slice(&[marker, key, value]);
                let end = start + block - 3;
                out[end..end + 3].copy_from_slice(&[marker, key, value]);
                start += block;
            }
            out
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u32_round_trip_and_bad_length() {
        let toks = vec![0usize, 1, 65_535, 4_000_000_000];
        let mut buf = Vec::new();
        write_tokens(&toks, &mut buf).unwrap();
        assert_eq!(&buf[..8], &[0, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(read_tokens(buf.as_slice()).unwrap(), toks);
        assert!(matches!(read_tokens(&buf[..7]), Err(Error::Format(_))));
    }

    #[test]
    fn generators_are_deterministic_and_in_range() {
        for kind in [SyntheticKind::Random, SyntheticKind::Periodic, SyntheticKind::Needle] {
            let a = synthetic(kind, 600, 32, 5).unwrap();
            assert_eq!(a, synthetic(kind, 600, 32, 5).unwrap());
            assert_eq!(a.len(), 600);
            assert!(a.iter().all(|&t| t < 32));
        }
        let p = synthetic(SyntheticKind::Periodic, 64, 32, 1).unwrap();
        assert_eq!(p[..PERIOD], p[PERIOD..2 * PERIOD]);
        let nd = synthetic(SyntheticKind::Needle, 256, 32, 2).unwrap();
        assert_eq!(nd[253], 31);
        assert_eq!("needle".parse::<SyntheticKind>().unwrap(), SyntheticKind::Needle);
        assert!("zipf".parse::<SyntheticKind>().is_err());
    }
}
