use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absorbs representation error in products like `0.1 * 10`.
const FLOOR_SLACK: f64 = 1e-9;

pub const MIN_CLASS_SIZE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = Self { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p))
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::InvalidArgument(format!(
                "split fractions must lie in [0, 1] and sum to 1, got {self}"
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    /// `(train, val, test)` counts for a class of `n` samples.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let test = (self.test * n as f64 + FLOOR_SLACK).floor() as usize;
        let val = (self.val * n as f64 + FLOOR_SLACK).floor() as usize;
        (n - test - val, val, test)
    }
}

impl fmt::Display for SplitFractions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.train, self.val, self.test)
    }
}

impl std::str::FromStr for SplitFractions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad split `{s}`: {e}")))?;
        match parts[..] {
            [train, val, test] => Self::new(train, val, test),
            _ => Err(Error::InvalidArgument(format!(
                "split needs three comma-separated fractions, got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split `{s}`; use train, val or test"
            ))),
        }
    }
}

/// Disjoint index lists, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn subset(&self, s: Subset) -> &[usize] {
        match s {
            Subset::Train => &self.train,
            Subset::Val => &self.val,
            Subset::Test => &self.test,
        }
    }

    /// Subset of every index in `0..n`.
    pub fn membership(&self, n: usize) -> Vec<Option<Subset>> {
        let mut out = vec![None; n];
        for s in [Subset::Train, Subset::Val, Subset::Test] {
            for &i in self.subset(s) {
                out[i] = Some(s);
            }
        }
        out
    }
}

/// Per class: shuffle with the seed, give `floor(test * n)` to test,
/// `floor(val * n)` to val and the remainder to train.
pub fn stratified_split(
    labels: &[usize],
    classes: usize,
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitAssignment> {
    fractions.validate()?;
    let mut per_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class
            .get_mut(l)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("label {l} out of range for {classes} classes"))
            })?
            .push(i);
    }
    let mut out = SplitAssignment {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (c, mut idx) in per_class.into_iter().enumerate() {
        if idx.len() < MIN_CLASS_SIZE {
            return Err(Error::Dataset(format!(
                "class {c} has {} samples; a stratified split needs at least {MIN_CLASS_SIZE}",
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        idx.shuffle(&mut rng);
        let (_, val, test) = fractions.counts(idx.len());
        out.test.extend_from_slice(&idx[..test]);
        out.val.extend_from_slice(&idx[test..test + val]);
        out.train.extend_from_slice(&idx[test + val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Writes `path<TAB>split` lines in index order.
pub fn write_split_audit(path: &Path, items: &[PathBuf], split: &SplitAssignment) -> Result<()> {
    let mut text = Vec::new();
    for (p, s) in items.iter().zip(split.membership(items.len())) {
        if let Some(s) = s {
            writeln!(text, "{}\t{}", p.display(), s.as_str()).expect("write to memory");
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
