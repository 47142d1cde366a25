//! Synthetic translation tasks, datasets on disk, and padded batches.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
/// Number of reserved ids; content tokens are `RESERVED..vocab_size`.
pub const RESERVED: usize = 3;

pub fn is_reserved(token: usize) -> bool {
    token < RESERVED
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskVariant {
    Copy,
    Reverse,
    /// Token-wise substitution through a fixed random permutation.
    LexiconMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub variant: TaskVariant,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    /// Seeds the three splits (ChaCha8 streams 0, 1, 2).
    pub seed: u64,
    pub permutation_seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            variant: TaskVariant::Reverse,
            vocab_size: 32,
            min_len: 5,
            max_len: 20,
            train_size: 10_000,
            valid_size: 1_000,
            test_size: 1_000,
            seed: 2021,
            permutation_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub pairs: Vec<Pair>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED {
            return Err(Error::config(format!(
                "task.vocab_size {} must exceed the {RESERVED} reserved tokens",
                self.vocab_size
            )));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "task length range [{}, {}] is invalid (need 1 <= min_len <= max_len)",
                self.min_len, self.max_len
            )));
        }
        if self.train_size == 0 {
            return Err(Error::config("task.train_size must be positive"));
        }
        Ok(())
    }

    /// Token map used by [`TaskVariant::LexiconMap`]; reserved ids map to themselves.
    pub fn permutation(&self) -> Vec<usize> {
        let mut content: Vec<usize> = (RESERVED..self.vocab_size).collect();
        content.shuffle(&mut ChaCha8Rng::seed_from_u64(self.permutation_seed));
        (0..RESERVED).chain(content).collect()
    }

    pub fn target_for(&self, src: &[usize]) -> Vec<usize> {
        match self.variant {
            TaskVariant::Copy => src.to_vec(),
            TaskVariant::Reverse => src.iter().rev().copied().collect(),
            TaskVariant::LexiconMap => {
                let perm = self.permutation();
                src.iter().map(|&t| perm[t]).collect()
            }
        }
    }

    fn sample_source(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.gen_range(self.min_len..=self.max_len);
        (0..len)
            .map(|_| rng.gen_range(RESERVED..self.vocab_size))
            .collect()
    }

    /// Generates train/valid/test. Valid and test sources never occur in an
    /// earlier split.
    pub fn generate(&self) -> Result<Splits> {
        self.validate()?;
        let perm = self.permutation();
        let make = |src: Vec<usize>| {
            let tgt = match self.variant {
                TaskVariant::Copy => src.clone(),
                TaskVariant::Reverse => src.iter().rev().copied().collect(),
                TaskVariant::LexiconMap => src.iter().map(|&t| perm[t]).collect(),
            };
            Pair { src, tgt }
        };
        let mut seen: HashSet<Vec<usize>> = HashSet::new();
        let mut splits = Vec::with_capacity(3);
        for (stream, size, exclusive) in [
            (0, self.train_size, false),
            (1, self.valid_size, true),
            (2, self.test_size, true),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(stream);
            let mut pairs = Vec::with_capacity(size);
            let mut fresh = Vec::new();
            let mut attempts = 0usize;
            while pairs.len() < size {
                attempts += 1;
                if attempts > 100 * size + 1000 {
                    return Err(Error::config(format!(
                        "cannot draw {size} distinct held-out sentences from this vocabulary and length range"
                    )));
                }
                let src = self.sample_source(&mut rng);
                if exclusive && seen.contains(&src) {
                    continue;
                }
                fresh.push(src.clone());
                pairs.push(make(src));
            }
            seen.extend(fresh);
            splits.push(Dataset { pairs });
        }
        let test = splits.pop().unwrap();
        let valid = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Splits { train, valid, test })
    }
}

fn format_tokens(out: &mut String, tokens: &[usize]) {
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{t}").unwrap();
    }
}

fn parse_tokens(s: &str, line: usize) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|w| {
            w.parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid token id {w:?}"),
            })
        })
        .collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One `src ||| tgt` line per pair, ids separated by single spaces.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            format_tokens(&mut out, &p.src);
            out.push_str(" ||| ");
            format_tokens(&mut out, &p.tgt);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (src, tgt) = line.split_once("|||").ok_or_else(|| Error::Parse {
                line: line_no,
                message: "missing ||| separator".into(),
            })?;
            let src = parse_tokens(src, line_no)?;
            let tgt = parse_tokens(tgt, line_no)?;
            if src.is_empty() || tgt.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty side".into(),
                });
            }
            pairs.push(Pair { src, tgt });
        }
        Ok(Dataset { pairs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn max_token(&self) -> Option<usize> {
        self.pairs
            .iter()
            .flat_map(|p| p.src.iter().chain(&p.tgt))
            .copied()
            .max()
    }
}

/// Padded batch in row-major `[batch, len]` layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    /// `true` marks padding.
    pub src_pad: Vec<bool>,
    /// BOS followed by the target tokens.
    pub tgt_in: Vec<usize>,
    /// Target tokens followed by EOS.
    pub tgt_out: Vec<usize>,
    /// `true` where `tgt_out` (and thus `tgt_in`) is padding.
    pub tgt_pad: Vec<bool>,
    /// Target length including EOS.
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&Pair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.src.len()).max().unwrap();
        let tgt_len = pairs.iter().map(|p| p.tgt.len() + 1).max().unwrap();
        let mut b = Batch {
            size,
            src_len,
            tgt_len,
            src: vec![PAD; size * src_len],
            src_pad: vec![true; size * src_len],
            tgt_in: vec![PAD; size * tgt_len],
            tgt_out: vec![PAD; size * tgt_len],
            tgt_pad: vec![true; size * tgt_len],
            tgt_lens: Vec::with_capacity(size),
        };
        for (r, p) in pairs.iter().enumerate() {
            if p.src.is_empty() {
                return Err(Error::Input(format!("empty source in batch row {r}")));
            }
            for (j, &t) in p.src.iter().enumerate() {
                b.src[r * src_len + j] = t;
                b.src_pad[r * src_len + j] = false;
            }
            let base = r * tgt_len;
            b.tgt_in[base] = BOS;
            for (j, &t) in p.tgt.iter().enumerate() {
                b.tgt_in[base + j + 1] = t;
                b.tgt_out[base + j] = t;
            }
            b.tgt_out[base + p.tgt.len()] = EOS;
            for j in 0..=p.tgt.len() {
                b.tgt_pad[base + j] = false;
            }
            b.tgt_lens.push(p.tgt.len() + 1);
        }
        Ok(b)
    }

    pub fn target_tokens(&self, row: usize) -> &[usize] {
        let base = row * self.tgt_len;
        &self.tgt_out[base..base + self.tgt_lens[row] - 1]
    }

    pub fn non_pad_targets(&self) -> usize {
        self.tgt_pad.iter().filter(|&&p| !p).count()
    }
}
