//! Token accuracy, exact-sequence accuracy and corpus BLEU, overall and per
//! source-length bucket.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tasks::Dataset;
use crate::Transformer;

/// Corpus-level BLEU over token ids with n-grams up to `max_ngram`, no
/// smoothing. Returns a value in `[0, 1]`.
pub fn corpus_bleu_n(candidates: &[Vec<usize>], references: &[Vec<usize>], max_ngram: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Input("BLEU of an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Input(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_ngram == 0 {
        return Err(Error::config("max_ngram must be at least 1"));
    }
    let mut matched = vec![0usize; max_ngram];
    let mut total = vec![0usize; max_ngram];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_ngram {
            if c.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[usize], usize> = HashMap::new();
            for g in r.windows(n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut cand_counts: HashMap<&[usize], usize> = HashMap::new();
            for g in c.windows(n) {
                *cand_counts.entry(g).or_default() += 1;
            }
            total[n - 1] += c.len() + 1 - n;
            matched[n - 1] += cand_counts
                .iter()
                .map(|(g, &k)| k.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_ngram as f64;
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

pub fn corpus_bleu(candidates: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    corpus_bleu_n(candidates, references, 4)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecodeMode {
    Greedy,
    Beam { beam_size: usize, length_penalty: f64 },
}

impl DecodeMode {
    pub const FINAL: DecodeMode = DecodeMode::Beam {
        beam_size: 4,
        length_penalty: 0.6,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub count: usize,
    /// Mean over sentences of the fraction of reference positions matched.
    pub token_acc: f64,
    pub seq_acc: f64,
    /// Corpus BLEU ×100.
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    /// Inclusive source-length range.
    pub min_len: usize,
    pub max_len: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Scores,
    pub buckets: Vec<BucketReport>,
}

fn token_accuracy(hyp: &[usize], reference: &[usize]) -> f64 {
    if reference.is_empty() {
        return if hyp.is_empty() { 1.0 } else { 0.0 };
    }
    let hits = hyp.iter().zip(reference).filter(|(a, b)| a == b).count();
    hits as f64 / reference.len() as f64
}

/// Scores hypotheses against references. An empty corpus scores zero.
pub fn score(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<Scores> {
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Ok(Scores {
            count: 0,
            token_acc: 0.0,
            seq_acc: 0.0,
            bleu: 0.0,
        });
    }
    let n = hyps.len() as f64;
    Ok(Scores {
        count: hyps.len(),
        token_acc: hyps.iter().zip(refs).map(|(h, r)| token_accuracy(h, r)).sum::<f64>() / n,
        seq_acc: hyps.iter().zip(refs).filter(|(h, r)| h == r).count() as f64 / n,
        bleu: 100.0 * corpus_bleu(hyps, refs)?,
    })
}

/// Four buckets of width `ceil((max - min) / 4)` (at least 1) starting at
/// `min`; lengths past the last bucket fall into it.
pub fn length_buckets(min_len: usize, max_len: usize) -> Vec<(usize, usize)> {
    let width = max_len.saturating_sub(min_len).div_ceil(4).max(1);
    let mut out = Vec::new();
    let mut lo = min_len;
    while lo <= max_len {
        out.push((lo, (lo + width - 1).min(max_len)));
        lo += width;
    }
    out
}

/// Full report with buckets over the source lengths `[min_len, max_len]`.
pub fn report(
    sources: &[&[usize]],
    hyps: &[Vec<usize>],
    refs: &[Vec<usize>],
    min_len: usize,
    max_len: usize,
) -> Result<EvalReport> {
    let overall = score(hyps, refs)?;
    let buckets = length_buckets(min_len, max_len);
    let last = buckets.len() - 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); buckets.len()];
    for (i, s) in sources.iter().enumerate() {
        let b = buckets
            .iter()
            .position(|&(lo, hi)| s.len() >= lo && s.len() <= hi)
            .unwrap_or(if s.len() < min_len { 0 } else { last });
        members[b].push(i);
    }
    let buckets = buckets
        .iter()
        .zip(&members)
        .map(|(&(lo, hi), idx)| {
            let h: Vec<Vec<usize>> = idx.iter().map(|&i| hyps[i].clone()).collect();
            let r: Vec<Vec<usize>> = idx.iter().map(|&i| refs[i].clone()).collect();
            Ok(BucketReport {
                min_len: lo,
                max_len: hi,
                scores: score(&h, &r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { overall, buckets })
}

const GREEDY_CHUNK: usize = 128;

/// Decodes every source of `data` with the model.
pub fn decode_all<T: Scalar>(model: &Transformer<T>, data: &Dataset, mode: DecodeMode) -> Result<Vec<Vec<usize>>> {
    let max_len = model.config().max_len;
    match mode {
        DecodeMode::Greedy => {
            let mut out = Vec::with_capacity(data.len());
            for chunk in data.pairs.chunks(GREEDY_CHUNK) {
                let srcs: Vec<&[usize]> = chunk.iter().map(|p| p.src.as_slice()).collect();
                let limit = chunk.iter().map(|p| p.tgt.len()).max().unwrap_or(0) * 2 + 10;
                let hyps = model.greedy_decode(&srcs, limit.min(max_len))?;
                // each sentence gets its own limit, as in beam search
                out.extend(hyps.into_iter().zip(chunk).map(|(mut h, p)| {
                    h.truncate((p.tgt.len() * 2 + 10).min(max_len));
                    h
                }));
            }
            Ok(out)
        }
        DecodeMode::Beam {
            beam_size,
            length_penalty,
        } => data
            .pairs
            .iter()
            .map(|p| model.beam_decode(&p.src, beam_size, length_penalty, (p.tgt.len() * 2 + 10).min(max_len)))
            .collect(),
    }
}

/// Decodes and scores a dataset; buckets span the observed source lengths.
pub fn evaluate<T: Scalar>(model: &Transformer<T>, data: &Dataset, mode: DecodeMode) -> Result<EvalReport> {
    let min_len = data.pairs.iter().map(|p| p.src.len()).min().unwrap_or(1);
    let max_len = data.pairs.iter().map(|p| p.src.len()).max().unwrap_or(1);
    evaluate_in_range(model, data, mode, min_len, max_len)
}

pub fn evaluate_in_range<T: Scalar>(
    model: &Transformer<T>,
    data: &Dataset,
    mode: DecodeMode,
    min_len: usize,
    max_len: usize,
) -> Result<EvalReport> {
    let hyps = decode_all(model, data, mode)?;
    let refs: Vec<Vec<usize>> = data.pairs.iter().map(|p| p.tgt.clone()).collect();
    let sources: Vec<&[usize]> = data.pairs.iter().map(|p| p.src.as_slice()).collect();
    report(&sources, &hyps, &refs, min_len, max_len)
}
