//! Autoregressive inference: batched greedy search and beam search with the
//! GNMT length penalty `((5 + |Y|) / 6)^α`.

use super::forward::{DropoutMode, Forward};
use super::Transformer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tasks::{BOS, EOS, PAD};

/// Log-softmax of one logit row, evaluated in the model's scalar type.
fn log_probs<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let log_z = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&x| (x - log_z).as_f64()).collect()
}

/// First index of the maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5 + len) as f64 / 6.0).powf(alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens, without BOS or EOS.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / length_penalty(len, α)`, with `len` counting EOS when finished.
    pub score: f64,
    pub finished: bool,
}

/// Beam search over an arbitrary next-token model.
///
/// `step` receives the live prefixes (generated tokens only) and returns one
/// log-probability row per prefix. At most `max_len` tokens are generated,
/// EOS included. Beam search is inexact: the returned hypothesis is the best
/// finished one found, not necessarily the global optimum.
pub fn beam_search<F>(beam_size: usize, alpha: f64, max_len: usize, mut step: F) -> Result<BeamHypothesis>
where
    F: FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>>,
{
    if beam_size == 0 {
        return Err(Error::config("beam size must be at least 1"));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(p, _)| p.clone()).collect();
        let rows = step(&prefixes)?;
        if rows.len() != live.len() {
            return Err(Error::contract("beam step returned the wrong number of rows"));
        }
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (h, row) in rows.iter().enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                candidates.push((live[h].1 + lp, h, tok));
            }
        }
        // stable: ties keep (hypothesis, token) order
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::with_capacity(beam_size);
        for (rank, &(lp, h, tok)) in candidates.iter().enumerate() {
            if next.len() == beam_size && rank >= beam_size {
                break;
            }
            if tok == EOS {
                if rank < beam_size {
                    let tokens = live[h].0.clone();
                    let score = lp / length_penalty(tokens.len() + 1, alpha);
                    finished.push(BeamHypothesis {
                        tokens,
                        log_prob: lp,
                        score,
                        finished: true,
                    });
                }
            } else if next.len() < beam_size {
                let mut tokens = live[h].0.clone();
                tokens.push(tok);
                next.push((tokens, lp));
            }
        }
        live = next;
        if finished.len() >= beam_size || live.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() {
        live.into_iter()
            .map(|(tokens, lp)| BeamHypothesis {
                score: lp / length_penalty(tokens.len(), alpha),
                tokens,
                log_prob: lp,
                finished: false,
            })
            .collect()
    } else {
        finished
    };
    pool.into_iter()
        .reduce(|best, h| if h.score > best.score { h } else { best })
        .ok_or_else(|| Error::contract("beam search produced no hypothesis"))
}

impl<T: Scalar> Transformer<T> {
    /// Greedy argmax decoding of a batch of sources. Each output has at most
    /// `max_len` tokens (EOS counts toward the limit and is stripped).
    pub fn greedy_decode(&self, sources: &[&[usize]], max_len: usize) -> Result<Vec<Vec<usize>>> {
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        let max_len = max_len.min(self.config().max_len);
        let batch = sources.len();
        let src_len = sources.iter().map(|s| s.len()).max().unwrap();
        let mut src = vec![PAD; batch * src_len];
        let mut src_pad = vec![true; batch * src_len];
        for (r, s) in sources.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Input(format!("empty source at position {r}")));
            }
            src[r * src_len..r * src_len + s.len()].copy_from_slice(s);
            src_pad[r * src_len..r * src_len + s.len()].fill(false);
        }
        let mut fwd = Forward::new(self, false);
        let memory = fwd.encode_tokens(&src, &src_pad, batch, src_len, &mut DropoutMode::Off)?;
        let mark = fwd.tape.len();
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; batch];
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); batch];
        let mut done = vec![false; batch];
        let vocab = self.config().tgt_vocab;
        for step in 0..max_len {
            let len = step + 1;
            let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
            let emb = fwd.embed_target(&ids, batch, len)?;
            let logits = fwd.decode_embedded(emb, memory, &src_pad, &mut DropoutMode::Off, false)?;
            let lv = fwd.tape.value(logits).data();
            for r in 0..batch {
                let next = if done[r] {
                    PAD
                } else {
                    let base = (r * len + step) * vocab;
                    let tok = argmax(&log_probs(&lv[base..base + vocab]));
                    if tok == EOS {
                        done[r] = true;
                    } else {
                        outputs[r].push(tok);
                    }
                    tok
                };
                prefixes[r].push(next);
            }
            fwd.truncate(mark);
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(outputs)
    }

    /// Beam search for one source sentence.
    pub fn beam_decode(
        &self,
        source: &[usize],
        beam_size: usize,
        alpha: f64,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        Ok(self.beam_decode_hypothesis(source, beam_size, alpha, max_len)?.tokens)
    }

    pub fn beam_decode_hypothesis(
        &self,
        source: &[usize],
        beam_size: usize,
        alpha: f64,
        max_len: usize,
    ) -> Result<BeamHypothesis> {
        if beam_size == 0 {
            return Err(Error::config("beam size must be at least 1"));
        }
        if source.is_empty() {
            return Err(Error::Input("empty source".into()));
        }
        let max_len = max_len.min(self.config().max_len);
        let rows = beam_size;
        let src: Vec<usize> = (0..rows).flat_map(|_| source.iter().copied()).collect();
        let src_pad = vec![false; src.len()];
        let mut fwd = Forward::new(self, false);
        let memory = fwd.encode_tokens(&src, &src_pad, rows, source.len(), &mut DropoutMode::Off)?;
        let mark = fwd.tape.len();
        let vocab = self.config().tgt_vocab;
        beam_search(beam_size, alpha, max_len, |prefixes| {
            let len = prefixes[0].len() + 1;
            let mut ids = Vec::with_capacity(rows * len);
            for r in 0..rows {
                let p = prefixes.get(r).unwrap_or(&prefixes[0]);
                ids.push(BOS);
                ids.extend_from_slice(p);
            }
            let emb = fwd.embed_target(&ids, rows, len)?;
            let logits = fwd.decode_embedded(emb, memory, &src_pad, &mut DropoutMode::Off, false)?;
            let lv = fwd.tape.value(logits).data();
            let out = (0..prefixes.len())
                .map(|r| {
                    let base = (r * len + len - 1) * vocab;
                    log_probs(&lv[base..base + vocab])
                })
                .collect();
            fwd.truncate(mark);
            Ok(out)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: usize = 3;
    const B: usize = 4;

    /// Next-token distribution over {EOS, A, B} (ids 1, 3, 4) in a 5-token vocab.
    fn toy(prefix: &[usize]) -> Vec<f64> {
        let mut p = [0.0; 5];
        match prefix {
            [] => {
                p[A] = 0.6;
                p[B] = 0.4;
            }
            [A] => {
                p[A] = 0.35;
                p[B] = 0.35;
                p[EOS] = 0.3;
            }
            [B] => {
                p[A] = 0.9;
                p[B] = 0.05;
                p[EOS] = 0.05;
            }
            _ => p[EOS] = 1.0,
        }
        p.iter().map(|x: &f64| x.ln()).collect()
    }

    fn exhaustive(alpha: f64, max_len: usize) -> (Vec<usize>, f64) {
        fn walk(prefix: &mut Vec<usize>, lp: f64, alpha: f64, left: usize, best: &mut (Vec<usize>, f64)) {
            if left == 0 {
                return;
            }
            for (tok, &l) in toy(prefix).iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                if tok == EOS {
                    let score = (lp + l) / length_penalty(prefix.len() + 1, alpha);
                    if score > best.1 {
                        *best = (prefix.clone(), score);
                    }
                } else {
                    prefix.push(tok);
                    walk(prefix, lp + l, alpha, left - 1, best);
                    prefix.pop();
                }
            }
        }
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        walk(&mut Vec::new(), 0.0, alpha, max_len, &mut best);
        best
    }

    fn run(beam: usize, alpha: f64) -> BeamHypothesis {
        beam_search(beam, alpha, 5, |ps| Ok(ps.iter().map(|p| toy(p)).collect())).unwrap()
    }

    #[test]
    fn beam_recovers_optimum_greedy_misses() {
        let greedy = run(1, 0.0);
        assert_eq!(greedy.tokens, vec![A, A]);
        let (best, score) = exhaustive(0.0, 5);
        assert_eq!(best, vec![B, A]);
        let beam = run(2, 0.0);
        assert_eq!(beam.tokens, best);
        assert!((beam.score - score).abs() < 1e-12);
        assert!(beam.score > greedy.score);
    }

    #[test]
    fn beam_with_length_penalty_matches_exhaustive_here() {
        let (best, score) = exhaustive(0.6, 5);
        let beam = run(3, 0.6);
        assert_eq!(beam.tokens, best);
        assert!((beam.score - score).abs() < 1e-12);
    }

    #[test]
    fn zero_beam_is_config_error() {
        let r = beam_search(0, 0.6, 5, |ps| Ok(ps.iter().map(|p| toy(p)).collect()));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn penalty_values() {
        assert_eq!(length_penalty(1, 0.6), 1.0);
        assert!((length_penalty(7, 0.6) - 2f64.powf(0.6)).abs() < 1e-15);
        assert_eq!(length_penalty(30, 0.0), 1.0);
    }
}
