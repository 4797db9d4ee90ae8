//! Greedy, beam and sampled decoding.
//!
//! Generation never emits `<pad>` or `<bos>`: both are masked out of the
//! next-token distribution. Decoding stops at `<eos>` or after
//! `max_caption_len` tokens.

use std::cmp::Ordering;

use rand::Rng;

use super::{bind, decode_on, encode_on, Checkpoint, Dropout, EncodedImage, ModelVars};
use crate::autodiff::{Tape, Var};
use crate::data::{ImageRecord, BOS, EOS, PAD};
use crate::error::Result;

/// `true` for every token that generation may produce.
pub fn generation_mask(vocab_size: usize) -> Vec<bool> {
    (0..vocab_size).map(|i| i != PAD && i != BOS).collect()
}

/// Log-softmax restricted to `mask`; excluded entries are `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| (v - max).exp())
        .sum();
    let lse = max + sum.ln();
    logits
        .iter()
        .zip(mask)
        .map(|(v, &m)| if m { v - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// Drops `<bos>`, `<pad>` and everything from the first `<eos>` on.
pub fn strip_specials(seq: &[usize]) -> Vec<usize> {
    seq.iter()
        .copied()
        .take_while(|&t| t != EOS)
        .filter(|&t| t != BOS && t != PAD)
        .collect()
}

/// Frozen parameters and one image's encoder memory on a tape; every query
/// records above a fixed mark and truncates back to it.
pub struct Session<'a> {
    ckpt: &'a Checkpoint,
    tape: Tape,
    vars: ModelVars,
    memory: Var,
    mark: usize,
    mask: Vec<bool>,
}

impl<'a> Session<'a> {
    pub fn new(ckpt: &'a Checkpoint, record: &ImageRecord) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &ckpt.config, &ckpt.params, false)?;
        let memory = encode_on(&mut tape, &ckpt.config, &vars, record, &mut Dropout::off())?;
        Ok(Self::finish(ckpt, tape, vars, memory))
    }

    pub fn from_encoded(ckpt: &'a Checkpoint, encoded: &EncodedImage) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &ckpt.config, &ckpt.params, false)?;
        let memory = tape.constant(encoded.memory.clone());
        Ok(Self::finish(ckpt, tape, vars, memory))
    }

    fn finish(ckpt: &'a Checkpoint, tape: Tape, vars: ModelVars, memory: Var) -> Self {
        let mark = tape.mark();
        Session {
            ckpt,
            tape,
            vars,
            memory,
            mark,
            mask: generation_mask(ckpt.config.vocab_size),
        }
    }

    pub fn max_len(&self) -> usize {
        self.ckpt.config.max_caption_len
    }

    /// Raw logits of the last prefix position.
    pub fn last_logits(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let cfg = &self.ckpt.config;
        let l = decode_on(&mut self.tape, cfg, &self.vars, self.memory, prefix, &mut Dropout::off());
        let out = l.map(|l| {
            let v = self.tape.value(l);
            v.row(v.outer_len() - 1).to_vec()
        });
        self.tape.truncate(self.mark);
        out
    }

    /// Generation log-probabilities for the token after `prefix`.
    pub fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = self.last_logits(prefix)?;
        Ok(masked_log_softmax(&logits, &self.mask))
    }

    /// Greedy tokens, including the final `<eos>` when one is produced.
    pub fn greedy(&mut self) -> Result<Vec<usize>> {
        let mut prefix = vec![BOS];
        while prefix.len() <= self.max_len() {
            let lp = self.next_log_probs(&prefix)?;
            let mut best = 0;
            for (i, &v) in lp.iter().enumerate() {
                if v > lp[best] {
                    best = i;
                }
            }
            prefix.push(best);
            if best == EOS {
                break;
            }
        }
        Ok(prefix[1..].to_vec())
    }

    /// One multinomial draw per step from the generation distribution.
    pub fn sample<R: Rng>(&mut self, rng: &mut R) -> Result<Vec<usize>> {
        let mut prefix = vec![BOS];
        while prefix.len() <= self.max_len() {
            let lp = self.next_log_probs(&prefix)?;
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_allowed = EOS;
            for (i, &v) in lp.iter().enumerate() {
                if v == f64::NEG_INFINITY {
                    continue;
                }
                last_allowed = i;
                acc += v.exp();
                if u < acc {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave the cumulative sum just below u
            let tok = pick.unwrap_or(last_allowed);
            prefix.push(tok);
            if tok == EOS {
                break;
            }
        }
        Ok(prefix[1..].to_vec())
    }

    /// Sum of generation log-probabilities of `tokens` (as produced by a
    /// decoder, `<eos>` included if present).
    pub fn log_prob(&mut self, tokens: &[usize]) -> Result<f64> {
        let mut prefix = vec![BOS];
        let mut total = 0.0;
        for &t in tokens {
            total += self.next_log_probs(&prefix)?[t];
            prefix.push(t);
        }
        Ok(total)
    }
}

/// A finished beam: generated tokens (with `<eos>` if emitted) and the sum
/// of their log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

#[derive(Clone)]
struct Beam {
    seq: Vec<usize>,
    score: f64,
    done: bool,
}

fn rank(a: &Beam, b: &Beam) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.seq.cmp(&b.seq))
}

/// Beam search ranked by summed log-probability, with no length
/// normalization. Finished beams stay in the pool unchanged; ties go to
/// the lexicographically smaller sequence.
pub fn beam_search(session: &mut Session<'_>, width: usize) -> Result<BeamHypothesis> {
    let width = width.max(1);
    let max_len = session.max_len();
    let mut beams = vec![Beam {
        seq: Vec::new(),
        score: 0.0,
        done: false,
    }];
    while beams.iter().any(|b| !b.done) {
        let mut pool = Vec::with_capacity(beams.len() * session.mask.len());
        for b in &beams {
            if b.done {
                pool.push(b.clone());
                continue;
            }
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&b.seq);
            let lp = session.next_log_probs(&prefix)?;
            for (tok, &v) in lp.iter().enumerate() {
                if v == f64::NEG_INFINITY {
                    continue;
                }
                let mut seq = b.seq.clone();
                seq.push(tok);
                let done = tok == EOS || seq.len() == max_len;
                pool.push(Beam {
                    seq,
                    score: b.score + v,
                    done,
                });
            }
        }
        pool.sort_by(rank);
        pool.truncate(width);
        beams = pool;
    }
    let best = beams.into_iter().next().expect("at least one beam");
    Ok(BeamHypothesis {
        tokens: best.seq,
        score: best.score,
    })
}

/// Greedy caption ids, without specials.
pub fn greedy_decode(record: &ImageRecord, ckpt: &Checkpoint) -> Result<Vec<usize>> {
    let mut s = Session::new(ckpt, record)?;
    Ok(strip_specials(&s.greedy()?))
}

/// Beam-search caption ids, without specials.
pub fn beam_decode(record: &ImageRecord, ckpt: &Checkpoint, beam_width: usize) -> Result<Vec<usize>> {
    let mut s = Session::new(ckpt, record)?;
    Ok(strip_specials(&beam_search(&mut s, beam_width)?.tokens))
}

/// A sampled caption (with `<eos>` if drawn).
pub fn sample_caption<R: Rng>(record: &ImageRecord, ckpt: &Checkpoint, rng: &mut R) -> Result<Vec<usize>> {
    Session::new(ckpt, record)?.sample(rng)
}

/// Summed generation log-probability of a decoded token sequence.
pub fn sequence_log_prob(record: &ImageRecord, ckpt: &Checkpoint, tokens: &[usize]) -> Result<f64> {
    Session::new(ckpt, record)?.log_prob(tokens)
}
