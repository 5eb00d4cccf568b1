//! Greedy and beam-search decoding.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{bridge, decoder_step, encode, output_heads, Bound, DecoderState, EncoderStates, Mode, ModelConfig, Padded, Params};
use crate::tensor::{Float, Graph};
use crate::training::loss::PROB_FLOOR;
use crate::vocab::{TokenId, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Output tokens, without BOS/EOS.
    pub tokens: Vec<TokenId>,
    /// Sum of per-step log-probabilities, including the EOS step if any.
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by log-probability per emitted token
    /// (EOS included) instead of the raw sum.
    pub length_norm: bool,
}

impl BeamConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            beam: 1,
            max_len,
            length_norm: false,
        }
    }
}

/// Encoder output plus per-row-count replicas of it.
struct Session<'a, F: Float> {
    g: Graph<F>,
    p: Bound,
    cfg: &'a ModelConfig,
    encoded: HashMap<usize, EncoderStates>,
}

impl<'a, F: Float> Session<'a, F> {
    fn start(params: &Params<F>, cfg: &'a ModelConfig, source: &[TokenId]) -> Result<(Self, DecoderState)> {
        if source.is_empty() {
            return Err(Error::Invalid("cannot decode an empty source".into()));
        }
        let mut g = Graph::new();
        let p = Bound::new(&mut g, params);
        let src = Padded::new(&[source])?;
        let enc = encode(&mut g, &p, cfg, &src, &mut Mode::Eval)?;
        let state = bridge(&mut g, &p, cfg, &enc)?;
        let mut encoded = HashMap::new();
        encoded.insert(1, enc);
        Ok((Self { g, p, cfg, encoded }, state))
    }

    fn encoder_rows(&mut self, n: usize) -> Result<()> {
        if self.encoded.contains_key(&n) {
            return Ok(());
        }
        let base = &self.encoded[&1];
        let (h0, p0, s0) = (base.h, base.h_proj, base.summary);
        let row = base.source.row(0).to_vec();
        let rows = vec![0; n];
        let h = self.g.index_rows(h0, &rows)?;
        let h_proj = self.g.index_rows(p0, &rows)?;
        let summary = self.g.index_rows(s0, &rows)?;
        let refs: Vec<&[TokenId]> = (0..n).map(|_| &row[..]).collect();
        let source = Padded::new(&refs)?;
        self.encoded.insert(n, EncoderStates { h, h_proj, summary, source });
        Ok(())
    }

    /// Feeds one token per row and returns per-row log-probabilities.
    fn step(&mut self, state: &mut DecoderState, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        let n = tokens.len();
        self.encoder_rows(n)?;
        let top = decoder_step(&mut self.g, &self.p, self.cfg, state, tokens, &mut Mode::Eval)?;
        let v = self.g.reshape(top, &[n, 1, self.cfg.dec_hidden])?;
        let out = output_heads(&mut self.g, &self.p, self.cfg, &self.encoded[&n], v)?;
        let probs = self.g.value(out.probs);
        let vocab = self.cfg.vocab_size;
        Ok(probs
            .chunks(vocab)
            .map(|row| row.iter().map(|&x| (x.as_f64() + PROB_FLOOR).ln()).collect())
            .collect())
    }
}

/// Index of the largest entry, lowest index on ties.
fn best_index(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding until EOS or `max_len` tokens.
pub fn greedy_decode<F: Float>(
    params: &Params<F>,
    cfg: &ModelConfig,
    source: &[TokenId],
    max_len: usize,
) -> Result<Hypothesis> {
    let (mut s, mut state) = Session::start(params, cfg, source)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    let mut prev = BOS;
    for _ in 0..max_len {
        let logp = s.step(&mut state, &[prev])?.remove(0);
        let next = best_index(&logp);
        hyp.log_prob += logp[next];
        if next == EOS {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(next);
        prev = next;
    }
    Ok(hyp)
}

fn rank(h: &Hypothesis, length_norm: bool) -> f64 {
    if length_norm {
        h.log_prob / (h.tokens.len() + usize::from(h.finished)).max(1) as f64
    } else {
        h.log_prob
    }
}

/// Beam search keeping the `beam` best partial hypotheses by summed
/// log-probability. Finished hypotheses compete by their total score.
pub fn beam_decode<F: Float>(
    params: &Params<F>,
    cfg: &ModelConfig,
    source: &[TokenId],
    bc: &BeamConfig,
) -> Result<Hypothesis> {
    if bc.beam == 0 {
        return Err(Error::Invalid("beam width must be at least 1".into()));
    }
    let (mut s, mut state) = Session::start(params, cfg, source)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut last = vec![BOS];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..bc.max_len {
        let logp = s.step(&mut state, &last)?;
        // (score, parent row, token); sorted best first, ties to lower row then token.
        let mut cand: Vec<(f64, usize, TokenId)> = Vec::with_capacity(live.len() * cfg.vocab_size);
        for (r, row) in logp.iter().enumerate() {
            for (t, &lp) in row.iter().enumerate() {
                cand.push((live[r].log_prob + lp, r, t));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cand.truncate(bc.beam);
        let mut next_live = Vec::new();
        let mut parents = Vec::new();
        for &(score, r, t) in &cand {
            if t == EOS {
                finished.push(Hypothesis {
                    tokens: live[r].tokens.clone(),
                    log_prob: score,
                    finished: true,
                });
            } else {
                let mut tokens = live[r].tokens.clone();
                tokens.push(t);
                next_live.push(Hypothesis {
                    tokens,
                    log_prob: score,
                    finished: false,
                });
                parents.push(r);
            }
        }
        if next_live.is_empty() {
            live.clear();
            break;
        }
        let done = if bc.length_norm {
            finished.len() >= bc.beam
        } else {
            // Scores only fall as tokens append, so no live hypothesis can
            // overtake a finished one that already beats it.
            let best_fin = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            best_fin >= next_live[0].log_prob
        };
        last = next_live.iter().map(|h| *h.tokens.last().unwrap()).collect();
        state = if parents.iter().enumerate().all(|(i, &p)| i == p) && parents.len() == live.len() {
            state
        } else {
            state.select(&mut s.g, &parents)?
        };
        live = next_live;
        if done {
            break;
        }
    }
    let pool = if finished.is_empty() { &live } else { &finished };
    let mut best = &pool[0];
    for h in pool {
        if rank(h, bc.length_norm) > rank(best, bc.length_norm) {
            best = h;
        }
    }
    Ok(best.clone())
}

/// Decodes every source, fanning out over up to `threads` worker threads.
/// Output order matches input order.
pub fn decode_all<F: Float>(
    params: &Params<F>,
    cfg: &ModelConfig,
    sources: &[Vec<TokenId>],
    bc: &BeamConfig,
    threads: usize,
) -> Result<Vec<Hypothesis>> {
    let threads = threads.max(1).min(sources.len().max(1));
    let chunk = sources.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<Hypothesis>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sources
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| {
                            if bc.beam == 1 && !bc.length_norm {
                                greedy_decode(params, cfg, s, bc.max_len)
                            } else {
                                beam_decode(params, cfg, s, bc)
                            }
                        })
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(sources.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Log-probability the model assigns to emitting `tokens` then EOS.
pub fn sequence_log_prob<F: Float>(
    params: &Params<F>,
    cfg: &ModelConfig,
    source: &[TokenId],
    tokens: &[TokenId],
) -> Result<f64> {
    let (mut s, mut state) = Session::start(params, cfg, source)?;
    let mut total = 0.0;
    let mut prev = BOS;
    for &t in tokens.iter().chain(std::iter::once(&EOS)) {
        total += s.step(&mut state, &[prev])?[0][t];
        prev = t;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            emb_dim: 5,
            enc_layers: 1,
            enc_hidden: 5,
            dec_layers: 2,
            dec_hidden: 5,
            vocab_size: 9,
            dropout: 0.0,
            max_len: 40,
        }
    }

    fn random_source(rng: &mut impl Rng) -> Vec<TokenId> {
        (0..rng.gen_range(1..7)).map(|_| rng.gen_range(5..9)).collect()
    }

    #[test]
    fn eos_first_gives_empty_output() {
        let c = cfg(Arch::EncoderDecoder);
        let mut p: Params<f64> = Params::init(&c, &mut ChaCha8Rng::seed_from_u64(0));
        let bias = p.get_mut("generator.out.bias").unwrap();
        bias.data_mut()[EOS] = 50.0;
        let h = greedy_decode(&p, &c, &[5, 6], 10).unwrap();
        assert!(h.tokens.is_empty() && h.finished);
        let b = beam_decode(&p, &c, &[5, 6], &BeamConfig { beam: 3, max_len: 10, length_norm: false }).unwrap();
        assert!(b.tokens.is_empty());
        assert!(greedy_decode(&p, &c, &[], 10).is_err());
    }

    #[test]
    fn beam_one_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..30 {
            let arch = if i % 2 == 0 { Arch::PointerGenerator } else { Arch::EncoderDecoder };
            let c = cfg(arch);
            let p: Params<f64> = Params::init(&c, &mut rng);
            let src = random_source(&mut rng);
            let g = greedy_decode(&p, &c, &src, 12).unwrap();
            let b = beam_decode(&p, &c, &src, &BeamConfig::greedy(12)).unwrap();
            assert_eq!(g, b);
        }
    }

    #[test]
    fn scores_match_rescoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(Arch::PointerGenerator);
        let mut p: Params<f64> = Params::init(&c, &mut rng);
        p.get_mut("generator.out.bias").unwrap().data_mut()[EOS] = 1.5;
        let src = random_source(&mut rng);
        let h = beam_decode(&p, &c, &src, &BeamConfig { beam: 4, max_len: 15, length_norm: false }).unwrap();
        assert!(h.finished);
        let re = sequence_log_prob(&p, &c, &src, &h.tokens).unwrap();
        assert!((re - h.log_prob).abs() < 1e-9);
    }

    #[test]
    fn decode_all_preserves_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cfg(Arch::PointerGenerator);
        let p: Params<f32> = Params::init(&c, &mut rng);
        let sources: Vec<Vec<TokenId>> = (0..9).map(|_| random_source(&mut rng)).collect();
        let bc = BeamConfig::greedy(8);
        let par = decode_all(&p, &c, &sources, &bc, 4).unwrap();
        for (s, h) in sources.iter().zip(&par) {
            assert_eq!(&greedy_decode(&p, &c, s, 8).unwrap(), h);
        }
    }
}
