//! Beam search over any next-token model.
//!
//! A hypothesis finishes when it emits EOS or when it holds `max_len`
//! non-EOS tokens. Expansion keeps the `beam_width` candidates with the
//! highest cumulative log-probability; finished hypotheses are ranked by
//! that log-probability divided by the number of scored steps (EOS
//! included), or by the raw sum when normalization is off. Ties go to the
//! lexicographically smaller token sequence, then to the earlier finish.

use std::cmp::Ordering;

use crate::corpus::TokenId;

/// Next-token log-probabilities from a recurrent state.
pub trait StepModel {
    type State: Clone;
    type Error;

    fn start(&mut self) -> Result<Self::State, Self::Error>;

    /// Log-probabilities over the vocabulary after feeding `prev`, and the
    /// resulting state.
    fn step(&mut self, state: &Self::State, prev: TokenId) -> Result<(Vec<f64>, Self::State), Self::Error>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_len: usize,
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 8,
            max_len: 20,
            length_normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Tokens without the terminating EOS.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// Number of scored steps, EOS included.
    pub steps: usize,
    pub ended_with_eos: bool,
}

impl Hypothesis {
    pub fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.log_prob / self.steps.max(1) as f64
        } else {
            self.log_prob
        }
    }
}

/// Higher score first, then smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis, normalize: bool) -> Ordering {
    b.score(normalize)
        .total_cmp(&a.score(normalize))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Live<S> {
    tokens: Vec<TokenId>,
    log_prob: f64,
    state: S,
}

pub fn beam_search<M: StepModel>(
    model: &mut M,
    bos: TokenId,
    eos: TokenId,
    cfg: &BeamConfig,
) -> Result<Hypothesis, M::Error> {
    let width = cfg.beam_width.max(1);
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.start()?,
    }];
    // finish order is the index in this vector
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut candidates: Vec<(usize, TokenId, f64)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (k, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(bos);
            let (logp, state) = model.step(&hyp.state, prev)?;
            next_states.push(state);
            for (w, lp) in logp.into_iter().enumerate() {
                candidates.push((k, w, hyp.log_prob + lp));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| {
                let ta = live[a.0].tokens.iter().chain(std::iter::once(&a.1));
                let tb = live[b.0].tokens.iter().chain(std::iter::once(&b.1));
                ta.cmp(tb)
            })
        });
        candidates.truncate(width);
        let mut next_live = Vec::new();
        for (k, w, lp) in candidates {
            let mut tokens = live[k].tokens.clone();
            if w == eos {
                let steps = tokens.len() + 1;
                finished.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    steps,
                    ended_with_eos: true,
                });
                continue;
            }
            tokens.push(w);
            if tokens.len() >= cfg.max_len {
                let steps = tokens.len();
                finished.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    steps,
                    ended_with_eos: false,
                });
            } else {
                next_live.push(Live {
                    tokens,
                    log_prob: lp,
                    state: next_states[k].clone(),
                });
            }
        }
        live = next_live;
    }
    let best = finished
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| rank(a, b, cfg.length_normalize).then(i.cmp(j)))
        .map(|(_, h)| h.clone())
        .expect("at least one hypothesis finishes");
    Ok(best)
}

/// Argmax decoding: at each step the token with the highest cumulative
/// log-probability, smaller id on ties.
pub fn greedy_decode<M: StepModel>(
    model: &mut M,
    bos: TokenId,
    eos: TokenId,
    max_len: usize,
) -> Result<Hypothesis, M::Error> {
    let mut state = model.start()?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    loop {
        let prev = tokens.last().copied().unwrap_or(bos);
        let (logp, next) = model.step(&state, prev)?;
        let (w, lp) = logp
            .iter()
            .map(|lp| log_prob + lp)
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (w, lp)| match best {
                Some((_, b)) if b >= lp => best,
                _ => Some((w, lp)),
            })
            .expect("non-empty vocabulary");
        log_prob = lp;
        if w == eos {
            let steps = tokens.len() + 1;
            return Ok(Hypothesis {
                tokens,
                log_prob,
                steps,
                ended_with_eos: true,
            });
        }
        tokens.push(w);
        if tokens.len() >= max_len {
            let steps = tokens.len();
            return Ok(Hypothesis {
                tokens,
                log_prob,
                steps,
                ended_with_eos: false,
            });
        }
        state = next;
    }
}

/// Best complete output by brute force: every `w + [EOS]` with
/// `|w| < max_len` and every `w` with `|w| = max_len`, ranked as in
/// [`beam_search`]. Exponential in `max_len`.
pub fn exhaustive_search<M: StepModel>(
    model: &mut M,
    bos: TokenId,
    eos: TokenId,
    max_len: usize,
    length_normalize: bool,
) -> Result<Hypothesis, M::Error> {
    let mut best: Option<Hypothesis> = None;
    let mut offer = |h: Hypothesis| {
        let better = match &best {
            None => true,
            Some(b) => rank(&h, b, length_normalize) == Ordering::Less,
        };
        if better {
            best = Some(h);
        }
    };
    let root = model.start()?;
    let mut stack: Vec<(Vec<TokenId>, f64, M::State)> = vec![(Vec::new(), 0.0, root)];
    while let Some((tokens, log_prob, state)) = stack.pop() {
        let prev = tokens.last().copied().unwrap_or(bos);
        let (logp, next) = model.step(&state, prev)?;
        for (w, lp) in logp.into_iter().enumerate() {
            let total = log_prob + lp;
            if w == eos {
                offer(Hypothesis {
                    steps: tokens.len() + 1,
                    tokens: tokens.clone(),
                    log_prob: total,
                    ended_with_eos: true,
                });
                continue;
            }
            let mut t = tokens.clone();
            t.push(w);
            if t.len() == max_len {
                offer(Hypothesis {
                    steps: t.len(),
                    tokens: t,
                    log_prob: total,
                    ended_with_eos: false,
                });
            } else {
                stack.push((t, total, next.clone()));
            }
        }
    }
    Ok(best.expect("non-empty vocabulary"))
}
