//! Greedy and beam-search decoding. At every step the selected word's
//! embedding is fed back as the next decoder input.

use crate::error::{Error, Result};
use crate::model::{argmax, DecodeState, Seq2SeqModel};

/// What a decoder needs from a model: an initial state for a source and a
/// step from the previous word to an output distribution.
pub trait StepModel {
    type State: Clone;

    fn begin(&self, source: &[usize]) -> Result<Self::State>;

    /// Distribution over output positions after feeding `prev`, with the
    /// advanced state.
    fn step(&self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)>;

    /// Vocabulary id of output position `index`.
    fn output_word(&self, index: usize) -> usize;

    fn sos(&self) -> usize;

    fn eos(&self) -> usize;
}

impl StepModel for Seq2SeqModel {
    type State = DecodeState;

    fn begin(&self, source: &[usize]) -> Result<DecodeState> {
        Seq2SeqModel::begin(self, source)
    }

    fn step(&self, state: &DecodeState, prev: usize) -> Result<(Vec<f64>, DecodeState)> {
        self.next_distribution(state, prev)
    }

    fn output_word(&self, index: usize) -> usize {
        self.output_words()[index]
    }

    fn sos(&self) -> usize {
        Seq2SeqModel::sos(self)
    }

    fn eos(&self) -> usize {
        Seq2SeqModel::eos(self)
    }
}

/// Default output bound for a source of `source_len` tokens.
pub fn default_max_len(source_len: usize) -> usize {
    2 * source_len + 5
}

/// Picks the most probable word at each step until `</s>` or `max_len`
/// words. The returned sequence excludes `</s>`.
pub fn greedy_decode<M: StepModel>(
    model: &M,
    source: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let mut state = model.begin(source)?;
    let mut prev = model.sos();
    let mut out = Vec::new();
    while out.len() < max_len {
        let (dist, next) = model.step(&state, prev)?;
        let word = model.output_word(argmax(&dist));
        if word == model.eos() {
            break;
        }
        out.push(word);
        prev = word;
        state = next;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Generated words; ends with `</s>` iff `finished`.
    pub tokens: Vec<usize>,
    /// Sum of the per-step log-probabilities.
    pub log_prob: f64,
    pub state: S,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    /// Log-probability per generated token (`</s>` included).
    pub fn normalized_score(&self) -> f64 {
        self.log_prob / self.tokens.len() as f64
    }

    /// The tokens without a trailing `</s>`.
    pub fn words(&self) -> &[usize] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// Beam search over summed log-probabilities. Each step keeps the `beam`
/// best expansions of the live hypotheses; expansions ending in `</s>` are
/// retired to the finished pool. Returns finished hypotheses (or, if none
/// finished, the live ones) best first by length-normalised score; earlier
/// hypotheses win ties.
pub fn beam_search<M: StepModel>(
    model: &M,
    source: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis<M::State>>> {
    if beam == 0 {
        return Err(Error::contract("beam must be at least 1"));
    }
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let eos = model.eos();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.begin(source)?,
        finished: false,
    }];
    let mut finished = Vec::new();
    for _ in 0..max_len {
        let mut expansions = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (h, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(model.sos());
            let (dist, state) = model.step(&hyp.state, prev)?;
            for (i, p) in dist.iter().enumerate() {
                if *p > 0.0 {
                    expansions.push((hyp.log_prob + p.ln(), h, i));
                }
            }
            next_states.push(state);
        }
        // stable: ties keep hypothesis order, then output order
        expansions.sort_by(|a, b| b.0.total_cmp(&a.0));
        expansions.truncate(beam);
        let mut next_live = Vec::with_capacity(beam);
        for (log_prob, h, i) in expansions {
            let word = model.output_word(i);
            let mut tokens = live[h].tokens.clone();
            tokens.push(word);
            let hyp = Hypothesis {
                tokens,
                log_prob,
                state: next_states[h].clone(),
                finished: word == eos,
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }
    let mut ranked = if finished.is_empty() { live } else { finished };
    ranked.sort_by(|a, b| b.normalized_score().total_cmp(&a.normalized_score()));
    Ok(ranked)
}

/// Words of the best beam hypothesis, without `</s>`.
pub fn beam_decode<M: StepModel>(
    model: &M,
    source: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let ranked = beam_search(model, source, beam, max_len)?;
    Ok(ranked[0].words().to_vec())
}
