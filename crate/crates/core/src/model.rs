//! Encoder-decoder with one shared embedding table and an interchangeable
//! output layer.
//!
//! Both heads read the attentional vector `q = tanh(W_c [s; c])`, built from
//! the top decoder state `s` and the attention context `c`:
//!
//! * [`GeneratorKind::SoftmaxLinear`] scores every vocabulary word with a
//!   `V × k` matrix;
//! * [`GeneratorKind::Wean`] uses `q` as a query against the embeddings of
//!   the candidate words and normalises the relevance scores. It owns no
//!   per-word parameters: the candidate values are rows of the same table
//!   the encoder and decoder read their inputs from.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Tokenization, Vocabulary, EOS, SOS, SPECIALS, UNK};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    dropout, AttentionLayer, LstmStack, LstmState, Mode, ScoreFunction, ScoreKind, INIT_RANGE,
};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    SoftmaxLinear,
    Wean,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::SoftmaxLinear => "softmax_linear",
            GeneratorKind::Wean => "wean",
        }
    }
}

impl std::str::FromStr for GeneratorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "softmax_linear" => Ok(GeneratorKind::SoftmaxLinear),
            "wean" => Ok(GeneratorKind::Wean),
            other => Err(format!(
                "unknown generator `{other}` (softmax_linear, wean)"
            )),
        }
    }
}

/// Output-layer parameters of a head for vocabulary size `vocab` and hidden
/// size `hidden` (embedding size taken equal to `hidden`). `W_c` is shared
/// by both heads and not counted.
pub fn count_output_params(
    generator: GeneratorKind,
    score: ScoreKind,
    vocab: u64,
    hidden: u64,
) -> u64 {
    match generator {
        GeneratorKind::SoftmaxLinear => vocab * hidden,
        GeneratorKind::Wean => match score {
            ScoreKind::Dot => 0,
            ScoreKind::General => hidden * hidden,
            ScoreKind::Concat => 2 * hidden * hidden + hidden,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub generator: GeneratorKind,
    /// Relevance function of the WEAN head.
    pub score_kind: ScoreKind,
    /// Encoder-decoder attention score.
    pub attention_kind: ScoreKind,
    /// LSTM layers in both the encoder and the decoder.
    pub layers: usize,
    pub hidden_size: usize,
    pub embedding_size: usize,
    pub dropout: f64,
    /// How raw text is split into tokens for this model.
    #[serde(default)]
    pub tokenization: Tokenization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::Wean,
            score_kind: ScoreKind::General,
            attention_kind: ScoreKind::General,
            layers: 2,
            hidden_size: 256,
            embedding_size: 256,
            dropout: 0.4,
            tokenization: Tokenization::Word,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.hidden_size == 0 {
            return Err(Error::config("hidden_size", "must be at least 1"));
        }
        if self.embedding_size == 0 {
            return Err(Error::config("embedding_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        if self.generator == GeneratorKind::Wean
            && self.score_kind == ScoreKind::Dot
            && self.embedding_size != self.hidden_size
        {
            return Err(Error::config(
                "embedding_size",
                "must equal hidden_size when score_kind is dot",
            ));
        }
        Ok(())
    }
}

/// The candidate words the WEAN head retrieves from, as vocabulary ids.
/// Their values are the shared embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    word_ids: Vec<usize>,
    position: Vec<Option<usize>>,
}

impl CandidateSet {
    /// The specials plus the `n` most frequent words. The vocabulary is
    /// frequency ordered, so these are simply its first ids.
    pub fn most_frequent(vocab: &Vocabulary, n: usize) -> Self {
        let end = (SPECIALS.len() + n).min(vocab.len());
        Self::from_ids((0..end).collect(), vocab.len()).expect("prefix ids are valid")
    }

    pub fn from_ids(word_ids: Vec<usize>, vocab_len: usize) -> Result<Self> {
        let mut position = vec![None; vocab_len];
        for (i, &w) in word_ids.iter().enumerate() {
            if w >= vocab_len {
                return Err(Error::Index {
                    index: w,
                    size: vocab_len,
                });
            }
            if position[w].replace(i).is_some() {
                return Err(Error::contract(format!("candidate word {w} listed twice")));
            }
        }
        for special in 0..SPECIALS.len() {
            if position.get(special).copied().flatten().is_none() {
                return Err(Error::contract(format!(
                    "candidate set lacks special {special}"
                )));
            }
        }
        Ok(Self { word_ids, position })
    }

    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }

    pub fn word_ids(&self) -> &[usize] {
        &self.word_ids
    }

    pub fn index_of(&self, word: usize) -> Option<usize> {
        self.position.get(word).copied().flatten()
    }
}

#[derive(Clone, Debug)]
pub enum GeneratorHead {
    /// `weight` is `[V × hidden]`, no bias.
    SoftmaxLinear {
        weight: ParamId,
    },
    Wean {
        score: ScoreFunction,
    },
}

impl GeneratorHead {
    pub fn kind(&self) -> GeneratorKind {
        match self {
            GeneratorHead::SoftmaxLinear { .. } => GeneratorKind::SoftmaxLinear,
            GeneratorHead::Wean { .. } => GeneratorKind::Wean,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            GeneratorHead::SoftmaxLinear { weight } => vec![*weight],
            GeneratorHead::Wean { score } => score.param_ids(),
        }
    }
}

/// Which uses of the shared embedding table carry gradient. Detached uses
/// read a constant copy of the table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingPaths {
    pub encoder_input: bool,
    pub decoder_input: bool,
    pub candidates: bool,
}

impl EmbeddingPaths {
    pub const ALL: Self = Self {
        encoder_input: true,
        decoder_input: true,
        candidates: true,
    };
}

/// One teacher-forced training example. `inputs` is `<s> y₁ … y_T` and
/// `gold` is `y₁ … y_T </s>`.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub source: &'a [usize],
    pub inputs: &'a [usize],
    pub gold: &'a [usize],
}

impl<'a> Example<'a> {
    pub fn from_batch(batch: &'a Batch) -> Vec<Self> {
        (0..batch.len())
            .map(|i| Example {
                source: batch.source_ids(i),
                inputs: batch.input_ids(i),
                gold: batch.gold_ids(i),
            })
            .collect()
    }
}

/// Teacher-forced statistics over a set of examples.
#[derive(Clone, Copy, Debug)]
pub struct LossStats {
    /// Summed cross-entropy over the target positions.
    pub loss: Var,
    pub tokens: usize,
    /// Positions whose highest-scoring output is the gold one.
    pub correct: usize,
}

/// Decoder state between inference steps.
#[derive(Clone, Debug)]
pub struct DecodeState {
    memory: Rc<Tensor>,
    layers: Vec<(Tensor, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub embedding: ParamId,
    pub encoder: LstmStack,
    pub decoder: LstmStack,
    pub attention: AttentionLayer,
    /// `W_c`, `[hidden × 2·hidden]`.
    pub combine: ParamId,
    pub head: GeneratorHead,
    pub candidates: CandidateSet,
    output_words: Vec<usize>,
}

impl Seq2SeqModel {
    /// Builds a freshly initialised model. Shared parameters are drawn
    /// before the head's, so two heads built from the same seed start from
    /// identical shared weights.
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        candidates: CandidateSet,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if candidates.position.len() != vocab.len() {
            return Err(Error::contract(
                "candidate set built for a different vocabulary",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, e, v) = (config.hidden_size, config.embedding_size, vocab.len());
        let mut params = ParamStore::new();
        let embedding = params.add("embedding", Tensor::uniform(&[v, e], INIT_RANGE, &mut rng));
        let encoder = LstmStack::new(&mut params, "encoder", config.layers, e, k, &mut rng);
        let decoder = LstmStack::new(&mut params, "decoder", config.layers, e, k, &mut rng);
        let attention = AttentionLayer {
            score: ScoreFunction::new(
                config.attention_kind,
                &mut params,
                "attention",
                k,
                k,
                &mut rng,
            )?,
        };
        let combine = params.add(
            "combine",
            Tensor::uniform(&[k, 2 * k], INIT_RANGE, &mut rng),
        );
        let (head, output_words) = match config.generator {
            GeneratorKind::SoftmaxLinear => (
                GeneratorHead::SoftmaxLinear {
                    weight: params.add(
                        "generator.weight",
                        Tensor::uniform(&[v, k], INIT_RANGE, &mut rng),
                    ),
                },
                (0..v).collect(),
            ),
            GeneratorKind::Wean => (
                GeneratorHead::Wean {
                    score: ScoreFunction::new(
                        config.score_kind,
                        &mut params,
                        "generator",
                        k,
                        e,
                        &mut rng,
                    )?,
                },
                candidates.word_ids.clone(),
            ),
        };
        Ok(Self {
            config,
            vocab,
            params,
            embedding,
            encoder,
            decoder,
            attention,
            combine,
            head,
            candidates,
            output_words,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    /// Vocabulary id of each entry of the output distribution.
    pub fn output_words(&self) -> &[usize] {
        &self.output_words
    }

    pub fn num_outputs(&self) -> usize {
        self.output_words.len()
    }

    /// Position of `word` in the output distribution. Words the WEAN head
    /// cannot emit map to the unknown-word candidate.
    pub fn output_index(&self, word: usize) -> usize {
        match self.head {
            GeneratorHead::SoftmaxLinear { .. } => word,
            GeneratorHead::Wean { .. } => self
                .candidates
                .index_of(word)
                .or_else(|| self.candidates.index_of(UNK))
                .expect("candidate set holds <unk>"),
        }
    }

    /// Parameters actually held by the output layer.
    pub fn output_param_count(&self) -> usize {
        self.head
            .param_ids()
            .iter()
            .map(|id| self.params.value(*id).len())
            .sum()
    }

    /// Encoder states `[N × hidden]` for `src` and each layer's final state.
    pub fn encode(&self, g: &mut Graph<'_>, src: &[usize]) -> Result<(Var, Vec<LstmState>)> {
        let table = g.param(self.embedding);
        self.encode_from(g, table, src, Mode::Eval, &mut NoRng)
    }

    fn encode_from<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        table: Var,
        src: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Vec<LstmState>)> {
        if src.is_empty() {
            return Err(Error::contract("cannot encode an empty source"));
        }
        let xs = g.gather_rows(table, src)?;
        let init = self.encoder.zero_states(g);
        self.encoder
            .run(g, xs, &init, self.config.dropout, mode, rng)
    }

    /// One decoder step on `prev_value` (`[1 × embedding]`). Returns the top
    /// state `s_t`, the context `c_t` and the new per-layer states.
    pub fn decode_step(
        &self,
        g: &mut Graph<'_>,
        prev_value: Var,
        states: &[LstmState],
        memory: Var,
    ) -> Result<(Var, Var, Vec<LstmState>)> {
        let (s, next) = self.decoder.step(g, prev_value, states)?;
        let (c, _) = self.attention.attend(g, s, memory)?;
        Ok((s, c, next))
    }

    /// `tanh(W_c [s; c])`, row by row.
    fn attentional(&self, g: &mut Graph<'_>, s: Var, c: Var) -> Result<Var> {
        let joined = g.concat(s, c, 1)?;
        let w = g.param(self.combine);
        let projected = g.matmul_nt(joined, w)?;
        Ok(g.tanh(projected))
    }

    /// The WEAN query `q_t = tanh(W_c [s_t; c_t])`.
    pub fn make_query(&self, g: &mut Graph<'_>, s: Var, c: Var) -> Result<Var> {
        if !matches!(self.head, GeneratorHead::Wean { .. }) {
            return Err(Error::contract("make_query needs a wean head"));
        }
        self.attentional(g, s, c)
    }

    /// Relevance of each query row against each candidate embedding row.
    pub fn relevance(&self, g: &mut Graph<'_>, query: Var, values: Var) -> Result<Var> {
        match &self.head {
            GeneratorHead::Wean { score } => {
                if g.value(values).rows() == 0 {
                    return Err(Error::contract("relevance against no candidates"));
                }
                score.scores(g, query, values)
            }
            GeneratorHead::SoftmaxLinear { .. } => {
                Err(Error::contract("relevance needs a wean head"))
            }
        }
    }

    /// Unnormalised output scores for attentional vectors `q` (`[T × k]`).
    fn output_scores(&self, g: &mut Graph<'_>, q: Var, table: Var) -> Result<Var> {
        match &self.head {
            GeneratorHead::SoftmaxLinear { weight } => {
                let w = g.param(*weight);
                g.matmul_nt(q, w)
            }
            GeneratorHead::Wean { .. } => {
                let values = g.gather_rows(table, self.candidates.word_ids())?;
                self.relevance(g, q, values)
            }
        }
    }

    /// Output distribution for decoder states `s` and contexts `c`
    /// (one row per time step).
    pub fn word_distribution(&self, g: &mut Graph<'_>, s: Var, c: Var) -> Result<Var> {
        let q = self.attentional(g, s, c)?;
        let table = g.param(self.embedding);
        let scores = self.output_scores(g, q, table)?;
        g.softmax(scores, 1)
    }

    /// Highest-probability output (lowest index on ties): its vocabulary id
    /// and its value, the shared embedding row itself.
    pub fn select_word(&self, distribution: &[f64]) -> (usize, &[f64]) {
        let best = argmax(distribution);
        let word = self.output_words[best];
        (word, self.embedding_row(word))
    }

    pub fn embedding_row(&self, word: usize) -> &[f64] {
        self.params.value(self.embedding).row(word)
    }

    /// Teacher-forced loss summed over every target position of `examples`.
    /// All attentional vectors of the batch are scored against the output
    /// layer together.
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        examples: &[Example<'_>],
        mode: Mode,
        rng: &mut R,
        paths: EmbeddingPaths,
    ) -> Result<LossStats> {
        if examples.is_empty() {
            return Err(Error::contract("loss over an empty batch"));
        }
        let live = g.param(self.embedding);
        let detached = if paths == EmbeddingPaths::ALL {
            live
        } else {
            g.detach(live)
        };
        let pick = |on: bool| if on { live } else { detached };

        let mut queries = Vec::with_capacity(examples.len());
        let mut targets = Vec::new();
        for ex in examples {
            if ex.inputs.len() != ex.gold.len() || ex.gold.is_empty() {
                return Err(Error::dim(format!(
                    "{} decoder inputs for {} gold tokens",
                    ex.inputs.len(),
                    ex.gold.len()
                )));
            }
            let (memory, finals) =
                self.encode_from(g, pick(paths.encoder_input), ex.source, mode, rng)?;
            let xs = g.gather_rows(pick(paths.decoder_input), ex.inputs)?;
            let (states, _) = self
                .decoder
                .run(g, xs, &finals, self.config.dropout, mode, rng)?;
            let states = dropout(g, states, self.config.dropout, mode, rng)?;
            let (context, _) = self.attention.attend(g, states, memory)?;
            queries.push(self.attentional(g, states, context)?);
            targets.extend(ex.gold.iter().map(|&w| self.output_index(w)));
        }
        let q = g.concat_rows(&queries)?;
        let scores = self.output_scores(g, q, pick(paths.candidates))?;
        let loss = g.cross_entropy(scores, &targets)?;
        let sv = g.value(scores);
        let correct = targets
            .iter()
            .enumerate()
            .filter(|(r, &t)| argmax(sv.row(*r)) == t)
            .count();
        Ok(LossStats {
            loss,
            tokens: targets.len(),
            correct,
        })
    }

    /// Encodes `src` and initialises the decoder from the encoder's final
    /// states.
    pub fn begin(&self, src: &[usize]) -> Result<DecodeState> {
        let mut g = Graph::new(&self.params);
        let (memory, finals) = self.encode(&mut g, src)?;
        Ok(DecodeState {
            memory: Rc::new(g.value(memory).clone()),
            layers: finals
                .iter()
                .map(|s| (g.value(s.h).clone(), g.value(s.c).clone()))
                .collect(),
        })
    }

    /// Feeds the value (embedding) of `prev_word` to the decoder and returns
    /// the output distribution with the advanced state.
    pub fn next_distribution(
        &self,
        state: &DecodeState,
        prev_word: usize,
    ) -> Result<(Vec<f64>, DecodeState)> {
        let mut g = Graph::new(&self.params);
        let table = g.param(self.embedding);
        let value = g.gather_rows(table, &[prev_word])?;
        let memory = g.input((*state.memory).clone());
        let states: Vec<LstmState> = state
            .layers
            .iter()
            .map(|(h, c)| LstmState {
                h: g.input(h.clone()),
                c: g.input(c.clone()),
            })
            .collect();
        let (s, c, next) = self.decode_step(&mut g, value, &states, memory)?;
        let dist = self.word_distribution(&mut g, s, c)?;
        Ok((
            g.value(dist).data().to_vec(),
            DecodeState {
                memory: Rc::clone(&state.memory),
                layers: next
                    .iter()
                    .map(|s| (g.value(s.h).clone(), g.value(s.c).clone()))
                    .collect(),
            },
        ))
    }

    pub fn sos(&self) -> usize {
        SOS
    }

    pub fn eos(&self) -> usize {
        EOS
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Stand-in RNG for evaluation paths, where dropout never draws.
pub(crate) struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation mode does not sample")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation mode does not sample")
    }

    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("evaluation mode does not sample")
    }

    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("evaluation mode does not sample")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    fn vocab() -> Vocabulary {
        let text = ["a b c d e f", "a b c", "d e"];
        let sents: Vec<Vec<String>> = text
            .iter()
            .map(|t| tokenize(t, Tokenization::Word))
            .collect();
        Vocabulary::build(&sents, 10).unwrap()
    }

    fn model(generator: GeneratorKind, score: ScoreKind, hidden: usize) -> Seq2SeqModel {
        let v = vocab();
        let cands = CandidateSet::most_frequent(&v, 10);
        let config = ModelConfig {
            generator,
            score_kind: score,
            layers: 2,
            hidden_size: hidden,
            embedding_size: hidden,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        Seq2SeqModel::new(config, v, cands, 11).unwrap()
    }

    #[test]
    fn published_parameter_counts() {
        use GeneratorKind::*;
        use ScoreKind::*;
        assert_eq!(
            count_output_params(SoftmaxLinear, General, 50_000, 256),
            12_800_000
        );
        assert_eq!(count_output_params(Wean, Concat, 50_000, 256), 131_328);
        assert_eq!(count_output_params(Wean, Concat, 4_000, 512), 524_800);
        assert_eq!(
            count_output_params(SoftmaxLinear, General, 4_000, 512),
            2_048_000
        );
        assert_eq!(count_output_params(Wean, General, 4_000, 512), 512 * 512);
        assert_eq!(count_output_params(Wean, Dot, 4_000, 512), 0);
    }

    #[test]
    fn wean_count_is_independent_of_vocab() {
        for v in [10, 1_000, 1_000_000] {
            assert_eq!(
                count_output_params(GeneratorKind::Wean, ScoreKind::Concat, v, 64),
                count_output_params(GeneratorKind::Wean, ScoreKind::Concat, 7, 64)
            );
            assert_eq!(
                count_output_params(GeneratorKind::SoftmaxLinear, ScoreKind::Concat, 2 * v, 64),
                2 * count_output_params(GeneratorKind::SoftmaxLinear, ScoreKind::Concat, v, 64)
            );
        }
    }

    #[test]
    fn stored_head_matches_counting_formula() {
        for kind in ScoreKind::ALL {
            let m = model(GeneratorKind::Wean, kind, 6);
            let want = count_output_params(GeneratorKind::Wean, kind, m.vocab.len() as u64, 6);
            assert_eq!(m.output_param_count() as u64, want);
        }
        let m = model(GeneratorKind::SoftmaxLinear, ScoreKind::General, 6);
        assert_eq!(m.output_param_count(), m.vocab.len() * 6);
    }

    #[test]
    fn dot_needs_equal_sizes() {
        let config = ModelConfig {
            score_kind: ScoreKind::Dot,
            hidden_size: 8,
            embedding_size: 6,
            ..ModelConfig::default()
        };
        assert!(matches!(config.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn encode_shape_and_causality() {
        let m = model(GeneratorKind::Wean, ScoreKind::General, 5);
        let mut g = Graph::new(&m.params);
        let (h_full, _) = m.encode(&mut g, &[4, 5, 6, 7]).unwrap();
        let (h_prefix, _) = m.encode(&mut g, &[4, 5]).unwrap();
        assert_eq!(g.value(h_full).shape(), &[4, 5]);
        assert_eq!(g.value(h_prefix).data(), &g.value(h_full).data()[..10]);
        assert!(matches!(m.encode(&mut g, &[]), Err(Error::Contract(_))));
        assert!(matches!(m.encode(&mut g, &[99]), Err(Error::Index { .. })));
    }

    #[test]
    fn zero_parameters_encode_to_zero() {
        let mut m = model(GeneratorKind::Wean, ScoreKind::General, 4);
        for p in m.params.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut g = Graph::new(&m.params);
        let (h, _) = m.encode(&mut g, &[4, 6, 5]).unwrap();
        assert!(g.value(h).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decode_step_context_properties() {
        let m = model(GeneratorKind::Wean, ScoreKind::General, 4);
        let mut g = Graph::new(&m.params);
        let table = g.param(m.embedding);
        let prev = g.gather_rows(table, &[SOS]).unwrap();

        let (h1, f1) = m.encode(&mut g, &[5]).unwrap();
        let (_, c, _) = m.decode_step(&mut g, prev, &f1, h1).unwrap();
        assert_eq!(g.value(c).data(), g.value(h1).data());

        let (h, f) = m.encode(&mut g, &[4, 7, 5, 8]).unwrap();
        let (s_a, c_a, _) = m.decode_step(&mut g, prev, &f, h).unwrap();
        let (s_b, c_b, _) = m.decode_step(&mut g, prev, &f, h).unwrap();
        assert_eq!(g.value(s_a).data(), g.value(s_b).data());
        assert_eq!(g.value(c_a).data(), g.value(c_b).data());
        let hv = g.value(h);
        for j in 0..4 {
            let col: Vec<f64> = (0..4).map(|i| hv.row(i)[j]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let cj = g.value(c_a).data()[j];
            assert!(lo - 1e-15 <= cj && cj <= hi + 1e-15);
        }
    }

    #[test]
    fn query_properties() {
        let m = model(GeneratorKind::Wean, ScoreKind::General, 3);
        let mut g = Graph::new(&m.params);
        let zero = g.input(Tensor::zeros(&[1, 3]));
        let q = m.make_query(&mut g, zero, zero).unwrap();
        assert_eq!(g.value(q).data(), &[0.0; 3]);
        let big = g.input(Tensor::full(&[1, 3], 50.0));
        let q = m.make_query(&mut g, big, zero).unwrap();
        assert!(g.value(q).data().iter().all(|v| v.abs() <= 1.0));

        let baseline = model(GeneratorKind::SoftmaxLinear, ScoreKind::General, 3);
        let mut g = Graph::new(&baseline.params);
        let zero = g.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            baseline.make_query(&mut g, zero, zero),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn relevance_examples() {
        let m = model(GeneratorKind::Wean, ScoreKind::Dot, 2);
        let mut g = Graph::new(&m.params);
        let q = g.input(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let e = g.input(Tensor::identity(2));
        let s = m.relevance(&mut g, q, e).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);

        let mut concat = model(GeneratorKind::Wean, ScoreKind::Concat, 2);
        if let GeneratorHead::Wean {
            score: ScoreFunction::Concat { v, .. },
        } = concat.head.clone()
        {
            concat.params.get_mut(v).value.data_mut().fill(0.0);
        }
        let mut g = Graph::new(&concat.params);
        let q = g.input(Tensor::new(vec![1, 2], vec![0.3, -0.8]).unwrap());
        let e = g.input(Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 4.0]).unwrap());
        let s = concat.relevance(&mut g, q, e).unwrap();
        assert_eq!(g.value(s).data(), &[0.0; 3]);
    }

    #[test]
    fn general_with_identity_equals_dot() {
        let mut general = model(GeneratorKind::Wean, ScoreKind::General, 3);
        if let GeneratorHead::Wean {
            score: ScoreFunction::General { weight },
        } = general.head.clone()
        {
            general.params.get_mut(weight).value = Tensor::identity(3);
        }
        let dot = model(GeneratorKind::Wean, ScoreKind::Dot, 3);
        let mut gg = Graph::new(&general.params);
        let mut gd = Graph::new(&dot.params);
        let qv = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 0.3, 0.3, -0.2]).unwrap();
        let ev = Tensor::new(vec![2, 3], vec![1.0, 0.5, -0.5, 2.0, 0.0, 1.0]).unwrap();
        let (q1, e1) = (gg.input(qv.clone()), gg.input(ev.clone()));
        let (q2, e2) = (gd.input(qv), gd.input(ev));
        let a = general.relevance(&mut gg, q1, e1).unwrap();
        let b = dot.relevance(&mut gd, q2, e2).unwrap();
        assert_eq!(gg.value(a).data(), gd.value(b).data());
    }

    #[test]
    fn equal_embeddings_give_uniform_distribution() {
        let mut m = model(GeneratorKind::Wean, ScoreKind::General, 3);
        let emb = m.embedding;
        m.params.get_mut(emb).value.data_mut().fill(0.25);
        let mut g = Graph::new(&m.params);
        let s = g.input(Tensor::new(vec![1, 3], vec![0.5, -0.1, 0.2]).unwrap());
        let c = g.input(Tensor::new(vec![1, 3], vec![0.0, 0.4, 0.7]).unwrap());
        let p = m.word_distribution(&mut g, s, c).unwrap();
        let n = m.candidates.len() as f64;
        for v in g.value(p).data() {
            assert!((v - 1.0 / n).abs() < 1e-15);
        }
    }

    #[test]
    fn matching_query_wins() {
        // q equal to candidate 5's embedding, candidates orthonormal, dot scoring
        let mut m = model(GeneratorKind::Wean, ScoreKind::Dot, 10);
        let emb = m.embedding;
        let n = m.vocab.len();
        m.params.get_mut(emb).value = Tensor::new(vec![n, 10], {
            let mut d = vec![0.0; n * 10];
            for i in 0..n.min(10) {
                d[i * 10 + i] = 1.0;
            }
            d
        })
        .unwrap();
        let mut g = Graph::new(&m.params);
        let q = g.input(Tensor::new(vec![1, 10], m.embedding_row(5).to_vec()).unwrap());
        let table = g.param(m.embedding);
        let values = g.gather_rows(table, m.candidates.word_ids()).unwrap();
        let scores = m.relevance(&mut g, q, values).unwrap();
        let p = g.softmax(scores, 1).unwrap();
        let dist = g.value(p).data().to_vec();
        let best = argmax(&dist);
        assert_eq!(best, 5);
        assert!(dist.iter().enumerate().all(|(i, v)| i == 5 || *v < dist[5]));
    }

    #[test]
    fn select_word_rules() {
        let m = model(GeneratorKind::Wean, ScoreKind::General, 3);
        let n = m.num_outputs();
        let mut one_hot = vec![0.0; n];
        one_hot[6] = 1.0;
        assert_eq!(m.select_word(&one_hot).0, m.output_words()[6]);
        let mut tie = vec![0.0; n];
        tie[4] = 0.5;
        tie[7] = 0.5;
        assert_eq!(m.select_word(&tie).0, m.output_words()[4]);
        let (word, value) = m.select_word(&one_hot);
        let row = m.params.value(m.embedding).row(word);
        assert!(std::ptr::eq(value, row));
    }

    #[test]
    fn candidate_set_validation() {
        let v = vocab();
        assert!(CandidateSet::from_ids(vec![0, 1, 2, 3, 5, 5], v.len()).is_err());
        assert!(CandidateSet::from_ids(vec![0, 1, 2, 3, 99], v.len()).is_err());
        assert!(CandidateSet::from_ids(vec![0, 1, 2, 5], v.len()).is_err());
        let c = CandidateSet::most_frequent(&v, 2);
        assert_eq!(c.word_ids(), &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn out_of_candidate_gold_maps_to_unk() {
        let v = vocab();
        let cands = CandidateSet::most_frequent(&v, 2);
        let config = ModelConfig {
            hidden_size: 4,
            embedding_size: 4,
            ..ModelConfig::default()
        };
        let m = Seq2SeqModel::new(config, v, cands, 0).unwrap();
        assert_eq!(m.output_index(5), 5);
        assert_eq!(m.output_index(8), UNK);
    }

    #[test]
    fn inference_state_matches_graph_step() {
        let m = model(GeneratorKind::Wean, ScoreKind::Concat, 4);
        let src = [4, 5, 9];
        let state = m.begin(&src).unwrap();
        let (dist, _) = m.next_distribution(&state, SOS).unwrap();
        let mut g = Graph::new(&m.params);
        let (h, f) = m.encode(&mut g, &src).unwrap();
        let table = g.param(m.embedding);
        let prev = g.gather_rows(table, &[SOS]).unwrap();
        let (s, c, _) = m.decode_step(&mut g, prev, &f, h).unwrap();
        let p = m.word_distribution(&mut g, s, c).unwrap();
        assert_eq!(g.value(p).data(), dist.as_slice());
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
