//! LSTM cells and stacks, Luong-style score functions, attention and
//! inverted dropout, all recorded on a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Half-width of the uniform initialisation range for every weight.
pub const INIT_RANGE: f64 = 0.08;

/// Initial value of the forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

/// Whether dropout is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; evaluation is the
/// identity.
pub fn dropout<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..g.value(x).len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    g.mask_mul(x, mask)
}

/// Recurrent state of one LSTM layer; both are `[1 × hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph<'_>, hidden: usize) -> Self {
        Self {
            h: g.input(Tensor::zeros(&[1, hidden])),
            c: g.input(Tensor::zeros(&[1, hidden])),
        }
    }
}

/// A standard LSTM cell with a forget gate and no peepholes.
///
/// Gate blocks are stacked in the order `[input, forget, cell, output]`
/// along the first axis of both weight matrices and the bias.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_weights: ParamId,
    pub recurrent_weights: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let d = hidden_size;
        let input_weights = store.add(
            format!("{name}.input_weights"),
            Tensor::uniform(&[4 * d, input_size], INIT_RANGE, rng),
        );
        let recurrent_weights = store.add(
            format!("{name}.recurrent_weights"),
            Tensor::uniform(&[4 * d, d], INIT_RANGE, rng),
        );
        let mut bias = Tensor::zeros(&[4 * d]);
        bias.data_mut()[d..2 * d].fill(FORGET_BIAS);
        let bias = store.add(format!("{name}.bias"), bias);
        Self {
            input_weights,
            recurrent_weights,
            bias,
            input_size,
            hidden_size,
        }
    }

    /// One step on `x` (`[1 × input_size]`).
    pub fn step(&self, g: &mut Graph<'_>, x: Var, state: LstmState) -> Result<LstmState> {
        let shape = g.value(x).shape();
        if shape != [1, self.input_size] {
            return Err(Error::dim(format!(
                "lstm input {shape:?}, expected [1, {}]",
                self.input_size
            )));
        }
        let w = g.param(self.input_weights);
        let b = g.param(self.bias);
        let projected = g.matmul_nt(x, w)?;
        let projected = g.add_row(projected, b)?;
        self.step_projected(g, projected, state)
    }

    /// Step with the input already projected and biased (`[1 × 4d]`).
    fn step_projected(
        &self,
        g: &mut Graph<'_>,
        projected: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        let d = self.hidden_size;
        let u = g.param(self.recurrent_weights);
        let recurrent = g.matmul_nt(state.h, u)?;
        let z = g.add(projected, recurrent)?;
        let i = g.slice_cols(z, 0, d)?;
        let f = g.slice_cols(z, d, d)?;
        let cand = g.slice_cols(z, 2 * d, d)?;
        let o = g.slice_cols(z, 3 * d, d)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let kept = g.mul(f, state.c)?;
        let written = g.mul(i, cand)?;
        let c = g.add(kept, written)?;
        let squashed = g.tanh(c);
        let h = g.mul(o, squashed)?;
        Ok(LstmState { h, c })
    }

    /// Runs over every row of `xs` (`[N × input_size]`). Returns the hidden
    /// states stacked as `[N × hidden]` and the final state.
    pub fn run(&self, g: &mut Graph<'_>, xs: Var, init: LstmState) -> Result<(Var, LstmState)> {
        let shape = g.value(xs).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_size || shape[0] == 0 {
            return Err(Error::dim(format!(
                "lstm sequence {shape:?}, expected [N ≥ 1, {}]",
                self.input_size
            )));
        }
        let w = g.param(self.input_weights);
        let b = g.param(self.bias);
        let projected = g.matmul_nt(xs, w)?;
        let projected = g.add_row(projected, b)?;
        let mut state = init;
        let mut outputs = Vec::with_capacity(shape[0]);
        for t in 0..shape[0] {
            let row = g.rows(projected, t, 1)?;
            state = self.step_projected(g, row, state)?;
            outputs.push(state.h);
        }
        Ok((g.concat_rows(&outputs)?, state))
    }
}

/// Stacked LSTM layers; dropout is applied between layers, never on the
/// recurrent connections.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layers: Vec<LstmCell>,
}

impl LstmStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        num_layers: usize,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let input = if l == 0 { input_size } else { hidden_size };
                LstmCell::new(store, &format!("{name}.{l}"), input, hidden_size, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].hidden_size
    }

    pub fn zero_states(&self, g: &mut Graph<'_>) -> Vec<LstmState> {
        self.layers
            .iter()
            .map(|l| LstmState::zeros(g, l.hidden_size))
            .collect()
    }

    /// Runs the whole sequence layer by layer. Returns the top layer's
    /// outputs and every layer's final state.
    pub fn run<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        xs: Var,
        init: &[LstmState],
        dropout_rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Vec<LstmState>)> {
        if init.len() != self.layers.len() {
            return Err(Error::dim(format!(
                "{} initial states for {} layers",
                init.len(),
                self.layers.len()
            )));
        }
        let mut input = xs;
        let mut finals = Vec::with_capacity(self.layers.len());
        for (l, (cell, state)) in self.layers.iter().zip(init).enumerate() {
            if l > 0 {
                input = dropout(g, input, dropout_rate, mode, rng)?;
            }
            let (out, last) = cell.run(g, input, *state)?;
            finals.push(last);
            input = out;
        }
        Ok((input, finals))
    }

    /// A single time step through every layer (no dropout).
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        states: &[LstmState],
    ) -> Result<(Var, Vec<LstmState>)> {
        if states.len() != self.layers.len() {
            return Err(Error::dim(format!(
                "{} states for {} layers",
                states.len(),
                self.layers.len()
            )));
        }
        let mut input = x;
        let mut next = Vec::with_capacity(states.len());
        for (cell, state) in self.layers.iter().zip(states) {
            let s = cell.step(g, input, *state)?;
            input = s.h;
            next.push(s);
        }
        Ok((input, next))
    }
}

/// Luong-style score function family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// `qᵀk`
    Dot,
    /// `qᵀ W k`
    General,
    /// `vᵀ tanh(W_q q + W_k k)`
    Concat,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Dot, ScoreKind::General, ScoreKind::Concat];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Dot => "dot",
            ScoreKind::General => "general",
            ScoreKind::Concat => "concat",
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "dot" => Ok(ScoreKind::Dot),
            "general" => Ok(ScoreKind::General),
            "concat" => Ok(ScoreKind::Concat),
            other => Err(format!(
                "unknown score kind `{other}` (dot, general, concat)"
            )),
        }
    }
}

/// A score function with its parameters, scoring each query row against
/// each key row.
#[derive(Clone, Debug)]
pub enum ScoreFunction {
    Dot,
    /// `weight` is `[query_dim × key_dim]`.
    General {
        weight: ParamId,
    },
    /// `query_proj` is `[hidden × query_dim]`, `key_proj` is
    /// `[hidden × key_dim]`, `v` has `hidden` entries.
    Concat {
        query_proj: ParamId,
        key_proj: ParamId,
        v: ParamId,
    },
}

impl ScoreFunction {
    pub fn new<R: Rng + ?Sized>(
        kind: ScoreKind,
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            ScoreKind::Dot => {
                if query_dim != key_dim {
                    return Err(Error::dim(format!(
                        "dot scoring needs equal query and key sizes, got {query_dim} and {key_dim}"
                    )));
                }
                ScoreFunction::Dot
            }
            ScoreKind::General => ScoreFunction::General {
                weight: store.add(
                    format!("{name}.weight"),
                    Tensor::uniform(&[query_dim, key_dim], INIT_RANGE, rng),
                ),
            },
            ScoreKind::Concat => ScoreFunction::Concat {
                query_proj: store.add(
                    format!("{name}.query_proj"),
                    Tensor::uniform(&[query_dim, query_dim], INIT_RANGE, rng),
                ),
                key_proj: store.add(
                    format!("{name}.key_proj"),
                    Tensor::uniform(&[query_dim, key_dim], INIT_RANGE, rng),
                ),
                v: store.add(
                    format!("{name}.v"),
                    Tensor::uniform(&[query_dim], INIT_RANGE, rng),
                ),
            },
        })
    }

    pub fn kind(&self) -> ScoreKind {
        match self {
            ScoreFunction::Dot => ScoreKind::Dot,
            ScoreFunction::General { .. } => ScoreKind::General,
            ScoreFunction::Concat { .. } => ScoreKind::Concat,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            ScoreFunction::Dot => vec![],
            ScoreFunction::General { weight } => vec![*weight],
            ScoreFunction::Concat {
                query_proj,
                key_proj,
                v,
            } => vec![*query_proj, *key_proj, *v],
        }
    }

    /// Scores `queries` (`[T × q]`) against `keys` (`[N × k]`), giving `[T × N]`.
    pub fn scores(&self, g: &mut Graph<'_>, queries: Var, keys: Var) -> Result<Var> {
        match self {
            ScoreFunction::Dot => g.matmul_nt(queries, keys),
            ScoreFunction::General { weight } => {
                let w = g.param(*weight);
                // row i of `mapped` is W·keyᵢ
                let mapped = g.matmul_nt(keys, w)?;
                g.matmul_nt(queries, mapped)
            }
            ScoreFunction::Concat {
                query_proj,
                key_proj,
                v,
            } => {
                let wq = g.param(*query_proj);
                let wk = g.param(*key_proj);
                let v = g.param(*v);
                let q = g.matmul_nt(queries, wq)?;
                let k = g.matmul_nt(keys, wk)?;
                g.additive_scores(q, k, v)
            }
        }
    }
}

/// Encoder-decoder attention: a softmax over scores of each decoder state
/// against every encoder state, and the weighted sum of encoder states.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub score: ScoreFunction,
}

impl AttentionLayer {
    /// Returns the contexts `[T × d]` and the weights `[T × N]`.
    pub fn attend(&self, g: &mut Graph<'_>, queries: Var, memory: Var) -> Result<(Var, Var)> {
        let mshape = g.value(memory).shape();
        if mshape.len() != 2 || mshape[0] == 0 {
            return Err(Error::contract(format!(
                "attention over an empty source (memory shape {mshape:?})"
            )));
        }
        let scores = self.score.scores(g, queries, memory)?;
        let weights = g.softmax(scores, 1)?;
        let context = g.matmul(weights, memory)?;
        Ok((context, weights))
    }
}
