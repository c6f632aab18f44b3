//! Independent oracles shared by the integration and acceptance tests:
//! central finite differences, brute-force metric formulas and exhaustive
//! decoding search.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wean_core::data::Vocabulary;
use wean_core::decode::StepModel;
use wean_core::model::{
    CandidateSet, EmbeddingPaths, Example, GeneratorKind, ModelConfig, Seq2SeqModel,
};
use wean_core::nn::{AttentionLayer, LstmCell, LstmState, Mode, ScoreFunction, ScoreKind};
use wean_core::{Graph, ParamStore, Tensor, Var};

pub const STEP: f64 = 1e-4;

/// Relative error with a floor on the denominator so gradients that are
/// zero on both sides compare as equal.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Builds `f` on variables holding `inputs`, reduces the output to a scalar
/// with fixed random weights and compares every input gradient with central
/// differences. Returns the largest relative error.
pub fn check_with<F>(store: &ParamStore, inputs: Vec<Tensor>, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        Tensor::uniform(g.value(out).shape(), 1.0, &mut rng).into_data()
    };
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(x, w)| x * w)
            .sum()
    };

    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let weighted = g.mask_mul(out, weights.clone()).unwrap();
    let loss = g.sum(weighted);
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or(vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Parameter gradients of `loss_fn` against central differences on every
/// entry of the store.
pub fn check_params<F>(store: &mut ParamStore, loss_fn: F) -> f64
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g);
        let grads = g.backward(loss).unwrap();
        store
            .ids()
            .map(|id| grads.param(id).map(<[f64]>::to_vec))
            .collect::<Vec<_>>()
    };
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (id, analytic) in ids.into_iter().zip(grads) {
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            let mut at = |x: f64| {
                store.get_mut(id).value.data_mut()[j] = x;
                let mut g = Graph::new(store);
                let l = loss_fn(&mut g);
                g.value(l).item()
            };
            let numeric = (at(orig + STEP) - at(orig - STEP)) / (2.0 * STEP);
            store.get_mut(id).value.data_mut()[j] = orig;
            let a = analytic.as_ref().map_or(0.0, |v| v[j]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

type OpFn = Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Var>;

/// Every differentiable graph operation with input shapes to test it on.
pub fn graph_ops() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    fn op(
        name: &'static str,
        shapes: &[&[usize]],
        f: impl Fn(&mut Graph<'_>, &[Var]) -> Var + 'static,
    ) -> (&'static str, Vec<Vec<usize>>, OpFn) {
        (
            name,
            shapes.iter().map(|s| s.to_vec()).collect(),
            Box::new(f),
        )
    }
    vec![
        op("matmul", &[&[3, 4], &[4, 2]], |g, v| {
            g.matmul(v[0], v[1]).unwrap()
        }),
        op("matmul_nt", &[&[3, 4], &[5, 4]], |g, v| {
            g.matmul_nt(v[0], v[1]).unwrap()
        }),
        op("add", &[&[2, 3], &[2, 3]], |g, v| {
            g.add(v[0], v[1]).unwrap()
        }),
        op("add_row", &[&[3, 4], &[4]], |g, v| {
            g.add_row(v[0], v[1]).unwrap()
        }),
        op("mul", &[&[2, 3], &[2, 3]], |g, v| {
            g.mul(v[0], v[1]).unwrap()
        }),
        op("scale", &[&[2, 3]], |g, v| g.scale(v[0], -1.7)),
        op("mask_mul", &[&[2, 2]], |g, v| {
            g.mask_mul(v[0], vec![0.0, 2.5, 1.0, -1.0]).unwrap()
        }),
        op("tanh", &[&[3, 3]], |g, v| g.tanh(v[0])),
        op("sigmoid", &[&[3, 3]], |g, v| g.sigmoid(v[0])),
        op("softmax rows", &[&[3, 5]], |g, v| {
            g.softmax(v[0], 1).unwrap()
        }),
        op("softmax columns", &[&[3, 5]], |g, v| {
            g.softmax(v[0], 0).unwrap()
        }),
        op("softmax middle axis", &[&[2, 3, 2]], |g, v| {
            g.softmax(v[0], 1).unwrap()
        }),
        op("concat columns", &[&[2, 3], &[2, 2]], |g, v| {
            g.concat(v[0], v[1], 1).unwrap()
        }),
        op("concat rows", &[&[2, 3], &[1, 3]], |g, v| {
            g.concat(v[0], v[1], 0).unwrap()
        }),
        op("slice_cols", &[&[3, 6]], |g, v| {
            g.slice_cols(v[0], 2, 3).unwrap()
        }),
        op("rows", &[&[5, 2]], |g, v| g.rows(v[0], 1, 3).unwrap()),
        op("concat_rows", &[&[1, 3], &[2, 3], &[1, 3]], |g, v| {
            g.concat_rows(v).unwrap()
        }),
        op("gather_rows", &[&[4, 3]], |g, v| {
            g.gather_rows(v[0], &[2, 0, 2, 3]).unwrap()
        }),
        op("cross_entropy", &[&[3, 4]], |g, v| {
            g.cross_entropy(v[0], &[1, 3, 1]).unwrap()
        }),
        op("sum", &[&[2, 4]], |g, v| g.sum(v[0])),
        op("additive_scores", &[&[2, 3], &[4, 3], &[3]], |g, v| {
            g.additive_scores(v[0], v[1], v[2]).unwrap()
        }),
    ]
}

/// Largest relative error of each graph operation and layer.
pub fn all_op_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let store = ParamStore::new();
    for (i, (name, shapes, f)) in graph_ops().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let inputs = shapes.iter().map(|s| random(s, &mut rng)).collect();
        out.push((name.to_string(), check_with(&store, inputs, 99, f)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "cell", 3, 4, &mut rng);
    // larger weights than the default init so the gates are far from linear
    scale_all(&mut store, 8.0);
    let x = random(&[1, 3], &mut rng);
    let h0 = random(&[1, 4], &mut rng);
    let c0 = random(&[1, 4], &mut rng);
    let err = check_params(&mut store, |g| {
        let xv = g.input(x.clone());
        let state = LstmState {
            h: g.input(h0.clone()),
            c: g.input(c0.clone()),
        };
        let s1 = cell.step(g, xv, state).unwrap();
        let s2 = cell.step(g, xv, s1).unwrap();
        let both = g.concat(s2.h, s2.c, 1).unwrap();
        let t = g.tanh(both);
        g.sum(t)
    });
    out.push(("lstm parameters".into(), err));
    let inputs = vec![
        random(&[4, 3], &mut rng),
        random(&[1, 4], &mut rng),
        random(&[1, 4], &mut rng),
    ];
    let err = check_with(&store, inputs, 7, |g, v| {
        let (seq, last) = cell.run(g, v[0], LstmState { h: v[1], c: v[2] }).unwrap();
        g.concat(seq, last.c, 0).unwrap()
    });
    out.push(("lstm inputs".into(), err));

    for kind in ScoreKind::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let layer = AttentionLayer {
            score: ScoreFunction::new(kind, &mut store, "att", 3, 3, &mut rng).unwrap(),
        };
        scale_all(&mut store, 10.0);
        let inputs = vec![random(&[2, 3], &mut rng), random(&[4, 3], &mut rng)];
        let err = check_with(&store, inputs.clone(), 9, |g, v| {
            let (ctx, weights) = layer.attend(g, v[0], v[1]).unwrap();
            g.concat(ctx, weights, 1).unwrap()
        });
        out.push((format!("attention {} inputs", kind.name()), err));
        let err = check_params(&mut store, |g| {
            let q = g.input(inputs[0].clone());
            let m = g.input(inputs[1].clone());
            let (ctx, _) = layer.attend(g, q, m).unwrap();
            let t = g.tanh(ctx);
            g.sum(t)
        });
        out.push((format!("attention {} parameters", kind.name()), err));
    }
    out
}

pub fn scale_all(store: &mut ParamStore, factor: f64) {
    for p in store.iter_mut() {
        for x in p.value.data_mut() {
            *x *= factor;
        }
    }
}

/// Vocabulary of `words` plain words after the four specials.
pub fn word_vocab(words: usize) -> Vocabulary {
    let tokens: Vec<String> = (0..words).map(|i| format!("t{i}")).collect();
    Vocabulary::build(&[tokens], words).unwrap()
}

/// Vocabulary 12 (8 words), hidden 8, two layers, weights scaled up from
/// the small init so every path carries signal.
pub fn tiny_model(generator: GeneratorKind, score: ScoreKind, seed: u64) -> Seq2SeqModel {
    let vocab = word_vocab(8);
    assert_eq!(vocab.len(), 12);
    let candidates = CandidateSet::most_frequent(&vocab, 8);
    let config = ModelConfig {
        generator,
        score_kind: score,
        attention_kind: ScoreKind::General,
        layers: 2,
        hidden_size: 8,
        embedding_size: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = Seq2SeqModel::new(config, vocab, candidates, seed).unwrap();
    scale_all(&mut model.params, 6.0);
    model
}

const PAIRS: [(&[usize], &[usize], &[usize]); 2] = [
    (&[4, 7, 9], &[1, 5, 10], &[5, 10, 2]),
    (&[11, 6], &[1, 8, 4, 6], &[8, 4, 6, 2]),
];

/// The two-pair batch used by the end-to-end checks.
pub fn two_pairs() -> Vec<Example<'static>> {
    PAIRS
        .iter()
        .map(|(s, i, o)| Example {
            source: s,
            inputs: i,
            gold: o,
        })
        .collect()
}

pub fn model_loss(model: &Seq2SeqModel, g: &mut Graph<'_>, paths: EmbeddingPaths) -> Var {
    let stats = model
        .batch_loss(
            g,
            &two_pairs(),
            Mode::Eval,
            &mut ChaCha8Rng::seed_from_u64(0),
            paths,
        )
        .unwrap();
    g.scale(stats.loss, 1.0 / stats.tokens as f64)
}

/// Largest relative error over `samples` randomly drawn parameter entries
/// of the per-token loss on the two-pair batch.
pub fn sampled_model_error(model: &mut Seq2SeqModel, samples: usize, seed: u64) -> f64 {
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut g = Graph::new(&model.params);
        let loss = model_loss(model, &mut g, EmbeddingPaths::ALL);
        let grads = g.backward(loss).unwrap();
        model
            .params
            .ids()
            .map(|id| grads.param(id).map(<[f64]>::to_vec))
            .collect()
    };
    let ids: Vec<_> = model.params.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let id = ids[rng.gen_range(0..ids.len())];
        let j = rng.gen_range(0..model.params.value(id).len());
        let orig = model.params.value(id).data()[j];
        let mut at = |x: f64| {
            model.params.get_mut(id).value.data_mut()[j] = x;
            let mut g = Graph::new(&model.params);
            let l = model_loss(model, &mut g, EmbeddingPaths::ALL);
            g.value(l).item()
        };
        let numeric = (at(orig + STEP) - at(orig - STEP)) / (2.0 * STEP);
        model.params.get_mut(id).value.data_mut()[j] = orig;
        let a = analytic[id.index()].as_ref().map_or(0.0, |v| v[j]);
        worst = worst.max(rel_err(a, numeric));
    }
    worst
}

/// Embedding-table gradient with only the given uses of the table live.
pub fn embedding_grad(model: &Seq2SeqModel, paths: EmbeddingPaths) -> Vec<f64> {
    let mut g = Graph::new(&model.params);
    let loss = model_loss(model, &mut g, paths);
    g.backward(loss)
        .unwrap()
        .param(model.embedding)
        .map(<[f64]>::to_vec)
        .unwrap()
}

pub fn ngrams(tokens: &[usize], n: usize) -> Vec<&[usize]> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| &tokens[i..i + n]).collect()
}

fn occurrences(gram: &[usize], grams: &[&[usize]]) -> usize {
    grams.iter().filter(|g| **g == gram).count()
}

/// Corpus BLEU straight from the formula, counting by linear scans.
pub fn brute_bleu(cands: &[Vec<usize>], refs: &[Vec<Vec<usize>>]) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=4 {
        let (mut num, mut den) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            let cg = ngrams(c, n);
            den += cg.len();
            let distinct: HashSet<&[usize]> = cg.iter().copied().collect();
            for gram in distinct {
                let in_cand = occurrences(gram, &cg);
                let max_ref = rs
                    .iter()
                    .map(|r| occurrences(gram, &ngrams(r, n)))
                    .max()
                    .unwrap();
                num += in_cand.min(max_ref);
            }
        }
        if num == 0 {
            return 0.0;
        }
        log_p += (num as f64 / den as f64).ln() / 4.0;
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            let mut best = rs[0].len();
            for r in rs {
                let (d, bd) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
                if d < bd || (d == bd && r.len() < best) {
                    best = r.len();
                }
            }
            best
        })
        .sum();
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * log_p.exp()
}

/// Longest common subsequence by trying every subsequence of `a`.
pub fn brute_lcs(a: &[usize], b: &[usize]) -> usize {
    assert!(a.len() <= 16);
    let is_subsequence = |sub: &[usize]| {
        let mut it = b.iter();
        sub.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let sub: Vec<usize> = (0..a.len())
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| a[i])
                .collect();
            is_subsequence(&sub).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

fn brute_f1(overlap: usize, c: usize, r: usize) -> f64 {
    if c == 0 && r == 0 {
        return 1.0;
    }
    if overlap == 0 {
        return 0.0;
    }
    let (p, rec) = (overlap as f64 / c as f64, overlap as f64 / r as f64);
    2.0 * p * rec / (p + rec)
}

/// Mean sentence ROUGE F1 with `n` = 0 meaning ROUGE-L.
pub fn brute_rouge(cands: &[Vec<usize>], refs: &[Vec<usize>], n: usize) -> f64 {
    let total: f64 = cands
        .iter()
        .zip(refs)
        .map(|(c, r)| {
            if n == 0 {
                return brute_f1(brute_lcs(c, r), c.len(), r.len());
            }
            let (cg, rg) = (ngrams(c, n), ngrams(r, n));
            let distinct: HashSet<&[usize]> = cg.iter().copied().collect();
            let overlap = distinct
                .into_iter()
                .map(|g| occurrences(g, &cg).min(occurrences(g, &rg)))
                .sum();
            brute_f1(overlap, cg.len(), rg.len())
        })
        .sum();
    total / cands.len() as f64
}

/// Best `</s>`-terminated output of at most `max_len` tokens by length
/// normalised log-probability, found by visiting every sequence. Returns
/// the words (without `</s>`) and the score.
pub fn exhaustive_best<M: StepModel>(
    model: &M,
    source: &[usize],
    max_len: usize,
) -> (Vec<usize>, f64) {
    fn visit<M: StepModel>(
        model: &M,
        state: &M::State,
        prev: usize,
        prefix: &mut Vec<usize>,
        log_prob: f64,
        max_len: usize,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        let (dist, next) = model.step(state, prev).unwrap();
        for (i, p) in dist.iter().enumerate() {
            if *p <= 0.0 {
                continue;
            }
            let word = model.output_word(i);
            let lp = log_prob + p.ln();
            if word == model.eos() {
                let score = lp / (prefix.len() + 1) as f64;
                if best.as_ref().is_none_or(|(_, s)| score > *s) {
                    *best = Some((prefix.clone(), score));
                }
            } else if prefix.len() + 1 < max_len {
                prefix.push(word);
                visit(model, &next, word, prefix, lp, max_len, best);
                prefix.pop();
            }
        }
    }
    let mut best = None;
    let start = model.begin(source).unwrap();
    visit(
        model,
        &start,
        model.sos(),
        &mut Vec::new(),
        0.0,
        max_len,
        &mut best,
    );
    best.expect("some sequence ends in </s>")
}

/// Step model over output indices whose distribution depends only on
/// whether anything has been generated yet.
pub struct TwoPhase {
    pub first: Vec<f64>,
    pub later: Vec<f64>,
    pub eos: usize,
}

impl StepModel for TwoPhase {
    type State = usize;

    fn begin(&self, _: &[usize]) -> wean_core::Result<usize> {
        Ok(0)
    }

    fn step(&self, t: &usize, _: usize) -> wean_core::Result<(Vec<f64>, usize)> {
        Ok((
            if *t == 0 {
                self.first.clone()
            } else {
                self.later.clone()
            },
            t + 1,
        ))
    }

    fn output_word(&self, index: usize) -> usize {
        index
    }

    fn sos(&self) -> usize {
        usize::MAX
    }

    fn eos(&self) -> usize {
        self.eos
    }
}

/// One-layer model over `words` plain words with weights scaled well past
/// the init range so the output distributions are far from uniform.
pub fn small_model(
    generator: GeneratorKind,
    score: ScoreKind,
    words: usize,
    hidden: usize,
    seed: u64,
) -> Seq2SeqModel {
    let vocab = word_vocab(words);
    let candidates = CandidateSet::most_frequent(&vocab, words);
    let config = ModelConfig {
        generator,
        score_kind: score,
        layers: 1,
        hidden_size: hidden,
        embedding_size: hidden,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = Seq2SeqModel::new(config, vocab, candidates, seed).unwrap();
    scale_all(&mut model.params, 20.0);
    model
}

/// The `index`-th model of the decoding suite together with a source
/// sentence for it. Heads and score kinds rotate with the index.
pub fn decoding_case(index: u64) -> (Seq2SeqModel, Vec<usize>) {
    let generator = if index.is_multiple_of(2) {
        GeneratorKind::Wean
    } else {
        GeneratorKind::SoftmaxLinear
    };
    let score = ScoreKind::ALL[(index / 2 % 3) as usize];
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + index);
    let words = rng.gen_range(2..6);
    let model = small_model(generator, score, words, 4, index);
    let len = rng.gen_range(1..6);
    let source = (0..len).map(|_| rng.gen_range(4..4 + words)).collect();
    (model, source)
}

/// The three-token example: `a` then `</s>` beats starting with `b` or
/// stopping at once.
pub fn three_token_example() -> TwoPhase {
    TwoPhase {
        first: vec![0.6, 0.3, 0.1],
        later: vec![0.05, 0.05, 0.9],
        eos: 2,
    }
}

/// Cases of the decoding suite where the best finished hypothesis gets
/// worse as the beam widens from 1 to `max_width`. A result with no
/// finished hypothesis scores minus infinity.
pub fn beam_width_drops(cases: u64, max_width: usize) -> Vec<String> {
    let mut drops = Vec::new();
    for index in 0..cases {
        let (model, source) = decoding_case(index);
        let mut best_so_far = f64::NEG_INFINITY;
        for width in 1..=max_width {
            let top = &wean_core::decode::beam_search(&model, &source, width, 10).unwrap()[0];
            let score = if top.finished {
                top.normalized_score()
            } else {
                f64::NEG_INFINITY
            };
            if score < best_so_far {
                drops.push(format!(
                    "case {index} width {width}: {best_so_far:.4} -> {score:.4}"
                ));
                break;
            }
            best_so_far = score;
        }
    }
    drops
}
