//! Corpus BLEU and ROUGE-1/2/L.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use crate::error::{Error, Result};

/// A corpus-level score with its per-sentence breakdown, all in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub metric: String,
    pub corpus: f64,
    pub per_sentence: Vec<f64>,
}

impl ScoreReport {
    /// Per-sentence values as `index<TAB>value` lines.
    pub fn sentence_tsv(&self) -> String {
        self.per_sentence
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{i}\t{v:.6}\n"))
            .collect()
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} corpus={:.2}", self.metric, self.corpus * 100.0)
    }
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches of `candidate` against all references, and the
/// candidate's n-gram total.
fn clipped_matches<T: Hash + Eq>(
    candidate: &[T],
    references: &[Vec<T>],
    n: usize,
) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in references {
        for (gram, c) in ngram_counts(r, n) {
            let slot = max_ref.entry(gram).or_insert(0);
            *slot = (*slot).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(gram, c)| (*c).min(max_ref.get(gram).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Length of the reference closest to `len`; the shorter wins ties.
fn closest_ref_len<T>(len: usize, references: &[Vec<T>]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(len), r))
        .unwrap_or(0)
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Corpus BLEU with clipped precisions up to `max_ngram`, uniform weights,
/// closest-reference brevity penalty and no smoothing. The per-sentence
/// values are add-one smoothed sentence BLEU, for diagnostics only.
pub fn bleu<T: Hash + Eq>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    max_ngram: usize,
) -> Result<ScoreReport> {
    if candidates.is_empty() {
        return Err(Error::contract("BLEU of an empty candidate list"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if max_ngram == 0 {
        return Err(Error::contract("max_ngram must be at least 1"));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::contract(
            "every candidate needs at least one reference",
        ));
    }
    let mut matched = vec![0usize; max_ngram];
    let mut total = vec![0usize; max_ngram];
    let (mut cand_len, mut ref_len) = (0, 0);
    let mut per_sentence = Vec::with_capacity(candidates.len());
    for (c, refs) in candidates.iter().zip(references) {
        let r = closest_ref_len(c.len(), refs);
        cand_len += c.len();
        ref_len += r;
        let mut log_sum = 0.0;
        for n in 1..=max_ngram {
            let (m, t) = clipped_matches(c, refs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
            log_sum += if m == 0 {
                (1.0 / (t + 1) as f64).ln()
            } else {
                (m as f64 / t as f64).ln()
            };
        }
        per_sentence.push(brevity_penalty(c.len(), r) * (log_sum / max_ngram as f64).exp());
    }
    let corpus = if matched.contains(&0) {
        0.0
    } else {
        let log_mean = matched
            .iter()
            .zip(&total)
            .map(|(&m, &t)| (m as f64 / t as f64).ln())
            .sum::<f64>()
            / max_ngram as f64;
        brevity_penalty(cand_len, ref_len) * log_mean.exp()
    };
    Ok(ScoreReport {
        metric: "BLEU".into(),
        corpus,
        per_sentence,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RougeVariant {
    R1,
    R2,
    RL,
}

impl RougeVariant {
    pub fn name(self) -> &'static str {
        match self {
            RougeVariant::R1 => "ROUGE-1",
            RougeVariant::R2 => "ROUGE-2",
            RougeVariant::RL => "ROUGE-L",
        }
    }
}

fn f1(overlap: usize, cand_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 {
        // two sentences too short to hold any unit agree trivially
        return if cand_total == 0 && ref_total == 0 {
            1.0
        } else {
            0.0
        };
    }
    let p = overlap as f64 / cand_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Mean per-sentence ROUGE F1 against a single reference each.
pub fn rouge<T: Hash + Eq>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    variant: RougeVariant,
) -> Result<ScoreReport> {
    if candidates.is_empty() {
        return Err(Error::contract("ROUGE of an empty candidate list"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let per_sentence: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| match variant {
            RougeVariant::R1 | RougeVariant::R2 => {
                let n = if variant == RougeVariant::R1 { 1 } else { 2 };
                let (cc, rc) = (ngram_counts(c, n), ngram_counts(r, n));
                let overlap = cc
                    .iter()
                    .map(|(g, k)| (*k).min(rc.get(g).copied().unwrap_or(0)))
                    .sum();
                f1(overlap, cc.values().sum(), rc.values().sum())
            }
            RougeVariant::RL => f1(lcs_len(c, r), c.len(), r.len()),
        })
        .collect();
    let corpus = per_sentence.iter().sum::<f64>() / per_sentence.len() as f64;
    Ok(ScoreReport {
        metric: variant.name().into(),
        corpus,
        per_sentence,
    })
}
