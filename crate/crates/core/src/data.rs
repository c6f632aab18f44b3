//! Vocabulary, tokenisation, parallel corpora, synthetic tasks and batching.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Sequences longer than this are truncated when encoded.
pub const MAX_SOURCE_LEN: usize = 100;
pub const MAX_TARGET_LEN: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenization {
    /// Split on whitespace.
    #[default]
    Word,
    /// One token per non-whitespace character.
    Char,
}

impl std::str::FromStr for Tokenization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "word" => Ok(Tokenization::Word),
            "char" => Ok(Tokenization::Char),
            other => Err(format!("unknown tokenization `{other}` (word, char)")),
        }
    }
}

pub fn tokenize(text: &str, mode: Tokenization) -> Vec<String> {
    match mode {
        Tokenization::Word => text.split_whitespace().map(str::to_owned).collect(),
        Tokenization::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    }
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S], mode: Tokenization) -> String {
    let sep = match mode {
        Tokenization::Word => " ",
        Tokenization::Char => "",
    };
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(sep)
}

/// Bidirectional token/id map. Ids 0..4 are the specials
/// (`<pad>`, `<s>`, `</s>`, `<unk>`); the rest follow in descending
/// frequency, ties broken by first occurrence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `n` most frequent tokens of `sources`.
    pub fn build<S: AsRef<[String]>>(sources: &[S], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("vocabulary size n must be at least 1"));
        }
        if sources.iter().all(|s| s.as_ref().is_empty()) {
            return Err(Error::contract(
                "cannot build a vocabulary from an empty corpus",
            ));
        }
        // (count, first position)
        let mut seen: HashMap<&str, (u64, usize)> = HashMap::new();
        let mut order = 0;
        for sentence in sources {
            for tok in sentence.as_ref() {
                let e = seen.entry(tok.as_str()).or_insert((0, order));
                e.0 += 1;
                order += 1;
            }
        }
        let mut ranked: Vec<(&str, u64, usize)> = seen
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(t))
            .map(|(t, (c, first))| (t, c, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(n);

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; SPECIALS.len()];
        for (t, c, _) in ranked {
            tokens.push(t.to_owned());
            counts.push(c);
        }
        Ok(Self::from_parts(tokens, counts))
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            counts,
            index,
        }
    }

    /// Rebuilds from a token list in id order (e.g. a checkpoint).
    pub fn from_tokens(tokens: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if tokens.len() < SPECIALS.len()
            || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s)
            || counts.len() != tokens.len()
        {
            return Err(Error::contract(
                "vocabulary must start with the four specials",
            ));
        }
        let vocab = Self::from_parts(tokens, counts);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::contract("vocabulary contains duplicate tokens"));
        }
        Ok(vocab)
    }

    /// Restores the lookup table after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Tokens for `ids`, skipping padding and sequence markers.
    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .filter(|&&i| i != PAD && i != SOS && i != EOS)
            .map(|&i| self.tokens[i].as_str())
            .collect()
    }

    /// One token per line in id order, specials first.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Aligned sentence pairs as token strings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
}

impl TextCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<&[String]> {
        self.pairs.iter().map(|(s, _)| s.as_slice()).collect()
    }

    /// Splits off everything from index `at` onwards.
    pub fn split_off(&mut self, at: usize) -> TextCorpus {
        TextCorpus {
            pairs: self.pairs.split_off(at.min(self.pairs.len())),
        }
    }

    pub fn encode(&self, vocab: &Vocabulary) -> ParallelCorpus {
        let pairs = self
            .pairs
            .iter()
            .map(|(s, t)| {
                let mut s = vocab.encode(s);
                let mut t = vocab.encode(t);
                s.truncate(MAX_SOURCE_LEN);
                t.truncate(MAX_TARGET_LEN);
                (s, t)
            })
            .collect();
        ParallelCorpus { pairs }
    }

    /// Writes `source<TAB>target` lines.
    pub fn write_tsv(&self, path: &Path, mode: Tokenization) -> Result<()> {
        let mut out = Vec::new();
        for (s, t) in &self.pairs {
            writeln!(out, "{}\t{}", detokenize(s, mode), detokenize(t, mode))
                .expect("in-memory write");
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Reads a UTF-8 file of `source<TAB>target` lines. Blank lines are
/// ignored; pairs with an empty side after tokenisation are dropped with a
/// warning.
pub fn load_tsv(path: &Path, mode: Tokenization) -> Result<TextCorpus> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected exactly one tab, found {}", fields.len() - 1),
            });
        }
        let (s, t) = (tokenize(fields[0], mode), tokenize(fields[1], mode));
        if s.is_empty() || t.is_empty() {
            log::warn!(
                "{}:{}: empty side after tokenization, skipped",
                path.display(),
                i + 1
            );
            continue;
        }
        pairs.push((s, t));
    }
    if pairs.is_empty() {
        log::warn!("{}: no sentence pairs", path.display());
    }
    Ok(TextCorpus { pairs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticTask {
    Copy,
    Reverse,
    Synonym,
}

impl std::str::FromStr for SyntheticTask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "synonym" => Ok(SyntheticTask::Synonym),
            other => Err(format!("unknown task `{other}` (copy, reverse, synonym)")),
        }
    }
}

/// Members per synonym class (the last class may be smaller).
pub const SYNONYM_CLASS_SIZE: usize = 4;

/// Zipf exponent of the synthetic token distribution.
pub const ZIPF_EXPONENT: f64 = 1.0;

pub fn synthetic_token(i: usize) -> String {
    format!("w{i}")
}

/// Seeded partition of `0..vocab_size` into synonym classes together with
/// the substitution each word is rewritten to.
#[derive(Clone, Debug)]
pub struct SynonymMap {
    /// Class id of each word.
    pub class: Vec<usize>,
    /// Replacement word for each word; always a member of the same class,
    /// and a different word whenever the class has more than one member.
    pub substitute: Vec<usize>,
}

impl SynonymMap {
    pub fn generate(vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F5E_ED5E_ED00);
        let mut words: Vec<usize> = (0..vocab_size).collect();
        words.shuffle(&mut rng);
        let mut class = vec![0; vocab_size];
        let mut substitute = vec![0; vocab_size];
        for (c, members) in words.chunks(SYNONYM_CLASS_SIZE).enumerate() {
            // Rotating a shuffled class by one is a seeded derangement.
            for (j, &w) in members.iter().enumerate() {
                class[w] = c;
                substitute[w] = members[(j + 1) % members.len()];
            }
        }
        Self { class, substitute }
    }
}

/// Deterministic synthetic parallel corpus. Sentence lengths are uniform
/// in `1..=max_len`; words are drawn from a Zipf distribution over
/// `vocab_size` word types.
pub fn make_synthetic(
    task: SyntheticTask,
    size: usize,
    vocab_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<TextCorpus> {
    if vocab_size == 0 || max_len == 0 {
        return Err(Error::contract("vocab_size and max_len must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = Zipf::new(vocab_size as u64, ZIPF_EXPONENT)
        .map_err(|e| Error::contract(format!("zipf sampler: {e}")))?;
    let synonyms = (task == SyntheticTask::Synonym).then(|| SynonymMap::generate(vocab_size, seed));
    let mut pairs = Vec::with_capacity(size);
    for _ in 0..size {
        let len = rng.gen_range(1..=max_len);
        let src: Vec<usize> = (0..len)
            .map(|_| zipf.sample(&mut rng) as usize - 1)
            .collect();
        let tgt: Vec<usize> = match task {
            SyntheticTask::Copy => src.clone(),
            SyntheticTask::Reverse => src.iter().rev().copied().collect(),
            SyntheticTask::Synonym => {
                let map = synonyms.as_ref().expect("synonym map");
                src.iter().map(|&w| map.substitute[w]).collect()
            }
        };
        let words = |ids: &[usize]| ids.iter().map(|&i| synthetic_token(i)).collect();
        pairs.push((words(&src), words(&tgt)));
    }
    Ok(TextCorpus { pairs })
}

/// Aligned sentence pairs as vocabulary ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// A padded mini-batch.
///
/// `decoder_input` rows are `<s> y₁ … y_T` and `gold` rows `y₁ … y_T </s>`,
/// both padded to the same width; `mask` is 1 exactly on the real `gold`
/// positions (including `</s>`).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source: Vec<Vec<usize>>,
    pub source_lengths: Vec<usize>,
    pub decoder_input: Vec<Vec<usize>>,
    pub gold: Vec<Vec<usize>>,
    pub target_lengths: Vec<usize>,
    pub mask: Vec<Vec<f64>>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&(Vec<usize>, Vec<usize>)]) -> Self {
        let src_width = pairs.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
        let tgt_width = pairs.iter().map(|(_, t)| t.len() + 1).max().unwrap_or(0);
        let mut batch = Batch {
            source: Vec::with_capacity(pairs.len()),
            source_lengths: Vec::with_capacity(pairs.len()),
            decoder_input: Vec::with_capacity(pairs.len()),
            gold: Vec::with_capacity(pairs.len()),
            target_lengths: Vec::with_capacity(pairs.len()),
            mask: Vec::with_capacity(pairs.len()),
        };
        for (s, t) in pairs {
            let mut src = s.clone();
            src.resize(src_width, PAD);
            let mut input = Vec::with_capacity(tgt_width);
            input.push(SOS);
            input.extend_from_slice(t);
            input.resize(tgt_width, PAD);
            let mut gold = t.clone();
            gold.push(EOS);
            gold.resize(tgt_width, PAD);
            let mut mask = vec![1.0; t.len() + 1];
            mask.resize(tgt_width, 0.0);
            batch.source.push(src);
            batch.source_lengths.push(s.len());
            batch.decoder_input.push(input);
            batch.gold.push(gold);
            batch.target_lengths.push(t.len());
            batch.mask.push(mask);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Unpadded source ids of row `i`.
    pub fn source_ids(&self, i: usize) -> &[usize] {
        &self.source[i][..self.source_lengths[i]]
    }

    /// Unpadded decoder inputs (`<s> y₁ … y_T`) of row `i`.
    pub fn input_ids(&self, i: usize) -> &[usize] {
        &self.decoder_input[i][..self.target_lengths[i] + 1]
    }

    /// Unpadded gold outputs (`y₁ … y_T </s>`) of row `i`.
    pub fn gold_ids(&self, i: usize) -> &[usize] {
        &self.gold[i][..self.target_lengths[i] + 1]
    }

    /// Number of loss-bearing target positions.
    pub fn num_tokens(&self) -> usize {
        self.target_lengths.iter().map(|t| t + 1).sum()
    }
}

/// Shuffles the corpus with `rng` and cuts it into padded batches.
pub fn batchify<R: Rng + ?Sized>(
    corpus: &ParallelCorpus,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    let mut order: Vec<&(Vec<usize>, Vec<usize>)> = corpus.pairs.iter().collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(Batch::from_pairs).collect())
}

/// Batches in corpus order, for evaluation.
pub fn sequential_batches(corpus: &ParallelCorpus, batch_size: usize) -> Vec<Batch> {
    let refs: Vec<_> = corpus.pairs.iter().collect();
    refs.chunks(batch_size.max(1))
        .map(Batch::from_pairs)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        tokenize(s, Tokenization::Word)
    }

    #[test]
    fn vocab_counts_and_orders_by_frequency() {
        let corpus = vec![words("a a b c"), words("a b")];
        let v = Vocabulary::build(&corpus, 2).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<s>", "</s>", "<unk>", "a", "b"]);
        assert_eq!((v.count(4), v.count(5)), (3, 2));
        assert_eq!(v.id("c"), UNK);
    }

    #[test]
    fn vocab_saturates() {
        let corpus = vec![words("a a b c"), words("a b")];
        let v = Vocabulary::build(&corpus, 100).unwrap();
        assert_eq!(v.len(), 4 + 3);
    }

    #[test]
    fn vocab_ties_go_to_first_occurrence() {
        let corpus = vec![words("x c b"), words("x b c")];
        let v = Vocabulary::build(&corpus, 2).unwrap();
        assert_eq!(v.tokens()[4..], ["x", "c"]);
    }

    #[test]
    fn vocab_rejects_empty_input() {
        assert!(Vocabulary::build::<Vec<String>>(&[], 3).is_err());
        assert!(Vocabulary::build(&[words("a")], 0).is_err());
    }

    #[test]
    fn vocab_is_idempotent() {
        let corpus = vec![words("q w e r t y q w e q"), words("z z y")];
        assert_eq!(
            Vocabulary::build(&corpus, 5).unwrap(),
            Vocabulary::build(&corpus, 5).unwrap()
        );
    }

    #[test]
    fn tokenize_modes() {
        assert_eq!(tokenize("a b  c", Tokenization::Word), ["a", "b", "c"]);
        assert_eq!(tokenize("ab c", Tokenization::Char), ["a", "b", "c"]);
        assert_eq!(tokenize("北京", Tokenization::Char), ["北", "京"]);
        assert!(tokenize("", Tokenization::Word).is_empty());
        assert_eq!(
            detokenize(
                &tokenize(" a  b c ", Tokenization::Word),
                Tokenization::Word
            ),
            "a b c"
        );
    }

    #[test]
    fn tsv_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        fs::write(&p, "x y\tx z\n").unwrap();
        let c = load_tsv(&p, Tokenization::Word).unwrap();
        assert_eq!(c.pairs, vec![(words("x y"), words("x z"))]);

        fs::write(&p, "").unwrap();
        assert!(load_tsv(&p, Tokenization::Word).unwrap().is_empty());

        fs::write(&p, "a\tb\nx\ty\tz\n").unwrap();
        match load_tsv(&p, Tokenization::Word) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        assert!(matches!(
            load_tsv(&dir.path().join("missing.tsv"), Tokenization::Word),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn synthetic_tasks_hold_by_construction() {
        let copy = make_synthetic(SyntheticTask::Copy, 50, 20, 6, 1).unwrap();
        assert!(copy.pairs.iter().all(|(s, t)| s == t));

        let rev = make_synthetic(SyntheticTask::Reverse, 50, 20, 6, 1).unwrap();
        for (s, t) in &rev.pairs {
            let mut r = s.clone();
            r.reverse();
            assert_eq!(&r, t);
        }

        let syn = make_synthetic(SyntheticTask::Synonym, 50, 20, 6, 9).unwrap();
        let map = SynonymMap::generate(20, 9);
        let id = |w: &str| w[1..].parse::<usize>().unwrap();
        for (s, t) in &syn.pairs {
            assert_eq!(s.len(), t.len());
            for (a, b) in s.iter().zip(t) {
                assert_eq!(map.class[id(a)], map.class[id(b)]);
                assert_ne!(a, b);
            }
        }
        for (s, _) in copy.pairs.iter().chain(&rev.pairs) {
            assert!((1..=6).contains(&s.len()));
        }
    }

    #[test]
    fn synthetic_is_reproducible() {
        let a = make_synthetic(SyntheticTask::Synonym, 30, 40, 5, 3).unwrap();
        let b = make_synthetic(SyntheticTask::Synonym, 30, 40, 5, 3).unwrap();
        let c = make_synthetic(SyntheticTask::Synonym, 30, 40, 5, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(make_synthetic(SyntheticTask::Copy, 0, 40, 5, 3)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn batch_padding_and_masks() {
        let corpus = ParallelCorpus {
            pairs: vec![
                (vec![5, 6], vec![5, 6]),
                (vec![5, 6, 7, 8], vec![5, 6, 7, 8]),
            ],
        };
        let b = Batch::from_pairs(&corpus.pairs.iter().collect::<Vec<_>>());
        assert!(b.source.iter().all(|r| r.len() == 4));
        let sums: Vec<f64> = b.mask.iter().map(|m| m.iter().sum()).collect();
        assert_eq!(sums, [3.0, 5.0]);
        assert_eq!(b.decoder_input[0], [SOS, 5, 6, PAD, PAD]);
        assert_eq!(b.gold[0], [5, 6, EOS, PAD, PAD]);
        assert_eq!(b.gold_ids(0), [5, 6, EOS]);
        assert_eq!(b.num_tokens(), 8);
    }

    #[test]
    fn batchify_saturates_and_is_deterministic() {
        let corpus = ParallelCorpus {
            pairs: (0..10).map(|i| (vec![4 + i], vec![4 + i])).collect(),
        };
        let one = batchify(&corpus, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 10);
        let a = batchify(&corpus, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = batchify(&corpus, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(batchify(&corpus, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
