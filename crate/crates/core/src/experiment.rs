//! Experiment configuration and the end-to-end training and comparison
//! drivers behind the command-line tool.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_tsv, ParallelCorpus, TextCorpus, Tokenization, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{CandidateSet, GeneratorKind, ModelConfig, Seq2SeqModel};
use crate::nn::ScoreKind;
use crate::train::{epochs_to_threshold, train, AdamConfig, TrainConfig, TrainLog};

/// Mixed into the run seed for parameter initialisation.
const INIT_STREAM: u64 = 0x1417_5eed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Word-level sentence rewriting defaults.
    #[default]
    Word,
    /// Character-level summarisation defaults.
    Char,
}

/// Everything a training run needs. Serialised as JSON; any field left out
/// of a file takes its value from the selected preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub generator: GeneratorKind,
    pub score_kind: ScoreKind,
    pub attention_kind: ScoreKind,
    pub layers: usize,
    pub hidden_size: usize,
    pub embedding_size: usize,
    /// Vocabulary size, which is also the number of candidate words.
    pub vocab_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub clip_norm: f64,
    pub beam_size: usize,
    pub tokenization: Tokenization,
    pub seed: u64,
    pub learning_rate: f64,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub stop_at_accuracy: Option<f64>,
    /// Validation accuracy that `compare` measures time-to-reach against.
    pub threshold: f64,
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Word)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let word = Self {
            preset,
            generator: GeneratorKind::Wean,
            score_kind: ScoreKind::General,
            attention_kind: ScoreKind::General,
            layers: 2,
            hidden_size: 256,
            embedding_size: 256,
            vocab_size: 50_000,
            batch_size: 64,
            epochs: 20,
            dropout: 0.4,
            clip_norm: 5.0,
            beam_size: 1,
            tokenization: Tokenization::Word,
            seed: 1,
            learning_rate: AdamConfig::default().learning_rate,
            train_path: None,
            valid_path: None,
            output_dir: PathBuf::from("runs"),
            stop_at_accuracy: None,
            threshold: 0.9,
            record_timing: true,
        };
        match preset {
            Preset::Word => word,
            Preset::Char => Self {
                hidden_size: 512,
                embedding_size: 512,
                vocab_size: 4_000,
                dropout: 0.0,
                beam_size: 5,
                tokenization: Tokenization::Char,
                ..word
            },
        }
    }

    /// Parses a JSON object on top of the preset it names.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        let Value::Object(fields) = value else {
            return Err(Error::config("<file>", "expected a JSON object"));
        };
        let preset = match fields.get("preset") {
            Some(p) => serde_json::from_value(p.clone())
                .map_err(|e| Error::config("preset", e.to_string()))?,
            None => Preset::Word,
        };
        let Value::Object(mut merged) =
            serde_json::to_value(Self::preset(preset)).expect("config serialises")
        else {
            unreachable!("config serialises to an object")
        };
        let base = merged.clone();
        for (k, v) in &fields {
            if !merged.contains_key(k) {
                return Err(Error::config(k.as_str(), "unknown field"));
            }
            merged.insert(k.clone(), v.clone());
        }
        let config: Self = match serde_json::from_value(Value::Object(merged)) {
            Ok(c) => c,
            Err(e) => {
                // serde does not name the key, so find the first one that
                // fails on its own
                let field = fields.iter().find_map(|(k, v)| {
                    let mut single = base.clone();
                    single.insert(k.clone(), v.clone());
                    serde_json::from_value::<Self>(Value::Object(single))
                        .is_err()
                        .then_some(k.as_str())
                });
                return Err(Error::config(field.unwrap_or("<file>"), e.to_string()));
            }
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Checks values that do not depend on data files.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config(None).validate()?;
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size", "must be at least 1"));
        }
        if self.beam_size == 0 {
            return Err(Error::config("beam_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold", "must be in [0, 1]"));
        }
        if self
            .stop_at_accuracy
            .is_some_and(|t| !(0.0..=1.0).contains(&t))
        {
            return Err(Error::config("stop_at_accuracy", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Checks that both data paths are set and returns them.
    pub fn data_paths(&self) -> Result<(&Path, &Path)> {
        let train = self.train_path.as_deref().ok_or_else(|| {
            Error::config(
                "train_path",
                "missing; set it in the config or pass --train",
            )
        })?;
        let valid = self.valid_path.as_deref().ok_or_else(|| {
            Error::config(
                "valid_path",
                "missing; set it in the config or pass --valid",
            )
        })?;
        Ok((train, valid))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            generator: self.generator,
            score_kind: self.score_kind,
            attention_kind: self.attention_kind,
            layers: self.layers,
            hidden_size: self.hidden_size,
            embedding_size: self.embedding_size,
            dropout: self.dropout,
            tokenization: self.tokenization,
        }
    }

    pub fn train_config(&self, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            seed: self.seed,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                ..AdamConfig::default()
            },
            checkpoint_dir,
            stop_at_accuracy: self.stop_at_accuracy,
            record_timing: self.record_timing,
        }
    }
}

/// Vocabulary, candidates and id-encoded corpora for one experiment.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub candidates: CandidateSet,
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
}

/// Builds the vocabulary from the training sources and encodes both sets.
pub fn prepare(
    config: &ExperimentConfig,
    train_text: &TextCorpus,
    valid_text: &TextCorpus,
) -> Result<PreparedData> {
    let vocab = Vocabulary::build(&train_text.sources(), config.vocab_size)?;
    let candidates = CandidateSet::most_frequent(&vocab, config.vocab_size);
    Ok(PreparedData {
        train: train_text.encode(&vocab),
        valid: valid_text.encode(&vocab),
        vocab,
        candidates,
    })
}

/// A fresh model for `config`. Models built for different heads from one
/// config share their initial non-head parameters.
pub fn build_model(config: &ExperimentConfig, data: &PreparedData) -> Result<Seq2SeqModel> {
    Seq2SeqModel::new(
        config.model_config(),
        data.vocab.clone(),
        data.candidates.clone(),
        config.seed ^ INIT_STREAM,
    )
}

/// Trains one model. With `out_dir`, checkpoints and `train_log.csv` are
/// written there and the final model is saved as `final.ckpt`.
pub fn run_training(
    config: &ExperimentConfig,
    data: &PreparedData,
    out_dir: Option<&Path>,
) -> Result<(Seq2SeqModel, TrainLog)> {
    config.validate()?;
    let mut model = build_model(config, data)?;
    let log = train(
        &mut model,
        &data.train,
        &data.valid,
        &config.train_config(out_dir.map(Path::to_path_buf)),
    )?;
    if let Some(dir) = out_dir {
        log.write_csv(&dir.join("train_log.csv"))?;
        crate::checkpoint::save(&model, &dir.join("final.ckpt"))?;
    }
    Ok((model, log))
}

/// Loads the configured training and validation files.
pub fn load_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let (train_path, valid_path) = config.data_paths()?;
    let train_text = load_tsv(train_path, config.tokenization)?;
    let valid_text = load_tsv(valid_path, config.tokenization)?;
    if train_text.is_empty() {
        return Err(Error::Parse {
            path: train_path.to_path_buf(),
            line: 0,
            message: "no usable sentence pairs".into(),
        });
    }
    if valid_text.is_empty() {
        return Err(Error::Parse {
            path: valid_path.to_path_buf(),
            line: 0,
            message: "no usable sentence pairs".into(),
        });
    }
    prepare(config, &train_text, &valid_text)
}

#[derive(Clone, Debug)]
pub struct HeadRun {
    pub generator: GeneratorKind,
    pub log: TrainLog,
    pub epochs_to_threshold: Option<usize>,
}

/// Trains both heads on the same data, data order and shared initial
/// parameters, and reports when each reaches `config.threshold`.
pub fn compare(
    config: &ExperimentConfig,
    data: &PreparedData,
    out_dir: Option<&Path>,
) -> Result<Vec<HeadRun>> {
    let mut runs = Vec::with_capacity(2);
    for generator in [GeneratorKind::Wean, GeneratorKind::SoftmaxLinear] {
        let head_config = ExperimentConfig {
            generator,
            ..config.clone()
        };
        let dir = out_dir.map(|d| d.join(generator.name()));
        let (_, log) = run_training(&head_config, data, dir.as_deref())?;
        runs.push(HeadRun {
            generator,
            epochs_to_threshold: epochs_to_threshold(&log, config.threshold),
            log,
        });
    }
    Ok(runs)
}
