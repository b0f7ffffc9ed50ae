//! The run configuration document: where records come from and every knob
//! of blocking, preprocessing, the encoder, training and the labeling loop.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::active::SelectionStrategy;
use crate::blocking::BlockingConfig;
use crate::corpus::{generate_synthetic, load_csv, Corpus, CorruptionConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::preprocess::PreprocessConfig;
use crate::text::Stopwords;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default = "default_id_column")]
        id_column: String,
        #[serde(default)]
        truth_column: Option<String>,
    },
    Synthetic {
        n_entities: usize,
        #[serde(default)]
        corruption: CorruptionConfig,
    },
}

fn default_id_column() -> String {
    "id".into()
}

impl DataSource {
    pub fn load(&self) -> Result<Corpus> {
        match self {
            DataSource::Csv { path, id_column, truth_column } => load_csv(path, id_column, truth_column.as_deref()),
            DataSource::Synthetic { n_entities, corruption } => generate_synthetic(*n_entities, corruption),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActiveConfig {
    pub strategy: SelectionStrategy,
    /// Pairs labeled per round.
    pub budget: usize,
    pub rounds: usize,
    /// Size of the random round-0 batch; defaults to `budget`.
    pub seed_labels: Option<usize>,
    /// Continue each round from the previous round's weights.
    pub warm_start: bool,
    /// Train, validation and test shares, split by cluster.
    pub split: [u32; 3],
    pub threshold: f64,
    /// Seeds the split and the round-0 sample.
    pub seed: u64,
    /// How long a human-queue run waits for a batch before suspending.
    pub oracle_timeout_secs: Option<u64>,
    /// Attributes shown to the labeler; all of them when absent.
    pub display_fields: Option<Vec<String>>,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            strategy: SelectionStrategy::Uncertainty,
            budget: 50,
            rounds: 5,
            seed_labels: None,
            warm_start: true,
            split: [6, 2, 2],
            threshold: 0.5,
            seed: 0,
            oracle_timeout_secs: None,
            display_fields: None,
        }
    }
}

impl ActiveConfig {
    pub fn seed_batch(&self) -> usize {
        self.seed_labels.unwrap_or(self.budget)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    /// Replaces the built-in English list when present.
    #[serde(default)]
    pub stopwords: Option<Vec<String>>,
    #[serde(default)]
    pub blocking: BlockingConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    /// `vocab_size` and `max_len` are overwritten from the built vocabulary
    /// and `preprocess.max_len`.
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub active: ActiveConfig,
}

fn prefixed(prefix: &str, err: Error) -> Error {
    match err {
        Error::Config { field, message } if !field.starts_with(prefix) => Error::Config {
            field: format!("{prefix}{field}"),
            message,
        },
        other => other,
    }
}

impl RunConfig {
    /// The reference experiment: 500 synthetic book entities with two
    /// corrupted copies each and a compact encoder.
    pub fn standard_synthetic() -> Self {
        Self {
            data: DataSource::Synthetic {
                n_entities: 500,
                corruption: CorruptionConfig::moderate(2024),
            },
            stopwords: None,
            blocking: BlockingConfig::default(),
            preprocess: PreprocessConfig {
                max_len: 64,
                ..Default::default()
            },
            encoder: EncoderConfig {
                d_model: 32,
                n_heads: 4,
                n_layers: 2,
                d_ff: 64,
                ..Default::default()
            },
            train: TrainConfig::default(),
            active: ActiveConfig::default(),
        }
    }

    /// Copy with every random stream (split, round-0 sample, initialization,
    /// dropout, shuffling, random selection) derived from `seed`. The corpus
    /// itself is left alone.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.active.seed = seed;
        c.encoder.seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
        c.train.seed = seed.wrapping_mul(0xbf58_476d_1ce4_e5b9).wrapping_add(2);
        if let SelectionStrategy::Random { seed: s } = &mut c.active.strategy {
            *s = seed.wrapping_add(3);
        }
        c
    }

    pub fn stopwords(&self) -> Stopwords {
        match &self.stopwords {
            Some(words) => Stopwords::new(words),
            None => Stopwords::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Csv { id_column, .. } if id_column.is_empty() => {
                return Err(Error::config("data.id_column", "must not be empty"));
            }
            DataSource::Synthetic { n_entities, corruption } => {
                if *n_entities == 0 {
                    return Err(Error::config("data.n_entities", "must be at least 1"));
                }
                corruption.validate().map_err(|e| prefixed("data.corruption.", e))?;
            }
            _ => {}
        }
        if self.blocking.bucket_cap < 2 {
            return Err(Error::config("blocking.bucket_cap", "must be at least 2"));
        }
        self.preprocess.validate().map_err(|e| prefixed("preprocess.", e))?;
        let mut encoder = self.encoder.clone();
        encoder.max_len = self.preprocess.max_len;
        encoder.vocab_size = encoder.vocab_size.max(crate::preprocess::SPECIAL_TOKENS.len());
        encoder.validate().map_err(|e| prefixed("encoder.", e))?;
        self.train.validate().map_err(|e| prefixed("train.", e))?;

        let a = &self.active;
        if a.budget == 0 {
            return Err(Error::config("active.budget", "must be at least 1"));
        }
        if a.seed_labels == Some(0) && a.rounds > 0 {
            return Err(Error::config("active.seed_labels", "the first round needs at least one labeled pair"));
        }
        if a.split[0] == 0 || a.split[2] == 0 {
            return Err(Error::config("active.split", "train and test shares must be positive"));
        }
        if !(0.0..=1.0).contains(&a.threshold) {
            return Err(Error::config("active.threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_alpha_names_the_field() {
        let mut c = RunConfig::standard_synthetic();
        c.train.alpha = -1.0;
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "train.alpha"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nested_fields_are_prefixed() {
        let mut c = RunConfig::standard_synthetic();
        if let DataSource::Synthetic { corruption, .. } = &mut c.data {
            corruption.typo_rate = 2.0;
        }
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "data.corruption.typo_rate"));
    }

    #[test]
    fn json_round_trip_and_digest() {
        let c = RunConfig::standard_synthetic();
        let text = serde_json::to_string(&c).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        assert_ne!(c.with_seed(1).digest(), c.digest());
    }

    #[test]
    fn minimal_document_uses_defaults() {
        let c = RunConfig::from_json(r#"{"data": {"kind": "synthetic", "n_entities": 20}}"#).unwrap();
        assert_eq!(c.active.budget, 50);
        assert_eq!(c.train.alpha, 0.8);
        assert!(RunConfig::from_json(r#"{"data": {"kind": "synthetic", "n_entities": 20}, "bogus": 1}"#).is_err());
    }
}
