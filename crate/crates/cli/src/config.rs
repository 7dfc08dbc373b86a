use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use visitembed::corpus::GeneratorConfig;
use visitembed::featurize::FeaturizeConfig;
use visitembed::forest::ForestConfig;
use visitembed::hybridnet::{ModelConfig, TrainConfig};
use visitembed::numcore::AdamConfig;
use visitembed::seed;

use crate::error::CliError;

/// Flat run configuration. Every key is optional in the TOML file; missing
/// keys take the desk-scale defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    // generator
    pub n_patients: usize,
    pub extra_stays_mean: f64,
    pub vocab_size: usize,
    pub docs_per_stay_mean: f64,
    pub doc_length: usize,
    pub n_structured_features: usize,
    pub signal_strength: f64,
    pub text_signal: f64,
    pub structured_signal: f64,
    pub concept_rate: f64,
    pub concept_label_link: f64,

    // split
    pub n_val_patients: usize,
    pub n_test_patients: usize,
    pub min_distinct_codes: usize,

    // featurize
    pub min_count: usize,
    pub percentile: f64,
    pub k_features: usize,
    /// 0 means "use the percentile length".
    pub max_len: usize,

    // model
    pub word_dim: usize,
    pub conv_widths: Vec<usize>,
    pub channels_per_width: usize,
    pub mlp_hidden: usize,
    pub dropout_rate: f64,

    // training
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_rel_improvement: f64,

    // evaluation
    pub n_trees: usize,
    /// 0 means unlimited.
    pub forest_max_depth: usize,
    pub min_samples_leaf: usize,
    pub bootstrap: bool,

    // probe
    pub min_group_size: usize,
    pub baseline_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let generator = GeneratorConfig::default();
        let featurize = FeaturizeConfig::default();
        let model = ModelConfig::new(0, 0);
        let train = TrainConfig::default();
        let forest = ForestConfig::default();
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("visitembed-out"),
            n_patients: generator.n_patients,
            extra_stays_mean: generator.extra_stays_mean,
            vocab_size: generator.vocab_size,
            docs_per_stay_mean: generator.docs_per_stay_mean,
            doc_length: generator.doc_length,
            n_structured_features: generator.n_structured_features,
            signal_strength: generator.signal_strength,
            text_signal: generator.text_signal,
            structured_signal: generator.structured_signal,
            concept_rate: generator.concept_rate,
            concept_label_link: generator.concept_label_link,
            n_val_patients: 150,
            n_test_patients: 450,
            min_distinct_codes: 5,
            min_count: featurize.min_count,
            percentile: featurize.percentile,
            k_features: featurize.k_features,
            max_len: featurize.max_len.unwrap_or(0),
            word_dim: model.word_dim,
            conv_widths: model.conv_widths,
            channels_per_width: model.channels_per_width,
            mlp_hidden: model.mlp_hidden,
            dropout_rate: model.dropout_rate,
            lr: train.adam.lr,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            min_rel_improvement: train.min_rel_improvement,
            n_trees: forest.n_trees,
            forest_max_depth: forest.max_depth.unwrap_or(0),
            min_samples_leaf: forest.min_samples_leaf,
            bootstrap: forest.bootstrap,
            min_group_size: visitembed::probe::DEFAULT_MIN_GROUP_SIZE,
            baseline_samples: 10_000,
        }
    }
}

// Each stage draws from its own stream of the master seed.
const GENERATOR_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const MODEL_STREAM: u64 = 3;
const TRAIN_STREAM: u64 = 4;
const FOREST_STREAM: u64 = 5;
const PROBE_STREAM: u64 = 6;

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            n_patients: self.n_patients,
            extra_stays_mean: self.extra_stays_mean,
            vocab_size: self.vocab_size,
            docs_per_stay_mean: self.docs_per_stay_mean,
            doc_length: self.doc_length,
            n_structured_features: self.n_structured_features,
            signal_strength: self.signal_strength,
            text_signal: self.text_signal,
            structured_signal: self.structured_signal,
            concept_rate: self.concept_rate,
            concept_label_link: self.concept_label_link,
            seed: seed::derive(self.seed, &[GENERATOR_STREAM]),
            ..GeneratorConfig::default()
        }
    }

    pub fn split_seed(&self) -> u64 {
        seed::derive(self.seed, &[SPLIT_STREAM])
    }

    pub fn probe_seed(&self) -> u64 {
        seed::derive(self.seed, &[PROBE_STREAM])
    }

    pub fn featurize(&self) -> FeaturizeConfig {
        FeaturizeConfig {
            min_count: self.min_count,
            percentile: self.percentile,
            k_features: self.k_features,
            max_len: (self.max_len > 0).then_some(self.max_len),
        }
    }

    pub fn model(&self, vocab_size: usize, n_structured: usize) -> ModelConfig {
        ModelConfig {
            word_dim: self.word_dim,
            conv_widths: self.conv_widths.clone(),
            channels_per_width: self.channels_per_width,
            mlp_hidden: self.mlp_hidden,
            dropout_rate: self.dropout_rate,
            seed: seed::derive(self.seed, &[MODEL_STREAM]),
            ..ModelConfig::new(vocab_size, n_structured)
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            min_rel_improvement: self.min_rel_improvement,
            seed: seed::derive(self.seed, &[TRAIN_STREAM]),
        }
    }

    pub fn forest(&self) -> ForestConfig {
        ForestConfig {
            n_trees: self.n_trees,
            max_depth: (self.forest_max_depth > 0).then_some(self.forest_max_depth),
            min_samples_leaf: self.min_samples_leaf,
            features_per_split: None,
            bootstrap: self.bootstrap,
            seed: seed::derive(self.seed, &[FOREST_STREAM]),
        }
    }
}
