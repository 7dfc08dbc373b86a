//! The hybrid network: a word-level CNN over the notes and a two-layer
//! perceptron over structured features, trained jointly on the 19 labels.
//! The visit embedding is the perceptron's hidden layer followed by the
//! CNN's pooled features.

mod checkpoint;
mod embedding;
mod forward;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use embedding::{extract_embedding, read_embeddings_csv, write_embeddings_csv, VisitEmbedding};
pub use forward::{
    combine_and_predict, embed_encoded, forward_structured, forward_text, pad_tokens, predict,
    stay_loss_and_gradient, StructuredOutput, TextOutput,
};
pub use train::{evaluate_loss, train, train_encoded, EpochRecord, TrainConfig, TrainOutcome};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;
use crate::{seed, Error, Result, N_LABELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub word_dim: usize,
    pub conv_widths: Vec<usize>,
    pub channels_per_width: usize,
    pub n_structured: usize,
    pub mlp_hidden: usize,
    pub n_labels: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Reference architecture: 50-d words, widths 3/4/5 with 64 channels
    /// each, a 256-unit hidden layer, 19 labels.
    pub fn new(vocab_size: usize, n_structured: usize) -> Self {
        ModelConfig {
            vocab_size,
            word_dim: 50,
            conv_widths: vec![3, 4, 5],
            channels_per_width: 64,
            n_structured,
            mlp_hidden: 256,
            n_labels: N_LABELS,
            dropout_rate: 0.5,
            seed: 0,
        }
    }

    pub fn pooled_width(&self) -> usize {
        self.conv_widths.len() * self.channels_per_width
    }

    pub fn embedding_width(&self) -> usize {
        self.mlp_hidden + self.pooled_width()
    }

    pub fn max_width(&self) -> usize {
        self.conv_widths.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("word_dim", self.word_dim),
            ("channels_per_width", self.channels_per_width),
            ("n_structured", self.n_structured),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must include PAD and UNK".into()));
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(Error::Config(
                "conv_widths must be non-empty and positive".into(),
            ));
        }
        if self.n_labels != N_LABELS {
            return Err(Error::Config(format!("n_labels must be {N_LABELS}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// All learnable tensors. Also used as the gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embedding: Tensor,
    pub conv: Vec<ConvLayer>,
    pub mlp_hidden_weight: Tensor,
    pub mlp_hidden_bias: Tensor,
    pub mlp_out_weight: Tensor,
    pub mlp_out_bias: Tensor,
    pub cnn_out_weight: Tensor,
    pub cnn_out_bias: Tensor,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> ModelParams {
        let (d, c, h, l) = (
            cfg.word_dim,
            cfg.channels_per_width,
            cfg.mlp_hidden,
            cfg.n_labels,
        );
        ModelParams {
            embedding: Tensor::zeros(&[cfg.vocab_size, d]),
            conv: cfg
                .conv_widths
                .iter()
                .map(|&w| ConvLayer {
                    kernel: Tensor::zeros(&[w, d, c]),
                    bias: Tensor::zeros(&[c]),
                })
                .collect(),
            mlp_hidden_weight: Tensor::zeros(&[h, cfg.n_structured]),
            mlp_hidden_bias: Tensor::zeros(&[h]),
            mlp_out_weight: Tensor::zeros(&[l, h]),
            mlp_out_bias: Tensor::zeros(&[l]),
            cnn_out_weight: Tensor::zeros(&[l, cfg.pooled_width()]),
            cnn_out_bias: Tensor::zeros(&[l]),
        }
    }

    /// Tensor names in a fixed order, e.g. `conv3.kernel`.
    pub fn names(cfg: &ModelConfig) -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        for w in &cfg.conv_widths {
            names.push(format!("conv{w}.kernel"));
            names.push(format!("conv{w}.bias"));
        }
        names.extend(
            [
                "mlp.hidden.weight",
                "mlp.hidden.bias",
                "mlp.out.weight",
                "mlp.out.bias",
                "cnn.out.weight",
                "cnn.out.bias",
            ]
            .map(String::from),
        );
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for layer in &self.conv {
            out.push(&layer.kernel);
            out.push(&layer.bias);
        }
        out.extend([
            &self.mlp_hidden_weight,
            &self.mlp_hidden_bias,
            &self.mlp_out_weight,
            &self.mlp_out_bias,
            &self.cnn_out_weight,
            &self.cnn_out_bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.conv {
            out.push(&mut layer.kernel);
            out.push(&mut layer.bias);
        }
        out.extend([
            &mut self.mlp_hidden_weight,
            &mut self.mlp_hidden_bias,
            &mut self.mlp_out_weight,
            &mut self.mlp_out_bias,
            &mut self.cnn_out_weight,
            &mut self.cnn_out_bias,
        ]);
        out
    }

    /// Rebuilds params from tensors in [`ModelParams::names`] order,
    /// checking every shape against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<ModelParams> {
        let mut params = ModelParams::zeros(cfg);
        let names = Self::names(cfg);
        if tensors.len() != names.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((slot, t), name) in params.tensors_mut().into_iter().zip(tensors).zip(&names) {
            if slot.dims() != t.dims() {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has dims {:?}, config implies {:?}",
                    t.dims(),
                    slot.dims()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Zeroes the PAD row of the word-embedding table.
    pub fn zero_pad_row(&mut self) {
        let d = self.embedding.dims()[1];
        self.embedding.values_mut()[..d].fill(0.0);
    }
}

fn uniform_fill(t: &mut Tensor, bound: f64, rng: &mut impl Rng) {
    for v in t.values_mut() {
        *v = rng.random_range(-bound..=bound);
    }
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform weights, zero biases, word vectors uniform in ±0.05 with
/// the PAD row zeroed. Deterministic given `cfg.seed`.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut p = ModelParams::zeros(cfg);
    let d = cfg.word_dim;
    uniform_fill(&mut p.embedding, 0.05, &mut seed::rng(cfg.seed, &[0]));
    p.zero_pad_row();
    for (i, (layer, &w)) in p.conv.iter_mut().zip(&cfg.conv_widths).enumerate() {
        let bound = glorot(w * d, w * cfg.channels_per_width);
        uniform_fill(
            &mut layer.kernel,
            bound,
            &mut seed::rng(cfg.seed, &[1, i as u64]),
        );
    }
    let dense = [
        (&mut p.mlp_hidden_weight, 2u64),
        (&mut p.mlp_out_weight, 3),
        (&mut p.cnn_out_weight, 4),
    ];
    for (t, tag) in dense {
        let (m, n) = (t.dims()[0], t.dims()[1]);
        uniform_fill(t, glorot(n, m), &mut seed::rng(cfg.seed, &[tag]));
    }
    Ok(p)
}
