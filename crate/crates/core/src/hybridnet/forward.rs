use rand::Rng;

use super::{ModelConfig, ModelParams};
use crate::featurize::{EncodedStay, PAD};
use crate::numcore::{
    activation, activation_backward, bce_sum, conv1d_valid, conv1d_valid_backward, dense,
    dense_backward, dropout, dropout_backward, max_over_time, max_over_time_backward, sigmoid,
    Activation, Mode, Tensor,
};
use crate::{Error, Result, N_LABELS};

/// Left-pads with PAD up to `min_len`.
pub fn pad_tokens(token_ids: &[u32], min_len: usize) -> Vec<u32> {
    let pad = min_len.saturating_sub(token_ids.len());
    let mut out = vec![PAD; pad];
    out.extend_from_slice(token_ids);
    out
}

struct ConvTrace {
    pre: Tensor,
    act: Tensor,
    argmax: Vec<usize>,
}

struct TextTrace {
    tokens: Vec<u32>,
    words: Tensor,
    convs: Vec<ConvTrace>,
    dropped: Tensor,
    mask: Vec<f64>,
}

pub struct TextOutput {
    /// Max-pooled conv features before dropout.
    pub pooled: Tensor,
    /// Pre-sigmoid label scores.
    pub scores: Tensor,
}

fn text_forward<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ModelParams,
    token_ids: &[u32],
    mode: Mode,
    rng: &mut R,
) -> Result<(TextOutput, TextTrace)> {
    let d = cfg.word_dim;
    let tokens = pad_tokens(token_ids, cfg.max_width());
    let table = params.embedding.values();
    let mut words = Vec::with_capacity(tokens.len() * d);
    for &t in &tokens {
        let t = t as usize;
        if t >= cfg.vocab_size {
            return Err(Error::Integrity(format!(
                "token id {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        words.extend_from_slice(&table[t * d..(t + 1) * d]);
    }
    let words = Tensor::from_vec(&[tokens.len(), d], words)?;

    let mut pooled = Vec::with_capacity(cfg.pooled_width());
    let mut convs = Vec::with_capacity(params.conv.len());
    for layer in &params.conv {
        let pre = conv1d_valid(&words, &layer.kernel, &layer.bias)?;
        let act = activation(Activation::Relu, &pre);
        let (m, argmax) = max_over_time(&act)?;
        pooled.extend_from_slice(m.values());
        convs.push(ConvTrace { pre, act, argmax });
    }
    let pooled = Tensor::vector(pooled)?;
    let (dropped, mask) = dropout(&pooled, cfg.dropout_rate, rng, mode)?;
    let scores = dense(&dropped, &params.cnn_out_weight, &params.cnn_out_bias)?;
    Ok((
        TextOutput { pooled, scores },
        TextTrace {
            tokens,
            words,
            convs,
            dropped,
            mask,
        },
    ))
}

fn text_backward(
    cfg: &ModelConfig,
    params: &ModelParams,
    trace: &TextTrace,
    dscores: &Tensor,
    grads: &mut ModelParams,
) -> Result<()> {
    let out = dense_backward(&trace.dropped, &params.cnn_out_weight, dscores)?;
    grads.cnn_out_weight.add_assign(&out.weight);
    grads.cnn_out_bias.add_assign(&out.bias);
    let dpooled = dropout_backward(&out.input, &trace.mask);

    let c = cfg.channels_per_width;
    let d = cfg.word_dim;
    let mut dwords = vec![0.0; trace.words.len()];
    for (i, (layer, conv)) in params.conv.iter().zip(&trace.convs).enumerate() {
        let g = Tensor::vector(dpooled.values()[i * c..(i + 1) * c].to_vec())?;
        let gact = max_over_time_backward(&g, &conv.argmax, conv.act.dims()[0]);
        let gpre = activation_backward(Activation::Relu, &conv.pre, &conv.act, &gact);
        let cg = conv1d_valid_backward(&trace.words, &layer.kernel, &gpre)?;
        grads.conv[i].kernel.add_assign(&cg.kernel);
        grads.conv[i].bias.add_assign(&cg.bias);
        for (a, b) in dwords.iter_mut().zip(cg.input.values()) {
            *a += b;
        }
    }
    let table = grads.embedding.values_mut();
    for (pos, &tok) in trace.tokens.iter().enumerate() {
        if tok == PAD {
            continue;
        }
        let row = &mut table[tok as usize * d..(tok as usize + 1) * d];
        for (r, g) in row.iter_mut().zip(&dwords[pos * d..(pos + 1) * d]) {
            *r += g;
        }
    }
    Ok(())
}

/// Embedding lookup, conv + ReLU + max-over-time per width, dropout, dense.
/// Sequences shorter than the widest filter are left-padded with PAD.
pub fn forward_text<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ModelParams,
    token_ids: &[u32],
    mode: Mode,
    rng: &mut R,
) -> Result<TextOutput> {
    text_forward(cfg, params, token_ids, mode, rng).map(|(o, _)| o)
}

struct StructuredTrace {
    input: Tensor,
    pre: Tensor,
    dropped: Tensor,
    mask: Vec<f64>,
}

pub struct StructuredOutput {
    /// Hidden layer after ReLU, before dropout.
    pub hidden: Tensor,
    pub scores: Tensor,
}

fn structured_forward<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ModelParams,
    input: &[f64],
    mode: Mode,
    rng: &mut R,
) -> Result<(StructuredOutput, StructuredTrace)> {
    if input.len() != cfg.n_structured {
        return Err(Error::Shape(format!(
            "structured input has {} values, model expects {}",
            input.len(),
            cfg.n_structured
        )));
    }
    let input = Tensor::vector(input.to_vec())?;
    let pre = dense(&input, &params.mlp_hidden_weight, &params.mlp_hidden_bias)?;
    let hidden = activation(Activation::Relu, &pre);
    let (dropped, mask) = dropout(&hidden, cfg.dropout_rate, rng, mode)?;
    let scores = dense(&dropped, &params.mlp_out_weight, &params.mlp_out_bias)?;
    Ok((
        StructuredOutput { hidden, scores },
        StructuredTrace {
            input,
            pre,
            dropped,
            mask,
        },
    ))
}

fn structured_backward(
    params: &ModelParams,
    out: &StructuredOutput,
    trace: &StructuredTrace,
    dscores: &Tensor,
    grads: &mut ModelParams,
) -> Result<()> {
    let o = dense_backward(&trace.dropped, &params.mlp_out_weight, dscores)?;
    grads.mlp_out_weight.add_assign(&o.weight);
    grads.mlp_out_bias.add_assign(&o.bias);
    let dhidden = dropout_backward(&o.input, &trace.mask);
    let dpre = activation_backward(Activation::Relu, &trace.pre, &out.hidden, &dhidden);
    let h = dense_backward(&trace.input, &params.mlp_hidden_weight, &dpre)?;
    grads.mlp_hidden_weight.add_assign(&h.weight);
    grads.mlp_hidden_bias.add_assign(&h.bias);
    Ok(())
}

/// Dense, ReLU, dropout, dense. `input` is the selector output scattered
/// into a dense vector.
pub fn forward_structured<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ModelParams,
    input: &[f64],
    mode: Mode,
    rng: &mut R,
) -> Result<StructuredOutput> {
    structured_forward(cfg, params, input, mode, rng).map(|(o, _)| o)
}

/// Sums the two branches' scores and applies one sigmoid.
pub fn combine_and_predict(
    text_scores: &[f64],
    structured_scores: &[f64],
) -> Result<[f64; N_LABELS]> {
    if text_scores.len() != N_LABELS || structured_scores.len() != N_LABELS {
        return Err(Error::Shape(format!(
            "score vectors of length {} and {}, expected {N_LABELS}",
            text_scores.len(),
            structured_scores.len()
        )));
    }
    let mut p = [0.0; N_LABELS];
    for (i, out) in p.iter_mut().enumerate() {
        *out = sigmoid(text_scores[i] + structured_scores[i]);
    }
    Ok(p)
}

/// Summed cross-entropy of one stay; its gradient is added to `grads`.
pub fn stay_loss_and_gradient<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ModelParams,
    stay: &EncodedStay,
    mode: Mode,
    rng: &mut R,
    grads: &mut ModelParams,
) -> Result<f64> {
    let (text, text_trace) = text_forward(cfg, params, &stay.token_ids, mode, rng)?;
    let structured_in = stay.dense_structured(cfg.n_structured);
    let (structured, structured_trace) =
        structured_forward(cfg, params, &structured_in, mode, rng)?;
    let probs = combine_and_predict(text.scores.values(), structured.scores.values())?;
    let loss = bce_sum(&probs, &stay.labels);
    // d loss / d score = p - y for a sigmoid followed by cross-entropy.
    let dscores = Tensor::vector(
        probs
            .iter()
            .zip(&stay.labels)
            .map(|(&p, &y)| p - y as f64)
            .collect(),
    )?;
    text_backward(cfg, params, &text_trace, &dscores, grads)?;
    structured_backward(params, &structured, &structured_trace, &dscores, grads)?;
    Ok(loss)
}

struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference draws no random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("inference draws no random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("inference draws no random numbers")
    }
}

/// Inference-mode label probabilities.
pub fn predict(
    cfg: &ModelConfig,
    params: &ModelParams,
    stay: &EncodedStay,
) -> Result<[f64; N_LABELS]> {
    let text = forward_text(cfg, params, &stay.token_ids, Mode::Infer, &mut NoRng)?;
    let structured = forward_structured(
        cfg,
        params,
        &stay.dense_structured(cfg.n_structured),
        Mode::Infer,
        &mut NoRng,
    )?;
    combine_and_predict(text.scores.values(), structured.scores.values())
}

/// Inference-mode `[hidden ‖ pooled]` vector.
pub fn embed_encoded(
    cfg: &ModelConfig,
    params: &ModelParams,
    stay: &EncodedStay,
) -> Result<Vec<f64>> {
    let structured = forward_structured(
        cfg,
        params,
        &stay.dense_structured(cfg.n_structured),
        Mode::Infer,
        &mut NoRng,
    )?;
    let text = forward_text(cfg, params, &stay.token_ids, Mode::Infer, &mut NoRng)?;
    let mut v = structured.hidden.into_values();
    v.extend(text.pooled.into_values());
    Ok(v)
}

pub(crate) fn inference_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    stay: &EncodedStay,
) -> Result<f64> {
    Ok(bce_sum(&predict(cfg, params, stay)?, &stay.labels))
}
