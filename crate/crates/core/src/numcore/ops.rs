use rand::Rng;

use super::Tensor;
use crate::{Error, Result};

/// Probability clamp used by the cross-entropy.
pub const BCE_EPS: f64 = 1e-12;

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.dims().len() != rank {
        return Err(Error::Shape(format!(
            "{what}: expected rank {rank}, got dims {:?}",
            t.dims()
        )));
    }
    Ok(())
}

/// Valid 1-D convolution of a `T×d` sequence with a `w×d×c` kernel.
///
/// `out[t, j] = bias[j] + Σ_{i<w, k<d} kernel[i, k, j] · input[t + i, k]`
pub fn conv1d_valid(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank(input, 2, "conv1d input")?;
    expect_rank(kernel, 3, "conv1d kernel")?;
    let (t_in, d) = (input.dims()[0], input.dims()[1]);
    let (w, kd, c) = (kernel.dims()[0], kernel.dims()[1], kernel.dims()[2]);
    if kd != d || bias.dims() != [c] {
        return Err(Error::Shape(format!(
            "conv1d: input {:?}, kernel {:?}, bias {:?}",
            input.dims(),
            kernel.dims(),
            bias.dims()
        )));
    }
    if t_in < w {
        return Err(Error::Shape(format!(
            "conv1d: sequence length {t_in} shorter than kernel width {w}"
        )));
    }
    let t_out = t_in - w + 1;
    let (x, k, b) = (input.values(), kernel.values(), bias.values());
    let mut out = vec![0.0; t_out * c];
    for (t, row) in out.chunks_exact_mut(c).enumerate() {
        row.copy_from_slice(b);
        // Rows t..t+w of the input are one contiguous window of w·d values.
        let window = &x[t * d..(t + w) * d];
        for (r, &xv) in window.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let krow = &k[r * c..(r + 1) * c];
            for (o, &kv) in row.iter_mut().zip(krow) {
                *o += xv * kv;
            }
        }
    }
    Ok(Tensor {
        dims: vec![t_out, c],
        values: out,
    })
}

pub struct Conv1dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Backward pass of [`conv1d_valid`]. Zero entries of `grad_out` are
/// skipped, which makes the pass cheap after max-over-time pooling.
pub fn conv1d_valid_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<Conv1dGrads> {
    let (t_in, d) = (input.dims()[0], input.dims()[1]);
    let (w, c) = (kernel.dims()[0], kernel.dims()[2]);
    let t_out = t_in + 1 - w;
    if grad_out.dims() != [t_out, c] {
        return Err(Error::Shape(format!(
            "conv1d backward: grad {:?}, expected [{t_out}, {c}]",
            grad_out.dims()
        )));
    }
    let (x, k, g) = (input.values(), kernel.values(), grad_out.values());
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; c];
    for t in 0..t_out {
        let window = t * d..(t + w) * d;
        for j in 0..c {
            let gv = g[t * c + j];
            if gv == 0.0 {
                continue;
            }
            db[j] += gv;
            for (r, (xv, dxv)) in x[window.clone()]
                .iter()
                .zip(&mut dx[window.clone()])
                .enumerate()
            {
                dk[r * c + j] += xv * gv;
                *dxv += k[r * c + j] * gv;
            }
        }
    }
    Ok(Conv1dGrads {
        input: Tensor {
            dims: input.dims().to_vec(),
            values: dx,
        },
        kernel: Tensor {
            dims: kernel.dims().to_vec(),
            values: dk,
        },
        bias: Tensor {
            dims: vec![c],
            values: db,
        },
    })
}

/// Per-channel maximum over the rows of a `T×c` matrix, with the first
/// maximizing row of each channel.
pub fn max_over_time(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    expect_rank(input, 2, "max_over_time")?;
    let (t_len, c) = (input.dims()[0], input.dims()[1]);
    if t_len == 0 {
        return Err(Error::Shape("max_over_time over zero rows".into()));
    }
    let x = input.values();
    let mut best = x[..c].to_vec();
    let mut arg = vec![0usize; c];
    for t in 1..t_len {
        for j in 0..c {
            let v = x[t * c + j];
            if v > best[j] {
                best[j] = v;
                arg[j] = t;
            }
        }
    }
    Ok((
        Tensor {
            dims: vec![c],
            values: best,
        },
        arg,
    ))
}

/// Routes each channel's gradient to its argmax row.
pub fn max_over_time_backward(grad: &Tensor, argmax: &[usize], t_len: usize) -> Tensor {
    let c = argmax.len();
    let mut out = vec![0.0; t_len * c];
    for (j, (&t, &g)) in argmax.iter().zip(grad.values()).enumerate() {
        out[t * c + j] = g;
    }
    Tensor {
        dims: vec![t_len, c],
        values: out,
    }
}

/// `weight · input + bias` for an `m×n` weight.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank(weight, 2, "dense weight")?;
    let (m, n) = (weight.dims()[0], weight.dims()[1]);
    if input.len() != n || bias.dims() != [m] {
        return Err(Error::Shape(format!(
            "dense: input {:?}, weight {:?}, bias {:?}",
            input.dims(),
            weight.dims(),
            bias.dims()
        )));
    }
    let x = input.values();
    let out = weight
        .values()
        .chunks_exact(n)
        .zip(bias.values())
        .map(|(row, &b)| b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>())
        .collect();
    Ok(Tensor {
        dims: vec![m],
        values: out,
    })
}

pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let (m, n) = (weight.dims()[0], weight.dims()[1]);
    if grad_out.len() != m || input.len() != n {
        return Err(Error::Shape(format!(
            "dense backward: input {:?}, weight {:?}, grad {:?}",
            input.dims(),
            weight.dims(),
            grad_out.dims()
        )));
    }
    let (x, w, g) = (input.values(), weight.values(), grad_out.values());
    let mut dx = vec![0.0; n];
    let mut dw = vec![0.0; m * n];
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        let wrow = &w[i * n..(i + 1) * n];
        let dwrow = &mut dw[i * n..(i + 1) * n];
        for k in 0..n {
            dx[k] += wrow[k] * gi;
            dwrow[k] = x[k] * gi;
        }
    }
    Ok(DenseGrads {
        input: Tensor {
            dims: input.dims().to_vec(),
            values: dx,
        },
        weight: Tensor {
            dims: weight.dims().to_vec(),
            values: dw,
        },
        bias: Tensor {
            dims: vec![m],
            values: g.to_vec(),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(kind: Activation, input: &Tensor) -> Tensor {
    let f = match kind {
        Activation::Relu => |x: f64| x.max(0.0),
        Activation::Sigmoid => sigmoid,
    };
    Tensor {
        dims: input.dims().to_vec(),
        values: input.values().iter().map(|&x| f(x)).collect(),
    }
}

/// Gradient through an activation, given its input and output. ReLU uses
/// subgradient 0 at 0.
pub fn activation_backward(
    kind: Activation,
    input: &Tensor,
    output: &Tensor,
    grad: &Tensor,
) -> Tensor {
    let values = match kind {
        Activation::Relu => input
            .values()
            .iter()
            .zip(grad.values())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
        Activation::Sigmoid => output
            .values()
            .iter()
            .zip(grad.values())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect(),
    };
    Tensor {
        dims: input.dims().to_vec(),
        values,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Inverted dropout. Returns the output and the per-entry multiplier
/// (0 or `1/(1-rate)`), which is also the backward mask.
pub fn dropout<R: Rng + ?Sized>(
    input: &Tensor,
    rate: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<(Tensor, Vec<f64>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), vec![1.0; input.len()]));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..input.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let out = Tensor {
        dims: input.dims().to_vec(),
        values: input
            .values()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect(),
    };
    Ok((out, mask))
}

pub fn dropout_backward(grad: &Tensor, mask: &[f64]) -> Tensor {
    Tensor {
        dims: grad.dims().to_vec(),
        values: grad.values().iter().zip(mask).map(|(g, m)| g * m).collect(),
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Summed binary cross-entropy over the label vector, probabilities
/// clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_sum(probs: &[f64], labels: &[u8]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// `∂ bce_sum / ∂ p_j = (p_j - y_j) / (p_j (1 - p_j))` at the clamped point.
pub fn bce_sum_grad(probs: &[f64], labels: &[u8]) -> Vec<f64> {
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            (p - y as f64) / (p * (1.0 - p))
        })
        .collect()
}
