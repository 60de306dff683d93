//! Layer primitives with hand-derived backward passes.
//!
//! Every forward returns whatever its backward needs; backward functions
//! accumulate into caller-owned gradient buffers so that several sequences
//! can share one set of parameter gradients.

use super::tensor::{dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};
use crate::error::{Error, Result};

/// Additive penalty applied to disallowed attention scores and suppressed logits.
pub const MASK_PENALTY: f64 = -1e30;

fn check_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension {
            op,
            left: t.shape().to_vec(),
            right: vec![0, 0],
        });
    }
    Ok(())
}

/// `x·W + b`
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("affine", x)?;
    check_matrix("affine", w)?;
    let (m, k) = (x.rows(), x.cols());
    let n = w.cols();
    if w.rows() != k || b.len() != n {
        return Err(Error::Dimension {
            op: "affine",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(b.data());
    }
    matmul_acc(x.data(), w.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Accumulates `dW += xᵀ·dy`, `db += Σ dy` and returns `dx = dy·Wᵀ`.
pub fn affine_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Tensor {
    let (m, k) = (x.rows(), x.cols());
    let n = w.cols();
    matmul_at_b_acc(x.data(), dy.data(), dw.data_mut(), m, k, n);
    for i in 0..m {
        for (g, d) in db.data_mut().iter_mut().zip(dy.row(i)) {
            *g += d;
        }
    }
    affine_input_grad(w, dy)
}

/// `dx = dy·Wᵀ` only; used where the weight gradient is not wanted.
pub fn affine_input_grad(w: &Tensor, dy: &Tensor) -> Tensor {
    let (k, n) = (w.rows(), w.cols());
    let m = dy.rows();
    let mut dx = vec![0.0; m * k];
    matmul_a_bt_acc(dy.data(), w.data(), &mut dx, m, n, k);
    Tensor::new(vec![m, k], dx).expect("affine_input_grad shape")
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Row-wise normalisation to zero mean and unit (population) variance.
///
/// A zero-variance row with `eps == 0` normalises to zeros, so the output is
/// `beta` for that row.
pub fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    check_matrix("layer_norm", x)?;
    let (m, d) = (x.rows(), x.cols());
    if d < 2 {
        return Err(Error::Degenerate {
            op: "layer_norm",
            reason: format!("feature dimension {d} < 2"),
        });
    }
    if !(eps >= 0.0) {
        return Err(Error::Degenerate {
            op: "layer_norm",
            reason: format!("eps {eps} must be non-negative"),
        });
    }
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let mut xhat = Tensor::zeros(&[m, d]);
    let mut out = Tensor::zeros(&[m, d]);
    let mut inv_std = Vec::with_capacity(m);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = var + eps;
        let inv = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        inv_std.push(inv);
        let xh = xhat.row_mut(i);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * inv;
        }
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = xhat.row(i)[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
    dgamma: &mut Tensor,
    dbeta: &mut Tensor,
) -> Tensor {
    let (m, d) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[m, d]);
    let mut dxhat = vec![0.0; d];
    for i in 0..m {
        let xh = cache.xhat.row(i);
        let g = dy.row(i);
        for j in 0..d {
            dgamma.data_mut()[j] += g[j] * xh[j];
            dbeta.data_mut()[j] += g[j];
            dxhat[j] = g[j] * gamma.data()[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        let inv = cache.inv_std[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = inv * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Boolean `t×s` attention mask, `true` meaning the key may be attended.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Dimension {
                op: "mask",
                left: vec![rows, cols],
                right: vec![allowed.len()],
            });
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn causal(t: usize) -> Self {
        let allowed = (0..t * t).map(|ix| ix % t <= ix / t).collect();
        Self {
            rows: t,
            cols: t,
            allowed,
        }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    probs: Tensor,
    scale: f64,
}

impl AttentionCache {
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

/// `softmax(QKᵀ/√d + penalty)·V` for a single head.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttnMask>,
) -> Result<(Tensor, AttentionCache)> {
    check_matrix("attention", q)?;
    check_matrix("attention", k)?;
    check_matrix("attention", v)?;
    let (t, d) = (q.rows(), q.cols());
    let s = k.rows();
    if k.cols() != d || v.rows() != s {
        return Err(Error::Dimension {
            op: "attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if let Some(m) = mask {
        if m.rows != t || m.cols != s {
            return Err(Error::Dimension {
                op: "attention mask",
                left: vec![t, s],
                right: vec![m.rows, m.cols],
            });
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = vec![0.0; t * s];
    matmul_a_bt_acc(q.data(), k.data(), &mut scores, t, d, s);
    for i in 0..t {
        let row = &mut scores[i * s..(i + 1) * s];
        let mut any = false;
        for (j, x) in row.iter_mut().enumerate() {
            *x *= scale;
            match mask {
                Some(m) if !m.allows(i, j) => *x += MASK_PENALTY,
                _ => any = true,
            }
        }
        if !any {
            return Err(Error::FullyMasked { row: i });
        }
        softmax_in_place(row);
    }
    let dv = v.cols();
    let mut out = vec![0.0; t * dv];
    matmul_acc(&scores, v.data(), &mut out, t, s, dv);
    Ok((
        Tensor::new(vec![t, dv], out)?,
        AttentionCache {
            probs: Tensor::new(vec![t, s], scores)?,
            scale,
        },
    ))
}

/// Returns `(dQ, dK, dV)`.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cache: &AttentionCache,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (t, d) = (q.rows(), q.cols());
    let s = k.rows();
    let dv_cols = v.cols();
    let p = cache.probs.data();
    let mut dv = vec![0.0; s * dv_cols];
    matmul_at_b_acc(p, dout.data(), &mut dv, t, s, dv_cols);
    let mut dp = vec![0.0; t * s];
    matmul_a_bt_acc(dout.data(), v.data(), &mut dp, t, dv_cols, s);
    let mut ds = vec![0.0; t * s];
    for i in 0..t {
        let pr = &p[i * s..(i + 1) * s];
        let dpr = &dp[i * s..(i + 1) * s];
        let inner = dot(pr, dpr);
        for j in 0..s {
            ds[i * s + j] = pr[j] * (dpr[j] - inner) * cache.scale;
        }
    }
    let mut dq = vec![0.0; t * d];
    matmul_acc(&ds, k.data(), &mut dq, t, s, d);
    let mut dk = vec![0.0; s * d];
    matmul_at_b_acc(&ds, q.data(), &mut dk, t, s, d);
    (
        Tensor::new(vec![t, d], dq).expect("dq"),
        Tensor::new(vec![s, d], dk).expect("dk"),
        Tensor::new(vec![s, dv_cols], dv).expect("dv"),
    )
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Sum (not mean) of token negative log-likelihoods and its gradient with
/// respect to the logits, scaled by `grad_scale`. Pad targets are skipped.
///
/// Returns `(sum_nll, counted_positions, dlogits)`.
pub fn cross_entropy_sum(
    logits: &Tensor,
    targets: &[usize],
    pad_id: usize,
    grad_scale: f64,
) -> Result<(f64, usize, Tensor)> {
    check_matrix("cross_entropy", logits)?;
    let (t, vocab) = (logits.rows(), logits.cols());
    if targets.len() != t {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    let mut grad = Tensor::zeros(&[t, vocab]);
    let mut total = 0.0;
    let mut counted = 0;
    for (i, &tgt) in targets.iter().enumerate() {
        if tgt == pad_id {
            continue;
        }
        if tgt >= vocab {
            return Err(Error::Dimension {
                op: "cross_entropy target",
                left: vec![tgt],
                right: vec![vocab],
            });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[tgt];
        counted += 1;
        let g = grad.row_mut(i);
        for (gv, x) in g.iter_mut().zip(row) {
            *gv = (x - log_z).exp() * grad_scale;
        }
        g[tgt] -= grad_scale;
    }
    Ok((total, counted, grad))
}

/// Mean negative log-likelihood over non-pad positions, with `d loss / d logits`.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    pad_id: usize,
) -> Result<(f64, Tensor)> {
    let counted = targets.iter().filter(|&&t| t != pad_id).count();
    if counted == 0 {
        return Err(Error::EmptyLoss);
    }
    let (sum, _, grad) = cross_entropy_sum(logits, targets, pad_id, 1.0 / counted as f64)?;
    Ok((sum / counted as f64, grad))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("gelu shape")
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            let th = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
            g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("gelu shape")
}
