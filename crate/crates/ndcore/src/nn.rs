//! Functional building blocks over bound parameter [`Var`]s.
//!
//! Parameters are owned elsewhere; callers bind them onto the tape and pass
//! the resulting handles in. Every block here is pre-norm residual where a
//! residual applies.

use crate::error::{NdError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-8;

/// `x · w + b` with `w: [in, out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    Causal,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn layer_norm(tape: &mut Tape, x: Var, p: &LayerNormVars) -> Result<Var> {
    tape.layer_norm(x, p.gain, p.bias, LAYER_NORM_EPS)
}

/// Two-layer GELU MLP.
pub fn feed_forward(tape: &mut Tape, x: Var, p: &FeedForwardVars) -> Result<Var> {
    let h = linear(tape, x, p.w1, Some(p.b1))?;
    let h = tape.gelu(h);
    linear(tape, h, p.w2, Some(p.b2))
}

/// Multi-head scaled dot-product attention of `q_in: [Lq, d]` over `kv_in: [Lk, d]`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    p: &AttentionVars,
    heads: usize,
    mask: Mask,
) -> Result<Var> {
    Ok(attention_with_weights(tape, q_in, kv_in, p, heads, mask)?.0)
}

/// Same as [`multi_head_attention`], also returning each head's `[Lq, Lk]` weights.
pub fn attention_with_weights(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    p: &AttentionVars,
    heads: usize,
    mask: Mask,
) -> Result<(Var, Vec<Var>)> {
    let (lq, d) = tape.value(q_in).dims2()?;
    let (lk, dk) = tape.value(kv_in).dims2()?;
    if d != dk {
        return Err(NdError::ShapeMismatch {
            op: "multi_head_attention",
            lhs: vec![lq, d],
            rhs: vec![lk, dk],
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(NdError::NotDivisible { what: "model width", value: d, divisor: heads });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear(tape, q_in, p.wq, Some(p.bq))?;
    let k = linear(tape, kv_in, p.wk, Some(p.bk))?;
    let v = linear(tape, kv_in, p.wv, Some(p.bv))?;
    let mask_var = match mask {
        Mask::None => None,
        Mask::Causal => {
            // Query i sees keys up to i + (lk - lq), aligning the last query with the last key.
            let offset = lk as isize - lq as isize;
            let m = Tensor::from_fn([lq, lk], |idx| {
                let (i, j) = ((idx / lk) as isize, (idx % lk) as isize);
                if j > i + offset {
                    -1e30
                } else {
                    0.0
                }
            });
            Some(tape.constant(m))
        }
    };

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask_var {
            scores = tape.add(scores, m)?;
        }
        let w = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let out = linear(tape, cat, p.wo, Some(p.bo))?;
    Ok((out, weights))
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1: LayerNormVars,
    pub attn: AttentionVars,
    pub ln2: LayerNormVars,
    pub ffn: FeedForwardVars,
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
pub fn self_attention_block(
    tape: &mut Tape,
    x: Var,
    p: &BlockVars,
    heads: usize,
    mask: Mask,
) -> Result<Var> {
    let n = layer_norm(tape, x, &p.ln1)?;
    let a = multi_head_attention(tape, n, n, &p.attn, heads, mask)?;
    let x = tape.add(x, a)?;
    let n = layer_norm(tape, x, &p.ln2)?;
    let f = feed_forward(tape, n, &p.ffn)?;
    tape.add(x, f)
}

#[derive(Clone, Copy, Debug)]
pub struct CrossBlockVars {
    pub ln_q: LayerNormVars,
    pub ln_kv: LayerNormVars,
    pub attn: AttentionVars,
    pub ln_ff: LayerNormVars,
    pub ffn: FeedForwardVars,
}

/// Pre-norm cross-attention block: the query state attends to `kv`, then passes
/// through a residual feed-forward. Returns the new query state and the
/// per-head attention weights.
pub fn cross_attention_block(
    tape: &mut Tape,
    q: Var,
    kv: Var,
    p: &CrossBlockVars,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let nq = layer_norm(tape, q, &p.ln_q)?;
    let nkv = layer_norm(tape, kv, &p.ln_kv)?;
    let (a, w) = attention_with_weights(tape, nq, nkv, &p.attn, heads, Mask::None)?;
    let q = tape.add(q, a)?;
    let n = layer_norm(tape, q, &p.ln_ff)?;
    let f = feed_forward(tape, n, &p.ffn)?;
    Ok((tape.add(q, f)?, w))
}
