//! Central finite-difference gradient checks.
//!
//! Each check reduces the operation's output to a scalar through a fixed
//! random projection, then compares the tape gradient against central
//! differences on every input element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::nn::{self, AttentionVars, BlockVars, CrossBlockVars, FeedForwardVars, LayerNormVars, Mask};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub type Forward = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// A generated instance: input values and the function under test.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub forward: Box<Forward>,
}

impl Instance {
    pub fn new(inputs: Vec<Tensor>, forward: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        Self { inputs, forward: Box::new(forward) }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn projected_loss(f: &Forward, inputs: &[Tensor], proj: Option<&Tensor>, grad: bool) -> Result<(Tape, Vec<Var>, Var, Tensor)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = f(&mut tape, &vars)?;
    let proj = match proj {
        Some(p) => p.clone(),
        None => {
            // Deterministic projection derived from the output shape: varied
            // weights so no gradient component cancels by symmetry.
            let shape = tape.value(out).shape().to_vec();
            Tensor::from_fn(shape, |i| 0.5 + ((i as f64 + 1.0) * 0.754_877_666).fract())
        }
    };
    let r = tape.constant(proj.clone());
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss, proj))
}

/// Relative error `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
pub fn relative_error(f: &Forward, inputs: &[Tensor], step: f64) -> Result<f64> {
    let (mut tape, vars, loss, proj) = projected_loss(f, inputs, None, true)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match tape.grad(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let (tape, _, loss, _) = projected_loss(f, perturbed, Some(&proj), false)?;
        tape.value(loss).item()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for idx in 0..inputs.len() {
        for k in 0..inputs[idx].numel() {
            let orig = inputs[idx].data()[k];
            work[idx].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[idx].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[idx].data_mut()[k] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let denom = norm(&analytic).max(norm(&numeric));
    if denom < 1e-12 {
        return Ok(norm(&diff));
    }
    Ok(norm(&diff) / denom)
}

/// Runs `instances` generated cases and reports the worst relative error.
pub fn run_check(
    name: &str,
    instances: usize,
    seed: u64,
    mut generate: impl FnMut(&mut ChaCha8Rng) -> Instance,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let inst = generate(&mut rng);
        let err = relative_error(inst.forward.as_ref(), &inst.inputs, FD_STEP)?;
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(GradCheck { name: name.to_string(), instances, max_rel_error: worst, tolerance: FD_TOLERANCE })
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Attention parameter tensors in `AttentionVars` field order.
pub fn attention_tensors(rng: &mut impl Rng, d: usize) -> Vec<Tensor> {
    let s = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(8);
    for _ in 0..4 {
        out.push(random_tensor(rng, &[d, d]).map(|v| v * s * 2.0));
        out.push(random_tensor(rng, &[d]).map(|v| v * 0.1));
    }
    out
}

pub fn attention_vars(v: &[Var]) -> AttentionVars {
    AttentionVars { wq: v[0], bq: v[1], wk: v[2], bk: v[3], wv: v[4], bv: v[5], wo: v[6], bo: v[7] }
}

pub fn layer_norm_tensors(rng: &mut impl Rng, d: usize) -> Vec<Tensor> {
    vec![random_tensor(rng, &[d]).map(|v| 1.0 + 0.2 * v), random_tensor(rng, &[d]).map(|v| 0.1 * v)]
}

pub fn ffn_tensors(rng: &mut impl Rng, d: usize, hidden: usize) -> Vec<Tensor> {
    vec![
        random_tensor(rng, &[d, hidden]).map(|v| v / (d as f64).sqrt()),
        random_tensor(rng, &[hidden]).map(|v| 0.1 * v),
        random_tensor(rng, &[hidden, d]).map(|v| v / (hidden as f64).sqrt()),
        random_tensor(rng, &[d]).map(|v| 0.1 * v),
    ]
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

/// Gradient checks for every differentiable primitive and the shared
/// attention/feed-forward blocks.
pub fn standard_suite(instances: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let mut s = seed;
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        s
    };

    out.push(run_check("add", instances, next(), |rng| {
        let (r, c) = dims(rng);
        Instance::new(vec![random_tensor(rng, &[r, c]), random_tensor(rng, &[r, c])], |t, v| t.add(v[0], v[1]))
    })?);
    out.push(run_check("sub", instances, next(), |rng| {
        let (r, c) = dims(rng);
        Instance::new(vec![random_tensor(rng, &[r, c]), random_tensor(rng, &[r, c])], |t, v| t.sub(v[0], v[1]))
    })?);
    out.push(run_check("mul", instances, next(), |rng| {
        let (r, c) = dims(rng);
        Instance::new(vec![random_tensor(rng, &[r, c]), random_tensor(rng, &[r, c])], |t, v| t.mul(v[0], v[1]))
    })?);
    out.push(run_check("add_row", instances, next(), |rng| {
        let (r, c) = dims(rng);
        Instance::new(vec![random_tensor(rng, &[r, c]), random_tensor(rng, &[c])], |t, v| t.add_row(v[0], v[1]))
    })?);
    out.push(run_check("scale", instances, next(), |rng| {
        let (r, c) = dims(rng);
        let k = rng.random_range(-2.0..2.0);
        Instance::new(vec![random_tensor(rng, &[r, c])], move |t, v| Ok(t.scale(v[0], k)))
    })?);
    out.push(run_check("matmul", instances, next(), |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(1..5);
        Instance::new(vec![random_tensor(rng, &[m, k]), random_tensor(rng, &[k, n])], |t, v| t.matmul(v[0], v[1]))
    })?);
    out.push(run_check("transpose", instances, next(), |rng| {
        let (r, c) = dims(rng);
        Instance::new(vec![random_tensor(rng, &[r, c])], |t, v| t.transpose(v[0]))
    })?);
    out.push(run_check("reshape", instances, next(), |rng| {
        let (r, c) = dims(rng);
        Instance::new(vec![random_tensor(rng, &[r, c])], move |t, v| t.reshape(v[0], &[c * r]))
    })?);
    out.push(run_check("softmax", instances, next(), |rng| {
        let (r, c) = dims(rng);
        let axis = rng.random_range(0..2);
        Instance::new(vec![random_tensor(rng, &[r, c + 1]).map(|v| 3.0 * v)], move |t, v| t.softmax(v[0], axis))
    })?);
    out.push(run_check("layer_norm", instances, next(), |rng| {
        let (r, c) = dims(rng);
        let d = c + 1;
        let mut inputs = vec![random_tensor(rng, &[r, d])];
        inputs.extend(layer_norm_tensors(rng, d));
        Instance::new(inputs, |t, v| t.layer_norm(v[0], v[1], v[2], nn::LAYER_NORM_EPS))
    })?);
    out.push(run_check("gelu", instances, next(), |rng| {
        let (r, c) = dims(rng);
        Instance::new(vec![random_tensor(rng, &[r, c]).map(|v| 3.0 * v)], |t, v| Ok(t.gelu(v[0])))
    })?);
    out.push(run_check("slice_cols", instances, next(), |rng| {
        let (r, c) = dims(rng);
        let start = rng.random_range(0..c);
        let len = rng.random_range(1..=c - start);
        Instance::new(vec![random_tensor(rng, &[r, c])], move |t, v| t.slice_cols(v[0], start, len))
    })?);
    out.push(run_check("concat_cols", instances, next(), |rng| {
        let (r, c) = dims(rng);
        let c2 = rng.random_range(1..4);
        Instance::new(vec![random_tensor(rng, &[r, c]), random_tensor(rng, &[r, c2])], |t, v| t.concat_cols(v))
    })?);
    out.push(run_check("slice_rows", instances, next(), |rng| {
        let (r, c) = dims(rng);
        let start = rng.random_range(0..r);
        let len = rng.random_range(1..=r - start);
        Instance::new(vec![random_tensor(rng, &[r, c])], move |t, v| t.slice_rows(v[0], start, len))
    })?);
    out.push(run_check("concat_rows", instances, next(), |rng| {
        let (r, c) = dims(rng);
        Instance::new(vec![random_tensor(rng, &[r, c]), random_tensor(rng, &[c])], |t, v| t.concat_rows(v))
    })?);
    out.push(run_check("gather_mean", instances, next(), |rng| {
        let (r, c) = dims(rng);
        let k = rng.random_range(1..5);
        let rows: Vec<usize> = (0..k).map(|_| rng.random_range(0..r)).collect();
        Instance::new(vec![random_tensor(rng, &[r, c])], move |t, v| t.gather_mean(v[0], &rows))
    })?);
    out.push(run_check("mean_rows", instances, next(), |rng| {
        let (r, c) = dims(rng);
        Instance::new(vec![random_tensor(rng, &[r, c])], |t, v| t.mean_rows(v[0]))
    })?);
    out.push(run_check("sum", instances, next(), |rng| {
        let (r, c) = dims(rng);
        Instance::new(vec![random_tensor(rng, &[r, c])], |t, v| Ok(t.sum(v[0])))
    })?);
    out.push(run_check("mean", instances, next(), |rng| {
        let (r, c) = dims(rng);
        Instance::new(vec![random_tensor(rng, &[r, c])], |t, v| Ok(t.mean(v[0])))
    })?);
    out.push(run_check("row_normalize", instances, next(), |rng| {
        let (r, c) = dims(rng);
        Instance::new(vec![random_tensor(rng, &[r, c + 1])], |t, v| Ok(t.row_normalize(v[0], nn::COSINE_EPS)))
    })?);
    out.push(run_check("cosine_similarity", instances, next(), |rng| {
        let d = rng.random_range(2..7);
        Instance::new(vec![random_tensor(rng, &[d]), random_tensor(rng, &[d])], |t, v| {
            t.cosine_similarity(v[0], v[1], nn::COSINE_EPS)
        })
    })?);
    out.push(run_check("bce_with_logits", instances, next(), |rng| {
        let (r, c) = dims(rng);
        let labels = Tensor::from_fn([r, c], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        Instance::new(vec![random_tensor(rng, &[r, c]).map(|v| 4.0 * v)], move |t, v| t.bce_with_logits(v[0], &labels))
    })?);
    out.push(run_check("multi_head_attention", instances, next(), |rng| {
        let heads = rng.random_range(1..3);
        let d = 2 * heads;
        let lq = rng.random_range(1..4);
        let lk = rng.random_range(1..4);
        let mask = if lq == lk && rng.random_bool(0.5) { Mask::Causal } else { Mask::None };
        let mut inputs = vec![random_tensor(rng, &[lq, d]), random_tensor(rng, &[lk, d])];
        inputs.extend(attention_tensors(rng, d));
        Instance::new(inputs, move |t, v| {
            nn::multi_head_attention(t, v[0], v[1], &attention_vars(&v[2..10]), heads, mask)
        })
    })?);
    out.push(run_check("feed_forward", instances, next(), |rng| {
        let d = rng.random_range(2..5);
        let mut inputs = vec![random_tensor(rng, &[2, d])];
        inputs.extend(ffn_tensors(rng, d, 2 * d));
        Instance::new(inputs, |t, v| {
            nn::feed_forward(t, v[0], &FeedForwardVars { w1: v[1], b1: v[2], w2: v[3], b2: v[4] })
        })
    })?);
    out.push(run_check("self_attention_block", instances, next(), |rng| {
        let d = 4;
        let l = rng.random_range(1..4);
        let mut inputs = vec![random_tensor(rng, &[l, d])];
        inputs.extend(layer_norm_tensors(rng, d));
        inputs.extend(attention_tensors(rng, d));
        inputs.extend(layer_norm_tensors(rng, d));
        inputs.extend(ffn_tensors(rng, d, 8));
        Instance::new(inputs, |t, v| {
            let p = BlockVars {
                ln1: LayerNormVars { gain: v[1], bias: v[2] },
                attn: attention_vars(&v[3..11]),
                ln2: LayerNormVars { gain: v[11], bias: v[12] },
                ffn: FeedForwardVars { w1: v[13], b1: v[14], w2: v[15], b2: v[16] },
            };
            nn::self_attention_block(t, v[0], &p, 2, Mask::None)
        })
    })?);
    out.push(run_check("cross_attention_block", instances, next(), |rng| {
        let d = 4;
        let lk = rng.random_range(1..4);
        let mut inputs = vec![random_tensor(rng, &[1, d]), random_tensor(rng, &[lk, d])];
        inputs.extend(layer_norm_tensors(rng, d));
        inputs.extend(layer_norm_tensors(rng, d));
        inputs.extend(attention_tensors(rng, d));
        inputs.extend(layer_norm_tensors(rng, d));
        inputs.extend(ffn_tensors(rng, d, 8));
        Instance::new(inputs, |t, v| {
            let p = CrossBlockVars {
                ln_q: LayerNormVars { gain: v[2], bias: v[3] },
                ln_kv: LayerNormVars { gain: v[4], bias: v[5] },
                attn: attention_vars(&v[6..14]),
                ln_ff: LayerNormVars { gain: v[14], bias: v[15] },
                ffn: FeedForwardVars { w1: v[16], b1: v[17], w2: v[18], b2: v[19] },
            };
            Ok(nn::cross_attention_block(t, v[0], v[1], &p, 2)?.0)
        })
    })?);
    Ok(out)
}
