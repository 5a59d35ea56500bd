//! Named parameter storage, group membership and per-tape binding.

use std::collections::HashMap;

use ndcore::nn::{AttentionVars, BlockVars, CrossBlockVars, FeedForwardVars, LayerNormVars};
use ndcore::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer group. Every parameter belongs to exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Predictor,
    Trajectory,
    TextContext,
    Frozen,
}

impl ParamGroup {
    pub const TRAINABLE: [ParamGroup; 3] =
        [ParamGroup::Predictor, ParamGroup::Trajectory, ParamGroup::TextContext];

    pub fn is_trainable(self) -> bool {
        self != ParamGroup::Frozen
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    /// Locked parameters can never leave the frozen group.
    pub locked: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.insert(name.into(), value, group, false)
    }

    /// Adds a parameter that stays frozen for its whole lifetime.
    pub fn add_locked(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, ParamGroup::Frozen, true)
    }

    fn insert(&mut self, name: String, value: Tensor, group: ParamGroup, locked: bool) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, group, locked });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Moves a parameter between groups; locked parameters refuse to become trainable.
    pub fn set_group(&mut self, id: ParamId, group: ParamGroup) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.locked && group.is_trainable() {
            return Err(Error::FrozenViolation(p.name.clone()));
        }
        p.group = group;
        Ok(())
    }

    /// Little-endian f32 bytes of every parameter whose name starts with `prefix`.
    pub fn snapshot(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&p.value.to_f32_le_bytes());
        }
        out
    }

    /// Exact 64-bit bytes of every parameter in `group`.
    pub fn group_snapshot(&self, group: ParamGroup) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            out.extend_from_slice(p.name.as_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Exact 64-bit bytes of every parameter whose name starts with `prefix`.
    pub fn snapshot_exact(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            out.extend_from_slice(p.name.as_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Per-tape view of a [`ParamStore`]: each parameter becomes one leaf the
/// first time it is used.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'a> Binder<'a> {
    /// `track_grads = false` binds everything as constants (evaluation).
    pub fn new(store: &'a ParamStore, track_grads: bool) -> Self {
        Self { store, vars: vec![None; store.len()], track_grads }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn bind(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = tape.leaf(p.value.clone(), self.track_grads && p.group.is_trainable());
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter that received one.
    pub fn grads(&self, tape: &Tape) -> Vec<(ParamId, Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                tape.grad(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }
}

// ----- initialisation helpers and parameter bundles -----

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Adds a parameter through either [`ParamStore::add`] or [`ParamStore::add_locked`].
pub struct Registrar<'s> {
    pub store: &'s mut ParamStore,
    pub group: ParamGroup,
    pub locked: bool,
}

impl Registrar<'_> {
    pub fn add(&mut self, name: String, value: Tensor) -> ParamId {
        if self.locked {
            self.store.add_locked(name, value)
        } else {
            self.store.add(name, value, self.group)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(reg: &mut Registrar, prefix: &str, d: usize) -> Self {
        Self {
            gain: reg.add(format!("{prefix}.gain"), Tensor::ones([d])),
            bias: reg.add(format!("{prefix}.bias"), Tensor::zeros([d])),
        }
    }

    pub fn bind(&self, b: &mut Binder, t: &mut Tape) -> LayerNormVars {
        LayerNormVars { gain: b.bind(t, self.gain), bias: b.bind(t, self.bias) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    pub fn new(reg: &mut Registrar, rng: &mut impl Rng, prefix: &str, d: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut w = |name: &str| reg.add(format!("{prefix}.{name}"), normal(rng, &[d, d], std));
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |name: &str| reg.add(format!("{prefix}.{name}"), Tensor::zeros([d]));
        let (bq, bk, bv, bo) = (b("bq"), b("bk"), b("bv"), b("bo"));
        Self { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    pub fn bind(&self, b: &mut Binder, t: &mut Tape) -> AttentionVars {
        AttentionVars {
            wq: b.bind(t, self.wq),
            bq: b.bind(t, self.bq),
            wk: b.bind(t, self.wk),
            bk: b.bind(t, self.bk),
            wv: b.bind(t, self.wv),
            bv: b.bind(t, self.bv),
            wo: b.bind(t, self.wo),
            bo: b.bind(t, self.bo),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    pub fn new(reg: &mut Registrar, rng: &mut impl Rng, prefix: &str, d: usize, hidden: usize) -> Self {
        let w1 = reg.add(format!("{prefix}.w1"), normal(rng, &[d, hidden], 1.0 / (d as f64).sqrt()));
        let b1 = reg.add(format!("{prefix}.b1"), Tensor::zeros([hidden]));
        let w2 = reg.add(format!("{prefix}.w2"), normal(rng, &[hidden, d], 1.0 / (hidden as f64).sqrt()));
        let b2 = reg.add(format!("{prefix}.b2"), Tensor::zeros([d]));
        Self { w1, b1, w2, b2 }
    }

    pub fn bind(&self, b: &mut Binder, t: &mut Tape) -> FeedForwardVars {
        FeedForwardVars {
            w1: b.bind(t, self.w1),
            b1: b.bind(t, self.b1),
            w2: b.bind(t, self.w2),
            b2: b.bind(t, self.b2),
        }
    }
}

/// Pre-norm self-attention block parameters (4x feed-forward).
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FeedForwardParams,
}

impl BlockParams {
    pub fn new(reg: &mut Registrar, rng: &mut impl Rng, prefix: &str, d: usize) -> Self {
        Self {
            ln1: LayerNormParams::new(reg, &format!("{prefix}.ln1"), d),
            attn: AttentionParams::new(reg, rng, &format!("{prefix}.attn"), d),
            ln2: LayerNormParams::new(reg, &format!("{prefix}.ln2"), d),
            ffn: FeedForwardParams::new(reg, rng, &format!("{prefix}.ffn"), d, 4 * d),
        }
    }

    pub fn bind(&self, b: &mut Binder, t: &mut Tape) -> BlockVars {
        BlockVars {
            ln1: self.ln1.bind(b, t),
            attn: self.attn.bind(b, t),
            ln2: self.ln2.bind(b, t),
            ffn: self.ffn.bind(b, t),
        }
    }
}

/// Pre-norm cross-attention block parameters (4x feed-forward).
#[derive(Clone, Copy, Debug)]
pub struct CrossBlockParams {
    pub ln_q: LayerNormParams,
    pub ln_kv: LayerNormParams,
    pub attn: AttentionParams,
    pub ln_ff: LayerNormParams,
    pub ffn: FeedForwardParams,
}

impl CrossBlockParams {
    pub fn new(reg: &mut Registrar, rng: &mut impl Rng, prefix: &str, d: usize) -> Self {
        Self {
            ln_q: LayerNormParams::new(reg, &format!("{prefix}.ln_q"), d),
            ln_kv: LayerNormParams::new(reg, &format!("{prefix}.ln_kv"), d),
            attn: AttentionParams::new(reg, rng, &format!("{prefix}.attn"), d),
            ln_ff: LayerNormParams::new(reg, &format!("{prefix}.ln_ff"), d),
            ffn: FeedForwardParams::new(reg, rng, &format!("{prefix}.ffn"), d, 4 * d),
        }
    }

    pub fn bind(&self, b: &mut Binder, t: &mut Tape) -> CrossBlockVars {
        CrossBlockVars {
            ln_q: self.ln_q.bind(b, t),
            ln_kv: self.ln_kv.bind(b, t),
            attn: self.attn.bind(b, t),
            ln_ff: self.ln_ff.bind(b, t),
            ffn: self.ffn.bind(b, t),
        }
    }
}
