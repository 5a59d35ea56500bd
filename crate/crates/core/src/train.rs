//! Cosine-logit multi-label BCE, AdamW with per-group learning rates and the
//! two-stage training schedule.

use std::collections::BTreeMap;

use ndcore::{nn::COSINE_EPS, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Binder, ParamGroup, ParamId, ParamStore};
use crate::text::PromptMode;
use crate::trajectory::BoxTrack;
use crate::vision::TokenGrid;

/// `s[i, c] = scale * cos(h_i, e_c)`.
pub fn similarity_logits(tape: &mut Tape, h: Var, e: Var, scale: f64) -> Result<Var> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("similarity scale must be positive, got {scale}")));
    }
    let hn = tape.row_normalize(h, COSINE_EPS);
    let en = tape.row_normalize(e, COSINE_EPS);
    let et = tape.transpose(en)?;
    let s = tape.matmul(hn, et)?;
    Ok(tape.scale(s, scale))
}

pub fn similarity_values(h: &Tensor, e: &Tensor, scale: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let ev = tape.constant(e.clone());
    let s = similarity_logits(&mut tape, hv, ev, scale)?;
    Ok(tape.value(s).clone())
}

/// Mean binary cross-entropy over all `N x C` entries.
pub fn bce_loss(tape: &mut Tape, s: Var, y: &Tensor) -> Result<Var> {
    if let Some(&v) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryLabel(v));
    }
    Ok(tape.bce_with_logits(s, y)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub predictor: f64,
    pub trajectory: f64,
    pub text_context: f64,
}

impl LearningRates {
    pub fn of(&self, group: ParamGroup) -> Option<f64> {
        match group {
            ParamGroup::Predictor => Some(self.predictor),
            ParamGroup::Trajectory => Some(self.trajectory),
            ParamGroup::TextContext => Some(self.text_context),
            ParamGroup::Frozen => None,
        }
    }
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { predictor: 5e-4, trajectory: 1e-3, text_context: 2.5e-5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: LearningRates::default(), beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

/// AdamW with decoupled weight decay; moments are kept per parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, state: BTreeMap::new() }
    }

    /// Updates every parameter of the `active` groups. Each must have an
    /// entry in `grads`; frozen parameters are never touched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, Tensor>,
        active: &[ParamGroup],
    ) -> Result<()> {
        let c = self.config;
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.group.is_trainable() && active.contains(&p.group))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let group = store.get(id).group;
            let lr = c.lr.of(group).expect("trainable group");
            let g = grads.get(&id).ok_or_else(|| Error::MissingGradient(store.get(id).name.clone()))?;
            let value = store.value_mut(id);
            if g.shape() != value.shape() {
                return Err(Error::Tensor(ndcore::NdError::ShapeMismatch {
                    op: "adamw",
                    lhs: value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                }));
            }
            let n = value.numel();
            let st = self.state.entry(id).or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n], t: 0 });
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t as i32);
            let bc2 = 1.0 - c.beta2.powi(st.t as i32);
            for (((p, &g), m), v) in value.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= lr * c.weight_decay * *p;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Visual tokens only; trajectory parameters stay at initialization.
    One = 1,
    /// Augmented tokens; every trainable group updates.
    Two = 2,
}

impl Stage {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u32 {
        self as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub scale: f64,
    pub prompt_mode: PromptMode,
    /// Off trains the visual-only ablation in both stages.
    pub use_trajectory: bool,
}

impl TrainConfig {
    pub fn steps(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.stage1_steps,
            Stage::Two => self.stage2_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        for g in ParamGroup::TRAINABLE {
            let lr = self.optimizer.lr.of(g).unwrap_or(0.0);
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate for {g:?} must be non-negative")));
            }
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 150,
            stage2_steps: 450,
            batch_size: 16,
            seed: 42,
            optimizer: AdamWConfig::default(),
            scale: 10.0,
            prompt_mode: PromptMode::Rephrased,
            use_trajectory: true,
        }
    }
}

/// One training example with its visual tokens precomputed (the visual
/// encoder is frozen, so they never change).
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub grid: TokenGrid,
    pub tracks: Vec<BoxTrack>,
    pub classes: Vec<usize>,
}

/// Training examples plus the classes that enter the loss. Classes outside
/// `loss_classes` (held-out verbs) are neither positives nor negatives.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub items: Vec<TrainItem>,
    pub loss_classes: Vec<usize>,
}

impl TrainSet {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        if self.loss_classes.is_empty() {
            return Err(Error::Dataset("no classes enter the loss".into()));
        }
        for item in &self.items {
            for &c in item.classes.iter().chain(&self.loss_classes) {
                if c >= n_classes {
                    return Err(Error::VocabularyMismatch(format!("class {c} >= {n_classes}")));
                }
            }
        }
        Ok(())
    }

    fn labels(&self, batch: &[usize]) -> Tensor {
        let pos: BTreeMap<usize, usize> = self.loss_classes.iter().enumerate().map(|(j, &c)| (c, j)).collect();
        let mut y = Tensor::zeros([batch.len(), self.loss_classes.len()]);
        let cols = self.loss_classes.len();
        for (r, &i) in batch.iter().enumerate() {
            for c in &self.items[i].classes {
                if let Some(&j) = pos.get(c) {
                    y.data_mut()[r * cols + j] = 1.0;
                }
            }
        }
        y
    }
}

/// Number of worker threads: `TRAJPRED_THREADS` if set, else all cores.
pub fn thread_count() -> usize {
    std::env::var("TRAJPRED_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `f` inside a pool sized by [`thread_count`].
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(thread_count()).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: u32,
    /// Loss before each update.
    pub losses: Vec<f64>,
}

fn add_grads(acc: &mut BTreeMap<ParamId, Tensor>, grads: Vec<(ParamId, Tensor)>) {
    for (id, g) in grads {
        if let Some(a) = acc.get_mut(&id) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
}

/// Runs the stage's AdamW updates on mini-batches drawn by a seeded shuffle.
/// Per-sample work runs in parallel; gradients are summed in batch order, so
/// results do not depend on the thread count.
pub fn train_stage(model: &mut Model, data: &TrainSet, stage: Stage, config: &TrainConfig) -> Result<StageLog> {
    train_stage_with(model, data, stage, config, &mut |_, _| Ok(()))
}

/// Step callback: receives the number of completed steps and the model.
pub type OnStep<'a> = dyn FnMut(usize, &Model) -> Result<()> + Send + 'a;

/// [`train_stage`] with `on_step` called after every update.
pub fn train_stage_with(
    model: &mut Model,
    data: &TrainSet,
    stage: Stage,
    config: &TrainConfig,
    on_step: &mut OnStep,
) -> Result<StageLog> {
    data.validate(model.vocab.n_classes())?;
    config.validate()?;
    let steps = config.steps(stage);
    let use_traj = stage == Stage::Two && config.use_trajectory;
    let mut active = vec![ParamGroup::Predictor, ParamGroup::TextContext];
    if use_traj {
        active.push(ParamGroup::Trajectory);
    }
    let mut opt = AdamW::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::synth::derive_seed(config.seed, &format!("stage{}", stage.number())));
    let mut order: Vec<usize> = Vec::new();
    let mut log = StageLog { stage: stage.number(), losses: Vec::with_capacity(steps) };

    with_pool(|| -> Result<()> {
        for step in 0..steps {
            let mut batch = Vec::with_capacity(config.batch_size);
            while batch.len() < config.batch_size {
                if order.is_empty() {
                    order = (0..data.items.len()).collect();
                    order.shuffle(&mut rng);
                }
                batch.push(order.pop().expect("refilled"));
            }
            let loss = train_step(model, data, &batch, use_traj, &active, config, &mut opt)?;
            log.losses.push(loss);
            on_step(step + 1, model)?;
        }
        Ok(())
    })?;
    Ok(log)
}

fn train_step(
    model: &mut Model,
    data: &TrainSet,
    batch: &[usize],
    use_traj: bool,
    active: &[ParamGroup],
    config: &TrainConfig,
    opt: &mut AdamW,
) -> Result<f64> {
    let store = &model.store;
    let classes = &data.loss_classes;

    // Class embeddings for the loss classes.
    let mut text_tape = Tape::new();
    let mut text_binder = Binder::new(store, true);
    let rows = classes
        .iter()
        .map(|&c| {
            let tokens = model.text.render_prompt(&model.vocab, c, config.prompt_mode)?;
            model.text.encode_text(&mut text_tape, &mut text_binder, &tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    let e = text_tape.concat_rows(&rows)?;

    // Per-sample forward passes, each on its own tape.
    let model_ref = &*model;
    let mut passes = batch
        .par_iter()
        .map(|&i| {
            let item = &data.items[i];
            let mut tape = Tape::new();
            let mut binder = Binder::new(store, true);
            let tracks = use_traj.then_some(&item.tracks[..]);
            let f = model_ref.forward(&mut tape, &mut binder, &item.grid, tracks)?;
            Ok((tape, binder, f.h))
        })
        .collect::<Result<Vec<_>>>()?;

    // Loss on detached embeddings, then seed each tape with its slice.
    let h_rows: Vec<Tensor> = passes.iter().map(|(t, _, h)| t.value(*h).clone()).collect();
    let mut loss_tape = Tape::new();
    let h = loss_tape.leaf(Tensor::stack_rows(&h_rows)?, true);
    let ev = loss_tape.leaf(text_tape.value(e).clone(), true);
    let s = similarity_logits(&mut loss_tape, h, ev, config.scale)?;
    let y = data.labels(batch);
    let loss = bce_loss(&mut loss_tape, s, &y)?;
    loss_tape.backward(loss)?;
    let loss_value = loss_tape.value(loss).item()?;
    let dh = loss_tape.grad(h).expect("leaf grad").clone();
    let de = loss_tape.grad(ev).expect("leaf grad").clone();

    let d_t = model.config.d_t;
    let per_sample: Vec<Vec<(ParamId, Tensor)>> = passes
        .par_iter_mut()
        .enumerate()
        .map(|(r, (tape, binder, hv))| {
            let seed = Tensor::vector(dh.row(r).to_vec());
            debug_assert_eq!(seed.numel(), d_t);
            tape.backward_with_seed(*hv, &seed)?;
            Ok(binder.grads(tape))
        })
        .collect::<Result<Vec<_>>>()?;
    text_tape.backward_with_seed(e, &de)?;

    let mut acc: BTreeMap<ParamId, Tensor> = store
        .iter()
        .filter(|(_, p)| active.contains(&p.group))
        .map(|(id, p)| (id, Tensor::zeros(p.value.shape().to_vec())))
        .collect();
    for g in per_sample {
        add_grads(&mut acc, g);
    }
    add_grads(&mut acc, text_binder.grads(&text_tape));
    drop(passes);
    opt.step(&mut model.store, &acc, active)?;
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logits_closed_forms() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 3.0]]);
        let e = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, -1.0], vec![0.0, 0.0]]);
        let s = similarity_values(&h, &e, 2.5).unwrap();
        assert!((s.at2(0, 0) - 2.5).abs() < 1e-6);
        assert!(s.at2(0, 1).abs() < 1e-12);
        assert_eq!(s.at2(1, 2), 0.0);
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let l = bce_loss(&mut tape, s, &Tensor::from_rows(&[vec![1.0, 0.0]])).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let s = tape.constant(Tensor::from_rows(&[vec![40.0, -40.0]]));
        let l = bce_loss(&mut tape, s, &Tensor::from_rows(&[vec![1.0, 0.0]])).unwrap();
        let v = tape.value(l).item().unwrap();
        assert!(v.is_finite() && (0.0..1e-12).contains(&v));
        let bad = bce_loss(&mut tape, s, &Tensor::from_rows(&[vec![0.5, 0.0]]));
        assert!(matches!(bad, Err(Error::NonBinaryLabel(_))));
    }

    fn one_param(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![value, -value]), ParamGroup::Predictor);
        (store, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut store, id) = one_param(0.7);
        let mut cfg = AdamWConfig::default();
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(cfg);
        let grads = BTreeMap::from([(id, Tensor::zeros([2]))]);
        opt.step(&mut store, &grads, &[ParamGroup::Predictor]).unwrap();
        assert_eq!(store.value(id).data(), &[0.7, -0.7]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut store, id) = one_param(0.3);
        let mut cfg = AdamWConfig::default();
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(cfg);
        let grads = BTreeMap::from([(id, Tensor::vector(vec![2.0, -0.01]))]);
        opt.step(&mut store, &grads, &[ParamGroup::Predictor]).unwrap();
        let lr = cfg.lr.predictor;
        assert!((store.value(id).data()[0] - (0.3 - lr)).abs() < 1e-10);
        assert!((store.value(id).data()[1] - (-0.3 + lr)).abs() < 1e-9);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut store, _) = one_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut store, &BTreeMap::new(), &[ParamGroup::Predictor]).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(_)));
        // Inactive groups need no gradient.
        opt.step(&mut store, &BTreeMap::new(), &[ParamGroup::Trajectory]).unwrap();
    }

    #[test]
    fn quadratic_bowl_descends() {
        let (mut store, id) = one_param(1.0);
        let mut cfg = AdamWConfig::default();
        cfg.lr.predictor = 0.05;
        let mut opt = AdamW::new(cfg);
        let loss = |s: &ParamStore| s.value(id).data().iter().map(|x| x * x).sum::<f64>();
        let mut last = loss(&store);
        for _ in 0..10 {
            let g = store.value(id).map(|x| 2.0 * x);
            opt.step(&mut store, &BTreeMap::from([(id, g)]), &[ParamGroup::Predictor]).unwrap();
            let now = loss(&store);
            assert!(now < last);
            last = now;
        }
    }
}
