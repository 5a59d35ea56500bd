//! Glue between datasets, the model, training and evaluation.

use ndcore::Tensor;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{DataConfig, RunConfig};
use crate::dataset::{build_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::Model;
use crate::text::PromptMode;
use crate::synth::default_vocabulary;
use crate::train::{similarity_values, train_stage_with, with_pool, Stage, StageLog, TrainItem, TrainSet};

fn check_vocab(model: &Model, dataset: &Dataset) -> Result<()> {
    if model.vocab != dataset.vocab {
        return Err(Error::VocabularyMismatch("dataset vocabulary differs from the model's".into()));
    }
    Ok(())
}

/// Classes whose verb is not held out.
pub fn seen_classes(dataset: &Dataset) -> Vec<usize> {
    let held: Vec<&String> = dataset.config.held_out_verbs.iter().collect();
    (0..dataset.vocab.n_classes())
        .filter(|&c| !held.contains(&&dataset.vocab.verbs[dataset.vocab.valid_triplets[c].verb]))
        .collect()
}

/// Encodes the train split once. Only seen classes enter the loss: classes
/// of held-out verbs are neither positives nor negatives during training.
pub fn train_set(model: &Model, dataset: &Dataset) -> Result<TrainSet> {
    check_vocab(model, dataset)?;
    let samples = dataset.split(Split::Train);
    let items = with_pool(|| {
        samples
            .par_iter()
            .map(|s| {
                Ok(TrainItem {
                    grid: model.encode_clip(&s.clip)?,
                    tracks: s.tracks.clone(),
                    classes: s.clip.gt_triplets.iter().copied().collect(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(TrainSet { items, loss_classes: seen_classes(dataset) })
}

/// Scores `[N, C]` (sigmoid of the cosine logits over all classes) and
/// binary labels for one split.
pub fn score_split(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    mode: PromptMode,
    scale: f64,
    use_trajectory: bool,
) -> Result<(Tensor, Tensor)> {
    check_vocab(model, dataset)?;
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::Dataset(format!("split {} is empty", split.name())));
    }
    let e = model.class_embeddings(mode)?;
    let rows = with_pool(|| {
        samples
            .par_iter()
            .map(|s| {
                let grid = model.encode_clip(&s.clip)?;
                model.embed(&grid, use_trajectory.then_some(&s.tracks[..]))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let h = Tensor::stack_rows(&rows)?;
    let scores = similarity_values(&h, &e, scale)?.map(|s| 1.0 / (1.0 + (-s).exp()));
    let c = dataset.vocab.n_classes();
    let mut labels = Tensor::zeros([samples.len(), c]);
    for (i, s) in samples.iter().enumerate() {
        for &k in &s.clip.gt_triplets {
            labels.data_mut()[i * c + k] = 1.0;
        }
    }
    Ok((scores, labels))
}

pub fn evaluate_split(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    mode: PromptMode,
    scale: f64,
    use_trajectory: bool,
) -> Result<MetricsReport> {
    let (s, y) = score_split(model, dataset, split, mode, scale, use_trajectory)?;
    evaluate(&s, &y, &dataset.vocab)
}

/// Rows whose ground truth contains only motion-defined verbs (anything
/// except `null_verb`).
pub fn motion_rows(dataset: &Dataset, split: Split) -> Vec<usize> {
    let null = dataset.vocab.verbs.iter().position(|v| v == "null_verb");
    dataset
        .split(split)
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            !s.clip.gt_triplets.is_empty()
                && s.clip.gt_triplets.iter().all(|&c| Some(dataset.vocab.valid_triplets[c].verb) != null)
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let picked: Vec<Tensor> = rows.iter().map(|&r| Tensor::vector(t.row(r).to_vec())).collect();
    if picked.is_empty() {
        return Err(Error::Dataset("no rows selected".into()));
    }
    Ok(Tensor::stack_rows(&picked)?)
}

/// Loads `data.dir` when set, else generates the dataset in memory.
pub fn load_dataset(data: &DataConfig) -> Result<Dataset> {
    match &data.dir {
        Some(dir) => Dataset::load(dir),
        None => build_dataset(&data.dataset, &data.scene(), &default_vocabulary()),
    }
}

/// Stage 2 needs a completed stage 1 unless `cold_start` is set.
pub fn check_stage_order(stage: Stage, completed: u32, cold_start: bool) -> Result<()> {
    if stage == Stage::Two && completed < 1 && !cold_start {
        return Err(Error::StageOrder);
    }
    Ok(())
}

pub type OnCheckpoint<'a> = dyn FnMut(&Checkpoint) -> Result<()> + Send + 'a;

/// Trains one stage and returns its loss log and final checkpoint.
/// `completed` is the last stage already applied to `model` (0 for none).
/// Every `checkpoint_every` steps an intermediate checkpoint goes to
/// `on_checkpoint`.
pub fn run_stage(
    model: &mut Model,
    set: &TrainSet,
    stage: Stage,
    config: &RunConfig,
    completed: u32,
    cold_start: bool,
    on_checkpoint: &mut OnCheckpoint,
) -> Result<(StageLog, Checkpoint)> {
    check_stage_order(stage, completed, cold_start)?;
    let every = config.checkpoint_every;
    let total = config.train.steps(stage);
    let log = train_stage_with(model, set, stage, &config.train, &mut |step, m| {
        if every > 0 && step % every == 0 && step < total {
            on_checkpoint(&Checkpoint::capture(m, config, stage.number(), step))?;
        }
        Ok(())
    })?;
    let ck = Checkpoint::capture(model, config, stage.number(), total);
    Ok((log, ck))
}

/// Fresh model, both stages in order.
pub fn train_two_stage(config: &RunConfig, dataset: &Dataset) -> Result<(Model, Vec<StageLog>, Checkpoint)> {
    config.validate()?;
    let mut model = Model::new(&config.model, &dataset.vocab, config.train.seed)?;
    let set = train_set(&model, dataset)?;
    let (l1, _) = run_stage(&mut model, &set, Stage::One, config, 0, false, &mut |_| Ok(()))?;
    let (l2, ck) = run_stage(&mut model, &set, Stage::Two, config, 1, false, &mut |_| Ok(()))?;
    Ok((model, vec![l1, l2], ck))
}

/// Scores a split with the settings recorded in `config`.
pub fn evaluate_with(model: &Model, dataset: &Dataset, split: Split, config: &RunConfig) -> Result<MetricsReport> {
    let t = &config.train;
    let mut r = evaluate_split(model, dataset, split, t.prompt_mode, t.scale, t.use_trajectory)?;
    r.config_digest = Some(config.digest());
    Ok(r)
}
