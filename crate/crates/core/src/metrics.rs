//! Ranking metrics: per-class and component AP, Top@K recall.

use std::path::{Path, PathBuf};

use ndcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{Component, TripletVocabulary};

/// Indices sorted by descending score; equal scores keep ascending index order.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Mean over positive ranks `r` of precision at `r`. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (r, i) in rank_desc(scores).into_iter().enumerate() {
        if labels[i] == 1.0 {
            hits += 1;
            total += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

fn check_pair(scores: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    let (n, c) = scores.dims2()?;
    if labels.shape() != scores.shape() {
        return Err(Error::Tensor(ndcore::NdError::ShapeMismatch {
            op: "metrics",
            lhs: scores.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        }));
    }
    if let Some(&v) = labels.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryLabel(v));
    }
    Ok((n, c))
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    let (n, c) = t.dims2().expect("matrix");
    (0..n).map(|i| t.data()[i * c + j]).collect()
}

/// Per-class AP for every column.
pub fn per_class_ap(scores: &Tensor, labels: &Tensor) -> Result<Vec<Option<f64>>> {
    let (_, c) = check_pair(scores, labels)?;
    Ok((0..c).map(|j| average_precision(&column(scores, j), &column(labels, j))).collect())
}

/// Component scores (max over covering classes), labels (OR), and whether
/// each component is covered by any class at all.
pub fn component_projection(
    scores: &Tensor,
    labels: &Tensor,
    vocab: &TripletVocabulary,
    component: Component,
) -> Result<(Tensor, Tensor, Vec<bool>)> {
    let (n, c) = check_pair(scores, labels)?;
    if c != vocab.n_classes() {
        return Err(Error::VocabularyMismatch(format!("{c} score columns for {} classes", vocab.n_classes())));
    }
    let k = vocab.component_len(component);
    let mut s = Tensor::full([n, k], f64::NEG_INFINITY);
    let mut y = Tensor::zeros([n, k]);
    let mut covered = vec![false; k];
    for (class, t) in vocab.valid_triplets.iter().enumerate() {
        let j = component.of(t);
        covered[j] = true;
        for i in 0..n {
            let (sv, yv) = (scores.data()[i * c + class], labels.data()[i * c + class]);
            let cell = &mut s.data_mut()[i * k + j];
            *cell = cell.max(sv);
            let cell = &mut y.data_mut()[i * k + j];
            *cell = cell.max(yv);
        }
    }
    // Uncovered columns get a finite score; they are reported as undefined anyway.
    for (j, _) in covered.iter().enumerate().filter(|(_, &c)| !c) {
        for i in 0..n {
            s.data_mut()[i * k + j] = 0.0;
        }
    }
    Ok((s, y, covered))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopK {
    Fixed(usize),
    /// `K_i = |GT_i|` per sample.
    GroundTruth,
}

/// Mean recall of ground-truth classes within the top K scores, in percent,
/// over samples with a nonempty ground truth. Returns the value (`None` when
/// every sample is skipped) and the number of skipped samples.
pub fn top_k_accuracy(scores: &Tensor, labels: &Tensor, k: TopK) -> Result<(Option<f64>, usize)> {
    let (n, c) = check_pair(scores, labels)?;
    if k == TopK::Fixed(0) {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let (mut total, mut counted) = (0.0, 0usize);
    for i in 0..n {
        let y = &labels.data()[i * c..(i + 1) * c];
        let gt = y.iter().filter(|&&v| v == 1.0).count();
        if gt == 0 {
            continue;
        }
        let kk = match k {
            TopK::Fixed(k) => k,
            TopK::GroundTruth => gt,
        };
        let ranked = rank_desc(&scores.data()[i * c..(i + 1) * c]);
        let hit = ranked.iter().take(kk).filter(|&&j| y[j] == 1.0).count();
        total += hit as f64 / gt as f64;
        counted += 1;
    }
    Ok(((counted > 0).then(|| 100.0 * total / counted as f64), n - counted))
}

fn mean_defined(values: &[Option<f64>]) -> (Option<f64>, usize) {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let skipped = values.len() - defined.len();
    if defined.is_empty() {
        (None, skipped)
    } else {
        (Some(100.0 * defined.iter().sum::<f64>() / defined.len() as f64), skipped)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub triplet: String,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SkippedCounts {
    pub ivt_classes: usize,
    pub instruments: usize,
    pub verbs: usize,
    pub targets: usize,
    pub samples: usize,
}

/// Metrics in percent. Means skip undefined (no-positive) classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap_i: Option<f64>,
    pub ap_v: Option<f64>,
    pub ap_t: Option<f64>,
    pub ap_ivt: Option<f64>,
    pub top_gt: Option<f64>,
    pub top_1: Option<f64>,
    pub top_5: Option<f64>,
    pub top_10: Option<f64>,
    pub top_20: Option<f64>,
    pub per_class: Vec<ClassAp>,
    pub skipped: SkippedCounts,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

pub fn evaluate(scores: &Tensor, labels: &Tensor, vocab: &TripletVocabulary) -> Result<MetricsReport> {
    let (n, _) = check_pair(scores, labels)?;
    let ivt = per_class_ap(scores, labels)?;
    let (ap_ivt, skipped_ivt) = mean_defined(&ivt);
    let mut comp = Vec::new();
    for component in Component::ALL {
        let (s, y, covered) = component_projection(scores, labels, vocab, component)?;
        let aps: Vec<Option<f64>> =
            per_class_ap(&s, &y)?.into_iter().zip(covered).map(|(ap, c)| if c { ap } else { None }).collect();
        comp.push(mean_defined(&aps));
    }
    let top = |k| top_k_accuracy(scores, labels, k).map(|r| r.0);
    let (top_gt, skipped_samples) = top_k_accuracy(scores, labels, TopK::GroundTruth)?;
    Ok(MetricsReport {
        ap_i: comp[0].0,
        ap_v: comp[1].0,
        ap_t: comp[2].0,
        ap_ivt,
        top_gt,
        top_1: top(TopK::Fixed(1))?,
        top_5: top(TopK::Fixed(5))?,
        top_10: top(TopK::Fixed(10))?,
        top_20: top(TopK::Fixed(20))?,
        per_class: ivt
            .into_iter()
            .enumerate()
            .map(|(class, ap)| ClassAp { class, triplet: vocab.triplet_name(class), ap })
            .collect(),
        skipped: SkippedCounts {
            ivt_classes: skipped_ivt,
            instruments: comp[0].1,
            verbs: comp[1].1,
            targets: comp[2].1,
            samples: skipped_samples,
        },
        n_samples: n,
        config_digest: None,
    })
}

impl MetricsReport {
    /// The eight headline columns, in display order.
    pub fn headline(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("AP_I", self.ap_i),
            ("AP_V", self.ap_v),
            ("AP_T", self.ap_t),
            ("AP_IVT", self.ap_ivt),
            ("Top@(K=|GT|)", self.top_gt),
            ("Top@5", self.top_5),
            ("Top@10", self.top_10),
            ("Top@20", self.top_20),
        ]
    }

    pub fn table(&self) -> String {
        let cols = self.headline();
        let head: Vec<String> = cols.iter().map(|(n, _)| format!("{n:>13}")).collect();
        let vals: Vec<String> = cols
            .iter()
            .map(|(_, v)| match v {
                Some(v) => format!("{v:>13.2}"),
                None => format!("{:>13}", "n/a"),
            })
            .collect();
        format!("{}\n{}", head.join(""), vals.join(""))
    }
}

#[derive(Serialize, Deserialize)]
struct ShapeSidecar {
    shape: Vec<usize>,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes a matrix as little-endian f32 with a `<path>.json` shape sidecar.
pub fn save_matrix(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, t.to_f32_le_bytes()).map_err(|e| Error::io(path, e))?;
    let side = sidecar(path);
    let json = serde_json::to_string(&ShapeSidecar { shape: t.shape().to_vec() })
        .map_err(|e| Error::json("shape sidecar", e))?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load_matrix(path: &Path) -> Result<Tensor> {
    let side = sidecar(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let shape: ShapeSidecar = serde_json::from_str(&text).map_err(|e| Error::json(side.display().to_string(), e))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Tensor::from_f32_le_bytes(shape.shape, &bytes)?)
}
