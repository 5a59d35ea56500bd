//! Built-in verification: gradient checks, brute-force metric oracles, loss
//! closed forms and freeze invariants. Each check yields one JSON line.

use std::time::Instant;

use ndcore::gradcheck::standard_suite;
use ndcore::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::dataset::{build_dataset, DatasetConfig, DatasetSizes};
use crate::error::Result;
use crate::metrics::{self, TopK};
use crate::model::Model;
use crate::params::ParamGroup;
use crate::pipeline::{run_stage, train_set};
use crate::synth::{default_scene, default_vocabulary};
use crate::text::{Component, Triplet, TripletVocabulary, VERB_PHRASES};
use crate::train::{bce_loss, Stage};

#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub check: String,
    pub passed: bool,
    pub seconds: f64,
    pub detail: Value,
}

impl CheckLine {
    pub fn json(&self) -> String {
        serde_json::to_string(self).expect("check line serializes")
    }
}

#[derive(Clone, Debug)]
pub struct SelfCheckConfig {
    pub grad_instances: usize,
    pub metric_instances: usize,
    pub freeze_steps: usize,
    pub seed: u64,
}

impl Default for SelfCheckConfig {
    fn default() -> Self {
        Self { grad_instances: 20, metric_instances: 300, freeze_steps: 4, seed: 0 }
    }
}

fn timed(check: &str, f: impl FnOnce() -> Result<(bool, Value)>) -> CheckLine {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, json!({ "error": e.to_string() })));
    CheckLine { check: check.to_string(), passed, seconds: t.elapsed().as_secs_f64(), detail }
}

/// One line per differentiable operation.
pub fn gradient_checks(instances: usize, seed: u64) -> Vec<CheckLine> {
    let t = Instant::now();
    match standard_suite(instances, seed) {
        Ok(checks) => {
            let each = t.elapsed().as_secs_f64() / checks.len().max(1) as f64;
            checks
                .into_iter()
                .map(|c| CheckLine {
                    check: format!("grad/{}", c.name),
                    passed: c.passed(),
                    seconds: each,
                    detail: json!({ "instances": c.instances, "max_rel_error": c.max_rel_error, "tolerance": c.tolerance }),
                })
                .collect()
        }
        Err(e) => vec![CheckLine {
            check: "grad/suite".into(),
            passed: false,
            seconds: t.elapsed().as_secs_f64(),
            detail: json!({ "error": e.to_string() }),
        }],
    }
}

/// Brute-force reference implementations. Ranks come from pairwise
/// comparisons instead of sorting.
pub mod oracle {
    use super::*;

    /// Rank (0-based) of `i` under descending score, ascending index on ties.
    fn rank(scores: &[f64], i: usize) -> usize {
        (0..scores.len()).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count()
    }

    pub fn average_precision(scores: &[f64], labels: &[f64]) -> Option<f64> {
        let mut pos: Vec<(usize, usize)> =
            (0..scores.len()).filter(|&i| labels[i] == 1.0).map(|i| (rank(scores, i), i)).collect();
        if pos.is_empty() {
            return None;
        }
        pos.sort();
        let mut total = 0.0;
        for &(r, i) in &pos {
            let above = pos.iter().filter(|&&(r2, _)| r2 <= r).count();
            let _ = i;
            total += above as f64 / (r + 1) as f64;
        }
        Some(total / pos.len() as f64)
    }

    /// Max-score / OR-label projection onto one component, plus coverage.
    pub fn projection(
        scores: &Tensor,
        labels: &Tensor,
        vocab: &TripletVocabulary,
        comp: Component,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<bool>) {
        let (n, c) = scores.dims2().expect("matrix");
        let m = vocab.component_len(comp);
        let mut s = vec![vec![f64::NEG_INFINITY; m]; n];
        let mut y = vec![vec![0.0; m]; n];
        let mut covered = vec![false; m];
        for k in 0..m {
            for j in 0..c {
                if comp.of(&vocab.valid_triplets[j]) != k {
                    continue;
                }
                covered[k] = true;
                for i in 0..n {
                    s[i][k] = s[i][k].max(scores.data()[i * c + j]);
                    if labels.data()[i * c + j] == 1.0 {
                        y[i][k] = 1.0;
                    }
                }
            }
        }
        for (k, &cov) in covered.iter().enumerate() {
            if !cov {
                for row in s.iter_mut() {
                    row[k] = 0.0;
                }
            }
        }
        (s, y, covered)
    }

    pub fn top_k(scores: &Tensor, labels: &Tensor, k: Option<usize>) -> Option<f64> {
        let (n, c) = scores.dims2().expect("matrix");
        let (mut total, mut counted) = (0.0, 0usize);
        for i in 0..n {
            let row = &scores.data()[i * c..(i + 1) * c];
            let y = &labels.data()[i * c..(i + 1) * c];
            let gt = y.iter().filter(|&&v| v == 1.0).count();
            if gt == 0 {
                continue;
            }
            let kk = k.unwrap_or(gt);
            let hit = (0..c).filter(|&j| y[j] == 1.0 && rank(row, j) < kk).count();
            total += hit as f64 / gt as f64;
            counted += 1;
        }
        (counted > 0).then(|| 100.0 * total / counted as f64)
    }

    pub fn mean_percent(values: &[Option<f64>]) -> Option<f64> {
        let d: Vec<f64> = values.iter().flatten().copied().collect();
        (!d.is_empty()).then(|| 100.0 * d.iter().sum::<f64>() / d.len() as f64)
    }

    pub fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
        rows.iter().map(|r| r[j]).collect()
    }
}

/// Random small instance: scores drawn from a coarse grid so ties occur.
pub fn random_metric_instance(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, TripletVocabulary) {
    let verbs: Vec<&str> = VERB_PHRASES.iter().map(|(v, _)| *v).collect();
    let (ni, nv, nt) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let mut all: Vec<Triplet> = Vec::new();
    for i in 0..ni {
        for v in 0..nv {
            for t in 0..nt {
                all.push(Triplet { instrument: i, verb: v, target: t });
            }
        }
    }
    let c = rng.random_range(1..=all.len().min(12));
    let mut picked = Vec::new();
    while picked.len() < c {
        let t = all.swap_remove(rng.random_range(0..all.len()));
        picked.push(t);
    }
    let names = |p: &str, k: usize| (0..k).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let (inst, targ) = (names("i", ni), names("t", nt));
    let inst: Vec<&str> = inst.iter().map(|s| s.as_str()).collect();
    let targ: Vec<&str> = targ.iter().map(|s| s.as_str()).collect();
    let vocab = TripletVocabulary::with_standard_phrases(&inst, &verbs[..nv], &targ, picked).expect("valid");
    let n = rng.random_range(1..=20);
    let scores = Tensor::from_fn(vec![n, c], |_| rng.random_range(0..8) as f64 / 7.0);
    let p = rng.random_range(0.1..0.6);
    let labels = Tensor::from_fn(vec![n, c], |_| if rng.random_bool(p) { 1.0 } else { 0.0 });
    (scores, labels, vocab)
}

/// Compares `evaluate` against the oracles field by field, exactly.
pub fn compare_with_oracle(scores: &Tensor, labels: &Tensor, vocab: &TripletVocabulary) -> Result<Vec<String>> {
    use oracle::*;
    let r = metrics::evaluate(scores, labels, vocab)?;
    let (_, c) = scores.dims2()?;
    let rows = |t: &Tensor| -> Vec<Vec<f64>> { (0..t.dims2().unwrap().0).map(|i| t.row(i).to_vec()).collect() };
    let (s_rows, y_rows) = (rows(scores), rows(labels));
    let mut bad = Vec::new();
    let per: Vec<Option<f64>> = (0..c).map(|j| average_precision(&column(&s_rows, j), &column(&y_rows, j))).collect();
    for (j, ap) in per.iter().enumerate() {
        if r.per_class[j].ap != *ap {
            bad.push(format!("ap[{j}]"));
        }
    }
    if r.ap_ivt != mean_percent(&per) {
        bad.push("ap_ivt".into());
    }
    for (comp, got) in [(Component::Instrument, r.ap_i), (Component::Verb, r.ap_v), (Component::Target, r.ap_t)] {
        let (s, y, covered) = projection(scores, labels, vocab, comp);
        let (ms, my, mc) = metrics::component_projection(scores, labels, vocab, comp)?;
        let flat = |v: &Vec<Vec<f64>>| v.iter().flatten().copied().collect::<Vec<_>>();
        if mc != covered || my.data() != flat(&y).as_slice() {
            bad.push(format!("projection/{comp:?}"));
        }
        for k in 0..covered.len() {
            if covered[k] && (0..s.len()).any(|i| ms.data()[i * covered.len() + k] != s[i][k]) {
                bad.push(format!("projection/{comp:?}[{k}]"));
            }
        }
        let aps: Vec<Option<f64>> = (0..covered.len())
            .map(|k| if covered[k] { average_precision(&column(&s, k), &column(&y, k)) } else { None })
            .collect();
        if got != mean_percent(&aps) {
            bad.push(format!("ap_{comp:?}"));
        }
    }
    for (name, k, got) in [
        ("top_gt", None, r.top_gt),
        ("top_1", Some(1), r.top_1),
        ("top_5", Some(5), r.top_5),
        ("top_10", Some(10), r.top_10),
        ("top_20", Some(20), r.top_20),
    ] {
        if got != top_k(scores, labels, k) {
            bad.push(name.into());
        }
    }
    let direct = metrics::top_k_accuracy(scores, labels, TopK::GroundTruth)?.0;
    if direct != r.top_gt {
        bad.push("top_k_accuracy".into());
    }
    Ok(bad)
}

pub fn metric_oracle_check(instances: usize, seed: u64) -> CheckLine {
    timed("metrics/oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failures = Vec::new();
        for inst in 0..instances {
            let (s, y, v) = random_metric_instance(&mut rng);
            for field in compare_with_oracle(&s, &y, &v)? {
                failures.push(format!("instance {inst}: {field}"));
            }
        }
        failures.truncate(20);
        Ok((failures.is_empty(), json!({ "instances": instances, "failures": failures })))
    })
}

pub fn metric_fixture_check() -> CheckLine {
    timed("metrics/fixtures", || {
        let ap = metrics::average_precision(&[0.9, 0.8, 0.1], &[1.0, 0.0, 1.0]);
        let s = Tensor::new(vec![2, 3], vec![0.9, 0.1, 0.5, 0.2, 0.8, 0.7])?;
        let y = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0])?;
        let top = metrics::top_k_accuracy(&s, &y, TopK::GroundTruth)?.0;
        let ok = ap.is_some_and(|a| (a - 5.0 / 6.0).abs() < 1e-12) && top == Some(75.0);
        Ok((ok, json!({ "ap": ap, "top_gt": top })))
    })
}

pub fn bce_check() -> CheckLine {
    timed("loss/bce_closed_forms", || {
        let eval = |s: Vec<f64>, y: Vec<f64>| -> Result<f64> {
            let n = s.len();
            let mut tape = Tape::new();
            let sv = tape.constant(Tensor::new(vec![1, n], s)?);
            let l = bce_loss(&mut tape, sv, &Tensor::new(vec![1, n], y)?)?;
            Ok(tape.value(l).item()?)
        };
        let ln2 = eval(vec![0.0, 0.0], vec![1.0, 0.0])?;
        let sat = eval(vec![40.0, -40.0], vec![1.0, 0.0])?;
        let ok = (ln2 - std::f64::consts::LN_2).abs() <= 1e-12 && sat.is_finite() && (0.0..1e-12).contains(&sat);
        Ok((ok, json!({ "ln2_case": ln2, "saturated": sat })))
    })
}

/// Trains a small model for `steps` updates per stage and checks which
/// parameter groups moved.
pub fn freeze_check(steps: usize, seed: u64) -> CheckLine {
    timed("train/freeze_invariants", || {
        let data = DatasetConfig { sizes: DatasetSizes { train: 24, test: 4, unseen_test: 4 }, seed, ..Default::default() };
        let ds = build_dataset(&data, &default_scene(), &default_vocabulary())?;
        let mut cfg = RunConfig::default();
        cfg.train.stage1_steps = steps;
        cfg.train.stage2_steps = steps;
        cfg.train.batch_size = 4;
        let mut model = Model::new(&cfg.model, &ds.vocab, seed)?;
        let groups = [ParamGroup::Frozen, ParamGroup::Predictor, ParamGroup::Trajectory, ParamGroup::TextContext];
        let before: Vec<Vec<u8>> = groups.iter().map(|&g| model.store.group_snapshot(g)).collect();
        let set = train_set(&model, &ds)?;
        run_stage(&mut model, &set, Stage::One, &cfg, 0, false, &mut |_| Ok(()))?;
        let traj_after_one = model.store.group_snapshot(ParamGroup::Trajectory);
        run_stage(&mut model, &set, Stage::Two, &cfg, 1, false, &mut |_| Ok(()))?;
        let after: Vec<Vec<u8>> = groups.iter().map(|&g| model.store.group_snapshot(g)).collect();
        let frozen_same = before[0] == after[0];
        let moved: Vec<bool> = (1..4).map(|i| before[i] != after[i]).collect();
        let stage1_traj_same = traj_after_one == before[2];
        let ok = frozen_same && moved.iter().all(|&m| m) && stage1_traj_same;
        Ok((
            ok,
            json!({
                "frozen_identical": frozen_same,
                "predictor_moved": moved[0],
                "trajectory_moved": moved[1],
                "context_moved": moved[2],
                "trajectory_untouched_in_stage1": stage1_traj_same,
            }),
        ))
    })
}

pub fn run_all(cfg: &SelfCheckConfig) -> Vec<CheckLine> {
    let mut out = gradient_checks(cfg.grad_instances, cfg.seed);
    out.push(metric_fixture_check());
    out.push(metric_oracle_check(cfg.metric_instances, cfg.seed));
    out.push(bce_check());
    out.push(freeze_check(cfg.freeze_steps, cfg.seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_ap_hand_case() {
        assert_eq!(oracle::average_precision(&[0.9, 0.8, 0.1], &[1.0, 0.0, 1.0]), Some((1.0 + 2.0 / 3.0) / 2.0));
        assert_eq!(oracle::average_precision(&[0.5, 0.5], &[0.0, 0.0]), None);
    }

    #[test]
    fn metrics_match_oracle_briefly() {
        assert!(metric_oracle_check(40, 3).passed);
    }

    #[test]
    fn fixtures_and_bce_pass() {
        assert!(metric_fixture_check().passed);
        assert!(bce_check().passed);
    }
}
