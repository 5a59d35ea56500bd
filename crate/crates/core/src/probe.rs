//! Single-frame verb probe.
//!
//! For every pair of motion-defined verbs that share an (instrument, target)
//! context, single-instrument clips of both verbs are rendered and an
//! L2-regularised logistic regression is fit on the pixels of one frame.
//! On frame 0 the probe should sit near chance; on a late frame it should
//! not, which shows the probe itself is capable.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{derive_seed, gen_clip, SceneSpec};
use crate::text::TripletVocabulary;
use crate::vision::VideoClip;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub seed: u64,
    /// Clips per verb per pair, split evenly between fitting and testing.
    pub clips_per_verb: usize,
    /// Average-pool factor applied to frames before fitting.
    pub pool: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { seed: 7, clips_per_verb: 160, pool: 2, iterations: 300, learning_rate: 0.5, l2: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub verbs: [String; 2],
    pub contexts: usize,
    pub correct: usize,
    pub tested: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub frame: usize,
    pub pairs: Vec<PairResult>,
    /// Pooled held-out accuracy in percent.
    pub accuracy: f64,
    pub chance: f64,
}

/// Verb pairs with the classes that realise them in shared contexts.
fn verb_pairs(vocab: &TripletVocabulary) -> Vec<(usize, usize, Vec<(usize, usize)>)> {
    let null = vocab.verbs.iter().position(|v| v == "null_verb");
    let motion: Vec<usize> = (0..vocab.verbs.len()).filter(|&v| Some(v) != null).collect();
    let mut out = Vec::new();
    for (i, &a) in motion.iter().enumerate() {
        for &b in &motion[i + 1..] {
            let mut ctx = Vec::new();
            for (ca, ta) in vocab.valid_triplets.iter().enumerate() {
                if ta.verb != a {
                    continue;
                }
                if let Some(cb) = vocab
                    .valid_triplets
                    .iter()
                    .position(|tb| tb.verb == b && tb.instrument == ta.instrument && tb.target == ta.target)
                {
                    ctx.push((ca, cb));
                }
            }
            if !ctx.is_empty() {
                out.push((a, b, ctx));
            }
        }
    }
    out
}

/// Average-pooled pixels of one frame.
pub fn frame_features(clip: &VideoClip, frame: usize, pool: usize) -> Vec<f64> {
    let (h, w, ch) = (clip.height(), clip.width(), clip.channels());
    let (ph, pw) = (h / pool, w / pool);
    let mut out = Vec::with_capacity(ph * pw * ch);
    for r in 0..ph {
        for c in 0..pw {
            for k in 0..ch {
                let mut s = 0.0;
                for dy in 0..pool {
                    for dx in 0..pool {
                        s += clip.pixel(frame, r * pool + dy, c * pool + dx, k);
                    }
                }
                out.push(s / (pool * pool) as f64);
            }
        }
    }
    out
}

/// Full-batch gradient descent on the mean logistic loss plus `l2 |w|^2 / 2`.
/// Features are standardised with the fitting set's statistics.
pub struct Logistic {
    mean: Vec<f64>,
    std: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl Logistic {
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &ProbeConfig) -> Self {
        let n = x.len() as f64;
        let d = x[0].len();
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..d)
            .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8))
            .collect();
        let z: Vec<Vec<f64>> = x.iter().map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect()).collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..cfg.iterations {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (zi, &yi) in z.iter().zip(y) {
                let s = zi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
                let err = 1.0 / (1.0 + (-s).exp()) - yi;
                gb += err;
                for (g, a) in gw.iter_mut().zip(zi) {
                    *g += err * a;
                }
            }
            for (wj, g) in w.iter_mut().zip(&gw) {
                *wj -= cfg.learning_rate * (g / n + cfg.l2 * *wj);
            }
            b -= cfg.learning_rate * gb / n;
        }
        Self { mean, std, w, b }
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        let s: f64 = x.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j] * self.w[j]).sum::<f64>() + self.b;
        s > 0.0
    }
}

/// Fits and tests one probe per verb pair on `frame`.
pub fn run_probe(spec: &SceneSpec, vocab: &TripletVocabulary, frame: usize, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if cfg.clips_per_verb < 2 || cfg.pool == 0 {
        return Err(Error::Config("probe needs at least 2 clips per verb and a positive pool".into()));
    }
    let pairs = verb_pairs(vocab);
    if pairs.is_empty() {
        return Err(Error::Vocabulary("no motion-verb pair shares a context".into()));
    }
    let mut results = Vec::new();
    for (a, b, ctx) in pairs {
        let label = format!("probe:{}:{}", vocab.verbs[a], vocab.verbs[b]);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &label));
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(2 * cfg.clips_per_verb);
        for i in 0..cfg.clips_per_verb {
            let (ca, cb) = ctx[i % ctx.len()];
            for (class, y) in [(ca, 1.0), (cb, 0.0)] {
                let id = format!("{label}:{i}:{class}");
                let g = gen_clip(derive_seed(cfg.seed, &id), spec, vocab, &id, &[class])?;
                if frame >= g.clip.frames_len() {
                    return Err(Error::Range { what: "frame", index: frame, limit: g.clip.frames_len() });
                }
                rows.push((frame_features(&g.clip, frame, cfg.pool), y));
            }
        }
        rows.shuffle(&mut rng);
        let half = rows.len() / 2;
        let (fit, test) = rows.split_at(half);
        let x: Vec<Vec<f64>> = fit.iter().map(|r| r.0.clone()).collect();
        let y: Vec<f64> = fit.iter().map(|r| r.1).collect();
        let model = Logistic::fit(&x, &y, cfg);
        let correct = test.iter().filter(|(xi, yi)| model.predict(xi) == (*yi == 1.0)).count();
        results.push(PairResult {
            verbs: [vocab.verbs[a].clone(), vocab.verbs[b].clone()],
            contexts: ctx.len(),
            correct,
            tested: test.len(),
        });
    }
    let correct: usize = results.iter().map(|r| r.correct).sum();
    let tested: usize = results.iter().map(|r| r.tested).sum();
    Ok(ProbeReport { frame, pairs: results, accuracy: 100.0 * correct as f64 / tested as f64, chance: 50.0 })
}
