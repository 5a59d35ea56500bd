//! Synthetic motion-disambiguation scenes.
//!
//! Each clip shows one or two instrument sprites next to coloured target
//! regions. Sprites look the same whatever the verb; the verb only shows in
//! how the sprite moves relative to its target. The starting pose is drawn
//! from one distribution shared by every verb, so frame 0 alone says nothing
//! about the verb.

use std::collections::BTreeSet;

use ndcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::{Triplet, TripletVocabulary};
use crate::trajectory::{BBox, BoxTrack};
use crate::vision::{pad_oldest_frame, VideoClip};

/// Captured frames per clip before the oldest one is duplicated.
pub const RAW_FRAMES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteShape {
    Square,
    Plus,
    Disc,
    Triangle,
}

impl SpriteShape {
    /// Whether pixel `(row, col)` of a `size x size` sprite is painted. Every
    /// shape touches all four edges, so the tight box is always the full square.
    pub fn covers(self, row: usize, col: usize, size: usize) -> bool {
        let s = size as f64;
        let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
        match self {
            SpriteShape::Square => true,
            SpriteShape::Plus => {
                let lo = size / 3;
                let hi = size - size / 3;
                (lo..hi).contains(&row) || (lo..hi).contains(&col)
            }
            SpriteShape::Disc => (x - s / 2.0).powi(2) + (y - s / 2.0).powi(2) <= (s / 2.0).powi(2),
            SpriteShape::Triangle => (x - s / 2.0).abs() <= 0.5 * y + 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub instrument: String,
    pub shape: SpriteShape,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRegion {
    pub target: String,
    pub center: [f64; 2],
    pub color: [f64; 3],
}

/// Sprite displacement over the clip, in the frame of the target: `radial` is
/// the distance from the target centre along the starting direction and
/// `tangent` the offset perpendicular to it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Dwell,
    ApproachHold { distance: f64, steps: usize },
    MoveAway { speed: f64 },
    TangentOscillation { amplitude: f64 },
    RadialJab { depth: f64 },
    TangentSweep { length: f64 },
}

impl Motion {
    /// `(radial distance, tangential offset)` at step `s` from start distance `d0`.
    pub fn offset(&self, s: usize, d0: f64) -> (f64, f64) {
        let sf = s as f64;
        match *self {
            Motion::Dwell => (d0, 0.0),
            Motion::ApproachHold { distance, steps } => {
                let a = (sf / steps as f64).min(1.0);
                (d0 + (distance - d0) * a, 0.0)
            }
            Motion::MoveAway { speed } => (d0 + speed * sf, 0.0),
            Motion::TangentOscillation { amplitude } => {
                let phase = [0.0, 1.0, 0.0, -1.0];
                (d0, amplitude * phase[s % 4])
            }
            Motion::RadialJab { depth } => (d0 - depth * (s % 2) as f64, 0.0),
            Motion::TangentSweep { length } => (d0, length * sf / (RAW_FRAMES - 1) as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionProgram {
    pub verb: String,
    pub motion: Motion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub sprite_px: usize,
    pub target_size: f64,
    pub background: [f64; 3],
    pub targets: Vec<TargetRegion>,
    pub sprites: Vec<Sprite>,
    pub motions: Vec<MotionProgram>,
    /// Range of the starting sprite-to-target distance.
    pub start_distance: [f64; 2],
    pub sigma_px: f64,
    pub sigma_box: f64,
    pub max_attempts: usize,
}

impl SceneSpec {
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("scene spec serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self, vocab: &TripletVocabulary) -> Result<()> {
        let find = |names: &[String], what: &str, list: &mut dyn Iterator<Item = &String>| -> Result<()> {
            let have: BTreeSet<&String> = list.collect();
            for n in names {
                if !have.contains(n) {
                    return Err(Error::Generator(format!("scene has no {what} for `{n}`")));
                }
            }
            Ok(())
        };
        find(&vocab.instruments, "sprite", &mut self.sprites.iter().map(|s| &s.instrument))?;
        find(&vocab.targets, "region", &mut self.targets.iter().map(|t| &t.target))?;
        find(&vocab.verbs, "motion program", &mut self.motions.iter().map(|m| &m.verb))?;
        if self.sprite_px == 0 || self.sprite_px >= self.width.min(self.height) {
            return Err(Error::Generator("sprite size must fit inside the frame".into()));
        }
        if !(self.start_distance[0] > 0.0 && self.start_distance[0] <= self.start_distance[1]) {
            return Err(Error::Generator("start distance range must be positive and ordered".into()));
        }
        Ok(())
    }

    fn sprite(&self, name: &str) -> &Sprite {
        self.sprites.iter().find(|s| s.instrument == name).expect("validated")
    }

    fn region(&self, name: &str) -> &TargetRegion {
        self.targets.iter().find(|t| t.target == name).expect("validated")
    }

    fn motion(&self, verb: &str) -> Motion {
        self.motions.iter().find(|m| m.verb == verb).expect("validated").motion
    }
}

/// Four instruments, six verbs, four targets, 24 classes.
pub fn default_vocabulary() -> TripletVocabulary {
    let instruments = ["grasper", "bipolar", "hook", "scissors"];
    let verbs = ["grasp", "retract", "dissect", "clip", "cut", "null_verb"];
    let targets = ["gallbladder", "cystic_duct", "liver", "omentum"];
    let plan: [(usize, &[usize], &[usize]); 4] = [
        (0, &[0, 1, 5], &[0, 2]),
        (1, &[2, 0, 3], &[1, 3]),
        (2, &[2, 1, 4], &[0, 3]),
        (3, &[4, 3, 5], &[1, 2]),
    ];
    let mut triplets = Vec::new();
    for (i, vs, ts) in plan {
        for &v in vs {
            for &t in ts {
                triplets.push(Triplet { instrument: i, verb: v, target: t });
            }
        }
    }
    TripletVocabulary::with_standard_phrases(&instruments, &verbs, &targets, triplets).expect("default vocabulary")
}

pub fn default_scene() -> SceneSpec {
    let sprite = |n: &str, shape, color| Sprite { instrument: n.into(), shape, color };
    let region = |n: &str, center, color| TargetRegion { target: n.into(), center, color };
    let motion = |v: &str, motion| MotionProgram { verb: v.into(), motion };
    SceneSpec {
        height: 32,
        width: 32,
        sprite_px: 6,
        target_size: 0.2,
        background: [0.12, 0.08, 0.08],
        targets: vec![
            region("gallbladder", [0.3, 0.3], [0.2, 0.6, 0.2]),
            region("cystic_duct", [0.7, 0.3], [0.8, 0.5, 0.25]),
            region("liver", [0.3, 0.7], [0.55, 0.1, 0.1]),
            region("omentum", [0.7, 0.7], [0.9, 0.8, 0.55]),
        ],
        sprites: vec![
            sprite("grasper", SpriteShape::Plus, [0.95, 0.9, 0.2]),
            sprite("bipolar", SpriteShape::Disc, [0.2, 0.85, 0.95]),
            sprite("hook", SpriteShape::Triangle, [0.9, 0.3, 0.9]),
            sprite("scissors", SpriteShape::Square, [0.95, 0.95, 0.95]),
        ],
        motions: vec![
            motion("null_verb", Motion::Dwell),
            motion("grasp", Motion::ApproachHold { distance: 0.06, steps: 3 }),
            motion("retract", Motion::MoveAway { speed: 0.05 }),
            motion("dissect", Motion::TangentOscillation { amplitude: 0.08 }),
            motion("clip", Motion::RadialJab { depth: 0.1 }),
            motion("cut", Motion::TangentSweep { length: 0.2 }),
        ],
        start_distance: [0.18, 0.24],
        sigma_px: 0.03,
        sigma_box: 0.0,
        max_attempts: 200,
    }
}

/// Deterministic per-item seed from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}:{label}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Starting pose of one sprite relative to its target.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Pose {
    theta: f64,
    sign: f64,
    d0: f64,
}

fn sprite_center(target: [f64; 2], pose: Pose, motion: Motion, s: usize) -> (f64, f64) {
    let (r, w) = motion.offset(s, pose.d0);
    let (c, sn) = (pose.theta.cos(), pose.theta.sin());
    let (tx, ty) = (-sn * pose.sign, c * pose.sign);
    (target[0] + r * c + w * tx, target[1] + r * sn + w * ty)
}

/// Top-left pixel of a sprite centred at normalized `(x, y)`.
fn sprite_origin(spec: &SceneSpec, center: (f64, f64)) -> (i64, i64) {
    let half = spec.sprite_px as f64 / 2.0;
    (
        (center.0 * spec.width as f64 - half).round() as i64,
        (center.1 * spec.height as f64 - half).round() as i64,
    )
}

fn in_frame(spec: &SceneSpec, origin: (i64, i64)) -> bool {
    let s = spec.sprite_px as i64;
    origin.0 >= 0 && origin.1 >= 0 && origin.0 + s <= spec.width as i64 && origin.1 + s <= spec.height as i64
}

/// Samples a pose for which every motion program in the scene stays inside
/// the frame. The acceptance test ignores the verb, which keeps the frame-0
/// pose distribution identical across verbs.
fn sample_pose(spec: &SceneSpec, target: [f64; 2], rng: &mut ChaCha8Rng) -> Result<Pose> {
    for _ in 0..spec.max_attempts * 10 {
        let pose = Pose {
            theta: rng.random_range(0.0..std::f64::consts::TAU),
            sign: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            d0: rng.random_range(spec.start_distance[0]..=spec.start_distance[1]),
        };
        let ok = spec.motions.iter().all(|m| {
            (0..RAW_FRAMES).all(|s| in_frame(spec, sprite_origin(spec, sprite_center(target, pose, m.motion, s))))
        });
        if ok {
            return Ok(pose);
        }
    }
    Err(Error::Generator("no in-frame starting pose found".into()))
}

/// Rendered clip with its exact oracle boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedClip {
    pub clip: VideoClip,
    pub tracks: Vec<BoxTrack>,
}

/// Renders one clip showing each triplet's instrument performing its verb on
/// its target. Sprites of different instruments never overlap.
pub fn gen_clip(
    seed: u64,
    spec: &SceneSpec,
    vocab: &TripletVocabulary,
    clip_id: &str,
    classes: &[usize],
) -> Result<GeneratedClip> {
    if classes.is_empty() || classes.len() > 2 {
        return Err(Error::Generator(format!("clips hold 1 or 2 triplets, got {}", classes.len())));
    }
    let triplets: Vec<Triplet> = classes
        .iter()
        .map(|&c| {
            vocab
                .valid_triplets
                .get(c)
                .copied()
                .ok_or(Error::Range { what: "triplet class", index: c, limit: vocab.n_classes() })
        })
        .collect::<Result<_>>()?;
    let instruments: BTreeSet<usize> = triplets.iter().map(|t| t.instrument).collect();
    if instruments.len() != triplets.len() {
        return Err(Error::Generator("each instrument appears at most once per clip".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.sprite_px as i64;

    // Origins per triplet per raw frame.
    let mut origins: Vec<Vec<(i64, i64)>> = Vec::new();
    let mut placed = false;
    for _ in 0..spec.max_attempts {
        origins.clear();
        for t in &triplets {
            let target = spec.region(&vocab.targets[t.target]).center;
            let pose = sample_pose(spec, target, &mut rng)?;
            let motion = spec.motion(&vocab.verbs[t.verb]);
            origins.push(
                (0..RAW_FRAMES).map(|f| sprite_origin(spec, sprite_center(target, pose, motion, f))).collect(),
            );
        }
        let clear = origins.len() < 2
            || (0..RAW_FRAMES).all(|f| {
                let (a, b) = (origins[0][f], origins[1][f]);
                // One pixel of clearance between sprites.
                a.0 + s + 1 <= b.0 || b.0 + s + 1 <= a.0 || a.1 + s + 1 <= b.1 || b.1 + s + 1 <= a.1
            });
        if clear {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(Error::Generator(format!("could not place instruments apart in `{clip_id}`")));
    }

    let (h, w) = (spec.height, spec.width);
    let mut frame = vec![0.0; h * w * 3];
    for px in frame.chunks_mut(3) {
        px.copy_from_slice(&spec.background);
    }
    let mut drawn = BTreeSet::new();
    for t in &triplets {
        if !drawn.insert(t.target) {
            continue;
        }
        let region = spec.region(&vocab.targets[t.target]);
        let half = spec.target_size / 2.0;
        let x0 = ((region.center[0] - half) * w as f64).round().max(0.0) as usize;
        let x1 = (((region.center[0] + half) * w as f64).round() as usize).min(w);
        let y0 = ((region.center[1] - half) * h as f64).round().max(0.0) as usize;
        let y1 = (((region.center[1] + half) * h as f64).round() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                frame[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&region.color);
            }
        }
    }

    let noise = Normal::new(0.0, spec.sigma_px.max(0.0)).map_err(|e| Error::Generator(e.to_string()))?;
    let mut raw = Vec::with_capacity(RAW_FRAMES * h * w * 3);
    for f in 0..RAW_FRAMES {
        let mut img = frame.clone();
        for (k, t) in triplets.iter().enumerate() {
            let sprite = spec.sprite(&vocab.instruments[t.instrument]);
            let (ox, oy) = origins[k][f];
            for r in 0..spec.sprite_px {
                for c in 0..spec.sprite_px {
                    if sprite.shape.covers(r, c, spec.sprite_px) {
                        let (y, x) = (oy as usize + r, ox as usize + c);
                        img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&sprite.color);
                    }
                }
            }
        }
        if spec.sigma_px > 0.0 {
            for v in img.iter_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        raw.extend(img);
    }
    let frames = pad_oldest_frame(&Tensor::new([RAW_FRAMES, h, w, 3], raw)?)?;

    let tracks = triplets
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut per_frame = Vec::with_capacity(RAW_FRAMES + 1);
            per_frame.push(origins[k][0]);
            per_frame.extend(origins[k].iter().copied());
            let boxes = per_frame
                .into_iter()
                .enumerate()
                .map(|(f, (ox, oy))| {
                    let b = BBox::new(
                        ox as f64 / w as f64,
                        oy as f64 / h as f64,
                        (ox + s) as f64 / w as f64,
                        (oy + s) as f64 / h as f64,
                    )?;
                    Ok((f, b))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BoxTrack { instrument_id: t.instrument, boxes })
        })
        .collect::<Result<Vec<_>>>()?;

    let clip = VideoClip::new(clip_id, frames, classes.iter().copied().collect())?;
    Ok(GeneratedClip { clip, tracks })
}

/// Ground-truth boxes with seeded Gaussian corner jitter, clipped to the
/// frame and re-ordered so every box stays valid.
pub fn oracle_detect(tracks: &[BoxTrack], sigma_box: f64, seed: u64) -> Result<Vec<BoxTrack>> {
    if sigma_box <= 0.0 {
        return Ok(tracks.to_vec());
    }
    let noise = Normal::new(0.0, sigma_box).map_err(|e| Error::Generator(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tracks
        .iter()
        .map(|tr| {
            let boxes = tr
                .boxes
                .iter()
                .map(|(t, b)| {
                    let mut c = b.coords();
                    for v in c.iter_mut() {
                        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    }
                    let (mut x1, mut x2) = (c[0].min(c[2]), c[0].max(c[2]));
                    let (mut y1, mut y2) = (c[1].min(c[3]), c[1].max(c[3]));
                    widen(&mut x1, &mut x2);
                    widen(&mut y1, &mut y2);
                    Ok((*t, BBox::new(x1, y1, x2, y2)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BoxTrack { instrument_id: tr.instrument_id, boxes })
        })
        .collect()
}

/// Keeps a collapsed interval non-empty.
fn widen(lo: &mut f64, hi: &mut f64) {
    const MIN: f64 = 1e-6;
    if *hi - *lo < MIN {
        if *hi + MIN <= 1.0 {
            *hi = *lo + MIN;
        } else {
            *lo = *hi - MIN;
        }
    }
}
