//! Trajectory tokens: one token per tracked instrument, fusing an appearance
//! stream (visual tokens under the box) with a position stream (sinusoidal
//! box embeddings), each compressed by its own cross-attention pool.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndcore::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal, Binder, CrossBlockParams, ParamGroup, ParamId, ParamStore, Registrar};
use crate::vision::{frame_to_unit, GridGeometry, TokenGrid};

/// At most this many trajectory tokens are appended to a clip.
pub const K_MAX: usize = 4;
pub const POOL_LAYERS: usize = 2;
pub const POOL_HEADS: usize = 8;

/// Box corners normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.x1)
            && (0.0..=1.0).contains(&self.y1)
            && self.x2 <= 1.0
            && self.y2 <= 1.0
            && self.x1 < self.x2
            && self.y1 < self.y2;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidTrack(format!("box {self:?} is not ordered inside [0,1]")))
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Boxes of one instrument over a clip, frame indices strictly increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxTrack {
    pub instrument_id: usize,
    pub boxes: Vec<(usize, BBox)>,
}

impl BoxTrack {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.boxes.is_empty() || self.boxes.len() > frames {
            return Err(Error::InvalidTrack(format!(
                "instrument {} has {} boxes for {frames} frames",
                self.instrument_id,
                self.boxes.len()
            )));
        }
        for w in self.boxes.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::InvalidTrack("frame indices must strictly increase".into()));
            }
        }
        if self.boxes.last().is_some_and(|(t, _)| *t >= frames) {
            return Err(Error::InvalidTrack("frame index beyond clip length".into()));
        }
        self.boxes.iter().try_for_each(|(_, b)| b.validate())
    }

    pub fn summed_area(&self) -> f64 {
        self.boxes.iter().map(|(_, b)| b.area()).sum()
    }
}

/// Keeps the `k_max` tracks with the largest summed box area (ties go to the
/// lower instrument id), preserving their original order.
pub fn select_tracks(tracks: &[BoxTrack], k_max: usize) -> Vec<BoxTrack> {
    if tracks.len() <= k_max {
        return tracks.to_vec();
    }
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    order.sort_by(|&a, &b| {
        tracks[b]
            .summed_area()
            .total_cmp(&tracks[a].summed_area())
            .then(tracks[a].instrument_id.cmp(&tracks[b].instrument_id))
    });
    let mut keep: Vec<usize> = order.into_iter().take(k_max).collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| tracks[i].clone()).collect()
}

/// Token indices pooled for `bbox` at frame `t`: tokens of unit `t / 2` whose
/// footprint centers lie inside the box, or the single nearest-center token
/// when none does.
pub fn box_token_indices(geo: &GridGeometry, bbox: &BBox, t: usize) -> Result<Vec<usize>> {
    let unit = frame_to_unit(t, geo.frames)?;
    let mut inside = Vec::new();
    let (bx, by) = bbox.center();
    let mut nearest = (f64::INFINITY, 0);
    for r in 0..geo.rows {
        for c in 0..geo.cols {
            let (cx, cy) = geo.center(r, c);
            let idx = geo.index(unit, r, c);
            if cx >= bbox.x1 && cx <= bbox.x2 && cy >= bbox.y1 && cy <= bbox.y2 {
                inside.push(idx);
            }
            let d = (cx - bx).powi(2) + (cy - by).powi(2);
            if d < nearest.0 {
                nearest = (d, idx);
            }
        }
    }
    if inside.is_empty() {
        inside.push(nearest.1);
    }
    Ok(inside)
}

pub fn pool_box_features(grid: &TokenGrid, bbox: &BBox, t: usize) -> Result<Tensor> {
    let idx = box_token_indices(&grid.geometry, bbox, t)?;
    let mut tape = Tape::new();
    let z = tape.constant(grid.tokens.clone());
    let m = tape.gather_mean(z, &idx)?;
    Ok(tape.value(m).clone())
}

/// Fixed sinusoidal embedding of the four box coordinates. Coordinate `i`
/// fills slots `[i*D/4, (i+1)*D/4)` with interleaved `sin(w_j x), cos(w_j x)`,
/// `w_j = 10000^(-8j/D)`.
pub fn sincos_embed(coords: [f64; 4], dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 8 != 0 {
        return Err(Error::Divisibility(format!("embedding width {dim}"), 8));
    }
    let per = dim / 4;
    let mut out = vec![0.0; dim];
    for (i, &x) in coords.iter().enumerate() {
        for j in 0..dim / 8 {
            let w = 1.0 / 10000f64.powf(8.0 * j as f64 / dim as f64);
            out[i * per + 2 * j] = (w * x).sin();
            out[i * per + 2 * j + 1] = (w * x).cos();
        }
    }
    Ok(Tensor::vector(out))
}

/// A single learnable query attending over a sequence through pre-norm
/// cross-attention blocks. No positional information is added, so the
/// output is invariant to the order of the sequence.
#[derive(Clone, Debug)]
pub struct CrossAttnPool {
    pub query: ParamId,
    pub layers: Vec<CrossBlockParams>,
    pub heads: usize,
    pub dim: usize,
}

impl CrossAttnPool {
    pub fn new(reg: &mut Registrar, rng: &mut impl Rng, prefix: &str, dim: usize) -> Self {
        let query = reg.add(format!("{prefix}.query"), normal(rng, &[dim], 1.0));
        let layers = (0..POOL_LAYERS)
            .map(|l| CrossBlockParams::new(reg, rng, &format!("{prefix}.layer{l}"), dim))
            .collect();
        Self { query, layers, heads: POOL_HEADS, dim }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, seq: &[Var]) -> Result<Var> {
        Ok(self.forward_with_weights(tape, binder, seq)?.0)
    }

    /// Pooled `[D]` output plus per-layer, per-head attention weights.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        seq: &[Var],
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        if seq.is_empty() {
            return Err(Error::EmptySequence("cross_attn_pool"));
        }
        let kv = tape.concat_rows(seq)?;
        let q = binder.bind(tape, self.query);
        let mut q = tape.reshape(q, &[1, self.dim])?;
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let p = layer.bind(binder, tape);
            let (next, w) = ndcore::nn::cross_attention_block(tape, q, kv, &p, self.heads)?;
            q = next;
            weights.push(w);
        }
        Ok((tape.reshape(q, &[self.dim])?, weights))
    }
}

/// Independent appearance and position pools.
#[derive(Clone, Debug)]
pub struct TrajectoryEncoder {
    pub appearance: CrossAttnPool,
    pub position: CrossAttnPool,
    pub dim: usize,
}

impl TrajectoryEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize) -> Result<Self> {
        if dim % 8 != 0 {
            return Err(Error::Divisibility(format!("trajectory width {dim}"), 8));
        }
        if dim % POOL_HEADS != 0 {
            return Err(Error::Divisibility(format!("trajectory width {dim}"), POOL_HEADS));
        }
        let mut reg = Registrar { store, group: ParamGroup::Trajectory, locked: false };
        let appearance = CrossAttnPool::new(&mut reg, rng, "traj.appearance", dim);
        let position = CrossAttnPool::new(&mut reg, rng, "traj.position", dim);
        Ok(Self { appearance, position, dim })
    }

    /// Builds `tau = a_bar + p_bar` for each track, in track order.
    pub fn build_tokens(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        visual: Var,
        geo: &GridGeometry,
        tracks: &[BoxTrack],
    ) -> Result<Vec<TrajectoryToken>> {
        if tracks.len() > K_MAX {
            return Err(Error::TooManyTracks { count: tracks.len(), limit: K_MAX });
        }
        let mut out = Vec::with_capacity(tracks.len());
        for track in tracks {
            track.validate(geo.frames)?;
            let mut app_seq = Vec::with_capacity(track.boxes.len());
            let mut pos_seq = Vec::with_capacity(track.boxes.len());
            for (t, b) in &track.boxes {
                let idx = box_token_indices(geo, b, *t)?;
                app_seq.push(tape.gather_mean(visual, &idx)?);
                pos_seq.push(tape.constant(sincos_embed(b.coords(), self.dim)?));
            }
            let appearance = self.appearance.forward(tape, binder, &app_seq)?;
            let position = self.position.forward(tape, binder, &pos_seq)?;
            let value = tape.add(appearance, position)?;
            out.push(TrajectoryToken { instrument_id: track.instrument_id, value, appearance, position });
        }
        Ok(out)
    }
}

/// Trajectory token on a tape, with both stream outputs kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryToken {
    pub instrument_id: usize,
    pub value: Var,
    pub appearance: Var,
    pub position: Var,
}

/// `[Z_v ; tau_1 .. tau_K]`; the last `n_trajectory` rows are trajectory tokens.
#[derive(Clone, Copy, Debug)]
pub struct AugmentedTokens {
    pub tokens: Var,
    pub n_visual: usize,
    pub n_trajectory: usize,
}

pub fn augment(tape: &mut Tape, visual: Var, taus: &[TrajectoryToken]) -> Result<AugmentedTokens> {
    if taus.len() > K_MAX {
        return Err(Error::TooManyTracks { count: taus.len(), limit: K_MAX });
    }
    let n_visual = tape.value(visual).dims2()?.0;
    if taus.is_empty() {
        return Ok(AugmentedTokens { tokens: visual, n_visual, n_trajectory: 0 });
    }
    let mut parts = vec![visual];
    parts.extend(taus.iter().map(|t| t.value));
    let tokens = tape.concat_rows(&parts)?;
    Ok(AugmentedTokens { tokens, n_visual, n_trajectory: taus.len() })
}

/// One line of a box-track file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub clip_id: String,
    pub instrument_id: usize,
    pub frame: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

pub fn track_records(clip_id: &str, tracks: &[BoxTrack]) -> Vec<BoxRecord> {
    let mut out = Vec::new();
    for tr in tracks {
        for (t, b) in &tr.boxes {
            out.push(BoxRecord {
                clip_id: clip_id.to_string(),
                instrument_id: tr.instrument_id,
                frame: *t,
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
            });
        }
    }
    out
}

pub fn write_box_file(path: &Path, records: &[BoxRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json("box record", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a box JSONL file and groups it into per-clip tracks ordered by
/// instrument id then frame.
pub fn read_box_file(path: &Path) -> Result<BTreeMap<String, Vec<BoxTrack>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut grouped: BTreeMap<String, BTreeMap<usize, Vec<(usize, BBox)>>> = BTreeMap::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: BoxRecord =
            serde_json::from_str(&line).map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
        let b = BBox::new(r.x1, r.y1, r.x2, r.y2)?;
        grouped.entry(r.clip_id).or_default().entry(r.instrument_id).or_default().push((r.frame, b));
    }
    Ok(grouped
        .into_iter()
        .map(|(clip, by_inst)| {
            let tracks = by_inst
                .into_iter()
                .map(|(instrument_id, mut boxes)| {
                    boxes.sort_by_key(|(t, _)| *t);
                    BoxTrack { instrument_id, boxes }
                })
                .collect();
            (clip, tracks)
        })
        .collect())
}
