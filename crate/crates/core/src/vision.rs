//! Frozen tubelet visual encoder.
//!
//! A clip of `T` frames is cut into `2 x p x p` pixel tubelets; each tubelet is
//! flattened, projected by a fixed seeded matrix and layer-normalized. The
//! projection never trains.

use std::collections::BTreeSet;
use std::path::Path;

use ndcore::{Tape, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{normal, Binder, LayerNormParams, ParamGroup, ParamId, ParamStore, Registrar};

/// Frames per temporal unit (tubelet depth).
pub const TEMPORAL_STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    /// `[T, H, W, Ch]`, values in `[0, 1]`.
    pub frames: Tensor,
    pub gt_triplets: BTreeSet<usize>,
    pub fps_tag: Option<String>,
}

impl VideoClip {
    pub fn new(clip_id: impl Into<String>, frames: Tensor, gt_triplets: BTreeSet<usize>) -> Result<Self> {
        if frames.ndim() != 4 {
            return Err(Error::Dataset(format!("clip frames must be [T,H,W,Ch], got {:?}", frames.shape())));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dataset(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { clip_id: clip_id.into(), frames, gt_triplets, fps_tag: None })
    }

    pub fn frames_len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        let s = self.frames.shape();
        self.frames.data()[((t * s[1] + y) * s[2] + x) * s[3] + c]
    }

    /// One frame as `[H, W, Ch]` data.
    pub fn frame(&self, t: usize) -> &[f64] {
        let s = self.frames.shape();
        let n = s[1] * s[2] * s[3];
        &self.frames.data()[t * n..(t + 1) * n]
    }
}

/// Prepends a copy of the oldest frame, turning an odd-length clip (a frame
/// plus its six predecessors) into an even one.
pub fn pad_oldest_frame(frames: &Tensor) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::Dataset(format!("cannot pad frames of shape {s:?}")));
    }
    let n = s[1] * s[2] * s[3];
    let mut data = frames.data()[..n].to_vec();
    data.extend_from_slice(frames.data());
    Ok(Tensor::new([s[0] + 1, s[1], s[2], s[3]], data)?)
}

pub fn frame_to_unit(t: usize, frames: usize) -> Result<usize> {
    if t >= frames {
        return Err(Error::Range { what: "frame", index: t, limit: frames });
    }
    Ok(t / TEMPORAL_STRIDE)
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Token layout of an encoded clip. Token index = `(u * rows + r) * cols + c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub units: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridGeometry {
    pub fn new(frames: usize, height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if frames == 0 || frames % TEMPORAL_STRIDE != 0 {
            return Err(Error::Divisibility(format!("frame count {frames}"), TEMPORAL_STRIDE));
        }
        if height % patch != 0 {
            return Err(Error::Divisibility(format!("height {height}"), patch));
        }
        if width % patch != 0 {
            return Err(Error::Divisibility(format!("width {width}"), patch));
        }
        Ok(Self {
            frames,
            height,
            width,
            patch,
            units: frames / TEMPORAL_STRIDE,
            rows: height / patch,
            cols: width / patch,
        })
    }

    pub fn tokens_per_unit(&self) -> usize {
        self.rows * self.cols
    }

    pub fn n_tokens(&self) -> usize {
        self.units * self.rows * self.cols
    }

    pub fn index(&self, unit: usize, row: usize, col: usize) -> usize {
        (unit * self.rows + row) * self.cols + col
    }

    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let per = self.tokens_per_unit();
        (index / per, (index % per) / self.cols, index % self.cols)
    }

    pub fn footprint(&self, index: usize) -> PixelRect {
        let (_, r, c) = self.coords(index);
        PixelRect {
            x0: c * self.patch,
            y0: r * self.patch,
            x1: (c + 1) * self.patch,
            y1: (r + 1) * self.patch,
        }
    }

    /// Footprint center in normalized `[0, 1]` image coordinates `(x, y)`.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        ((col as f64 + 0.5) / self.cols as f64, (row as f64 + 0.5) / self.rows as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    /// `[N_v, D_v]`.
    pub tokens: Tensor,
    pub geometry: GridGeometry,
}

/// Stand-in video encoder: fixed random tubelet projection plus layer norm.
#[derive(Clone, Debug)]
pub struct TubeletEncoder {
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    pub proj: ParamId,
    pub norm: LayerNormParams,
}

impl TubeletEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, patch: usize, channels: usize, dim: usize) -> Self {
        let input = TEMPORAL_STRIDE * patch * patch * channels;
        let mut reg = Registrar { store, group: ParamGroup::Frozen, locked: true };
        let proj = reg.add("vision.proj".into(), normal(rng, &[input, dim], 1.0 / (input as f64).sqrt()));
        let norm = LayerNormParams::new(&mut reg, "vision.ln", dim);
        Self { patch, channels, dim, proj, norm }
    }

    pub fn input_dim(&self) -> usize {
        TEMPORAL_STRIDE * self.patch * self.patch * self.channels
    }

    /// Flattened tubelets `[N_v, 2*p*p*Ch]` in token order; each row is
    /// (frame, y, x, channel) major-to-minor.
    pub fn tubelets(&self, clip: &VideoClip) -> Result<(Tensor, GridGeometry)> {
        if clip.channels() != self.channels {
            return Err(Error::Dataset(format!(
                "clip has {} channels, encoder expects {}",
                clip.channels(),
                self.channels
            )));
        }
        let geo = GridGeometry::new(clip.frames_len(), clip.height(), clip.width(), self.patch)?;
        let p = self.patch;
        let mut data = Vec::with_capacity(geo.n_tokens() * self.input_dim());
        for idx in 0..geo.n_tokens() {
            let (u, _, _) = geo.coords(idx);
            let rect = geo.footprint(idx);
            for f in 0..TEMPORAL_STRIDE {
                let t = u * TEMPORAL_STRIDE + f;
                for y in rect.y0..rect.y0 + p {
                    for x in rect.x0..rect.x0 + p {
                        for c in 0..self.channels {
                            data.push(clip.pixel(t, y, x, c));
                        }
                    }
                }
            }
        }
        Ok((Tensor::new([geo.n_tokens(), self.input_dim()], data)?, geo))
    }

    pub fn encode(&self, store: &ParamStore, clip: &VideoClip) -> Result<TokenGrid> {
        for id in [self.proj, self.norm.gain, self.norm.bias] {
            let p = store.get(id);
            if p.group != ParamGroup::Frozen {
                return Err(Error::FrozenViolation(p.name.clone()));
            }
        }
        let (blocks, geometry) = self.tubelets(clip)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, false);
        let x = tape.constant(blocks);
        let w = binder.bind(&mut tape, self.proj);
        let y = tape.matmul(x, w)?;
        let ln = self.norm.bind(&mut binder, &mut tape);
        let z = ndcore::nn::layer_norm(&mut tape, y, &ln)?;
        Ok(TokenGrid { tokens: tape.value(z).clone(), geometry })
    }
}

pub fn write_clip_file(path: &Path, clip: &VideoClip) -> Result<()> {
    std::fs::write(path, clip.frames.to_f32_le_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_clip_frames(path: &Path, shape: [usize; 4]) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Dataset(format!(
            "{}: {} bytes, expected {expected} for shape {shape:?}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(Tensor::from_f32_le_bytes(shape.to_vec(), &bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> (ParamStore, TubeletEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = TubeletEncoder::new(&mut store, &mut rng, 8, 3, 64);
        (store, enc)
    }

    fn clip_from(frames: Tensor) -> VideoClip {
        VideoClip::new("c", frames, BTreeSet::new()).unwrap()
    }

    #[test]
    fn zero_clip_gives_identical_tokens() {
        let (store, enc) = encoder();
        let grid = enc.encode(&store, &clip_from(Tensor::zeros([8, 32, 32, 3]))).unwrap();
        assert_eq!(grid.tokens.shape(), &[64, 64]);
        let first = grid.tokens.row(0).to_vec();
        for i in 0..64 {
            assert_eq!(grid.tokens.row(i), first.as_slice());
        }
    }

    #[test]
    fn token_count_and_bijection() {
        let geo = GridGeometry::new(8, 32, 32, 8).unwrap();
        assert_eq!(geo.n_tokens(), 64);
        let mut seen = std::collections::HashSet::new();
        for i in 0..geo.n_tokens() {
            let (u, r, c) = geo.coords(i);
            assert_eq!(geo.index(u, r, c), i);
            assert!(seen.insert((u, r, c)));
        }
        // Footprints of one unit tile the frame exactly.
        let mut cover = vec![0u8; 32 * 32];
        for i in 0..geo.tokens_per_unit() {
            let f = geo.footprint(i);
            for y in f.y0..f.y1 {
                for x in f.x0..f.x1 {
                    cover[y * 32 + x] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&c| c == 1));
    }

    #[test]
    fn divisibility_errors() {
        assert!(GridGeometry::new(7, 32, 32, 8).is_err());
        assert!(GridGeometry::new(8, 30, 32, 8).is_err());
        assert!(GridGeometry::new(8, 32, 36, 8).is_err());
    }

    #[test]
    fn frame_to_unit_values() {
        assert_eq!(frame_to_unit(0, 8).unwrap(), 0);
        assert_eq!(frame_to_unit(1, 8).unwrap(), 0);
        assert_eq!(frame_to_unit(7, 8).unwrap(), 3);
        assert!(frame_to_unit(8, 8).is_err());
    }

    #[test]
    fn pad_duplicates_oldest_frame() {
        let frames = Tensor::from_fn([7, 2, 2, 3], |i| (i / 12) as f64 / 10.0);
        let padded = pad_oldest_frame(&frames).unwrap();
        assert_eq!(padded.shape(), &[8, 2, 2, 3]);
        let c = clip_from(padded);
        assert_eq!(c.frame(0), c.frame(1));
        assert_eq!(c.frame(7), clip_from(frames).frame(6));
    }

    #[test]
    fn locality_one_tubelet_changes_one_token() {
        let (store, enc) = encoder();
        let base = Tensor::from_fn([8, 32, 32, 3], |i| ((i * 7919) % 97) as f64 / 97.0);
        let a = enc.encode(&store, &clip_from(base.clone())).unwrap();
        let mut changed = base.clone();
        // Pixel (frame 5, y 17, x 9) lies in unit 2, row 2, col 1.
        let s = [8, 32, 32, 3];
        changed.data_mut()[((5 * s[1] + 17) * s[2] + 9) * s[3]] = 1.0;
        let b = enc.encode(&store, &clip_from(changed)).unwrap();
        let geo = a.geometry;
        for i in 0..geo.n_tokens() {
            let same = a.tokens.row(i) == b.tokens.row(i);
            assert_eq!(same, i != geo.index(2, 2, 1), "token {i}");
        }
    }

    #[test]
    fn frozen_violation_detected() {
        let (mut store, enc) = encoder();
        assert!(matches!(store.set_group(enc.proj, ParamGroup::Predictor), Err(Error::FrozenViolation(_))));
        let clip = clip_from(Tensor::zeros([2, 8, 8, 3]));
        assert!(enc.encode(&store, &clip).is_ok());
    }
}
