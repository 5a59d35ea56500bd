//! Token-to-text similarity heatmaps.
//!
//! Each visual output token of the predictor is projected into text space
//! and compared with one class embedding. Per temporal unit the similarities
//! form a `rows x cols` grid, which is upsampled to the frame size and drawn
//! over the second frame of the unit.

use std::path::{Path, PathBuf};

use ndcore::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{rank_desc, save_matrix};
use crate::model::Model;
use crate::params::Binder;
use crate::text::PromptMode;
use crate::train::similarity_values;
use crate::trajectory::{select_tracks, BoxTrack};
use crate::vision::{VideoClip, TEMPORAL_STRIDE};

/// Corner-aligned bilinear resize of a `[rows, cols]` grid: output corners
/// coincide with input corners.
pub fn upsample_bilinear(grid: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (rows, cols) = grid.dims2()?;
    if rows == 0 || cols == 0 || height == 0 || width == 0 {
        return Err(Error::Config("bilinear resize needs non-empty grids".into()));
    }
    let src = |out: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = out as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 2);
        (lo, lo + 1, pos - lo as f64)
    };
    let g = grid.data();
    Ok(Tensor::from_fn(vec![height, width], |i| {
        let (y, x) = (i / width, i % width);
        let (y0, y1, fy) = src(y, height, rows);
        let (x0, x1, fx) = src(x, width, cols);
        let at = |r: usize, c: usize| g[r * cols + c];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Frame an overlay is drawn on: the second frame of the unit.
pub fn overlay_frame(unit: usize) -> usize {
    TEMPORAL_STRIDE * unit + 1
}

/// Binary PPM (P6): grayscale frame with the red channel raised by the
/// clamped positive similarity.
pub fn overlay_ppm(clip: &VideoClip, frame: usize, heat: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = heat.dims2()?;
    if h != clip.height() || w != clip.width() {
        return Err(Error::Config(format!("heatmap is {h}x{w}, frame is {}x{}", clip.height(), clip.width())));
    }
    let ch = clip.channels();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let gray = (0..ch).map(|c| clip.pixel(frame, y, x, c)).sum::<f64>() / ch as f64;
            let gray = gray.clamp(0.0, 1.0);
            let a = heat.data()[y * w + x].clamp(0.0, 1.0);
            let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            out.extend_from_slice(&[byte(gray + a), byte(gray), byte(gray)]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSimilarity {
    pub instrument_id: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub triplet: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub clip_id: String,
    pub class: usize,
    pub triplet: String,
    pub config_digest: String,
    pub units: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub height: usize,
    pub width: usize,
    /// Frame index each overlay is drawn on.
    pub overlay_frames: Vec<usize>,
    pub trajectory: Vec<TokenSimilarity>,
    pub query: Vec<f64>,
    /// Descending sigmoid scores of the five best classes.
    pub top5: Vec<ClassScore>,
    /// True when the clip had no boxes and ran with visual tokens only.
    pub missing_boxes: bool,
    pub files: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Heatmaps {
    /// Token-resolution grids `[rows, cols]`, one per unit.
    pub token_grids: Vec<Tensor>,
    /// Upsampled grids `[H, W]`.
    pub grids: Vec<Tensor>,
    pub sidecar: HeatmapSidecar,
}

#[derive(Clone, Debug)]
pub struct HeatmapOptions {
    pub mode: PromptMode,
    pub scale: f64,
    pub use_trajectory: bool,
    pub config_digest: String,
}

pub fn heatmap(
    model: &Model,
    clip: &VideoClip,
    tracks: &[BoxTrack],
    class: usize,
    opts: &HeatmapOptions,
) -> Result<Heatmaps> {
    let vocab = &model.vocab;
    if class >= vocab.n_classes() {
        return Err(Error::Range { what: "class", index: class, limit: vocab.n_classes() });
    }
    let grid = model.encode_clip(clip)?;
    let geo = grid.geometry;
    let missing_boxes = tracks.is_empty() || model.config.k_max == 0;
    let kept = select_tracks(tracks, model.config.k_max);
    let use_tracks = (opts.use_trajectory && !missing_boxes).then_some(&kept[..]);

    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.store, false);
    let f = model.forward(&mut tape, &mut binder, &grid, use_tracks)?;
    let per_token = model.predictor.embed_all(&mut tape, &mut binder, f.outputs)?;
    let tokens = tape.value(per_token).clone();
    let h = tape.value(f.h).clone();

    let e = model.class_embeddings(opts.mode)?;
    let e_row = Tensor::new(vec![1, e.dims2()?.1], e.row(class).to_vec())?;
    // Rounding can push a cosine a hair past one.
    let sims: Vec<f64> = similarity_values(&tokens, &e_row, 1.0)?.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();

    let n_v = f.n_visual;
    let k = f.trajectory.len();
    let per_unit = geo.tokens_per_unit();
    let mut token_grids = Vec::with_capacity(geo.units);
    let mut grids = Vec::with_capacity(geo.units);
    for u in 0..geo.units {
        let vals = sims[u * per_unit..(u + 1) * per_unit].to_vec();
        let g = Tensor::new(vec![geo.rows, geo.cols], vals)?;
        grids.push(upsample_bilinear(&g, geo.height, geo.width)?);
        token_grids.push(g);
    }
    let trajectory = f
        .trajectory
        .iter()
        .enumerate()
        .map(|(j, t)| TokenSimilarity { instrument_id: t.instrument_id, similarity: sims[n_v + j] })
        .collect();
    let query = sims[n_v + k..].to_vec();

    let h_row = Tensor::new(vec![1, h.numel()], h.data().to_vec())?;
    let scores: Vec<f64> =
        similarity_values(&h_row, &e, opts.scale)?.data().iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
    let top5 = rank_desc(&scores)
        .into_iter()
        .take(5)
        .map(|c| ClassScore { class: c, triplet: vocab.triplet_name(c), score: scores[c] })
        .collect();

    let sidecar = HeatmapSidecar {
        clip_id: clip.clip_id.clone(),
        class,
        triplet: vocab.triplet_name(class),
        config_digest: opts.config_digest.clone(),
        units: geo.units,
        grid_rows: geo.rows,
        grid_cols: geo.cols,
        height: geo.height,
        width: geo.width,
        overlay_frames: (0..geo.units).map(overlay_frame).collect(),
        trajectory,
        query,
        top5,
        missing_boxes,
        files: Vec::new(),
    };
    Ok(Heatmaps { token_grids, grids, sidecar })
}

/// Writes `unit{u}.f32` grids (with shape sidecars), `unit{u}.ppm`
/// overlays and `heatmap.json`. Returns the written paths.
pub fn write_heatmaps(dir: &Path, clip: &VideoClip, maps: &mut Heatmaps) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    maps.sidecar.files.clear();
    for (u, g) in maps.grids.iter().enumerate() {
        let grid_path = dir.join(format!("unit{u}.f32"));
        save_matrix(&grid_path, g)?;
        let ppm_path = dir.join(format!("unit{u}.ppm"));
        let ppm = overlay_ppm(clip, overlay_frame(u), g)?;
        std::fs::write(&ppm_path, ppm).map_err(|e| Error::io(&ppm_path, e))?;
        for p in [grid_path, ppm_path] {
            maps.sidecar.files.push(p.file_name().expect("file").to_string_lossy().into_owned());
            written.push(p);
        }
    }
    let side = dir.join("heatmap.json");
    crate::dataset::write_json(&side, &maps.sidecar)?;
    written.push(side);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_aligned_fixture() {
        let g = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&g, 4, 4).unwrap();
        for r in 0..4 {
            for (c, want) in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].into_iter().enumerate() {
                assert!((up.data()[r * 4 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_stays_constant() {
        let g = Tensor::full(vec![3, 5], 0.25);
        let up = upsample_bilinear(&g, 7, 11).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let one = Tensor::full(vec![1, 1], -0.5);
        assert!(upsample_bilinear(&one, 4, 4).unwrap().data().iter().all(|&v| v == -0.5));
    }

    #[test]
    fn identity_when_sizes_match() {
        let g = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
        assert_eq!(upsample_bilinear(&g, 2, 3).unwrap(), g);
    }

    #[test]
    fn overlays_sit_on_second_frames() {
        assert_eq!((0..4).map(overlay_frame).collect::<Vec<_>>(), vec![1, 3, 5, 7]);
    }
}
