use ndcore::Tensor;
use proptest::prelude::*;
use trajpred::config::RunConfig;
use trajpred::heatmap::{heatmap, upsample_bilinear, write_heatmaps, HeatmapOptions};
use trajpred::metrics::load_matrix;
use trajpred::model::Model;
use trajpred::synth::{default_scene, default_vocabulary, gen_clip};
use trajpred::text::PromptMode;

fn setup() -> (Model, trajpred::synth::GeneratedClip, HeatmapOptions) {
    let vocab = default_vocabulary();
    let cfg = RunConfig::default();
    let model = Model::new(&cfg.model, &vocab, 9).unwrap();
    let g = gen_clip(4, &default_scene(), &vocab, "clip_h", &[3]).unwrap();
    let opts = HeatmapOptions { mode: PromptMode::Rephrased, scale: cfg.train.scale, use_trajectory: true, config_digest: cfg.digest() };
    (model, g, opts)
}

#[test]
fn writes_grids_overlays_and_sidecar() {
    let (model, g, opts) = setup();
    let mut maps = heatmap(&model, &g.clip, &g.tracks, 3, &opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_heatmaps(dir.path(), &g.clip, &mut maps).unwrap();
    for u in 0..4 {
        for ext in ["f32", "ppm"] {
            assert!(dir.path().join(format!("unit{u}.{ext}")).exists());
        }
        let back = load_matrix(&dir.path().join(format!("unit{u}.f32"))).unwrap();
        assert_eq!(back.to_f32_le_bytes(), maps.grids[u].to_f32_le_bytes());
    }
    assert!(files.iter().any(|f| f.ends_with("heatmap.json")));
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("heatmap.json")).unwrap()).unwrap();
    assert_eq!(side["clip_id"], "clip_h");
    assert_eq!(side["missing_boxes"], false);
    assert_eq!(side["trajectory"].as_array().unwrap().len(), g.tracks.len());
}

#[test]
fn top5_is_sorted_and_scored_in_unit_range() {
    let (model, g, opts) = setup();
    let maps = heatmap(&model, &g.clip, &g.tracks, 3, &opts).unwrap();
    let top = &maps.sidecar.top5;
    assert_eq!(top.len(), 5);
    assert!(top.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(top.iter().all(|c| (0.0..=1.0).contains(&c.score)));
}

#[test]
fn missing_boxes_are_flagged() {
    let (model, g, opts) = setup();
    let maps = heatmap(&model, &g.clip, &[], 3, &opts).unwrap();
    assert!(maps.sidecar.missing_boxes);
    assert!(maps.sidecar.trajectory.is_empty());
    assert_eq!(maps.grids.len(), 4);
}

#[test]
fn unknown_class_is_rejected() {
    let (model, g, opts) = setup();
    assert!(heatmap(&model, &g.clip, &g.tracks, 999, &opts).is_err());
}

proptest! {
    #[test]
    fn upsampling_stays_within_extrema(r in 1usize..5, c in 1usize..5, v in prop::collection::vec(-1.0f64..1.0, 16),
                                       h in 1usize..20, w in 1usize..20) {
        let grid = Tensor::new(vec![r, c], v[..r * c].to_vec()).unwrap();
        let up = upsample_bilinear(&grid, h, w).unwrap();
        let lo = grid.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = grid.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(up.shape(), &[h, w][..]);
        prop_assert!(up.data().iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
    }
}
