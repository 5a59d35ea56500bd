//! Benchmark construction and on-disk layout.
//!
//! ```text
//! <dir>/manifest.json     clip records, generator settings, digest
//! <dir>/vocabulary.json
//! <dir>/scene_spec.json
//! <dir>/boxes.jsonl       one box per line
//! <dir>/clips/<id>.f32    [T, H, W, Ch] little-endian f32
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::{self, derive_seed, gen_clip, oracle_detect, SceneSpec};
use crate::text::{Triplet, TripletVocabulary};
use crate::trajectory::{read_box_file, track_records, write_box_file, BoxTrack};
use crate::vision::{read_clip_frames, write_clip_file, VideoClip};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    UnseenTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::UnseenTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::UnseenTest => "unseen_test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (train|test|unseen_test)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub train: usize,
    pub test: usize,
    pub unseen_test: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        Self { train: 600, test: 200, unseen_test: 100 }
    }
}

impl DatasetSizes {
    fn of(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Test => self.test,
            Split::UnseenTest => self.unseen_test,
        }
    }
}

impl FromStr for DatasetSizes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("sizes `{s}`: {e}")))?;
        match parts[..] {
            [train, test, unseen_test] => Ok(Self { train, test, unseen_test }),
            _ => Err(Error::Config(format!("sizes `{s}` must be three comma-separated counts"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub sizes: DatasetSizes,
    pub held_out_verbs: Vec<String>,
    /// Share of train/test clips that show two instruments.
    pub two_instrument_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            sizes: DatasetSizes::default(),
            held_out_verbs: vec!["cut".into()],
            two_instrument_fraction: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clip: VideoClip,
    pub tracks: Vec<BoxTrack>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub split: Split,
    pub gt_triplets: Vec<usize>,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "Ch")]
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub scene_digest: String,
    pub clips: Vec<ClipRecord>,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: TripletVocabulary,
    pub scene: SceneSpec,
    pub config: DatasetConfig,
    pub samples: Vec<Sample>,
}

/// Two classes may share a clip only when they differ in instrument and
/// target and no recombination of their components is itself a class, so
/// the label set is unambiguous at the component level.
pub fn compatible(vocab: &TripletVocabulary, a: Triplet, b: Triplet) -> bool {
    if a.instrument == b.instrument || a.target == b.target {
        return false;
    }
    let valid: BTreeSet<Triplet> = vocab.valid_triplets.iter().copied().collect();
    for i in [a.instrument, b.instrument] {
        for v in [a.verb, b.verb] {
            for t in [a.target, b.target] {
                let x = Triplet { instrument: i, verb: v, target: t };
                if x != a && x != b && valid.contains(&x) {
                    return false;
                }
            }
        }
    }
    true
}

pub fn build_dataset(config: &DatasetConfig, scene: &SceneSpec, vocab: &TripletVocabulary) -> Result<Dataset> {
    scene.validate(vocab)?;
    let held: BTreeSet<usize> =
        config.held_out_verbs.iter().map(|v| vocab.verb_id(v)).collect::<Result<_>>()?;
    if !(0.0..=1.0).contains(&config.two_instrument_fraction) {
        return Err(Error::Config("two-instrument fraction must lie in [0, 1]".into()));
    }
    let (seen, unseen): (Vec<usize>, Vec<usize>) =
        (0..vocab.n_classes()).partition(|&c| !held.contains(&vocab.valid_triplets[c].verb));
    let mut sizes = config.sizes;
    if held.is_empty() {
        sizes.unseen_test = 0;
    }
    if sizes.train + sizes.test > 0 && seen.is_empty() {
        return Err(Error::Infeasible("every class uses a held-out verb".into()));
    }
    if sizes.unseen_test > 0 && unseen.is_empty() {
        return Err(Error::Infeasible("held-out verbs have no classes".into()));
    }

    let mut samples = Vec::with_capacity(sizes.train + sizes.test + sizes.unseen_test);
    for split in Split::ALL {
        let pool = if split == Split::UnseenTest { &unseen } else { &seen };
        let two = if split == Split::UnseenTest { 0.0 } else { config.two_instrument_fraction };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("plan:{}", split.name())));
        let mut order: Vec<usize> = Vec::new();
        for n in 0..sizes.of(split) {
            if order.is_empty() {
                order = pool.clone();
                order.shuffle(&mut rng);
            }
            let primary = order.pop().expect("refilled");
            let mut classes = vec![primary];
            if rng.random_bool(two) {
                let a = vocab.valid_triplets[primary];
                let partners: Vec<usize> =
                    pool.iter().copied().filter(|&c| compatible(vocab, a, vocab.valid_triplets[c])).collect();
                if !partners.is_empty() {
                    classes.push(partners[rng.random_range(0..partners.len())]);
                }
            }
            classes.sort_unstable();
            let clip_id = format!("{}_{n:04}", split.name());
            let g = gen_clip(derive_seed(config.seed, &clip_id), scene, vocab, &clip_id, &classes)?;
            let tracks = oracle_detect(&g.tracks, scene.sigma_box, derive_seed(config.seed, &format!("jitter:{clip_id}")))?;
            samples.push(Sample { clip: g.clip, tracks, split });
        }
    }
    Ok(Dataset { vocab: vocab.clone(), scene: scene.clone(), config: config.clone(), samples })
}

/// Benchmark with the default vocabulary and scene.
pub fn default_dataset(config: &DatasetConfig) -> Result<Dataset> {
    build_dataset(config, &synth::default_scene(), &synth::default_vocabulary())
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn records(&self) -> Vec<ClipRecord> {
        self.samples
            .iter()
            .map(|s| ClipRecord {
                clip_id: s.clip.clip_id.clone(),
                split: s.split,
                gt_triplets: s.clip.gt_triplets.iter().copied().collect(),
                frames: s.clip.frames_len(),
                height: s.clip.height(),
                width: s.clip.width(),
                channels: s.clip.channels(),
            })
            .collect()
    }

    /// SHA-256 over generator settings, vocabulary, scene, clip records,
    /// box records and the stored (f32) pixel bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(json(&self.config));
        h.update(json(&self.vocab));
        h.update(json(&self.scene));
        h.update(json(&self.records()));
        for s in &self.samples {
            h.update(json(&track_records(&s.clip.clip_id, &s.tracks)));
            h.update(s.clip.frames.to_f32_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            scene_digest: self.scene.digest(),
            clips: self.records(),
            digest: self.digest(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        let clips = dir.join("clips");
        std::fs::create_dir_all(&clips).map_err(|e| Error::io(&clips, e))?;
        let manifest = self.manifest();
        write_json(&dir.join("manifest.json"), &manifest)?;
        self.vocab.save(&dir.join("vocabulary.json"))?;
        write_json(&dir.join("scene_spec.json"), &self.scene)?;
        let mut boxes = Vec::new();
        for s in &self.samples {
            write_clip_file(&clips.join(format!("{}.f32", s.clip.clip_id)), &s.clip)?;
            boxes.extend(track_records(&s.clip.clip_id, &s.tracks));
        }
        write_box_file(&dir.join("boxes.jsonl"), &boxes)?;
        Ok(manifest)
    }

    /// Loads a dataset directory and checks its digest. Externally produced
    /// data in the same layout loads the same way.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Dataset(format!("unsupported format version {}", manifest.format_version)));
        }
        let vocab = TripletVocabulary::load(&dir.join("vocabulary.json"))?;
        let scene: SceneSpec = read_json(&dir.join("scene_spec.json"))?;
        let mut boxes: BTreeMap<String, Vec<BoxTrack>> = read_box_file(&dir.join("boxes.jsonl"))?;
        let mut samples = Vec::with_capacity(manifest.clips.len());
        for r in &manifest.clips {
            if let Some(&c) = r.gt_triplets.iter().find(|&&c| c >= vocab.n_classes()) {
                return Err(Error::VocabularyMismatch(format!("clip {} has class {c}", r.clip_id)));
            }
            let shape = [r.frames, r.height, r.width, r.channels];
            let frames = read_clip_frames(&dir.join("clips").join(format!("{}.f32", r.clip_id)), shape)?;
            let clip = VideoClip::new(r.clip_id.clone(), frames, r.gt_triplets.iter().copied().collect())?;
            let tracks = boxes.remove(&r.clip_id).unwrap_or_default();
            samples.push(Sample { clip, tracks, split: r.split });
        }
        let ds = Dataset { vocab, scene, config: manifest.config.clone(), samples };
        let digest = ds.digest();
        if digest != manifest.digest {
            return Err(Error::Dataset(format!("digest mismatch: manifest {} vs data {digest}", manifest.digest)));
        }
        Ok(ds)
    }
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("plain data serializes")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(held: &[&str]) -> DatasetConfig {
        DatasetConfig {
            seed: 7,
            sizes: DatasetSizes { train: 40, test: 10, unseen_test: 8 },
            held_out_verbs: held.iter().map(|s| s.to_string()).collect(),
            two_instrument_fraction: 0.3,
        }
    }

    #[test]
    fn sizes_parse() {
        let s: DatasetSizes = "600,200,100".parse().unwrap();
        assert_eq!(s, DatasetSizes::default());
        assert!("1,2".parse::<DatasetSizes>().is_err());
    }

    #[test]
    fn held_out_verb_never_trains() {
        let ds = default_dataset(&small(&["retract"])).unwrap();
        let retract = ds.vocab.verb_id("retract").unwrap();
        for s in ds.split(Split::Train).iter().chain(ds.split(Split::Test).iter()) {
            assert!(s.clip.gt_triplets.iter().all(|&c| ds.vocab.valid_triplets[c].verb != retract));
        }
        let unseen = ds.split(Split::UnseenTest);
        assert_eq!(unseen.len(), 8);
        assert!(unseen.iter().all(|s| s.clip.gt_triplets.iter().all(|&c| ds.vocab.valid_triplets[c].verb == retract)));
    }

    #[test]
    fn empty_hold_out_means_empty_unseen_split() {
        let ds = default_dataset(&small(&[])).unwrap();
        assert!(ds.split(Split::UnseenTest).is_empty());
        assert_eq!(ds.split(Split::Train).len(), 40);
    }

    #[test]
    fn balanced_primaries_and_pairs() {
        let ds = default_dataset(&small(&["cut"])).unwrap();
        let mut counts = BTreeMap::new();
        let mut pairs = 0;
        for s in ds.split(Split::Train) {
            if s.clip.gt_triplets.len() == 2 {
                pairs += 1;
                let v: Vec<usize> = s.clip.gt_triplets.iter().copied().collect();
                assert!(compatible(&ds.vocab, ds.vocab.valid_triplets[v[0]], ds.vocab.valid_triplets[v[1]]));
            }
            assert_eq!(s.tracks.len(), s.clip.gt_triplets.len());
            for &c in &s.clip.gt_triplets {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
        assert!(pairs > 0);
        // 20 seen classes, 40 clips: every class is a primary twice.
        assert_eq!(counts.len(), 20);
        assert!(counts.values().all(|&n| n >= 2));
    }

    #[test]
    fn infeasible_and_unknown() {
        assert!(matches!(default_dataset(&small(&["stitch"])), Err(Error::UnknownVerb(_))));
        let all: Vec<&str> = vec!["grasp", "retract", "dissect", "clip", "cut", "null_verb"];
        assert!(matches!(default_dataset(&small(&all)), Err(Error::Infeasible(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = default_dataset(&small(&["cut"])).unwrap();
        let m = a.save(dir.path()).unwrap();
        let b = Dataset::load(dir.path()).unwrap();
        assert_eq!(b.manifest(), m);
        assert_eq!(b.samples.len(), a.samples.len());
        assert_eq!(b.samples[3].tracks, a.samples[3].tracks);
        // Rebuilding gives the same digest.
        assert_eq!(default_dataset(&small(&["cut"])).unwrap().digest(), m.digest);
    }
}
