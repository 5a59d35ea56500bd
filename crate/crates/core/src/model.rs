//! Full model: frozen visual encoder, trajectory encoder, predictor and text
//! encoder sharing one parameter store.

use ndcore::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::predictor::{Predictor, PredictorConfig};
use crate::text::{PromptMode, TextConfig, TextEncoder, TripletVocabulary};
use crate::trajectory::{augment, select_tracks, BoxTrack, TrajectoryEncoder, TrajectoryToken, K_MAX};
use crate::vision::{TokenGrid, TubeletEncoder, VideoClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub patch: usize,
    pub channels: usize,
    pub k_max: usize,
    pub predictor: PredictorConfig,
    pub text: TextConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 64,
            d_t: 64,
            patch: 8,
            channels: 3,
            k_max: K_MAX,
            predictor: PredictorConfig::default(),
            text: TextConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max > K_MAX {
            return Err(Error::Config(format!("k_max {} exceeds the limit of {K_MAX}", self.k_max)));
        }
        if self.d_v % 8 != 0 {
            return Err(Error::Divisibility(format!("d_v {}", self.d_v), 8));
        }
        if self.d_t == 0 || self.patch == 0 || self.channels == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Predicted embedding `[D_t]`.
    pub h: Var,
    /// All predictor outputs `[N_v + K + n_query, D_v]`.
    pub outputs: Var,
    pub n_visual: usize,
    pub trajectory: Vec<TrajectoryToken>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: TripletVocabulary,
    pub store: ParamStore,
    pub vision: TubeletEncoder,
    pub trajectory: TrajectoryEncoder,
    pub predictor: Predictor,
    pub text: TextEncoder,
}

impl Model {
    /// Each component draws from its own random stream, so changing one part
    /// of the configuration leaves the others' initial weights unchanged.
    pub fn new(config: &ModelConfig, vocab: &TripletVocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        vocab.validate()?;
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        let mut store = ParamStore::new();
        let vision = TubeletEncoder::new(&mut store, &mut stream(1), config.patch, config.channels, config.d_v);
        let trajectory = TrajectoryEncoder::new(&mut store, &mut stream(2), config.d_v)?;
        let predictor =
            Predictor::new(&mut store, &mut stream(3), config.d_v, config.d_t, config.predictor.clone())?;
        let text = TextEncoder::new(&mut store, &mut stream(4), vocab, config.d_t, config.text.clone())?;
        Ok(Self { config: config.clone(), vocab: vocab.clone(), store, vision, trajectory, predictor, text })
    }

    pub fn encode_clip(&self, clip: &VideoClip) -> Result<TokenGrid> {
        if clip.channels() != self.config.channels {
            return Err(Error::Dataset(format!(
                "clip `{}` has {} channels, model expects {}",
                clip.clip_id,
                clip.channels(),
                self.config.channels
            )));
        }
        self.vision.encode(&self.store, clip)
    }

    /// `tracks = None` runs on visual tokens only. More than `k_max` tracks
    /// are reduced to the `k_max` largest.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        grid: &TokenGrid,
        tracks: Option<&[BoxTrack]>,
    ) -> Result<Forward> {
        let zv = tape.constant(grid.tokens.clone());
        let trajectory = match tracks {
            Some(t) if !t.is_empty() && self.config.k_max > 0 => {
                let kept = select_tracks(t, self.config.k_max);
                self.trajectory.build_tokens(tape, binder, zv, &grid.geometry, &kept)?
            }
            _ => Vec::new(),
        };
        let aug = augment(tape, zv, &trajectory)?;
        let outputs = self.predictor.predict_tokens(tape, binder, aug.tokens)?;
        let h = self.predictor.pool_project(tape, binder, outputs)?;
        Ok(Forward { h, outputs, n_visual: aug.n_visual, trajectory })
    }

    /// Gradient-free predicted embedding.
    pub fn embed(&self, grid: &TokenGrid, tracks: Option<&[BoxTrack]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, false);
        let f = self.forward(&mut tape, &mut binder, grid, tracks)?;
        Ok(tape.value(f.h).clone())
    }

    /// Text embeddings of every class, `[C, D_t]`.
    pub fn class_embeddings(&self, mode: PromptMode) -> Result<Tensor> {
        self.text.class_matrix_value(&self.store, &self.vocab, mode)
    }
}
