//! Triplet vocabulary, verb rephrasing, prompt rendering and the frozen text
//! encoder with shared learnable context tokens.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use ndcore::{nn, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal, BlockParams, Binder, ParamGroup, ParamId, ParamStore, Registrar};

/// Descriptive phrases substituted for the surgical verb labels.
pub const VERB_PHRASES: [(&str, &str); 10] = [
    ("grasp", "holding and gripping"),
    ("retract", "pulling aside"),
    ("dissect", "separating by cutting"),
    ("coagulate", "stopping bleeding by heating"),
    ("clip", "clipping closed"),
    ("cut", "cutting through"),
    ("aspirate", "sucking fluid from"),
    ("irrigate", "washing with liquid"),
    ("pack", "pressing material onto"),
    ("null_verb", "not acting"),
];

pub fn rephrase_verb(verb: &str) -> Result<&'static str> {
    VERB_PHRASES
        .iter()
        .find(|(v, _)| *v == verb)
        .map(|(_, p)| *p)
        .ok_or_else(|| Error::UnknownVerb(verb.to_string()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Raw,
    #[default]
    Rephrased,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "rephrased" => Ok(Self::Rephrased),
            other => Err(Error::Config(format!("unknown prompt mode `{other}` (raw|rephrased)"))),
        }
    }
}

/// Indices of one triplet class into the component lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub instrument: usize,
    pub verb: usize,
    pub target: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Instrument,
    Verb,
    Target,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Instrument, Component::Verb, Component::Target];

    pub fn of(self, t: &Triplet) -> usize {
        match self {
            Component::Instrument => t.instrument,
            Component::Verb => t.verb,
            Component::Target => t.target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletVocabulary {
    pub instruments: Vec<String>,
    pub verbs: Vec<String>,
    pub targets: Vec<String>,
    pub valid_triplets: Vec<Triplet>,
    pub verb_phrases: BTreeMap<String, String>,
}

impl TripletVocabulary {
    /// Builds a vocabulary whose phrase table is taken from [`VERB_PHRASES`].
    pub fn with_standard_phrases(
        instruments: &[&str],
        verbs: &[&str],
        targets: &[&str],
        valid_triplets: Vec<Triplet>,
    ) -> Result<Self> {
        let verb_phrases = verbs
            .iter()
            .map(|v| Ok((v.to_string(), rephrase_verb(v)?.to_string())))
            .collect::<Result<_>>()?;
        let vocab = Self {
            instruments: instruments.iter().map(|s| s.to_string()).collect(),
            verbs: verbs.iter().map(|s| s.to_string()).collect(),
            targets: targets.iter().map(|s| s.to_string()).collect(),
            valid_triplets,
            verb_phrases,
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.valid_triplets {
            if t.instrument >= self.instruments.len() || t.verb >= self.verbs.len() || t.target >= self.targets.len()
            {
                return Err(Error::Vocabulary(format!("triplet {t:?} has an out-of-range component")));
            }
            if !seen.insert(*t) {
                return Err(Error::Vocabulary(format!("duplicate triplet {t:?}")));
            }
        }
        if self.valid_triplets.is_empty() {
            return Err(Error::Vocabulary("no triplet classes".into()));
        }
        let verbs: BTreeSet<&String> = self.verbs.iter().collect();
        if verbs.len() != self.verbs.len() {
            return Err(Error::Vocabulary("duplicate verb names".into()));
        }
        let phrased: BTreeSet<&String> = self.verb_phrases.keys().collect();
        if phrased != verbs {
            return Err(Error::Vocabulary("verb phrase table must cover each verb exactly once".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.valid_triplets.len()
    }

    pub fn component_len(&self, c: Component) -> usize {
        match c {
            Component::Instrument => self.instruments.len(),
            Component::Verb => self.verbs.len(),
            Component::Target => self.targets.len(),
        }
    }

    pub fn verb_id(&self, name: &str) -> Result<usize> {
        self.verbs.iter().position(|v| v == name).ok_or_else(|| Error::UnknownVerb(name.to_string()))
    }

    pub fn class_of(&self, t: Triplet) -> Option<usize> {
        self.valid_triplets.iter().position(|x| *x == t)
    }

    /// Looks up a class from its `"instrument verb target"` names.
    pub fn parse_triplet(&self, text: &str) -> Result<usize> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        let unknown = || Error::UnknownTriplet(text.to_string());
        if parts.len() != 3 {
            return Err(unknown());
        }
        let find = |list: &[String], name: &str| list.iter().position(|x| x == name);
        let t = Triplet {
            instrument: find(&self.instruments, parts[0]).ok_or_else(unknown)?,
            verb: find(&self.verbs, parts[1]).ok_or_else(unknown)?,
            target: find(&self.targets, parts[2]).ok_or_else(unknown)?,
        };
        self.class_of(t).ok_or_else(unknown)
    }

    pub fn triplet_name(&self, class: usize) -> String {
        let t = self.valid_triplets[class];
        format!("{} {} {}", self.instruments[t.instrument], self.verbs[t.verb], self.targets[t.target])
    }

    pub fn phrase(&self, verb: usize) -> &str {
        &self.verb_phrases[&self.verbs[verb]]
    }

    /// Lowercased words of `"{instrument} {verb|phrase} {target}"`, with
    /// underscores read as spaces.
    pub fn render_words(&self, class: usize, mode: PromptMode) -> Result<Vec<String>> {
        let t = *self
            .valid_triplets
            .get(class)
            .ok_or(Error::Range { what: "triplet class", index: class, limit: self.n_classes() })?;
        let verb = match mode {
            PromptMode::Raw => self.verbs[t.verb].as_str(),
            PromptMode::Rephrased => self.phrase(t.verb),
        };
        let text = format!("{} {} {}", self.instruments[t.instrument], verb, self.targets[t.target]);
        Ok(text.replace('_', " ").to_lowercase().split_whitespace().map(str::to_string).collect())
    }

    pub fn render_text(&self, class: usize, mode: PromptMode) -> Result<String> {
        Ok(self.render_words(class, mode)?.join(" "))
    }

    /// Sorted word list covering every prompt in both modes.
    pub fn corpus_words(&self) -> Result<Vec<String>> {
        let mut words = BTreeSet::new();
        for c in 0..self.n_classes() {
            for mode in [PromptMode::Raw, PromptMode::Rephrased] {
                words.extend(self.render_words(c, mode)?);
            }
        }
        Ok(words.into_iter().collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: Self = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("vocabulary", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub layers: usize,
    pub heads: usize,
    pub context_tokens: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { layers: 2, heads: 4, context_tokens: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub words: Vec<String>,
    index: HashMap<String, usize>,
    pub embedding: ParamId,
    pub blocks: Vec<BlockParams>,
    pub context: Option<ParamId>,
    pub config: TextConfig,
    pub dim: usize,
}

impl TextEncoder {
    /// Embedding table and blocks are locked frozen; only the context tokens
    /// (zero-initialised, shared by every prompt) are trainable.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        vocab: &TripletVocabulary,
        dim: usize,
        config: TextConfig,
    ) -> Result<Self> {
        if dim % config.heads != 0 {
            return Err(Error::Divisibility(format!("text width {dim}"), config.heads));
        }
        let words = vocab.corpus_words()?;
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let mut frozen = Registrar { store, group: ParamGroup::Frozen, locked: true };
        let embedding = frozen.add("text.embedding".into(), normal(rng, &[words.len(), dim], 1.0));
        let blocks = (0..config.layers)
            .map(|l| BlockParams::new(&mut frozen, rng, &format!("text.block{l}"), dim))
            .collect();
        let context = (config.context_tokens > 0).then(|| {
            store.add("text.context", Tensor::zeros([config.context_tokens, dim]), ParamGroup::TextContext)
        });
        Ok(Self { words, index, embedding, blocks, context, config, dim })
    }

    pub fn tokenize(&self, words: &[String]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| self.index.get(w).copied().ok_or_else(|| Error::UnknownToken(w.clone())))
            .collect()
    }

    pub fn render_prompt(&self, vocab: &TripletVocabulary, class: usize, mode: PromptMode) -> Result<Vec<usize>> {
        self.tokenize(&vocab.render_words(class, mode)?)
    }

    /// `e_y`: mean over the final states of `[c_1..c_M, y_1..y_L]`.
    pub fn encode_text(&self, tape: &mut Tape, binder: &mut Binder, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence("prompt"));
        }
        let table = binder.store().value(self.embedding);
        let n_words = table.shape()[0];
        let mut rows = Vec::with_capacity(tokens.len() * self.dim);
        for &t in tokens {
            if t >= n_words {
                return Err(Error::Range { what: "token id", index: t, limit: n_words });
            }
            rows.extend_from_slice(table.row(t));
        }
        let emb = tape.constant(Tensor::new([tokens.len(), self.dim], rows)?);
        let mut x = match self.context {
            Some(c) => {
                let c = binder.bind(tape, c);
                tape.concat_rows(&[c, emb])?
            }
            None => emb,
        };
        for block in &self.blocks {
            let p = block.bind(binder, tape);
            x = nn::self_attention_block(tape, x, &p, self.config.heads, nn::Mask::None)?;
        }
        Ok(tape.mean_rows(x)?)
    }

    /// `[C, D_t]`, one row per class in vocabulary order.
    pub fn class_matrix(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        vocab: &TripletVocabulary,
        mode: PromptMode,
    ) -> Result<Var> {
        let rows = (0..vocab.n_classes())
            .map(|c| {
                let tokens = self.render_prompt(vocab, c, mode)?;
                self.encode_text(tape, binder, &tokens)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat_rows(&rows)?)
    }

    /// Gradient-free class matrix.
    pub fn class_matrix_value(&self, store: &ParamStore, vocab: &TripletVocabulary, mode: PromptMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, false);
        let e = self.class_matrix(&mut tape, &mut binder, vocab, mode)?;
        Ok(tape.value(e).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> TripletVocabulary {
        let t = |i, v, t| Triplet { instrument: i, verb: v, target: t };
        TripletVocabulary::with_standard_phrases(
            &["hook", "grasper"],
            &["dissect", "grasp", "null_verb"],
            &["gallbladder", "cystic_pedicle"],
            vec![t(0, 0, 0), t(1, 1, 1), t(1, 2, 0), t(0, 1, 0)],
        )
        .unwrap()
    }

    #[test]
    fn phrases() {
        assert_eq!(rephrase_verb("grasp").unwrap(), "holding and gripping");
        assert_eq!(rephrase_verb("null_verb").unwrap(), "not acting");
        assert_eq!(rephrase_verb("aspirate").unwrap(), "sucking fluid from");
        assert!(matches!(rephrase_verb("stitch"), Err(Error::UnknownVerb(_))));
    }

    #[test]
    fn rendering() {
        let v = vocab();
        assert_eq!(v.render_text(0, PromptMode::Rephrased).unwrap(), "hook separating by cutting gallbladder");
        assert_eq!(v.render_text(0, PromptMode::Raw).unwrap(), "hook dissect gallbladder");
        assert_eq!(v.render_text(1, PromptMode::Raw).unwrap(), "grasper grasp cystic pedicle");
        for mode in [PromptMode::Raw, PromptMode::Rephrased] {
            let all: BTreeSet<String> = (0..4).map(|c| v.render_text(c, mode).unwrap()).collect();
            assert_eq!(all.len(), 4);
        }
        assert_eq!(v.parse_triplet("grasper null_verb gallbladder").unwrap(), 2);
        assert!(v.parse_triplet("grasper dissect gallbladder").is_err());
    }

    #[test]
    fn validation_rejects_duplicates() {
        let mut v = vocab();
        v.valid_triplets.push(v.valid_triplets[0]);
        assert!(v.validate().is_err());
        let mut v = vocab();
        v.verb_phrases.remove("grasp");
        assert!(v.validate().is_err());
    }

    #[test]
    fn bare_encoder_is_mean_embedding() {
        let v = vocab();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TextConfig { layers: 0, heads: 1, context_tokens: 0 };
        let enc = TextEncoder::new(&mut store, &mut rng, &v, 8, cfg).unwrap();
        let tokens = enc.render_prompt(&v, 0, PromptMode::Raw).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&store, false);
        let e = enc.encode_text(&mut tape, &mut b, &tokens).unwrap();
        let table = store.value(enc.embedding);
        for j in 0..8 {
            let want: f64 = tokens.iter().map(|&t| table.at2(t, j)).sum::<f64>() / tokens.len() as f64;
            assert!((tape.value(e).data()[j] - want).abs() < 1e-14);
        }
        assert!(enc.encode_text(&mut tape, &mut b, &[]).is_err());
    }

    #[test]
    fn only_context_receives_gradient() {
        let v = vocab();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = TextEncoder::new(&mut store, &mut rng, &v, 8, TextConfig { layers: 1, heads: 2, context_tokens: 2 })
            .unwrap();
        // Move context away from zero so its gradient is generic.
        *store.value_mut(enc.context.unwrap()) = normal(&mut rng, &[2, 8], 1.0);
        let mut tape = Tape::new();
        let mut b = Binder::new(&store, true);
        let e = enc.class_matrix(&mut tape, &mut b, &v, PromptMode::Rephrased).unwrap();
        assert_eq!(tape.shape(e), &[4, 8]);
        let loss = tape.mean(e);
        let sq = tape.mul(loss, loss).unwrap();
        tape.backward(sq).unwrap();
        let grads = b.grads(&tape);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, enc.context.unwrap());
        assert!(grads[0].1.data().iter().any(|&g| g != 0.0));
    }
}
