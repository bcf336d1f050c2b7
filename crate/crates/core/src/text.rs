//! Text normalisation and the pluggable text-encoder slot.
//!
//! The builtin `toy` encoder is a summed bag of learned rows: one row per
//! vocabulary word (initialised to a unit vector on its own coordinate) plus
//! hashed buckets for everything else. Its table is a trainable parameter, so
//! embedding happens inside a [`Graph`]. The `external` encoder looks up
//! precomputed vectors keyed by a hash of the normalised text.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::color::PALETTE;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SHAPE_WORDS: [&str; 4] = ["circle", "square", "triangle", "diamond"];
pub const EXTRA_WORDS: [&str; 4] = ["background", "gray", "light", "dark"];
pub const DEFAULT_MAX_TOKENS: usize = 16;
pub const HASH_BUCKETS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InstanceText {
    raw: String,
    tokens: Vec<String>,
}

impl InstanceText {
    /// Lowercases, splits on whitespace, strips non-alphanumeric characters,
    /// drops empty tokens, and keeps at most `max_tokens`.
    pub fn new(raw: &str, max_tokens: usize) -> Self {
        let tokens = raw
            .split_whitespace()
            .map(|t| t.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
            .filter(|t| !t.is_empty())
            .take(max_tokens)
            .collect();
        Self { raw: raw.to_string(), tokens }
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_null(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Hex SHA-256 of the space-joined tokens; the external encoder's key.
    pub fn key(&self) -> String {
        let digest = Sha256::digest(self.tokens.join(" ").as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn vocabulary() -> Vec<&'static str> {
    PALETTE.iter().map(|c| c.name).chain(SHAPE_WORDS).chain(EXTRA_WORDS).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTextEncoder {
    pub d_text: usize,
    pub max_tokens: usize,
    pub buckets: usize,
    vocab: Vec<String>,
}

impl Default for ToyTextEncoder {
    fn default() -> Self {
        Self::new(64, DEFAULT_MAX_TOKENS)
    }
}

impl ToyTextEncoder {
    pub fn new(d_text: usize, max_tokens: usize) -> Self {
        let vocab = vocabulary().into_iter().map(String::from).collect();
        Self { d_text, max_tokens, buckets: HASH_BUCKETS, vocab }
    }

    pub fn rows(&self) -> usize {
        self.vocab.len() + self.buckets
    }

    /// Table row for a token.
    pub fn row(&self, token: &str) -> usize {
        match self.vocab.iter().position(|w| w == token) {
            Some(i) => i,
            None => {
                let h = Sha256::digest(token.as_bytes());
                let v = u64::from_le_bytes(h[..8].try_into().expect("digest length"));
                self.vocab.len() + (v % self.buckets as u64) as usize
            }
        }
    }

    pub fn bag(&self, text: &InstanceText) -> Vec<usize> {
        text.tokens().iter().map(|t| self.row(t)).collect()
    }

    /// Initial table: vocabulary rows are unit vectors on distinct
    /// coordinates, bucket rows small Gaussian noise.
    pub fn init_table<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        assert!(self.d_text >= self.vocab.len(), "d_text smaller than vocabulary");
        let mut t = Tensor::<T>::randn(&[self.rows(), self.d_text], 0.1, rng);
        for i in 0..self.vocab.len() {
            let row = &mut t.data_mut()[i * self.d_text..(i + 1) * self.d_text];
            row.fill(T::zero());
            row[i] = T::one();
        }
        t
    }
}

/// Precomputed embeddings keyed by [`InstanceText::key`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalTextEncoder {
    pub d_text: usize,
    pub max_tokens: usize,
    pub embeddings: HashMap<String, Vec<f32>>,
}

impl ExternalTextEncoder {
    pub fn load(path: &Path) -> Result<Self> {
        let enc: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if let Some((k, v)) = enc.embeddings.iter().find(|(_, v)| v.len() != enc.d_text) {
            return Err(Error::Config(format!("embedding {k} has {} values, expected {}", v.len(), enc.d_text)));
        }
        Ok(enc)
    }

    pub fn embed(&self, text: &InstanceText) -> std::result::Result<Vec<f32>, String> {
        if text.is_null() {
            return Ok(vec![0.0; self.d_text]);
        }
        self.embeddings.get(&text.key()).cloned().ok_or_else(|| format!("no embedding for {:?}", text.raw()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextEncoder {
    Toy(ToyTextEncoder),
    External(ExternalTextEncoder),
}

impl TextEncoder {
    pub fn name(&self) -> &'static str {
        match self {
            TextEncoder::Toy(_) => "toy",
            TextEncoder::External(_) => "external",
        }
    }

    pub fn d_text(&self) -> usize {
        match self {
            TextEncoder::Toy(e) => e.d_text,
            TextEncoder::External(e) => e.d_text,
        }
    }

    pub fn max_tokens(&self) -> usize {
        match self {
            TextEncoder::Toy(e) => e.max_tokens,
            TextEncoder::External(e) => e.max_tokens,
        }
    }

    pub fn text(&self, raw: &str) -> InstanceText {
        InstanceText::new(raw, self.max_tokens())
    }

    /// Registers the encoder's trainable table, if it has one.
    pub fn register<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Option<ParamId> {
        match self {
            TextEncoder::Toy(e) => Some(store.add("text.table", ParamGroup::Guidance, e.init_table(rng))),
            TextEncoder::External(_) => None,
        }
    }

    /// `n × d_text` embeddings of `texts`; an empty text embeds to zeros.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, texts: &[InstanceText]) -> Result<Var> {
        match self {
            TextEncoder::Toy(e) => {
                let id = g
                    .store()
                    .id("text.table")
                    .ok_or_else(|| Error::Config("toy text encoder table not registered".into()))?;
                let table = g.param(id);
                g.embedding_bag(table, texts.iter().map(|t| e.bag(t)).collect())
            }
            TextEncoder::External(e) => {
                let mut data = Vec::with_capacity(texts.len() * e.d_text);
                for (index, t) in texts.iter().enumerate() {
                    let v = e.embed(t).map_err(|message| Error::Encoder { index, message })?;
                    data.extend(v.into_iter().map(|x| T::from_f64(x as f64)));
                }
                Ok(g.constant(Tensor::from_vec(&[texts.len(), e.d_text], data)?))
            }
        }
    }

    /// Forward-only embedding of a list of raw texts.
    pub fn embed_texts<T: Scalar>(&self, store: &ParamStore<T>, texts: &[&str]) -> Result<Tensor<T>> {
        let mut g = Graph::inference(store);
        let texts: Vec<InstanceText> = texts.iter().map(|t| self.text(t)).collect();
        let v = self.encode(&mut g, &texts)?;
        Ok(g.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalisation() {
        let t = InstanceText::new("  A  RED, Circle!! ", 16);
        assert_eq!(t.tokens(), &["a", "red", "circle"]);
        assert_eq!(InstanceText::new("one two three", 2).tokens().len(), 2);
        assert!(InstanceText::new("?!", 16).is_null());
    }

    #[test]
    fn toy_encoder_color_words_differ_on_their_coordinates_only() {
        let enc = TextEncoder::Toy(ToyTextEncoder::default());
        let mut store = ParamStore::<f64>::new();
        enc.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let e = enc.embed_texts(&store, &["red circle", "blue circle", "", "a red circle", "a red circle"]).unwrap();
        let row = |k: usize| &e.data()[k * 64..(k + 1) * 64];
        let red = crate::color::palette_index("red").unwrap();
        let blue = crate::color::palette_index("blue").unwrap();
        for j in 0..64 {
            let d = row(0)[j] - row(1)[j];
            match j {
                j if j == red => assert_eq!(d, 1.0),
                j if j == blue => assert_eq!(d, -1.0),
                _ => assert_eq!(d, 0.0),
            }
        }
        assert!(row(2).iter().all(|&v| v == 0.0));
        assert_eq!(row(3), row(4));
    }

    #[test]
    fn toy_encoder_is_total_over_unicode() {
        let enc = ToyTextEncoder::default();
        for s in ["ünïcödé 漢字 🎨", "\u{0}\u{feff}", ""] {
            let bag = enc.bag(&InstanceText::new(s, 16));
            assert!(bag.iter().all(|&r| r < enc.rows()));
        }
    }

    #[test]
    fn external_encoder_reports_instance_index() {
        let enc = TextEncoder::External(ExternalTextEncoder {
            d_text: 2,
            max_tokens: 16,
            embeddings: [(InstanceText::new("red", 16).key(), vec![1.0, 2.0])].into_iter().collect(),
        });
        let store = ParamStore::<f32>::new();
        let ok = enc.embed_texts(&store, &["red", ""]).unwrap();
        assert_eq!(ok.data(), &[1.0, 2.0, 0.0, 0.0]);
        let err = enc.embed_texts(&store, &["red", "blue"]).unwrap_err();
        assert!(matches!(err, Error::Encoder { index: 1, .. }));
    }
}
