//! Toy cross-attention shift encoder.
//!
//! A small ViT encodes the image into visual tokens (CLS first). The shift
//! encoder runs self-attention over the text tokens, then cross-attention
//! from text queries to the visual tokens, then a feed-forward sublayer, in
//! every layer (pre-norm). The text CLS state is projected and normalized to
//! form the query embedding; the visual CLS state, through a separate
//! projection, is the target embedding.

mod checkpoint;
mod graph;
mod params;
pub mod tokenizer;

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use graph::{cross_attention, Graph};
pub use params::{InitMeta, ParamBlock, Parameters};
pub use tokenizer::Tokenizer;

use crate::image::{Image, ImageError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown query mode {0:?} (expected standard, reverse, text_only or image_only)")]
    UnknownMode(String),
    #[error("{path}: malformed checkpoint at byte {offset}: {reason}")]
    Checkpoint { path: String, offset: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d: usize,
    pub n_heads: usize,
    pub vit_layers: usize,
    pub shift_layers: usize,
    /// Output embedding width (256 at full scale).
    pub d_e: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub ffn_mult: usize,
    pub ln_eps: f64,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            d: 32,
            n_heads: 4,
            vit_layers: 2,
            shift_layers: 2,
            d_e: 32,
            vocab_size: 0,
            max_text_len: 32,
            ffn_mult: 4,
            ln_eps: 1e-5,
            init_seed: 0,
            init_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be divisible by patch_size");
        }
        if self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return bad("d must be divisible by n_heads");
        }
        if self.d == 0 || self.d_e == 0 || self.channels == 0 {
            return bad("d, d_e and channels must be positive");
        }
        if self.max_text_len < 3 {
            return bad("max_text_len must leave room for [CLS] and [SEP]");
        }
        if self.vocab_size < 5 {
            return bad("vocab_size must cover the special tokens");
        }
        if self.ln_eps <= 0.0 || self.ffn_mult == 0 {
            return bad("ln_eps and ffn_mult must be positive");
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Visual token count including the visual CLS.
    pub fn n_visual(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Which inputs the query branch sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Query image replaced by zeros.
    TextOnly,
    /// Query text replaced by `[CLS][SEP]`.
    ImageOnly,
}

impl FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "text_only" => Ok(Variant::TextOnly),
            "image_only" => Ok(Variant::ImageOnly),
            other => Err(ModelError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Standard,
    /// Image is the target image; `[REV]` follows `[CLS]`.
    Reverse,
    TextOnly,
    ImageOnly,
}

impl QueryMode {
    pub fn variant(self) -> Variant {
        match self {
            QueryMode::Standard | QueryMode::Reverse => Variant::Full,
            QueryMode::TextOnly => Variant::TextOnly,
            QueryMode::ImageOnly => Variant::ImageOnly,
        }
    }

    pub fn is_reverse(self) -> bool {
        self == QueryMode::Reverse
    }
}

impl FromStr for QueryMode {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(QueryMode::Standard),
            "reverse" => Ok(QueryMode::Reverse),
            "text_only" => Ok(QueryMode::TextOnly),
            "image_only" => Ok(QueryMode::ImageOnly),
            other => Err(ModelError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseModel {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: Parameters,
}

impl CaseModel {
    /// Fresh model; `config.vocab_size` is taken from the tokenizer.
    pub fn new(mut config: ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.vocab_size = tokenizer.len();
        config.validate()?;
        let params = Parameters::init(&config);
        Ok(Self {
            config,
            tokenizer,
            params,
        })
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let c = &self.config;
        let expected = (c.image_size, c.image_size, c.channels);
        if image.shape() != expected {
            return Err(ImageError::Shape {
                got: image.shape(),
                expected,
            }
            .into());
        }
        Ok(())
    }

    pub fn zero_image(&self) -> Image {
        let c = &self.config;
        Image::zeros(c.image_size, c.image_size, c.channels)
    }

    /// Token ids the query branch consumes for `variant`/`reverse`.
    pub fn query_tokens(&self, text: &str, variant: Variant, reverse: bool) -> Vec<usize> {
        let text = if variant == Variant::ImageOnly { "" } else { text };
        self.tokenizer
            .encode_with(text, reverse, self.config.max_text_len)
    }

    /// Unit-norm query embedding.
    pub fn forward_query(&self, image: &Image, text: &str, mode: QueryMode) -> Result<Vec<f32>> {
        self.check_image(image)?;
        let mut g = Graph::<f32>::new(self, false);
        let zero;
        let img = if mode.variant() == Variant::TextOnly {
            zero = self.zero_image();
            &zero
        } else {
            image
        };
        let visual = g.encode_image(img)?;
        let ids = self.query_tokens(text, mode.variant(), mode.is_reverse());
        let q = g.query_embedding(&ids, visual)?;
        Ok(g.tape.data(q).to_vec())
    }

    /// Unit-norm target embedding of a corpus image.
    pub fn encode_target(&self, image: &Image) -> Result<Vec<f32>> {
        self.check_image(image)?;
        let mut g = Graph::<f32>::new(self, false);
        let visual = g.encode_image(image)?;
        let t = g.target_embedding(visual)?;
        Ok(g.tape.data(t).to_vec())
    }
}
