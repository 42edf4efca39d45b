//! Miniature dual encoder: a ViT-style image encoder with several class tokens
//! and a frozen transformer text encoder over a closed caption vocabulary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attribute_text::TextDescription;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{tile_index, EncoderBlock, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::Matrix;

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_HEIGHT: usize = 256;
pub const IMAGE_WIDTH: usize = 128;
pub const IMAGE_LEN: usize = IMAGE_CHANNELS * IMAGE_HEIGHT * IMAGE_WIDTH;

/// Parameter-name prefix of the text encoder; everything under it is frozen.
pub const TEXT_PREFIX: &str = "text.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Number of class tokens, i.e. global representations per image.
    pub n_views: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub image_depth: usize,
    pub text_depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Initialisation scale of the class tokens.
    pub class_token_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_views: 3,
            embed_dim: 64,
            patch_size: 16,
            image_depth: 2,
            text_depth: 2,
            heads: 4,
            mlp_hidden: 128,
            vocab_size: Tokenizer::new().vocab_len(),
            max_text_len: 48,
            class_token_std: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: key.into(), msg: msg.into() });
        if self.n_views < 2 {
            return bad("n_views", "must be at least 2");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim", "must be positive");
        }
        if self.patch_size == 0 || IMAGE_HEIGHT % self.patch_size != 0 || IMAGE_WIDTH % self.patch_size != 0 {
            return bad("patch_size", "must divide both 256 and 128");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("heads", "must divide embed_dim");
        }
        if self.image_depth == 0 || self.text_depth == 0 || self.mlp_hidden == 0 {
            return bad("image_depth", "depths and mlp_hidden must be positive");
        }
        if self.vocab_size < Tokenizer::new().vocab_len() {
            return bad("vocab_size", "smaller than the caption vocabulary");
        }
        if self.max_text_len < 3 {
            return bad("max_text_len", "must leave room for BOS, one token and EOS");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (IMAGE_HEIGHT / self.patch_size) * (IMAGE_WIDTH / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        IMAGE_CHANNELS * self.patch_size * self.patch_size
    }
}

/// A preprocessed `3 × 256 × 128` image, channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != IMAGE_LEN {
            return Err(Error::invalid(format!(
                "image has {} values, expected {IMAGE_CHANNELS}x{IMAGE_HEIGHT}x{IMAGE_WIDTH}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("pixel value {v} is not a finite value in [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * IMAGE_HEIGHT + y) * IMAGE_WIDTH + x]
    }

    /// Row-major grid of flattened `(c, y, x)` patches, mapped from `[0, 1]` to `[-1, 1]`.
    pub fn patches(&self, patch: usize) -> Matrix {
        let (gh, gw) = (IMAGE_HEIGHT / patch, IMAGE_WIDTH / patch);
        let dim = IMAGE_CHANNELS * patch * patch;
        let mut out = Matrix::zeros(gh * gw, dim);
        for py in 0..gh {
            for px in 0..gw {
                let row = out.row_mut(py * gw + px);
                let mut i = 0;
                for c in 0..IMAGE_CHANNELS {
                    for y in 0..patch {
                        let base = (c * IMAGE_HEIGHT + py * patch + y) * IMAGE_WIDTH + px * patch;
                        for x in 0..patch {
                            row[i] = f64::from(self.pixels[base + x]) * 2.0 - 1.0;
                            i += 1;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Class-token and patch-token outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbeddings {
    /// `N × D`
    pub class_embs: Matrix,
    /// `P × D`
    pub patch_embs: Matrix,
}

/// Tape handles for a batch of encoded images.
#[derive(Clone, Copy, Debug)]
pub struct ImageEmbeddingVars {
    /// `(B·N) × D`
    pub class: Var,
    /// `(B·(N+P)) × D`, each sample's class tokens followed by its patch tokens.
    pub sequence: Var,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vec: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_proj: Linear,
    pub patch_pos: ParamId,
    pub class_tokens: ParamId,
    pub class_pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let patch_proj = Linear::new(store, "image.patch_proj", cfg.patch_dim(), d, rng);
        let patch_pos = store.add("image.patch_pos", Matrix::randn(cfg.num_patches(), d, 0.02, rng));
        let class_tokens = store.add("image.class_tokens", Matrix::randn(cfg.n_views, d, cfg.class_token_std, rng));
        let class_pos = store.add("image.class_pos", Matrix::randn(1, d, 0.02, rng));
        let blocks = (0..cfg.image_depth)
            .map(|i| EncoderBlock::new(store, &format!("image.block{i}"), d, cfg.heads, cfg.mlp_hidden, rng))
            .collect();
        let norm = LayerNorm::new(store, "image.norm", d);
        Self { patch_proj, patch_pos, class_tokens, class_pos, blocks, norm }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &BackboneConfig,
        images: &[&ImageTensor],
    ) -> ImageEmbeddingVars {
        let b = images.len();
        let (n, p) = (cfg.n_views, cfg.num_patches());
        let patch_mats: Vec<Matrix> = images.iter().map(|img| img.patches(cfg.patch_size)).collect();
        let refs: Vec<&Matrix> = patch_mats.iter().collect();
        let patches = g.constant(Matrix::vstack(&refs));
        let tokens = self.patch_proj.forward(g, store, patches);
        let pos = g.param(store, self.patch_pos);
        let pos = g.gather_rows(pos, tile_index(p, b));
        let tokens = g.add(tokens, pos);

        let cls = g.param(store, self.class_tokens);
        let cls_pos = g.param(store, self.class_pos);
        let cls = g.add_row(cls, cls_pos);
        let cls = g.gather_rows(cls, tile_index(n, b));

        // interleave per sample: [class tokens ; patch tokens]
        let stacked = g.concat_rows(&[cls, tokens]);
        let order: Vec<usize> =
            (0..b).flat_map(|s| (s * n..(s + 1) * n).chain(b * n + s * p..b * n + (s + 1) * p)).collect();
        let mut x = g.gather_rows(stacked, order);
        for block in &self.blocks {
            x = block.forward(g, store, x, n + p);
        }
        let sequence = self.norm.forward(g, store, x);
        let class_rows: Vec<usize> = (0..b).flat_map(|s| s * (n + p)..s * (n + p) + n).collect();
        let class = g.gather_rows(sequence, class_rows);
        ImageEmbeddingVars { class, sequence, batch: b }
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let token_embedding = store.add("text.token_embedding", Matrix::randn(cfg.vocab_size, d, 1.0, rng));
        let pos = store.add("text.pos", Matrix::randn(cfg.max_text_len, d, 0.02, rng));
        let blocks = (0..cfg.text_depth)
            .map(|i| EncoderBlock::new(store, &format!("text.block{i}"), d, cfg.heads, cfg.mlp_hidden, rng))
            .collect();
        let norm = LayerNorm::new(store, "text.norm", d);
        let proj = Linear::new(store, "text.proj", d, d, rng);
        Self { token_embedding, pos, blocks, norm, proj }
    }

    /// Encodes a batch of token sequences to `B × D`, reading the hidden state at each EOS position.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cfg: &BackboneConfig, tokens: &[Vec<usize>]) -> Var {
        let len = cfg.max_text_len;
        let b = tokens.len();
        let ids: Vec<usize> = tokens.iter().flat_map(|t| t.iter().copied()).collect();
        assert_eq!(ids.len(), b * len, "token sequences must be padded to max_text_len");
        let table = g.param(store, self.token_embedding);
        let x = g.gather_rows(table, ids);
        let pos = g.param(store, self.pos);
        let pos = g.gather_rows(pos, tile_index(len, b));
        let mut x = g.add(x, pos);
        for block in &self.blocks {
            x = block.forward(g, store, x, len);
        }
        let x = self.norm.forward(g, store, x);
        let eos_rows: Vec<usize> = tokens
            .iter()
            .enumerate()
            .map(|(s, t)| s * len + t.iter().position(|&id| id == Tokenizer::EOS).unwrap_or(len - 1))
            .collect();
        let x = g.gather_rows(x, eos_rows);
        self.proj.forward(g, store, x)
    }
}

/// Image and text encoders sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub tokenizer: Tokenizer,
}

impl Backbone {
    /// Builds both encoders; the text encoder's parameters are frozen.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let image = ImageEncoder::new(store, &config, rng);
        let text = TextEncoder::new(store, &config, rng);
        store.freeze_prefix(TEXT_PREFIX);
        Ok(Self { config, image, text, tokenizer: Tokenizer::new() })
    }

    pub fn encode_image(&self, store: &ParamStore, img: &ImageTensor) -> ImageEmbeddings {
        let mut g = Graph::inference();
        let out = self.image.forward(&mut g, store, &self.config, &[img]);
        let n = self.config.n_views;
        let seq = g.value(out.sequence);
        let rows = seq.to_rows();
        ImageEmbeddings { class_embs: Matrix::from_rows(&rows[..n]), patch_embs: Matrix::from_rows(&rows[n..]) }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        self.tokenizer.encode(text, self.config.max_text_len)
    }

    pub fn encode_text(&self, store: &ParamStore, tokens: &[usize]) -> TextEmbedding {
        let mut g = Graph::inference();
        let v = self.text.forward(&mut g, store, &self.config, &[tokens.to_vec()]);
        TextEmbedding { vec: g.value(v).data().to_vec() }
    }

    /// Caption → text embedding in one step.
    pub fn embed_caption(&self, store: &ParamStore, text: &TextDescription) -> Result<TextEmbedding> {
        let tokens = self.tokenize(text.as_str())?;
        Ok(self.encode_text(store, &tokens))
    }
}

/// Whitespace/punctuation tokenizer over the closed caption vocabulary.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vec<&'static str>,
}

const CAPTION_WORDS: &[&str] = &[
    "a", "photo", "of", "woman", "man", "person", "wearing", "clothes", "with", "no", "accessories", "short",
    "sleeved", "top", "long", "coat", "trousers", "shorts", "skirt", "and", "hat", "glasses", "carrying", "handbag",
    "shoulder", "bag", "backpack", ",", ".",
];

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;
    const SPECIALS: usize = 4;

    pub fn new() -> Self {
        Self { vocab: CAPTION_WORDS.to_vec() }
    }

    pub fn vocab_len(&self) -> usize {
        Self::SPECIALS + self.vocab.len()
    }

    fn id(&self, word: &str) -> usize {
        self.vocab.iter().position(|w| *w == word).map_or(Self::UNK, |i| i + Self::SPECIALS)
    }

    /// Lower-cased words and punctuation marks.
    pub fn words(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in text.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() {
                cur.push(ch);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                if !ch.is_whitespace() {
                    out.push(ch.to_string());
                }
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    /// `[BOS, tokens.., EOS, PAD..]`, exactly `max_len` long; long inputs are truncated before EOS.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot tokenize empty text"));
        }
        let mut ids = vec![Self::BOS];
        ids.extend(Self::words(text).iter().map(|w| self.id(w)).take(max_len - 2));
        ids.push(Self::EOS);
        ids.resize(max_len, Self::PAD);
        Ok(ids)
    }
}
