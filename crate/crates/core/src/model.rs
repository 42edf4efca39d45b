//! The full re-identification model: backbone, fusion module, attribute compensation network
//! and identity classifier, all in one parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acn::{Acn, AcnOutput, AttributeWiseReps, DecoderConfig};
use crate::attribute_text::{
    generic_text, render_text, threshold_attributes_with, AttributePrediction, AttributeSchema, AttributeVector,
    TextDescription, ThresholdOptions, DEFAULT_THRESHOLD, NUM_ATTRIBUTES,
};
use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, ImageTensor};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::tga::{Pfm, PfmConfig};

pub const HEAD_NAME: &str = "head.weight";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionConfig {
    pub threshold: f64,
    pub lower_body_exclusive: bool,
    /// When false every image gets the generic caption.
    pub use_attributes: bool,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, lower_body_exclusive: true, use_attributes: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub pfm: PfmConfig,
    pub decoder: DecoderConfig,
    pub caption: CaptionConfig,
    pub disable_pfm: bool,
    pub disable_acn: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.pfm.validate(self.backbone.embed_dim)?;
        self.decoder.validate(self.backbone.embed_dim)?;
        if !(0.0..=1.0).contains(&self.caption.threshold) {
            return Err(Error::Config { key: "caption.threshold".into(), msg: "must lie in [0, 1]".into() });
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.backbone.n_views
    }

    pub fn dim(&self) -> usize {
        self.backbone.embed_dim
    }
}

/// One batch of model inputs.
#[derive(Clone, Debug)]
pub struct BatchInput<'a> {
    pub images: Vec<&'a ImageTensor>,
    /// `B × D` caption embeddings.
    pub text: Matrix,
    /// `B × 12` attribute flags as reals.
    pub attributes: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(B·N) × D` global representations.
    pub global: Var,
    /// `B × D` mean of each sample's global rows.
    pub global_mean: Var,
    pub attribute: Option<AcnOutput>,
    /// `B × D` mean of each sample's attribute-wise rows.
    pub attribute_mean: Option<Var>,
    /// `B × K`
    pub logits: Var,
}

/// Inference-time representations of a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct Representations {
    pub global: Matrix,
    pub attribute: Option<AttributeWiseReps>,
}

#[derive(Clone, Debug)]
pub struct ReidModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub pfm: Pfm,
    pub acn: Acn,
    pub head: ParamId,
}

impl ReidModel {
    /// Builds a model with an empty (zero-row) classifier head.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (n, d) = (config.n_views(), config.dim());
        let backbone = Backbone::new(&mut store, config.backbone.clone(), rng)?;
        let pfm = Pfm::new(&mut store, config.pfm.clone(), d, rng)?;
        let acn = Acn::new(&mut store, config.decoder.clone(), n, d, rng)?;
        let head = store.add(HEAD_NAME, Matrix::zeros(0, d));
        Ok(Self { config, store, backbone, pfm, acn, head })
    }

    pub fn num_classes(&self) -> usize {
        self.store.value(self.head).rows()
    }

    /// Appends `extra` randomly initialised classifier rows; existing rows are kept bit-for-bit.
    pub fn grow_head<R: Rng + ?Sized>(&mut self, extra: usize, rng: &mut R) {
        let d = self.config.dim();
        let old = self.store.value(self.head);
        let fresh = Matrix::randn(extra, d, (1.0 / d as f64).sqrt(), rng);
        let grown = Matrix::vstack(&[old, &fresh]);
        self.store.set_value(self.head, grown);
    }

    pub fn param_hash(&self) -> String {
        self.store.hash_hex()
    }

    /// Thresholds a prediction and renders the caption this model is configured for.
    pub fn caption(&self, pred: &AttributePrediction) -> Result<(AttributeVector, TextDescription)> {
        let opts = ThresholdOptions {
            threshold: self.config.caption.threshold,
            lower_body_exclusive: self.config.caption.lower_body_exclusive,
        };
        let av = threshold_attributes_with(pred, &opts)?;
        let text = if self.config.caption.use_attributes {
            render_text(&av, &AttributeSchema::default())
        } else {
            generic_text()
        };
        Ok((av, text))
    }

    pub fn text_embedding(&self, text: &TextDescription) -> Result<Vec<f64>> {
        Ok(self.backbone.embed_caption(&self.store, text)?.vec)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        input: &BatchInput<'_>,
        mut rng: Option<&mut R>,
    ) -> Result<ForwardOutput> {
        let b = input.images.len();
        let (n, d) = (self.config.n_views(), self.config.dim());
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if input.text.shape() != (b, d) || input.attributes.shape() != (b, NUM_ATTRIBUTES) {
            return Err(Error::invalid(format!(
                "batch of {b} needs text {b}×{d} and attributes {b}×{NUM_ATTRIBUTES}, got {:?} and {:?}",
                input.text.shape(),
                input.attributes.shape()
            )));
        }
        let image = self.backbone.image.forward(g, &self.store, &self.config.backbone, &input.images);
        let global = if self.config.disable_pfm {
            image.class
        } else {
            let text = g.constant(input.text.clone());
            self.pfm.forward(g, &self.store, text, &image, n, rng.as_deref_mut())
        };
        let averager = g.constant(segment_averager(b, n));
        let global_mean = g.matmul(averager, global);
        let (attribute, attribute_mean) = if self.config.disable_acn {
            (None, None)
        } else {
            let attrs = g.constant(input.attributes.clone());
            let out = self.acn.forward(g, &self.store, attrs, global, n)?;
            let mean = g.matmul(averager, out.reps);
            (Some(out), Some(mean))
        };
        let head = g.param(&self.store, self.head);
        let logits = g.matmul_nt(global_mean, head);
        Ok(ForwardOutput { global, global_mean, attribute, attribute_mean, logits })
    }

    /// Deterministic single-image inference.
    pub fn represent(&self, image: &ImageTensor, text: &[f64], av: &AttributeVector) -> Result<Representations> {
        let input = BatchInput {
            images: vec![image],
            text: Matrix::row_vector(text),
            attributes: Matrix::row_vector(&av.as_reals()),
        };
        let mut g = Graph::inference();
        let out = self.forward::<rand_chacha::ChaCha8Rng>(&mut g, &input, None)?;
        let global = g.value(out.global).clone();
        let attribute = out
            .attribute
            .map(|a| AttributeWiseReps { ag: g.value(a.reps).clone(), match_indices: a.match_indices });
        Ok(Representations { global, attribute })
    }
}

/// `B × (B·N)` matrix averaging consecutive blocks of `n` rows.
pub fn segment_averager(b: usize, n: usize) -> Matrix {
    let mut m = Matrix::zeros(b, b * n);
    for s in 0..b {
        for j in 0..n {
            m.set(s, s * n + j, 1.0 / n as f64);
        }
    }
    m
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig { embed_dim: 16, heads: 2, mlp_hidden: 32, patch_size: 32, image_depth: 1, text_depth: 1, ..Default::default() },
            pfm: PfmConfig { n_heads: 2, dropout_rate: 0.0, mlp_hidden: 16 },
            decoder: DecoderConfig { n_blocks: 2, n_heads: 2, mlp_hidden: 16, project_semantics: false },
            ..Default::default()
        }
    }

    #[test]
    fn head_growth_keeps_old_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = ReidModel::new(small_config(), &mut rng).unwrap();
        model.grow_head(3, &mut rng);
        let before = model.store.value(model.head).clone();
        model.grow_head(2, &mut rng);
        let after = model.store.value(model.head);
        assert_eq!(after.shape(), (5, 16));
        assert_eq!(&after.data()[..before.len()], before.data());
    }

    #[test]
    fn forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = ReidModel::new(small_config(), &mut rng).unwrap();
        model.grow_head(4, &mut rng);
        let imgs = [crate::backbone::tests::random_image(1), crate::backbone::tests::random_image(2)];
        let input = BatchInput {
            images: imgs.iter().collect(),
            text: Matrix::randn(2, 16, 1.0, &mut rng),
            attributes: Matrix::zeros(2, 12),
        };
        let mut g = Graph::new();
        let out = model.forward::<ChaCha8Rng>(&mut g, &input, None).unwrap();
        assert_eq!(g.shape(out.global), (6, 16));
        assert_eq!(g.shape(out.global_mean), (2, 16));
        assert_eq!(g.shape(out.logits), (2, 4));
        assert_eq!(g.shape(out.attribute_mean.unwrap()), (2, 16));
    }

    #[test]
    fn averager_rows_sum_to_one() {
        let m = segment_averager(3, 4);
        for r in 0..3 {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
