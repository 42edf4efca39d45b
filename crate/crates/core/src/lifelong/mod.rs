//! Lifelong training: the old/new model pair, exemplar memory, distillation losses and the
//! per-task training loop.

mod buffer;
mod distill;
mod optim;
mod trainer;

use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use buffer::{BufferConfig, BufferUpdate, MemoryBuffer};
pub use distill::{distill_kl, distill_kl_rows, distill_kl_var};
pub use optim::Adam;
pub use trainer::{
    identity_batches, prepare_samples, run_stream, train_task, EpochLog, PreparedSample, StreamReport, TaskData,
    TaskOutcome, TextCache,
};

use crate::attribute_text::AttributePrediction;
use crate::autograd::{Graph, Var};
use crate::backbone::ImageTensor;
use crate::error::{Error, Result};
use crate::model::{BatchInput, ReidModel};
use crate::tensor::Matrix;
use crate::tga::{ce_loss_var, orthogonal_loss_var, triplet_loss_var, TripletDistance};

/// One training image with its labels.
#[derive(Clone, Debug)]
pub struct DataSample {
    pub image: Arc<ImageTensor>,
    /// Global class index; datasets occupy disjoint ranges.
    pub identity: usize,
    pub camera: usize,
    pub dataset: String,
    pub attributes: AttributePrediction,
    pub source: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ce: f64,
    pub triplet_global: f64,
    pub triplet_attribute: f64,
    pub orthogonal: f64,
    pub anti_forgetting: f64,
    pub alignment: f64,
    pub logit_distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            triplet_global: 1.0,
            triplet_attribute: 1.0,
            orthogonal: 1.0,
            anti_forgetting: 1.0,
            alignment: 1.0,
            logit_distill: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Images per identity in a batch; `batch_size / instances_per_identity` identities per batch.
    pub instances_per_identity: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub temperature: f64,
    pub margin: f64,
    pub triplet_distance: TripletDistance,
    pub weights: LossWeights,
    /// Attribute-wise distillation on buffer samples.
    pub anti_forgetting: bool,
    /// Global-representation alignment and logit distillation.
    pub consolidation: bool,
    /// Distil only the last attribute-wise row instead of averaging all rows.
    pub af_last_row_only: bool,
    pub buffer: BufferConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small synthetic domains on a CPU.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            instances_per_identity: 4,
            epochs: 10,
            lr: 1e-3,
            lr_decay: 0.1,
            lr_step_epochs: 20,
            temperature: 2.0,
            margin: 0.3,
            triplet_distance: TripletDistance::Euclidean,
            weights: LossWeights::default(),
            anti_forgetting: true,
            consolidation: true,
            af_last_row_only: false,
            buffer: BufferConfig::default(),
        }
    }

    /// The full-scale schedule.
    pub fn full_scale() -> Self {
        Self { batch_size: 128, epochs: 60, lr: 5e-6, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: format!("train.{key}"), msg: msg.into() });
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return bad("batch_size", "must be positive and even");
        }
        if self.instances_per_identity == 0 || self.batch_size % self.instances_per_identity != 0 {
            return bad("instances_per_identity", "must divide batch_size");
        }
        if self.batch_size / self.instances_per_identity < 2 {
            return bad("instances_per_identity", "a batch must span at least two identities");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin", "must be non-negative");
        }
        if self.lr_step_epochs == 0 {
            return bad("lr_step_epochs", "must be positive");
        }
        self.buffer.validate()
    }

    pub fn identities_per_batch(&self) -> usize {
        self.batch_size / self.instances_per_identity
    }

    /// Learning rate during a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_step_epochs) as i32)
    }
}

/// Per-component loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub triplet_global: f64,
    pub triplet_attribute: f64,
    pub orthogonal: f64,
    pub anti_forgetting: f64,
    pub alignment: f64,
    pub logit_distill: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub(crate) fn accumulate(&mut self, other: &LossBreakdown) {
        self.ce += other.ce;
        self.triplet_global += other.triplet_global;
        self.triplet_attribute += other.triplet_attribute;
        self.orthogonal += other.orthogonal;
        self.anti_forgetting += other.anti_forgetting;
        self.alignment += other.alignment;
        self.logit_distill += other.logit_distill;
        self.total += other.total;
    }

    pub(crate) fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            ce: self.ce * s,
            triplet_global: self.triplet_global * s,
            triplet_attribute: self.triplet_attribute * s,
            orthogonal: self.orthogonal * s,
            anti_forgetting: self.anti_forgetting * s,
            alignment: self.alignment * s,
            logit_distill: self.logit_distill * s,
            total: self.total * s,
        }
    }
}

/// The frozen previous-task model and the model being trained.
#[derive(Clone, Debug)]
pub struct ModelPair {
    pub old: Option<ReidModel>,
    pub new: ReidModel,
    /// One-based index of the task being trained; zero before the first task.
    pub task: usize,
}

impl ModelPair {
    pub fn new(model: ReidModel) -> Self {
        Self { old: None, new: model, task: 0 }
    }

    /// Moves to the next task with `new_classes` additional identities.
    ///
    /// From the second task on, the current model is deep-copied and frozen as the old model.
    pub fn advance_task<R: Rng + ?Sized>(&mut self, new_classes: usize, rng: &mut R) {
        if self.task > 0 {
            let mut old = self.new.clone();
            let ids: Vec<_> = old.store.ids().collect();
            for id in ids {
                old.store.set_frozen(id, true);
            }
            self.old = Some(old);
        }
        self.new.grow_head(new_classes, rng);
        self.task += 1;
    }

    pub fn old_hash(&self) -> Option<String> {
        self.old.as_ref().map(|m| m.param_hash())
    }
}

/// Outputs of the frozen model, computed on a separate inference graph.
#[derive(Clone, Debug)]
pub struct OldOutputs {
    pub global: Matrix,
    pub attribute: Option<Matrix>,
    pub logits: Matrix,
}

pub fn old_outputs(old: &ReidModel, input: &BatchInput<'_>) -> Result<OldOutputs> {
    let mut g = Graph::inference();
    let out = old.forward::<rand_chacha::ChaCha8Rng>(&mut g, input, None)?;
    Ok(OldOutputs {
        global: g.value(out.global).clone(),
        attribute: out.attribute.map(|a| g.value(a.reps).clone()),
        logits: g.value(out.logits).clone(),
    })
}

/// The total objective on one batch, recorded on `g`.
pub struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn rows_of(samples: &[usize], n: usize) -> Vec<usize> {
    samples.iter().flat_map(|&s| s * n..(s + 1) * n).collect()
}

/// Builds the weighted total loss for a batch of prepared samples.
///
/// Routing: attribute-wise distillation on buffer samples, global alignment on current samples,
/// logit distillation on all samples over the old classes. All three vanish without an old model.
pub fn total_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    pair: &ModelPair,
    batch: &[&PreparedSample],
    cfg: &TrainConfig,
    rng: Option<&mut R>,
) -> Result<LossGraph> {
    let input = BatchInput {
        images: batch.iter().map(|s| s.image.as_ref()).collect(),
        text: Matrix::from_rows(&batch.iter().map(|s| s.text.clone()).collect::<Vec<_>>()),
        attributes: Matrix::from_rows(&batch.iter().map(|s| s.attributes.to_vec()).collect::<Vec<_>>()),
    };
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let n = pair.new.config.n_views();
    let out = pair.new.forward(g, &input, rng)?;
    let w = &cfg.weights;
    let mut terms: Vec<Var> = Vec::new();
    let mut bd = LossBreakdown::default();
    let mut push = |g: &mut Graph, v: Var, weight: f64, slot: &mut f64| {
        *slot = g.value(v).get(0, 0);
        terms.push(g.scale(v, weight));
    };

    let ce = ce_loss_var(g, out.logits, &labels)?;
    push(g, ce, w.ce, &mut bd.ce);
    let tg = triplet_loss_var(g, out.global_mean, &labels, cfg.margin, cfg.triplet_distance)?;
    push(g, tg, w.triplet_global, &mut bd.triplet_global);
    if let Some(am) = out.attribute_mean {
        let tl = triplet_loss_var(g, am, &labels, cfg.margin, cfg.triplet_distance)?;
        push(g, tl, w.triplet_attribute, &mut bd.triplet_attribute);
    }
    let ort = orthogonal_loss_var(g, out.global, n);
    push(g, ort, w.orthogonal, &mut bd.orthogonal);

    if let Some(old) = &pair.old {
        let needs_old = cfg.anti_forgetting || cfg.consolidation;
        if needs_old {
            let prev = old_outputs(old, &input)?;
            let tau = cfg.temperature;
            let buffered: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].from_buffer).collect();
            let current: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].from_buffer).collect();
            if cfg.anti_forgetting && !buffered.is_empty() {
                if let (Some(new_ag), Some(old_ag)) = (&out.attribute, &prev.attribute) {
                    let rows: Vec<usize> = if cfg.af_last_row_only {
                        buffered.iter().map(|&s| s * n + n - 1).collect()
                    } else {
                        rows_of(&buffered, n)
                    };
                    let teacher = Matrix::from_rows(&rows.iter().map(|&r| old_ag.row(r).to_vec()).collect::<Vec<_>>());
                    let student = g.gather_rows(new_ag.reps, rows);
                    let af = distill_kl_var(g, &teacher, student, tau)?;
                    push(g, af, w.anti_forgetting, &mut bd.anti_forgetting);
                }
            }
            if cfg.consolidation {
                if !current.is_empty() {
                    let rows = rows_of(&current, n);
                    let teacher =
                        Matrix::from_rows(&rows.iter().map(|&r| prev.global.row(r).to_vec()).collect::<Vec<_>>());
                    let student = g.gather_rows(out.global, rows);
                    let al = distill_kl_var(g, &teacher, student, tau)?;
                    push(g, al, w.alignment, &mut bd.alignment);
                }
                let k_old = prev.logits.cols();
                if k_old > 0 {
                    let student = g.slice_cols(out.logits, 0, k_old);
                    let ld = distill_kl_var(g, &prev.logits, student, tau)?;
                    push(g, ld, w.logit_distill, &mut bd.logit_distill);
                }
            }
        }
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    bd.total = g.value(total).get(0, 0);
    Ok(LossGraph { total, breakdown: bd })
}
