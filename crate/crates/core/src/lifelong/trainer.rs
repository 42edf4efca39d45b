//! Identity-balanced batching and the per-task / whole-stream training loops.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{total_loss, Adam, DataSample, LossBreakdown, MemoryBuffer, ModelPair, TrainConfig};
use crate::attribute_text::NUM_ATTRIBUTES;
use crate::autograd::Graph;
use crate::backbone::ImageTensor;
use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::model::ReidModel;

/// A sample with its caption embedding and thresholded attributes resolved.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub image: Arc<ImageTensor>,
    pub label: usize,
    pub text: Vec<f64>,
    pub attributes: [f64; NUM_ATTRIBUTES],
    pub from_buffer: bool,
}

/// Caption embeddings keyed by caption text. The text encoder is frozen, so entries stay valid
/// for every model sharing its weights.
#[derive(Clone, Debug, Default)]
pub struct TextCache {
    map: HashMap<String, Vec<f64>>,
}

impl TextCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn embed(&mut self, model: &ReidModel, caption: &crate::attribute_text::TextDescription) -> Result<Vec<f64>> {
        if let Some(v) = self.map.get(caption.as_str()) {
            return Ok(v.clone());
        }
        let v = model.text_embedding(caption)?;
        self.map.insert(caption.as_str().to_string(), v.clone());
        Ok(v)
    }
}

pub fn prepare_samples(
    model: &ReidModel,
    samples: &[DataSample],
    from_buffer: bool,
    cache: &mut TextCache,
) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            let (av, caption) = model.caption(&s.attributes)?;
            Ok(PreparedSample {
                image: Arc::clone(&s.image),
                label: s.identity,
                text: cache.embed(model, &caption)?,
                attributes: av.as_reals(),
                from_buffer,
            })
        })
        .collect()
}

/// Splits sample indices into identity-balanced batches of `P` identities × `K` instances.
///
/// Every sample appears at least once per epoch; identities with a count that is not a multiple
/// of `K` are topped up by resampling their own images. A trailing single-identity batch is merged
/// into the previous one so every batch has negatives.
pub fn identity_batches<R: Rng + ?Sized>(labels: &[usize], cfg: &TrainConfig, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let k = cfg.instances_per_identity;
    let p = cfg.identities_per_batch();
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    if by_id.len() < 2 {
        return Err(Error::InvalidBatch(format!("{} identities cannot form triplets", by_id.len())));
    }
    let mut chunks: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for (&id, idx) in &by_id {
        let mut idx = idx.clone();
        idx.shuffle(rng);
        let target = idx.len().div_ceil(k) * k;
        let pool = idx.clone();
        while idx.len() < target {
            idx.push(*pool.choose(rng).expect("identity has samples"));
        }
        chunks.insert(id, idx.chunks(k).map(<[usize]>::to_vec).rev().collect());
    }
    let mut batches: Vec<Vec<usize>> = Vec::new();
    loop {
        let mut avail: Vec<usize> = chunks.iter().filter(|(_, c)| !c.is_empty()).map(|(&id, _)| id).collect();
        if avail.is_empty() {
            break;
        }
        avail.shuffle(rng);
        avail.truncate(p);
        let batch: Vec<usize> = avail.iter().flat_map(|id| chunks.get_mut(id).and_then(Vec::pop).unwrap_or_default()).collect();
        if avail.len() == 1 && !batches.is_empty() {
            batches.last_mut().expect("non-empty").extend(batch);
        } else {
            batches.push(batch);
        }
    }
    if batches.len() == 1 && batches[0].iter().all(|&i| labels[i] == labels[batches[0][0]]) {
        return Err(Error::InvalidBatch("only one identity per batch".into()));
    }
    Ok(batches)
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub dataset: String,
    pub epoch: usize,
    /// Optimizer steps taken so far in the whole run.
    pub step: u64,
    pub lr: f64,
    pub batches: usize,
    pub losses: LossBreakdown,
    pub old_model_hash: Option<String>,
    pub buffer_size: usize,
}

/// Current-dataset training samples for one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub dataset: String,
    pub samples: Vec<DataSample>,
}

impl TaskData {
    pub fn classes(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
}

/// Trains `pair.new` on the current data plus the buffer for `cfg.epochs` epochs.
#[allow(clippy::too_many_arguments)]
pub fn train_task<R: Rng + ?Sized>(
    pair: &mut ModelPair,
    data: &TaskData,
    buffer: &MemoryBuffer,
    cfg: &TrainConfig,
    cache: &mut TextCache,
    step_offset: u64,
    rng: &mut R,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<TaskOutcome> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::invalid(format!("dataset {} has no training samples", data.dataset)));
    }
    let mut prepared = prepare_samples(&pair.new, &data.samples, false, cache)?;
    prepared.extend(prepare_samples(&pair.new, buffer.entries(), true, cache)?);
    let k = pair.new.num_classes();
    if let Some(s) = prepared.iter().find(|s| s.label >= k) {
        return Err(Error::invalid(format!("label {} exceeds the {k}-class head", s.label)));
    }
    let labels: Vec<usize> = prepared.iter().map(|s| s.label).collect();
    let old_hash = pair.old_hash();
    let mut opt = Adam::new();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let batches = identity_batches(&labels, cfg, rng)?;
        let mut sum = LossBreakdown::default();
        for batch in &batches {
            let refs: Vec<&PreparedSample> = batch.iter().map(|&i| &prepared[i]).collect();
            let mut g = Graph::new();
            let lg = total_loss(&mut g, pair, &refs, cfg, Some(&mut *rng))?;
            if !lg.breakdown.total.is_finite() {
                return Err(Error::Degenerate(format!("non-finite loss at epoch {epoch} of {}", data.dataset)));
            }
            let grads = g.backward(lg.total).param_grads(&g);
            opt.step(&mut pair.new.store, &grads, lr);
            sum.accumulate(&lg.breakdown);
        }
        let log = EpochLog {
            task: pair.task,
            dataset: data.dataset.clone(),
            epoch,
            step: step_offset + opt.steps(),
            lr,
            batches: batches.len(),
            losses: sum.scaled(1.0 / batches.len() as f64),
            old_model_hash: pair.old_hash(),
            buffer_size: buffer.len(),
        };
        if log.old_model_hash != old_hash {
            return Err(Error::invalid("old model parameters changed during training"));
        }
        info!(
            "task {} epoch {} lr {:.2e} total {:.4} ce {:.4}",
            log.task, epoch, lr, log.losses.total, log.losses.ce
        );
        log::debug!("task {} epoch {epoch} losses {:?}", log.task, log.losses);
        on_epoch(&log)?;
        logs.push(log);
    }
    Ok(TaskOutcome { epochs: logs, steps: opt.steps() })
}

#[derive(Clone, Debug, Default)]
pub struct StreamReport {
    pub epochs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
    pub buffer_sizes: Vec<usize>,
    pub head_sizes: Vec<usize>,
}

/// Trains over a sequence of tasks. Labels of task `t` must occupy the range directly after those
/// of earlier tasks.
///
/// With `out_dir`, per-epoch logs are appended to `train_log.jsonl` and a checkpoint is written
/// after every task. `after_task` sees the pair and buffer once each task (and its buffer update)
/// has finished.
pub fn run_stream(
    pair: &mut ModelPair,
    tasks: &[TaskData],
    cfg: &TrainConfig,
    seed: u64,
    config_hash: &str,
    out_dir: Option<&Path>,
    after_task: &mut dyn FnMut(&ModelPair, &MemoryBuffer) -> Result<()>,
) -> Result<StreamReport> {
    cfg.validate()?;
    let mut buffer = MemoryBuffer::new(cfg.buffer.clone())?;
    let mut cache = TextCache::new();
    let mut report = StreamReport::default();
    let log_path = out_dir.map(|d| d.join("train_log.jsonl"));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lp = log_path.as_ref().expect("set with out_dir");
        std::fs::write(lp, "").map_err(|e| Error::io(lp, e))?;
    }
    let mut steps = 0;
    for (t, task) in tasks.iter().enumerate() {
        let classes = task.classes();
        let base = pair.new.num_classes();
        if classes.first() != Some(&base) || classes.last() != Some(&(base + classes.len() - 1)) {
            return Err(Error::invalid(format!(
                "task {} labels must be the contiguous range starting at {base}",
                task.dataset
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(t as u64 + 1)));
        pair.advance_task(classes.len(), &mut rng);
        let mut on_epoch = |log: &EpochLog| -> Result<()> {
            if let Some(lp) = &log_path {
                let mut f = OpenOptions::new().append(true).open(lp).map_err(|e| Error::io(lp, e))?;
                let line = serde_json::to_string(log).map_err(|e| Error::invalid(e.to_string()))?;
                writeln!(f, "{line}").map_err(|e| Error::io(lp, e))?;
            }
            Ok(())
        };
        let outcome = train_task(pair, task, &buffer, cfg, &mut cache, steps, &mut rng, &mut on_epoch)?;
        steps += outcome.steps;
        report.epochs.extend(outcome.epochs);
        buffer.update(&task.dataset, &task.samples, &mut rng)?;
        report.buffer_sizes.push(buffer.len());
        report.head_sizes.push(pair.new.num_classes());
        if let Some(dir) = out_dir {
            let path = dir.join(checkpoint::file_name(pair.task, config_hash));
            let meta = CheckpointMeta {
                task: pair.task,
                dataset: task.dataset.clone(),
                config_hash: config_hash.to_string(),
            };
            checkpoint::save(&pair.new, &meta, &path)?;
            report.checkpoints.push(path);
        }
        after_task(pair, &buffer)?;
    }
    Ok(report)
}
