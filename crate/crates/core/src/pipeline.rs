//! End-to-end helpers: load a task stream's datasets, train over it, evaluate checkpoints.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attribute_text::AttributePredictor;
use crate::config::RunConfig;
use crate::datakit::{load_eval_samples, load_task_data, DatasetSplits, Split, TaskStream};
use crate::error::{Error, Result};
use crate::evalkit::{aggregate_report, evaluate_dataset, EvalData, EvalReport};
use crate::lifelong::{run_stream, MemoryBuffer, ModelPair, StreamReport, TaskData, TextCache};
use crate::model::ReidModel;

/// Split manifests of every dataset named by a stream.
#[derive(Clone, Debug)]
pub struct StreamDatasets {
    pub seen: Vec<DatasetSplits>,
    pub unseen: Vec<DatasetSplits>,
}

impl StreamDatasets {
    pub fn load(stream: &TaskStream) -> Result<Self> {
        let seen = stream.seen().map(DatasetSplits::load).collect::<Result<Vec<_>>>()?;
        let unseen = stream.unseen().map(DatasetSplits::load).collect::<Result<Vec<_>>>()?;
        let mut names: Vec<&str> = seen.iter().chain(&unseen).map(|s| s.dataset()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!("dataset id {} appears twice in the stream", w[0])));
        }
        Ok(Self { seen, unseen })
    }

    pub fn seen_names(&self) -> Vec<String> {
        self.seen.iter().map(|s| s.dataset().to_string()).collect()
    }

    pub fn unseen_names(&self) -> Vec<String> {
        self.unseen.iter().map(|s| s.dataset().to_string()).collect()
    }
}

/// Training data for each seen dataset with globally disjoint labels.
pub fn load_training_tasks(seen: &[DatasetSplits], predictor: &dyn AttributePredictor) -> Result<Vec<TaskData>> {
    let mut offset = 0;
    seen.iter()
        .map(|s| {
            let t = load_task_data(s, offset, predictor)?;
            offset += s.train.identities().len();
            Ok(t)
        })
        .collect()
}

pub fn load_eval_data(splits: &DatasetSplits, predictor: &dyn AttributePredictor) -> Result<EvalData> {
    Ok(EvalData {
        dataset: splits.dataset().to_string(),
        query: load_eval_samples(splits, Split::Query, predictor)?,
        gallery: load_eval_samples(splits, Split::Gallery, predictor)?,
    })
}

/// Builds the initial model from the run seed and trains over `tasks`.
pub fn train(
    cfg: &RunConfig,
    tasks: &[TaskData],
    out_dir: Option<&Path>,
    after_task: &mut dyn FnMut(&ModelPair, &MemoryBuffer) -> Result<()>,
) -> Result<(ModelPair, StreamReport)> {
    cfg.validate()?;
    let model = ReidModel::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut pair = ModelPair::new(model);
    let report = run_stream(&mut pair, tasks, &cfg.train, cfg.seed, &cfg.hash(), out_dir, after_task)?;
    Ok((pair, report))
}

/// Evaluates `model` on every dataset and aggregates seen / unseen averages.
pub fn evaluate(
    model: &ReidModel,
    cfg: &RunConfig,
    seen: &[EvalData],
    unseen: &[EvalData],
) -> Result<EvalReport> {
    let mut cache = TextCache::new();
    let mut results = Vec::new();
    for d in seen.iter().chain(unseen) {
        results.push(evaluate_dataset(model, d, cfg.eval.feature, &mut cache)?);
    }
    let names = |v: &[EvalData]| v.iter().map(|d| d.dataset.clone()).collect::<Vec<_>>();
    aggregate_report(results, &names(seen), &names(unseen))
}
