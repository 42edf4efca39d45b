//! Retrieval evaluation: features, cross-camera ranking, AP/mAP, CMC, seen/unseen aggregation,
//! per-checkpoint curves and feature dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::lifelong::{prepare_samples, DataSample, TextCache};
use crate::model::{BatchInput, ReidModel};
use crate::tensor::{dot, l2_norm, Matrix};

/// Images per inference batch during extraction.
const EXTRACT_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Mean of the global representations.
    #[default]
    Global,
    /// Global mean concatenated with the attribute-wise mean.
    GlobalAndAttribute,
}

/// Unit-length retrieval descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalFeature {
    vec: Vec<f64>,
}

impl RetrievalFeature {
    /// L2-normalises `v`.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = l2_norm(&v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate("feature has zero or non-finite norm".into()));
        }
        Ok(Self { vec: v.into_iter().map(|x| x / n).collect() })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vec
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vec
    }
}

/// Feature of one image from its stacked `N × D` representations.
pub fn feature_from_reps(global: &Matrix, attribute: Option<&Matrix>, mode: FeatureMode) -> Result<RetrievalFeature> {
    let mut v = global.segment_mean(global.rows()).into_vec();
    if mode == FeatureMode::GlobalAndAttribute {
        let a = attribute.ok_or_else(|| Error::invalid("attribute-wise features requested from a model without them"))?;
        v.extend(a.segment_mean(a.rows()).into_vec());
    }
    RetrievalFeature::new(v)
}

/// Extracts retrieval features in deterministic inference mode.
pub fn extract_features(
    model: &ReidModel,
    samples: &[DataSample],
    mode: FeatureMode,
    cache: &mut TextCache,
) -> Result<Vec<RetrievalFeature>> {
    let prepared = prepare_samples(model, samples, false, cache)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in prepared.chunks(EXTRACT_BATCH) {
        let input = BatchInput {
            images: chunk.iter().map(|s| s.image.as_ref()).collect(),
            text: Matrix::from_rows(&chunk.iter().map(|s| s.text.clone()).collect::<Vec<_>>()),
            attributes: Matrix::from_rows(&chunk.iter().map(|s| s.attributes.to_vec()).collect::<Vec<_>>()),
        };
        let mut g = crate::autograd::Graph::inference();
        let fo = model.forward::<rand_chacha::ChaCha8Rng>(&mut g, &input, None)?;
        let gm = g.value(fo.global_mean);
        let am = fo.attribute_mean.map(|v| g.value(v).clone());
        for r in 0..chunk.len() {
            let mut v = gm.row(r).to_vec();
            if mode == FeatureMode::GlobalAndAttribute {
                let a = am.as_ref().ok_or_else(|| Error::invalid("attribute-wise features requested from a model without them"))?;
                v.extend_from_slice(a.row(r));
            }
            out.push(RetrievalFeature::new(v)?);
        }
    }
    Ok(out)
}

/// A feature with the labels needed for cross-camera evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalEntry {
    pub feature: RetrievalFeature,
    pub identity: usize,
    pub camera: usize,
}

/// Gallery indices by descending cosine similarity (ties by index), after dropping entries that
/// share both identity and camera with the query.
pub fn rank_gallery(query: &EvalEntry, gallery: &[EvalEntry]) -> Result<Vec<usize>> {
    let mut scored: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .filter(|(_, g)| !(g.identity == query.identity && g.camera == query.camera))
        .map(|(i, g)| (i, dot(query.feature.as_slice(), g.feature.as_slice())))
        .collect();
    if scored.is_empty() {
        return Err(Error::NoValidGallery);
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// `(1/R) Σ_{relevant r} precision@r`; `None` when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetResult {
    pub dataset: String,
    pub map: f64,
    pub rank1: f64,
    /// `cmc[k]`: fraction of evaluated queries with a match within the top `k + 1`.
    pub cmc: Vec<f64>,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
}

/// mAP and CMC over precomputed features.
pub fn evaluate_features(dataset: &str, queries: &[EvalEntry], gallery: &[EvalEntry]) -> Result<DatasetResult> {
    let mut ap_sum = 0.0;
    let mut first_hits = vec![0usize; gallery.len()];
    let (mut evaluated, mut skipped) = (0, 0);
    for q in queries {
        let ranked = match rank_gallery(q, gallery) {
            Ok(r) => r,
            Err(Error::NoValidGallery) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let flags: Vec<bool> = ranked.iter().map(|&i| gallery[i].identity == q.identity).collect();
        match average_precision(&flags) {
            Some(ap) => {
                ap_sum += ap;
                evaluated += 1;
                let first = flags.iter().position(|&f| f).expect("a relevant entry exists");
                first_hits[first] += 1;
            }
            None => skipped += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::invalid(format!("no query of {dataset} has a cross-camera match")));
    }
    let mut cmc = Vec::with_capacity(gallery.len());
    let mut cum = 0;
    for h in first_hits {
        cum += h;
        cmc.push(cum as f64 / evaluated as f64);
    }
    Ok(DatasetResult {
        dataset: dataset.to_string(),
        map: ap_sum / evaluated as f64,
        rank1: cmc[0],
        cmc,
        evaluated_queries: evaluated,
        skipped_queries: skipped,
    })
}

/// Query and gallery samples of one dataset, with raw identity labels.
#[derive(Clone, Debug)]
pub struct EvalData {
    pub dataset: String,
    pub query: Vec<DataSample>,
    pub gallery: Vec<DataSample>,
}

fn entries(model: &ReidModel, samples: &[DataSample], mode: FeatureMode, cache: &mut TextCache) -> Result<Vec<EvalEntry>> {
    let feats = extract_features(model, samples, mode, cache)?;
    Ok(feats
        .into_iter()
        .zip(samples)
        .map(|(feature, s)| EvalEntry { feature, identity: s.identity, camera: s.camera })
        .collect())
}

pub fn evaluate_dataset(model: &ReidModel, data: &EvalData, mode: FeatureMode, cache: &mut TextCache) -> Result<DatasetResult> {
    let q = entries(model, &data.query, mode, cache)?;
    let g = entries(model, &data.gallery, mode, cache)?;
    evaluate_features(&data.dataset, &q, &g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub map: f64,
    pub rank1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<DatasetResult>,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub seen_avg: Option<Averages>,
    pub unseen_avg: Option<Averages>,
}

fn mean_of(results: &[DatasetResult], names: &[String]) -> Result<Option<Averages>> {
    if names.is_empty() {
        return Ok(None);
    }
    let mut acc = Averages { map: 0.0, rank1: 0.0 };
    for n in names {
        let r = results
            .iter()
            .find(|r| &r.dataset == n)
            .ok_or_else(|| Error::invalid(format!("no result for dataset {n}")))?;
        acc.map += r.map;
        acc.rank1 += r.rank1;
    }
    let k = names.len() as f64;
    Ok(Some(Averages { map: acc.map / k, rank1: acc.rank1 / k }))
}

pub fn aggregate_report(results: Vec<DatasetResult>, seen: &[String], unseen: &[String]) -> Result<EvalReport> {
    let seen_avg = mean_of(&results, seen)?;
    let unseen_avg = mean_of(&results, unseen)?;
    Ok(EvalReport { datasets: results, seen: seen.to_vec(), unseen: unseen.to_vec(), seen_avg, unseen_avg })
}

impl EvalReport {
    /// Key-value summary followed by a tab-separated per-dataset table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let avg = |a: &Option<Averages>| a.map_or("n/a\tn/a".to_string(), |a| format!("{:.6}\t{:.6}", a.map, a.rank1));
        let _ = writeln!(s, "seen_datasets = {}", self.seen.join(","));
        let _ = writeln!(s, "unseen_datasets = {}", self.unseen.join(","));
        if let Some(a) = self.seen_avg {
            let _ = writeln!(s, "seen_avg_map = {:.6}\nseen_avg_rank1 = {:.6}", a.map, a.rank1);
        }
        if let Some(a) = self.unseen_avg {
            let _ = writeln!(s, "unseen_avg_map = {:.6}\nunseen_avg_rank1 = {:.6}", a.map, a.rank1);
        }
        let _ = writeln!(s, "\ndataset\tgroup\tmap\trank1\tqueries\tskipped");
        for r in &self.datasets {
            let group = if self.seen.contains(&r.dataset) {
                "seen"
            } else if self.unseen.contains(&r.dataset) {
                "unseen"
            } else {
                "other"
            };
            let _ = writeln!(
                s,
                "{}\t{group}\t{:.6}\t{:.6}\t{}\t{}",
                r.dataset, r.map, r.rank1, r.evaluated_queries, r.skipped_queries
            );
        }
        let _ = writeln!(s, "seen-avg\tseen\t{}\t-\t-", avg(&self.seen_avg));
        let _ = writeln!(s, "unseen-avg\tunseen\t{}\t-\t-", avg(&self.unseen_avg));
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub map: f64,
    pub rank1: f64,
}

/// Evaluates `probe` under every checkpoint in order.
pub fn forgetting_curve(checkpoints: &[PathBuf], probe: &EvalData, mode: FeatureMode) -> Result<Vec<CurvePoint>> {
    generalization_curve(checkpoints, std::slice::from_ref(probe), mode)
}

/// Mean mAP / rank-1 over `probes` under every checkpoint in order.
pub fn generalization_curve(checkpoints: &[PathBuf], probes: &[EvalData], mode: FeatureMode) -> Result<Vec<CurvePoint>> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("no checkpoints to evaluate"));
    }
    if probes.is_empty() {
        return Err(Error::invalid("no probe datasets"));
    }
    let mut out = Vec::with_capacity(checkpoints.len());
    for (i, path) in checkpoints.iter().enumerate() {
        let (model, meta) = checkpoint::load(path).map_err(|e| match e {
            Error::Io { source, .. } => Error::Io { path: path.clone(), source: std::io::Error::new(source.kind(), format!("checkpoint of step {}: {source}", i + 1)) },
            other => other,
        })?;
        let mut cache = TextCache::new();
        let (mut map, mut rank1) = (0.0, 0.0);
        for p in probes {
            let r = evaluate_dataset(&model, p, mode, &mut cache)?;
            map += r.map;
            rank1 += r.rank1;
        }
        let k = probes.len() as f64;
        out.push(CurvePoint { step: meta.task, map: map / k, rank1: rank1 / k });
    }
    Ok(out)
}

pub fn curve_table(points: &[CurvePoint]) -> String {
    let mut s = String::from("step\tmap\trank1\n");
    for p in points {
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}", p.step, p.map, p.rank1);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub dataset: String,
    pub identity: usize,
    pub camera: usize,
    pub vec: Vec<f64>,
}

/// Writes one `dataset\tidentity\tcamera\tf1,...,fD` line per sample; returns the record count.
pub fn dump_features(
    model: &ReidModel,
    samples: &[DataSample],
    mode: FeatureMode,
    path: &Path,
    cache: &mut TextCache,
) -> Result<usize> {
    let feats = extract_features(model, samples, mode, cache)?;
    let mut s = String::new();
    for (f, smp) in feats.iter().zip(samples) {
        let vals: Vec<String> = f.as_slice().iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{}\t{}\t{}\t{}", smp.dataset, smp.identity, smp.camera, vals.join(","));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))?;
    Ok(feats.len())
}

pub fn read_feature_dump(path: &Path) -> Result<Vec<FeatureRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let perr = |msg: &str| Error::Parse { path: origin.clone(), line: i + 1, msg: msg.to_string() };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(perr("expected 4 tab-separated fields"));
            }
            Ok(FeatureRecord {
                dataset: f[0].to_string(),
                identity: f[1].parse().map_err(|_| perr("bad identity"))?,
                camera: f[2].parse().map_err(|_| perr("bad camera"))?,
                vec: f[3].split(',').map(|v| v.parse().map_err(|_| perr("bad float"))).collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(v: &[f64], id: usize, cam: usize) -> EvalEntry {
        EvalEntry { feature: RetrievalFeature::new(v.to_vec()).unwrap(), identity: id, camera: cam }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true]), Some(1.0));
        assert!((average_precision(&[true, false, true]).unwrap() - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert!((average_precision(&[false, false, true]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn ranking_examples() {
        let q = entry(&[0.0, 1.0], 0, 0);
        let gallery = [entry(&[1.0, 0.0], 1, 1), entry(&[0.0, 1.0], 2, 1)];
        assert_eq!(rank_gallery(&q, &gallery).unwrap(), vec![1, 0]);
        let same = [entry(&[0.0, 1.0], 0, 0)];
        assert!(matches!(rank_gallery(&q, &same), Err(Error::NoValidGallery)));
    }

    #[test]
    fn single_query_without_cross_camera_match_is_skipped() {
        let q = [entry(&[1.0, 0.0], 0, 0), entry(&[0.0, 1.0], 1, 0)];
        let g = [entry(&[1.0, 0.1], 0, 1), entry(&[0.3, 1.0], 2, 1)];
        let r = evaluate_features("d", &q, &g).unwrap();
        assert_eq!(r.skipped_queries, 1);
        assert_eq!(r.evaluated_queries, 1);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn perfect_retrieval() {
        let q: Vec<EvalEntry> = (0..4).map(|i| entry(&[(i + 1) as f64, (i * i) as f64, 1.0], i, 0)).collect();
        let g: Vec<EvalEntry> = q.iter().rev().map(|e| EvalEntry { camera: 1, ..e.clone() }).collect();
        let r = evaluate_features("d", &q, &g).unwrap();
        assert_eq!((r.map, r.rank1), (1.0, 1.0));
    }

    #[test]
    fn report_averages() {
        let mk = |name: &str, map: f64| DatasetResult {
            dataset: name.into(),
            map,
            rank1: map,
            cmc: vec![map],
            evaluated_queries: 1,
            skipped_queries: 0,
        };
        let rep = aggregate_report(vec![mk("a", 0.4), mk("b", 0.6), mk("c", 0.1)], &["a".into(), "b".into()], &["c".into()]).unwrap();
        assert!((rep.seen_avg.unwrap().map - 0.5).abs() < 1e-12);
        assert_eq!(rep.unseen_avg.unwrap().map, 0.1);
        assert!(aggregate_report(vec![mk("a", 0.4)], &["z".into()], &[]).is_err());
        assert!(rep.to_text().contains("seen_avg_map = 0.500000"));
    }
}
