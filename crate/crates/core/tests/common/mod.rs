//! Shared fixtures and brute-force reference implementations for the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use lreid_core::acn::DecoderConfig;
use lreid_core::attribute_text::{AttributePrediction, NUM_ATTRIBUTES};
use lreid_core::autograd::{Graph, Var};
use lreid_core::backbone::{BackboneConfig, ImageTensor, IMAGE_LEN};
use lreid_core::datakit::{make_synthetic_dataset, DatasetSplits, SplitConfig, SynthConfig};
use lreid_core::lifelong::{DataSample, PreparedSample};
use lreid_core::model::{ModelConfig, ReidModel};
use lreid_core::nn::{ParamId, ParamStore};
use lreid_core::tga::PfmConfig;
use lreid_core::Matrix;
use rand::Rng;

/// D = 16, one encoder layer, two decoder blocks, no dropout.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            embed_dim: 16,
            heads: 2,
            mlp_hidden: 32,
            patch_size: 32,
            image_depth: 1,
            text_depth: 1,
            ..Default::default()
        },
        pfm: PfmConfig { n_heads: 2, dropout_rate: 0.0, mlp_hidden: 16 },
        decoder: DecoderConfig { n_blocks: 2, n_heads: 2, mlp_hidden: 16, project_semantics: false },
        ..Default::default()
    }
}

pub fn random_image<R: Rng + ?Sized>(rng: &mut R) -> ImageTensor {
    ImageTensor::new((0..IMAGE_LEN).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// An identity template plus per-image noise, so images of one identity look alike.
pub fn identity_images<R: Rng + ?Sized>(n_ids: usize, per_id: usize, rng: &mut R) -> Vec<Vec<ImageTensor>> {
    (0..n_ids)
        .map(|_| {
            let base: Vec<f32> = (0..IMAGE_LEN).map(|_| rng.random::<f32>()).collect();
            (0..per_id)
                .map(|_| {
                    let px = base.iter().map(|v| (v + rng.random_range(-0.2f32..0.2)).clamp(0.0, 1.0)).collect();
                    ImageTensor::new(px).unwrap()
                })
                .collect()
        })
        .collect()
}

pub fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn random_flags<R: Rng + ?Sized>(rng: &mut R) -> [bool; NUM_ATTRIBUTES] {
    std::array::from_fn(|_| rng.random_bool(0.5))
}

pub fn flags_prediction(flags: [bool; NUM_ATTRIBUTES]) -> AttributePrediction {
    AttributePrediction::from_ordered(flags.map(|b| if b { 1.0 } else { 0.0 }))
}

pub fn sample(image: ImageTensor, identity: usize, camera: usize, dataset: &str, flags: [bool; NUM_ATTRIBUTES]) -> DataSample {
    DataSample {
        image: Arc::new(image),
        identity,
        camera,
        dataset: dataset.to_string(),
        attributes: flags_prediction(flags),
        source: None,
    }
}

/// A prepared batch with caption embeddings from `model` and random attribute flags.
pub fn prepared_batch<R: Rng + ?Sized>(
    model: &ReidModel,
    labels: &[usize],
    from_buffer: &[bool],
    rng: &mut R,
) -> Vec<PreparedSample> {
    labels
        .iter()
        .zip(from_buffer)
        .map(|(&label, &fb)| {
            let flags = random_flags(rng);
            let (av, caption) = model.caption(&flags_prediction(flags)).unwrap();
            PreparedSample {
                image: Arc::new(random_image(rng)),
                label,
                text: model.text_embedding(&caption).unwrap(),
                attributes: av.as_reals(),
                from_buffer: fb,
            }
        })
        .collect()
}

/// Adds Gaussian noise of standard deviation `std` to every trainable parameter.
pub fn perturb_trainable<R: Rng + ?Sized>(store: &mut ParamStore, std: f64, rng: &mut R) {
    for id in store.trainable_ids() {
        let (r, c) = store.value(id).shape();
        let noise = Matrix::randn(r, c, std, rng);
        let moved = store.value(id).zip_map(&noise, |a, b| a + b);
        store.set_value(id, moved);
    }
}

/// Small synthetic domains written under `dir`.
pub fn small_domains(dir: &Path, count: usize, n_identities: usize, images_per_identity: usize, seed: u64) -> Vec<DatasetSplits> {
    (0..count)
        .map(|i| {
            let cfg = SynthConfig {
                n_identities,
                images_per_identity,
                n_cameras: 2,
                ..SynthConfig::domain(i, seed)
            };
            make_synthetic_dataset(&cfg, &SplitConfig { seed, ..Default::default() }, &dir.join(format!("d{i}"))).unwrap()
        })
        .collect()
}

/// Largest relative error between backprop and central differences over `samples` random
/// scalar parameters. Relative error uses a floor of 1e-6 on the magnitude.
pub fn gradient_check<T, R: Rng + ?Sized>(
    state: &mut T,
    store: impl Fn(&mut T) -> &mut ParamStore,
    loss: impl Fn(&T, &mut Graph) -> Var,
    samples: usize,
    rng: &mut R,
) -> f64 {
    let eps = 1e-5;
    let mut g = Graph::new();
    let v = loss(state, &mut g);
    let grads: HashMap<ParamId, Matrix> = g.backward(v).param_grads(&g).into_iter().collect();
    let mut ids: Vec<ParamId> = grads.keys().copied().collect();
    ids.sort();
    assert!(!ids.is_empty(), "loss depends on no trainable parameter");
    let value = |state: &T| {
        let mut g = Graph::new();
        let v = loss(state, &mut g);
        g.value(v).get(0, 0)
    };
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let id = ids[rng.random_range(0..ids.len())];
        let idx = rng.random_range(0..grads[&id].len());
        let orig = store(state).value(id).data()[idx];
        store(state).value_mut(id).data_mut()[idx] = orig + eps;
        let up = value(state);
        store(state).value_mut(id).data_mut()[idx] = orig - eps;
        let down = value(state);
        store(state).value_mut(id).data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads[&id].data()[idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

pub mod oracle {
    //! Straight-from-the-definition reference implementations.

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += a[i] * b[i];
        }
        s
    }

    fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (norm(a) * norm(b))
    }

    pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]).powi(2);
        }
        s.sqrt()
    }

    pub fn orthogonal(rows: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                if i < j {
                    total += cosine(&rows[i], &rows[j]).abs();
                }
            }
        }
        total
    }

    pub fn ce(logits: &[f64], label: usize) -> f64 {
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        -(logits[label].exp() / z).ln()
    }

    /// Worst triplet over every (positive, negative) pair per anchor; an anchor with no other
    /// positive pairs with itself.
    pub fn triplet(rows: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
        let n = rows.len();
        let mut total = 0.0;
        for a in 0..n {
            let mut positives: Vec<usize> = (0..n).filter(|&p| p != a && labels[p] == labels[a]).collect();
            if positives.is_empty() {
                positives.push(a);
            }
            let mut worst = 0.0f64;
            for &p in &positives {
                for q in 0..n {
                    if labels[q] != labels[a] {
                        let v = euclidean(&rows[a], &rows[p]) - euclidean(&rows[a], &rows[q]) + margin;
                        worst = worst.max(v);
                    }
                }
            }
            total += worst;
        }
        total / n as f64
    }

    fn softmax(v: &[f64], tau: f64) -> Vec<f64> {
        let e: Vec<f64> = v.iter().map(|x| (x / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|x| x / z).collect()
    }

    pub fn kl(src: &[f64], tgt: &[f64], tau: f64) -> f64 {
        let p = softmax(src, tau);
        let q = softmax(tgt, tau);
        let mut s = 0.0;
        for i in 0..p.len() {
            s += p[i] * (p[i] / q[i]).ln();
        }
        s
    }

    /// Mean over relevant items of (relevant items ranked at or above it) / (its rank).
    pub fn average_precision(flags: &[bool]) -> f64 {
        let positions: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
        let mut s = 0.0;
        for &p in &positions {
            let above = positions.iter().filter(|&&q| q <= p).count();
            s += above as f64 / (p + 1) as f64;
        }
        s / positions.len() as f64
    }

    /// First index of the largest cosine for each row of `a`.
    pub fn match_indices(a: &[Vec<f64>], g: &[Vec<f64>]) -> Vec<usize> {
        a.iter()
            .map(|row| {
                let sims: Vec<f64> = g.iter().map(|h| cosine(row, h)).collect();
                let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                sims.iter().position(|&s| s == best).unwrap()
            })
            .collect()
    }

    pub struct Evaluation {
        pub map: f64,
        pub cmc: Vec<f64>,
        pub evaluated: usize,
        pub skipped: usize,
    }

    /// `(feature, identity, camera)` entries; features need not be normalised.
    pub fn evaluate(queries: &[(Vec<f64>, usize, usize)], gallery: &[(Vec<f64>, usize, usize)]) -> Evaluation {
        let mut ap_sum = 0.0;
        let mut first = Vec::new();
        let mut skipped = 0;
        for (qf, qid, qcam) in queries {
            let valid: Vec<usize> = (0..gallery.len()).filter(|&i| !(gallery[i].1 == *qid && gallery[i].2 == *qcam)).collect();
            let score = |i: usize| cosine(qf, &gallery[i].0);
            // 1-based rank: items scoring higher, or equal with a smaller index, come first
            let rank = |i: usize| {
                1 + valid.iter().filter(|&&j| score(j) > score(i) || (score(j) == score(i) && j < i)).count()
            };
            let relevant: Vec<usize> = valid.iter().copied().filter(|&i| gallery[i].1 == *qid).collect();
            if relevant.is_empty() {
                skipped += 1;
                continue;
            }
            let ranks: Vec<usize> = relevant.iter().map(|&i| rank(i)).collect();
            let mut ap = 0.0;
            for &r in &ranks {
                ap += ranks.iter().filter(|&&s| s <= r).count() as f64 / r as f64;
            }
            ap_sum += ap / ranks.len() as f64;
            first.push(*ranks.iter().min().unwrap());
        }
        let evaluated = first.len();
        let cmc = (1..=gallery.len())
            .map(|k| first.iter().filter(|&&r| r <= k).count() as f64 / evaluated.max(1) as f64)
            .collect();
        Evaluation { map: ap_sum / evaluated.max(1) as f64, cmc, evaluated, skipped }
    }
}
