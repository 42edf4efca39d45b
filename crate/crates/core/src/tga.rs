//! Text-guided aggregation: the parallel fusion module and the current-task losses
//! (orthogonality across views, identity cross-entropy, batch-hard triplet).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, Graph, Var};
use crate::backbone::{ImageEmbeddingVars, ImageEmbeddings, TextEmbedding};
use crate::error::{Error, Result};
use crate::nn::{repeat_index, LayerNorm, Mlp, MultiHeadAttention, ParamStore};
use crate::tensor::{cosine, l2_norm, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfmConfig {
    pub n_heads: usize,
    pub dropout_rate: f64,
    pub mlp_hidden: usize,
}

impl Default for PfmConfig {
    fn default() -> Self {
        Self { n_heads: 4, dropout_rate: 0.1, mlp_hidden: 128 }
    }
}

impl PfmConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_heads == 0 || dim % self.n_heads != 0 {
            return Err(Error::Config { key: "pfm.n_heads".into(), msg: format!("must divide embed_dim {dim}") });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config { key: "pfm.dropout_rate".into(), msg: "must lie in [0, 1)".into() });
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config { key: "pfm.mlp_hidden".into(), msg: "must be positive".into() });
        }
        Ok(())
    }
}

/// Parallel fusion module.
///
/// * text branch: `T = LN(d* + drop(CrossAttn(q = d*, kv = [cls ‖ patches])))`, one row per image
/// * image branch: `I = LN(cls + drop(CrossAttn(q = cls, kv = d*)))`, `N` rows per image
/// * fusion: `G = I + MLP([I ‖ T])` with `T` broadcast to every view
#[derive(Clone, Debug)]
pub struct Pfm {
    pub config: PfmConfig,
    pub text_attn: MultiHeadAttention,
    pub text_norm: LayerNorm,
    pub image_attn: MultiHeadAttention,
    pub image_norm: LayerNorm,
    pub fuse: Mlp,
}

impl Pfm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: PfmConfig, dim: usize, rng: &mut R) -> Result<Self> {
        config.validate(dim)?;
        Ok(Self {
            text_attn: MultiHeadAttention::new(store, "pfm.text_attn", dim, config.n_heads, rng),
            text_norm: LayerNorm::new(store, "pfm.text_norm", dim),
            image_attn: MultiHeadAttention::new(store, "pfm.image_attn", dim, config.n_heads, rng),
            image_norm: LayerNorm::new(store, "pfm.image_norm", dim),
            fuse: Mlp::new(store, "pfm.fuse", 2 * dim, config.mlp_hidden, dim, rng),
            config,
        })
    }

    /// `text` is `B × D`; returns `G` as `(B·N) × D`. Dropout is active only when `rng` is given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        text: Var,
        image: &ImageEmbeddingVars,
        n_views: usize,
        mut rng: Option<&mut R>,
    ) -> Var {
        let b = image.batch;
        let seq_len = g.shape(image.sequence).0 / b;
        let rate = self.config.dropout_rate;

        let t = self.text_attn.forward(g, store, text, image.sequence, 1, seq_len);
        let t = g.dropout(t, rate, rng.as_deref_mut());
        let t = g.add(text, t);
        let t = self.text_norm.forward(g, store, t);

        let i = self.image_attn.forward(g, store, image.class, text, n_views, 1);
        let i = g.dropout(i, rate, rng.as_deref_mut());
        let i = g.add(image.class, i);
        let i = self.image_norm.forward(g, store, i);

        let t = g.gather_rows(t, repeat_index(b, n_views));
        let cat = g.concat_cols(&[i, t]);
        let m = self.fuse.forward(g, store, cat);
        g.add(i, m)
    }

    /// Inference-mode fusion of one image's embeddings with its text embedding; returns `N × D`.
    pub fn fuse_single(&self, store: &ParamStore, text: &TextEmbedding, embs: &ImageEmbeddings) -> Result<Matrix> {
        let d = embs.class_embs.cols();
        if text.vec.len() != d || embs.patch_embs.cols() != d {
            return Err(Error::invalid(format!(
                "dimension mismatch: text {} vs class {} vs patch {}",
                text.vec.len(),
                d,
                embs.patch_embs.cols()
            )));
        }
        let n = embs.class_embs.rows();
        let mut g = Graph::inference();
        let tv = g.constant(Matrix::row_vector(&text.vec));
        let class = g.constant(embs.class_embs.clone());
        let sequence = g.constant(Matrix::vstack(&[&embs.class_embs, &embs.patch_embs]));
        let vars = ImageEmbeddingVars { class, sequence, batch: 1 };
        let out = self.forward::<rand_chacha::ChaCha8Rng>(&mut g, store, tv, &vars, n, None);
        Ok(g.value(out).clone())
    }
}

/// `Σ_{i<j} |cos(G_i, G_j)|` over the rows of one sample's `N × D` matrix.
pub fn orthogonal_loss(reps: &Matrix) -> Result<f64> {
    let n = reps.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine(reps.row(i), reps.row(j))
                .ok_or_else(|| Error::Degenerate(format!("row {} has zero norm", if l2_norm(reps.row(i)) == 0.0 { i } else { j })))?;
            total += c.abs();
        }
    }
    Ok(total)
}

/// Batch mean of [`orthogonal_loss`] on stacked `(B·N) × D` representations.
pub fn orthogonal_loss_var(g: &mut Graph, reps: Var, n_views: usize) -> Var {
    let rows = g.shape(reps).0;
    let b = rows / n_views;
    let unit = g.row_normalize(reps);
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for s in 0..b {
        for i in 0..n_views {
            for j in i + 1..n_views {
                left.push(s * n_views + i);
                right.push(s * n_views + j);
            }
        }
    }
    let l = g.gather_rows(unit, left);
    let r = g.gather_rows(unit, right);
    let prod = g.mul(l, r);
    let cos = g.sum_cols(prod);
    let abs = g.abs(cos);
    let total = g.sum(abs);
    g.scale(total, 1.0 / b as f64)
}

/// `-log softmax(logits)[label]`
pub fn ce_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits must be finite"));
    }
    let ls = log_softmax_rows(&Matrix::row_vector(logits));
    Ok(-ls.get(0, label))
}

/// Mean per-sample cross-entropy over a `B × K` logit matrix.
pub fn ce_loss_batch(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::invalid("one label per logit row required"));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        total += ce_loss(logits.row(r), y)?;
    }
    Ok(total / labels.len().max(1) as f64)
}

pub fn ce_loss_var(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, k) = g.shape(logits);
    if labels.len() != rows {
        return Err(Error::invalid("one label per logit row required"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
    }
    let ls = g.log_softmax_rows(logits);
    let picked = g.pick(ls, labels.to_vec());
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletDistance {
    #[default]
    Euclidean,
    /// `1 - cos(a, b)`
    Cosine,
}

fn pair_distance(a: &[f64], b: &[f64], kind: TripletDistance) -> f64 {
    match kind {
        TripletDistance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        TripletDistance::Cosine => 1.0 - cosine(a, b).unwrap_or(0.0),
    }
}

fn validate_triplet_batch(rows: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::InvalidBatch(format!("{} labels for {rows} samples", labels.len())));
    }
    let first = labels.first().copied();
    if labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::InvalidBatch("batch holds a single identity, no negatives exist".into()));
    }
    let has_pair = labels.iter().enumerate().any(|(i, a)| labels[i + 1..].contains(a));
    if !has_pair {
        return Err(Error::InvalidBatch("no identity has two samples, no positives exist".into()));
    }
    Ok(())
}

/// Hardest positive and negative per anchor. A sample without another positive is its own positive.
pub fn batch_hard_selection(reps: &Matrix, labels: &[usize], kind: TripletDistance) -> Result<Vec<(usize, usize)>> {
    validate_triplet_batch(reps.rows(), labels)?;
    let n = reps.rows();
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let (mut pos, mut d_pos) = (a, f64::NEG_INFINITY);
        let (mut neg, mut d_neg) = (usize::MAX, f64::INFINITY);
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = pair_distance(reps.row(a), reps.row(j), kind);
            if labels[j] == labels[a] {
                if d > d_pos {
                    d_pos = d;
                    pos = j;
                }
            } else if d < d_neg {
                d_neg = d;
                neg = j;
            }
        }
        out.push((pos, neg));
    }
    Ok(out)
}

/// Batch-hard triplet loss: mean over anchors of `max(d_p - d_n + margin, 0)`.
pub fn triplet_loss(reps: &Matrix, labels: &[usize], margin: f64) -> Result<f64> {
    triplet_loss_with(reps, labels, margin, TripletDistance::Euclidean)
}

pub fn triplet_loss_with(reps: &Matrix, labels: &[usize], margin: f64, kind: TripletDistance) -> Result<f64> {
    let sel = batch_hard_selection(reps, labels, kind)?;
    let total: f64 = sel
        .iter()
        .enumerate()
        .map(|(a, &(p, n))| {
            let dp = if p == a { 0.0 } else { pair_distance(reps.row(a), reps.row(p), kind) };
            let dn = pair_distance(reps.row(a), reps.row(n), kind);
            (dp - dn + margin).max(0.0)
        })
        .sum();
    Ok(total / reps.rows() as f64)
}

/// Differentiable batch-hard triplet loss; the hard-example selection is made on current values.
pub fn triplet_loss_var(g: &mut Graph, reps: Var, labels: &[usize], margin: f64, kind: TripletDistance) -> Result<Var> {
    let sel = batch_hard_selection(g.value(reps), labels, kind)?;
    let n = sel.len();
    let x = match kind {
        TripletDistance::Euclidean => reps,
        TripletDistance::Cosine => g.row_normalize(reps),
    };
    let anchors = g.gather_rows(x, (0..n).collect());
    let pos = g.gather_rows(x, sel.iter().map(|s| s.0).collect());
    let neg = g.gather_rows(x, sel.iter().map(|s| s.1).collect());
    let dpv = g.sub(anchors, pos);
    let dnv = g.sub(anchors, neg);
    let (dp, dn) = match kind {
        TripletDistance::Euclidean => (g.row_l2(dpv), g.row_l2(dnv)),
        TripletDistance::Cosine => {
            // for unit vectors 1 - cos = |a - b|² / 2
            let sp = g.mul(dpv, dpv);
            let sp = g.sum_cols(sp);
            let sn = g.mul(dnv, dnv);
            let sn = g.sum_cols(sn);
            (g.scale(sp, 0.5), g.scale(sn, 0.5))
        }
    };
    let diff = g.sub(dp, dn);
    let hinge = g.add_scalar(diff, margin);
    let hinge = g.relu(hinge);
    Ok(g.mean(hinge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_loss_examples() {
        let eye = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]);
        assert_eq!(orthogonal_loss(&eye).unwrap(), 0.0);
        let same = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert!((orthogonal_loss(&same).unwrap() - 3.0).abs() < 1e-12);
        let zero = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]);
        assert!(matches!(orthogonal_loss(&zero), Err(Error::Degenerate(_))));
    }

    #[test]
    fn orthogonal_var_matches_plain() {
        let m = Matrix::randn(6, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new();
        let v = g.constant(m.clone());
        let l = orthogonal_loss_var(&mut g, v, 3);
        let top = Matrix::from_rows(&m.to_rows()[..3]);
        let bottom = Matrix::from_rows(&m.to_rows()[3..]);
        let expected = (orthogonal_loss(&top).unwrap() + orthogonal_loss(&bottom).unwrap()) / 2.0;
        assert!((g.value(l).get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn ce_examples() {
        assert!((ce_loss(&[0.0, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(ce_loss(&[50.0, 0.0, 0.0], 0).unwrap() < 1e-20);
        let e = std::f64::consts::E;
        assert!((ce_loss(&[1.0, 0.0, 0.0], 0).unwrap() + (e / (e + 2.0)).ln()).abs() < 1e-12);
        assert!((ce_loss(&[1.0, 0.0, 0.0], 0).unwrap() - 0.5514).abs() < 1e-4);
        assert!(ce_loss(&[1.0, 0.0], 2).is_err());
        assert!(ce_loss(&[f64::NAN, 0.0], 0).is_err());
    }

    #[test]
    fn triplet_margin_cases() {
        // anchor 0 with positive at 0.2 and negative at 0.9
        let reps = Matrix::from_rows(&[vec![0.0], vec![0.2], vec![0.9], vec![1.1]]);
        let labels = [0, 0, 1, 1];
        let sel = batch_hard_selection(&reps, &labels, TripletDistance::Euclidean).unwrap();
        assert_eq!(sel[0], (1, 2));
        // contributions: a0: 0.2-0.9+0.3<0 ; a1: 0.2-0.7+0.3<0 ; a2: 0.2-0.7+0.3<0 ; a3: 0.2-0.9+0.3<0
        assert_eq!(triplet_loss(&reps, &labels, 0.3).unwrap(), 0.0);
        // equal distances leave the margin
        let reps = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![-1.0], vec![-1.0]]);
        let labels = [0, 0, 1, 1];
        let sel = batch_hard_selection(&reps, &labels, TripletDistance::Euclidean).unwrap();
        assert_eq!(sel[0], (1, 2));
        let dp = 1.0;
        let dn = 1.0;
        assert_eq!(dp - dn + 0.3, 0.3);
        assert!(triplet_loss(&reps, &labels, 0.3).unwrap() > 0.0);
    }

    #[test]
    fn triplet_rejects_degenerate_batches() {
        let reps = Matrix::zeros(3, 2);
        assert!(matches!(triplet_loss(&reps, &[1, 1, 1], 0.3), Err(Error::InvalidBatch(_))));
        assert!(matches!(triplet_loss(&reps, &[0, 1, 2], 0.3), Err(Error::InvalidBatch(_))));
    }

    #[test]
    fn triplet_var_matches_plain() {
        let m = Matrix::randn(8, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        for kind in [TripletDistance::Euclidean, TripletDistance::Cosine] {
            let mut g = Graph::new();
            let v = g.constant(m.clone());
            let l = triplet_loss_var(&mut g, v, &labels, 0.3, kind).unwrap();
            let expected = triplet_loss_with(&m, &labels, 0.3, kind).unwrap();
            assert!((g.value(l).get(0, 0) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_var_matches_plain() {
        let m = Matrix::randn(4, 6, 2.0, &mut ChaCha8Rng::seed_from_u64(2));
        let labels = [0, 5, 2, 2];
        let mut g = Graph::new();
        let v = g.constant(m.clone());
        let l = ce_loss_var(&mut g, v, &labels).unwrap();
        assert!((g.value(l).get(0, 0) - ce_loss_batch(&m, &labels).unwrap()).abs() < 1e-12);
    }
}
