//! Attribute compensation network: learnable attribute semantics query a decoder over
//! attribute-modulated global representations; the resulting attribute features are matched
//! to their closest global view and summed with it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attribute_text::{AttributeVector, NUM_ATTRIBUTES};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{repeat_index, tile_index, DecoderBlock, Linear, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    /// Feed the learnable semantics through the attribute projection instead of the binary
    /// attribute vector.
    pub project_semantics: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { n_blocks: 6, n_heads: 4, mlp_hidden: 128, project_semantics: false }
    }
}

impl DecoderConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config { key: "decoder.n_blocks".into(), msg: "must be positive".into() });
        }
        if self.n_heads == 0 || dim % self.n_heads != 0 {
            return Err(Error::Config { key: "decoder.n_heads".into(), msg: format!("must divide embed_dim {dim}") });
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config { key: "decoder.mlp_hidden".into(), msg: "must be positive".into() });
        }
        Ok(())
    }
}

/// Attribute-wise representations of one sample: `AG_i = A_i + G[k_i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeWiseReps {
    pub ag: Matrix,
    pub match_indices: Vec<usize>,
}

/// Output of the network for a batch, with tape handles into the graph.
#[derive(Clone, Debug)]
pub struct AcnOutput {
    /// `(B·N) × D` attribute features.
    pub features: Var,
    /// `(B·N) × D` attribute-wise representations.
    pub reps: Var,
    /// Per stacked row, the index of the matched global view within its sample.
    pub match_indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Acn {
    pub config: DecoderConfig,
    pub semantics: ParamId,
    pub attr_proj: Linear,
    pub blocks: Vec<DecoderBlock>,
}

impl Acn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: DecoderConfig,
        n_views: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(dim)?;
        let semantics = store.add("acn.semantics", Matrix::randn(n_views, dim, 1.0, rng));
        let proj_in = if config.project_semantics { dim } else { NUM_ATTRIBUTES };
        let attr_proj = Linear::new(store, "acn.attr_proj", proj_in, dim, rng);
        let blocks = (0..config.n_blocks)
            .map(|i| DecoderBlock::new(store, &format!("acn.block{i}"), dim, config.n_heads, config.mlp_hidden, rng))
            .collect();
        Ok(Self { config, semantics, attr_proj, blocks })
    }

    /// `f_AT[i] = proj(attributes) ⊙ G_i`, stacked over the batch.
    pub fn attribute_modulation(&self, g: &mut Graph, store: &ParamStore, attrs: Var, global: Var, n: usize) -> Var {
        let b = g.shape(global).0 / n;
        let gate = if self.config.project_semantics {
            let s = g.param(store, self.semantics);
            let p = self.attr_proj.forward(g, store, s);
            g.gather_rows(p, tile_index(n, b))
        } else {
            let p = self.attr_proj.forward(g, store, attrs);
            g.gather_rows(p, repeat_index(b, n))
        };
        g.mul(gate, global)
    }

    /// Runs the decoder stack with the semantics as queries and `memory` as keys/values.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, memory: Var, n: usize) -> Var {
        let b = g.shape(memory).0 / n;
        let s = g.param(store, self.semantics);
        let mut x = g.gather_rows(s, tile_index(n, b));
        for block in &self.blocks {
            x = block.forward(g, store, x, memory, n, n);
        }
        x
    }

    /// `attrs` is `B × 12` (attribute flags as reals), `global` is `(B·N) × D`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, attrs: Var, global: Var, n: usize) -> Result<AcnOutput> {
        let (rows, _) = g.shape(global);
        if n == 0 || rows % n != 0 {
            return Err(Error::invalid(format!("{rows} global rows do not split into views of {n}")));
        }
        let f_at = self.attribute_modulation(g, store, attrs, global, n);
        let features = self.decode(g, store, f_at, n);
        let a = g.value(features).clone();
        let gv = g.value(global).clone();
        let mut match_indices = Vec::with_capacity(rows);
        let mut gather = Vec::with_capacity(rows);
        for s in 0..rows / n {
            let block = |m: &Matrix| Matrix::from_rows(&m.to_rows()[s * n..(s + 1) * n]);
            let k = match_attributes(&block(&a), &block(&gv))?;
            gather.extend(k.iter().map(|&j| s * n + j));
            match_indices.extend(k);
        }
        let matched = g.gather_rows(global, gather);
        let reps = g.add(features, matched);
        Ok(AcnOutput { features, reps, match_indices })
    }

    /// Inference on a single sample.
    pub fn attribute_reps(&self, store: &ParamStore, av: &AttributeVector, global: &Matrix) -> Result<AttributeWiseReps> {
        let mut g = Graph::inference();
        let attrs = g.constant(Matrix::row_vector(&av.as_reals()));
        let gv = g.constant(global.clone());
        let out = self.forward(&mut g, store, attrs, gv, global.rows())?;
        Ok(AttributeWiseReps { ag: g.value(out.reps).clone(), match_indices: out.match_indices })
    }
}

/// Broadcast product of a projected attribute vector with every row of `global`.
pub fn build_fat(projected: &[f64], global: &Matrix) -> Result<Matrix> {
    if projected.len() != global.cols() {
        return Err(Error::invalid(format!("projection width {} vs {}", projected.len(), global.cols())));
    }
    let mut out = global.clone();
    for r in 0..out.rows() {
        for (v, p) in out.row_mut(r).iter_mut().zip(projected) {
            *v *= p;
        }
    }
    Ok(out)
}

/// `k_i = argmax_j cos(A_i, G_j)`, lowest index on ties.
pub fn match_attributes(features: &Matrix, global: &Matrix) -> Result<Vec<usize>> {
    if features.cols() != global.cols() || global.rows() == 0 {
        return Err(Error::invalid("attribute features and global reps must share width and be non-empty"));
    }
    let unit = |m: &Matrix, what: &str| -> Result<Vec<Vec<f64>>> {
        (0..m.rows())
            .map(|r| {
                let n = crate::tensor::l2_norm(m.row(r));
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::Degenerate(format!("{what} row {r} has zero norm")));
                }
                Ok(m.row(r).iter().map(|v| v / n).collect())
            })
            .collect()
    };
    let a = unit(features, "attribute feature")?;
    let gl = unit(global, "global representation")?;
    Ok(a
        .iter()
        .map(|ai| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, gj) in gl.iter().enumerate() {
                let c = crate::tensor::dot(ai, gj);
                if c > best.1 {
                    best = (j, c);
                }
            }
            best.0
        })
        .collect())
}

pub fn fuse_attribute_global(features: &Matrix, global: &Matrix, k: &[usize]) -> Result<AttributeWiseReps> {
    if features.cols() != global.cols() || k.len() != features.rows() {
        return Err(Error::invalid("shape mismatch between attribute features, global reps and indices"));
    }
    if let Some(&bad) = k.iter().find(|&&j| j >= global.rows()) {
        return Err(Error::invalid(format!("match index {bad} out of range for {} global rows", global.rows())));
    }
    let mut ag = features.clone();
    for (i, &j) in k.iter().enumerate() {
        for (v, gv) in ag.row_mut(i).iter_mut().zip(global.row(j)) {
            *v += gv;
        }
    }
    Ok(AttributeWiseReps { ag, match_indices: k.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::softmax_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fat_identity_and_annihilation() {
        let g = Matrix::randn(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(build_fat(&[1.0; 4], &g).unwrap(), g);
        assert_eq!(build_fat(&[0.0; 4], &g).unwrap(), Matrix::zeros(3, 4));
        assert!(build_fat(&[1.0; 3], &g).is_err());
    }

    #[test]
    fn matching_examples() {
        let g = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let a = Matrix::from_rows(&[vec![0.0, 0.0, 2.0], vec![3.0, 0.0, 0.0], vec![1.0, 1.0, 0.0]]);
        // third row ties between views 0 and 1: lowest index wins
        assert_eq!(match_attributes(&a, &g).unwrap(), vec![2, 0, 0]);
        let zero = Matrix::zeros(1, 3);
        assert!(matches!(match_attributes(&zero, &g), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fuse_adds_matched_rows() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]);
        let g = Matrix::from_rows(&[vec![10.0, 20.0], vec![30.0, 40.0]]);
        let ag = fuse_attribute_global(&a, &g, &[1, 0]).unwrap();
        assert_eq!(ag.ag, Matrix::from_rows(&[vec![31.0, 42.0], vec![10.0, 20.0]]));
        assert!(fuse_attribute_global(&a, &g, &[2, 0]).is_err());
    }

    fn naive_mha(store: &ParamStore, attn: &crate::nn::MultiHeadAttention, q_in: &Matrix, kv_in: &Matrix) -> Matrix {
        let lin = |l: &Linear, x: &Matrix| {
            let mut y = x.matmul(store.value(l.weight));
            for r in 0..y.rows() {
                for (v, b) in y.row_mut(r).iter_mut().zip(store.value(l.bias).data()) {
                    *v += b;
                }
            }
            y
        };
        let (q, k, v) = (lin(&attn.q, q_in), lin(&attn.k, kv_in), lin(&attn.v, kv_in));
        let d = q.cols();
        let dh = d / attn.heads;
        let mut out = Matrix::zeros(q.rows(), d);
        for h in 0..attn.heads {
            let cols = h * dh..(h + 1) * dh;
            let mut scores = Matrix::zeros(q.rows(), k.rows());
            for i in 0..q.rows() {
                for j in 0..k.rows() {
                    let s: f64 = cols.clone().map(|c| q.get(i, c) * k.get(j, c)).sum();
                    scores.set(i, j, s / (dh as f64).sqrt());
                }
            }
            let p = softmax_rows(&scores);
            for i in 0..q.rows() {
                for c in cols.clone() {
                    let s: f64 = (0..k.rows()).map(|j| p.get(i, j) * v.get(j, c)).sum();
                    out.set(i, c, s);
                }
            }
        }
        lin(&attn.out, &out)
    }

    fn naive_ln(store: &ParamStore, ln: &crate::nn::LayerNorm, x: &Matrix) -> Matrix {
        let mut y = x.clone();
        for r in 0..y.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            for (c, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = (row[c] - mean) / (var + 1e-5).sqrt() * store.value(ln.gain).get(0, c) + store.value(ln.bias).get(0, c);
            }
        }
        y
    }

    #[test]
    fn single_block_matches_hand_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { n_blocks: 1, n_heads: 2, mlp_hidden: 8, project_semantics: false };
        let acn = Acn::new(&mut store, cfg, 3, 4, &mut rng).unwrap();
        let memory = Matrix::randn(3, 4, 1.0, &mut rng);
        let mut g = Graph::inference();
        let m = g.constant(memory.clone());
        let out = acn.decode(&mut g, &store, m, 3);
        let got = g.value(out).clone();

        let blk = &acn.blocks[0];
        let s = store.value(acn.semantics).clone();
        let mut x = s.zip_map(&naive_mha(&store, &blk.self_attn, &s, &s), |a, b| a + b);
        x = naive_ln(&store, &blk.norm1, &x);
        x = x.zip_map(&naive_mha(&store, &blk.cross_attn, &x, &memory), |a, b| a + b);
        x = naive_ln(&store, &blk.norm2, &x);
        let h = x.matmul(store.value(blk.ffn.fc1.weight));
        let h = h.zip_map(&Matrix::from_rows(&vec![store.value(blk.ffn.fc1.bias).data().to_vec(); 3]), |a, b| a + b);
        let h = h.map(|v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh()));
        let f = h.matmul(store.value(blk.ffn.fc2.weight));
        let f = f.zip_map(&Matrix::from_rows(&vec![store.value(blk.ffn.fc2.bias).data().to_vec(); 3]), |a, b| a + b);
        x = naive_ln(&store, &blk.norm3, &x.zip_map(&f, |a, b| a + b));
        assert!(got.max_abs_diff(&x) < 1e-12, "{}", got.max_abs_diff(&x));
    }

    #[test]
    fn forward_records_consistent_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let acn = Acn::new(&mut store, DecoderConfig::default(), 3, 8, &mut rng).unwrap();
        let mut g = Graph::inference();
        let attrs = g.constant(Matrix::from_rows(&[vec![1.0; 12], vec![0.0; 12]]));
        let global = Matrix::randn(6, 8, 1.0, &mut rng);
        let gv = g.constant(global.clone());
        let out = acn.forward(&mut g, &store, attrs, gv, 3).unwrap();
        let a = g.value(out.features);
        let ag = g.value(out.reps);
        for r in 0..6 {
            let k = (r / 3) * 3 + out.match_indices[r];
            for c in 0..8 {
                assert!((ag.get(r, c) - a.get(r, c) - global.get(k, c)).abs() < 1e-12);
            }
        }
    }
}
