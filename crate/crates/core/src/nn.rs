//! Parameter storage and the transformer building blocks shared by every encoder.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::tensor::Matrix;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub frozen: bool,
}

/// Flat, ordered collection of named parameters. Cloning a store deep-copies it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Matrix) {
        self.params[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = true;
            }
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.is_frozen(id)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Hash restricted to parameters whose names start with `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// `y = x W + b` with `W` stored `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Matrix::randn(d_in, d_out, std, rng));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, d_out));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Row-wise layer normalisation with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide the model width");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    /// `queries` holds sequences of `q_len` rows, `context` the matching sequences of `kv_len` rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        context: Var,
        q_len: usize,
        kv_len: usize,
    ) -> Var {
        let q = self.q.forward(g, store, queries);
        let k = self.k.forward(g, store, context);
        let v = self.v.forward(g, store, context);
        let o = g.attention(q, k, v, self.heads, q_len, kv_len);
        self.out.forward(g, store, o)
    }

    pub fn param_ids(&self) -> [ParamId; 8] {
        [
            self.q.weight,
            self.q.bias,
            self.k.weight,
            self.k.bias,
            self.v.weight,
            self.v.bias,
            self.out.weight,
            self.out.bias,
        ]
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, seq_len: usize) -> Var {
        let h = self.norm1.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h, seq_len, seq_len);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, store, x);
        let m = self.mlp.forward(g, store, h);
        g.add(x, m)
    }
}

/// Post-norm transformer decoder block: self-attention over the queries,
/// cross-attention into a memory sequence, then a feed-forward layer.
#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), dim, hidden, dim, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        memory: Var,
        q_len: usize,
        mem_len: usize,
    ) -> Var {
        let a = self.self_attn.forward(g, store, x, x, q_len, q_len);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, store, x);
        let c = self.cross_attn.forward(g, store, x, memory, q_len, mem_len);
        let x = g.add(x, c);
        let x = self.norm2.forward(g, store, x);
        let f = self.ffn.forward(g, store, x);
        let x = g.add(x, f);
        self.norm3.forward(g, store, x)
    }
}

/// Row indices that tile a block of `block` rows `times` times.
pub(crate) fn tile_index(block: usize, times: usize) -> Vec<usize> {
    (0..times).flat_map(|_| 0..block).collect()
}

/// Row indices that repeat every row of an `rows`-row matrix `times` times in place.
pub(crate) fn repeat_index(rows: usize, times: usize) -> Vec<usize> {
    (0..rows).flat_map(|r| std::iter::repeat_n(r, times)).collect()
}
