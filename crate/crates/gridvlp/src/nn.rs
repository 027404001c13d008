//! Named parameters and the transformer building blocks.
//!
//! All layers are thin structs holding `ParamId`s into a `ParamStore`; the
//! actual compute happens on a `Graph` so a single forward definition serves
//! training, evaluation, and gradient checks.

use crate::error::{Error, Result};
use crate::graph::{AttnMask, Graph, NodeId, ParamId};
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Transformer, embeddings, and heads.
    Transformer,
    /// Convolutional trunk.
    Backbone,
}

pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Tensor>,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub group: ParamGroup,
}

/// Flat store of named parameters with gradient and optimizer state.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let shape = value.shape().clone();
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.clone(),
            value: Arc::new(value),
            grad: Tensor::zeros(shape.clone()),
            adam_m: Tensor::zeros(shape.clone()),
            adam_v: Tensor::zeros(shape),
            group,
        });
        self.by_name.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Insert (or fetch) this parameter's leaf node on a graph.
    pub fn leaf(&self, g: &mut Graph, id: ParamId) -> NodeId {
        g.param_leaf(id, Arc::clone(&self.entries[id.0].value))
    }

    /// Accumulate a batch of gradients produced by `Graph::param_grads`.
    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Tensor)]) {
        for (id, g) in grads {
            self.entries[id.0].grad.add_assign(g);
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Flatten all parameter values in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    /// Overwrite all parameter values from a flat vector (registration order).
    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.value.numel();
            let t = Arc::make_mut(&mut e.value);
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat vector length mismatch");
    }

    /// Flatten all accumulated gradients in registration order.
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in &self.entries {
            out.extend_from_slice(e.grad.data());
        }
        out
    }
}

// -- initializers -----------------------------------------------------------

/// Truncated normal (resampled outside two standard deviations), BERT-style.
pub fn trunc_normal(rng: &mut ChaCha8Rng, shape: impl Into<Shape>, std: f64) -> Tensor {
    let shape = shape.into();
    let n = shape.numel();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Tensor::new(shape, data).expect("shape")
}

/// Fan-in scaled normal for conv kernels.
pub fn conv_init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    trunc_normal(rng, [c_out, c_in, k, k], std)
}

// -- layers -------------------------------------------------------------------

/// Affine projection `x W + b`.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
    ) -> Self {
        let w = store.register(format!("{name}.weight"), trunc_normal(rng, [d_in, d_out], 0.02), group);
        let b = store.register(format!("{name}.bias"), Tensor::zeros([d_out]), group);
        Linear { w, b: Some(b), d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = store.leaf(g, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = store.leaf(g, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm with its own affine parameters.
#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup) -> Self {
        let gamma = store.register(format!("{name}.gamma"), Tensor::full([d], 1.0), group);
        let beta = store.register(format!("{name}.beta"), Tensor::zeros([d]), group);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gamma = store.leaf(g, self.gamma);
        let beta = store.leaf(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Embedding table wrapper.
#[derive(Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab: usize,
        dim: usize,
        group: ParamGroup,
    ) -> Self {
        let table = store.register(format!("{name}.table"), trunc_normal(rng, [vocab, dim], 0.02), group);
        Embedding { table, vocab, dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<NodeId> {
        let table = store.leaf(g, self.table);
        g.embedding(table, ids)
    }
}

/// Attention geometry shared by every transformer block.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub dropout_rate: f64,
}

impl Default for AttentionConfig {
    // 256 hidden units are not divisible into 12 heads, so 8 heads is the
    // default that keeps the per-head width integral; 264/12 validates for
    // anyone wanting twelve heads.
    fn default() -> Self {
        AttentionConfig {
            hidden_size: 256,
            num_heads: 8,
            ffn_size: 1024,
            dropout_rate: 0.1,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_heads == 0 || self.ffn_size == 0 {
            return Err(Error::Config("attention dims must be positive".into()));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads (e.g. 256 % 12 != 0); \
                 use 8 heads for 256 hidden units, or 264 hidden units for 12 heads",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

/// Multi-head attention with separate query / key / value inputs.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub cfg: AttentionConfig,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttentionConfig,
        group: ParamGroup,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_size;
        Ok(MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d, group),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d, group),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d, group),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d, d, group),
            cfg,
        })
    }

    /// Attention where keys and values come from the same sequence.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query_seq: NodeId,
        key_value_seq: NodeId,
        mask: &AttnMask,
    ) -> Result<NodeId> {
        self.forward_qkv(g, store, query_seq, key_value_seq, key_value_seq, mask)
    }

    /// General form: positional terms may be folded into q/k while values
    /// stay positionless.
    pub fn forward_qkv(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: NodeId,
        k_in: NodeId,
        v_in: NodeId,
        mask: &AttnMask,
    ) -> Result<NodeId> {
        let d = self.cfg.hidden_size;
        let (lq, dq) = dims2(g, q_in)?;
        let (lk, dk) = dims2(g, k_in)?;
        let (lv, dv) = dims2(g, v_in)?;
        if dq != d || dk != d || dv != d {
            return Err(Error::shape(
                "multi_head_attention",
                format!("widths q={dq} k={dk} v={dv} vs hidden {d}"),
            ));
        }
        if lk != lv {
            return Err(Error::shape(
                "multi_head_attention",
                format!("key length {lk} vs value length {lv}"),
            ));
        }
        if mask.rows != lq || mask.cols != lk {
            return Err(Error::shape(
                "multi_head_attention",
                format!("mask {}x{} vs sequences {lq}x{lk}", mask.rows, mask.cols),
            ));
        }
        let q = self.wq.forward(g, store, q_in)?;
        let k = self.wk.forward(g, store, k_in)?;
        let v = self.wv.forward(g, store, v_in)?;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let probs = g.masked_softmax(scores, mask)?;
            let probs = g.dropout(probs, self.cfg.dropout_rate)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        self.wo.forward(g, store, cat)
    }
}

/// Two-layer feed-forward block with ReLU.
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttentionConfig,
        group: ParamGroup,
    ) -> Self {
        FeedForward {
            lin1: Linear::new(store, rng, &format!("{name}.lin1"), cfg.hidden_size, cfg.ffn_size, group),
            lin2: Linear::new(store, rng, &format!("{name}.lin2"), cfg.ffn_size, cfg.hidden_size, group),
            dropout: cfg.dropout_rate,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.lin1.forward(g, store, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout)?;
        self.lin2.forward(g, store, h)
    }
}

/// Standard post-norm encoder block: self-attention then FFN.
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttentionConfig,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg, group)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), cfg, group),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.hidden_size, group),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.hidden_size, group),
            dropout: cfg.dropout_rate,
        })
    }

    /// `pos` (when present) is added to queries and keys only, fresh at this
    /// layer's input; values and the residual path stay position-free.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        pos: Option<NodeId>,
        mask: &AttnMask,
    ) -> Result<NodeId> {
        let qk = match pos {
            Some(p) => g.add(x, p)?,
            None => x,
        };
        let attn_out = self.attn.forward_qkv(g, store, qk, qk, x, mask)?;
        let attn_out = g.dropout(attn_out, self.dropout)?;
        let x = {
            let sum = g.add(x, attn_out)?;
            self.ln1.forward(g, store, sum)?
        };
        let ffn_out = self.ffn.forward(g, store, x)?;
        let ffn_out = g.dropout(ffn_out, self.dropout)?;
        let sum = g.add(x, ffn_out)?;
        self.ln2.forward(g, store, sum)
    }
}

/// Post-norm decoder block: self-attention, cross-attention, FFN.
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
    pub dropout: f64,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttentionConfig,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), cfg, group)?,
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), cfg, group)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), cfg, group),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.hidden_size, group),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.hidden_size, group),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), cfg.hidden_size, group),
            dropout: cfg.dropout_rate,
        })
    }

    /// `x_pos` is added to the self-attention q/k and to the cross-attention
    /// query; `mem_pos` is added to cross-attention keys. Values never carry
    /// positions.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        x_pos: Option<NodeId>,
        memory: NodeId,
        mem_pos: Option<NodeId>,
        self_mask: &AttnMask,
        cross_mask: &AttnMask,
    ) -> Result<NodeId> {
        let qk = match x_pos {
            Some(p) => g.add(x, p)?,
            None => x,
        };
        let self_out = self.self_attn.forward_qkv(g, store, qk, qk, x, self_mask)?;
        let self_out = g.dropout(self_out, self.dropout)?;
        let x = {
            let sum = g.add(x, self_out)?;
            self.ln1.forward(g, store, sum)?
        };
        let q = match x_pos {
            Some(p) => g.add(x, p)?,
            None => x,
        };
        let k = match mem_pos {
            Some(p) => g.add(memory, p)?,
            None => memory,
        };
        let cross_out = self.cross_attn.forward_qkv(g, store, q, k, memory, cross_mask)?;
        let cross_out = g.dropout(cross_out, self.dropout)?;
        let x = {
            let sum = g.add(x, cross_out)?;
            self.ln2.forward(g, store, sum)?
        };
        let ffn_out = self.ffn.forward(g, store, x)?;
        let ffn_out = g.dropout(ffn_out, self.dropout)?;
        let sum = g.add(x, ffn_out)?;
        self.ln3.forward(g, store, sum)
    }
}

fn dims2(g: &Graph, x: NodeId) -> Result<(usize, usize)> {
    let s = g.value(x).shape();
    if s.rank() != 2 {
        return Err(Error::shape("dims2", format!("expected rank-2, got {s}")));
    }
    Ok((s.dims()[0], s.dims()[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_cfg() -> AttentionConfig {
        AttentionConfig {
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            dropout_rate: 0.0,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn config_rejects_non_divisible_heads() {
        let cfg = AttentionConfig {
            hidden_size: 256,
            num_heads: 12,
            ffn_size: 1024,
            dropout_rate: 0.1,
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("256"), "message should explain: {err}");

        // the documented alternatives both validate
        assert!(AttentionConfig { num_heads: 8, ..cfg }.validate().is_ok());
        assert!(AttentionConfig { hidden_size: 264, ..cfg }.validate().is_ok());
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let cfg = tiny_cfg();
        let mha = MultiHeadAttention::new(&mut store, &mut r, "attn", cfg, ParamGroup::Transformer).unwrap();
        // identity output projection, so out = value projection exactly
        let d = cfg.hidden_size;
        let mut eye = Tensor::zeros([d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        *Arc::make_mut(&mut store.entry_mut(mha.wo.w).value) = eye;

        let x: Vec<f64> = (0..d).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut g = Graph::new();
        let xi = g.input(Tensor::new([1, d], x.clone()).unwrap());
        let out = mha.forward(&mut g, &store, xi, xi, &AttnMask::full(1, 1)).unwrap();

        // expected: x @ Wv + bv (attention weight over one element is exactly 1)
        let mut g2 = Graph::new();
        let xi2 = g2.input(Tensor::new([1, d], x).unwrap());
        let want = mha.wv.forward(&mut g2, &store, xi2).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g2.value(want).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn causal_mask_blocks_future_rows_bit_exactly() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let cfg = tiny_cfg();
        let mha = MultiHeadAttention::new(&mut store, &mut r, "attn", cfg, ParamGroup::Transformer).unwrap();
        let d = cfg.hidden_size;
        let base: Vec<f64> = (0..4 * d).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut perturbed = base.clone();
        for v in perturbed[d..].iter_mut() {
            *v += 17.0; // rows 1..3 shifted arbitrarily
        }
        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.input(Tensor::new([4, d], data).unwrap());
            let out = mha.forward(&mut g, &store, x, x, &AttnMask::causal(4)).unwrap();
            g.value(out).data()[..d].to_vec()
        };
        assert_eq!(run(base), run(perturbed), "row 0 must ignore rows 1..3");
    }

    #[test]
    fn full_mask_attention_permutation_equivariant_with_positions() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let cfg = tiny_cfg();
        let mha = MultiHeadAttention::new(&mut store, &mut r, "attn", cfg, ParamGroup::Transformer).unwrap();
        let d = cfg.hidden_size;
        let n = 5;
        let kv: Vec<f64> = (0..n * d).map(|i| (i as f64 * 0.21).sin()).collect();
        let q: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).cos()).collect();
        let perm = [3usize, 0, 4, 1, 2];
        let mut kv_perm = vec![0.0; n * d];
        for (dst, &src) in perm.iter().enumerate() {
            kv_perm[dst * d..(dst + 1) * d].copy_from_slice(&kv[src * d..(src + 1) * d]);
        }
        let run = |kv_data: Vec<f64>| {
            let mut g = Graph::new();
            let qn = g.input(Tensor::new([1, d], q.clone()).unwrap());
            let kvn = g.input(Tensor::new([n, d], kv_data).unwrap());
            let out = mha.forward(&mut g, &store, qn, kvn, &AttnMask::full(1, n)).unwrap();
            g.value(out).data().to_vec()
        };
        let a = run(kv);
        let b = run(kv_perm);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "attention must be a set operation over kv");
        }
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let cfg = tiny_cfg();
        let mha = MultiHeadAttention::new(&mut store, &mut r, "attn", cfg, ParamGroup::Transformer).unwrap();
        let d = cfg.hidden_size;
        let n = 3;
        let x0: Vec<f64> = (0..n * d).map(|i| (i as f64 * 0.17).sin() * 0.5).collect();
        let mask = AttnMask::causal(n);

        // analytic
        let mut g = Graph::new();
        let x = g.var(Tensor::new([n, d], x0.clone()).unwrap());
        let out = mha.forward(&mut g, &store, x, x, &mask).unwrap();
        let w: Vec<f64> = (0..n * d).map(|i| ((i % 7) as f64 - 3.0) * 0.25).collect();
        let wn = g.input(Tensor::new([n, d], w).unwrap());
        let prod = g.mul(out, wn).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().data().to_vec();

        let mut f = |p: &[f64]| {
            let mut g = Graph::inference();
            let x = g.input(Tensor::new([n, d], p.to_vec()).unwrap());
            let out = mha.forward(&mut g, &store, x, x, &mask).unwrap();
            let w: Vec<f64> = (0..n * d).map(|i| ((i % 7) as f64 - 3.0) * 0.25).collect();
            let wn = g.input(Tensor::new([n, d], w).unwrap());
            let prod = g.mul(out, wn).unwrap();
            let s = g.sum_all(prod);
            g.value(s).item()
        };
        let numeric = crate::verify::finite_diff_grad(&mut f, &x0, 1e-5);
        for (i, (nu, an)) in numeric.iter().zip(&analytic).enumerate() {
            let e = crate::verify::rel_err(*nu, *an);
            assert!(e < 1e-4, "coord {i}: numeric {nu} analytic {an} rel {e}");
        }
    }

    #[test]
    fn encoder_layer_gradient_reaches_parameters() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let cfg = tiny_cfg();
        let layer = EncoderLayer::new(&mut store, &mut r, "enc0", cfg, ParamGroup::Transformer).unwrap();
        let d = cfg.hidden_size;
        let mut g = Graph::new();
        let x = g.input(trunc_normal(&mut r, [3, d], 1.0));
        let out = layer.forward(&mut g, &store, x, None, &AttnMask::full(3, 3)).unwrap();
        let loss = g.sum_all(out);
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        assert!(!grads.is_empty());
        let wq_grad = grads.iter().find(|(id, _)| *id == layer.attn.wq.w).unwrap();
        assert!(wq_grad.1.l2_norm() > 0.0);
    }
}
