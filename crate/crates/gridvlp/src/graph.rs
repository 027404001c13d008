//! Reverse-mode autodiff over a flat tape.
//!
//! A `Graph` is built per forward pass: every operation validates its input
//! shapes, computes the output value eagerly, and (when gradients are
//! enabled) records a backward closure. `backward` walks the tape in reverse
//! creation order, which is always a valid topological order because parents
//! precede children.
//!
//! Node values are reference-counted so capturing inputs for backward is
//! cheap; parameters enter the tape once per graph and their leaf nodes are
//! memoized so that weight tying accumulates gradients naturally.

use crate::error::{Error, Result};
use crate::tensor::{mm_nn, mm_nt, mm_tn, Shape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::Arc;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Handle to a named parameter in a `ParamStore` (see `nn`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

type BackFn = Box<dyn FnOnce(&Tensor) -> Vec<(NodeId, Tensor)> + Send>;

struct Node {
    value: Arc<Tensor>,
    grad: Option<Tensor>,
    requires_grad: bool,
    backward: Option<BackFn>,
}

/// Counters for degenerate-but-tolerated numeric events.
#[derive(Debug, Default, Clone, Copy)]
pub struct Diagnostics {
    /// Attention rows whose mask permitted nothing; they produced zeros.
    pub all_masked_rows: u64,
}

/// Boolean attention mask; `true` means the query may attend the key.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::shape(
                "AttnMask::new",
                format!("{rows}x{cols} mask wants {} flags, got {}", rows * cols, allow.len()),
            ));
        }
        Ok(AttnMask { rows, cols, allow })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        AttnMask {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    /// Lower-triangular causal mask over a sequence of length `n`.
    pub fn causal(n: usize) -> Self {
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allow[i * n + j] = true;
            }
        }
        AttnMask { rows: n, cols: n, allow }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = vec![false; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                allow[i * cols + j] = f(i, j);
            }
        }
        AttnMask { rows, cols, allow }
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }
}

/// Autodiff tape.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    train: bool,
    dropout_rng: Option<ChaCha8Rng>,
    param_leaves: HashMap<usize, NodeId>,
    pub diag: Diagnostics,
}

impl Graph {
    /// Graph that records gradients (training / gradient checks).
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            train: false,
            dropout_rng: None,
            param_leaves: HashMap::new(),
            diag: Diagnostics::default(),
        }
    }

    /// Graph that skips backward bookkeeping entirely (evaluation).
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
            train: false,
            dropout_rng: None,
            param_leaves: HashMap::new(),
            diag: Diagnostics::default(),
        }
    }

    /// Enable train-time stochastic ops (dropout) with a fixed seed.
    pub fn set_train(&mut self, dropout_seed: u64) {
        self.train = true;
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(dropout_seed));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, backward: Option<BackFn>) -> NodeId {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, requires_grad: bool) -> NodeId {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            backward: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn arc(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[id.0].value)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // shared with the op modules in this crate
    pub(crate) fn arc_of(&self, id: NodeId) -> Arc<Tensor> {
        self.arc(id)
    }

    pub(crate) fn requires(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    pub(crate) fn push_node(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        backward: Option<BackFn>,
    ) -> NodeId {
        self.push(value, requires_grad, backward)
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    // -- leaves ------------------------------------------------------------

    /// Data leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, None)
    }

    /// Shared constant leaf (no gradient), cheap to insert repeatedly.
    pub fn constant(&mut self, value: Arc<Tensor>) -> NodeId {
        self.push_arc(value, false)
    }

    /// Leaf that accumulates gradient (used directly in tests and probes).
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, None)
    }

    /// Parameter leaf, memoized per `ParamId` so re-use (weight tying) maps
    /// to a single node and gradients accumulate.
    pub fn param_leaf(&mut self, pid: ParamId, value: Arc<Tensor>) -> NodeId {
        if let Some(&id) = self.param_leaves.get(&pid.0) {
            return id;
        }
        let id = self.push_arc(value, true);
        self.nodes[id.0].requires_grad = self.grad_enabled;
        self.param_leaves.insert(pid.0, id);
        id
    }

    /// Gradients accumulated on parameter leaves after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .param_leaves
            .iter()
            .filter_map(|(&pid, &nid)| self.nodes[nid.0].grad.clone().map(|g| (ParamId(pid), g)))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }

    // -- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Consumes the recorded closures; a
    /// graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::contract("backward", "graph built in inference mode"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", self.nodes[loss.0].value.shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // loss does not depend on any parameter
        }
        let seed_shape = self.nodes[loss.0].value.shape().clone();
        self.nodes[loss.0].grad = Some(Tensor::full(seed_shape, 1.0));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let Some(back) = self.nodes[i].backward.take() else {
                continue;
            };
            let g = self.nodes[i].grad.clone().expect("grad present");
            for (pid, contrib) in back(&g) {
                debug_assert!(pid.0 < i, "backward contribution must flow to earlier node");
                match &mut self.nodes[pid.0].grad {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    // -- elementwise -------------------------------------------------------

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa} vs {sb}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        let back: BackFn = Box::new(move |g| vec![(a, g.clone()), (b, g.clone())]);
        Ok(self.push(out, rg, Some(back)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        let back: BackFn = Box::new(move |g| vec![(a, g.clone()), (b, g.map(|x| -x))]);
        Ok(self.push(out, rg, Some(back)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let va = self.arc(a);
        let vb = self.arc(b);
        let out = va.zip_map(&vb, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        let back: BackFn = Box::new(move |g| {
            vec![
                (a, g.zip_map(&vb, |gv, y| gv * y).expect("shape")),
                (b, g.zip_map(&va, |gv, x| gv * x).expect("shape")),
            ]
        });
        Ok(self.push(out, rg, Some(back)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("div", a, b)?;
        let va = self.arc(a);
        let vb = self.arc(b);
        let out = va.zip_map(&vb, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        let back: BackFn = Box::new(move |g| {
            let da = g.zip_map(&vb, |gv, y| gv / y).expect("shape");
            let db_data: Vec<f64> = g
                .data()
                .iter()
                .zip(va.data().iter().zip(vb.data()))
                .map(|(&gv, (&x, &y))| -gv * x / (y * y))
                .collect();
            let db = Tensor::new(vb.shape().clone(), db_data).expect("shape");
            vec![(a, da), (b, db)]
        });
        Ok(self.push(out, rg, Some(back)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        let back: BackFn = Box::new(move |g| vec![(a, g.map(|x| c * x))]);
        self.push(out, rg, Some(back))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        let back: BackFn = Box::new(move |g| vec![(a, g.clone())]);
        self.push(out, rg, Some(back))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.arc(a);
        let out = va.map(|x| x.max(0.0));
        let rg = self.rg(a);
        let back: BackFn = Box::new(move |g| {
            let d = g
                .zip_map(&va, |gv, x| if x > 0.0 { gv } else { 0.0 })
                .expect("shape");
            vec![(a, d)]
        });
        self.push(out, rg, Some(back))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let va = self.arc(a);
        let out = va.map(f64::abs);
        let rg = self.rg(a);
        let back: BackFn = Box::new(move |g| {
            let d = g
                .zip_map(&va, |gv, x| gv * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                .expect("shape");
            vec![(a, d)]
        });
        self.push(out, rg, Some(back))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let saved = Arc::new(out.clone());
        let rg = self.rg(a);
        let back: BackFn = Box::new(move |g| {
            let d = g
                .zip_map(&saved, |gv, y| gv * y * (1.0 - y))
                .expect("shape");
            vec![(a, d)]
        });
        self.push(out, rg, Some(back))
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let va = self.arc(a);
        let out = va.map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let rg = self.rg(a);
        let back: BackFn = Box::new(move |g| {
            let d = g
                .zip_map(&va, |gv, x| gv / (1.0 + (-x).exp()))
                .expect("shape");
            vec![(a, d)]
        });
        self.push(out, rg, Some(back))
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("min_elem", a, b)?;
        let va = self.arc(a);
        let vb = self.arc(b);
        let out = va.zip_map(&vb, f64::min)?;
        let rg = self.rg(a) || self.rg(b);
        // ties route to the first argument
        let back: BackFn = Box::new(move |g| {
            let mut da_data = vec![0.0; g.numel()];
            let mut db_data = vec![0.0; g.numel()];
            for i in 0..g.numel() {
                if va.data()[i] <= vb.data()[i] {
                    da_data[i] = g.data()[i];
                } else {
                    db_data[i] = g.data()[i];
                }
            }
            vec![
                (a, Tensor::new(va.shape().clone(), da_data).expect("shape")),
                (b, Tensor::new(vb.shape().clone(), db_data).expect("shape")),
            ]
        });
        Ok(self.push(out, rg, Some(back)))
    }

    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("max_elem", a, b)?;
        let va = self.arc(a);
        let vb = self.arc(b);
        let out = va.zip_map(&vb, f64::max)?;
        let rg = self.rg(a) || self.rg(b);
        let back: BackFn = Box::new(move |g| {
            let mut da_data = vec![0.0; g.numel()];
            let mut db_data = vec![0.0; g.numel()];
            for i in 0..g.numel() {
                if va.data()[i] >= vb.data()[i] {
                    da_data[i] = g.data()[i];
                } else {
                    db_data[i] = g.data()[i];
                }
            }
            vec![
                (a, Tensor::new(va.shape().clone(), da_data).expect("shape")),
                (b, Tensor::new(vb.shape().clone(), db_data).expect("shape")),
            ]
        });
        Ok(self.push(out, rg, Some(back)))
    }

    // -- shape ops ----------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Shape>) -> Result<NodeId> {
        let shape = shape.into();
        let va = self.value(a);
        if shape.numel() != va.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {} as {shape}", va.shape()),
            ));
        }
        let in_shape = va.shape().clone();
        let out = Tensor::new(shape, va.data().to_vec())?;
        let rg = self.rg(a);
        let back: BackFn = Box::new(move |g| {
            let back_t = Tensor::new(in_shape.clone(), g.data().to_vec()).expect("shape");
            vec![(a, back_t)]
        });
        Ok(self.push(out, rg, Some(back)))
    }

    /// Stack 2-D inputs with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows", "no inputs"));
        }
        let cols = self.expect_2d("concat_rows", parts[0])?.1;
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = self.expect_2d("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("column mismatch {c} vs {cols}")));
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * cols);
        let mut spans = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            data.extend_from_slice(v.data());
            let rows = v.dims()[0];
            spans.push((p, offset, rows));
            offset += rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let back: BackFn = Box::new(move |g| {
            spans
                .iter()
                .map(|&(p, start, rows)| {
                    let slice = &g.data()[start * cols..(start + rows) * cols];
                    (p, Tensor::new([rows, cols], slice.to_vec()).expect("shape"))
                })
                .collect()
        });
        Ok(self.push(Tensor::new([total_rows, cols], data)?, rg, Some(back)))
    }

    /// Concatenate 2-D inputs with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols", "no inputs"));
        }
        let rows = self.expect_2d("concat_cols", parts[0])?.0;
        let mut total_cols = 0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.expect_2d("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("row mismatch {r} vs {rows}")));
            }
            widths.push((p, total_cols, c));
            total_cols += c;
        }
        let mut data = vec![0.0; rows * total_cols];
        for &(p, start, c) in &widths {
            let v = self.value(p);
            for r in 0..rows {
                data[r * total_cols + start..r * total_cols + start + c]
                    .copy_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let back: BackFn = Box::new(move |g| {
            widths
                .iter()
                .map(|&(p, start, c)| {
                    let mut part = vec![0.0; rows * c];
                    for r in 0..rows {
                        part[r * c..(r + 1) * c]
                            .copy_from_slice(&g.data()[r * total_cols + start..r * total_cols + start + c]);
                    }
                    (p, Tensor::new([rows, c], part).expect("shape"))
                })
                .collect()
        });
        Ok(self.push(Tensor::new([rows, total_cols], data)?, rg, Some(back)))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.expect_2d("slice_rows", a)?;
        if start + len > rows || len == 0 {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of 0..{rows}", start + len),
            ));
        }
        let out = Tensor::new(
            [len, cols],
            self.value(a).data()[start * cols..(start + len) * cols].to_vec(),
        )?;
        let rg = self.rg(a);
        let back: BackFn = Box::new(move |g| {
            let mut d = vec![0.0; rows * cols];
            d[start * cols..(start + len) * cols].copy_from_slice(g.data());
            vec![(a, Tensor::new([rows, cols], d).expect("shape"))]
        });
        Ok(self.push(out, rg, Some(back)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.expect_2d("slice_cols", a)?;
        if start + len > cols || len == 0 {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} out of 0..{cols}", start + len),
            ));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        let back: BackFn = Box::new(move |g| {
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                d[r * cols + start..r * cols + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![(a, Tensor::new([rows, cols], d).expect("shape"))]
        });
        Ok(self.push(Tensor::new([rows, len], data)?, rg, Some(back)))
    }

    /// Select rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.expect_2d("gather_rows", a)?;
        if indices.is_empty() {
            return Err(Error::contract("gather_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of 0..{rows}")));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&v.data()[i * cols..(i + 1) * cols]);
        }
        let idx: Vec<usize> = indices.to_vec();
        let rg = self.rg(a);
        let back: BackFn = Box::new(move |g| {
            let mut d = vec![0.0; rows * cols];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..cols {
                    d[i * cols + c] += g.data()[r * cols + c];
                }
            }
            vec![(a, Tensor::new([rows, cols], d).expect("shape"))]
        });
        Ok(self.push(Tensor::new([indices.len(), cols], data)?, rg, Some(back)))
    }

    fn expect_2d(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        let s = self.value(a).shape();
        if s.rank() != 2 {
            return Err(Error::shape(op, format!("expected rank-2 tensor, got {s}")));
        }
        Ok((s.dims()[0], s.dims()[1]))
    }

    // -- linear algebra ------------------------------------------------------

    /// c[m x n] = a[m x k] * b[k x n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.expect_2d("matmul", a)?;
        let (kb, n) = self.expect_2d("matmul", b)?;
        if ka != kb {
            return Err(Error::shape("matmul", format!("inner dims {ka} vs {kb}")));
        }
        let va = self.arc(a);
        let vb = self.arc(b);
        let mut out = vec![0.0; m * n];
        mm_nn(va.data(), vb.data(), m, ka, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        let back: BackFn = Box::new(move |g| {
            let mut da = vec![0.0; m * ka];
            mm_nt(g.data(), vb.data(), m, n, ka, &mut da);
            let mut db = vec![0.0; ka * n];
            mm_tn(va.data(), g.data(), m, ka, n, &mut db);
            vec![
                (a, Tensor::new([m, ka], da).expect("shape")),
                (b, Tensor::new([ka, n], db).expect("shape")),
            ]
        });
        Ok(self.push(Tensor::new([m, n], out)?, rg, Some(back)))
    }

    /// c[m x n] = a[m x k] * b[n x k]^T
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.expect_2d("matmul_nt", a)?;
        let (n, kb) = self.expect_2d("matmul_nt", b)?;
        if ka != kb {
            return Err(Error::shape("matmul_nt", format!("inner dims {ka} vs {kb}")));
        }
        let va = self.arc(a);
        let vb = self.arc(b);
        let mut out = vec![0.0; m * n];
        mm_nt(va.data(), vb.data(), m, ka, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        let back: BackFn = Box::new(move |g| {
            let mut da = vec![0.0; m * ka];
            mm_nn(g.data(), vb.data(), m, n, ka, &mut da);
            let mut db = vec![0.0; n * ka];
            mm_tn(g.data(), va.data(), m, n, ka, &mut db);
            vec![
                (a, Tensor::new([m, ka], da).expect("shape")),
                (b, Tensor::new([n, ka], db).expect("shape")),
            ]
        });
        Ok(self.push(Tensor::new([m, n], out)?, rg, Some(back)))
    }

    /// Add a bias row vector to every row of a 2-D tensor.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.expect_2d("add_bias", a)?;
        let bs = self.value(bias).shape().clone();
        if bs.dims() != [cols] {
            return Err(Error::shape("add_bias", format!("bias {bs} vs {cols} columns")));
        }
        let vb = self.arc(bias);
        let va = self.value(a);
        let mut data = va.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += vb.data()[c];
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        let back: BackFn = Box::new(move |g| {
            let mut db = vec![0.0; cols];
            for r in 0..rows {
                for (c, slot) in db.iter_mut().enumerate() {
                    *slot += g.data()[r * cols + c];
                }
            }
            vec![
                (a, g.clone()),
                (bias, Tensor::new([cols], db).expect("shape")),
            ]
        });
        Ok(self.push(Tensor::new([rows, cols], data)?, rg, Some(back)))
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let shape = self.value(a).shape().clone();
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        let back: BackFn = Box::new(move |g| {
            let gv = g.item();
            vec![(a, Tensor::full(shape.clone(), gv))]
        });
        self.push(out, rg, Some(back))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // -- stochastic ----------------------------------------------------------

    /// Inverted dropout; identity when the graph is not in train mode or
    /// `rate` is zero.
    pub fn dropout(&mut self, a: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let n = self.value(a).numel();
        let rng = self
            .dropout_rng
            .as_mut()
            .expect("train mode implies dropout rng");
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Arc::new(mask);
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(va.shape().clone(), data)?;
        let rg = self.rg(a);
        let saved = Arc::clone(&mask);
        let back: BackFn = Box::new(move |g| {
            let d: Vec<f64> = g.data().iter().zip(saved.iter()).map(|(&gv, &m)| gv * m).collect();
            vec![(a, Tensor::new(g.shape().clone(), d).expect("shape"))]
        });
        Ok(self.push(out, rg, Some(back)))
    }

    // -- softmax & losses ------------------------------------------------------

    /// Row-wise softmax over permitted columns. A row whose mask permits
    /// nothing yields zeros and bumps `diag.all_masked_rows`.
    pub fn masked_softmax(&mut self, scores: NodeId, mask: &AttnMask) -> Result<NodeId> {
        let (rows, cols) = self.expect_2d("masked_softmax", scores)?;
        if rows != mask.rows || cols != mask.cols {
            return Err(Error::shape(
                "masked_softmax",
                format!("scores {rows}x{cols} vs mask {}x{}", mask.rows, mask.cols),
            ));
        }
        let v = self.arc(scores);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let mut mx = f64::NEG_INFINITY;
            let mut any_allowed = false;
            let mut saw_non_finite = false;
            for (c, &score) in row.iter().enumerate() {
                if mask.allowed(r, c) {
                    any_allowed = true;
                    if !score.is_finite() {
                        saw_non_finite = true;
                    }
                    if score > mx {
                        mx = score;
                    }
                }
            }
            if saw_non_finite {
                // never launder bad numerics into zeros
                out[r * cols..(r + 1) * cols].fill(f64::NAN);
                continue;
            }
            if !any_allowed {
                self.diag.all_masked_rows += 1;
                continue; // row stays exactly zero
            }
            let mut denom = 0.0;
            for (c, &score) in row.iter().enumerate() {
                if mask.allowed(r, c) {
                    let e = (score - mx).exp();
                    out[r * cols + c] = e;
                    denom += e;
                }
            }
            for c in 0..cols {
                out[r * cols + c] /= denom;
            }
        }
        let out = Tensor::new([rows, cols], out)?;
        let probs = Arc::new(out.clone());
        let rg = self.rg(scores);
        let back: BackFn = Box::new(move |g| {
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                let p = &probs.data()[r * cols..(r + 1) * cols];
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let dot: f64 = p.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                for c in 0..cols {
                    d[r * cols + c] = p[c] * (gr[c] - dot);
                }
            }
            vec![(scores, Tensor::new([rows, cols], d).expect("shape"))]
        });
        Ok(self.push(out, rg, Some(back)))
    }

    /// Weighted cross entropy over rows of logits, with optional label
    /// smoothing. Returns the weighted sum; callers bake normalization into
    /// `weights`.
    pub fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f64],
        label_smooth: f64,
    ) -> Result<NodeId> {
        let (rows, vocab) = self.expect_2d("cross_entropy_rows", logits)?;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape(
                "cross_entropy_rows",
                format!("{rows} rows vs {} targets / {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::contract(
                "cross_entropy_rows",
                format!("target {bad} out of vocab {vocab}"),
            ));
        }
        if !(0.0..1.0).contains(&label_smooth) {
            return Err(Error::Config(format!("label smoothing {label_smooth} outside [0,1)")));
        }
        let v = self.arc(logits);
        let mut total = 0.0;
        let mut probs = vec![0.0; rows * vocab];
        for r in 0..rows {
            let z = &v.data()[r * vocab..(r + 1) * vocab];
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, &zv) in z.iter().enumerate() {
                let e = (zv - mx).exp();
                probs[r * vocab + c] = e;
                denom += e;
            }
            for c in 0..vocab {
                probs[r * vocab + c] /= denom;
            }
            let lse = mx + denom.ln();
            let mean_z: f64 = z.iter().sum::<f64>() / vocab as f64;
            let expect_z = (1.0 - label_smooth) * z[targets[r]] + label_smooth * mean_z;
            total += weights[r] * (lse - expect_z);
        }
        let probs = Arc::new(probs);
        let targets: Arc<Vec<usize>> = Arc::new(targets.to_vec());
        let weights: Arc<Vec<f64>> = Arc::new(weights.to_vec());
        let rg = self.rg(logits);
        let back: BackFn = Box::new(move |g| {
            let gv = g.item();
            let mut d = vec![0.0; rows * vocab];
            for r in 0..rows {
                let w = weights[r];
                if w == 0.0 {
                    continue;
                }
                for c in 0..vocab {
                    let q = label_smooth / vocab as f64
                        + if c == targets[r] { 1.0 - label_smooth } else { 0.0 };
                    d[r * vocab + c] = gv * w * (probs[r * vocab + c] - q);
                }
            }
            vec![(logits, Tensor::new([rows, vocab], d).expect("shape"))]
        });
        Ok(self.push(Tensor::scalar(total), rg, Some(back)))
    }

    /// Mean binary cross entropy with logits against fixed targets.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let v = self.arc(logits);
        if v.numel() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} targets", v.numel(), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::contract("bce_with_logits", format!("target {bad} outside [0,1]")));
        }
        let n = targets.len() as f64;
        let mut total = 0.0;
        for (&z, &y) in v.data().iter().zip(targets) {
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        total /= n;
        let targets: Arc<Vec<f64>> = Arc::new(targets.to_vec());
        let rg = self.rg(logits);
        let back: BackFn = Box::new(move |g| {
            let gv = g.item();
            let d: Vec<f64> = v
                .data()
                .iter()
                .zip(targets.iter())
                .map(|(&z, &y)| gv * (1.0 / (1.0 + (-z).exp()) - y) / n)
                .collect();
            vec![(logits, Tensor::new(v.shape().clone(), d).expect("shape"))]
        });
        Ok(self.push(Tensor::scalar(total), rg, Some(back)))
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
