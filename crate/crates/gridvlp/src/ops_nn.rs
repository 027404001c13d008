//! Normalization, embedding lookup, and convolution on the autodiff tape.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{mm_nn, mm_nt, mm_tn, Tensor};
use std::sync::Arc;

pub const NORM_EPS: f64 = 1e-6;

type BackFn = Box<dyn FnOnce(&Tensor) -> Vec<(NodeId, Tensor)> + Send>;

impl Graph {
    /// Per-row layer normalization with affine parameters.
    ///
    /// Rows are normalized to zero mean and unit variance (epsilon-guarded)
    /// before `gamma`/`beta` are applied.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape().clone();
        if s.rank() != 2 {
            return Err(Error::shape("layer_norm", format!("expected rank-2 input, got {s}")));
        }
        let (rows, d) = (s.dims()[0], s.dims()[1]);
        if d < 2 {
            return Err(Error::shape("layer_norm", format!("needs width >= 2, got {d}")));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let ps = self.value(p).shape();
            if ps.dims() != [d] {
                return Err(Error::shape("layer_norm", format!("{name} {ps} vs width {d}")));
            }
        }
        let vx = self.value(x);
        let vgamma = self.arc_of(gamma);
        let vbeta = self.value(beta);
        let mut normalized = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let y = (row[c] - mu) * istd;
                normalized[r * d + c] = y;
                out[r * d + c] = vgamma.data()[c] * y + vbeta.data()[c];
            }
        }
        let normalized = Arc::new(normalized);
        let inv_std = Arc::new(inv_std);
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let back: BackFn = Box::new(move |g| {
            let mut dx = vec![0.0; rows * d];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for r in 0..rows {
                let gr = &g.data()[r * d..(r + 1) * d];
                let yr = &normalized[r * d..(r + 1) * d];
                let mut mean_dy = 0.0;
                let mut mean_dyy = 0.0;
                for c in 0..d {
                    let dy = gr[c] * vgamma.data()[c];
                    mean_dy += dy;
                    mean_dyy += dy * yr[c];
                    dgamma[c] += gr[c] * yr[c];
                    dbeta[c] += gr[c];
                }
                mean_dy /= d as f64;
                mean_dyy /= d as f64;
                for c in 0..d {
                    let dy = gr[c] * vgamma.data()[c];
                    dx[r * d + c] = (dy - mean_dy - yr[c] * mean_dyy) * inv_std[r];
                }
            }
            vec![
                (x, Tensor::new([rows, d], dx).expect("shape")),
                (gamma, Tensor::new([d], dgamma).expect("shape")),
                (beta, Tensor::new([d], dbeta).expect("shape")),
            ]
        });
        Ok(self.push_node(Tensor::new([rows, d], out)?, rg, Some(back)))
    }

    /// Group normalization over a [C, H, W] activation map with per-channel
    /// affine parameters. Used by the backbone in place of frozen batch norm.
    pub fn group_norm(&mut self, x: NodeId, groups: usize, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape().clone();
        if s.rank() != 3 {
            return Err(Error::shape("group_norm", format!("expected [C,H,W], got {s}")));
        }
        let (ch, h, w) = (s.dims()[0], s.dims()[1], s.dims()[2]);
        if groups == 0 || ch % groups != 0 {
            return Err(Error::Config(format!("group_norm: {ch} channels not divisible by {groups} groups")));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let ps = self.value(p).shape();
            if ps.dims() != [ch] {
                return Err(Error::shape("group_norm", format!("{name} {ps} vs {ch} channels")));
            }
        }
        let cpg = ch / groups;
        let spatial = h * w;
        let group_len = cpg * spatial;
        let vx = self.value(x);
        let vgamma = self.arc_of(gamma);
        let vbeta = self.value(beta);
        let mut normalized = vec![0.0; ch * spatial];
        let mut inv_std = vec![0.0; groups];
        let mut out = vec![0.0; ch * spatial];
        for (gi, istd_slot) in inv_std.iter_mut().enumerate() {
            let base = gi * group_len;
            let seg = &vx.data()[base..base + group_len];
            let mu = seg.iter().sum::<f64>() / group_len as f64;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / group_len as f64;
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            *istd_slot = istd;
            for j in 0..group_len {
                let c = gi * cpg + j / spatial;
                let y = (seg[j] - mu) * istd;
                normalized[base + j] = y;
                out[base + j] = vgamma.data()[c] * y + vbeta.data()[c];
            }
        }
        let normalized = Arc::new(normalized);
        let inv_std = Arc::new(inv_std);
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let back: BackFn = Box::new(move |g| {
            let mut dx = vec![0.0; ch * spatial];
            let mut dgamma = vec![0.0; ch];
            let mut dbeta = vec![0.0; ch];
            for gi in 0..groups {
                let base = gi * group_len;
                let mut mean_dy = 0.0;
                let mut mean_dyy = 0.0;
                for j in 0..group_len {
                    let c = gi * cpg + j / spatial;
                    let dy = g.data()[base + j] * vgamma.data()[c];
                    mean_dy += dy;
                    mean_dyy += dy * normalized[base + j];
                    dgamma[c] += g.data()[base + j] * normalized[base + j];
                    dbeta[c] += g.data()[base + j];
                }
                mean_dy /= group_len as f64;
                mean_dyy /= group_len as f64;
                for j in 0..group_len {
                    let c = gi * cpg + j / spatial;
                    let dy = g.data()[base + j] * vgamma.data()[c];
                    dx[base + j] = (dy - mean_dy - normalized[base + j] * mean_dyy) * inv_std[gi];
                }
            }
            vec![
                (x, Tensor::new([ch, h, w], dx).expect("shape")),
                (gamma, Tensor::new([ch], dgamma).expect("shape")),
                (beta, Tensor::new([ch], dbeta).expect("shape")),
            ]
        });
        Ok(self.push_node(Tensor::new([ch, h, w], out)?, rg, Some(back)))
    }

    /// Row lookup into an embedding table; backward scatter-adds so the
    /// gradient is nonzero only at looked-up ids.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.value(table).shape().clone();
        if s.rank() != 2 {
            return Err(Error::shape("embedding", format!("table must be rank 2, got {s}")));
        }
        let (vocab, d) = (s.dims()[0], s.dims()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocab(format!("id {bad} out of range 0..{vocab}")));
        }
        if ids.is_empty() {
            return Err(Error::contract("embedding", "empty id list"));
        }
        let v = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
        }
        let idx: Vec<usize> = ids.to_vec();
        let rg = self.requires(table);
        let back: BackFn = Box::new(move |g| {
            let mut dt = vec![0.0; vocab * d];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..d {
                    dt[i * d + c] += g.data()[r * d + c];
                }
            }
            vec![(table, Tensor::new([vocab, d], dt).expect("shape"))]
        });
        Ok(self.push_node(Tensor::new([ids.len(), d], data)?, rg, Some(back)))
    }

    /// 2-D cross-correlation of a [C_in, H, W] input with a
    /// [C_out, C_in, k, k] kernel, plus optional per-channel bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let is = self.value(input).shape().clone();
        let ks = self.value(kernel).shape().clone();
        if is.rank() != 3 {
            return Err(Error::shape("conv2d", format!("input must be [C,H,W], got {is}")));
        }
        if ks.rank() != 4 {
            return Err(Error::shape("conv2d", format!("kernel must be [Cout,Cin,k,k], got {ks}")));
        }
        let (c_in, h, w) = (is.dims()[0], is.dims()[1], is.dims()[2]);
        let (c_out, kc_in, kh, kw) = (ks.dims()[0], ks.dims()[1], ks.dims()[2], ks.dims()[3]);
        if kc_in != c_in {
            return Err(Error::shape("conv2d", format!("kernel expects {kc_in} channels, input has {c_in}")));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", format!("only square kernels supported, got {kh}x{kw}")));
        }
        if stride == 0 || kh == 0 {
            return Err(Error::Config("conv2d: stride and kernel size must be >= 1".into()));
        }
        let h_out = (h + 2 * padding).checked_sub(kh).map(|v| v / stride + 1);
        let w_out = (w + 2 * padding).checked_sub(kw).map(|v| v / stride + 1);
        let (h_out, w_out) = match (h_out, w_out) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::Config(format!(
                    "conv2d: output dims not positive for input {h}x{w}, kernel {kh}, stride {stride}, padding {padding}"
                )))
            }
        };
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs.dims() != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {bs} vs {c_out} output channels")));
            }
        }

        let vin = self.arc_of(input);
        let vker = self.arc_of(kernel);
        let patch = c_in * kh * kw;
        let cells = h_out * w_out;
        let cols = im2col(vin.data(), c_in, h, w, kh, stride, padding, h_out, w_out);
        let mut out = vec![0.0; c_out * cells];
        mm_nn(vker.data(), &cols, c_out, patch, cells, &mut out);
        if let Some(b) = bias {
            let vb = self.value(b);
            for oc in 0..c_out {
                let bv = vb.data()[oc];
                for cell in 0..cells {
                    out[oc * cells + cell] += bv;
                }
            }
        }
        let rg = self.requires(input)
            || self.requires(kernel)
            || bias.map(|b| self.requires(b)).unwrap_or(false);
        let back: BackFn = Box::new(move |g| {
            // recompute columns instead of keeping them alive on the tape
            let cols = im2col(vin.data(), c_in, h, w, kh, stride, padding, h_out, w_out);
            let mut dk = vec![0.0; c_out * patch];
            mm_nt(g.data(), &cols, c_out, cells, patch, &mut dk);
            let mut dcols = vec![0.0; patch * cells];
            mm_tn(vker.data(), g.data(), c_out, patch, cells, &mut dcols);
            let dx = col2im(&dcols, c_in, h, w, kh, stride, padding, h_out, w_out);
            let mut grads = vec![
                (input, Tensor::new([c_in, h, w], dx).expect("shape")),
                (kernel, Tensor::new([c_out, c_in, kh, kw], dk).expect("shape")),
            ];
            if let Some(b) = bias {
                let mut db = vec![0.0; c_out];
                for (oc, slot) in db.iter_mut().enumerate() {
                    *slot = g.data()[oc * cells..(oc + 1) * cells].iter().sum();
                }
                grads.push((b, Tensor::new([c_out], db).expect("shape")));
            }
            grads
        });
        Ok(self.push_node(Tensor::new([c_out, h_out, w_out], out)?, rg, Some(back)))
    }
}

/// Unfold conv patches into a [C_in*k*k, H_out*W_out] matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<f64> {
    let cells = h_out * w_out;
    let mut cols = vec![0.0; c_in * k * k * cells];
    for c in 0..c_in {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k * k + ki * k + kj) * cells;
                for oh in 0..h_out {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..w_out {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cols[row + oh * w_out + ow] = plane[ih as usize * w + iw as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a column-gradient matrix back onto the input, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<f64> {
    let cells = h_out * w_out;
    let mut dx = vec![0.0; c_in * h * w];
    for c in 0..c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k * k + ki * k + kj) * cells;
                for oh in 0..h_out {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..w_out {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        plane[ih as usize * w + iw as usize] += dcols[row + oh * w_out + ow];
                    }
                }
            }
        }
    }
    dx
}
