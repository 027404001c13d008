//! Convolutional trunk producing the grid-feature sequence.
//!
//! Image -> 5 stride-2 stages (stem + 4 residual stages) -> [C, H, W]
//! activation map with H = ceil(H0/32), W = ceil(W0/32) -> 1x1 channel
//! reduction -> row-major flatten to [HW, d] -> fixed 2-D positional
//! encodings added to attention inputs downstream.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId};
use crate::nn::{conv_init, ParamGroup, ParamStore};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Total downsampling of the trunk.
pub const BACKBONE_STRIDE: usize = 32;

/// Channel normalization constants applied to 8-bit RGB input.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.5;

/// Normalized image with its pre-padding size.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    /// [3, H0p, W0p] normalized pixels, zero-padded to a stride multiple.
    pub pixels: Tensor,
    /// Size before padding.
    pub source_size: (usize, usize),
}

impl ImageTensor {
    /// Normalize 8-bit interleaved RGB and zero-pad to a multiple of the
    /// backbone stride.
    pub fn from_rgb8(rgb: &[u8], height: usize, width: usize) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::shape(
                "ImageTensor::from_rgb8",
                format!("{height}x{width} rgb wants {} bytes, got {}", height * width * 3, rgb.len()),
            ));
        }
        if height < BACKBONE_STRIDE || width < BACKBONE_STRIDE {
            return Err(Error::Config(format!(
                "image {height}x{width} smaller than one backbone stride ({BACKBONE_STRIDE})"
            )));
        }
        let hp = height.div_ceil(BACKBONE_STRIDE) * BACKBONE_STRIDE;
        let wp = width.div_ceil(BACKBONE_STRIDE) * BACKBONE_STRIDE;
        let mut data = vec![0.0; 3 * hp * wp];
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let v = rgb[(y * width + x) * 3 + c] as f64 / 255.0;
                    data[c * hp * wp + y * wp + x] = (v - PIXEL_MEAN) / PIXEL_STD;
                }
            }
        }
        Ok(ImageTensor {
            pixels: Tensor::new([3, hp, wp], data)?,
            source_size: (height, width),
        })
    }

    /// Grid shape this image maps to: (ceil(H0/32), ceil(W0/32)).
    pub fn grid_shape(&self) -> (usize, usize) {
        (
            self.source_size.0.div_ceil(BACKBONE_STRIDE),
            self.source_size.1.div_ceil(BACKBONE_STRIDE),
        )
    }
}

/// Visual sequence length for an input image size.
pub fn visual_token_count(height: usize, width: usize) -> usize {
    height.div_ceil(BACKBONE_STRIDE) * width.div_ceil(BACKBONE_STRIDE)
}

/// Scale-augmentation policy: resize so the short side falls in
/// [min_short, max_short] while the long side stays at most max_long.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScalePolicy {
    pub min_short: usize,
    pub max_short: usize,
    pub max_long: usize,
}

impl Default for ScalePolicy {
    fn default() -> Self {
        // desk-scale counterpart of the usual 480..800 / 1333 policy
        ScalePolicy { min_short: 64, max_short: 96, max_long: 160 }
    }
}

impl ScalePolicy {
    /// Target (height, width) for a source size given a sampled short side.
    pub fn target_size(&self, height: usize, width: usize, short: usize) -> (usize, usize) {
        let short = short.clamp(self.min_short, self.max_short);
        let (s, l) = if height <= width { (height, width) } else { (width, height) };
        let mut new_s = short as f64;
        let mut new_l = new_s * l as f64 / s as f64;
        if new_l > self.max_long as f64 {
            let f = self.max_long as f64 / new_l;
            new_l = self.max_long as f64;
            new_s *= f;
        }
        let (ns, nl) = (new_s.round().max(1.0) as usize, new_l.round().max(1.0) as usize);
        if height <= width {
            (ns, nl)
        } else {
            (nl, ns)
        }
    }
}

/// Nearest-neighbor resize of interleaved RGB8.
pub fn resize_rgb8(rgb: &[u8], h: usize, w: usize, nh: usize, nw: usize) -> Vec<u8> {
    let mut out = vec![0u8; nh * nw * 3];
    for y in 0..nh {
        let sy = (y * h) / nh;
        for x in 0..nw {
            let sx = (x * w) / nw;
            let src = (sy * w + sx) * 3;
            let dst = (y * nw + x) * 3;
            out[dst..dst + 3].copy_from_slice(&rgb[src..src + 3]);
        }
    }
    out
}

/// Widths of the stem and the four downsampling stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub widths: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { widths: [16, 32, 48, 64] }
    }
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        self.widths[3]
    }

    fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        Ok(())
    }
}

fn norm_groups(channels: usize) -> usize {
    for g in [8, 4, 2] {
        if channels.is_multiple_of(g) {
            return g;
        }
    }
    1
}

struct ConvGn {
    kernel: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
    stride: usize,
}

impl ConvGn {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        ConvGn {
            kernel: store.register(format!("{name}.kernel"), conv_init(rng, c_out, c_in, k), ParamGroup::Backbone),
            bias: store.register(format!("{name}.bias"), Tensor::zeros([c_out]), ParamGroup::Backbone),
            gamma: store.register(format!("{name}.gamma"), Tensor::full([c_out], 1.0), ParamGroup::Backbone),
            beta: store.register(format!("{name}.beta"), Tensor::zeros([c_out]), ParamGroup::Backbone),
            groups: norm_groups(c_out),
            stride,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, padding: usize) -> Result<NodeId> {
        let kernel = store.leaf(g, self.kernel);
        let bias = store.leaf(g, self.bias);
        let y = g.conv2d(x, kernel, Some(bias), self.stride, padding)?;
        let gamma = store.leaf(g, self.gamma);
        let beta = store.leaf(g, self.beta);
        g.group_norm(y, self.groups, gamma, beta)
    }
}

struct Stage {
    down: ConvGn,
    res1: ConvGn,
    res2: ConvGn,
}

/// Five-stage residual trunk with group normalization, total stride 32.
pub struct Backbone {
    stem: ConvGn,
    stages: Vec<Stage>,
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let w = config.widths;
        let stem = ConvGn::new(store, rng, "backbone.stem", 3, w[0], 3, 2);
        let mut stages = Vec::with_capacity(4);
        let mut c_in = w[0];
        for (i, &c_out) in w.iter().enumerate() {
            let name = format!("backbone.stage{}", i + 1);
            stages.push(Stage {
                down: ConvGn::new(store, rng, &format!("{name}.down"), c_in, c_out, 3, 2),
                res1: ConvGn::new(store, rng, &format!("{name}.res1"), c_out, c_out, 3, 1),
                res2: ConvGn::new(store, rng, &format!("{name}.res2"), c_out, c_out, 3, 1),
            });
            c_in = c_out;
        }
        Ok(Backbone { stem, stages, config })
    }

    /// Lower-resolution activation map [C, H, W] at total stride 32.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, img: &ImageTensor) -> Result<NodeId> {
        let dims = img.pixels.dims();
        if !dims[1].is_multiple_of(BACKBONE_STRIDE) || !dims[2].is_multiple_of(BACKBONE_STRIDE) {
            return Err(Error::Config(format!(
                "image must be padded to a multiple of {BACKBONE_STRIDE}, got {}x{}",
                dims[1], dims[2]
            )));
        }
        let mut x = g.input(img.pixels.clone());
        x = self.stem.forward(g, store, x, 1)?;
        x = g.relu(x);
        for stage in &self.stages {
            x = stage.down.forward(g, store, x, 1)?;
            x = g.relu(x);
            let r = stage.res1.forward(g, store, x, 1)?;
            let r = g.relu(r);
            let r = stage.res2.forward(g, store, r, 1)?;
            let sum = g.add(x, r)?;
            x = g.relu(sum);
        }
        Ok(x)
    }

    /// Name prefix of the earliest trainable tensor, for gradient probes.
    pub fn stem_kernel(&self) -> ParamId {
        self.stem.kernel
    }
}

/// 1x1 convolution reducing channels to the transformer width, then
/// row-major flattening: row (h * W + w) holds grid cell (h, w).
pub struct GridReducer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub dim: usize,
}

impl GridReducer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, c_in: usize, dim: usize) -> Result<Self> {
        if dim > c_in {
            return Err(Error::Config(format!(
                "reduction wants d <= C, got d={dim} > C={c_in}"
            )));
        }
        Ok(GridReducer {
            kernel: store.register("reduce.kernel", conv_init(rng, dim, c_in, 1), ParamGroup::Backbone),
            bias: store.register("reduce.bias", Tensor::zeros([dim]), ParamGroup::Backbone),
            c_in,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fmap: NodeId) -> Result<NodeId> {
        let kernel = store.leaf(g, self.kernel);
        let bias = store.leaf(g, self.bias);
        let reduced = g.conv2d(fmap, kernel, Some(bias), 1, 0)?;
        g.chw_to_rows(reduced)
    }
}

/// Flattened grid features plus their fixed positional encodings.
pub struct GridFeatureMap {
    /// [HW x d] on the tape.
    pub features: NodeId,
    pub grid_shape: (usize, usize),
    /// [HW x d], deterministic function of (grid_shape, d).
    pub pos_encoding: Arc<Tensor>,
}

impl Graph {
    /// [C, H, W] -> [H*W, C] with row-major cell order.
    pub fn chw_to_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape().clone();
        if s.rank() != 3 {
            return Err(Error::shape("chw_to_rows", format!("expected [C,H,W], got {s}")));
        }
        let (c, h, w) = (s.dims()[0], s.dims()[1], s.dims()[2]);
        let hw = h * w;
        let v = self.arc_of(x);
        let mut data = vec![0.0; hw * c];
        for ch in 0..c {
            for cell in 0..hw {
                data[cell * c + ch] = v.data()[ch * hw + cell];
            }
        }
        type BackFn = Box<dyn FnOnce(&Tensor) -> Vec<(NodeId, Tensor)> + Send>;
        let rg = self.requires(x);
        let back: BackFn = Box::new(move |g| {
            let mut d = vec![0.0; c * hw];
            for ch in 0..c {
                for cell in 0..hw {
                    d[ch * hw + cell] = g.data()[cell * c + ch];
                }
            }
            vec![(x, Tensor::new([c, h, w], d).expect("shape"))]
        });
        Ok(self.push_node(Tensor::new([hw, c], data)?, rg, Some(back)))
    }
}

/// Fixed separable sinusoidal encoding for a 2-D grid.
///
/// The first d/2 channels encode the row index, the last d/2 the column
/// index, each as interleaved sine/cosine pairs at geometric frequencies.
pub fn positional_encoding_2d(grid_shape: (usize, usize), d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional encoding needs d divisible by 4 (two axes x sin/cos pairs), got {d}"
        )));
    }
    let (h, w) = grid_shape;
    if h == 0 || w == 0 {
        return Err(Error::Config("grid dimensions must be positive".into()));
    }
    let half = d / 2;
    let axis = |index: usize, i: usize| -> f64 {
        let exponent = 2.0 * ((i / 2) as f64) / half as f64;
        let t = index as f64 / 10_000f64.powf(exponent);
        if i.is_multiple_of(2) {
            t.sin()
        } else {
            t.cos()
        }
    };
    let mut data = vec![0.0; h * w * d];
    for row in 0..h {
        for col in 0..w {
            let base = (row * w + col) * d;
            for i in 0..half {
                data[base + i] = axis(row, i);
                data[base + half + i] = axis(col, i);
            }
        }
    }
    Tensor::new([h * w, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    fn flat_image(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_rgb8(&vec![128u8; h * w * 3], h, w).unwrap()
    }

    #[test]
    fn grid_shape_follows_ceil_division() {
        assert_eq!(flat_image(480, 640).grid_shape(), (15, 20));
        assert_eq!(flat_image(64, 64).grid_shape(), (2, 2));
        assert_eq!(visual_token_count(64, 64), 4);
        assert_eq!(visual_token_count(128, 128), 16, "doubling sides quadruples HW");
        assert_eq!(visual_token_count(448, 448), 196);
        assert_eq!(visual_token_count(800, 1333), 1050);
    }

    #[test]
    fn tiny_image_is_rejected() {
        assert!(matches!(
            ImageTensor::from_rgb8(&vec![0u8; 16 * 16 * 3], 16, 16),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn backbone_produces_stride_32_map() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let cfg = BackboneConfig { widths: [4, 4, 8, 8] };
        let bb = Backbone::new(&mut store, &mut r, cfg).unwrap();
        let img = flat_image(64, 96);
        let mut g = Graph::inference();
        let out = bb.forward(&mut g, &store, &img).unwrap();
        assert_eq!(g.value(out).dims(), &[8, 2, 3]);
    }

    #[test]
    fn gradient_reaches_the_stem() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let bb = Backbone::new(&mut store, &mut r, BackboneConfig { widths: [4, 4, 8, 8] }).unwrap();
        let reducer = GridReducer::new(&mut store, &mut r, 8, 4).unwrap();
        let img = ImageTensor::from_rgb8(
            &(0..64 * 64 * 3).map(|i| (i % 251) as u8).collect::<Vec<_>>(),
            64,
            64,
        )
        .unwrap();
        let mut g = Graph::new();
        let fmap = bb.forward(&mut g, &store, &img).unwrap();
        let rows = reducer.forward(&mut g, &store, fmap).unwrap();
        let loss = g.sum_all(rows);
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        let stem = grads.iter().find(|(id, _)| *id == bb.stem_kernel()).expect("stem grad");
        assert!(stem.1.l2_norm() > 0.0, "loss must reach the first conv");
    }

    #[test]
    fn reducer_identity_slice_selects_leading_channels() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let (c, d) = (6, 3);
        let reducer = GridReducer::new(&mut store, &mut r, c, d).unwrap();
        // overwrite the 1x1 kernel with a leading-channel selector
        let mut sel = Tensor::zeros([d, c, 1, 1]);
        for i in 0..d {
            sel.data_mut()[i * c + i] = 1.0;
        }
        *std::sync::Arc::make_mut(&mut store.entry_mut(reducer.kernel).value) = sel;

        let (h, w) = (2, 2);
        let fmap_data: Vec<f64> = (0..c * h * w).map(|i| i as f64).collect();
        let mut g = Graph::inference();
        let fmap = g.input(Tensor::new([c, h, w], fmap_data.clone()).unwrap());
        let rows = reducer.forward(&mut g, &store, fmap).unwrap();
        let v = g.value(rows);
        assert_eq!(v.dims(), &[4, d]);
        // row-major flatten: rows ordered (0,0),(0,1),(1,0),(1,1)
        for cell in 0..h * w {
            for ch in 0..d {
                assert_eq!(v.data()[cell * d + ch], fmap_data[ch * h * w + cell]);
            }
        }
    }

    #[test]
    fn reducer_rejects_expanding_channels() {
        let mut store = ParamStore::new();
        let mut r = rng();
        assert!(GridReducer::new(&mut store, &mut r, 4, 8).is_err());
    }

    #[test]
    fn pos_encoding_shares_row_half_within_a_grid_row() {
        let d = 8;
        let enc = positional_encoding_2d((3, 4), d).unwrap();
        let half = d / 2;
        // cells (1,0) and (1,3) share the first half exactly
        let a = &enc.data()[4 * d..4 * d + half];
        let b = &enc.data()[(4 + 3) * d..(4 + 3) * d + half];
        assert_eq!(a, b);
        // bit-identical across calls
        let enc2 = positional_encoding_2d((3, 4), d).unwrap();
        assert_eq!(enc.data(), enc2.data());
    }

    #[test]
    fn pos_encoding_distinct_for_all_cells_of_3x3() {
        let d = 8;
        let enc = positional_encoding_2d((3, 3), d).unwrap();
        let mut min_dist = f64::INFINITY;
        for i in 0..9 {
            for j in (i + 1)..9 {
                let a = &enc.data()[i * d..(i + 1) * d];
                let b = &enc.data()[j * d..(j + 1) * d];
                let dist: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                min_dist = min_dist.min(dist);
            }
        }
        assert!(min_dist > 0.0, "all nine encodings must be pairwise distinct");
    }

    #[test]
    fn pos_encoding_rejects_odd_widths() {
        assert!(positional_encoding_2d((2, 2), 6).is_err());
    }

    #[test]
    fn scale_policy_respects_long_side_cap() {
        let p = ScalePolicy { min_short: 64, max_short: 96, max_long: 160 };
        let (h, w) = p.target_size(100, 400, 96);
        assert!(h <= 160 && w <= 160 || w == 160);
        assert_eq!(w, 160);
        assert!(h < 96);
    }

    #[test]
    fn resize_preserves_flat_color() {
        let rgb = vec![7u8; 40 * 40 * 3];
        let out = resize_rgb8(&rgb, 40, 40, 64, 72);
        assert_eq!(out.len(), 64 * 72 * 3);
        assert!(out.iter().all(|&b| b == 7));
    }
}
