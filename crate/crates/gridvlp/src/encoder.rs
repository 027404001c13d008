//! Cross-modal transformer encoder over the concatenated
//! `[CLS] text [SEP] | image-grid` sequence, plus the masked-language-model
//! and image-text-matching heads.

use crate::error::{Error, Result};
use crate::graph::{AttnMask, Graph, NodeId, ParamId};
use crate::nn::{AttentionConfig, Embedding, EncoderLayer, Linear, ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::text::{TokenSequence, CLS, MASK, PAD, SEP, SPECIAL_TOKENS};
use crate::vision::GridFeatureMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::ops::Range;
use std::sync::Arc;

/// Per-layer outputs of one encoder pass plus span bookkeeping.
pub struct CrossModalState {
    pub layer_outputs: Vec<NodeId>,
    pub text_span: Range<usize>,
    pub image_span: Range<usize>,
    /// Active (attendable) flags per sequence position.
    pub active: Vec<bool>,
    pub final_output: NodeId,
    /// Final-layer `[CLS]` row, shape [1 x d].
    pub cls: NodeId,
    /// Positional term over the whole sequence (zeros on the text span),
    /// shared with decoder cross-attention keys.
    pub pos: NodeId,
}

/// Stack of encoder blocks with full cross-modal self-attention.
pub struct CrossModalEncoder {
    pub layers: Vec<EncoderLayer>,
    pub cfg: AttentionConfig,
}

impl CrossModalEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: AttentionConfig,
        depth: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("encoder depth must be >= 1".into()));
        }
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(store, rng, &format!("encoder.layer{i}"), cfg, ParamGroup::Transformer))
            .collect::<Result<Vec<_>>>()?;
        Ok(CrossModalEncoder { layers, cfg })
    }

    /// Encode a text embedding and grid features jointly. Every position may
    /// attend every non-pad position; image positional encodings are added
    /// to each layer's attention input. `block_text_to_image` is a
    /// diagnostic mode that forbids text rows from reading image columns.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        text_emb: NodeId,
        text_active: &[bool],
        image: &GridFeatureMap,
        block_text_to_image: bool,
    ) -> Result<CrossModalState> {
        let d = self.cfg.hidden_size;
        let ts = g.value(text_emb).shape().clone();
        if ts.rank() != 2 || ts.dims()[1] != d {
            return Err(Error::shape("encode", format!("text embedding {ts} vs hidden {d}")));
        }
        let lt = ts.dims()[0];
        if text_active.len() != lt {
            return Err(Error::shape(
                "encode",
                format!("{lt} text rows vs {} mask flags", text_active.len()),
            ));
        }
        let hw = g.value(image.features).dims()[0];
        if g.value(image.features).dims()[1] != d || image.pos_encoding.dims() != [hw, d] {
            return Err(Error::shape(
                "encode",
                format!("image features {} vs hidden {d}", g.value(image.features).shape()),
            ));
        }
        let total = lt + hw;
        let mut active = text_active.to_vec();
        active.extend(std::iter::repeat_n(true, hw));

        // positional term: zero over text (positions are baked into the text
        // embedding), fixed encodings over the image span, re-added at every
        // layer's attention input
        let mut pos = vec![0.0; total * d];
        pos[lt * d..].copy_from_slice(image.pos_encoding.data());
        let pos = g.constant(Arc::new(Tensor::new([total, d], pos)?));

        let allow = {
            let active = active.clone();
            AttnMask::from_fn(total, total, move |i, j| {
                if !active[j] {
                    return false;
                }
                if block_text_to_image && i < lt && j >= lt {
                    return false;
                }
                true
            })
        };

        let mut x = g.concat_rows(&[text_emb, image.features])?;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(g, store, x, Some(pos), &allow)?;
            layer_outputs.push(x);
        }
        let cls = g.slice_rows(x, 0, 1)?;
        Ok(CrossModalState {
            layer_outputs,
            text_span: 0..lt,
            image_span: lt..total,
            active,
            final_output: x,
            cls,
            pos,
        })
    }
}

// -- masked language modeling ------------------------------------------------------

/// How one selected position was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random(usize),
    Keep,
}

/// Positions selected for masking in one sequence, with their originals.
#[derive(Debug, Clone, Default)]
pub struct MlmBatchMask {
    /// Absolute positions into the token sequence.
    pub masked_positions: Vec<usize>,
    pub original_ids: Vec<usize>,
    pub corruption: Vec<Corruption>,
}

impl MlmBatchMask {
    pub fn is_empty(&self) -> bool {
        self.masked_positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.masked_positions.len()
    }

    /// Sequence with the corruptions applied.
    pub fn apply(&self, seq: &TokenSequence) -> TokenSequence {
        let mut out = seq.clone();
        for (k, &pos) in self.masked_positions.iter().enumerate() {
            out.token_ids[pos] = match self.corruption[k] {
                Corruption::Mask => MASK,
                Corruption::Random(id) => id,
                Corruption::Keep => out.token_ids[pos],
            };
        }
        out
    }
}

/// Bernoulli(rate) selection over real word positions; `[CLS]`, `[SEP]`,
/// `[PAD]` are never masked. Selected positions get the standard
/// 80% `[MASK]` / 10% random / 10% keep treatment.
pub fn sample_mlm_mask(
    seq: &TokenSequence,
    rate: f64,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> MlmBatchMask {
    let mut mask = MlmBatchMask::default();
    for (pos, &id) in seq.token_ids.iter().enumerate() {
        if id == CLS || id == SEP || id == PAD {
            continue;
        }
        if !seq.attention_mask[pos] {
            continue;
        }
        if rng.random::<f64>() >= rate {
            continue;
        }
        let roll: f64 = rng.random();
        let corruption = if roll < 0.8 {
            Corruption::Mask
        } else if roll < 0.9 {
            let lo = SPECIAL_TOKENS.len();
            Corruption::Random(rng.random_range(lo..vocab_size))
        } else {
            Corruption::Keep
        };
        mask.masked_positions.push(pos);
        mask.original_ids.push(id);
        mask.corruption.push(corruption);
    }
    mask
}

/// Vocabulary prediction head over masked positions. Tied mode projects
/// through the shared token table; untied mode owns a full linear layer.
pub struct MlmHead {
    pub bias: ParamId,
    pub untied: Option<Linear>,
    pub vocab: usize,
}

impl MlmHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        hidden: usize,
        vocab: usize,
        tied: bool,
    ) -> Self {
        let bias = store.register("mlm.bias", Tensor::zeros([vocab]), ParamGroup::Transformer);
        let untied = if tied {
            None
        } else {
            Some(Linear::new(store, rng, "mlm.untied", hidden, vocab, ParamGroup::Transformer))
        };
        MlmHead { bias, untied, vocab }
    }

    /// Vocabulary logits for the given hidden rows.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        token_table: &Embedding,
        hidden_rows: NodeId,
    ) -> Result<NodeId> {
        match &self.untied {
            Some(lin) => lin.forward(g, store, hidden_rows),
            None => {
                let table = store.leaf(g, token_table.table);
                let logits = g.matmul_nt(hidden_rows, table)?;
                let bias = store.leaf(g, self.bias);
                g.add_bias(logits, bias)
            }
        }
    }
}

/// Mean cross entropy over masked positions only. Returns the number of
/// masked positions alongside the loss; zero positions yield a constant
/// zero loss the caller should count as a warning.
pub fn mlm_loss(
    g: &mut Graph,
    store: &ParamStore,
    state: &CrossModalState,
    mask: &MlmBatchMask,
    head: &MlmHead,
    token_table: &Embedding,
) -> Result<(NodeId, usize)> {
    if mask.is_empty() {
        return Ok((g.input(Tensor::scalar(0.0)), 0));
    }
    for &p in &mask.masked_positions {
        if !state.text_span.contains(&p) {
            return Err(Error::contract(
                "mlm_loss",
                format!("masked position {p} outside text span {:?}", state.text_span),
            ));
        }
    }
    let rows = g.gather_rows(state.final_output, &mask.masked_positions)?;
    let logits = head.logits(g, store, token_table, rows)?;
    let n = mask.len();
    let weights = vec![1.0 / n as f64; n];
    let loss = g.cross_entropy_rows(logits, &mask.original_ids, &weights, 0.0)?;
    Ok((loss, n))
}

// -- image-text matching -------------------------------------------------------------

/// Binary cross entropy on a 2-way head over the final `[CLS]` vector.
pub fn itm_loss(
    g: &mut Graph,
    store: &ParamStore,
    state: &CrossModalState,
    head: &Linear,
    matched: bool,
) -> Result<NodeId> {
    let logits = head.forward(g, store, state.cls)?;
    let target = if matched { 1usize } else { 0usize };
    g.cross_entropy_rows(logits, &[target], &[1.0], 0.0)
}

/// Detached ITM prediction (argmax over the 2-way head).
pub fn itm_predict(g: &mut Graph, store: &ParamStore, state: &CrossModalState, head: &Linear) -> Result<bool> {
    let logits = head.forward(g, store, state.cls)?;
    let v = g.value(logits);
    Ok(v.data()[1] > v.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, Vocabulary};
    use crate::vision::positional_encoding_2d;
    use rand_chacha::rand_core::SeedableRng;

    fn cfg() -> AttentionConfig {
        AttentionConfig {
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            dropout_rate: 0.0,
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["a", "red", "circle", "blue", "square"].iter().map(|s| s.to_string()))
            .unwrap()
    }

    struct Fixture {
        store: ParamStore,
        enc: CrossModalEncoder,
        token: Embedding,
        text: crate::text::TextEmbedder,
        itm: Linear,
        mlm: MlmHead,
    }

    fn fixture(tied: bool) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = vocab();
        let token = Embedding::new(&mut store, &mut rng, "token", v.len(), 8, ParamGroup::Transformer);
        let token_copy = Embedding { table: token.table, vocab: token.vocab, dim: token.dim };
        let text = crate::text::TextEmbedder::new(&mut store, &mut rng, token_copy, 16, 0.0);
        let enc = CrossModalEncoder::new(&mut store, &mut rng, cfg(), 2).unwrap();
        let itm = Linear::new(&mut store, &mut rng, "itm", 8, 2, ParamGroup::Transformer);
        let mlm = MlmHead::new(&mut store, &mut rng, 8, v.len(), tied);
        Fixture { store, enc, token, text, itm, mlm }
    }

    fn grid(g: &mut Graph, data: Vec<f64>, h: usize, w: usize, d: usize) -> GridFeatureMap {
        GridFeatureMap {
            features: g.input(Tensor::new([h * w, d], data).unwrap()),
            grid_shape: (h, w),
            pos_encoding: Arc::new(positional_encoding_2d((h, w), d).unwrap()),
        }
    }

    #[test]
    fn degenerate_single_zero_cell_image_still_encodes() {
        let f = fixture(true);
        let seq = tokenize("a red circle", &vocab(), 16).unwrap();
        let mut g = Graph::inference();
        let emb = f.text.embed(&mut g, &f.store, &seq).unwrap();
        let img = GridFeatureMap {
            features: g.input(Tensor::zeros([1, 8])),
            grid_shape: (1, 1),
            pos_encoding: Arc::new(positional_encoding_2d((1, 1), 8).unwrap()),
        };
        let state = f
            .enc
            .encode(&mut g, &f.store, emb, &seq.attention_mask, &img, false)
            .unwrap();
        assert!(g.value(state.final_output).is_finite());
        assert_eq!(state.text_span, 0..5);
        assert_eq!(state.image_span, 5..6);
        // ITM head runs on the CLS vector
        let logits = f.itm.forward(&mut g, &f.store, state.cls).unwrap();
        assert!(g.value(logits).is_finite());
    }

    #[test]
    fn permuting_grid_cells_with_positions_permutes_their_rows() {
        let f = fixture(true);
        let seq = tokenize("a red circle", &vocab(), 16).unwrap();
        let d = 8;
        let feat: Vec<f64> = (0..4 * d).map(|i| (i as f64 * 0.13).sin()).collect();
        let pos = positional_encoding_2d((2, 2), d).unwrap();
        // swap grid cells 1 and 2 together with their positional rows
        let perm = [0usize, 2, 1, 3];
        let permute = |src: &[f64]| {
            let mut out = vec![0.0; 4 * d];
            for (dst, &s) in perm.iter().enumerate() {
                out[dst * d..(dst + 1) * d].copy_from_slice(&src[s * d..(s + 1) * d]);
            }
            out
        };
        let run = |feat: Vec<f64>, pos_data: Vec<f64>| {
            let mut g = Graph::inference();
            let emb = f.text.embed(&mut g, &f.store, &seq).unwrap();
            let img = GridFeatureMap {
                features: g.input(Tensor::new([4, d], feat).unwrap()),
                grid_shape: (2, 2),
                pos_encoding: Arc::new(Tensor::new([4, d], pos_data).unwrap()),
            };
            let state = f
                .enc
                .encode(&mut g, &f.store, emb, &seq.attention_mask, &img, false)
                .unwrap();
            g.value(state.final_output).data().to_vec()
        };
        let base = run(feat.clone(), pos.data().to_vec());
        let swapped = run(permute(&feat), permute(pos.data()));
        let lt = 5;
        for row in 0..9 {
            let want_row = if row < lt {
                row
            } else {
                lt + perm[row - lt]
            };
            for c in 0..d {
                let a = base[want_row * d + c];
                let b = swapped[row * d + c];
                assert!((a - b).abs() < 1e-9, "row {row} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn blocking_text_to_image_makes_mlm_image_independent() {
        let f = fixture(true);
        let v = vocab();
        let seq = tokenize("a red circle", &v, 16).unwrap();
        let mask = MlmBatchMask {
            masked_positions: vec![2],
            original_ids: vec![seq.token_ids[2]],
            corruption: vec![Corruption::Mask],
        };
        let corrupted = mask.apply(&seq);
        let run = |image_fill: f64| {
            let mut g = Graph::inference();
            let emb = f.text.embed(&mut g, &f.store, &corrupted).unwrap();
            let img = grid(&mut g, vec![image_fill; 4 * 8], 2, 2, 8);
            let state = f
                .enc
                .encode(&mut g, &f.store, emb, &corrupted.attention_mask, &img, true)
                .unwrap();
            let rows = g.gather_rows(state.final_output, &mask.masked_positions).unwrap();
            let logits = f.mlm.logits(&mut g, &f.store, &f.token, rows).unwrap();
            g.value(logits).data().to_vec()
        };
        assert_eq!(run(0.25), run(-3.0), "blocked text rows must ignore image content bit-for-bit");
    }

    #[test]
    fn mlm_loss_uniform_head_is_ln_vocab() {
        let mut f = fixture(false);
        let v = vocab();
        // untied head forced to zero weights and bias -> exactly uniform logits
        let untied_w = f.mlm.untied.as_ref().unwrap().w;
        *Arc::make_mut(&mut f.store.entry_mut(untied_w).value) = Tensor::zeros([8, v.len()]);
        let seq = tokenize("red circle", &v, 16).unwrap();
        let mask = MlmBatchMask {
            masked_positions: vec![1],
            original_ids: vec![seq.token_ids[1]],
            corruption: vec![Corruption::Mask],
        };
        let corrupted = mask.apply(&seq);
        let mut g = Graph::inference();
        let emb = f.text.embed(&mut g, &f.store, &corrupted).unwrap();
        let img = grid(&mut g, vec![0.1; 4 * 8], 2, 2, 8);
        let state = f
            .enc
            .encode(&mut g, &f.store, emb, &corrupted.attention_mask, &img, false)
            .unwrap();
        let (loss, n) = mlm_loss(&mut g, &f.store, &state, &mask, &f.mlm, &f.token).unwrap();
        assert_eq!(n, 1);
        let want = (v.len() as f64).ln();
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn mlm_loss_zero_positions_is_defined_zero() {
        let f = fixture(true);
        let v = vocab();
        let seq = tokenize("red", &v, 16).unwrap();
        let mut g = Graph::inference();
        let emb = f.text.embed(&mut g, &f.store, &seq).unwrap();
        let img = grid(&mut g, vec![0.0; 4 * 8], 2, 2, 8);
        let state = f
            .enc
            .encode(&mut g, &f.store, emb, &seq.attention_mask, &img, false)
            .unwrap();
        let (loss, n) = mlm_loss(&mut g, &f.store, &state, &MlmBatchMask::default(), &f.mlm, &f.token).unwrap();
        assert_eq!(n, 0);
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn itm_untrained_head_is_chance_level() {
        let mut f = fixture(true);
        let v = vocab();
        // a freshly zeroed 2-way head scores exactly ln 2 on any input
        *Arc::make_mut(&mut f.store.entry_mut(f.itm.w).value) = Tensor::zeros([8, 2]);
        let seq = tokenize("a blue square", &v, 16).unwrap();
        let mut g = Graph::inference();
        let emb = f.text.embed(&mut g, &f.store, &seq).unwrap();
        let img = grid(&mut g, vec![0.3; 4 * 8], 2, 2, 8);
        let state = f
            .enc
            .encode(&mut g, &f.store, emb, &seq.attention_mask, &img, false)
            .unwrap();
        let loss = itm_loss(&mut g, &f.store, &state, &f.itm, true).unwrap();
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn positional_encodings_are_consumed_at_every_layer() {
        // encode() must equal a manual roll-out that adds pos at each layer,
        // and differ from one that feeds pos to the first layer only
        let f = fixture(true);
        let seq = tokenize("a red circle", &vocab(), 16).unwrap();
        let d = 8;
        let feat: Vec<f64> = (0..4 * d).map(|i| (i as f64 * 0.19).sin()).collect();
        let pos = positional_encoding_2d((2, 2), d).unwrap();

        let manual = |pos_layers: [bool; 2]| {
            let mut g = Graph::inference();
            let emb = f.text.embed(&mut g, &f.store, &seq).unwrap();
            let img = g.input(Tensor::new([4, d], feat.clone()).unwrap());
            let x0 = g.concat_rows(&[emb, img]).unwrap();
            let total = 9;
            let mut pos_full = vec![0.0; total * d];
            pos_full[5 * d..].copy_from_slice(pos.data());
            let pos_node = g.input(Tensor::new([total, d], pos_full).unwrap());
            let mask = crate::graph::AttnMask::full(total, total);
            let mut x = x0;
            for (layer, &use_pos) in f.enc.layers.iter().zip(&pos_layers) {
                let p = if use_pos { Some(pos_node) } else { None };
                x = layer.forward(&mut g, &f.store, x, p, &mask).unwrap();
            }
            g.value(x).data().to_vec()
        };

        let mut g = Graph::inference();
        let emb = f.text.embed(&mut g, &f.store, &seq).unwrap();
        let img = GridFeatureMap {
            features: g.input(Tensor::new([4, d], feat.clone()).unwrap()),
            grid_shape: (2, 2),
            pos_encoding: Arc::new(pos.clone()),
        };
        let state = f
            .enc
            .encode(&mut g, &f.store, emb, &seq.attention_mask, &img, false)
            .unwrap();
        let encoded = g.value(state.final_output).data().to_vec();
        assert_eq!(
            &encoded[..d],
            g.value(state.cls).data(),
            "the CLS vector is row 0 of the final layer"
        );

        assert_eq!(encoded, manual([true, true]), "pos must feed every layer");
        assert_ne!(encoded, manual([true, false]), "dropping pos at one layer must change the output");
    }

    #[test]
    fn corruption_split_is_80_10_10() {
        let v = vocab();
        let mut long = String::new();
        for _ in 0..30 {
            long.push_str("red circle ");
        }
        let seq = tokenize(long.trim(), &v, 40).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        for _ in 0..2000 {
            let m = sample_mlm_mask(&seq, 0.15, v.len(), &mut rng);
            for c in &m.corruption {
                total += 1;
                match c {
                    Corruption::Mask => counts[0] += 1,
                    Corruption::Random(id) => {
                        assert!(*id >= SPECIAL_TOKENS.len(), "random draws avoid specials");
                        counts[1] += 1;
                    }
                    Corruption::Keep => counts[2] += 1,
                }
            }
        }
        let frac = |c: usize| c as f64 / total as f64;
        assert!((frac(counts[0]) - 0.8).abs() < 0.02, "mask fraction {}", frac(counts[0]));
        assert!((frac(counts[1]) - 0.1).abs() < 0.02, "random fraction {}", frac(counts[1]));
        assert!((frac(counts[2]) - 0.1).abs() < 0.02, "keep fraction {}", frac(counts[2]));
    }

    #[test]
    fn mask_sampler_respects_specials_and_rate() {
        let v = vocab();
        let mut long = String::new();
        for _ in 0..30 {
            long.push_str("red circle ");
        }
        let seq = tokenize(long.trim(), &v, 40).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut total = 0usize;
        let mut eligible = 0usize;
        for _ in 0..400 {
            let m = sample_mlm_mask(&seq, 0.15, v.len(), &mut rng);
            for &p in &m.masked_positions {
                assert!(seq.token_ids[p] != CLS && seq.token_ids[p] != SEP && seq.token_ids[p] != PAD);
            }
            total += m.len();
            eligible += seq.active_len() - 2;
        }
        let rate = total as f64 / eligible as f64;
        assert!((rate - 0.15).abs() < 0.02, "empirical mask rate {rate}");
    }
}
