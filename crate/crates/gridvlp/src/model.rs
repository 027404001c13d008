//! The assembled model: text embedder, convolutional trunk, cross-modal
//! encoder, dual-mode decoder, and the four pretraining loss heads.

use crate::data::SceneAnnotation;
use crate::decoder::{beam_search, greedy_decode, caption_target_ids, DetectionSet, DualModeDecoder, CaptionPrefix};
use crate::encoder::{itm_loss, mlm_loss, CrossModalEncoder, CrossModalState, MlmBatchMask, MlmHead};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::matching::{detection_loss, hungarian, matching_cost, Assignment, DetectionNodes, GroundTruthObjects};
use crate::nn::{AttentionConfig, Embedding, Linear, ParamGroup, ParamStore};
use crate::text::{tokenize, TextEmbedder, TokenSequence, Vocabulary};
use crate::vision::{positional_encoding_2d, Backbone, BackboneConfig, GridFeatureMap, ImageTensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Model geometry and behavioral switches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub attention: AttentionConfig,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub backbone: BackboneConfig,
    pub max_text_len: usize,
    pub max_caption_len: usize,
    pub num_classes: usize,
    pub num_attrs: usize,
    /// Tie the MLM head to the token embedding table.
    pub tie_mlm_head: bool,
    /// Detection-mode cross-attention may read the text span.
    pub detect_cross_attend_text: bool,
    /// Emit detection heads at every decoder layer instead of only the last.
    pub aux_detection_outputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            attention: AttentionConfig::default(),
            encoder_layers: 6,
            decoder_layers: 6,
            num_queries: 100,
            // the trunk must end at least as wide as the transformer for the
            // 1x1 reduction; 256 matches the default hidden size
            backbone: BackboneConfig { widths: [64, 128, 192, 256] },
            max_text_len: 40,
            max_caption_len: 24,
            num_classes: crate::data::SHAPES.len(),
            num_attrs: crate::data::COLORS.len(),
            tie_mlm_head: true,
            detect_cross_attend_text: true,
            aux_detection_outputs: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: small enough to overfit 16 scenes in minutes on
    /// one CPU core while keeping the full architecture shape.
    pub fn desk() -> Self {
        ModelConfig {
            attention: AttentionConfig {
                hidden_size: 64,
                num_heads: 4,
                ffn_size: 256,
                dropout_rate: 0.0,
            },
            encoder_layers: 4,
            decoder_layers: 6,
            num_queries: 16,
            backbone: BackboneConfig::default(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if !self.attention.hidden_size.is_multiple_of(4) {
            return Err(Error::Config(
                "hidden size must be divisible by 4 for the 2-D positional encoding".into(),
            ));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("encoder/decoder depth must be >= 1".into()));
        }
        if self.attention.hidden_size > self.backbone.out_channels() {
            return Err(Error::Config(format!(
                "1x1 reduction needs d <= C: d={} > C={}",
                self.attention.hidden_size,
                self.backbone.out_channels()
            )));
        }
        if self.max_text_len < 3 || self.max_caption_len < 2 {
            return Err(Error::Config("sequence length limits too small".into()));
        }
        Ok(())
    }
}

/// Which pretraining losses are active.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossToggles {
    pub mlm: bool,
    pub itm: bool,
    pub detection: bool,
    pub caption: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles { mlm: true, itm: true, detection: true, caption: true }
    }
}

/// One training pair, fully materialized (corruption and negatives already
/// sampled) so the loss assembly is deterministic.
pub struct PairExample<'a> {
    pub image: &'a ImageTensor,
    /// Encoder text input; for mismatched pairs this is the negative caption.
    pub seq_input: TokenSequence,
    pub mlm: Option<MlmBatchMask>,
    pub matched: bool,
    /// `[BOS] ... [EOS]` target; present only for matched pairs.
    pub caption_target: Option<Vec<usize>>,
    pub gt: Option<&'a GroundTruthObjects>,
}

/// Loss nodes produced for one pair; absent entries were toggled off or not
/// applicable (mismatched pairs only contribute ITM).
pub struct PairLossNodes {
    pub mlm: Option<NodeId>,
    pub mlm_masked_positions: usize,
    pub itm: Option<NodeId>,
    pub detection: Option<NodeId>,
    pub caption: Option<NodeId>,
    pub caption_tokens: usize,
}

pub struct VlpModel {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    pub store: ParamStore,
    pub token_emb: Embedding,
    pub text: TextEmbedder,
    pub backbone: Backbone,
    pub reducer: crate::vision::GridReducer,
    pub encoder: CrossModalEncoder,
    pub decoder: DualModeDecoder,
    pub mlm_head: MlmHead,
    pub itm_head: Linear,
}

impl VlpModel {
    pub fn new(cfg: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.attention.hidden_size;
        let token_emb = Embedding::new(&mut store, &mut rng, "token", vocab_size, d, ParamGroup::Transformer);
        let text = TextEmbedder::new(
            &mut store,
            &mut rng,
            token_emb,
            cfg.max_text_len,
            cfg.attention.dropout_rate,
        );
        let backbone = Backbone::new(&mut store, &mut rng, cfg.backbone)?;
        let reducer = crate::vision::GridReducer::new(&mut store, &mut rng, cfg.backbone.out_channels(), d)?;
        let encoder = CrossModalEncoder::new(&mut store, &mut rng, cfg.attention, cfg.encoder_layers)?;
        let decoder = DualModeDecoder::new(
            &mut store,
            &mut rng,
            cfg.attention,
            cfg.decoder_layers,
            cfg.num_queries,
            cfg.num_classes,
            cfg.num_attrs,
            vocab_size,
            cfg.max_caption_len,
        )?;
        let mlm_head = MlmHead::new(&mut store, &mut rng, d, vocab_size, cfg.tie_mlm_head);
        let itm_head = Linear::new(&mut store, &mut rng, "itm", d, 2, ParamGroup::Transformer);
        Ok(VlpModel {
            cfg,
            vocab_size,
            store,
            token_emb,
            text,
            backbone,
            reducer,
            encoder,
            decoder,
            mlm_head,
            itm_head,
        })
    }

    /// Backbone + reduction + fixed positional encodings for one image.
    pub fn embed_image(&self, g: &mut Graph, img: &ImageTensor) -> Result<GridFeatureMap> {
        let fmap = self.backbone.forward(g, &self.store, img)?;
        let features = self.reducer.forward(g, &self.store, fmap)?;
        let grid_shape = img.grid_shape();
        let d = self.cfg.attention.hidden_size;
        let rows = g.value(features).dims()[0];
        if rows != grid_shape.0 * grid_shape.1 {
            return Err(Error::shape(
                "embed_image",
                format!("{rows} feature rows vs grid {grid_shape:?}"),
            ));
        }
        Ok(GridFeatureMap {
            features,
            grid_shape,
            pos_encoding: Arc::new(positional_encoding_2d(grid_shape, d)?),
        })
    }

    /// Encode a token sequence against precomputed grid features.
    pub fn encode_with_grid(
        &self,
        g: &mut Graph,
        seq: &TokenSequence,
        grid: &GridFeatureMap,
        block_text_to_image: bool,
    ) -> Result<CrossModalState> {
        let emb = self.text.embed(g, &self.store, seq)?;
        self.encoder
            .encode(g, &self.store, emb, &seq.attention_mask, grid, block_text_to_image)
    }

    /// Full pass from raw inputs.
    pub fn encode_pair(
        &self,
        g: &mut Graph,
        seq: &TokenSequence,
        img: &ImageTensor,
    ) -> Result<CrossModalState> {
        let grid = self.embed_image(g, img)?;
        self.encode_with_grid(g, seq, &grid, false)
    }

    /// Empty-text sequence used for caption decoding and caption-loss
    /// conditioning (the generation-time encoder view of an image).
    pub fn empty_text(&self, vocab: &Vocabulary) -> Result<TokenSequence> {
        tokenize("", vocab, self.cfg.max_text_len)
    }

    /// Assemble the active losses for one pair on one tape.
    ///
    /// The matching assignment is computed from detached head outputs (no
    /// gradient flows through it); `fixed_sigma` overrides it for gradient
    /// probes. Caption loss conditions on an image-only (empty text) encoder
    /// view so training matches generation; `label_smooth` is zero during
    /// pretraining.
    pub fn pair_losses(
        &self,
        g: &mut Graph,
        example: &PairExample,
        toggles: LossToggles,
        vocab: &Vocabulary,
        label_smooth: f64,
        fixed_sigma: Option<&Assignment>,
    ) -> Result<PairLossNodes> {
        let grid = self.embed_image(g, example.image)?;
        let state = self.encode_with_grid(g, &example.seq_input, &grid, false)?;

        let mut out = PairLossNodes {
            mlm: None,
            mlm_masked_positions: 0,
            itm: None,
            detection: None,
            caption: None,
            caption_tokens: 0,
        };
        if toggles.itm {
            out.itm = Some(itm_loss(g, &self.store, &state, &self.itm_head, example.matched)?);
        }
        if !example.matched {
            return Ok(out);
        }
        if toggles.mlm {
            if let Some(mask) = &example.mlm {
                let (loss, n) = mlm_loss(g, &self.store, &state, mask, &self.mlm_head, &self.token_emb)?;
                out.mlm = Some(loss);
                out.mlm_masked_positions = n;
            }
        }
        if toggles.detection {
            if let Some(gt) = example.gt {
                let sets = self
                    .decoder
                    .detect(g, &self.store, &state, self.cfg.detect_cross_attend_text, self.cfg.aux_detection_outputs)?;
                let mut acc: Option<NodeId> = None;
                for set in &sets {
                    let sigma = match fixed_sigma {
                        Some(s) => s.clone(),
                        None => self.match_scene(g, gt, set)?,
                    };
                    let nodes = DetectionNodes {
                        class_logits: set.class_logits,
                        attr_logits: set.attr_logits,
                        boxes: set.boxes,
                    };
                    let l = detection_loss(g, gt, nodes, &sigma)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, l)?,
                        None => l,
                    });
                }
                let total = acc.expect("at least one detection set");
                out.detection = Some(if sets.len() > 1 {
                    g.scale(total, 1.0 / sets.len() as f64)
                } else {
                    total
                });
            }
        }
        if toggles.caption {
            if let Some(target) = &example.caption_target {
                let empty = self.empty_text(vocab)?;
                let caption_state = self.encode_with_grid(g, &empty, &grid, false)?;
                let (loss, n) = self.decoder.caption_loss(
                    g,
                    &self.store,
                    &caption_state,
                    &self.token_emb,
                    target,
                    label_smooth,
                    false,
                )?;
                out.caption = Some(loss);
                out.caption_tokens = n;
            }
        }
        Ok(out)
    }

    /// Optimal assignment for a scene from detached predictions.
    pub fn match_scene(&self, g: &Graph, gt: &GroundTruthObjects, set: &DetectionSet) -> Result<Assignment> {
        if gt.is_empty() {
            return Ok(Assignment { sigma: vec![], total_cost: 0.0 });
        }
        let snap = set.snapshot(g);
        let cost = matching_cost(gt, &snap)?;
        hungarian(&cost, gt.len(), self.cfg.num_queries)
    }

    /// Detection inference: encode (caption text or empty) and decode the
    /// query set.
    pub fn detect_scene(
        &self,
        g: &mut Graph,
        img: &ImageTensor,
        caption: Option<&str>,
        vocab: &Vocabulary,
    ) -> Result<crate::matching::PredictedObjects> {
        let seq = match caption {
            Some(c) => tokenize(c, vocab, self.cfg.max_text_len)?,
            None => self.empty_text(vocab)?,
        };
        let state = self.encode_pair(g, &seq, img)?;
        let sets = self
            .decoder
            .detect(g, &self.store, &state, self.cfg.detect_cross_attend_text, false)?;
        Ok(sets[0].snapshot(g))
    }

    /// Greedy caption for an image (token ids, no frame).
    pub fn caption_greedy(&self, img: &ImageTensor, vocab: &Vocabulary) -> Result<Vec<usize>> {
        let mut step = self.caption_step_fn(img, vocab)?;
        greedy_decode(&mut step, self.cfg.max_caption_len)
    }

    /// Beam-searched caption (token ids, no frame).
    pub fn caption_beam(&self, img: &ImageTensor, vocab: &Vocabulary, beam: usize, alpha: f64) -> Result<Vec<usize>> {
        let mut step = self.caption_step_fn(img, vocab)?;
        beam_search(&mut step, beam, alpha, self.cfg.max_caption_len)
    }

    /// Build a step closure over a frozen image encoding. The encoder runs
    /// once; each step decodes the growing prefix against the cached state.
    fn caption_step_fn<'m>(
        &'m self,
        img: &ImageTensor,
        vocab: &Vocabulary,
    ) -> Result<impl FnMut(&[usize]) -> Result<Vec<f64>> + 'm> {
        let mut g = Graph::inference();
        let empty = self.empty_text(vocab)?;
        let state = self.encode_pair(&mut g, &empty, img)?;
        // the encoder runs once; each step appends decoder nodes to the same
        // inference tape, which stores no backward state
        Ok(move |prefix: &[usize]| {
            self.decoder.caption_step(
                &mut g,
                &self.store,
                &state,
                &self.token_emb,
                &CaptionPrefix { ids: prefix.to_vec(), log_prob: 0.0 },
            )
        })
    }

    /// `[CLS]` representation of an (text, image) pair, detached.
    pub fn cls_vector(&self, seq: &TokenSequence, img: &ImageTensor) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let state = self.encode_pair(&mut g, seq, img)?;
        Ok(g.value(state.cls).data().to_vec())
    }
}

/// Materialize a matched training pair (corruption presampled by caller).
pub fn matched_example<'a>(
    scene: &'a SceneAnnotation,
    image: &'a ImageTensor,
    vocab: &Vocabulary,
    max_text_len: usize,
    max_caption_len: usize,
    mlm: Option<MlmBatchMask>,
) -> Result<PairExample<'a>> {
    let seq = tokenize(&scene.caption, vocab, max_text_len)?;
    let seq_input = match &mlm {
        Some(m) => m.apply(&seq),
        None => seq,
    };
    Ok(PairExample {
        image,
        seq_input,
        mlm,
        matched: true,
        caption_target: Some(caption_target_ids(&scene.caption, vocab, max_caption_len)?),
        gt: Some(&scene.objects),
    })
}

/// Materialize a mismatched ITM pair: the image with someone else's caption.
pub fn mismatched_example<'a>(
    image: &'a ImageTensor,
    negative_caption: &str,
    vocab: &Vocabulary,
    max_text_len: usize,
) -> Result<PairExample<'a>> {
    Ok(PairExample {
        image,
        seq_input: tokenize(negative_caption, vocab, max_text_len)?,
        mlm: None,
        matched: false,
        caption_target: None,
        gt: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, synthetic_vocabulary, SceneConfig};
    use crate::graph::ParamId;
    use crate::tensor::Tensor;
    use crate::text::tokenize;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            attention: AttentionConfig { hidden_size: 8, num_heads: 2, ffn_size: 16, dropout_rate: 0.0 },
            encoder_layers: 2,
            decoder_layers: 2,
            num_queries: 6,
            backbone: BackboneConfig { widths: [4, 4, 8, 8] },
            max_text_len: 24,
            max_caption_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_config_validates() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        tiny_cfg().validate().unwrap();
    }

    #[test]
    fn reduction_wider_than_backbone_is_rejected() {
        let cfg = ModelConfig {
            attention: AttentionConfig { hidden_size: 64, num_heads: 4, ffn_size: 64, dropout_rate: 0.0 },
            backbone: BackboneConfig { widths: [4, 4, 8, 8] },
            ..tiny_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn all_four_losses_assemble_and_backprop_to_stem() {
        let vocab = synthetic_vocabulary();
        let model = VlpModel::new(tiny_cfg(), vocab.len(), 5).unwrap();
        let scenes = generate(41, 2, &SceneConfig::default()).unwrap();
        let img = scenes[0].image_tensor().unwrap();
        let mlm = MlmBatchMask {
            masked_positions: vec![2],
            original_ids: vec![tokenize(&scenes[0].caption, &vocab, 24).unwrap().token_ids[2]],
            corruption: vec![crate::encoder::Corruption::Mask],
        };
        let ex = matched_example(&scenes[0], &img, &vocab, 24, 16, Some(mlm)).unwrap();
        let mut g = Graph::new();
        let losses = model
            .pair_losses(&mut g, &ex, LossToggles::default(), &vocab, 0.0, None)
            .unwrap();
        let parts = [
            losses.mlm.unwrap(),
            losses.itm.unwrap(),
            losses.detection.unwrap(),
            losses.caption.unwrap(),
        ];
        let mut total = parts[0];
        for p in &parts[1..] {
            total = g.add(total, *p).unwrap();
        }
        assert!(g.value(total).is_finite());
        g.backward(total).unwrap();
        let grads = g.param_grads();
        let stem = model.backbone.stem_kernel();
        let stem_grad = grads.iter().find(|(id, _)| *id == stem).expect("stem reached");
        assert!(stem_grad.1.l2_norm() > 0.0);
    }

    #[test]
    fn mismatched_pairs_contribute_only_itm() {
        let vocab = synthetic_vocabulary();
        let model = VlpModel::new(tiny_cfg(), vocab.len(), 5).unwrap();
        let scenes = generate(43, 2, &SceneConfig::default()).unwrap();
        let img = scenes[0].image_tensor().unwrap();
        let ex = mismatched_example(&img, &scenes[1].caption, &vocab, 24).unwrap();
        let mut g = Graph::new();
        let losses = model
            .pair_losses(&mut g, &ex, LossToggles::default(), &vocab, 0.0, None)
            .unwrap();
        assert!(losses.itm.is_some());
        assert!(losses.mlm.is_none() && losses.detection.is_none() && losses.caption.is_none());
    }

    #[test]
    fn disabled_loss_produces_zero_gradient_in_its_private_head() {
        let vocab = synthetic_vocabulary();
        let model = VlpModel::new(
            ModelConfig { tie_mlm_head: false, ..tiny_cfg() },
            vocab.len(),
            5,
        )
        .unwrap();
        let scenes = generate(47, 2, &SceneConfig::default()).unwrap();
        let img = scenes[0].image_tensor().unwrap();

        let private_heads: [(&str, Vec<ParamId>); 4] = [
            (
                "detection",
                vec![
                    model.decoder.class_head.w,
                    model.decoder.attr_head.w,
                    model.decoder.box_mlp[0].w,
                    model.decoder.queries.embeddings,
                ],
            ),
            ("caption", vec![model.decoder.vocab_head.w]),
            ("itm", vec![model.itm_head.w]),
            (
                "mlm",
                vec![model.mlm_head.bias, model.mlm_head.untied.as_ref().unwrap().w],
            ),
        ];

        for (name, heads) in &private_heads {
            let mut toggles = LossToggles::default();
            match *name {
                "detection" => toggles.detection = false,
                "caption" => toggles.caption = false,
                "itm" => toggles.itm = false,
                _ => toggles.mlm = false,
            }
            let mlm_mask = MlmBatchMask {
                masked_positions: vec![2],
                original_ids: vec![tokenize(&scenes[0].caption, &vocab, 24).unwrap().token_ids[2]],
                corruption: vec![crate::encoder::Corruption::Mask],
            };
            let ex = matched_example(&scenes[0], &img, &vocab, 24, 16, Some(mlm_mask)).unwrap();
            let mut g = Graph::new();
            let losses = model.pair_losses(&mut g, &ex, toggles, &vocab, 0.0, None).unwrap();
            let mut total: Option<NodeId> = None;
            for part in [losses.mlm, losses.itm, losses.detection, losses.caption].into_iter().flatten() {
                total = Some(match total {
                    Some(t) => g.add(t, part).unwrap(),
                    None => part,
                });
            }
            g.backward(total.unwrap()).unwrap();
            let grads = g.param_grads();
            for head in heads {
                let got: Option<&(ParamId, Tensor)> = grads.iter().find(|(id, _)| id == head);
                assert!(
                    got.map(|(_, t)| t.l2_norm() == 0.0).unwrap_or(true),
                    "{name}-private parameter must see no gradient when that loss is off"
                );
            }
        }
    }

    #[test]
    fn shared_decoder_weights_couple_the_two_modes() {
        let vocab = synthetic_vocabulary();
        let mut model = VlpModel::new(tiny_cfg(), vocab.len(), 5).unwrap();
        let scenes = generate(53, 1, &SceneConfig::default()).unwrap();
        let img = scenes[0].image_tensor().unwrap();
        // a one-token prefix would make self-attention weight-independent
        // (softmax over a single element), so probe a two-token prefix
        let probe_ids = [crate::text::BOS, vocab.id("a").unwrap()];
        let logits_before = {
            let mut g = Graph::inference();
            let empty = model.empty_text(&vocab).unwrap();
            let state = model.encode_pair(&mut g, &empty, &img).unwrap();
            let l = model
                .decoder
                .caption_forward(&mut g, &model.store, &state, &model.token_emb, &probe_ids, false)
                .unwrap();
            g.value(l).data().to_vec()
        };

        // gradient step on the detection loss alone
        let ex = matched_example(&scenes[0], &img, &vocab, 24, 16, None).unwrap();
        let toggles = LossToggles { mlm: false, itm: false, caption: false, ..LossToggles::default() };
        let mut g = Graph::new();
        let losses = model.pair_losses(&mut g, &ex, toggles, &vocab, 0.0, None).unwrap();
        let det = losses.detection.unwrap();
        g.backward(det).unwrap();
        // layer 0 self-attention sees the all-zero query target (its values
        // are zero, so its weights get no gradient); probe layer 1 instead
        let wq = model.decoder.layers[1].self_attn.wq.w;
        let grad = g
            .param_grads()
            .into_iter()
            .find(|(id, _)| *id == wq)
            .expect("detection trains the shared stack");
        assert!(grad.1.l2_norm() > 0.0);
        // apply the step by hand
        {
            let entry = model.store.entry_mut(wq);
            let mut val = (*entry.value).clone();
            for (v, gr) in val.data_mut().iter_mut().zip(grad.1.data()) {
                *v -= 0.5 * gr;
            }
            *Arc::make_mut(&mut entry.value) = val;
        }
        let logits_after = {
            let mut g = Graph::inference();
            let empty = model.empty_text(&vocab).unwrap();
            let state = model.encode_pair(&mut g, &empty, &img).unwrap();
            let l = model
                .decoder
                .caption_forward(&mut g, &model.store, &state, &model.token_emb, &probe_ids, false)
                .unwrap();
            g.value(l).data().to_vec()
        };
        assert_ne!(logits_before, logits_after, "detection update must move caption outputs");
    }
}
