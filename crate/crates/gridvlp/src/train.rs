//! Joint pretraining: batch assembly, the equal-weight four-task objective,
//! AdamW with per-group learning rates, and metrics logging.

use crate::data::{sample_negative_caption, SceneAnnotation};
use crate::encoder::sample_mlm_mask;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{matched_example, mismatched_example, LossToggles, VlpModel};
use crate::nn::{ParamGroup, ParamStore};
use crate::text::Vocabulary;
use crate::vision::ImageTensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

/// AdamW with decoupled weight decay and per-group base rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr_transformer: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Learning rate multiplies by `lr_drop_factor` at the end of each
    /// listed epoch (1-indexed). Pretraining defaults to no drops.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_transformer: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: 0.1,
            lr_drop_epochs: vec![],
            lr_drop_factor: 0.1,
        }
    }
}

impl OptimizerConfig {
    /// Schedule multiplier after finishing `completed_epochs` epochs.
    pub fn schedule_factor(&self, completed_epochs: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| completed_epochs >= e).count();
        self.lr_drop_factor.powi(drops as i32)
    }
}

/// AdamW state is kept inside the `ParamStore`; this drives it.
pub struct AdamW {
    pub cfg: OptimizerConfig,
    pub step_count: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        AdamW { cfg, step_count: 0 }
    }

    /// Clip accumulated gradients to a global norm; returns the pre-clip norm.
    pub fn clip_gradients(&self, store: &mut ParamStore) -> f64 {
        let mut sq = 0.0;
        for id in store.ids().collect::<Vec<_>>() {
            let g = &store.entry(id).grad;
            sq += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq.sqrt();
        if self.cfg.grad_clip_norm > 0.0 && norm > self.cfg.grad_clip_norm {
            let scale = self.cfg.grad_clip_norm / norm;
            for id in store.ids().collect::<Vec<_>>() {
                for v in store.entry_mut(id).grad.data_mut() {
                    *v *= scale;
                }
            }
        }
        norm
    }

    /// One decoupled-weight-decay Adam step over every parameter, using the
    /// accumulated gradients. `lr_scale` applies the epoch schedule.
    pub fn step(&mut self, store: &mut ParamStore, lr_scale: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let entry = store.entry_mut(id);
            let lr = lr_scale
                * match entry.group {
                    ParamGroup::Transformer => self.cfg.lr_transformer,
                    ParamGroup::Backbone => self.cfg.lr_backbone,
                };
            let n = entry.grad.numel();
            let value = Arc::make_mut(&mut entry.value);
            for i in 0..n {
                let g = entry.grad.data()[i];
                let m = &mut entry.adam_m.data_mut()[i];
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
                let v = &mut entry.adam_v.data_mut()[i];
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let p = &mut value.data_mut()[i];
                *p -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                *p -= lr * self.cfg.weight_decay * *p;
            }
        }
    }
}

/// Loss breakdown and bookkeeping for one optimization step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mlm: f64,
    pub itm: f64,
    pub detection: f64,
    pub caption: f64,
    pub total: f64,
    pub lr_transformer: f64,
    pub lr_backbone: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
    pub grad_norm: f64,
    pub stem_grad_norm: f64,
    pub mismatched_in_batch: usize,
    pub batch_size: usize,
}

/// Sampling/assembly knobs for the joint step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerOptions {
    pub losses: LossToggles,
    pub mlm_rate: f64,
    /// Probability a pair is kept matched (the rest become negatives).
    pub matched_fraction: f64,
    pub label_smooth: f64,
    /// Determinism mode: dropout off, no wall-time in metrics.
    pub determinism: bool,
    /// Abort after this many consecutive non-finite steps.
    pub halt_after_failures: usize,
}

impl Default for TrainerOptions {
    fn default() -> Self {
        TrainerOptions {
            losses: LossToggles::default(),
            mlm_rate: 0.15,
            matched_fraction: 0.5,
            label_smooth: 0.0,
            determinism: true,
            halt_after_failures: 3,
        }
    }
}

/// How each pair in a batch was composed, for protocol tests.
#[derive(Debug, Clone)]
pub struct PairRecord {
    pub image_scene_id: u64,
    pub caption_scene_id: u64,
    pub matched: bool,
}

pub struct Trainer {
    pub model: VlpModel,
    pub optimizer: AdamW,
    pub options: TrainerOptions,
    pub vocab: Vocabulary,
    rng: ChaCha8Rng,
    dropout_seq: u64,
    consecutive_failures: usize,
    pub steps_done: u64,
    /// Batches whose loss came back non-finite (scene ids), kept for dumps.
    pub failed_batches: Vec<Vec<u64>>,
    pub zero_mask_batches: u64,
}

impl Trainer {
    pub fn new(model: VlpModel, optimizer: OptimizerConfig, options: TrainerOptions, vocab: Vocabulary, seed: u64) -> Self {
        Trainer {
            model,
            optimizer: AdamW::new(optimizer),
            options,
            vocab,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropout_seq: seed,
            consecutive_failures: 0,
            steps_done: 0,
            failed_batches: Vec::new(),
            zero_mask_batches: 0,
        }
    }

    /// Compose a batch: per pair, a fair coin decides matched vs mismatched;
    /// negatives draw a caption from another scene in the batch.
    pub fn compose_batch(&mut self, batch: &[&SceneAnnotation]) -> Result<Vec<PairRecord>> {
        let mut records = Vec::with_capacity(batch.len());
        for (i, scene) in batch.iter().enumerate() {
            let matched = batch.len() < 2 || self.rng.random::<f64>() < self.options.matched_fraction;
            let caption_scene_id = if matched {
                scene.scene_id
            } else {
                batch[sample_negative_caption(batch, i, &mut self.rng)?].scene_id
            };
            records.push(PairRecord {
                image_scene_id: scene.scene_id,
                caption_scene_id,
                matched,
            });
        }
        Ok(records)
    }

    /// One joint optimization step over a batch of scenes with cached image
    /// tensors. Returns the loss breakdown; the total is the in-graph sum of
    /// the four components (unit weights).
    pub fn joint_step(
        &mut self,
        scenes: &[&SceneAnnotation],
        images: &[&ImageTensor],
        lr_scale: f64,
    ) -> Result<StepMetrics> {
        if scenes.is_empty() || scenes.len() != images.len() {
            return Err(Error::contract("joint_step", "batch of scenes and images must align"));
        }
        let started = Instant::now();
        let records = self.compose_batch(scenes)?;
        // presample masks so the graph assembly is deterministic
        let mut masks = Vec::with_capacity(scenes.len());
        for (scene, rec) in scenes.iter().zip(&records) {
            if rec.matched && self.options.losses.mlm {
                let seq = crate::text::tokenize(&scene.caption, &self.vocab, self.model.cfg.max_text_len)?;
                masks.push(Some(sample_mlm_mask(&seq, self.options.mlm_rate, self.vocab.len(), &mut self.rng)));
            } else {
                masks.push(None);
            }
        }

        let mut g = Graph::new();
        if !self.options.determinism && self.model.cfg.attention.dropout_rate > 0.0 {
            self.dropout_seq = self.dropout_seq.wrapping_add(1);
            g.set_train(self.dropout_seq);
        }

        let mut mlm_parts: Vec<NodeId> = Vec::new();
        let mut itm_parts: Vec<NodeId> = Vec::new();
        let mut det_parts: Vec<NodeId> = Vec::new();
        let mut cap_parts: Vec<NodeId> = Vec::new();
        for (i, ((scene, image), rec)) in scenes.iter().zip(images).zip(&records).enumerate() {
            let example = if rec.matched {
                matched_example(
                    scene,
                    image,
                    &self.vocab,
                    self.model.cfg.max_text_len,
                    self.model.cfg.max_caption_len,
                    masks[i].clone(),
                )?
            } else {
                let neg = scenes
                    .iter()
                    .find(|s| s.scene_id == rec.caption_scene_id)
                    .expect("negative caption comes from the batch");
                mismatched_example(image, &neg.caption, &self.vocab, self.model.cfg.max_text_len)?
            };
            let losses = self.model.pair_losses(
                &mut g,
                &example,
                self.options.losses,
                &self.vocab,
                self.options.label_smooth,
                None,
            )?;
            if let Some(l) = losses.mlm {
                if losses.mlm_masked_positions > 0 {
                    mlm_parts.push(l);
                }
            }
            if let Some(l) = losses.itm {
                itm_parts.push(l);
            }
            if let Some(l) = losses.detection {
                det_parts.push(l);
            }
            if let Some(l) = losses.caption {
                cap_parts.push(l);
            }
        }
        if mlm_parts.is_empty() && self.options.losses.mlm {
            self.zero_mask_batches += 1;
        }

        let mean = |g: &mut Graph, parts: &[NodeId]| -> Result<Option<NodeId>> {
            if parts.is_empty() {
                return Ok(None);
            }
            let mut acc = parts[0];
            for p in &parts[1..] {
                acc = g.add(acc, *p)?;
            }
            Ok(Some(g.scale(acc, 1.0 / parts.len() as f64)))
        };
        let mlm = mean(&mut g, &mlm_parts)?;
        let itm = mean(&mut g, &itm_parts)?;
        let det = mean(&mut g, &det_parts)?;
        let cap = mean(&mut g, &cap_parts)?;
        let mut total: Option<NodeId> = None;
        for part in [mlm, itm, det, cap].into_iter().flatten() {
            total = Some(match total {
                Some(t) => g.add(t, part)?,
                None => part,
            });
        }
        let total = total.ok_or_else(|| Error::contract("joint_step", "no active loss"))?;

        let value_of = |g: &Graph, n: Option<NodeId>| n.map(|n| g.value(n).item()).unwrap_or(0.0);
        let total_value = g.value(total).item();
        if !total_value.is_finite() {
            self.consecutive_failures += 1;
            let ids: Vec<u64> = scenes.iter().map(|s| s.scene_id).collect();
            eprintln!("non-finite loss at step {}; offending batch scene ids: {ids:?}", self.steps_done + 1);
            self.failed_batches.push(ids);
            if self.consecutive_failures >= self.options.halt_after_failures {
                return Err(Error::NonFinite("joint_step: consecutive failure limit reached"));
            }
            // skip the update entirely
            return Ok(StepMetrics {
                step: self.steps_done,
                mlm: f64::NAN,
                itm: f64::NAN,
                detection: f64::NAN,
                caption: f64::NAN,
                total: total_value,
                lr_transformer: 0.0,
                lr_backbone: 0.0,
                wall_ms: None,
                grad_norm: 0.0,
                stem_grad_norm: 0.0,
                mismatched_in_batch: records.iter().filter(|r| !r.matched).count(),
                batch_size: scenes.len(),
            });
        }
        self.consecutive_failures = 0;

        g.backward(total)?;
        self.model.store.zero_grads();
        let grads = g.param_grads();
        self.model.store.accumulate_grads(&grads);
        let grad_norm = self.optimizer.clip_gradients(&mut self.model.store);
        let stem_grad_norm = self.model.store.entry(self.model.backbone.stem_kernel()).grad.l2_norm();
        self.optimizer.step(&mut self.model.store, lr_scale);
        self.model.store.zero_grads();

        self.steps_done += 1;
        Ok(StepMetrics {
            step: self.steps_done,
            mlm: value_of(&g, mlm),
            itm: value_of(&g, itm),
            detection: value_of(&g, det),
            caption: value_of(&g, cap),
            total: total_value,
            lr_transformer: self.optimizer.cfg.lr_transformer * lr_scale,
            lr_backbone: self.optimizer.cfg.lr_backbone * lr_scale,
            wall_ms: if self.options.determinism {
                None
            } else {
                Some(started.elapsed().as_secs_f64() * 1e3)
            },
            grad_norm,
            stem_grad_norm,
            mismatched_in_batch: records.iter().filter(|r| !r.matched).count(),
            batch_size: scenes.len(),
        })
    }

    /// Epoch-based training over a scene list; batches are drawn in a
    /// seed-shuffled order each epoch and metrics are passed to `on_step`.
    pub fn train(
        &mut self,
        scenes: &[SceneAnnotation],
        batch_size: usize,
        max_steps: u64,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        if scenes.is_empty() || batch_size == 0 {
            return Err(Error::contract("train", "need scenes and a positive batch size"));
        }
        let images: Vec<ImageTensor> = scenes
            .iter()
            .map(|s| s.image_tensor())
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut history = Vec::new();
        let mut epoch = 0usize;
        'outer: loop {
            // deterministic shuffle per epoch
            for i in (1..order.len()).rev() {
                let j = self.rng.random_range(0..=i);
                order.swap(i, j);
            }
            let lr_scale = self.optimizer.cfg.schedule_factor(epoch);
            for chunk in order.chunks(batch_size) {
                let batch: Vec<&SceneAnnotation> = chunk.iter().map(|&i| &scenes[i]).collect();
                let imgs: Vec<&ImageTensor> = chunk.iter().map(|&i| &images[i]).collect();
                let metrics = self.joint_step(&batch, &imgs, lr_scale)?;
                on_step(&metrics);
                history.push(metrics);
                if history.len() as u64 >= max_steps {
                    break 'outer;
                }
            }
            epoch += 1;
        }
        Ok(history)
    }
}

/// Moving average over the trailing `window` entries ending at `t` (0-based).
pub fn moving_average(values: &[f64], t: usize, window: usize) -> f64 {
    let end = t + 1;
    let start = end.saturating_sub(window);
    let slice = &values[start..end];
    slice.iter().sum::<f64>() / slice.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, synthetic_vocabulary, SceneConfig};
    use crate::model::ModelConfig;
    use crate::nn::AttentionConfig;
    use crate::tensor::Tensor;
    use crate::vision::BackboneConfig;

    fn tiny_model() -> (VlpModel, Vocabulary) {
        let vocab = synthetic_vocabulary();
        let cfg = ModelConfig {
            attention: AttentionConfig { hidden_size: 8, num_heads: 2, ffn_size: 16, dropout_rate: 0.0 },
            encoder_layers: 2,
            decoder_layers: 2,
            num_queries: 6,
            backbone: BackboneConfig { widths: [4, 4, 8, 8] },
            max_text_len: 24,
            max_caption_len: 16,
            ..ModelConfig::default()
        };
        (VlpModel::new(cfg, vocab.len(), 5).unwrap(), vocab)
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let (mut model, _) = tiny_model();
        let before = model.store.flatten();
        let mut opt = AdamW::new(OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        });
        model.store.zero_grads();
        opt.step(&mut model.store, 1.0);
        assert_eq!(model.store.flatten(), before);
    }

    #[test]
    fn adamw_decay_only_step_shrinks_parameters() {
        let (mut model, _) = tiny_model();
        let lr = 1e-2;
        let wd = 1e-1;
        let mut opt = AdamW::new(OptimizerConfig {
            lr_transformer: lr,
            lr_backbone: lr,
            weight_decay: wd,
            ..OptimizerConfig::default()
        });
        let before = model.store.flatten();
        model.store.zero_grads();
        opt.step(&mut model.store, 1.0);
        let after = model.store.flatten();
        for (b, a) in before.iter().zip(&after) {
            assert!((a - b * (1.0 - lr * wd)).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_drops_by_factor_after_listed_epochs() {
        let cfg = OptimizerConfig {
            lr_drop_epochs: vec![6, 9],
            ..OptimizerConfig::default()
        };
        assert_eq!(cfg.schedule_factor(0), 1.0);
        assert_eq!(cfg.schedule_factor(5), 1.0);
        let after6 = cfg.schedule_factor(6);
        assert!((after6 - 0.1).abs() < 1e-15, "0.1x after epoch 6");
        let after9 = cfg.schedule_factor(9);
        assert!((after9 - 0.01).abs() < 1e-15, "another 0.1x after epoch 9");
        assert!((after6 / cfg.schedule_factor(5) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn joint_step_total_is_component_sum_and_toggles_work() {
        let (model, vocab) = tiny_model();
        let scenes = generate(61, 4, &SceneConfig::default()).unwrap();
        let mut trainer = Trainer::new(model, OptimizerConfig::default(), TrainerOptions::default(), vocab, 3);
        let refs: Vec<&SceneAnnotation> = scenes.iter().collect();
        let images: Vec<ImageTensor> = scenes.iter().map(|s| s.image_tensor().unwrap()).collect();
        let img_refs: Vec<&ImageTensor> = images.iter().collect();
        let m = trainer.joint_step(&refs, &img_refs, 1.0).unwrap();
        let sum = m.mlm + m.itm + m.detection + m.caption;
        let rel = (m.total - sum).abs() / m.total.abs().max(1.0);
        assert!(rel < 1e-6, "total {} vs component sum {sum}", m.total);
        assert!(m.stem_grad_norm > 0.0, "stem must receive gradient");
        assert!(m.wall_ms.is_none(), "determinism mode omits wall time");

        // detection off: component zero, its heads untouched
        let (model2, vocab2) = tiny_model();
        let opts = TrainerOptions {
            losses: LossToggles { detection: false, ..LossToggles::default() },
            ..TrainerOptions::default()
        };
        let mut t2 = Trainer::new(model2, OptimizerConfig::default(), opts, vocab2, 3);
        let class_head = t2.model.decoder.class_head.w;
        let before = (*t2.model.store.entry(class_head).value).clone();
        let m2 = t2.joint_step(&refs, &img_refs, 1.0).unwrap();
        assert_eq!(m2.detection, 0.0);
        let after = (*t2.model.store.entry(class_head).value).clone();
        // weight decay still shrinks the tensor; verify no gradient moved it
        for (b, a) in before.data().iter().zip(after.data()) {
            let decayed = b * (1.0 - 1e-4 * 1e-4);
            assert!((a - decayed).abs() < 1e-12, "only decay may touch a disabled head");
        }
    }

    #[test]
    fn two_seeded_trainers_produce_identical_metrics() {
        let scenes = generate(67, 6, &SceneConfig::default()).unwrap();
        let run = || {
            let (model, vocab) = tiny_model();
            let mut t = Trainer::new(model, OptimizerConfig::default(), TrainerOptions::default(), vocab, 11);
            t.train(&scenes, 3, 6, |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(serde_json::to_string(x).unwrap(), serde_json::to_string(y).unwrap());
        }
    }

    #[test]
    fn non_finite_loss_skips_update_and_eventually_halts() {
        let (mut model, vocab) = tiny_model();
        // poison one parameter so every loss is NaN
        let wq = model.encoder.layers[0].attn.wq.w;
        let shape = model.store.entry(wq).value.shape().clone();
        *Arc::make_mut(&mut model.store.entry_mut(wq).value) = Tensor::full(shape, f64::NAN);
        let scenes = generate(71, 2, &SceneConfig::default()).unwrap();
        let refs: Vec<&SceneAnnotation> = scenes.iter().collect();
        let images: Vec<ImageTensor> = scenes.iter().map(|s| s.image_tensor().unwrap()).collect();
        let img_refs: Vec<&ImageTensor> = images.iter().collect();
        let mut t = Trainer::new(
            model,
            OptimizerConfig::default(),
            TrainerOptions { halt_after_failures: 2, ..TrainerOptions::default() },
            vocab,
            3,
        );
        let m1 = t.joint_step(&refs, &img_refs, 1.0).unwrap();
        assert!(!m1.total.is_finite());
        assert_eq!(t.failed_batches.len(), 1);
        assert!(t.joint_step(&refs, &img_refs, 1.0).is_err(), "second failure hits the halt limit");
    }

    #[test]
    fn moving_average_windows() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(moving_average(&v, 0, 2), 1.0);
        assert_eq!(moving_average(&v, 1, 2), 1.5);
        assert_eq!(moving_average(&v, 3, 2), 3.5);
        assert_eq!(moving_average(&v, 3, 10), 2.5);
    }
}
