//! Fine-tuning heads and evaluation protocols for the four downstream task
//! shapes, plus text-conditioned detection evaluation.
//!
//! Every task keeps the pretrained parameter names and adds its own head
//! under `head.<task>`, so checkpoints load with zero unexpectedly-missing
//! tensors.

use crate::data::{answer_set, NlvrSample, SceneAnnotation, VqaSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::matching::{hungarian, iou, matching_cost, GroundTruthObjects, PredictedObjects};
use crate::model::{matched_example, LossToggles, VlpModel};
use crate::nn::{Linear, ParamGroup};
use crate::text::{detokenize, tokenize, Vocabulary};
use crate::train::{AdamW, OptimizerConfig};
use crate::vision::ImageTensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Fine-tuning schedule mirroring the usual recipe: batch 32, 12 epochs,
/// tenfold learning-rate drops after epochs 6 and 9.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub weight_decay: f64,
    /// Margin for the retrieval ranking loss.
    pub ranking_margin: f64,
    /// Label smoothing used by caption fine-tuning.
    pub label_smooth: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            batch_size: 32,
            epochs: 12,
            lr: 1e-4,
            lr_drop_epochs: vec![6, 9],
            weight_decay: 1e-4,
            ranking_margin: 0.2,
            label_smooth: 0.1,
        }
    }
}

impl FinetuneConfig {
    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr_transformer: self.lr,
            lr_backbone: self.lr * 0.1,
            weight_decay: self.weight_decay,
            lr_drop_epochs: self.lr_drop_epochs.clone(),
            ..OptimizerConfig::default()
        }
    }
}

/// JSON evaluation report emitted by `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
    pub checkpoint: String,
}

// -- VQA -----------------------------------------------------------------------

/// Multi-label classifier over the closed answer set, fed by h^L_CLS.
pub struct VqaHead {
    pub head: Linear,
    pub num_answers: usize,
}

impl VqaHead {
    pub fn new(model: &mut VlpModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.cfg.attention.hidden_size;
        let n = answer_set().len();
        VqaHead {
            head: Linear::new(&mut model.store, &mut rng, "head.vqa", d, n, ParamGroup::Transformer),
            num_answers: n,
        }
    }

    /// Sigmoid scores over the answer set.
    pub fn forward(
        &self,
        g: &mut Graph,
        model: &VlpModel,
        seq: &crate::text::TokenSequence,
        img: &ImageTensor,
    ) -> Result<NodeId> {
        let state = model.encode_pair(g, seq, img)?;
        self.head.forward(g, &model.store, state.cls)
    }

    pub fn predict(&self, model: &VlpModel, question: &str, img: &ImageTensor, vocab: &Vocabulary) -> Result<usize> {
        let seq = tokenize(question, vocab, model.cfg.max_text_len)?;
        let mut g = Graph::inference();
        let logits = self.forward(&mut g, model, &seq, img)?;
        let v = g.value(logits);
        Ok(v.data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .expect("non-empty answer set"))
    }
}

/// Binary-cross-entropy fine-tuning of the VQA head; answers are one-hot
/// targets over the multi-label score vector.
pub fn finetune_vqa(
    model: &mut VlpModel,
    head: &VqaHead,
    scenes: &[SceneAnnotation],
    samples: &[VqaSample],
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<()> {
    let images: Vec<ImageTensor> = scenes.iter().map(|s| s.image_tensor()).collect::<Result<_>>()?;
    let mut opt = AdamW::new(cfg.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let lr_scale = opt.cfg.schedule_factor(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let mut parts = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let s = &samples[si];
                let seq = tokenize(&s.question, vocab, model.cfg.max_text_len)?;
                let logits = head.forward(&mut g, model, &seq, &images[s.scene_idx])?;
                let flat = g.reshape(logits, [head.num_answers])?;
                let mut target = vec![0.0; head.num_answers];
                target[s.answer] = 1.0;
                parts.push(g.bce_with_logits(flat, &target)?);
            }
            let loss = mean_of(&mut g, &parts)?;
            apply_step(&mut g, loss, model, &mut opt, lr_scale)?;
        }
    }
    Ok(())
}

pub fn eval_vqa(
    model: &VlpModel,
    head: &VqaHead,
    scenes: &[SceneAnnotation],
    samples: &[VqaSample],
    vocab: &Vocabulary,
) -> Result<f64> {
    let images: Vec<ImageTensor> = scenes.iter().map(|s| s.image_tensor()).collect::<Result<_>>()?;
    let mut correct = 0usize;
    for s in samples {
        if head.predict(model, &s.question, &images[s.scene_idx], vocab)? == s.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

// -- NLVR ----------------------------------------------------------------------

/// Two encoder passes (statement with each image) -> concatenated CLS pair
/// -> 2-way classifier.
pub struct NlvrHead {
    pub head: Linear,
}

impl NlvrHead {
    pub fn new(model: &mut VlpModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.cfg.attention.hidden_size;
        NlvrHead {
            head: Linear::new(&mut model.store, &mut rng, "head.nlvr", 2 * d, 2, ParamGroup::Transformer),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        model: &VlpModel,
        seq: &crate::text::TokenSequence,
        left: &ImageTensor,
        right: &ImageTensor,
    ) -> Result<NodeId> {
        // both passes share every encoder parameter
        let s0 = model.encode_pair(g, seq, left)?;
        let s1 = model.encode_pair(g, seq, right)?;
        let cat = g.concat_cols(&[s0.cls, s1.cls])?;
        self.head.forward(g, &model.store, cat)
    }
}

pub fn finetune_nlvr(
    model: &mut VlpModel,
    head: &NlvrHead,
    scenes: &[SceneAnnotation],
    samples: &[NlvrSample],
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<()> {
    let images: Vec<ImageTensor> = scenes.iter().map(|s| s.image_tensor()).collect::<Result<_>>()?;
    let mut opt = AdamW::new(cfg.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let lr_scale = opt.cfg.schedule_factor(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let mut parts = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let s = &samples[si];
                let seq = tokenize(&s.statement, vocab, model.cfg.max_text_len)?;
                let logits = head.forward(&mut g, model, &seq, &images[s.left_idx], &images[s.right_idx])?;
                parts.push(g.cross_entropy_rows(logits, &[s.label as usize], &[1.0], 0.0)?);
            }
            let loss = mean_of(&mut g, &parts)?;
            apply_step(&mut g, loss, model, &mut opt, lr_scale)?;
        }
    }
    Ok(())
}

pub fn eval_nlvr(
    model: &VlpModel,
    head: &NlvrHead,
    scenes: &[SceneAnnotation],
    samples: &[NlvrSample],
    vocab: &Vocabulary,
) -> Result<f64> {
    let images: Vec<ImageTensor> = scenes.iter().map(|s| s.image_tensor()).collect::<Result<_>>()?;
    let mut correct = 0usize;
    for s in samples {
        let seq = tokenize(&s.statement, vocab, model.cfg.max_text_len)?;
        let mut g = Graph::inference();
        let logits = head.forward(&mut g, model, &seq, &images[s.left_idx], &images[s.right_idx])?;
        let v = g.value(logits);
        if (v.data()[1] > v.data()[0]) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

// -- image-text retrieval ---------------------------------------------------------

/// Scalar similarity head over h^L_CLS of the joint pass.
pub struct RetrievalHead {
    pub head: Linear,
}

impl RetrievalHead {
    pub fn new(model: &mut VlpModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.cfg.attention.hidden_size;
        RetrievalHead {
            head: Linear::new(&mut model.store, &mut rng, "head.retrieval", d, 1, ParamGroup::Transformer),
        }
    }

    pub fn score_node(
        &self,
        g: &mut Graph,
        model: &VlpModel,
        caption: &str,
        img: &ImageTensor,
        vocab: &Vocabulary,
    ) -> Result<NodeId> {
        let seq = tokenize(caption, vocab, model.cfg.max_text_len)?;
        let state = model.encode_pair(g, &seq, img)?;
        let s = self.head.forward(g, &model.store, state.cls)?;
        g.reshape(s, Vec::<usize>::new().as_slice())
    }

    pub fn score(&self, model: &VlpModel, caption: &str, img: &ImageTensor, vocab: &Vocabulary) -> Result<f64> {
        let mut g = Graph::inference();
        let node = self.score_node(&mut g, model, caption, img, vocab)?;
        Ok(g.value(node).item())
    }
}

/// Pairwise softplus margin ranking: each step drives the matched score
/// above a random other caption's score by at least the margin.
pub fn finetune_retrieval(
    model: &mut VlpModel,
    head: &RetrievalHead,
    scenes: &[SceneAnnotation],
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<()> {
    if scenes.len() < 2 {
        return Err(Error::contract("finetune_retrieval", "need at least two scenes"));
    }
    let images: Vec<ImageTensor> = scenes.iter().map(|s| s.image_tensor()).collect::<Result<_>>()?;
    let mut opt = AdamW::new(cfg.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    // the ranking loss pairs 2 encoder passes per sample; halve the batch
    let pair_batch = (cfg.batch_size / 2).max(1);
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let lr_scale = opt.cfg.schedule_factor(epoch);
        for chunk in order.chunks(pair_batch) {
            let mut g = Graph::new();
            let mut parts = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let mut neg = rng.random_range(0..scenes.len());
                while neg == si || scenes[neg].caption == scenes[si].caption {
                    neg = rng.random_range(0..scenes.len());
                }
                let pos_score = head.score_node(&mut g, model, &scenes[si].caption, &images[si], vocab)?;
                let neg_score = head.score_node(&mut g, model, &scenes[neg].caption, &images[si], vocab)?;
                // softplus(margin - (pos - neg)) -> 0 once separated by the margin
                let diff = g.sub(pos_score, neg_score)?;
                let neg_diff = g.scale(diff, -1.0);
                let shifted = g.add_scalar(neg_diff, cfg.ranking_margin);
                parts.push(g.softplus(shifted));
            }
            let loss = mean_of(&mut g, &parts)?;
            apply_step(&mut g, loss, model, &mut opt, lr_scale)?;
        }
    }
    Ok(())
}

/// Fraction of ordered pairs (i, j != i) where the own caption outscores the
/// other scene's caption.
pub fn eval_retrieval_pairwise(
    model: &VlpModel,
    head: &RetrievalHead,
    scenes: &[SceneAnnotation],
    vocab: &Vocabulary,
) -> Result<f64> {
    let images: Vec<ImageTensor> = scenes.iter().map(|s| s.image_tensor()).collect::<Result<_>>()?;
    // score matrix: image i against caption j
    let n = scenes.len();
    let mut scores = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            scores[i * n + j] = head.score(model, &scenes[j].caption, &images[i], vocab)?;
        }
    }
    let mut wins = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i == j || scenes[i].caption == scenes[j].caption {
                continue;
            }
            total += 1;
            if scores[i * n + i] > scores[i * n + j] {
                wins += 1;
            }
        }
    }
    Ok(wins as f64 / total.max(1) as f64)
}

/// Recall@k for image-to-text retrieval over a caption pool: the rank of the
/// own caption among all pool captions scored against the image.
pub fn eval_retrieval_recall_at(
    model: &VlpModel,
    head: &RetrievalHead,
    scenes: &[SceneAnnotation],
    vocab: &Vocabulary,
    k: usize,
) -> Result<f64> {
    let images: Vec<ImageTensor> = scenes.iter().map(|s| s.image_tensor()).collect::<Result<_>>()?;
    let n = scenes.len();
    let mut hits = 0usize;
    for i in 0..n {
        let own = head.score(model, &scenes[i].caption, &images[i], vocab)?;
        let better = (0..n)
            .filter(|&j| j != i)
            .filter(|&j| head.score(model, &scenes[j].caption, &images[i], vocab).unwrap_or(f64::NEG_INFINITY) > own)
            .count();
        if better < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

// -- caption fine-tuning --------------------------------------------------------------

/// Continue training the caption objective alone, with label smoothing.
pub fn finetune_caption(
    model: &mut VlpModel,
    scenes: &[SceneAnnotation],
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<()> {
    let images: Vec<ImageTensor> = scenes.iter().map(|s| s.image_tensor()).collect::<Result<_>>()?;
    let mut opt = AdamW::new(cfg.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let toggles = LossToggles { mlm: false, itm: false, detection: false, caption: true };
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let lr_scale = opt.cfg.schedule_factor(epoch);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let mut parts = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let ex = matched_example(
                    &scenes[si],
                    &images[si],
                    vocab,
                    model.cfg.max_text_len,
                    model.cfg.max_caption_len,
                    None,
                )?;
                let losses = model.pair_losses(&mut g, &ex, toggles, vocab, cfg.label_smooth, None)?;
                parts.push(losses.caption.expect("caption loss requested"));
            }
            let loss = mean_of(&mut g, &parts)?;
            apply_step(&mut g, loss, model, &mut opt, lr_scale)?;
        }
    }
    Ok(())
}

/// Exact-match rate and corpus BLEU-4 of greedy captions against the
/// generator captions.
pub fn eval_captions(
    model: &VlpModel,
    scenes: &[SceneAnnotation],
    vocab: &Vocabulary,
) -> Result<(f64, f64)> {
    let mut exact = 0usize;
    let mut hyps = Vec::with_capacity(scenes.len());
    let mut refs = Vec::with_capacity(scenes.len());
    for s in scenes {
        let img = s.image_tensor()?;
        let ids = model.caption_greedy(&img, vocab)?;
        let text = detokenize(&ids, vocab);
        if text == s.caption {
            exact += 1;
        }
        hyps.push(text);
        refs.push(s.caption.clone());
    }
    let bleu = corpus_bleu4(&hyps, &refs);
    Ok((exact as f64 / scenes.len() as f64, bleu))
}

/// Corpus BLEU-4: geometric mean of 1..4-gram modified precisions with the
/// standard brevity penalty.
pub fn corpus_bleu4(hypotheses: &[String], references: &[String]) -> f64 {
    assert_eq!(hypotheses.len(), references.len());
    let grams = |words: &[&str], n: usize| -> std::collections::HashMap<Vec<String>, usize> {
        let mut m = std::collections::HashMap::new();
        if words.len() >= n {
            for w in words.windows(n) {
                *m.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
            }
        }
        m
    };
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    let mut matched = [0usize; 4];
    let mut totals = [0usize; 4];
    for (h, r) in hypotheses.iter().zip(references) {
        let hw: Vec<&str> = h.split_whitespace().collect();
        let rw: Vec<&str> = r.split_whitespace().collect();
        hyp_len += hw.len();
        ref_len += rw.len();
        for n in 1..=4 {
            let hg = grams(&hw, n);
            let rg = grams(&rw, n);
            for (gram, &count) in &hg {
                totals[n - 1] += count;
                matched[n - 1] += count.min(rg.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if totals.contains(&0) || matched.contains(&0) {
        return 0.0;
    }
    let log_prec: f64 = (0..4)
        .map(|i| (matched[i] as f64 / totals[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_prec.exp()
}

// -- detection evaluation ---------------------------------------------------------------

/// One ranked detection candidate.
#[derive(Debug, Clone)]
pub struct RankedDetection {
    pub scene_idx: usize,
    pub class: usize,
    pub score: f64,
    pub box_cxcywh: [f64; 4],
}

/// Flatten query outputs into ranked per-class candidates: each query
/// contributes its best real class scored by that class's probability.
pub fn rank_detections(preds: &[PredictedObjects]) -> Vec<RankedDetection> {
    let mut out = Vec::new();
    for (scene_idx, p) in preds.iter().enumerate() {
        for (q, probs) in p.class_probs.iter().enumerate() {
            let real = &probs[..probs.len() - 1];
            let (class, &score) = real
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .expect("at least one real class");
            out.push(RankedDetection {
                scene_idx,
                class,
                score,
                box_cxcywh: p.boxes[q],
            });
        }
    }
    out
}

/// Size bucket for stratified AP, by normalized box area.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

pub fn size_bucket(b: &[f64; 4]) -> SizeBucket {
    let area = b[2] * b[3];
    if area < 0.07 {
        SizeBucket::Small
    } else if area < 0.12 {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

/// Average precision at one IoU threshold over all classes (mean of
/// per-class APs, all-point interpolation). `bucket` restricts ground truth
/// to a size range; detections matching out-of-bucket ground truth are
/// ignored rather than counted as false positives.
pub fn mean_average_precision(
    detections: &[RankedDetection],
    gts: &[&GroundTruthObjects],
    iou_thresh: f64,
    bucket: Option<SizeBucket>,
    num_classes: usize,
) -> f64 {
    let mut aps = Vec::new();
    for class in 0..num_classes {
        // ground truth of this class, flagged in/out of bucket
        let mut gt_boxes: Vec<(usize, [f64; 4], bool)> = Vec::new(); // (scene, box, counted)
        for (scene_idx, gt) in gts.iter().enumerate() {
            for (i, &c) in gt.classes.iter().enumerate() {
                if c == class {
                    let counted = bucket.map(|b| size_bucket(&gt.boxes[i]) == b).unwrap_or(true);
                    gt_boxes.push((scene_idx, gt.boxes[i], counted));
                }
            }
        }
        let total_counted = gt_boxes.iter().filter(|(_, _, counted)| *counted).count();
        if total_counted == 0 {
            continue;
        }
        let mut dets: Vec<&RankedDetection> = detections.iter().filter(|d| d.class == class).collect();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut used = vec![false; gt_boxes.len()];
        let mut tps = Vec::with_capacity(dets.len());
        for d in dets {
            // best unmatched ground truth of this class in the same scene
            let mut best: Option<(usize, f64)> = None;
            for (gi, (scene_idx, gbox, _)) in gt_boxes.iter().enumerate() {
                if *scene_idx != d.scene_idx || used[gi] {
                    continue;
                }
                let ov = iou(&d.box_cxcywh, gbox);
                if ov >= iou_thresh && best.map(|(_, b)| ov > b).unwrap_or(true) {
                    best = Some((gi, ov));
                }
            }
            match best {
                Some((gi, _)) => {
                    used[gi] = true;
                    if gt_boxes[gi].2 {
                        tps.push(true);
                    } // match to ignored ground truth: drop silently
                }
                None => tps.push(false),
            }
        }
        // all-point interpolated AP
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut points: Vec<(f64, f64)> = Vec::with_capacity(tps.len()); // (recall, precision)
        for is_tp in tps {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            points.push((tp as f64 / total_counted as f64, tp as f64 / (tp + fp) as f64));
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for i in 0..points.len() {
            let (r, _) = points[i];
            if r > prev_recall {
                let max_prec = points[i..]
                    .iter()
                    .map(|&(_, p)| p)
                    .fold(0.0, f64::max);
                ap += (r - prev_recall) * max_prec;
                prev_recall = r;
            }
        }
        aps.push(ap);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Per-class precision at an IoU threshold, counting each query's best-class
/// candidate above `score_thresh` as a prediction.
pub fn per_class_precision(
    detections: &[RankedDetection],
    gts: &[&GroundTruthObjects],
    iou_thresh: f64,
    score_thresh: f64,
    num_classes: usize,
) -> Vec<(usize, f64, usize)> {
    let mut out = Vec::new();
    for class in 0..num_classes {
        let mut dets: Vec<&RankedDetection> = detections
            .iter()
            .filter(|d| d.class == class && d.score >= score_thresh)
            .collect();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut gt_boxes: Vec<(usize, [f64; 4])> = Vec::new();
        for (scene_idx, gt) in gts.iter().enumerate() {
            for (i, &c) in gt.classes.iter().enumerate() {
                if c == class {
                    gt_boxes.push((scene_idx, gt.boxes[i]));
                }
            }
        }
        let mut used = vec![false; gt_boxes.len()];
        let mut tp = 0usize;
        for d in &dets {
            for (gi, (scene_idx, gbox)) in gt_boxes.iter().enumerate() {
                if *scene_idx == d.scene_idx && !used[gi] && iou(&d.box_cxcywh, gbox) >= iou_thresh {
                    used[gi] = true;
                    tp += 1;
                    break;
                }
            }
        }
        let precision = if dets.is_empty() { 0.0 } else { tp as f64 / dets.len() as f64 };
        out.push((class, precision, dets.len()));
    }
    out
}

/// Attribute accuracy over Hungarian-matched objects.
pub fn attribute_accuracy(preds: &[PredictedObjects], gts: &[&GroundTruthObjects], attr_probs: &[Vec<Vec<f64>>]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for ((pred, gt), attrs) in preds.iter().zip(gts).zip(attr_probs) {
        if gt.is_empty() {
            continue;
        }
        let cost = matching_cost(gt, pred)?;
        let a = hungarian(&cost, gt.len(), pred.boxes.len())?;
        let gt_attrs = gt.attributes.as_ref().ok_or_else(|| {
            Error::contract("attribute_accuracy", "ground truth lacks attributes")
        })?;
        for (i, &q) in a.sigma.iter().enumerate() {
            let pred_attr = attrs[q]
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .map(|(k, _)| k)
                .expect("non-empty attribute row");
            if pred_attr == gt_attrs[i] {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Detached attribute probabilities per query for one scene's detection.
pub fn attr_probs_of(g: &Graph, set: &crate::decoder::DetectionSet) -> Vec<Vec<f64>> {
    let logits = g.value(set.attr_logits);
    let (n, k) = (logits.dims()[0], logits.dims()[1]);
    (0..n)
        .map(|q| {
            let row = &logits.data()[q * k..(q + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&z| (z - mx).exp()).collect();
            let s: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / s).collect()
        })
        .collect()
}

/// Full detection evaluation over scenes: encode (with each scene's caption
/// when `with_text`), decode, and score.
pub struct DetectionEval {
    pub map50: f64,
    pub map75: f64,
    pub map50_small: f64,
    pub map50_medium: f64,
    pub map50_large: f64,
    pub attr_accuracy: f64,
    pub per_class_precision50: Vec<(usize, f64, usize)>,
}

pub fn eval_detection(
    model: &VlpModel,
    scenes: &[SceneAnnotation],
    vocab: &Vocabulary,
    with_text: bool,
) -> Result<DetectionEval> {
    let mut preds = Vec::with_capacity(scenes.len());
    let mut attr_probs = Vec::with_capacity(scenes.len());
    for s in scenes {
        let img = s.image_tensor()?;
        let seq = if with_text {
            tokenize(&s.caption, vocab, model.cfg.max_text_len)?
        } else {
            model.empty_text(vocab)?
        };
        let mut g = Graph::inference();
        let state = model.encode_pair(&mut g, &seq, &img)?;
        let sets = model
            .decoder
            .detect(&mut g, &model.store, &state, model.cfg.detect_cross_attend_text, false)?;
        preds.push(sets[0].snapshot(&g));
        attr_probs.push(attr_probs_of(&g, &sets[0]));
    }
    let gts: Vec<&GroundTruthObjects> = scenes.iter().map(|s| &s.objects).collect();
    let ranked = rank_detections(&preds);
    Ok(DetectionEval {
        map50: mean_average_precision(&ranked, &gts, 0.5, None, model.cfg.num_classes),
        map75: mean_average_precision(&ranked, &gts, 0.75, None, model.cfg.num_classes),
        map50_small: mean_average_precision(&ranked, &gts, 0.5, Some(SizeBucket::Small), model.cfg.num_classes),
        map50_medium: mean_average_precision(&ranked, &gts, 0.5, Some(SizeBucket::Medium), model.cfg.num_classes),
        map50_large: mean_average_precision(&ranked, &gts, 0.5, Some(SizeBucket::Large), model.cfg.num_classes),
        attr_accuracy: attribute_accuracy(&preds, &gts, &attr_probs)?,
        per_class_precision50: per_class_precision(&ranked, &gts, 0.5, 0.5, model.cfg.num_classes),
    })
}

// -- shared helpers ----------------------------------------------------------------------

fn mean_of(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    if parts.is_empty() {
        return Err(Error::contract("mean_of", "no loss parts"));
    }
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = g.add(acc, *p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f64))
}

fn apply_step(g: &mut Graph, loss: NodeId, model: &mut VlpModel, opt: &mut AdamW, lr_scale: f64) -> Result<()> {
    if !g.value(loss).is_finite() {
        return Err(Error::NonFinite("finetune step"));
    }
    g.backward(loss)?;
    model.store.zero_grads();
    let grads = g.param_grads();
    model.store.accumulate_grads(&grads);
    opt.clip_gradients(&mut model.store);
    opt.step(&mut model.store, lr_scale);
    model.store.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu4_identity_is_one() {
        let refs = vec!["a red circle left of a blue square".to_string()];
        assert!((corpus_bleu4(&refs, &refs) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu4_matches_hand_computation() {
        // hyp: "a red circle", ref: "a red square"
        // 1-grams matched 2/3, 2-grams 1/2, 3-grams 0/1 -> BLEU = 0
        let hyp = vec!["a red circle".to_string()];
        let r = vec!["a red square".to_string()];
        assert_eq!(corpus_bleu4(&hyp, &r), 0.0);

        // same lengths, full 4-gram overlap on a subset
        let hyp = vec!["a red circle left of a blue square".to_string()];
        let r2 = vec!["a red circle left of a blue circle".to_string()];
        // counts: 1g 7/8, 2g 6/7, 3g 5/6, 4g 4/5, bp = 1
        let want = ((7.0f64 / 8.0).ln() + (6.0f64 / 7.0).ln() + (5.0f64 / 6.0).ln() + (4.0f64 / 5.0).ln()) / 4.0;
        assert!((corpus_bleu4(&hyp, &r2) - want.exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu4_brevity_penalty_applies() {
        let hyp = vec!["a red circle left".to_string()];
        let r = vec!["a red circle left of a blue square".to_string()];
        let b = corpus_bleu4(&hyp, &r);
        // precisions are perfect (1.0) but the hypothesis is half length
        let want = (1.0f64 - 8.0 / 4.0).exp();
        assert!((b - want).abs() < 1e-12, "{b} vs {want}");
    }

    #[test]
    fn map_is_one_for_perfect_detections() {
        let gt = GroundTruthObjects::new(
            vec![0, 1],
            None,
            vec![[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]],
        )
        .unwrap();
        let dets = vec![
            RankedDetection { scene_idx: 0, class: 0, score: 0.99, box_cxcywh: [0.3, 0.3, 0.2, 0.2] },
            RankedDetection { scene_idx: 0, class: 1, score: 0.98, box_cxcywh: [0.7, 0.7, 0.2, 0.2] },
            // low-scoring noise from the remaining queries
            RankedDetection { scene_idx: 0, class: 0, score: 0.01, box_cxcywh: [0.1, 0.9, 0.1, 0.1] },
        ];
        let m = mean_average_precision(&dets, &[&gt], 0.5, None, 3);
        assert!((m - 1.0).abs() < 1e-12, "noise below the hits must not hurt AP, got {m}");
    }

    #[test]
    fn map_penalizes_misses_and_wrong_boxes() {
        let gt = GroundTruthObjects::new(vec![0], None, vec![[0.3, 0.3, 0.2, 0.2]]).unwrap();
        let dets = vec![RankedDetection {
            scene_idx: 0,
            class: 0,
            score: 0.9,
            box_cxcywh: [0.8, 0.8, 0.1, 0.1],
        }];
        let m = mean_average_precision(&dets, &[&gt], 0.5, None, 3);
        assert_eq!(m, 0.0);
    }

    #[test]
    fn map_at_75_is_stricter_than_50() {
        let gt = GroundTruthObjects::new(vec![0], None, vec![[0.3, 0.3, 0.2, 0.2]]).unwrap();
        // around IoU 0.6 against the ground truth
        let dets = vec![RankedDetection {
            scene_idx: 0,
            class: 0,
            score: 0.9,
            box_cxcywh: [0.33, 0.3, 0.2, 0.2],
        }];
        let ov = iou(&dets[0].box_cxcywh, &gt.boxes[0]);
        assert!(ov > 0.5 && ov < 0.75, "fixture sanity: {ov}");
        assert_eq!(mean_average_precision(&dets, &[&gt], 0.5, None, 3), 1.0);
        assert_eq!(mean_average_precision(&dets, &[&gt], 0.75, None, 3), 0.0);
    }

    #[test]
    fn size_buckets_split_by_area() {
        assert_eq!(size_bucket(&[0.5, 0.5, 0.2, 0.2]), SizeBucket::Small); // 0.04
        assert_eq!(size_bucket(&[0.5, 0.5, 0.3, 0.3]), SizeBucket::Medium); // 0.09
        assert_eq!(size_bucket(&[0.5, 0.5, 0.4, 0.4]), SizeBucket::Large); // 0.16
    }
}
