//! Independent oracles used by the test and acceptance suites.
//!
//! Nothing here shares code with the implementations it checks: the
//! assignment oracle enumerates injections directly instead of calling the
//! Hungarian solver, and the gradient prober treats the loss as a black-box
//! function of a flat parameter vector.

use crate::error::{Error, Result};
use serde::Serialize;

/// Default central-difference probe step.
pub const DEFAULT_PROBE: f64 = 1e-5;

/// Largest row count the exhaustive assignment oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 7;

/// Exhaustive-minimum result over injective row-to-column maps.
#[derive(Debug, Clone)]
pub struct BruteForceAssignment {
    /// One optimal column choice per row, for every optimal assignment found.
    pub optima: Vec<Vec<usize>>,
    pub total_cost: f64,
}

/// Exhaustively minimize total cost over all injective assignments of the
/// `m` rows to the `n` columns of a row-major cost matrix.
///
/// Refuses `m > BRUTE_FORCE_LIMIT`. Reports every assignment attaining the
/// minimum (exact float equality) so tie-break rules can be asserted;
/// `optima` is sorted lexicographically.
pub fn brute_force_assignment(cost: &[f64], m: usize, n: usize) -> Result<BruteForceAssignment> {
    if m == 0 || n == 0 || cost.len() != m * n {
        return Err(Error::contract(
            "brute_force_assignment",
            format!("cost matrix {m}x{n} with {} entries", cost.len()),
        ));
    }
    if m > n {
        return Err(Error::contract(
            "brute_force_assignment",
            format!("m={m} rows exceed n={n} columns"),
        ));
    }
    if m > BRUTE_FORCE_LIMIT {
        return Err(Error::contract(
            "brute_force_assignment",
            format!("m={m} exceeds factorial guard {BRUTE_FORCE_LIMIT}"),
        ));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("brute_force_assignment"));
    }

    let mut best = f64::INFINITY;
    let mut optima: Vec<Vec<usize>> = Vec::new();
    let mut used = vec![false; n];
    let mut current = vec![0usize; m];

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        cost: &[f64],
        m: usize,
        n: usize,
        row: usize,
        acc: f64,
        used: &mut [bool],
        current: &mut [usize],
        best: &mut f64,
        optima: &mut Vec<Vec<usize>>,
    ) {
        if row == m {
            if acc < *best {
                *best = acc;
                optima.clear();
                optima.push(current.to_vec());
            } else if acc == *best {
                optima.push(current.to_vec());
            }
            return;
        }
        for col in 0..n {
            if used[col] {
                continue;
            }
            used[col] = true;
            current[row] = col;
            recurse(cost, m, n, row + 1, acc + cost[row * n + col], used, current, best, optima);
            used[col] = false;
        }
    }

    recurse(cost, m, n, 0, 0.0, &mut used, &mut current, &mut best, &mut optima);
    optima.sort();
    Ok(BruteForceAssignment { optima, total_cost: best })
}

/// Per-coordinate outcome of a finite-difference probe.
#[derive(Debug, Clone, Serialize)]
pub struct GradProbe {
    pub index: usize,
    pub numeric: f64,
    pub analytic: f64,
    pub rel_err: f64,
}

/// Report for one gradient check, serializable for the acceptance suite.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Coordinates where the loss came back non-finite at a probe point.
    pub non_finite: Vec<usize>,
    pub worst: Option<GradProbe>,
}

/// Central-difference gradient estimate of a scalar black-box function.
///
/// `f` must be deterministic (dropout off). Returns one estimate per
/// coordinate of `params`; non-finite losses are reported per coordinate as
/// NaN entries.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, params: &[f64], probe: f64) -> Vec<f64> {
    let mut work = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + probe;
        let up = f(&work);
        work[i] = orig - probe;
        let down = f(&work);
        work[i] = orig;
        grad[i] = if up.is_finite() && down.is_finite() {
            (up - down) / (2.0 * probe)
        } else {
            f64::NAN
        };
    }
    grad
}

/// Central-difference estimates at a chosen subset of coordinates.
pub fn finite_diff_grad_at(
    f: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    indices: &[usize],
    probe: f64,
) -> Vec<f64> {
    let mut work = params.to_vec();
    let mut grad = vec![0.0; indices.len()];
    for (slot, &i) in indices.iter().enumerate() {
        let orig = work[i];
        work[i] = orig + probe;
        let up = f(&work);
        work[i] = orig - probe;
        let down = f(&work);
        work[i] = orig;
        grad[slot] = if up.is_finite() && down.is_finite() {
            (up - down) / (2.0 * probe)
        } else {
            f64::NAN
        };
    }
    grad
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
pub fn rel_err(numeric: f64, analytic: f64) -> f64 {
    let denom = numeric.abs().max(analytic.abs()).max(1e-6);
    (numeric - analytic).abs() / denom
}

/// Compare an analytic gradient against central differences at selected
/// coordinates and produce a pass/fail report.
pub fn check_gradient(
    name: &str,
    f: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    probe: f64,
    tolerance: f64,
) -> GradCheckReport {
    let numeric = finite_diff_grad_at(f, params, indices, probe);
    let mut max_rel = 0.0;
    let mut worst = None;
    let mut non_finite = Vec::new();
    for (slot, &i) in indices.iter().enumerate() {
        if numeric[slot].is_nan() {
            non_finite.push(i);
            continue;
        }
        let e = rel_err(numeric[slot], analytic[i]);
        if e >= max_rel {
            max_rel = e;
            worst = Some(GradProbe {
                index: i,
                numeric: numeric[slot],
                analytic: analytic[i],
                rel_err: e,
            });
        }
    }
    GradCheckReport {
        name: name.to_string(),
        checked: indices.len(),
        max_rel_err: max_rel,
        tolerance,
        passed: non_finite.is_empty() && max_rel <= tolerance,
        non_finite,
        worst,
    }
}

// -- gradient-check drivers -----------------------------------------------------
//
// The estimators above are black-box; the drivers below wire them to the
// model's ops and losses so the acceptance suite can run one call per
// criterion and collect JSON reports.

use crate::data::{generate, synthetic_vocabulary, SceneConfig, SceneAnnotation};
use crate::encoder::{sample_mlm_mask, MlmBatchMask};
use crate::graph::{AttnMask, Graph};
use crate::matching::Assignment;
use crate::model::{matched_example, LossToggles, ModelConfig, VlpModel};
use crate::nn::{AttentionConfig, MultiHeadAttention, ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::text::tokenize;
use crate::train::{moving_average, StepMetrics, Trainer};
use crate::vision::BackboneConfig;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const OP_LEVEL_TOL: f64 = 1e-4;
pub const FULL_MODEL_TOL: f64 = 1e-3;

fn wave(n: usize, freq: f64, scale: f64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * freq).sin() * scale).collect()
}

fn check_var_op(
    name: &str,
    shape: &[usize],
    init: Vec<f64>,
    build: &dyn Fn(&mut Graph, crate::graph::NodeId) -> crate::graph::NodeId,
) -> GradCheckReport {
    let mut g = Graph::new();
    let x = g.var(Tensor::new(shape, init.clone()).expect("shape"));
    let loss = build(&mut g, x);
    g.backward(loss).expect("backward");
    let analytic = g.grad(x).expect("grad").data().to_vec();
    let mut f = |p: &[f64]| {
        let mut g = Graph::inference();
        let x = g.input(Tensor::new(shape, p.to_vec()).expect("shape"));
        let loss = build(&mut g, x);
        g.value(loss).item()
    };
    let indices: Vec<usize> = (0..init.len()).collect();
    check_gradient(name, &mut f, &init, &analytic, &indices, DEFAULT_PROBE, OP_LEVEL_TOL)
}

/// Finite-difference sweep over every differentiable operation, each probed
/// on a small random instance through a scalar read-out.
pub fn op_level_grad_checks() -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    let weighted_sum = |g: &mut Graph, x: crate::graph::NodeId| -> crate::graph::NodeId {
        let n = g.value(x).numel();
        let shape = g.value(x).shape().clone();
        let w = g.input(Tensor::new(shape, wave(n, 0.83, 1.0)).expect("shape"));
        let prod = g.mul(x, w).expect("mul");
        g.sum_all(prod)
    };

    reports.push(check_var_op("relu", &[8], wave(8, 0.9, 1.3), &|g, x| {
        let y = g.relu(x);
        weighted_sum(g, y)
    }));
    reports.push(check_var_op("sigmoid", &[8], wave(8, 0.7, 2.0), &|g, x| {
        let y = g.sigmoid(x);
        weighted_sum(g, y)
    }));
    reports.push(check_var_op("softplus", &[8], wave(8, 1.1, 2.0), &|g, x| {
        let y = g.softplus(x);
        weighted_sum(g, y)
    }));
    reports.push(check_var_op("abs", &[8], wave(8, 1.3, 1.0), &|g, x| {
        let y = g.abs(x);
        weighted_sum(g, y)
    }));
    reports.push(check_var_op("mul_div", &[6], wave(6, 0.5, 1.0), &|g, x| {
        let c = g.input(Tensor::new([6], vec![1.5, -0.7, 2.2, 0.9, -1.8, 1.1]).unwrap());
        let prod = g.mul(x, c).unwrap();
        let denom = g.input(Tensor::new([6], vec![1.2, 2.1, 0.8, 1.9, 1.4, 2.7]).unwrap());
        let q = g.div(prod, denom).unwrap();
        weighted_sum(g, q)
    }));
    reports.push(check_var_op("min_max_elem", &[6], wave(6, 0.77, 1.0), &|g, x| {
        let c = g.input(Tensor::new([6], vec![0.3, -0.4, 0.9, -1.2, 0.1, 0.6]).unwrap());
        let lo = g.min_elem(x, c).unwrap();
        let hi = g.max_elem(x, c).unwrap();
        let sum = g.add(lo, hi).unwrap();
        weighted_sum(g, sum)
    }));
    reports.push(check_var_op("matmul", &[3, 4], wave(12, 0.37, 0.8), &|g, x| {
        let w = g.input(Tensor::new([4, 2], wave(8, 0.61, 0.9)).unwrap());
        let y = g.matmul(x, w).unwrap();
        weighted_sum(g, y)
    }));
    reports.push(check_var_op("matmul_nt", &[3, 4], wave(12, 0.41, 0.8), &|g, x| {
        let w = g.input(Tensor::new([5, 4], wave(20, 0.29, 0.9)).unwrap());
        let y = g.matmul_nt(x, w).unwrap();
        weighted_sum(g, y)
    }));
    reports.push(check_var_op("layer_norm", &[3, 6], wave(18, 0.53, 1.5), &|g, x| {
        let gamma = g.input(Tensor::new([6], wave(6, 0.97, 0.5)).unwrap());
        let beta = g.input(Tensor::new([6], wave(6, 0.31, 0.2)).unwrap());
        let y = g.layer_norm(x, gamma, beta).unwrap();
        weighted_sum(g, y)
    }));
    reports.push(check_var_op("group_norm", &[4, 3, 2], wave(24, 0.67, 1.2), &|g, x| {
        let gamma = g.input(Tensor::new([4], vec![1.0, 0.8, 1.2, 0.9]).unwrap());
        let beta = g.input(Tensor::new([4], vec![0.1, -0.2, 0.0, 0.3]).unwrap());
        let y = g.group_norm(x, 2, gamma, beta).unwrap();
        weighted_sum(g, y)
    }));
    reports.push(check_var_op("conv2d", &[2, 5, 5], wave(50, 0.43, 0.9), &|g, x| {
        let k = g.input(Tensor::new([3, 2, 3, 3], wave(54, 0.23, 0.4)).unwrap());
        let b = g.input(Tensor::new([3], vec![0.1, -0.1, 0.2]).unwrap());
        let y = g.conv2d(x, k, Some(b), 2, 1).unwrap();
        weighted_sum(g, y)
    }));
    reports.push(check_var_op("conv2d_kernel", &[3, 2, 3, 3], wave(54, 0.19, 0.5), &|g, k| {
        let x = g.input(Tensor::new([2, 5, 5], wave(50, 0.47, 0.8)).unwrap());
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        weighted_sum(g, y)
    }));
    reports.push(check_var_op("masked_softmax", &[3, 4], wave(12, 0.71, 1.4), &|g, x| {
        let mask = AttnMask::from_fn(3, 4, |i, j| !(i == 1 && j >= 2));
        let y = g.masked_softmax(x, &mask).unwrap();
        weighted_sum(g, y)
    }));
    reports.push(check_var_op("cross_entropy", &[3, 5], wave(15, 0.59, 1.1), &|g, x| {
        g.cross_entropy_rows(x, &[1, 4, 0], &[0.5, 0.3, 0.2], 0.0).unwrap()
    }));
    reports.push(check_var_op("cross_entropy_smoothed", &[2, 5], wave(10, 0.83, 1.3), &|g, x| {
        g.cross_entropy_rows(x, &[2, 3], &[0.6, 0.4], 0.1).unwrap()
    }));
    reports.push(check_var_op("bce_with_logits", &[6], wave(6, 0.91, 1.6), &|g, x| {
        g.bce_with_logits(x, &[1.0, 0.0, 1.0, 0.0, 0.5, 1.0]).unwrap()
    }));
    reports.push(check_var_op("embedding_table", &[5, 3], wave(15, 0.37, 0.8), &|g, t| {
        let e = g.embedding(t, &[0, 3, 3, 1]).unwrap();
        weighted_sum(g, e)
    }));

    // multi-head attention through a full layer, probing the input sequence
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = AttentionConfig { hidden_size: 8, num_heads: 2, ffn_size: 16, dropout_rate: 0.0 };
    let mha = MultiHeadAttention::new(&mut store, &mut rng, "probe_attn", cfg, ParamGroup::Transformer)
        .expect("config");
    let mask = AttnMask::causal(3);
    reports.push(check_var_op("multi_head_attention", &[3, 8], wave(24, 0.47, 0.7), &|g, x| {
        let y = mha.forward(g, &store, x, x, &mask).unwrap();
        let n = g.value(y).numel();
        let w = g.input(Tensor::new([3, 8], wave(n, 0.83, 1.0)).unwrap());
        let prod = g.mul(y, w).unwrap();
        g.sum_all(prod)
    }));
    reports
}

/// Fixed, fully materialized batch for deterministic loss probes.
pub struct ProbeBatch {
    pub scenes: Vec<SceneAnnotation>,
    pub masks: Vec<MlmBatchMask>,
    pub sigmas: Vec<Option<Assignment>>,
}

fn tiny_probe_model(seed: u64) -> VlpModel {
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
    VlpModel::new(cfg, synthetic_vocabulary().len(), seed).expect("tiny model")
}

/// Sum of the four assembled losses over a fixed two-scene batch, as a
/// function of the flat parameter vector. Masks, labels, and assignments are
/// frozen so the function is deterministic and differentiable.
fn joint_loss_given_params(
    model: &mut VlpModel,
    batch: &ProbeBatch,
    toggles: LossToggles,
    flat: &[f64],
    grad: bool,
) -> (f64, Option<Vec<f64>>) {
    model.store.unflatten(flat);
    let vocab = synthetic_vocabulary();
    let mut g = if grad { Graph::new() } else { Graph::inference() };
    let mut total: Option<crate::graph::NodeId> = None;
    for (i, scene) in batch.scenes.iter().enumerate() {
        let img = scene.image_tensor().expect("image");
        let ex = matched_example(
            scene,
            &img,
            &vocab,
            model.cfg.max_text_len,
            model.cfg.max_caption_len,
            Some(batch.masks[i].clone()),
        )
        .expect("example");
        let losses = model
            .pair_losses(&mut g, &ex, toggles, &vocab, 0.0, batch.sigmas[i].as_ref())
            .expect("losses");
        for part in [losses.mlm, losses.itm, losses.detection, losses.caption].into_iter().flatten() {
            total = Some(match total {
                Some(t) => g.add(t, part).expect("add"),
                None => part,
            });
        }
    }
    let total = total.expect("at least one loss");
    let value = g.value(total).item();
    if !grad {
        return (value, None);
    }
    g.backward(total).expect("backward");
    model.store.zero_grads();
    let grads = g.param_grads();
    model.store.accumulate_grads(&grads);
    (value, Some(model.store.flatten_grads()))
}

/// Build the frozen probe batch (MLM masks and matching assignments pinned
/// at the base parameter point).
pub fn make_probe_batch(model: &VlpModel, seed: u64) -> ProbeBatch {
    let vocab = synthetic_vocabulary();
    let scenes = generate(seed, 2, &SceneConfig::default()).expect("scenes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1ab1e);
    let mut masks = Vec::new();
    let mut sigmas = Vec::new();
    for scene in &scenes {
        let seq = tokenize(&scene.caption, &vocab, model.cfg.max_text_len).expect("tokenize");
        let mut mask = sample_mlm_mask(&seq, 0.15, vocab.len(), &mut rng);
        if mask.is_empty() {
            // force one masked position so the MLM term participates
            mask = MlmBatchMask {
                masked_positions: vec![1],
                original_ids: vec![seq.token_ids[1]],
                corruption: vec![crate::encoder::Corruption::Mask],
            };
        }
        masks.push(mask);
        // pin the assignment at the base point
        let img = scene.image_tensor().expect("image");
        let mut g = Graph::inference();
        let ex = matched_example(scene, &img, &vocab, model.cfg.max_text_len, model.cfg.max_caption_len, None)
            .expect("example");
        let grid = model.embed_image(&mut g, ex.image).expect("grid");
        let state = model
            .encode_with_grid(&mut g, &ex.seq_input, &grid, false)
            .expect("state");
        let sets = model
            .decoder
            .detect(&mut g, &model.store, &state, model.cfg.detect_cross_attend_text, false)
            .expect("detect");
        sigmas.push(Some(model.match_scene(&g, &scene.objects, &sets[0]).expect("match")));
    }
    ProbeBatch { scenes, masks, sigmas }
}

/// Sampled finite-difference check of one assembled loss (or their sum) over
/// the full parameter vector of a tiny model.
pub fn assembled_loss_grad_check(name: &str, toggles: LossToggles, coords: usize, seed: u64) -> GradCheckReport {
    let mut model = tiny_probe_model(seed);
    let batch = make_probe_batch(&model, seed.wrapping_add(100));
    let base = model.store.flatten();
    let (_, grads) = joint_loss_given_params(&mut model, &batch, toggles, &base, true);
    let analytic = grads.expect("analytic gradient");

    // sample coordinates spread over all parameters, biased to nonzero grads
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFEED);
    let mut indices: Vec<usize> = Vec::with_capacity(coords);
    let nonzero: Vec<usize> = (0..base.len()).filter(|&i| analytic[i].abs() > 1e-12).collect();
    let pool = if nonzero.is_empty() { (0..base.len()).collect() } else { nonzero };
    for _ in 0..coords {
        indices.push(pool[rng.random_range(0..pool.len())]);
    }
    indices.sort_unstable();
    indices.dedup();

    let mut f = |p: &[f64]| joint_loss_given_params(&mut model, &batch, toggles, p, false).0;
    let report = check_gradient(name, &mut f, &base, &analytic, &indices, DEFAULT_PROBE, FULL_MODEL_TOL);
    // restore the base point
    model.store.unflatten(&base);
    report
}

// -- overfit acceptance driver ----------------------------------------------------

/// Criterion-style summary of one pretraining run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct OverfitComponent {
    pub name: String,
    pub ma_step10: f64,
    pub ma_final: f64,
    pub ratio: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct OverfitReport {
    pub steps: u64,
    pub components: Vec<OverfitComponent>,
    pub stem_grad_always_nonzero: bool,
    pub min_stem_grad_norm: f64,
    pub total_matches_component_sum: bool,
    pub max_total_rel_gap: f64,
    pub wall_seconds: f64,
    pub passed: bool,
}

/// Moving-average window used by the overfit criterion.
pub const MA_WINDOW: usize = 50;
/// Each component must end below this fraction of its step-10 moving average.
pub const OVERFIT_RATIO: f64 = 0.1;

/// Evaluate the overfit criterion over a finished run's metrics.
pub fn overfit_report(history: &[StepMetrics], wall_seconds: f64) -> OverfitReport {
    let series: [(&str, Vec<f64>); 4] = [
        ("mlm", history.iter().map(|m| m.mlm).collect()),
        ("itm", history.iter().map(|m| m.itm).collect()),
        ("detection", history.iter().map(|m| m.detection).collect()),
        ("caption", history.iter().map(|m| m.caption).collect()),
    ];
    let last = history.len().saturating_sub(1);
    let mut components = Vec::new();
    for (name, values) in &series {
        let ma10 = moving_average(values, 9.min(last), MA_WINDOW);
        let ma_final = moving_average(values, last, MA_WINDOW);
        let ratio = ma_final / ma10;
        components.push(OverfitComponent {
            name: name.to_string(),
            ma_step10: ma10,
            ma_final,
            ratio,
            passed: ratio < OVERFIT_RATIO,
        });
    }
    let min_stem = history.iter().map(|m| m.stem_grad_norm).fold(f64::INFINITY, f64::min);
    let max_gap = history
        .iter()
        .map(|m| {
            let sum = m.mlm + m.itm + m.detection + m.caption;
            (m.total - sum).abs() / m.total.abs().max(1e-12)
        })
        .fold(0.0, f64::max);
    let stem_ok = min_stem > 0.0;
    let sum_ok = max_gap < 1e-6;
    let passed = components.iter().all(|c| c.passed) && stem_ok && sum_ok;
    OverfitReport {
        steps: history.len() as u64,
        components,
        stem_grad_always_nonzero: stem_ok,
        min_stem_grad_norm: min_stem,
        total_matches_component_sum: sum_ok,
        max_total_rel_gap: max_gap,
        wall_seconds,
        passed,
    }
}

/// Run the desk overfit recipe end to end and summarize it. Returns the
/// trained trainer for follow-up evaluation.
pub fn run_overfit_acceptance(cfg: &crate::config::RunConfig, scenes: &[SceneAnnotation]) -> crate::error::Result<(Trainer, OverfitReport)> {
    let vocab = synthetic_vocabulary();
    let model = VlpModel::new(cfg.model.clone(), vocab.len(), cfg.data.seed)?;
    let mut trainer = Trainer::new(model, cfg.optimizer.clone(), cfg.trainer_options(), vocab, cfg.data.seed);
    let started = std::time::Instant::now();
    let history = trainer.train(scenes, cfg.schedule.batch_size, cfg.schedule.max_steps, |_| {})?;
    let report = overfit_report(&history, started.elapsed().as_secs_f64());
    Ok((trainer, report))
}
