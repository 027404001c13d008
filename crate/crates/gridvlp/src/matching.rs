//! Bipartite matching between predicted and ground-truth objects, and the
//! detection loss assembled from class, attribute, and box terms.
//!
//! Matching runs on detached prediction values; no gradient flows through
//! the assignment itself. The loss is then built on the tape with the
//! assignment held fixed.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// L1 weight in both the matching cost and the box loss.
pub const BOX_L1_WEIGHT: f64 = 5.0;
/// GIoU weight in both the matching cost and the box loss.
pub const BOX_GIOU_WEIGHT: f64 = 2.0;
/// Down-weighting of the no-object class term for unmatched queries.
pub const NO_OBJECT_WEIGHT: f64 = 0.1;

/// Ground-truth objects of one scene. Boxes are normalized (cx, cy, w, h).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthObjects {
    pub classes: Vec<usize>,
    pub attributes: Option<Vec<usize>>,
    pub boxes: Vec<[f64; 4]>,
}

impl GroundTruthObjects {
    pub fn new(classes: Vec<usize>, attributes: Option<Vec<usize>>, boxes: Vec<[f64; 4]>) -> Result<Self> {
        if classes.len() != boxes.len() {
            return Err(Error::contract(
                "GroundTruthObjects::new",
                format!("{} classes vs {} boxes", classes.len(), boxes.len()),
            ));
        }
        if let Some(a) = &attributes {
            if a.len() != classes.len() {
                return Err(Error::contract(
                    "GroundTruthObjects::new",
                    format!("{} attributes vs {} classes", a.len(), classes.len()),
                ));
            }
        }
        for b in &boxes {
            let ok = b.iter().all(|v| (0.0..=1.0).contains(v)) && b[2] > 0.0 && b[3] > 0.0;
            if !ok {
                return Err(Error::contract(
                    "GroundTruthObjects::new",
                    format!("box {b:?} not normalized with positive extent"),
                ));
            }
        }
        Ok(GroundTruthObjects { classes, attributes, boxes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Injective map from ground-truth rows to prediction columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `sigma[i]` is the prediction index matched to ground-truth object `i`.
    pub sigma: Vec<usize>,
    pub total_cost: f64,
}

// -- geometry -----------------------------------------------------------------

fn corners(b: &[f64; 4]) -> (f64, f64, f64, f64) {
    let (cx, cy, w, h) = (b[0], b[1], b[2], b[3]);
    (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Plain intersection-over-union of two (cx, cy, w, h) boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull not covered
/// by the union. Lies in (-1, 1], is 1 exactly for identical boxes, and stays
/// finite for degenerate extents.
pub fn giou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if hull <= 0.0 {
        return iou;
    }
    iou - (hull - union.max(0.0)) / hull
}

// -- matching cost --------------------------------------------------------------

/// Detached view of one scene's predictions, used for matching and metrics.
#[derive(Debug, Clone)]
pub struct PredictedObjects {
    /// Softmax class probabilities per query, no-object last: [N][K_cls + 1].
    pub class_probs: Vec<Vec<f64>>,
    /// Boxes per query, normalized (cx, cy, w, h).
    pub boxes: Vec<[f64; 4]>,
}

/// Pairwise matching cost: -p_j(c_i) + 5 * L1 + 2 * (1 - GIoU).
///
/// Attributes are deliberately excluded from the cost. Returns a row-major
/// M x N matrix.
pub fn matching_cost(gt: &GroundTruthObjects, pred: &PredictedObjects) -> Result<Vec<f64>> {
    let m = gt.len();
    let n = pred.boxes.len();
    if m == 0 {
        return Err(Error::contract("matching_cost", "at least one ground-truth object required"));
    }
    if pred.class_probs.len() != n {
        return Err(Error::contract(
            "matching_cost",
            format!("{} class rows vs {} boxes", pred.class_probs.len(), n),
        ));
    }
    let num_classes_incl_null = pred.class_probs[0].len();
    let mut cost = vec![0.0; m * n];
    for i in 0..m {
        if gt.classes[i] + 1 > num_classes_incl_null && gt.classes[i] >= num_classes_incl_null {
            return Err(Error::contract(
                "matching_cost",
                format!("gt class {} out of {num_classes_incl_null} prediction classes", gt.classes[i]),
            ));
        }
        for j in 0..n {
            let l1: f64 = gt.boxes[i]
                .iter()
                .zip(&pred.boxes[j])
                .map(|(a, b)| (a - b).abs())
                .sum();
            let g = giou(&gt.boxes[i], &pred.boxes[j]);
            cost[i * n + j] =
                -pred.class_probs[j][gt.classes[i]] + BOX_L1_WEIGHT * l1 + BOX_GIOU_WEIGHT * (1.0 - g);
        }
    }
    Ok(cost)
}

// -- Hungarian solver -------------------------------------------------------------

/// Jonker-Volgenant style shortest augmenting path assignment, rows <= cols.
/// Returns sigma[row] = col.
fn jv_solve(cost: &[f64], m: usize, n: usize) -> Vec<usize> {
    debug_assert!(m <= n);
    const VIRTUAL: usize = usize::MAX;
    let mut col_job: Vec<usize> = vec![VIRTUAL; n + 1]; // job occupying each column; n is the entry column
    let mut ys = vec![0.0f64; m];
    let mut yt = vec![0.0f64; n + 1];
    for cur in 0..m {
        let mut w_curr = n;
        col_job[n] = cur;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut prv = vec![usize::MAX; n + 1];
        let mut in_tree = vec![false; n + 1];
        while col_job[w_curr] != VIRTUAL {
            in_tree[w_curr] = true;
            let j = col_job[w_curr];
            let mut delta = f64::INFINITY;
            let mut w_next = 0;
            for w in 0..n {
                if !in_tree[w] {
                    let reduced = cost[j * n + w] - ys[j] - yt[w];
                    if reduced < min_to[w] {
                        min_to[w] = reduced;
                        prv[w] = w_curr;
                    }
                    if min_to[w] < delta {
                        delta = min_to[w];
                        w_next = w;
                    }
                }
            }
            for w in 0..=n {
                if in_tree[w] {
                    ys[col_job[w]] += delta;
                    yt[w] -= delta;
                } else {
                    min_to[w] -= delta;
                }
            }
            w_curr = w_next;
        }
        while w_curr != n {
            let w = prv[w_curr];
            col_job[w_curr] = col_job[w];
            w_curr = w;
        }
    }
    let mut sigma = vec![usize::MAX; m];
    for w in 0..n {
        if col_job[w] != VIRTUAL {
            sigma[col_job[w]] = w;
        }
    }
    debug_assert!(sigma.iter().all(|&c| c != usize::MAX));
    sigma
}

fn direct_total(cost: &[f64], n: usize, sigma: &[usize]) -> f64 {
    sigma.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}

/// Globally optimal injective assignment of M ground-truth rows to N
/// prediction columns. Among equal-cost optima the lexicographically
/// smallest column sequence wins (row 0's column minimized first).
pub fn hungarian(cost: &[f64], m: usize, n: usize) -> Result<Assignment> {
    if m == 0 || n == 0 || m > n {
        return Err(Error::contract(
            "hungarian",
            format!("need 1 <= M <= N, got M={m}, N={n}"),
        ));
    }
    if cost.len() != m * n {
        return Err(Error::shape("hungarian", format!("{m}x{n} matrix with {} entries", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("hungarian"));
    }
    let sigma0 = jv_solve(cost, m, n);
    let optimal = direct_total(cost, n, &sigma0);
    // Lexicographic refinement: fix rows top-down, keeping only column
    // choices whose completion still reaches the optimal total. The
    // tolerance absorbs summation-order rounding between sub-solves.
    let tol = 1e-9 * (1.0 + optimal.abs());
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    let mut used = vec![false; n];
    let mut prefix = 0.0;
    for i in 0..m {
        let mut fixed = None;
        for j in 0..n {
            if used[j] {
                continue;
            }
            let candidate = prefix + cost[i * n + j];
            let rest = if i + 1 == m {
                0.0
            } else {
                // sub-matrix over remaining rows and unused columns
                let free_cols: Vec<usize> = (0..n).filter(|&c| !used[c] && c != j).collect();
                let rows = m - i - 1;
                let mut sub = vec![0.0; rows * free_cols.len()];
                for (ri, row) in (i + 1..m).enumerate() {
                    for (ci, &col) in free_cols.iter().enumerate() {
                        sub[ri * free_cols.len() + ci] = cost[row * n + col];
                    }
                }
                let sub_sigma = jv_solve(&sub, rows, free_cols.len());
                direct_total(&sub, free_cols.len(), &sub_sigma)
            };
            if (candidate + rest - optimal).abs() <= tol {
                fixed = Some(j);
                break;
            }
        }
        let j = fixed.expect("an optimal completion must exist");
        used[j] = true;
        prefix += cost[i * n + j];
        chosen.push(j);
    }
    let total_cost = direct_total(cost, n, &chosen);
    Ok(Assignment { sigma: chosen, total_cost })
}

// -- detection loss -----------------------------------------------------------------

/// Graph handles for one scene's detection head outputs.
#[derive(Debug, Clone, Copy)]
pub struct DetectionNodes {
    /// [N x (K_cls + 1)] raw logits, no-object last.
    pub class_logits: NodeId,
    /// [N x K_attr] raw logits.
    pub attr_logits: NodeId,
    /// [N x 4] boxes in (0,1) after sigmoid.
    pub boxes: NodeId,
}

/// Detection loss for one scene under a fixed assignment:
/// matched queries pay class NLL, attribute NLL, and the box terms;
/// unmatched queries pay no-object NLL at weight 0.1. Normalized by
/// max(M, 1), so an empty scene reduces to the weighted no-object term.
pub fn detection_loss(
    g: &mut Graph,
    gt: &GroundTruthObjects,
    pred: DetectionNodes,
    assignment: &Assignment,
) -> Result<NodeId> {
    let (n, ncls) = {
        let s = g.value(pred.class_logits).shape();
        if s.rank() != 2 {
            return Err(Error::shape("detection_loss", format!("class logits {s}")));
        }
        (s.dims()[0], s.dims()[1])
    };
    let m = gt.len();
    if assignment.sigma.len() != m {
        return Err(Error::contract(
            "detection_loss",
            format!("assignment covers {} objects, ground truth has {m}", assignment.sigma.len()),
        ));
    }
    let mut seen = vec![false; n];
    for &j in &assignment.sigma {
        if j >= n || seen[j] {
            return Err(Error::contract("detection_loss", "assignment must be injective into queries"));
        }
        seen[j] = true;
    }
    let no_object = ncls - 1;
    let norm = 1.0 / m.max(1) as f64;

    // class term over every query
    let mut targets = vec![no_object; n];
    let mut weights = vec![NO_OBJECT_WEIGHT * norm; n];
    for (i, &j) in assignment.sigma.iter().enumerate() {
        if gt.classes[i] >= no_object {
            return Err(Error::contract(
                "detection_loss",
                format!("gt class {} out of {no_object} real classes", gt.classes[i]),
            ));
        }
        targets[j] = gt.classes[i];
        weights[j] = norm;
    }
    let mut loss = g.cross_entropy_rows(pred.class_logits, &targets, &weights, 0.0)?;

    if m > 0 {
        // attribute term, matched queries only, masked out when absent
        if let Some(attrs) = &gt.attributes {
            let rows = g.gather_rows(pred.attr_logits, &assignment.sigma)?;
            let w = vec![norm; m];
            let attr_loss = g.cross_entropy_rows(rows, attrs, &w, 0.0)?;
            loss = g.add(loss, attr_loss)?;
        }

        // box terms on matched pairs
        let matched = g.gather_rows(pred.boxes, &assignment.sigma)?;
        let gt_flat: Vec<f64> = gt.boxes.iter().flatten().copied().collect();
        let gt_boxes = g.input(Tensor::new([m, 4], gt_flat)?);
        let diff = g.sub(matched, gt_boxes)?;
        let l1 = g.abs(diff);
        let l1 = g.sum_all(l1);
        let l1 = g.scale(l1, BOX_L1_WEIGHT * norm);
        loss = g.add(loss, l1)?;

        let giou_vec = giou_nodes(g, matched, &gt.boxes)?;
        let ones = g.input(Tensor::full([m], 1.0));
        let one_minus = g.sub(ones, giou_vec)?;
        let gl = g.sum_all(one_minus);
        let gl = g.scale(gl, BOX_GIOU_WEIGHT * norm);
        loss = g.add(loss, gl)?;
    }
    Ok(loss)
}

/// Differentiable GIoU of predicted boxes [M x 4] against fixed targets,
/// composed from elementwise tape ops so the gradient comes for free.
fn giou_nodes(g: &mut Graph, pred: NodeId, gt: &[[f64; 4]]) -> Result<NodeId> {
    let m = gt.len();
    let col = |g: &mut Graph, src: NodeId, j: usize| -> Result<NodeId> {
        let c = g.slice_cols(src, j, 1)?;
        g.reshape(c, [m])
    };
    let cx = col(g, pred, 0)?;
    let cy = col(g, pred, 1)?;
    let w = col(g, pred, 2)?;
    let h = col(g, pred, 3)?;
    let half_w = g.scale(w, 0.5);
    let half_h = g.scale(h, 0.5);
    let ax0 = g.sub(cx, half_w)?;
    let ax1 = g.add(cx, half_w)?;
    let ay0 = g.sub(cy, half_h)?;
    let ay1 = g.add(cy, half_h)?;

    let consts = |g: &mut Graph, f: &dyn Fn(&[f64; 4]) -> f64| {
        g.input(Tensor::new([m], gt.iter().map(f).collect()).expect("shape"))
    };
    let bx0 = consts(g, &|b| b[0] - b[2] / 2.0);
    let bx1 = consts(g, &|b| b[0] + b[2] / 2.0);
    let by0 = consts(g, &|b| b[1] - b[3] / 2.0);
    let by1 = consts(g, &|b| b[1] + b[3] / 2.0);

    let ix0 = g.max_elem(ax0, bx0)?;
    let ix1 = g.min_elem(ax1, bx1)?;
    let iy0 = g.max_elem(ay0, by0)?;
    let iy1 = g.min_elem(ay1, by1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;

    let area_a = g.mul(w, h)?;
    let area_b = consts(g, &|b| b[2] * b[3]);
    let sum_areas = g.add(area_a, area_b)?;
    let union = g.sub(sum_areas, inter)?;

    let hx0 = g.min_elem(ax0, bx0)?;
    let hx1 = g.max_elem(ax1, bx1)?;
    let hy0 = g.min_elem(ay0, by0)?;
    let hy1 = g.max_elem(ay1, by1)?;
    let hw = g.sub(hx1, hx0)?;
    let hh = g.sub(hy1, hy0)?;
    let hull = g.mul(hw, hh)?;

    // both extents are strictly positive on this path (sigmoid outputs and
    // validated ground truth), so union and hull cannot vanish
    let iou = g.div(inter, union)?;
    let gap = g.sub(hull, union)?;
    let frac = g.div(gap, hull)?;
    g.sub(iou, frac)
}
