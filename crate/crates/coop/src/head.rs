//! Detection heads and the set-to-set training loss.
//!
//! Two small MLPs map each fused query to a vehicle score (sigmoid) and raw
//! box parameters. Training first matches predictions to ground truths with
//! a minimum-cost assignment (Kuhn-Munkres), then applies focal
//! classification loss plus L1 box regression on the matched pairs; the
//! assignment itself is treated as a constant.

use crate::eval::ScoredDetection;
use crate::scene::GroundTruthBox;
use autodiff::{Tape, Tensor, TensorError, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("assignment needs at least as many predictions as targets: {rows} targets, {cols} predictions")]
    TooFewPredictions { rows: usize, cols: usize },
    #[error("non-finite cost at ({0}, {1})")]
    NonFiniteCost(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const FOCAL_ALPHA: f32 = 0.25;
pub const FOCAL_GAMMA: f32 = 2.0;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_cls: f32,
    pub lambda_box: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cls: 2.0, lambda_box: 0.25 }
    }
}

/// A decoded prediction in the frame its queries were expressed in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub score: f32,
    pub center: [f32; 3],
    pub size: [f32; 3],
    pub yaw: f32,
    pub source_query: usize,
}

impl Detection {
    pub fn to_scored(self) -> ScoredDetection {
        ScoredDetection {
            bbox: GroundTruthBox {
                center: self.center,
                size: self.size,
                yaw: self.yaw,
                object_id: self.source_query as u32,
            },
            score: self.score,
        }
    }
}

/// Tape-registered parameters of the two head MLPs.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub cls_w1: Var,
    pub cls_b1: Var,
    pub cls_w2: Var,
    pub cls_b2: Var,
    pub box_w1: Var,
    pub box_b1: Var,
    pub box_w2: Var,
    pub box_b2: Var,
}

/// Raw box parameterization, 8 columns:
/// center offsets (3), pre-softplus sizes (3), raw (sin, cos) pair (2).
pub const BOX_RAW_DIM: usize = 8;

/// Run both head MLPs: queries `[N, C]` -> (logits `[N, 1]`, raw boxes `[N, 8]`).
pub fn head_forward(
    tape: &mut Tape,
    h: &HeadVars,
    queries: Var,
) -> Result<(Var, Var), TensorError> {
    let hid_c = tape.matmul(queries, h.cls_w1)?;
    let hid_c = tape.add_bias(hid_c, h.cls_b1)?;
    let hid_c = tape.relu(hid_c);
    let logits = tape.matmul(hid_c, h.cls_w2)?;
    let logits = tape.add_bias(logits, h.cls_b2)?;

    let hid_b = tape.matmul(queries, h.box_w1)?;
    let hid_b = tape.add_bias(hid_b, h.box_b1)?;
    let hid_b = tape.relu(hid_b);
    let box_raw = tape.matmul(hid_b, h.box_w2)?;
    let box_raw = tape.add_bias(box_raw, h.box_b2)?;
    Ok((logits, box_raw))
}

/// Differentiable decoded box vector `[N, 8]`:
/// absolute center (reference point + offsets), softplus sizes, and the
/// double-angle yaw pair (sin_raw, cos_raw + 1) so zeroed parameters
/// decode to yaw 0.
pub fn decoded_box_vec(
    tape: &mut Tape,
    box_raw: Var,
    reference_points: Var,
) -> Result<Var, TensorError> {
    let refs = reference_points;
    let offsets = tape.slice_cols(box_raw, 0..3)?;
    let centers = tape.add(offsets, refs)?;
    let raw_sizes = tape.slice_cols(box_raw, 3..6)?;
    let sizes = tape.softplus(raw_sizes);
    let sincos_raw = tape.slice_cols(box_raw, 6..8)?;
    let bias = tape.constant(Tensor::new(vec![2], vec![0.0, 1.0])?);
    let sincos = tape.add_bias(sincos_raw, bias)?;
    tape.concat_cols(&[centers, sizes, sincos])
}

/// Decode head outputs into detections (off-tape, for evaluation).
pub fn decode_detections(
    logits: &Tensor,
    box_raw: &Tensor,
    reference_points: &[[f32; 3]],
) -> Vec<Detection> {
    let n = reference_points.len();
    let ld = logits.data();
    let bd = box_raw.data();
    (0..n)
        .map(|i| {
            let b = &bd[i * BOX_RAW_DIM..(i + 1) * BOX_RAW_DIM];
            let r = reference_points[i];
            let softplus = |v: f32| {
                if v > 20.0 {
                    v
                } else {
                    (1.0 + v.exp()).ln()
                }
            };
            Detection {
                score: 1.0 / (1.0 + (-ld[i]).exp()),
                center: [r[0] + b[0], r[1] + b[1], r[2] + b[2]],
                size: [softplus(b[3]), softplus(b[4]), softplus(b[5])],
                yaw: 0.5 * b[6].atan2(b[7] + 1.0),
                source_query: i,
            }
        })
        .collect()
}

/// Minimum-total-cost injective assignment of rows (targets) to columns
/// (predictions); requires `rows <= cols`. Returns the column chosen for
/// each row and the total cost.
pub fn hungarian_match(costs: &[Vec<f32>]) -> Result<(Vec<usize>, f64), HeadError> {
    let n = costs.len();
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let m = costs[0].len();
    if n > m {
        return Err(HeadError::TooFewPredictions { rows: n, cols: m });
    }
    for (i, row) in costs.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if !c.is_finite() {
                return Err(HeadError::NonFiniteCost(i, j));
            }
        }
    }
    // shortest-augmenting-path Kuhn-Munkres with dual potentials, 1-indexed
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = costs[i0 - 1][j - 1] as f64 - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = assign
        .iter()
        .enumerate()
        .map(|(i, &j)| costs[i][j] as f64)
        .sum();
    Ok((assign, total))
}

/// 8-dim regression target for a ground-truth box.
///
/// Heading is regressed as the double angle (sin 2γ, cos 2γ): a rectangle
/// is indistinguishable from its π-rotation, so single-angle targets are
/// ambiguous and average out to zero during training.
pub fn box_target(gt: &GroundTruthBox) -> [f32; 8] {
    [
        gt.center[0],
        gt.center[1],
        gt.center[2],
        gt.size[0],
        gt.size[1],
        gt.size[2],
        (2.0 * gt.yaw).sin(),
        (2.0 * gt.yaw).cos(),
    ]
}

/// Matching cost matrix, computed off-tape from forward values:
/// `lambda_cls * (-score) + lambda_box * L1(decoded box, target)`.
fn match_costs(
    scores: &[f32],
    box_vec: &Tensor,
    gts: &[GroundTruthBox],
    w: &LossWeights,
) -> Vec<Vec<f32>> {
    let n = scores.len();
    let bd = box_vec.data();
    gts.iter()
        .map(|gt| {
            let t = box_target(gt);
            (0..n)
                .map(|p| {
                    let b = &bd[p * BOX_RAW_DIM..(p + 1) * BOX_RAW_DIM];
                    let l1: f32 = b.iter().zip(t).map(|(x, y)| (x - y).abs()).sum();
                    w.lambda_cls * (-scores[p]) + w.lambda_box * l1
                })
                .collect()
        })
        .collect()
}

/// Set-to-set loss for one frame. `logits` is `[N, 1]`, `box_raw` is
/// `[N, 8]`; targets in the same frame as `reference_points`.
///
/// Returns the scalar loss variable and the assignment used.
pub fn set_loss(
    tape: &mut Tape,
    logits: Var,
    box_raw: Var,
    reference_points: Var,
    gts: &[GroundTruthBox],
    w: &LossWeights,
) -> Result<(Var, Vec<usize>), HeadError> {
    let n = tape.value(reference_points).rows();
    let box_vec = decoded_box_vec(tape, box_raw, reference_points)?;
    let scores: Vec<f32> = tape
        .value(logits)
        .data()
        .iter()
        .map(|&l| 1.0 / (1.0 + (-l).exp()))
        .collect();
    let costs = match_costs(&scores, tape.value(box_vec), gts, w);
    let (assign, _) = hungarian_match(&costs)?;
    let norm = gts.len().max(1) as f32;

    // focal classification: matched slots are positives, the rest background
    let mut pos_mask = vec![0.0f32; n];
    for &p in &assign {
        pos_mask[p] = 1.0;
    }
    let neg_mask: Vec<f32> = pos_mask.iter().map(|&m| 1.0 - m).collect();
    let pos_mask = tape.constant(Tensor::new(vec![n, 1], pos_mask)?);
    let neg_mask = tape.constant(Tensor::new(vec![n, 1], neg_mask)?);

    let prob = tape.sigmoid(logits);
    let prob = tape.clamp(prob, 1e-6, 1.0 - 1e-6);
    let one_minus = {
        let neg = tape.scale(prob, -1.0);
        tape.add_scalar(neg, 1.0)
    };
    // positives: -alpha * (1-p)^gamma * ln p
    let ln_p = tape.ln(prob);
    let focus_p = tape.pow_const(one_minus, FOCAL_GAMMA);
    let pos_term = tape.mul(focus_p, ln_p)?;
    let pos_term = tape.scale(pos_term, -FOCAL_ALPHA);
    // negatives: -(1-alpha) * p^gamma * ln(1-p)
    let ln_q = tape.ln(one_minus);
    let focus_q = tape.pow_const(prob, FOCAL_GAMMA);
    let neg_term = tape.mul(focus_q, ln_q)?;
    let neg_term = tape.scale(neg_term, -(1.0 - FOCAL_ALPHA));

    let pos_masked = tape.mul(pos_term, pos_mask)?;
    let neg_masked = tape.mul(neg_term, neg_mask)?;
    let cls_sum = tape.add(pos_masked, neg_masked)?;
    let cls_loss = tape.sum(cls_sum);
    let cls_loss = tape.scale(cls_loss, w.lambda_cls / norm);

    let loss = if gts.is_empty() {
        cls_loss
    } else {
        let matched = tape.select_rows(box_vec, &assign)?;
        let targets: Vec<f32> = gts.iter().flat_map(|g| box_target(g)).collect();
        let targets = tape.constant(Tensor::new(vec![gts.len(), BOX_RAW_DIM], targets)?);
        let diff = tape.sub(matched, targets)?;
        let diff = tape.abs(diff);
        let box_loss = tape.sum(diff);
        let box_loss = tape.scale(box_loss, w.lambda_box / norm);
        tape.add(cls_loss, box_loss)?
    };
    Ok((loss, assign))
}
