//! Detection metrics: rotated-box BEV IoU and average precision.
//!
//! IoU uses exact convex-polygon intersection (Sutherland-Hodgman clipping
//! followed by the shoelace formula), computed in f64. AP is all-point
//! interpolated with greedy score-ordered true-positive assignment.

use crate::scene::GroundTruthBox;
use serde::Serialize;

/// A predicted box with a confidence score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScoredDetection {
    pub bbox: GroundTruthBox,
    pub score: f32,
}

fn corners_f64(b: &GroundTruthBox) -> Vec<[f64; 2]> {
    b.bev_corners().iter().map(|c| [c[0] as f64, c[1] as f64]).collect()
}

fn shoelace(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        s += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    s.abs() / 2.0
}

/// Clip `subject` against the half-plane on the left of edge a->b.
fn clip_edge(subject: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
    let intersect = |p: [f64; 2], q: [f64; 2]| {
        let d1 = [q[0] - p[0], q[1] - p[1]];
        let d2 = [b[0] - a[0], b[1] - a[1]];
        let denom = d1[0] * d2[1] - d1[1] * d2[0];
        if denom.abs() < 1e-18 {
            return p;
        }
        let t = ((a[0] - p[0]) * d2[1] - (a[1] - p[1]) * d2[0]) / denom;
        [p[0] + t * d1[0], p[1] + t * d1[1]]
    };
    let mut out = Vec::with_capacity(subject.len() + 1);
    for i in 0..subject.len() {
        let cur = subject[i];
        let prev = subject[(i + subject.len() - 1) % subject.len()];
        let cur_in = inside(cur);
        let prev_in = inside(prev);
        if cur_in {
            if !prev_in {
                out.push(intersect(prev, cur));
            }
            out.push(cur);
        } else if prev_in {
            out.push(intersect(prev, cur));
        }
    }
    out
}

fn polygon_intersection_area(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mut poly = a.to_vec();
    for i in 0..b.len() {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_edge(&poly, b[i], b[(i + 1) % b.len()]);
    }
    shoelace(&poly)
}

/// IoU of the two boxes' BEV rectangles. Degenerate (near-zero-area) boxes
/// score 0 and are reported on stderr.
pub fn rotated_iou_bev(a: &GroundTruthBox, b: &GroundTruthBox) -> f32 {
    let area_a = a.size[0] as f64 * a.size[1] as f64;
    let area_b = b.size[0] as f64 * b.size[1] as f64;
    if area_a < 1e-9 || area_b < 1e-9 {
        eprintln!("degenerate box in IoU (areas {area_a:.3e}, {area_b:.3e}); scoring 0");
        return 0.0;
    }
    let inter = polygon_intersection_area(&corners_f64(a), &corners_f64(b));
    let union = area_a + area_b - inter;
    ((inter / union).clamp(0.0, 1.0)) as f32
}

/// IoU extended with vertical extent (intersection of z-intervals).
pub fn rotated_iou_3d(a: &GroundTruthBox, b: &GroundTruthBox) -> f32 {
    let vol_a = a.size.iter().map(|&v| v as f64).product::<f64>();
    let vol_b = b.size.iter().map(|&v| v as f64).product::<f64>();
    if vol_a < 1e-9 || vol_b < 1e-9 {
        eprintln!("degenerate box in 3D IoU; scoring 0");
        return 0.0;
    }
    let bev = polygon_intersection_area(&corners_f64(a), &corners_f64(b));
    let za = (a.center[2] as f64 - a.size[2] as f64 / 2.0, a.center[2] as f64 + a.size[2] as f64 / 2.0);
    let zb = (b.center[2] as f64 - b.size[2] as f64 / 2.0, b.center[2] as f64 + b.size[2] as f64 / 2.0);
    let dz = (za.1.min(zb.1) - za.0.max(zb.0)).max(0.0);
    let inter = bev * dz;
    ((inter / (vol_a + vol_b - inter)).clamp(0.0, 1.0)) as f32
}

/// One point of a precision-recall sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Score-ordered sweep: each detection greedily claims the unclaimed ground
/// truth with the highest IoU at or above the threshold.
pub fn pr_curve(
    detections: &[ScoredDetection],
    ground_truths: &[GroundTruthBox],
    iou_thresh: f32,
) -> Vec<PrPoint> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        detections[j]
            .score
            .partial_cmp(&detections[i].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut claimed = vec![false; ground_truths.len()];
    let mut curve = Vec::with_capacity(detections.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &di in &order {
        let mut best: Option<(f32, usize)> = None;
        for (gi, gt) in ground_truths.iter().enumerate() {
            if claimed[gi] {
                continue;
            }
            let iou = rotated_iou_bev(&detections[di].bbox, gt);
            if iou >= iou_thresh && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                claimed[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push(PrPoint {
            precision: tp as f64 / (tp + fp) as f64,
            recall: if ground_truths.is_empty() {
                0.0
            } else {
                tp as f64 / ground_truths.len() as f64
            },
        });
    }
    curve
}

/// All-point interpolated average precision.
///
/// Conventions for empty inputs: no ground truths and no detections scores
/// 1.0; no ground truths with detections present scores 0.0.
pub fn average_precision(
    detections: &[ScoredDetection],
    ground_truths: &[GroundTruthBox],
    iou_thresh: f32,
) -> f64 {
    if ground_truths.is_empty() {
        return if detections.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = pr_curve(detections, ground_truths, iou_thresh);
    if curve.is_empty() {
        return 0.0;
    }
    // area under the monotonically-smoothed curve: at each recall level use
    // the best precision achieved at that recall or beyond
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, p) in curve.iter().enumerate() {
        if p.recall > prev_recall {
            let best_p = curve[i..]
                .iter()
                .map(|q| q.precision)
                .fold(f64::NEG_INFINITY, f64::max);
            ap += (p.recall - prev_recall) * best_p;
            prev_recall = p.recall;
        }
    }
    ap
}

/// AP at each requested IoU threshold.
pub fn ap_table(
    detections: &[ScoredDetection],
    ground_truths: &[GroundTruthBox],
    thresholds: &[f32],
) -> Vec<(f32, f64)> {
    thresholds
        .iter()
        .map(|&t| (t, average_precision(detections, ground_truths, t)))
        .collect()
}
