//! Pillarized point-cloud features and the multi-scale BEV encoder.
//!
//! Points are bucketed into a 2-D grid of vertical pillars, each pillar's
//! points run through a shared linear + relu + max reduction, and occupied
//! pillars are scattered into a dense map. A small strided conv backbone
//! with top-down upsampling then yields an L-level feature pyramid with a
//! uniform channel count; odd spatial dims halve with ceil division.

use crate::scene::PointCloud;
use autodiff::{Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-point feature layout: height and intensity, offsets from the pillar
/// center (2), offsets from the pillar's point mean (3). Horizontal
/// coordinates appear only as offsets so whole-cell translations of the
/// cloud shift the feature map without changing its values.
pub const POINT_FEAT_DIM: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f32,
    pub x_max: f32,
    pub y_min: f32,
    pub y_max: f32,
    pub z_min: f32,
    pub z_max: f32,
    /// Square pillar side, meters.
    pub pillar: f32,
}

impl GridSpec {
    pub fn symmetric(x_half: f32, y_half: f32, z_min: f32, z_max: f32, pillar: f32) -> Self {
        GridSpec {
            x_min: -x_half,
            x_max: x_half,
            y_min: -y_half,
            y_max: y_half,
            z_min,
            z_max,
            pillar,
        }
    }

    /// Columns (along x).
    pub fn width(&self) -> usize {
        (((self.x_max - self.x_min) / self.pillar).round() as usize).max(1)
    }

    /// Rows (along y).
    pub fn height(&self) -> usize {
        (((self.y_max - self.y_min) / self.pillar).round() as usize).max(1)
    }

    /// Floor-rule bucketing; `None` for out-of-range points.
    pub fn cell_of(&self, x: f32, y: f32, z: f32) -> Option<(usize, usize)> {
        if x < self.x_min || y < self.y_min || z < self.z_min || z > self.z_max {
            return None;
        }
        let col = ((x - self.x_min) / self.pillar).floor() as usize;
        let row = ((y - self.y_min) / self.pillar).floor() as usize;
        if col >= self.width() || row >= self.height() {
            return None;
        }
        Some((row, col))
    }

    /// World-frame center of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> (f32, f32) {
        (
            self.x_min + (col as f32 + 0.5) * self.pillar,
            self.y_min + (row as f32 + 0.5) * self.pillar,
        )
    }
}

/// Occupied pillars with padded per-point features ready for encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarGrid {
    /// Occupied `(row, col)` cells, one entry per pillar, sorted.
    pub cells: Vec<(usize, usize)>,
    /// `[P * max_points, POINT_FEAT_DIM]`, zero rows past each pillar's count.
    pub features: Tensor,
    /// Kept points per pillar (after the cap).
    pub counts: Vec<usize>,
    pub max_points: usize,
    pub height: usize,
    pub width: usize,
}

/// Bucket a cloud into pillars. Pillars holding more than `max_points`
/// points are subsampled with a seeded draw so results are reproducible.
pub fn pillarize(cloud: &PointCloud, grid: &GridSpec, max_points: usize, seed: u64) -> PillarGrid {
    use std::collections::BTreeMap;
    let mut buckets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        if let Some(cell) = grid.cell_of(p.x, p.y, p.z) {
            buckets.entry(cell).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::with_capacity(buckets.len());
    let mut counts = Vec::with_capacity(buckets.len());
    let mut data = Vec::with_capacity(buckets.len() * max_points * POINT_FEAT_DIM);
    for (cell, mut idx) in buckets {
        if idx.len() > max_points {
            let chosen = rand::seq::index::sample(&mut rng, idx.len(), max_points);
            let mut kept: Vec<usize> = chosen.iter().map(|k| idx[k]).collect();
            kept.sort_unstable();
            idx = kept;
        }
        let (cx, cy) = grid.cell_center(cell.0, cell.1);
        let n = idx.len() as f32;
        let (mut mx, mut my, mut mz) = (0.0f32, 0.0f32, 0.0f32);
        for &i in &idx {
            mx += cloud.points[i].x;
            my += cloud.points[i].y;
            mz += cloud.points[i].z;
        }
        let (mx, my, mz) = (mx / n, my / n, mz / n);
        for &i in &idx {
            let p = &cloud.points[i];
            data.extend_from_slice(&[
                p.z,
                p.intensity,
                p.x - cx,
                p.y - cy,
                p.x - mx,
                p.y - my,
                p.z - mz,
            ]);
        }
        data.extend(std::iter::repeat_n(0.0, (max_points - idx.len()) * POINT_FEAT_DIM));
        counts.push(idx.len());
        cells.push(cell);
    }
    let features = Tensor::new(vec![cells.len() * max_points, POINT_FEAT_DIM], data)
        .expect("pillar feature layout is consistent by construction");
    PillarGrid {
        cells,
        features,
        counts,
        max_points,
        height: grid.height(),
        width: grid.width(),
    }
}

/// Encoder parameters registered on a tape. `down` holds the stride-2
/// blocks (L-1 of them); `out` the per-level output convolutions.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub point_w: Var,
    pub point_b: Var,
    pub stem_w: Var,
    pub stem_b: Var,
    pub down: Vec<(Var, Var)>,
    pub out: Vec<(Var, Var)>,
}

impl EncoderVars {
    pub fn levels(&self) -> usize {
        self.out.len()
    }
}

/// Dense BEV map `[C, H, W]` from occupied pillars: shared point MLP, relu,
/// padding masked to zero, per-pillar max, scatter.
pub fn pillar_bev_map(
    tape: &mut Tape,
    v: &EncoderVars,
    grid: &PillarGrid,
) -> Result<Var, TensorError> {
    let c = tape.value(v.point_b).numel();
    if grid.cells.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[c, grid.height, grid.width])));
    }
    let feats = tape.constant(grid.features.clone());
    let x = tape.matmul(feats, v.point_w)?;
    let x = tape.add_bias(x, v.point_b)?;
    let x = tape.relu(x);
    // zero out padded rows so they cannot win the (non-negative) max
    let mut mask = Vec::with_capacity(grid.cells.len() * grid.max_points * c);
    for &count in &grid.counts {
        mask.extend(std::iter::repeat_n(1.0, count * c));
        mask.extend(std::iter::repeat_n(0.0, (grid.max_points - count) * c));
    }
    let mask = tape.constant(Tensor::new(vec![grid.cells.len() * grid.max_points, c], mask)?);
    let x = tape.mul(x, mask)?;
    let mut pooled = Vec::with_capacity(grid.cells.len());
    for p in 0..grid.cells.len() {
        let rows: Vec<usize> = (p * grid.max_points..(p + 1) * grid.max_points).collect();
        let pillar = tape.select_rows(x, &rows)?;
        let m = tape.max_rows(pillar)?;
        pooled.push(tape.reshape(m, &[1, c])?);
    }
    let pooled = tape.concat_rows(&pooled)?;
    tape.scatter_rows(pooled, &grid.cells, grid.height, grid.width)
}

/// Finest-scale backbone feature (stride 1), before any cross-scale mixing.
pub fn stem_map(tape: &mut Tape, v: &EncoderVars, dense: Var) -> Result<Var, TensorError> {
    let x = tape.conv2d(dense, v.stem_w, v.stem_b, 1)?;
    Ok(tape.relu(x))
}

/// Full pyramid: stride-2 backbone levels merged top-down with nearest
/// upsampling, then one output convolution per level. Finest level first.
pub fn encode_pyramid(
    tape: &mut Tape,
    v: &EncoderVars,
    grid: &PillarGrid,
) -> Result<Vec<Var>, TensorError> {
    let dense = pillar_bev_map(tape, v, grid)?;
    let mut raw = vec![stem_map(tape, v, dense)?];
    for (w, b) in &v.down {
        let x = tape.conv2d(*raw.last().unwrap(), *w, *b, 2)?;
        raw.push(tape.relu(x));
    }
    let levels = raw.len();
    let mut merged = vec![*raw.last().unwrap()];
    for i in (0..levels - 1).rev() {
        let shape = tape.value(raw[i]).shape().to_vec();
        let up = tape.upsample_nearest(*merged.last().unwrap(), shape[1], shape[2])?;
        merged.push(tape.add(raw[i], up)?);
    }
    merged.reverse();
    let mut pyramid = Vec::with_capacity(levels);
    for (x, (w, b)) in merged.into_iter().zip(&v.out) {
        pyramid.push(tape.conv2d(x, *w, *b, 1)?);
    }
    Ok(pyramid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Point;
    use autodiff::gradcheck;
    use rand::Rng;

    fn cloud(points: Vec<(f32, f32, f32)>) -> PointCloud {
        PointCloud {
            points: points
                .into_iter()
                .map(|(x, y, z)| Point { x, y, z, intensity: 0.5 })
                .collect(),
            frame: 0,
        }
    }

    fn grid4() -> GridSpec {
        GridSpec::symmetric(4.0, 4.0, -3.0, 1.0, 0.2)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    fn make_encoder(tape: &mut Tape, c: usize, levels: usize, seed: u64) -> EncoderVars {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = |tape: &mut Tape, rng: &mut ChaCha8Rng| {
            let w = tape.leaf(rand_tensor(rng, &[c, c, 3, 3], 0.3));
            let b = tape.leaf(rand_tensor(rng, &[c], 0.1));
            (w, b)
        };
        let point_w = tape.leaf(rand_tensor(&mut rng, &[POINT_FEAT_DIM, c], 0.3));
        let point_b = tape.leaf(rand_tensor(&mut rng, &[c], 0.1));
        let (stem_w, stem_b) = conv(tape, &mut rng);
        let down = (1..levels).map(|_| conv(tape, &mut rng)).collect();
        let out = (0..levels).map(|_| conv(tape, &mut rng)).collect();
        EncoderVars { point_w, point_b, stem_w, stem_b, down, out }
    }

    #[test]
    fn corner_point_lands_in_origin_cell() {
        let g = grid4();
        assert_eq!(g.cell_of(g.x_min, g.y_min, 0.0), Some((0, 0)));
        assert_eq!(g.cell_of(g.x_min - 0.01, g.y_min, 0.0), None);
        assert_eq!(g.cell_of(0.0, 0.0, 5.0), None, "z filter");
    }

    #[test]
    fn floor_rule_splits_nearby_points() {
        let g = grid4();
        // 0.1 m apart but straddling the 0.2 m cell edge at x = 0
        assert_ne!(g.cell_of(-0.05, 0.0, 0.0), g.cell_of(0.05, 0.0, 0.0));
        // 0.1 m apart inside one cell
        assert_eq!(g.cell_of(0.02, 0.0, 0.0), g.cell_of(0.12, 0.0, 0.0));
    }

    #[test]
    fn bucketing_matches_scalar_oracle() {
        let g = grid4();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<(f32, f32, f32)> = (0..300)
            .map(|_| {
                (
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-4.0..2.0),
                )
            })
            .collect();
        let pg = pillarize(&cloud(pts.clone()), &g, 64, 0);
        // oracle: count in-range points per cell with independent arithmetic
        let mut oracle: std::collections::HashMap<(usize, usize), usize> =
            std::collections::HashMap::new();
        for &(x, y, z) in &pts {
            let in_range = x >= -4.0 && x < 4.0 && y >= -4.0 && y < 4.0 && (-3.0..=1.0).contains(&z);
            if in_range {
                let col = ((x + 4.0) / 0.2).floor() as usize;
                let row = ((y + 4.0) / 0.2).floor() as usize;
                if col < 40 && row < 40 {
                    *oracle.entry((row, col)).or_default() += 1;
                }
            }
        }
        assert_eq!(pg.cells.len(), oracle.len());
        for (cell, count) in pg.cells.iter().zip(&pg.counts) {
            assert_eq!(oracle[cell], *count, "cell {cell:?}");
        }
    }

    #[test]
    fn cap_subsamples_deterministically() {
        let pts: Vec<(f32, f32, f32)> = (0..50).map(|i| (0.05, 0.05, -2.0 + 0.05 * i as f32)).collect();
        let a = pillarize(&cloud(pts.clone()), &grid4(), 16, 7);
        let b = pillarize(&cloud(pts), &grid4(), 16, 7);
        assert_eq!(a.counts, vec![16]);
        assert_eq!(a, b);
    }

    #[test]
    fn point_features_include_offsets() {
        let g = grid4();
        let pg = pillarize(&cloud(vec![(0.05, 0.05, -1.0), (0.15, 0.15, 0.0)]), &g, 16, 0);
        assert_eq!(pg.cells, vec![(20, 20)]);
        let d = pg.features.data();
        // first point: center offset = 0.05 - 0.1 = -0.05; mean offset = -0.05
        assert!((d[2] + 0.05).abs() < 1e-6 && (d[3] + 0.05).abs() < 1e-6);
        assert!((d[4] + 0.05).abs() < 1e-6 && (d[6] + 0.5).abs() < 1e-6);
        // padded rows are zero
        assert!(d[2 * POINT_FEAT_DIM..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_cloud_gives_zero_pyramid() {
        let g = grid4();
        let pg = pillarize(&cloud(vec![]), &g, 16, 0);
        assert!(pg.cells.is_empty());
        let mut tape = Tape::new();
        let v = make_encoder(&mut tape, 3, 3, 0);
        let pyr = encode_pyramid(&mut tape, &v, &pg).unwrap();
        assert_eq!(pyr.len(), 3);
        // biases still paint the maps, but the input itself is all zero:
        // compare against encoding a second empty grid (pure determinism)
        // and check the dense pillar map is exactly zero.
        let dense = pillar_bev_map(&mut tape, &v, &pg).unwrap();
        assert!(tape.value(dense).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pyramid_shapes_follow_ceil_halving() {
        // desk-scale published shapes: 100x352 -> 50x176 -> 25x88 -> 13x44
        let g = GridSpec::symmetric(35.2, 10.0, -3.0, 1.0, 0.2);
        assert_eq!((g.height(), g.width()), (100, 352));
        let pg = pillarize(&cloud(vec![(0.0, 0.0, 0.0)]), &g, 4, 0);
        let mut tape = Tape::new();
        let v = make_encoder(&mut tape, 2, 4, 1);
        let pyr = encode_pyramid(&mut tape, &v, &pg).unwrap();
        let shapes: Vec<Vec<usize>> =
            pyr.iter().map(|&p| tape.value(p).shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![2, 100, 352],
                vec![2, 50, 176],
                vec![2, 25, 88],
                vec![2, 13, 44]
            ]
        );
    }

    #[test]
    fn pillar_pool_ignores_point_order() {
        let g = grid4();
        let pts = vec![(0.03, 0.07, -1.0), (0.12, 0.01, 0.2), (0.18, 0.18, -2.0)];
        let mut rev = pts.clone();
        rev.reverse();
        let a = pillarize(&cloud(pts), &g, 16, 0);
        let b = pillarize(&cloud(rev), &g, 16, 0);
        let mut tape = Tape::new();
        let v = make_encoder(&mut tape, 4, 2, 3);
        let ma = pillar_bev_map(&mut tape, &v, &a).unwrap();
        let mb = pillar_bev_map(&mut tape, &v, &b).unwrap();
        let (da, db) = (tape.value(ma).data(), tape.value(mb).data());
        for (x, y) in da.iter().zip(db) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    /// One-cell input shift exactly shifts the stride-1 stem map (interior).
    #[test]
    fn stem_is_translation_equivariant_by_one_cell() {
        let g = grid4();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<(f32, f32, f32)> = (0..60)
            .map(|_| {
                (
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..0.5),
                )
            })
            .collect();
        let shifted: Vec<(f32, f32, f32)> = pts.iter().map(|&(x, y, z)| (x + 0.2, y, z)).collect();
        let pa = pillarize(&cloud(pts), &g, 16, 0);
        let pb = pillarize(&cloud(shifted), &g, 16, 0);
        let mut tape = Tape::new();
        let v = make_encoder(&mut tape, 3, 2, 9);
        let da = pillar_bev_map(&mut tape, &v, &pa).unwrap();
        let db = pillar_bev_map(&mut tape, &v, &pb).unwrap();
        let sa = stem_map(&mut tape, &v, da).unwrap();
        let sb = stem_map(&mut tape, &v, db).unwrap();
        let (w, h, c) = (g.width(), g.height(), 3);
        let (va, vb) = (tape.value(sa).data(), tape.value(sb).data());
        // interior: stay off the one-cell border the conv halo touches
        for ch in 0..c {
            for row in 2..h - 2 {
                for col in 2..w - 3 {
                    let a = va[ch * h * w + row * w + col];
                    let b = vb[ch * h * w + row * w + col + 1];
                    assert!(
                        (a - b).abs() < 1e-5,
                        "mismatch at ({ch},{row},{col}): {a} vs {b}"
                    );
                }
            }
        }
    }

    /// A stride-aligned shift (2^(L-1) cells) shifts every pyramid level.
    #[test]
    fn pyramid_is_equivariant_for_stride_aligned_shifts() {
        let g = GridSpec::symmetric(6.4, 6.4, -3.0, 1.0, 0.2); // 64 x 64
        let levels = 3; // strides 1, 2, 4 -> shift by 4 cells = 0.8 m
        let shift_cells = 4usize;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<(f32, f32, f32)> = (0..60)
            .map(|_| {
                (
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-2.0..0.5),
                )
            })
            .collect();
        let shifted: Vec<(f32, f32, f32)> =
            pts.iter().map(|&(x, y, z)| (x + 0.2 * shift_cells as f32, y, z)).collect();
        let pa = pillarize(&cloud(pts), &g, 16, 0);
        let pb = pillarize(&cloud(shifted), &g, 16, 0);
        let mut tape = Tape::new();
        let v = make_encoder(&mut tape, 2, levels, 13);
        let pyr_a = encode_pyramid(&mut tape, &v, &pa).unwrap();
        let pyr_b = encode_pyramid(&mut tape, &v, &pb).unwrap();
        for (lvl, (&a, &b)) in pyr_a.iter().zip(&pyr_b).enumerate() {
            let shape = tape.value(a).shape().to_vec();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let s = shift_cells >> lvl;
            let (va, vb) = (tape.value(a).data(), tape.value(b).data());
            // generous interior margin: conv halos widen down the pyramid
            let m = 8usize >> lvl;
            let m = m.max(3);
            if h <= 2 * m || w <= 2 * m + s {
                continue;
            }
            for ch in 0..c {
                for row in m..h - m {
                    for col in m..w - m - s {
                        let x = va[ch * h * w + row * w + col];
                        let y = vb[ch * h * w + row * w + col + s];
                        assert!(
                            (x - y).abs() < 1e-4,
                            "level {lvl} mismatch at ({ch},{row},{col}): {x} vs {y}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let g = GridSpec::symmetric(0.8, 0.8, -3.0, 1.0, 0.2); // 8 x 8
        let pg = pillarize(
            &cloud(vec![(0.1, 0.1, 0.0), (-0.3, 0.5, -1.0), (0.5, -0.5, 0.3)]),
            &g,
            4,
            0,
        );
        let c = 2;
        let mut seed_rng = ChaCha8Rng::seed_from_u64(21);
        let shapes: Vec<Vec<usize>> = vec![
            vec![POINT_FEAT_DIM, c],
            vec![c],
            vec![c, c, 3, 3],
            vec![c],
            vec![c, c, 3, 3],
            vec![c],
            vec![c, c, 3, 3],
            vec![c],
            vec![c, c, 3, 3],
            vec![c],
        ];
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| rand_tensor(&mut seed_rng, s, 0.4))
            .collect();
        let build = |tape: &mut Tape, ts: &[Tensor]| {
            let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
            let ev = EncoderVars {
                point_w: vars[0],
                point_b: vars[1],
                stem_w: vars[2],
                stem_b: vars[3],
                down: vec![(vars[4], vars[5])],
                out: vec![(vars[6], vars[7]), (vars[8], vars[9])],
            };
            (vars, ev)
        };
        let pg2 = pg.clone();
        let f = move |ts: &[Tensor]| -> f32 {
            let mut tape = Tape::new();
            let (_, ev) = build(&mut tape, ts);
            let pyr = encode_pyramid(&mut tape, &ev, &pg2).unwrap();
            let mut parts = Vec::new();
            for p in pyr {
                let shape = tape.value(p).shape().to_vec();
                let flat = tape.reshape(p, &[shape.iter().product::<usize>()]).unwrap();
                // square so every parameter influences the loss nonlinearly
                let sq = tape.mul(flat, flat).unwrap();
                parts.push(tape.sum(sq));
            }
            let mut total = parts[0];
            for p in &parts[1..] {
                total = tape.add(total, *p).unwrap();
            }
            tape.value(total).item()
        };
        let mut tape = Tape::new();
        let (vars, ev) = build(&mut tape, &inputs);
        let pyr = encode_pyramid(&mut tape, &ev, &pg).unwrap();
        let mut parts = Vec::new();
        for p in pyr {
            let shape = tape.value(p).shape().to_vec();
            let flat = tape.reshape(p, &[shape.iter().product::<usize>()]).unwrap();
            let sq = tape.mul(flat, flat).unwrap();
            parts.push(tape.sum(sq));
        }
        let mut total = parts[0];
        for p in &parts[1..] {
            total = tape.add(total, *p).unwrap();
        }
        let grads = tape.backward(total).unwrap();
        for (arg, &var) in vars.iter().enumerate() {
            let fd = gradcheck::finite_diff(&f, &inputs, arg, 1e-2);
            let got = grads.get(var).expect("gradient must reach every parameter");
            assert!(got.data().iter().any(|&v| v != 0.0), "arg {arg}: all-zero grad");
            assert!(
                gradcheck::grads_close(got, &fd, 2e-2),
                "arg {arg}: max rel err {}",
                gradcheck::max_rel_err(got, &fd)
            );
        }
    }
}
