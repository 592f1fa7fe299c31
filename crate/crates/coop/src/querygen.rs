//! Query generation: learnable object queries refined over the BEV pyramid
//! by multi-scale deformable cross-attention.
//!
//! Each decoder layer runs self-attention among the queries, deformable
//! cross-attention that samples K offset locations per head and pyramid
//! level around each query's reference point, and a feed-forward block,
//! all with residual connections and layer normalization. Per-head sample
//! weights are softmax-normalized jointly over (level, point), so they sum
//! to one. Reference points live as logits squashed onto the detection
//! range by a sigmoid and are optionally refined after every layer.

use crate::pillars::GridSpec;
use autodiff::{Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryGenSpec {
    pub n_q: usize,
    pub c_q: usize,
    /// BEV channel count of the pyramid this decoder reads.
    pub c_bev: usize,
    pub heads: usize,
    /// Sample points per head and level (K).
    pub points: usize,
    pub levels: usize,
    /// Decoder depth (D).
    pub depth: usize,
    /// Sinusoid frequencies per coordinate in the positional embedding.
    pub pe_freqs: usize,
    pub refine_refs: bool,
    pub grid: GridSpec,
}

impl QueryGenSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.c_q % self.heads != 0 {
            return Err(format!(
                "query width {} must divide evenly over {} heads",
                self.c_q, self.heads
            ));
        }
        if self.n_q == 0 || self.points == 0 || self.levels == 0 || self.depth == 0 {
            return Err("query, point, level and depth counts must be positive".into());
        }
        if self.pe_freqs == 0 {
            return Err("need at least one positional frequency".into());
        }
        Ok(())
    }

    pub fn pe_input_dim(&self) -> usize {
        3 * self.pe_freqs * 2
    }
}

/// One decoder layer's tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub sa_wq: Tensor,
    pub sa_wk: Tensor,
    pub sa_wv: Tensor,
    pub sa_wo: Tensor,
    pub sa_bo: Tensor,
    pub off_w: Tensor,
    pub off_b: Tensor,
    pub wgt_w: Tensor,
    pub wgt_b: Tensor,
    pub val_w: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ref_w: Tensor,
    pub ref_b: Tensor,
    /// One scalar per pyramid level, in cells; initialized to 4.
    pub level_scales: Vec<Tensor>,
}

/// All query-generator tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGenParams {
    pub query_init: Tensor,
    pub ref_logits: Tensor,
    pub pe_w: Tensor,
    pub pe_b: Tensor,
    pub layers: Vec<LayerParams>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).unwrap();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    gaussian(rng, &[fan_in, fan_out], 1.0 / (fan_in as f32).sqrt())
}

impl QueryGenParams {
    pub fn init(spec: &QueryGenSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = spec.c_q;
        let mlk = spec.heads * spec.levels * spec.points;
        let layers = (0..spec.depth)
            .map(|_| LayerParams {
                sa_wq: linear_init(&mut rng, c, c),
                sa_wk: linear_init(&mut rng, c, c),
                sa_wv: linear_init(&mut rng, c, c),
                sa_wo: linear_init(&mut rng, c, c),
                sa_bo: Tensor::zeros(&[c]),
                // zero heads: initial samples sit at the reference point
                // with uniform weights
                off_w: Tensor::zeros(&[c, mlk * 2]),
                off_b: Tensor::zeros(&[mlk * 2]),
                wgt_w: Tensor::zeros(&[c, mlk]),
                wgt_b: Tensor::zeros(&[mlk]),
                val_w: linear_init(&mut rng, spec.c_bev, c),
                out_w: linear_init(&mut rng, c, c),
                out_b: Tensor::zeros(&[c]),
                ffn_w1: linear_init(&mut rng, c, 2 * c),
                ffn_b1: Tensor::zeros(&[2 * c]),
                ffn_w2: linear_init(&mut rng, 2 * c, c),
                ffn_b2: Tensor::zeros(&[c]),
                ref_w: Tensor::zeros(&[c, 3]),
                ref_b: Tensor::zeros(&[3]),
                level_scales: (0..spec.levels)
                    .map(|_| Tensor::new(vec![1], vec![4.0]).unwrap())
                    .collect(),
            })
            .collect();
        QueryGenParams {
            query_init: gaussian(&mut rng, &[spec.n_q, c], 0.1),
            ref_logits: gaussian(&mut rng, &[spec.n_q, 3], 0.5),
            pe_w: linear_init(&mut rng, spec.pe_input_dim(), c),
            pe_b: Tensor::zeros(&[c]),
            layers,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.query_init, &self.ref_logits, &self.pe_w, &self.pe_b];
        for l in &self.layers {
            out.extend([
                &l.sa_wq, &l.sa_wk, &l.sa_wv, &l.sa_wo, &l.sa_bo, &l.off_w, &l.off_b,
                &l.wgt_w, &l.wgt_b, &l.val_w, &l.out_w, &l.out_b, &l.ffn_w1, &l.ffn_b1,
                &l.ffn_w2, &l.ffn_b2, &l.ref_w, &l.ref_b,
            ]);
            out.extend(l.level_scales.iter());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.query_init,
            &mut self.ref_logits,
            &mut self.pe_w,
            &mut self.pe_b,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.sa_wq, &mut l.sa_wk, &mut l.sa_wv, &mut l.sa_wo, &mut l.sa_bo,
                &mut l.off_w, &mut l.off_b, &mut l.wgt_w, &mut l.wgt_b, &mut l.val_w,
                &mut l.out_w, &mut l.out_b, &mut l.ffn_w1, &mut l.ffn_b1, &mut l.ffn_w2,
                &mut l.ffn_b2, &mut l.ref_w, &mut l.ref_b,
            ]);
            out.extend(l.level_scales.iter_mut());
        }
        out
    }

    pub fn register(&self, tape: &mut Tape) -> QueryGenVars {
        QueryGenVars {
            query_init: tape.leaf(self.query_init.clone()),
            ref_logits: tape.leaf(self.ref_logits.clone()),
            pe_w: tape.leaf(self.pe_w.clone()),
            pe_b: tape.leaf(self.pe_b.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    sa_wq: tape.leaf(l.sa_wq.clone()),
                    sa_wk: tape.leaf(l.sa_wk.clone()),
                    sa_wv: tape.leaf(l.sa_wv.clone()),
                    sa_wo: tape.leaf(l.sa_wo.clone()),
                    sa_bo: tape.leaf(l.sa_bo.clone()),
                    off_w: tape.leaf(l.off_w.clone()),
                    off_b: tape.leaf(l.off_b.clone()),
                    wgt_w: tape.leaf(l.wgt_w.clone()),
                    wgt_b: tape.leaf(l.wgt_b.clone()),
                    val_w: tape.leaf(l.val_w.clone()),
                    out_w: tape.leaf(l.out_w.clone()),
                    out_b: tape.leaf(l.out_b.clone()),
                    ffn_w1: tape.leaf(l.ffn_w1.clone()),
                    ffn_b1: tape.leaf(l.ffn_b1.clone()),
                    ffn_w2: tape.leaf(l.ffn_w2.clone()),
                    ffn_b2: tape.leaf(l.ffn_b2.clone()),
                    ref_w: tape.leaf(l.ref_w.clone()),
                    ref_b: tape.leaf(l.ref_b.clone()),
                    level_scales: l
                        .level_scales
                        .iter()
                        .map(|s| tape.leaf(s.clone()))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Collect gradients in the same order as `tensors_mut`.
    pub fn grads(
        vars: &QueryGenVars,
        grads: &mut autodiff::Gradients,
    ) -> Vec<Option<Tensor>> {
        let mut out = vec![
            grads.take(vars.query_init),
            grads.take(vars.ref_logits),
            grads.take(vars.pe_w),
            grads.take(vars.pe_b),
        ];
        for l in &vars.layers {
            for v in [
                l.sa_wq, l.sa_wk, l.sa_wv, l.sa_wo, l.sa_bo, l.off_w, l.off_b, l.wgt_w,
                l.wgt_b, l.val_w, l.out_w, l.out_b, l.ffn_w1, l.ffn_b1, l.ffn_w2,
                l.ffn_b2, l.ref_w, l.ref_b,
            ] {
                out.push(grads.take(v));
            }
            for &s in &l.level_scales {
                out.push(grads.take(s));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub sa_wq: Var,
    pub sa_wk: Var,
    pub sa_wv: Var,
    pub sa_wo: Var,
    pub sa_bo: Var,
    pub off_w: Var,
    pub off_b: Var,
    pub wgt_w: Var,
    pub wgt_b: Var,
    pub val_w: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ref_w: Var,
    pub ref_b: Var,
    pub level_scales: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct QueryGenVars {
    pub query_init: Var,
    pub ref_logits: Var,
    pub pe_w: Var,
    pub pe_b: Var,
    pub layers: Vec<LayerVars>,
}

/// Normalized [0,1]^3 reference coordinates from logits.
pub fn normalized_refs(tape: &mut Tape, ref_logits: Var) -> Var {
    tape.sigmoid(ref_logits)
}

/// Metric reference points `[N, 3]` from normalized coordinates.
pub fn refs_to_meters(
    tape: &mut Tape,
    spec: &QueryGenSpec,
    norm_refs: Var,
) -> Result<Var, TensorError> {
    let g = &spec.grid;
    let span = tape.constant(Tensor::new(
        vec![3],
        vec![g.x_max - g.x_min, g.y_max - g.y_min, g.z_max - g.z_min],
    )?);
    let low = tape.constant(Tensor::new(vec![3], vec![g.x_min, g.y_min, g.z_min])?);
    let scaled = tape.mul_bias(norm_refs, span)?;
    tape.add_bias(scaled, low)
}

/// Sinusoidal positional embedding of normalized reference points, mapped
/// to query width by one linear layer.
pub fn positional_embed(
    tape: &mut Tape,
    spec: &QueryGenSpec,
    pe_w: Var,
    pe_b: Var,
    norm_refs: Var,
) -> Result<Var, TensorError> {
    let mut scaled = Vec::with_capacity(spec.pe_freqs);
    for f in 0..spec.pe_freqs {
        let freq = std::f32::consts::PI * (1 << f) as f32;
        scaled.push(tape.scale(norm_refs, freq));
    }
    let stacked = tape.concat_cols(&scaled)?;
    let sincos = tape.sin_cos(stacked)?;
    let emb = tape.matmul(sincos, pe_w)?;
    tape.add_bias(emb, pe_b)
}

fn multi_head_self_attention(
    tape: &mut Tape,
    spec: &QueryGenSpec,
    l: &LayerVars,
    queries: Var,
    q_pe: Var,
) -> Result<Var, TensorError> {
    let d = spec.c_q / spec.heads;
    let q_all = tape.matmul(q_pe, l.sa_wq)?;
    let k_all = tape.matmul(q_pe, l.sa_wk)?;
    let v_all = tape.matmul(queries, l.sa_wv)?;
    let mut heads = Vec::with_capacity(spec.heads);
    for m in 0..spec.heads {
        let q = tape.slice_cols(q_all, m * d..(m + 1) * d)?;
        let k = tape.slice_cols(k_all, m * d..(m + 1) * d)?;
        let v = tape.slice_cols(v_all, m * d..(m + 1) * d)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (d as f32).sqrt());
        let attn = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(attn, v)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, l.sa_wo)?;
    tape.add_bias(out, l.sa_bo)
}

/// Deformable cross-attention for one layer.
///
/// Returns the attended features `[N, C_q]` and, per head, the normalized
/// sample weights `[N, L*K]` (each row sums to one across levels and
/// points).
pub fn deformable_cross_attention(
    tape: &mut Tape,
    spec: &QueryGenSpec,
    l: &LayerVars,
    q_pe: Var,
    norm_refs: Var,
    pyramid: &[Var],
) -> Result<(Var, Vec<Var>), TensorError> {
    if pyramid.len() != spec.levels {
        return Err(TensorError::Invalid {
            op: "deformable_cross_attention",
            detail: format!(
                "pyramid has {} levels, expected {}",
                pyramid.len(),
                spec.levels
            ),
        });
    }
    let n = tape.value(q_pe).rows();
    let (m_heads, k_pts, levels) = (spec.heads, spec.points, spec.levels);
    let d = spec.c_q / m_heads;

    let off_all = tape.matmul(q_pe, l.off_w)?;
    let off_all = tape.add_bias(off_all, l.off_b)?; // [N, M*L*K*2]
    let wgt_all = tape.matmul(q_pe, l.wgt_w)?;
    let wgt_all = tape.add_bias(wgt_all, l.wgt_b)?; // [N, M*L*K]

    let base_uv = tape.slice_cols(norm_refs, 0..2)?;
    let repeat_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k_pts)).collect();
    let base_rep = tape.select_rows(base_uv, &repeat_idx)?; // [N*K, 2]

    let mut sigmas = Vec::with_capacity(m_heads);
    for m in 0..m_heads {
        let logits = tape.slice_cols(wgt_all, m * levels * k_pts..(m + 1) * levels * k_pts)?;
        sigmas.push(tape.softmax(logits, 1)?);
    }

    // per (level, head) accumulation of weighted samples, heads in d-wide
    // slices of the value projection
    let mut head_sums: Vec<Option<Var>> = vec![None; m_heads];
    for lv in 0..levels {
        let shape = tape.value(pyramid[lv]).shape().to_vec();
        let (h_l, w_l) = (shape[1], shape[2]);
        for m in 0..m_heads {
            let start = (m * levels + lv) * k_pts * 2;
            let off = tape.slice_cols(off_all, start..start + k_pts * 2)?; // [N, K*2]
            // cells -> normalized units, learnable per-level magnitude
            let inv_dim: Vec<f32> = (0..k_pts)
                .flat_map(|_| [1.0 / (w_l as f32 - 1.0).max(1.0), 1.0 / (h_l as f32 - 1.0).max(1.0)])
                .collect();
            let inv_dim = tape.constant(Tensor::new(vec![k_pts * 2], inv_dim)?);
            let off = tape.mul_bias(off, inv_dim)?;
            let off = tape.scale_by_var(off, l.level_scales[lv])?;
            let off = tape.reshape(off, &[n * k_pts, 2])?;
            let locs = tape.add(base_rep, off)?;
            let samples = tape.bilinear_sample(pyramid[lv], locs)?; // [N*K, C_bev]
            let proj = tape.matmul(samples, l.val_w)?; // [N*K, C_q]
            let head_slice = tape.slice_cols(proj, m * d..(m + 1) * d)?;
            let sigma_lv = tape.slice_cols(sigmas[m], lv * k_pts..(lv + 1) * k_pts)?;
            let pooled = tape.weighted_row_sum(head_slice, sigma_lv)?; // [N, d]
            head_sums[m] = Some(match head_sums[m] {
                Some(acc) => tape.add(acc, pooled)?,
                None => pooled,
            });
        }
    }
    let heads: Vec<Var> = head_sums.into_iter().map(|h| h.unwrap()).collect();
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, l.out_w)?;
    let out = tape.add_bias(out, l.out_b)?;
    Ok((out, sigmas))
}

/// One decoder layer; returns updated queries and reference logits along
/// with the cross-attention weights for inspection.
pub fn decoder_layer(
    tape: &mut Tape,
    spec: &QueryGenSpec,
    l: &LayerVars,
    vars: &QueryGenVars,
    queries: Var,
    ref_logits: Var,
    pyramid: &[Var],
) -> Result<(Var, Var, Vec<Var>), TensorError> {
    let norm_refs = normalized_refs(tape, ref_logits);
    let pe = positional_embed(tape, spec, vars.pe_w, vars.pe_b, norm_refs)?;
    let q_pe = tape.add(queries, pe)?;

    let sa = multi_head_self_attention(tape, spec, l, queries, q_pe)?;
    let x = tape.add(queries, sa)?;
    let x = tape.layer_norm(x, 1e-5)?;

    let pe2 = positional_embed(tape, spec, vars.pe_w, vars.pe_b, norm_refs)?;
    let x_pe = tape.add(x, pe2)?;
    let (ca, sigmas) = deformable_cross_attention(tape, spec, l, x_pe, norm_refs, pyramid)?;
    let x = tape.add(x, ca)?;
    let x = tape.layer_norm(x, 1e-5)?;

    let h = tape.matmul(x, l.ffn_w1)?;
    let h = tape.add_bias(h, l.ffn_b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, l.ffn_w2)?;
    let h = tape.add_bias(h, l.ffn_b2)?;
    let x = tape.add(x, h)?;
    let x = tape.layer_norm(x, 1e-5)?;

    let new_logits = if spec.refine_refs {
        let delta = tape.matmul(x, l.ref_w)?;
        let delta = tape.add_bias(delta, l.ref_b)?;
        tape.add(ref_logits, delta)?
    } else {
        ref_logits
    };
    Ok((x, new_logits, sigmas))
}

/// Full query-generator output for one agent.
pub struct QueryGenOutput {
    /// `[N_q, C_q]` final query features.
    pub queries: Var,
    /// `[N_q, 3]` reference logits after all refinement.
    pub ref_logits: Var,
    /// `[N_q, 3]` metric reference points.
    pub refs_m: Var,
    /// Cross-attention weights per layer, per head.
    pub sigmas: Vec<Vec<Var>>,
}

/// Run the stack of decoder layers over a BEV pyramid.
pub fn run_query_generator(
    tape: &mut Tape,
    spec: &QueryGenSpec,
    vars: &QueryGenVars,
    pyramid: &[Var],
) -> Result<QueryGenOutput, TensorError> {
    let mut queries = vars.query_init;
    let mut ref_logits = vars.ref_logits;
    let mut all_sigmas = Vec::with_capacity(spec.depth);
    for l in &vars.layers {
        let (q, r, s) = decoder_layer(tape, spec, l, vars, queries, ref_logits, pyramid)?;
        queries = q;
        ref_logits = r;
        all_sigmas.push(s);
    }
    let norm = normalized_refs(tape, ref_logits);
    let refs_m = refs_to_meters(tape, spec, norm)?;
    Ok(QueryGenOutput { queries, ref_logits, refs_m, sigmas: all_sigmas })
}

/// Metric reference points as plain arrays (off-tape convenience).
pub fn reference_points_of(tape: &Tape, out: &QueryGenOutput) -> Vec<[f32; 3]> {
    tape.value(out.refs_m)
        .data()
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use autodiff::gradcheck;
    use rand::Rng;

    fn small_spec() -> QueryGenSpec {
        QueryGenSpec {
            n_q: 4,
            c_q: 8,
            c_bev: 8,
            heads: 2,
            points: 2,
            levels: 2,
            depth: 2,
            pe_freqs: 2,
            refine_refs: true,
            grid: GridSpec::symmetric(4.0, 4.0, -3.0, 1.0, 0.5),
        }
    }

    fn random_pyramid(
        tape: &mut Tape,
        rng: &mut ChaCha8Rng,
        c: usize,
        dims: &[(usize, usize)],
    ) -> Vec<Var> {
        dims.iter()
            .map(|&(h, w)| {
                let n = c * h * w;
                let t = Tensor::new(
                    vec![c, h, w],
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap();
                tape.constant(t)
            })
            .collect()
    }

    #[test]
    fn init_is_reproducible_and_in_range() {
        let spec = small_spec();
        let a = QueryGenParams::init(&spec, 7);
        let b = QueryGenParams::init(&spec, 7);
        assert_eq!(a, b);
        assert_ne!(a, QueryGenParams::init(&spec, 8));
        assert_eq!(a.query_init.shape(), &[4, 8]);

        let mut tape = Tape::new();
        let vars = a.register(&mut tape);
        let norm = normalized_refs(&mut tape, vars.ref_logits);
        let refs = refs_to_meters(&mut tape, &spec, norm).unwrap();
        for row in tape.value(refs).data().chunks(3) {
            assert!(row[0] > -4.0 && row[0] < 4.0);
            assert!(row[1] > -4.0 && row[1] < 4.0);
            assert!(row[2] > -3.0 && row[2] < 1.0);
        }
    }

    #[test]
    fn positional_embedding_shape_and_injectivity() {
        let spec = small_spec();
        let params = QueryGenParams::init(&spec, 3);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let pts = tape.constant(
            Tensor::new(vec![3, 3], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.625, 0.5, 0.5])
                .unwrap(),
        );
        let emb = positional_embed(&mut tape, &spec, vars.pe_w, vars.pe_b, pts).unwrap();
        let v = tape.value(emb);
        assert_eq!(v.shape(), &[3, 8]);
        let rows: Vec<&[f32]> = v.data().chunks(8).collect();
        assert_eq!(rows[0], rows[1], "equal points embed equally");
        let diff: f32 = rows[0]
            .iter()
            .zip(rows[2])
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-4, "1 m apart should embed differently");
    }

    #[test]
    fn sample_weights_sum_to_one_per_head() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..50 {
            let mut params = QueryGenParams::init(&spec, trial);
            // random (not zero-init) attention heads
            for l in &mut params.layers {
                l.wgt_w = gaussian(&mut rng, &[spec.c_q, spec.heads * spec.levels * spec.points], 0.5);
                l.wgt_b = gaussian(&mut rng, &[spec.heads * spec.levels * spec.points], 0.5);
                l.off_w = gaussian(&mut rng, &[spec.c_q, spec.heads * spec.levels * spec.points * 2], 0.5);
            }
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let pyramid = random_pyramid(&mut tape, &mut rng, spec.c_bev, &[(8, 8), (4, 4)]);
            let out = run_query_generator(&mut tape, &spec, &vars, &pyramid).unwrap();
            for layer_sigmas in &out.sigmas {
                assert_eq!(layer_sigmas.len(), spec.heads);
                for &s in layer_sigmas {
                    for row in tape.value(s).data().chunks(spec.levels * spec.points) {
                        let sum: f32 = row.iter().sum();
                        assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
                    }
                }
            }
        }
    }

    #[test]
    fn constant_pyramid_passes_through_attention() {
        // zero offsets + uniform weights + identity projections on a
        // constant field: attended features equal the constant per channel
        let mut spec = small_spec();
        spec.heads = 1;
        spec.levels = 1;
        spec.c_q = 4;
        spec.c_bev = 4;
        spec.n_q = 3;
        let mut params = QueryGenParams::init(&spec, 0);
        let eye = |n: usize| {
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                d[i * n + i] = 1.0;
            }
            Tensor::new(vec![n, n], d).unwrap()
        };
        params.layers[0].val_w = eye(4);
        params.layers[0].out_w = eye(4);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let consts = [0.3f32, -1.2, 0.7, 2.0];
        let mut map = Vec::new();
        for c in consts {
            map.extend(std::iter::repeat_n(c, 36));
        }
        let pyramid = vec![tape.constant(Tensor::new(vec![4, 6, 6], map).unwrap())];
        let norm = normalized_refs(&mut tape, vars.ref_logits);
        let pe = positional_embed(&mut tape, &spec, vars.pe_w, vars.pe_b, norm).unwrap();
        let q_pe = tape.add(vars.query_init, pe).unwrap();
        let (out, sigmas) =
            deformable_cross_attention(&mut tape, &spec, &vars.layers[0], q_pe, norm, &pyramid)
                .unwrap();
        for row in tape.value(sigmas[0]).data().chunks(spec.points) {
            for &w in row {
                assert!((w - 0.5).abs() < 1e-6, "zero-init weights must be uniform");
            }
        }
        for row in tape.value(out).data().chunks(4) {
            for (got, want) in row.iter().zip(consts) {
                assert!((got - want).abs() < 1e-5, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn hand_computed_two_point_interpolation() {
        // 1 head, 1 level, K=2, 1 query: offsets and weights set by bias
        // terms; compare against a scalar bilinear computation
        let mut spec = small_spec();
        spec.heads = 1;
        spec.levels = 1;
        spec.points = 2;
        spec.c_q = 2;
        spec.c_bev = 2;
        spec.n_q = 1;
        let mut params = QueryGenParams::init(&spec, 0);
        let eye2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        params.layers[0].val_w = eye2.clone();
        params.layers[0].out_w = eye2;
        params.layers[0].out_b = Tensor::zeros(&[2]);
        // ref at center (0.5, 0.5); offsets in cells: point 1 (+1, 0),
        // point 2 (0, +2); 5x5 map -> normalized offsets (0.25, 0) and
        // (0, 0.5) with level scale 1
        params.ref_logits = Tensor::zeros(&[1, 3]);
        params.layers[0].level_scales[0] = Tensor::new(vec![1], vec![1.0]).unwrap();
        params.layers[0].off_b =
            Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        // weight logits (ln 3, 0) -> softmax (0.75, 0.25)
        params.layers[0].wgt_b = Tensor::new(vec![2], vec![3.0f32.ln(), 0.0]).unwrap();

        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let mut map = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..(2 * 25) {
            map.push(rng.random_range(-1.0f32..1.0));
        }
        let map_t = Tensor::new(vec![2, 5, 5], map.clone()).unwrap();
        let pyramid = vec![tape.constant(map_t)];
        let norm = normalized_refs(&mut tape, vars.ref_logits);
        let pe = positional_embed(&mut tape, &spec, vars.pe_w, vars.pe_b, norm).unwrap();
        let q_pe = tape.add(vars.query_init, pe).unwrap();
        let (out, _) =
            deformable_cross_attention(&mut tape, &spec, &vars.layers[0], q_pe, norm, &pyramid)
                .unwrap();
        // sample points in pixel coords on the 5x5 grid (align corners):
        // (0.75, 0.5) * 4 = (3, 2) and (0.5, 1.0) * 4 = (2, 4)
        let pixel = |ch: usize, x: usize, y: usize| map[ch * 25 + y * 5 + x];
        for ch in 0..2 {
            let expect = 0.75 * pixel(ch, 3, 2) + 0.25 * pixel(ch, 2, 4);
            let got = tape.value(out).data()[ch];
            assert!((got - expect).abs() < 1e-5, "channel {ch}: {got} vs {expect}");
        }
    }

    #[test]
    fn zeroed_delta_head_keeps_reference_points() {
        let spec = small_spec(); // refine enabled, ref heads zero-initialized
        let params = QueryGenParams::init(&spec, 11);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pyramid = random_pyramid(&mut tape, &mut rng, spec.c_bev, &[(8, 8), (4, 4)]);
        let out = run_query_generator(&mut tape, &spec, &vars, &pyramid).unwrap();
        assert_eq!(
            tape.value(out.ref_logits).data(),
            params.ref_logits.data(),
            "zero-weight refinement must not move reference logits"
        );
        assert_eq!(tape.value(out.queries).shape(), &[spec.n_q, spec.c_q]);
    }

    #[test]
    fn refinement_moves_refs_but_keeps_them_in_range() {
        let spec = small_spec();
        let mut params = QueryGenParams::init(&spec, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in &mut params.layers {
            l.ref_w = gaussian(&mut rng, &[spec.c_q, 3], 2.0);
            l.ref_b = gaussian(&mut rng, &[3], 2.0);
        }
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let pyramid = random_pyramid(&mut tape, &mut rng, spec.c_bev, &[(8, 8), (4, 4)]);
        let out = run_query_generator(&mut tape, &spec, &vars, &pyramid).unwrap();
        assert_ne!(tape.value(out.ref_logits).data(), params.ref_logits.data());
        // sigmoid squashing keeps points inside the closed range even when
        // refinement saturates the logits
        for p in reference_points_of(&tape, &out) {
            assert!((-4.0..=4.0).contains(&p[0]));
            assert!((-4.0..=4.0).contains(&p[1]));
            assert!((-3.0..=1.0).contains(&p[2]));
        }
    }

    #[test]
    fn query_update_is_permutation_equivariant() {
        let spec = small_spec();
        let params = QueryGenParams::init(&spec, 23);
        let perm = [2usize, 0, 3, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pyr_data: Vec<Tensor> = vec![
            Tensor::new(vec![8, 8, 8], (0..512).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            Tensor::new(vec![8, 4, 4], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        ];

        let run = |permute: bool| -> (Vec<f32>, Vec<f32>) {
            let mut p = params.clone();
            if permute {
                let q = p.query_init.data().to_vec();
                let r = p.ref_logits.data().to_vec();
                let c = spec.c_q;
                p.query_init = Tensor::new(
                    vec![spec.n_q, c],
                    perm.iter().flat_map(|&i| q[i * c..(i + 1) * c].to_vec()).collect(),
                )
                .unwrap();
                p.ref_logits = Tensor::new(
                    vec![spec.n_q, 3],
                    perm.iter().flat_map(|&i| r[i * 3..(i + 1) * 3].to_vec()).collect(),
                )
                .unwrap();
            }
            let mut tape = Tape::new();
            let vars = p.register(&mut tape);
            let pyramid: Vec<Var> =
                pyr_data.iter().map(|t| tape.constant(t.clone())).collect();
            let out = run_query_generator(&mut tape, &spec, &vars, &pyramid).unwrap();
            (
                tape.value(out.queries).data().to_vec(),
                tape.value(out.ref_logits).data().to_vec(),
            )
        };
        let (q_base, r_base) = run(false);
        let (q_perm, r_perm) = run(true);
        let c = spec.c_q;
        for (slot, &src) in perm.iter().enumerate() {
            for j in 0..c {
                let a = q_perm[slot * c + j];
                let b = q_base[src * c + j];
                assert!((a - b).abs() < 1e-5, "query mismatch at ({slot},{j})");
            }
            for j in 0..3 {
                assert!((r_perm[slot * 3 + j] - r_base[src * 3 + j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // tiny pipeline: 2 queries, single level 8x8, 1 head, 1 layer
        let spec = QueryGenSpec {
            n_q: 2,
            c_q: 4,
            c_bev: 4,
            heads: 1,
            points: 2,
            levels: 1,
            depth: 1,
            pe_freqs: 2,
            refine_refs: true,
            grid: GridSpec::symmetric(4.0, 4.0, -3.0, 1.0, 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut params = QueryGenParams::init(&spec, 17);
        // non-degenerate heads so every parameter matters
        let mlk = spec.heads * spec.levels * spec.points;
        params.layers[0].off_w = gaussian(&mut rng, &[spec.c_q, mlk * 2], 0.4);
        params.layers[0].off_b = gaussian(&mut rng, &[mlk * 2], 0.4);
        params.layers[0].wgt_w = gaussian(&mut rng, &[spec.c_q, mlk], 0.4);
        params.layers[0].wgt_b = gaussian(&mut rng, &[mlk], 0.4);
        params.layers[0].ref_w = gaussian(&mut rng, &[spec.c_q, 3], 0.4);
        let pyr = Tensor::new(
            vec![4, 8, 8],
            (0..256).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();

        let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let spec2 = spec;
        let pyr2 = pyr.clone();
        let f = move |ts: &[Tensor]| -> f32 {
            let mut p = QueryGenParams::init(&spec2, 17);
            for (dst, src) in p.tensors_mut().into_iter().zip(ts) {
                *dst = src.clone();
            }
            let mut tape = Tape::new();
            let vars = p.register(&mut tape);
            let pyramid = vec![tape.constant(pyr2.clone())];
            let out = run_query_generator(&mut tape, &spec2, &vars, &pyramid).unwrap();
            let q = tape.mul(out.queries, out.queries).unwrap();
            let r = tape.mul(out.refs_m, out.refs_m).unwrap();
            let qs = tape.sum(q);
            let rs = tape.sum(r);
            let rs = tape.scale(rs, 0.05);
            let total = tape.add(qs, rs).unwrap();
            tape.value(total).item()
        };

        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let pyramid = vec![tape.constant(pyr)];
        let out = run_query_generator(&mut tape, &spec, &vars, &pyramid).unwrap();
        let q = tape.mul(out.queries, out.queries).unwrap();
        let r = tape.mul(out.refs_m, out.refs_m).unwrap();
        let qs = tape.sum(q);
        let rs = tape.sum(r);
        let rs = tape.scale(rs, 0.05);
        let total = tape.add(qs, rs).unwrap();
        let mut grads = tape.backward(total).unwrap();
        let grad_list = QueryGenParams::grads(&vars, &mut grads);

        for (arg, maybe_grad) in grad_list.iter().enumerate() {
            let fd = gradcheck::finite_diff(&f, &tensors, arg, 1e-3);
            match maybe_grad {
                Some(g) => assert!(
                    gradcheck::grads_close(g, &fd, 5e-3),
                    "param {arg}: max rel err {}",
                    gradcheck::max_rel_err(g, &fd)
                ),
                None => assert!(
                    fd.max_abs() < 1e-4,
                    "param {arg}: missing analytic grad but FD = {}",
                    fd.max_abs()
                ),
            }
        }
    }
}
