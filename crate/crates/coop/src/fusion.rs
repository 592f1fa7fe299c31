//! Cross-agent query fusion: position-refined similarity matching and
//! masked multi-head aggregation.
//!
//! Every query in the pool (ego and received alike) acts once as a graph
//! center; candidates from *other* agents whose sigmoid-cosine similarity
//! with the center reaches the threshold join its graph. Aggregation
//! attends from the center over its members with disallowed pairs forced
//! to exactly zero weight; a center with no members keeps its own feature
//! unchanged.

use autodiff::{Gradients, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Similarity reachable from a cosine in [-1, 1]: (sigmoid(-1), sigmoid(1)).
pub const SIMILARITY_MIN: f32 = 0.268_941_42;
pub const SIMILARITY_MAX: f32 = 0.731_058_58;

/// Which pool row belongs to which agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct PoolEntry {
    pub owner: usize,
    pub index: usize,
}

/// Aggregation parameters (multi-head attention projections).
#[derive(Clone, Debug, PartialEq)]
pub struct OqaParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl OqaParams {
    pub fn init(c_q: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f32, 1.0 / (c_q as f32).sqrt()).unwrap();
        let mat = |rng: &mut ChaCha8Rng| {
            Tensor::new(
                vec![c_q, c_q],
                (0..c_q * c_q).map(|_| dist.sample(rng)).collect(),
            )
            .unwrap()
        };
        OqaParams {
            wq: mat(&mut rng),
            wk: mat(&mut rng),
            wv: mat(&mut rng),
            wo: mat(&mut rng),
            bo: Tensor::zeros(&[c_q]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.wq, &self.wk, &self.wv, &self.wo, &self.bo]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.bo,
        ]
    }

    pub fn register(&self, tape: &mut Tape) -> OqaVars {
        OqaVars {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            wo: tape.leaf(self.wo.clone()),
            bo: tape.leaf(self.bo.clone()),
        }
    }

    pub fn grads(vars: &OqaVars, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        [vars.wq, vars.wk, vars.wv, vars.wo, vars.bo]
            .iter()
            .map(|&v| grads.take(v))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OqaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Position-refine a pool of queries: q-tilde = q + pe.
///
/// The positional embedding must come from the same network the query
/// generator uses, evaluated at the ego-frame reference points.
pub fn refine(tape: &mut Tape, queries: Var, pe: Var) -> Result<Var, TensorError> {
    tape.add(queries, pe)
}

/// Pairwise sigmoid-of-cosine similarities of pool rows, off-tape.
///
/// Zero-norm rows get cosine 0 (similarity one half) and are reported.
pub fn similarity_matrix(pool: &Tensor) -> Vec<Vec<f32>> {
    let t = pool.rows();
    let c = pool.cols();
    let d = pool.data();
    let norms: Vec<f64> = (0..t)
        .map(|i| {
            d[i * c..(i + 1) * c]
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    for (i, &n) in norms.iter().enumerate() {
        if n == 0.0 {
            eprintln!("zero-norm refined query at pool row {i}; similarity fixed at 0.5");
        }
    }
    (0..t)
        .map(|i| {
            (0..t)
                .map(|j| {
                    let cosine = if norms[i] == 0.0 || norms[j] == 0.0 {
                        0.0
                    } else {
                        let dot: f64 = (0..c)
                            .map(|k| d[i * c + k] as f64 * d[j * c + k] as f64)
                            .sum();
                        dot / (norms[i] * norms[j])
                    };
                    (1.0 / (1.0 + (-cosine).exp())) as f32
                })
                .collect()
        })
        .collect()
}

/// Per-center member lists. Candidate `j` joins center `i`'s graph iff it
/// belongs to a different agent and the similarity clears `mu`. With
/// matching disabled (ablation), every foreign query joins every graph.
pub fn build_graphs(
    sim: &[Vec<f32>],
    entries: &[PoolEntry],
    mu: f32,
    use_matching: bool,
) -> Vec<Vec<usize>> {
    let t = entries.len();
    (0..t)
        .map(|i| {
            (0..t)
                .filter(|&j| {
                    entries[j].owner != entries[i].owner
                        && (!use_matching || sim[i][j] >= mu)
                })
                .collect()
        })
        .collect()
}

/// Masked multi-head aggregation over the pool.
///
/// Row `i` of the result is center `i` plus the attention readout over its
/// graph members (excluded pairs get exactly zero weight). Centers with no
/// members get a readout of exactly zero, so the residual path returns the
/// center feature bit-for-bit.
pub fn aggregate(
    tape: &mut Tape,
    heads: usize,
    v: &OqaVars,
    refined: Var,
    graphs: &[Vec<usize>],
) -> Result<Var, TensorError> {
    let t = tape.value(refined).rows();
    let c = tape.value(refined).cols();
    if c % heads != 0 {
        return Err(TensorError::Invalid {
            op: "aggregate",
            detail: format!("{c} channels across {heads} heads"),
        });
    }
    if graphs.len() != t {
        return Err(TensorError::Invalid {
            op: "aggregate",
            detail: format!("{} graphs for {t} pool rows", graphs.len()),
        });
    }
    let d = c / heads;

    // additive mask: 0 for members, -inf otherwise; empty rows attend to
    // themselves to keep the softmax finite, then get their readout zeroed
    let mut mask = vec![f32::NEG_INFINITY; t * t];
    let mut keep = vec![0.0f32; t * c];
    for (i, members) in graphs.iter().enumerate() {
        if members.is_empty() {
            mask[i * t + i] = 0.0;
        } else {
            for &j in members {
                mask[i * t + j] = 0.0;
            }
            keep[i * c..(i + 1) * c].fill(1.0);
        }
    }
    let mask = tape.constant(Tensor::new(vec![t, t], mask)?);
    let keep = tape.constant(Tensor::new(vec![t, c], keep)?);

    let q_all = tape.matmul(refined, v.wq)?;
    let k_all = tape.matmul(refined, v.wk)?;
    let v_all = tape.matmul(refined, v.wv)?;
    let mut outs = Vec::with_capacity(heads);
    for m in 0..heads {
        let q = tape.slice_cols(q_all, m * d..(m + 1) * d)?;
        let k = tape.slice_cols(k_all, m * d..(m + 1) * d)?;
        let val = tape.slice_cols(v_all, m * d..(m + 1) * d)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (d as f32).sqrt());
        let scores = tape.add(scores, mask)?;
        let attn = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(attn, val)?);
    }
    let cat = tape.concat_cols(&outs)?;
    let out = tape.matmul(cat, v.wo)?;
    let out = tape.add_bias(out, v.bo)?;
    let out = tape.mul(out, keep)?;
    tape.add(refined, out)
}

/// Deterministic top-`n_q` selection by confidence, ties broken by the
/// declared `(owner, index)` order. Returns pool-row indices.
pub fn select_top(confidences: &[f32], entries: &[PoolEntry], n_q: usize) -> Vec<usize> {
    assert_eq!(confidences.len(), entries.len());
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| {
        confidences[b]
            .partial_cmp(&confidences[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(entries[a].cmp(&entries[b]))
    });
    order.truncate(n_q);
    order
}
