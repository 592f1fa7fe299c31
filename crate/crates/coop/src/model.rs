//! Full detection model: parameter bundle, checkpointing, and the forward
//! passes used for training and for the no-fusion / late-fusion /
//! cooperative evaluation modes.

use crate::comms::{enforce_budget, QueryMessage, WireError};
use crate::config::ModelConfig;
use crate::eval::{rotated_iou_bev, ScoredDetection};
use crate::fusion::{self, OqaParams, OqaVars, PoolEntry};
use crate::head::{self, HeadError, HeadVars, LossWeights, BOX_RAW_DIM};
use crate::pillars::{self, EncoderVars};
use crate::querygen::{self, QueryGenOutput, QueryGenParams, QueryGenSpec, QueryGenVars};
use crate::scene::{AgentPose, Scene};
use autodiff::{Gradients, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("scene has {agents} agent poses but {expected} were supplied")]
    PoseCount { agents: usize, expected: usize },
}

fn linear_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let dist = Normal::new(0.0f32, 1.0 / (rows as f32).sqrt()).unwrap();
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    )
    .unwrap()
}

fn conv_init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize) -> Tensor {
    let fan_in = c_in * 9;
    let dist = Normal::new(0.0f32, 1.0 / (fan_in as f32).sqrt()).unwrap();
    Tensor::new(
        vec![c_out, c_in, 3, 3],
        (0..c_out * c_in * 9).map(|_| dist.sample(rng)).collect(),
    )
    .unwrap()
}

/// Pillar encoder parameters: shared point MLP, stem conv, stride-2
/// backbone convs, and one output conv per pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub point_w: Tensor,
    pub point_b: Tensor,
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    pub down: Vec<(Tensor, Tensor)>,
    pub out: Vec<(Tensor, Tensor)>,
}

impl EncoderParams {
    pub fn init(c_bev: usize, levels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderParams {
            point_w: linear_init(&mut rng, pillars::POINT_FEAT_DIM, c_bev),
            point_b: Tensor::zeros(&[c_bev]),
            stem_w: conv_init(&mut rng, c_bev, c_bev),
            stem_b: Tensor::zeros(&[c_bev]),
            down: (1..levels)
                .map(|_| (conv_init(&mut rng, c_bev, c_bev), Tensor::zeros(&[c_bev])))
                .collect(),
            out: (0..levels)
                .map(|_| (conv_init(&mut rng, c_bev, c_bev), Tensor::zeros(&[c_bev])))
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.point_w, &self.point_b, &self.stem_w, &self.stem_b];
        for (w, b) in self.down.iter().chain(&self.out) {
            v.push(w);
            v.push(b);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.point_w,
            &mut self.point_b,
            &mut self.stem_w,
            &mut self.stem_b,
        ];
        for (w, b) in self.down.iter_mut().chain(self.out.iter_mut()) {
            v.push(w);
            v.push(b);
        }
        v
    }

    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            point_w: tape.leaf(self.point_w.clone()),
            point_b: tape.leaf(self.point_b.clone()),
            stem_w: tape.leaf(self.stem_w.clone()),
            stem_b: tape.leaf(self.stem_b.clone()),
            down: self
                .down
                .iter()
                .map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())))
                .collect(),
            out: self
                .out
                .iter()
                .map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())))
                .collect(),
        }
    }

    pub fn grads(vars: &EncoderVars, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        let mut v = vec![
            grads.take(vars.point_w),
            grads.take(vars.point_b),
            grads.take(vars.stem_w),
            grads.take(vars.stem_b),
        ];
        for (w, b) in vars.down.iter().chain(&vars.out) {
            v.push(grads.take(*w));
            v.push(grads.take(*b));
        }
        v
    }
}

/// Detection head parameters: two small MLPs (classification, box).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub cls_w1: Tensor,
    pub cls_b1: Tensor,
    pub cls_w2: Tensor,
    pub cls_b2: Tensor,
    pub box_w1: Tensor,
    pub box_b1: Tensor,
    pub box_w2: Tensor,
    pub box_b2: Tensor,
}

impl HeadParams {
    pub fn init(c_q: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HeadParams {
            cls_w1: linear_init(&mut rng, c_q, c_q),
            cls_b1: Tensor::zeros(&[c_q]),
            cls_w2: linear_init(&mut rng, c_q, 1),
            // low objectness prior so early training is not swamped by
            // confident background
            cls_b2: Tensor::new(vec![1], vec![-2.0]).unwrap(),
            box_w1: linear_init(&mut rng, c_q, c_q),
            box_b1: Tensor::zeros(&[c_q]),
            // zero box output: decoded boxes start at the reference points
            box_w2: Tensor::zeros(&[c_q, BOX_RAW_DIM]),
            box_b2: Tensor::zeros(&[BOX_RAW_DIM]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.cls_w1, &self.cls_b1, &self.cls_w2, &self.cls_b2,
            &self.box_w1, &self.box_b1, &self.box_w2, &self.box_b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.cls_w1, &mut self.cls_b1, &mut self.cls_w2, &mut self.cls_b2,
            &mut self.box_w1, &mut self.box_b1, &mut self.box_w2, &mut self.box_b2,
        ]
    }

    pub fn register(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            cls_w1: tape.leaf(self.cls_w1.clone()),
            cls_b1: tape.leaf(self.cls_b1.clone()),
            cls_w2: tape.leaf(self.cls_w2.clone()),
            cls_b2: tape.leaf(self.cls_b2.clone()),
            box_w1: tape.leaf(self.box_w1.clone()),
            box_b1: tape.leaf(self.box_b1.clone()),
            box_w2: tape.leaf(self.box_w2.clone()),
            box_b2: tape.leaf(self.box_b2.clone()),
        }
    }

    pub fn grads(vars: &HeadVars, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        [
            vars.cls_w1, vars.cls_b1, vars.cls_w2, vars.cls_b2,
            vars.box_w1, vars.box_b1, vars.box_w2, vars.box_b2,
        ]
        .iter()
        .map(|&v| grads.take(v))
        .collect()
    }
}

/// The whole model: encoder, query generator, aggregation, head, plus the
/// shape configuration it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub model: ModelConfig,
    pub encoder: EncoderParams,
    pub querygen: QueryGenParams,
    pub oqa: OqaParams,
    pub head: HeadParams,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub querygen: QueryGenVars,
    pub oqa: OqaVars,
    pub head: HeadVars,
}

const CKPT_MAGIC: [u8; 4] = *b"CKPT";
const CKPT_VERSION: u16 = 1;

impl ModelParams {
    pub fn init(model: &ModelConfig, seed: u64) -> Self {
        let spec = model.query_spec();
        ModelParams {
            model: model.clone(),
            encoder: EncoderParams::init(model.c_bev, model.levels, seed ^ 0x51),
            querygen: QueryGenParams::init(&spec, seed ^ 0x52),
            oqa: OqaParams::init(model.c_q, seed ^ 0x53),
            head: HeadParams::init(model.c_q, seed ^ 0x54),
        }
    }

    pub fn spec(&self) -> QueryGenSpec {
        self.model.query_spec()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.tensors();
        v.extend(self.querygen.tensors());
        v.extend(self.oqa.tensors());
        v.extend(self.head.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.querygen.tensors_mut());
        v.extend(self.oqa.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            encoder: self.encoder.register(tape),
            querygen: self.querygen.register(tape),
            oqa: self.oqa.register(tape),
            head: self.head.register(tape),
        }
    }

    /// Gradients in the same order as `tensors()`.
    pub fn grads(vars: &ModelVars, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        let mut v = EncoderParams::grads(&vars.encoder, grads);
        v.extend(QueryGenParams::grads(&vars.querygen, grads));
        v.extend(OqaParams::grads(&vars.oqa, grads));
        v.extend(HeadParams::grads(&vars.head, grads));
        v
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.model)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        let tensors = self.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], ModelError> {
            if *pos + n > bytes.len() {
                return Err(ModelError::Checkpoint("truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic: [u8; 4] = take(&mut pos, 4)?.try_into().unwrap();
        if magic != CKPT_MAGIC {
            return Err(ModelError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "version {version}, expected {CKPT_VERSION}"
            )));
        }
        let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let model: ModelConfig = serde_json::from_slice(take(&mut pos, cfg_len)?)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut params = ModelParams::init(&model, 0);
        {
            let mut slots = params.tensors_mut();
            if slots.len() != count {
                return Err(ModelError::Checkpoint(format!(
                    "{count} tensors stored, model has {}",
                    slots.len()
                )));
            }
            for slot in slots.iter_mut() {
                let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(
                        u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize,
                    );
                }
                if shape != slot.shape() {
                    return Err(ModelError::Checkpoint(format!(
                        "tensor shape {shape:?} does not match model shape {:?}",
                        slot.shape()
                    )));
                }
                let n: usize = shape.iter().product();
                let raw = take(&mut pos, n * 4)?;
                let data: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                **slot = Tensor::new(shape, data)?;
            }
        }
        if pos != bytes.len() {
            return Err(ModelError::Checkpoint("trailing bytes".into()));
        }
        Ok(params)
    }
}

/// Evaluation regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Ego sensor only; nothing transmitted.
    NoFusion,
    /// Each agent detects alone; detections merged in the ego frame by
    /// rotated NMS.
    LateFusion,
    /// Full query sharing with similarity matching and aggregation.
    Coop,
    /// Ablation: query sharing with matching disabled (every foreign
    /// query joins every graph).
    CoopNoSqm,
}

impl std::str::FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "no_fusion" => Ok(EvalMode::NoFusion),
            "late_fusion" => Ok(EvalMode::LateFusion),
            "coop" => Ok(EvalMode::Coop),
            "coop_no_sqm" => Ok(EvalMode::CoopNoSqm),
            other => Err(format!(
                "unknown mode '{other}' (expected no_fusion, late_fusion, coop, coop_no_sqm)"
            )),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::NoFusion => "no_fusion",
            EvalMode::LateFusion => "late_fusion",
            EvalMode::Coop => "coop",
            EvalMode::CoopNoSqm => "coop_no_sqm",
        })
    }
}

/// Per-agent backbone + query generation on a shared tape.
pub fn agent_queries(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &ModelVars,
    scene: &Scene,
    agent: usize,
    seed: u64,
) -> Result<QueryGenOutput, ModelError> {
    let spec = cfg.query_spec();
    let grid = pillars::pillarize(
        &scene.clouds[agent],
        &cfg.grid(),
        cfg.max_points_per_pillar,
        seed ^ (agent as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    let pyramid = pillars::encode_pyramid(tape, &vars.encoder, &grid)?;
    Ok(querygen::run_query_generator(tape, &spec, &vars.querygen, &pyramid)?)
}

/// Rotation+translation taking sender-frame points into the ego frame,
/// as used by the tape (row-vector convention): `p_ego = p · rt + t`.
fn frame_change(sender: &AgentPose, ego: &AgentPose) -> (Tensor, Tensor) {
    let a = sender.yaw - ego.yaw;
    let (s, c) = a.sin_cos();
    // transposed rotation for row vectors
    let rt = Tensor::new(
        vec![3, 3],
        vec![c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0],
    )
    .unwrap();
    let t = ego.from_world(sender.to_world([0.0, 0.0, 0.0]));
    (rt, Tensor::new(vec![3], t.to_vec()).unwrap())
}

/// Result of the query-sharing forward pass (any mode except late fusion).
pub struct FusedForward {
    /// Classification logits `[N_q, 1]` of the selected queries.
    pub logits: Var,
    /// Raw box outputs `[N_q, 8]` of the selected queries.
    pub box_raw: Var,
    /// Ego-frame reference points `[N_q, 3]` of the selected queries.
    pub refs: Var,
    /// The same reference points as plain arrays (off-tape decode).
    pub ref_points: Vec<[f32; 3]>,
    /// Who contributed each selected query.
    pub selected: Vec<PoolEntry>,
    /// Per-agent decoder outputs (index = agent id), for auxiliary losses.
    pub agent_outputs: Vec<QueryGenOutput>,
    /// Payload bytes of each admitted message this frame.
    pub payload_bytes: Vec<usize>,
    /// Member lists of every pool-center graph (diagnostics).
    pub graphs: Vec<Vec<usize>>,
    /// Pairwise pool similarity matrix (diagnostics).
    pub similarity: Vec<Vec<f32>>,
    /// Ego-frame reference points of the whole pool (diagnostics).
    pub pool_refs: Vec<[f32; 3]>,
    /// Pool entry bookkeeping: who owns each pool row.
    pub entries: Vec<PoolEntry>,
}

/// Run the cooperative pipeline for ego agent 0 on one scene.
///
/// `comm_poses[j]` is the pose agent `j` communicates (possibly noisy);
/// entry 0 is ignored — the ego uses its own true pose. `share` disables
/// all communication (the no-fusion regime); `use_sqm` toggles similarity
/// matching; `budget` caps admitted payload bytes per frame.
#[allow(clippy::too_many_arguments)]
pub fn forward_fused(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &ModelVars,
    scene: &Scene,
    comm_poses: &[AgentPose],
    share: bool,
    use_sqm: bool,
    budget: Option<u64>,
    seed: u64,
) -> Result<FusedForward, ModelError> {
    let n_agents = scene.agents.len();
    if comm_poses.len() != n_agents {
        return Err(ModelError::PoseCount { agents: n_agents, expected: comm_poses.len() });
    }
    let spec = cfg.query_spec();
    let ego_pose = scene.agents[0];

    let mut agent_outputs = Vec::with_capacity(n_agents);
    for a in 0..n_agents {
        agent_outputs.push(agent_queries(tape, cfg, vars, scene, a, seed)?);
    }

    // budget admission over helper messages, senders in ascending order
    let mut admitted: Vec<usize> = Vec::new();
    let mut payload_bytes = Vec::new();
    if share && n_agents > 1 {
        let msgs: Vec<QueryMessage> = (1..n_agents)
            .map(|a| {
                QueryMessage::new(
                    a as u16,
                    cfg.c_q as u32,
                    comm_poses[a],
                    tape.value(agent_outputs[a].refs_m).data().to_vec(),
                    tape.value(agent_outputs[a].queries).data().to_vec(),
                )
            })
            .collect::<Result<_, _>>()?;
        let kept = match budget {
            Some(b) => enforce_budget(msgs, b as usize),
            None => msgs,
        };
        for m in &kept {
            admitted.push(m.sender as usize);
            payload_bytes.push(m.payload_bytes());
        }
    }

    // pool: ego queries first, then admitted helpers; refs in the ego frame
    let mut entries = Vec::new();
    let mut q_parts = Vec::new();
    let mut r_parts = Vec::new();
    for (owner, out) in std::iter::once((0usize, &agent_outputs[0]))
        .chain(admitted.iter().map(|&a| (a, &agent_outputs[a])))
    {
        for i in 0..cfg.n_q {
            entries.push(PoolEntry { owner, index: i });
        }
        q_parts.push(out.queries);
        if owner == 0 {
            r_parts.push(out.refs_m);
        } else {
            let (rt, t) = frame_change(&comm_poses[owner], &ego_pose);
            let rt = tape.constant(rt);
            let t = tape.constant(t);
            let r = tape.matmul(out.refs_m, rt)?;
            r_parts.push(tape.add_bias(r, t)?);
        }
    }
    let pool_q = tape.concat_rows(&q_parts)?;
    let pool_r = tape.concat_rows(&r_parts)?;

    // normalize ego-frame refs to [0,1] grid coordinates for the shared
    // positional embedding (received refs may land outside the ego range)
    let g = cfg.grid();
    let neg_low = tape.constant(Tensor::new(vec![3], vec![-g.x_min, -g.y_min, -g.z_min])?);
    let inv_span = tape.constant(Tensor::new(
        vec![3],
        vec![
            1.0 / (g.x_max - g.x_min),
            1.0 / (g.y_max - g.y_min),
            1.0 / (g.z_max - g.z_min),
        ],
    )?);
    let shifted = tape.add_bias(pool_r, neg_low)?;
    let norm = tape.mul_bias(shifted, inv_span)?;
    let norm = tape.clamp(norm, 0.0, 1.0);

    let pe = querygen::positional_embed(
        tape,
        &spec,
        vars.querygen.pe_w,
        vars.querygen.pe_b,
        norm,
    )?;
    let refined = fusion::refine(tape, pool_q, pe)?;

    let sim = fusion::similarity_matrix(tape.value(refined));
    let graphs = fusion::build_graphs(&sim, &entries, cfg.mu, use_sqm);
    let fused = fusion::aggregate(tape, cfg.heads, &vars.oqa, refined, &graphs)?;

    let (logits_all, box_all) = head::head_forward(tape, &vars.head, fused)?;

    // The head's offsets and heading are expressed in the frame whose
    // features produced the query; rotate helper-owned rows into the ego
    // frame (their reference points were already transformed above).
    let box_all = {
        let owners: Vec<usize> = std::iter::once(0usize).chain(admitted.iter().copied()).collect();
        let mut blocks = Vec::with_capacity(owners.len());
        for (b, &owner) in owners.iter().enumerate() {
            let rows: Vec<usize> = (b * cfg.n_q..(b + 1) * cfg.n_q).collect();
            let block = tape.select_rows(box_all, &rows)?;
            if owner == 0 {
                blocks.push(block);
                continue;
            }
            let d = comm_poses[owner].yaw - ego_pose.yaw;
            let (s2, c2) = (2.0 * d).sin_cos();
            let offsets = tape.slice_cols(block, 0..3)?;
            // same row-vector rotation the reference points went through
            let (rot3, _) = frame_change(&comm_poses[owner], &ego_pose);
            let rot3 = tape.constant(rot3);
            let offsets = tape.matmul(offsets, rot3)?;
            let sizes = tape.slice_cols(block, 3..6)?;
            // heading pair is (sin 2y, cos 2y - 1); undo the bias, rotate the
            // double angle by 2d, re-apply the bias
            let pair = tape.slice_cols(block, 6..8)?;
            let bias = tape.constant(Tensor::new(vec![2], vec![0.0, 1.0])?);
            let pair = tape.add_bias(pair, bias)?;
            let rot2 = tape.constant(Tensor::new(vec![2, 2], vec![c2, -s2, s2, c2])?);
            let pair = tape.matmul(pair, rot2)?;
            let unbias = tape.constant(Tensor::new(vec![2], vec![0.0, -1.0])?);
            let pair = tape.add_bias(pair, unbias)?;
            blocks.push(tape.concat_cols(&[offsets, sizes, pair])?);
        }
        tape.concat_rows(&blocks)?
    };

    let conf: Vec<f32> = tape
        .value(logits_all)
        .data()
        .iter()
        .map(|&l| 1.0 / (1.0 + (-l).exp()))
        .collect();
    let order = fusion::select_top(&conf, &entries, cfg.n_q);

    let logits = tape.select_rows(logits_all, &order)?;
    let box_raw = tape.select_rows(box_all, &order)?;
    let refs = tape.select_rows(pool_r, &order)?;
    let ref_vals = tape.value(refs).data().to_vec();
    let ref_points: Vec<[f32; 3]> = order
        .iter()
        .enumerate()
        .map(|(k, _)| [ref_vals[k * 3], ref_vals[k * 3 + 1], ref_vals[k * 3 + 2]])
        .collect();
    let selected = order.iter().map(|&i| entries[i]).collect();
    let pool_ref_vals = tape.value(pool_r).data().to_vec();
    let pool_refs = pool_ref_vals
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();

    Ok(FusedForward {
        logits,
        box_raw,
        refs,
        ref_points,
        selected,
        agent_outputs,
        payload_bytes,
        graphs,
        similarity: sim,
        pool_refs,
        entries,
    })
}

/// Training objective for one scene: the fused ego loss plus weighted
/// per-agent auxiliary losses against each agent's own visible objects.
pub struct SceneLoss {
    pub total: Var,
    pub fused: f32,
    pub aux: f32,
}

#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &ModelVars,
    scene: &Scene,
    comm_poses: &[AgentPose],
    weights: &LossWeights,
    aux_weight: f32,
    min_points: usize,
    seed: u64,
) -> Result<SceneLoss, ModelError> {
    let fwd = forward_fused(
        tape, cfg, vars, scene, comm_poses, true, true, None, seed,
    )?;
    let ego_gt = scene.boxes_in_frame(0);
    let (fused_loss, _) =
        head::set_loss(tape, fwd.logits, fwd.box_raw, fwd.refs, &ego_gt, weights)?;

    let mut total = fused_loss;
    let mut aux_sum = 0.0f32;
    if aux_weight > 0.0 {
        let n_agents = scene.agents.len();
        let mut aux_terms = Vec::new();
        for (a, out) in fwd.agent_outputs.iter().enumerate() {
            let visible: Vec<_> = scene
                .boxes_in_frame(a)
                .into_iter()
                .enumerate()
                .filter(|(i, _)| scene.points_on_object(a, *i) >= min_points)
                .map(|(_, b)| b)
                .collect();
            let (logits, box_raw) = head::head_forward(tape, &vars.head, out.queries)?;
            let (l, _) = head::set_loss(tape, logits, box_raw, out.refs_m, &visible, weights)?;
            aux_terms.push(l);
        }
        let mut aux = aux_terms[0];
        for &t in &aux_terms[1..] {
            aux = tape.add(aux, t)?;
        }
        let aux = tape.scale(aux, aux_weight / n_agents as f32);
        aux_sum = tape.value(aux).item();
        total = tape.add(total, aux)?;
    }

    Ok(SceneLoss {
        total,
        fused: tape.value(fused_loss).item(),
        aux: aux_sum,
    })
}

/// Greedy rotated non-maximum suppression in the BEV plane.
pub fn rotated_nms(mut dets: Vec<ScoredDetection>, iou_thresh: f32) -> Vec<ScoredDetection> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut kept: Vec<ScoredDetection> = Vec::new();
    for d in dets {
        if kept
            .iter()
            .all(|k| rotated_iou_bev(&k.bbox, &d.bbox) < iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

/// Ego-frame detections for one scene plus the bytes it cost.
pub struct SceneEval {
    pub detections: Vec<ScoredDetection>,
    pub payload_bytes: Vec<usize>,
}

/// Bytes a late-fusion agent transmits per detection: center, size, yaw,
/// score as f32 (no query features travel in this regime).
pub const DETECTION_WIRE_BYTES: usize = 8 * 4;

#[allow(clippy::too_many_arguments)]
pub fn eval_scene(
    params: &ModelParams,
    scene: &Scene,
    comm_poses: &[AgentPose],
    mode: EvalMode,
    budget: Option<u64>,
    score_floor: f32,
    nms_iou: f32,
    seed: u64,
) -> Result<SceneEval, ModelError> {
    let cfg = &params.model;
    match mode {
        EvalMode::NoFusion | EvalMode::Coop | EvalMode::CoopNoSqm => {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let (share, use_sqm) = match mode {
                EvalMode::NoFusion => (false, true),
                EvalMode::Coop => (true, true),
                EvalMode::CoopNoSqm => (true, false),
                EvalMode::LateFusion => unreachable!(),
            };
            let fwd = forward_fused(
                &mut tape, cfg, &vars, scene, comm_poses, share, use_sqm, budget, seed,
            )?;
            let dets = head::decode_detections(
                tape.value(fwd.logits),
                tape.value(fwd.box_raw),
                &fwd.ref_points,
            );
            Ok(SceneEval {
                detections: dets
                    .into_iter()
                    .filter(|d| d.score >= score_floor)
                    .map(|d| d.to_scored())
                    .collect(),
                payload_bytes: fwd.payload_bytes,
            })
        }
        EvalMode::LateFusion => {
            let ego_pose = scene.agents[0];
            let mut merged = Vec::new();
            let mut payload_bytes = Vec::new();
            for a in 0..scene.agents.len() {
                let mut tape = Tape::new();
                let vars = params.register(&mut tape);
                let out = agent_queries(&mut tape, cfg, &vars, scene, a, seed)?;
                let refs = querygen::reference_points_of(&tape, &out);
                let (logits, box_raw) = head::head_forward(&mut tape, &vars.head, out.queries)?;
                let dets: Vec<ScoredDetection> = head::decode_detections(
                    tape.value(logits),
                    tape.value(box_raw),
                    &refs,
                )
                .into_iter()
                .filter(|d| d.score >= score_floor)
                .map(|d| d.to_scored())
                .collect();
                if a == 0 {
                    merged.extend(dets);
                } else {
                    payload_bytes.push(dets.len() * DETECTION_WIRE_BYTES);
                    // helper boxes arrive in the frame its (noisy) pose claims
                    merged.extend(dets.into_iter().map(|d| ScoredDetection {
                        bbox: d.bbox.transformed(&comm_poses[a], &ego_pose),
                        score: d.score,
                    }));
                }
            }
            Ok(SceneEval {
                detections: rotated_nms(merged, nms_iou),
                payload_bytes,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            n_q: 8,
            c_q: 16,
            c_bev: 8,
            heads: 2,
            points: 2,
            levels: 2,
            depth: 1,
            pe_freqs: 2,
            refine_refs: true,
            mu: 0.3,
            x_min: -8.0,
            x_max: 8.0,
            y_min: -8.0,
            y_max: 8.0,
            z_min: -0.5,
            z_max: 2.5,
            pillar: 0.5,
            max_points_per_pillar: 8,
        }
    }

    fn tiny_scene(num_agents: usize, occluded: usize, seed: u64) -> Scene {
        let spec = SceneSpec {
            num_agents,
            num_objects: 3,
            x_half: 10.0,
            y_half: 10.0,
            z_min: -0.5,
            z_max: 2.5,
            occluded_objects: occluded,
            min_points: 4,
            rays_per_agent: 360,
            z_samples_per_hit: 3,
            sensor_sigma: 0.01,
            retry_limit: 64,
        };
        generate_scene(&spec, seed).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let params = ModelParams::init(&tiny_model(), 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        params.save(&path).unwrap();
        let back = ModelParams::load(&path).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let params = ModelParams::init(&tiny_model(), 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        params.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ModelParams::load(&path), Err(ModelError::Checkpoint(_))));

        params.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 0xFF; // version
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ModelParams::load(&path), Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn frame_change_matches_pose_composition() {
        let sender = AgentPose::new(2.0, -1.0, 0.3, 0.7);
        let ego = AgentPose::new(-0.5, 1.5, 0.0, -0.4);
        let (rt, t) = frame_change(&sender, &ego);
        let p = [1.2f32, -0.8, 0.5];
        let expect = ego.from_world(sender.to_world(p));
        let r = rt.data();
        let tb = t.data();
        let got = [
            p[0] * r[0] + p[1] * r[3] + p[2] * r[6] + tb[0],
            p[0] * r[1] + p[1] * r[4] + p[2] * r[7] + tb[1],
            p[0] * r[2] + p[1] * r[5] + p[2] * r[8] + tb[2],
        ];
        for k in 0..3 {
            assert!((got[k] - expect[k]).abs() < 1e-5, "{got:?} vs {expect:?}");
        }
    }

    fn detections_of(
        params: &ModelParams,
        scene: &Scene,
        mode: EvalMode,
        budget: Option<u64>,
    ) -> Vec<ScoredDetection> {
        let poses = scene.agents.clone();
        eval_scene(params, scene, &poses, mode, budget, 0.0, 0.5, 3)
            .unwrap()
            .detections
    }

    fn same_detections(a: &[ScoredDetection], b: &[ScoredDetection]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.score, y.score);
            assert_eq!(x.bbox, y.bbox);
        }
    }

    #[test]
    fn single_agent_coop_equals_no_fusion_exactly() {
        let params = ModelParams::init(&tiny_model(), 3);
        let scene = tiny_scene(1, 0, 21);
        let coop = detections_of(&params, &scene, EvalMode::Coop, None);
        let solo = detections_of(&params, &scene, EvalMode::NoFusion, None);
        same_detections(&coop, &solo);
    }

    #[test]
    fn zero_budget_equals_no_fusion_exactly() {
        let params = ModelParams::init(&tiny_model(), 3);
        let scene = tiny_scene(2, 1, 22);
        let coop = detections_of(&params, &scene, EvalMode::Coop, Some(0));
        let solo = detections_of(&params, &scene, EvalMode::NoFusion, None);
        same_detections(&coop, &solo);
        // and unlimited budget admits both helper payloads
        let poses = scene.agents.clone();
        let full = eval_scene(&params, &scene, &poses, EvalMode::Coop, None, 0.0, 0.5, 3).unwrap();
        assert_eq!(full.payload_bytes.len(), 1);
        assert_eq!(full.payload_bytes[0], 8 * 16 * 4);
    }

    #[test]
    fn mu_above_range_bound_empties_all_graphs() {
        let cfg = ModelConfig { mu: 0.7312, ..tiny_model() };
        let params = ModelParams::init(&cfg, 3);
        let scene = tiny_scene(2, 1, 23);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let poses = scene.agents.clone();
        let fwd = forward_fused(
            &mut tape, &cfg, &vars, &scene, &poses, true, true, None, 3,
        )
        .unwrap();
        assert!(fwd.graphs.iter().all(|g| g.is_empty()));
    }

    #[test]
    fn training_loss_is_finite_and_produces_gradients() {
        let cfg = tiny_model();
        let params = ModelParams::init(&cfg, 5);
        let scene = tiny_scene(2, 1, 24);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let poses = scene.agents.clone();
        let loss = training_loss(
            &mut tape,
            &cfg,
            &vars,
            &scene,
            &poses,
            &LossWeights::default(),
            1.0,
            4,
            9,
        )
        .unwrap();
        assert!(loss.fused.is_finite() && loss.fused > 0.0);
        assert!(loss.aux.is_finite());
        let mut grads = tape.backward(loss.total).unwrap();
        let gs = ModelParams::grads(&vars, &mut grads);
        assert_eq!(gs.len(), params.tensors().len());
        let with_grad = gs.iter().filter(|g| g.is_some()).count();
        assert!(
            with_grad * 10 >= gs.len() * 8,
            "only {with_grad}/{} parameters received gradients",
            gs.len()
        );
        for (g, t) in gs.iter().zip(params.tensors()) {
            if let Some(g) = g {
                assert_eq!(g.shape(), t.shape());
                assert!(g.data().iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn eval_modes_are_deterministic() {
        let params = ModelParams::init(&tiny_model(), 3);
        let scene = tiny_scene(2, 1, 25);
        for mode in [EvalMode::Coop, EvalMode::NoFusion, EvalMode::LateFusion] {
            let a = detections_of(&params, &scene, mode, None);
            let b = detections_of(&params, &scene, mode, None);
            same_detections(&a, &b);
        }
    }

    #[test]
    fn nms_drops_duplicates_keeps_distinct() {
        let mk = |x: f32, score: f32| ScoredDetection {
            bbox: crate::scene::GroundTruthBox {
                center: [x, 0.0, 0.0],
                size: [4.0, 2.0, 1.5],
                yaw: 0.0,
                object_id: 0,
            },
            score,
        };
        let kept = rotated_nms(vec![mk(0.0, 0.9), mk(0.1, 0.5), mk(10.0, 0.7)], 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].score, 0.7);
    }

    #[test]
    fn mode_strings_round_trip() {
        for mode in [
            EvalMode::NoFusion,
            EvalMode::LateFusion,
            EvalMode::Coop,
            EvalMode::CoopNoSqm,
        ] {
            assert_eq!(mode.to_string().parse::<EvalMode>().unwrap(), mode);
        }
        assert!("bogus".parse::<EvalMode>().is_err());
    }
}
