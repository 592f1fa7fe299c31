//! Experiment runner: training with a warm-up/cosine schedule, suite
//! evaluation with pooled average precision, and parameter sweeps. All
//! randomness is split deterministically from the config seed.

use crate::comms::CommReport;
use crate::config::{ConfigError, ExperimentConfig};
use crate::eval::{rotated_iou_bev, ScoredDetection};
use crate::head::LossWeights;
use crate::model::{eval_scene, training_loss, EvalMode, ModelError, ModelParams};
use crate::scene::{generate_scene, sample_pose_noise, AgentPose, GroundTruthBox, Scene, SceneError};
use autodiff::{AdamW, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scene synthesis: {0}")]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl RunError {
    /// Process exit code contract: 0 success, 2 config error, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Scene(_) => 2,
            RunError::Numerical(_) => 3,
            _ => 1,
        }
    }
}

/// Deterministic seed split: independent streams per purpose and index.
pub fn split_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut h = root ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    h = (h ^ index).wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^ (h >> 33)
}

/// Communicated poses for one scene: the ego reports its true pose, the
/// helpers theirs with the configured noise applied.
pub fn communicated_poses(cfg: &ExperimentConfig, scene: &Scene, scene_seed: u64) -> Vec<AgentPose> {
    scene
        .agents
        .iter()
        .enumerate()
        .map(|(a, pose)| {
            if a == 0 {
                *pose
            } else {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(split_seed(scene_seed, "pose-noise", a as u64));
                sample_pose_noise(pose, &cfg.scene.pose_noise, &mut rng)
            }
        })
        .collect()
}

fn make_scenes(cfg: &ExperimentConfig, tag: &str, count: usize) -> Result<Vec<(Scene, u64)>, RunError> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = split_seed(cfg.seed, tag, i as u64);
            Ok((generate_scene(&cfg.scene.spec, seed)?, seed))
        })
        .collect()
}

/// Learning rate at `epoch`: linear warm-up, then cosine annealing to zero.
pub fn lr_at(base: f32, epoch: usize, epochs: usize, warmup: usize) -> f32 {
    if warmup > 0 && epoch < warmup {
        return base * (epoch + 1) as f32 / warmup as f32;
    }
    let span = (epochs - warmup).max(1) as f32;
    let t = (epoch - warmup) as f32 / span;
    base * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f32,
    pub total: f32,
    pub fused: f32,
    pub aux: f32,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub checkpoint: PathBuf,
    pub curve: Vec<LossRecord>,
}

const TRAIN_CHUNK: usize = 2;

pub fn run_train(cfg: &ExperimentConfig, run_dir: &Path) -> Result<TrainOutcome, RunError> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml_string())?;

    let scenes = make_scenes(cfg, "train", cfg.training.scenes)?;
    let mut params = ModelParams::init(&cfg.model, cfg.seed);
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = AdamW::new(&shape_refs, cfg.training.lr, cfg.training.weight_decay);
    let weights = LossWeights {
        lambda_cls: cfg.training.lambda_cls,
        lambda_box: cfg.training.lambda_box,
    };

    let mut curve = Vec::new();
    for epoch in 0..cfg.training.epochs {
        opt.lr = lr_at(cfg.training.lr, epoch, cfg.training.epochs, cfg.training.warmup_epochs);
        for (step, chunk) in scenes.chunks(TRAIN_CHUNK).enumerate() {
            let results: Vec<Result<(f32, f32, f32, Vec<Option<Tensor>>), RunError>> = chunk
                .par_iter()
                .map(|(scene, scene_seed)| {
                    let mut tape = Tape::new();
                    let vars = params.register(&mut tape);
                    let poses = communicated_poses(cfg, scene, *scene_seed);
                    let loss = training_loss(
                        &mut tape,
                        &cfg.model,
                        &vars,
                        scene,
                        &poses,
                        &weights,
                        cfg.training.aux_weight,
                        cfg.scene.spec.min_points,
                        *scene_seed,
                    )?;
                    let total = tape.value(loss.total).item();
                    if !total.is_finite() {
                        return Err(RunError::Numerical(format!(
                            "non-finite loss {total} at epoch {epoch} step {step} \
                             (fused {}, aux {}, scene seed {scene_seed})",
                            loss.fused, loss.aux
                        )));
                    }
                    let mut grads = tape
                        .backward(loss.total)
                        .map_err(|e| RunError::Numerical(e.to_string()))?;
                    Ok((total, loss.fused, loss.aux, ModelParams::grads(&vars, &mut grads)))
                })
                .collect();

            let mut summed: Vec<Option<Tensor>> = vec![None; shapes.len()];
            let mut totals = (0.0f32, 0.0f32, 0.0f32);
            let n = chunk.len() as f32;
            for r in results {
                let (total, fused, aux, grads) = r?;
                totals.0 += total / n;
                totals.1 += fused / n;
                totals.2 += aux / n;
                for (slot, g) in summed.iter_mut().zip(grads) {
                    match (slot.as_mut(), g) {
                        (Some(acc), Some(g)) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b / n;
                            }
                        }
                        (None, Some(mut g)) => {
                            for v in g.data_mut() {
                                *v /= n;
                            }
                            *slot = Some(g);
                        }
                        _ => {}
                    }
                }
            }

            let mut flat: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
            opt.step(&mut flat, &summed);
            for (slot, t) in params.tensors_mut().into_iter().zip(flat) {
                *slot = t;
            }
            curve.push(LossRecord {
                epoch,
                step,
                lr: opt.lr,
                total: totals.0,
                fused: totals.1,
                aux: totals.2,
            });
        }
    }

    let mut csv = String::from("epoch,step,lr,total,fused,aux\n");
    for r in &curve {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.step, r.lr, r.total, r.fused, r.aux
        ));
    }
    std::fs::write(run_dir.join("loss.csv"), csv)?;
    let checkpoint = run_dir.join("model.ckpt");
    params.save(&checkpoint)?;
    Ok(TrainOutcome { params, checkpoint, curve })
}

/// Average precision pooled over many scenes: detections are matched to
/// ground truth within their own scene, then ranked globally by score.
pub fn pooled_ap(
    per_scene: &[(Vec<ScoredDetection>, Vec<GroundTruthBox>)],
    iou_thresh: f32,
) -> f64 {
    let total_gt: usize = per_scene.iter().map(|(_, g)| g.len()).sum();
    let total_det: usize = per_scene.iter().map(|(d, _)| d.len()).sum();
    if total_gt == 0 {
        return if total_det == 0 { 1.0 } else { 0.0 };
    }
    // (score, is_true_positive) with greedy per-scene matching
    let mut marks: Vec<(f32, bool)> = Vec::with_capacity(total_det);
    for (dets, gts) in per_scene {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&i, &j| {
            dets[j].score
                .partial_cmp(&dets[i].score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        let mut claimed = vec![false; gts.len()];
        for &i in &order {
            let best = (0..gts.len())
                .filter(|&g| !claimed[g])
                .map(|g| (g, rotated_iou_bev(&dets[i].bbox, &gts[g])))
                .filter(|&(_, iou)| iou >= iou_thresh)
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            if let Some((g, _)) = best {
                claimed[g] = true;
                marks.push((dets[i].score, true));
            } else {
                marks.push((dets[i].score, false));
            }
        }
    }
    marks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    // all-point interpolated AP
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(marks.len());
    for (i, &(_, is_tp)) in marks.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..curve.len() {
        let (r, _) = curve[i];
        if r > prev_recall {
            let pmax = curve[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_recall) * pmax;
            prev_recall = r;
        }
    }
    ap
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub scenes: usize,
    /// `(iou_threshold, average_precision)` pairs.
    pub ap: Vec<(f32, f64)>,
    pub total_bytes: usize,
    pub mean_bytes: f64,
    pub mean_log2_bytes: Option<f64>,
}

impl EvalReport {
    pub fn ap_at(&self, thresh: f32) -> Option<f64> {
        self.ap
            .iter()
            .find(|(t, _)| (t - thresh).abs() < 1e-6)
            .map(|&(_, a)| a)
    }
}

/// Evaluate a model over a freshly generated suite of scenes.
pub fn evaluate(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    mode: EvalMode,
) -> Result<EvalReport, RunError> {
    if !params.model.shape_eq(&cfg.model) {
        return Err(RunError::Config(ConfigError::Invalid(
            "checkpoint model shape does not match config".into(),
        )));
    }
    let scenes = make_scenes(cfg, "eval", cfg.eval.scenes)?;
    let results: Vec<Result<(Vec<ScoredDetection>, Vec<GroundTruthBox>, Vec<usize>), RunError>> =
        scenes
            .par_iter()
            .map(|(scene, scene_seed)| {
                let poses = communicated_poses(cfg, scene, *scene_seed);
                let out = eval_scene(
                    params,
                    scene,
                    &poses,
                    mode,
                    cfg.comms.budget_bytes,
                    cfg.eval.score_floor,
                    0.5,
                    *scene_seed,
                )?;
                Ok((out.detections, scene.boxes_in_frame(0), out.payload_bytes))
            })
            .collect();

    let mut per_scene = Vec::with_capacity(results.len());
    let mut comm = CommReport::default();
    for r in results {
        let (dets, gts, bytes) = r?;
        comm.push_frame(&bytes);
        per_scene.push((dets, gts));
    }
    let ap = cfg
        .eval
        .iou_thresholds
        .iter()
        .map(|&t| (t, pooled_ap(&per_scene, t)))
        .collect();
    Ok(EvalReport {
        mode: mode.to_string(),
        scenes: cfg.eval.scenes,
        ap,
        total_bytes: comm.total_bytes(),
        mean_bytes: comm.mean_bytes(),
        mean_log2_bytes: comm.mean_log2(),
    })
}

pub fn run_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    mode: EvalMode,
    run_dir: &Path,
) -> Result<EvalReport, RunError> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let mut params = ModelParams::load(checkpoint)?;
    params.model.mu = cfg.model.mu;
    let report = evaluate(cfg, &params, mode)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| RunError::Numerical(e.to_string()))?;
    std::fs::write(run_dir.join(format!("eval_{mode}.json")), json)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    QueryCount,
    Mu,
    Noise,
    Budget,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "n_q" => Ok(SweepAxis::QueryCount),
            "mu" => Ok(SweepAxis::Mu),
            "noise" => Ok(SweepAxis::Noise),
            "budget" => Ok(SweepAxis::Budget),
            other => Err(format!("unknown sweep axis '{other}' (n_q, mu, noise, budget)")),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::QueryCount => "n_q",
            SweepAxis::Mu => "mu",
            SweepAxis::Noise => "noise",
            SweepAxis::Budget => "budget",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: f64,
    pub ap50: f64,
    pub mean_bytes: f64,
}

/// Sweep one axis. Query count retrains per setting (the query bank is a
/// learned parameter); the other axes reuse the trained checkpoint.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    axis: SweepAxis,
    run_dir: &Path,
) -> Result<Vec<SweepRow>, RunError> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let mut rows = Vec::new();
    match axis {
        SweepAxis::QueryCount => {
            let base = cfg.model.n_q;
            for factor in [1usize, 2, 4] {
                let n_q = (base / factor).max(cfg.scene.spec.num_objects);
                let mut c = cfg.clone();
                c.model.n_q = n_q;
                let sub = run_dir.join(format!("nq_{n_q}"));
                let trained = run_train(&c, &sub)?;
                let report = evaluate(&c, &trained.params, EvalMode::Coop)?;
                rows.push(SweepRow {
                    setting: n_q as f64,
                    ap50: report.ap_at(0.5).unwrap_or(0.0),
                    mean_bytes: report.mean_bytes,
                });
            }
        }
        SweepAxis::Mu => {
            let mut params = ModelParams::load(checkpoint)?;
            for &mu in &[0.0f32, 0.3, 0.5, 0.7, 1.0] {
                let mut c = cfg.clone();
                c.model.mu = mu;
                params.model.mu = mu;
                let report = evaluate(&c, &params, EvalMode::Coop)?;
                rows.push(SweepRow {
                    setting: mu as f64,
                    ap50: report.ap_at(0.5).unwrap_or(0.0),
                    mean_bytes: report.mean_bytes,
                });
            }
        }
        SweepAxis::Noise => {
            let params = ModelParams::load(checkpoint)?;
            for &sigma in &[0.0f32, 0.1, 0.2, 0.3, 0.4, 0.5] {
                let mut c = cfg.clone();
                c.scene.pose_noise.sigma_xyz = sigma;
                let report = evaluate(&c, &params, EvalMode::Coop)?;
                rows.push(SweepRow {
                    setting: sigma as f64,
                    ap50: report.ap_at(0.5).unwrap_or(0.0),
                    mean_bytes: report.mean_bytes,
                });
            }
        }
        SweepAxis::Budget => {
            let params = ModelParams::load(checkpoint)?;
            let payload = (cfg.model.n_q * cfg.model.c_q * 4) as u64;
            for budget in [0, payload, 2 * payload] {
                let mut c = cfg.clone();
                c.comms.budget_bytes = Some(budget);
                let report = evaluate(&c, &params, EvalMode::Coop)?;
                rows.push(SweepRow {
                    setting: budget as f64,
                    ap50: report.ap_at(0.5).unwrap_or(0.0),
                    mean_bytes: report.mean_bytes,
                });
            }
        }
    }
    let mut csv = String::from("setting,ap50,mean_bytes\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.setting, r.ap50, r.mean_bytes));
    }
    std::fs::write(run_dir.join(format!("sweep_{axis}.csv")), csv)?;
    Ok(rows)
}

/// Summarize every report found under a run directory; AP numbers are
/// always shown next to the bytes they cost.
pub fn run_report(run_dir: &Path, out: &mut dyn std::io::Write) -> Result<(), RunError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(run_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .collect();
    entries.sort();
    let mut found = false;
    for path in entries {
        let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        if name.starts_with("eval_") && name.ends_with(".json") {
            let report: EvalReport =
                serde_json::from_str(&std::fs::read_to_string(&path)?)
                    .map_err(|e| RunError::Numerical(e.to_string()))?;
            found = true;
            writeln!(out, "[{}] {} scenes", report.mode, report.scenes)?;
            for (t, ap) in &report.ap {
                writeln!(out, "  AP@{t:.1} = {ap:.4}  ({:.1} bytes/frame)", report.mean_bytes)?;
            }
            match report.mean_log2_bytes {
                Some(l) => writeln!(out, "  comm: {} B total, log2 mean {l:.3}", report.total_bytes)?,
                None => writeln!(out, "  comm: nothing transmitted")?,
            }
        } else if name.starts_with("sweep_") && name.ends_with(".csv") {
            found = true;
            writeln!(out, "[{}]", name.trim_end_matches(".csv"))?;
            write!(out, "{}", std::fs::read_to_string(&path)?)?;
        } else if name == "loss.csv" {
            found = true;
            let text = std::fs::read_to_string(&path)?;
            let last = text.lines().last().unwrap_or("");
            writeln!(out, "[training] {} steps, last: {last}", text.lines().count().saturating_sub(1))?;
        }
    }
    if !found {
        writeln!(out, "no reports under {}", run_dir.display())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.scene.spec.num_agents = 2;
        cfg.scene.spec.num_objects = 3;
        cfg.scene.spec.occluded_objects = 1;
        cfg.scene.spec.rays_per_agent = 240;
        cfg.scene.spec.z_samples_per_hit = 2;
        cfg.model.n_q = 6;
        cfg.model.c_q = 16;
        cfg.model.c_bev = 8;
        cfg.model.heads = 2;
        cfg.model.points = 2;
        cfg.model.levels = 2;
        cfg.model.depth = 1;
        cfg.model.pillar = 0.9;
        cfg.training.epochs = 2;
        cfg.training.scenes = 4;
        cfg.training.warmup_epochs = 1;
        cfg.eval.scenes = 3;
        cfg
    }

    #[test]
    fn schedule_warms_up_then_anneals_to_zero() {
        let base = 1.0f32;
        assert!((lr_at(base, 0, 10, 2) - 0.5).abs() < 1e-6);
        assert!((lr_at(base, 1, 10, 2) - 1.0).abs() < 1e-6);
        assert!((lr_at(base, 2, 10, 2) - 1.0).abs() < 1e-6);
        let mut prev = f32::INFINITY;
        for e in 2..10 {
            let lr = lr_at(base, e, 10, 2);
            assert!(lr <= prev + 1e-6, "cosine phase must not increase");
            prev = lr;
        }
        assert!(lr_at(base, 9, 10, 2) < 0.04);
        // no warm-up requested
        assert!((lr_at(base, 0, 4, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn seed_split_is_deterministic_and_stream_separated() {
        assert_eq!(split_seed(7, "train", 3), split_seed(7, "train", 3));
        assert_ne!(split_seed(7, "train", 3), split_seed(7, "eval", 3));
        assert_ne!(split_seed(7, "train", 3), split_seed(7, "train", 4));
        assert_ne!(split_seed(7, "train", 3), split_seed(8, "train", 3));
    }

    fn perfect_det(gt: &GroundTruthBox, score: f32) -> ScoredDetection {
        ScoredDetection { bbox: *gt, score }
    }

    fn gt_at(x: f32, y: f32) -> GroundTruthBox {
        GroundTruthBox { center: [x, y, 0.8], size: [4.0, 2.0, 1.6], yaw: 0.3, object_id: 0 }
    }

    #[test]
    fn pooled_ap_perfect_and_empty_cases() {
        let scenes = vec![
            (vec![perfect_det(&gt_at(0.0, 0.0), 0.9)], vec![gt_at(0.0, 0.0)]),
            (vec![perfect_det(&gt_at(5.0, 1.0), 0.8)], vec![gt_at(5.0, 1.0)]),
        ];
        assert!((pooled_ap(&scenes, 0.5) - 1.0).abs() < 1e-9);
        assert_eq!(pooled_ap(&[], 0.5), 1.0);
        let only_fp = vec![(vec![perfect_det(&gt_at(0.0, 0.0), 0.9)], vec![])];
        assert_eq!(pooled_ap(&only_fp, 0.5), 0.0);
    }

    #[test]
    fn pooled_ap_does_not_match_across_scenes() {
        // detection in scene 0 sits exactly on scene 1's ground truth;
        // within its own scene it is a false positive
        let scenes = vec![
            (vec![perfect_det(&gt_at(5.0, 1.0), 0.9)], vec![gt_at(0.0, 0.0)]),
            (vec![], vec![gt_at(5.0, 1.0)]),
        ];
        assert_eq!(pooled_ap(&scenes, 0.5), 0.0);
    }

    #[test]
    fn pooled_ap_matches_hand_ranked_case() {
        // two scenes, three GT total; scores rank tp(0.9), fp(0.7), tp(0.6)
        let scenes = vec![
            (
                vec![perfect_det(&gt_at(0.0, 0.0), 0.9), perfect_det(&gt_at(20.0, 0.0), 0.7)],
                vec![gt_at(0.0, 0.0), gt_at(-8.0, 3.0)],
            ),
            (vec![perfect_det(&gt_at(5.0, 1.0), 0.6)], vec![gt_at(5.0, 1.0)]),
        ];
        // precision at recalls 1/3, 2/3: 1.0 then 2/3; AP = 1/3 + 1/3*2/3
        let expect = 1.0 / 3.0 + (1.0 / 3.0) * (2.0 / 3.0);
        assert!((pooled_ap(&scenes, 0.5) - expect).abs() < 1e-9);
    }

    #[test]
    fn training_runs_and_is_reproducible() {
        let cfg = tiny_cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = run_train(&cfg, dir_a.path()).unwrap();
        let b = run_train(&cfg, dir_b.path()).unwrap();
        assert!(!a.curve.is_empty());
        for (x, y) in a.curve.iter().zip(&b.curve) {
            assert_eq!(x.total, y.total, "identical seeds must give identical curves");
        }
        assert_eq!(a.params, b.params);
        assert!(a.checkpoint.exists());
        assert!(dir_a.path().join("loss.csv").exists());
    }

    #[test]
    fn zero_lr_freezes_the_loss_curve() {
        let mut cfg = tiny_cfg();
        cfg.training.lr = 0.0;
        cfg.training.epochs = 3;
        cfg.training.warmup_epochs = 0;
        let dir = tempfile::tempdir().unwrap();
        let out = run_train(&cfg, dir.path()).unwrap();
        let per_epoch = out.curve.len() / 3;
        for e in 1..3 {
            for s in 0..per_epoch {
                assert_eq!(
                    out.curve[s].total,
                    out.curve[e * per_epoch + s].total,
                    "frozen optimizer must repeat the epoch exactly"
                );
            }
        }
    }

    #[test]
    fn eval_writes_report_and_report_verb_reads_it() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let trained = run_train(&cfg, dir.path()).unwrap();
        let report = run_eval(&cfg, &trained.checkpoint, EvalMode::NoFusion, dir.path()).unwrap();
        assert_eq!(report.ap.len(), 3);
        assert_eq!(report.total_bytes, 0);
        assert!(report.mean_log2_bytes.is_none());
        let coop = run_eval(&cfg, &trained.checkpoint, EvalMode::Coop, dir.path()).unwrap();
        assert!(coop.total_bytes > 0, "coop must pay for its queries");
        let mut buf = Vec::new();
        run_report(dir.path(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("[no_fusion]"));
        assert!(text.contains("[coop]"));
        assert!(text.contains("AP@0.5"));
    }

    #[test]
    fn checkpoint_shape_mismatch_is_a_config_error() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let trained = run_train(&cfg, dir.path()).unwrap();
        let mut other = cfg.clone();
        other.model.c_q = 32;
        let err = run_eval(&other, &trained.checkpoint, EvalMode::Coop, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn sweep_axis_parses() {
        assert_eq!("n_q".parse::<SweepAxis>().unwrap(), SweepAxis::QueryCount);
        assert_eq!("mu".parse::<SweepAxis>().unwrap(), SweepAxis::Mu);
        assert_eq!("noise".parse::<SweepAxis>().unwrap(), SweepAxis::Noise);
        assert_eq!("budget".parse::<SweepAxis>().unwrap(), SweepAxis::Budget);
        assert!("x".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn budget_sweep_zero_row_equals_no_fusion() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let trained = run_train(&cfg, dir.path()).unwrap();
        let rows = run_sweep(&cfg, &trained.checkpoint, SweepAxis::Budget, dir.path()).unwrap();
        let solo = evaluate(&cfg, &trained.params, EvalMode::NoFusion).unwrap();
        assert_eq!(rows[0].setting, 0.0);
        assert_eq!(rows[0].mean_bytes, 0.0);
        assert_eq!(rows[0].ap50, solo.ap_at(0.5).unwrap());
        assert!(dir.path().join("sweep_budget.csv").exists());
    }
}
