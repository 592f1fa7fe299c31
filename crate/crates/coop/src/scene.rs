//! Synthetic multi-agent scene generation: agent poses, ground-truth boxes
//! and simulated LiDAR clouds with occlusion, plus communicated-pose noise.
//!
//! Geometry is flat-world: agents rotate about z only, clouds are produced
//! by 2-D ray casting in the ground plane with z sampled on box sides.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("could not generate a feasible scene after {0} attempts")]
    RetryLimit(usize),
}

pub fn wrap_angle(a: f32) -> f32 {
    let mut a = a.rem_euclid(std::f32::consts::TAU);
    if a > std::f32::consts::PI {
        a -= std::f32::consts::TAU;
    }
    a
}

/// Agent pose in the world frame; yaw wrapped to (-pi, pi].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub yaw: f32,
}

impl AgentPose {
    pub fn new(x: f32, y: f32, z: f32, yaw: f32) -> Self {
        AgentPose { x, y, z, yaw: wrap_angle(yaw) }
    }

    /// Point in this agent's frame -> world frame.
    pub fn to_world(&self, p: [f32; 3]) -> [f32; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.x,
            s * p[0] + c * p[1] + self.y,
            p[2] + self.z,
        ]
    }

    /// Point in the world frame -> this agent's frame.
    pub fn from_world(&self, p: [f32; 3]) -> [f32; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub center: [f32; 3],
    /// (length, width, height), meters; all positive.
    pub size: [f32; 3],
    pub yaw: f32,
    pub object_id: u32,
}

impl GroundTruthBox {
    /// BEV corner positions, counter-clockwise.
    pub fn bev_corners(&self) -> [[f32; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let mut out = [[0.0f32; 2]; 4];
        for (i, (dx, dy)) in [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .into_iter()
            .enumerate()
        {
            out[i] = [self.center[0] + c * dx - s * dy, self.center[1] + s * dx + c * dy];
        }
        out
    }

    /// Re-express this box in another frame (SE(2) x z).
    pub fn transformed(&self, from: &AgentPose, to: &AgentPose) -> GroundTruthBox {
        let world = from.to_world(self.center);
        let center = to.from_world(world);
        GroundTruthBox {
            center,
            size: self.size,
            yaw: wrap_angle(self.yaw + from.yaw - to.yaw),
            object_id: self.object_id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

/// Points expressed in the owning agent's frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseNoiseSpec {
    /// Std-dev of Gaussian noise on x and y (and z when enabled), meters.
    pub sigma_xyz: f32,
    /// Std-dev of Gaussian heading noise, degrees.
    pub sigma_heading: f32,
    #[serde(default)]
    pub noise_z: bool,
}

impl PoseNoiseSpec {
    pub fn none() -> Self {
        PoseNoiseSpec { sigma_xyz: 0.0, sigma_heading: 0.0, noise_z: false }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.sigma_xyz < 0.0 || self.sigma_heading < 0.0 {
            return Err(SceneError::InvalidSpec("pose noise sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_agents: usize,
    pub num_objects: usize,
    /// Detection half-range along x / y, meters (symmetric about the agent).
    pub x_half: f32,
    pub y_half: f32,
    pub z_min: f32,
    pub z_max: f32,
    /// Number of objects constructed to be hidden from agent 0 but seen by
    /// another agent. Requires num_agents >= 2.
    #[serde(default)]
    pub occluded_objects: usize,
    /// A box counts as visible to an agent when it carries at least this
    /// many points in that agent's cloud.
    pub min_points: usize,
    pub rays_per_agent: usize,
    pub z_samples_per_hit: usize,
    /// Radial Gaussian sensor noise, meters. Default off.
    #[serde(default)]
    pub sensor_sigma: f32,
    pub retry_limit: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(1..=5).contains(&self.num_agents) {
            return Err(SceneError::InvalidSpec(format!(
                "num_agents must be 1..=5, got {}",
                self.num_agents
            )));
        }
        if !(1..=20).contains(&self.num_objects) {
            return Err(SceneError::InvalidSpec(format!(
                "num_objects must be 1..=20, got {}",
                self.num_objects
            )));
        }
        if self.occluded_objects > 0 && self.num_agents < 2 {
            return Err(SceneError::InvalidSpec(
                "occluded objects need at least 2 agents".into(),
            ));
        }
        if self.occluded_objects + 1 > self.num_objects {
            return Err(SceneError::InvalidSpec(
                "need at least one occluder in addition to occluded objects".into(),
            ));
        }
        if self.x_half <= 0.0 || self.y_half <= 0.0 || self.z_max <= self.z_min {
            return Err(SceneError::InvalidSpec("degenerate ranges".into()));
        }
        if self.rays_per_agent == 0 || self.z_samples_per_hit == 0 || self.retry_limit == 0 {
            return Err(SceneError::InvalidSpec("counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub agents: Vec<AgentPose>,
    pub boxes: Vec<GroundTruthBox>,
    pub clouds: Vec<PointCloud>,
    /// Per agent, per point: index into `boxes` of the surface the point
    /// lies on. Same lengths as `clouds[i].points`.
    pub hit_objects: Vec<Vec<usize>>,
}

impl Scene {
    pub fn points_on_object(&self, agent: usize, object: usize) -> usize {
        self.hit_objects[agent].iter().filter(|&&o| o == object).count()
    }

    /// Ground-truth boxes re-expressed in an agent's frame.
    pub fn boxes_in_frame(&self, agent: usize) -> Vec<GroundTruthBox> {
        let world = AgentPose::new(0.0, 0.0, 0.0, 0.0);
        self.boxes
            .iter()
            .map(|b| b.transformed(&world, &self.agents[agent]))
            .collect()
    }
}

/// Rigid SE(2) x z transform of a cloud between agent frames.
pub fn transform_points(cloud: &PointCloud, from: &AgentPose, to: &AgentPose) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let q = to.from_world(from.to_world([p.x, p.y, p.z]));
            Point { x: q[0], y: q[1], z: q[2], intensity: p.intensity }
        })
        .collect();
    PointCloud { points, frame: cloud.frame }
}

/// Add communicated-pose noise: independent Gaussians on x, y (optionally z)
/// and on the heading (spec'd in degrees, applied in radians).
pub fn apply_pose_noise(pose: &AgentPose, spec: &PoseNoiseSpec, seed: u64) -> AgentPose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_pose_noise(pose, spec, &mut rng)
}

pub fn sample_pose_noise(
    pose: &AgentPose,
    spec: &PoseNoiseSpec,
    rng: &mut impl Rng,
) -> AgentPose {
    if spec.sigma_xyz == 0.0 && spec.sigma_heading == 0.0 {
        return *pose;
    }
    let xy = Normal::new(0.0f32, spec.sigma_xyz.max(f32::MIN_POSITIVE)).unwrap();
    let h = Normal::new(0.0f32, (spec.sigma_heading.to_radians()).max(f32::MIN_POSITIVE))
        .unwrap();
    let dz = if spec.noise_z { xy.sample(rng) } else { 0.0 };
    AgentPose::new(
        pose.x + if spec.sigma_xyz > 0.0 { xy.sample(rng) } else { 0.0 },
        pose.y + if spec.sigma_xyz > 0.0 { xy.sample(rng) } else { 0.0 },
        pose.z + dz,
        pose.yaw + if spec.sigma_heading > 0.0 { h.sample(rng) } else { 0.0 },
    )
}

/// First positive ray parameter at which `origin + t*dir` enters the BEV
/// rectangle of `b`, if any. Origins inside the box yield `None`.
pub fn ray_box_intersection(origin: [f32; 2], dir: [f32; 2], b: &GroundTruthBox) -> Option<f32> {
    // slab test in the box frame
    let (s, c) = b.yaw.sin_cos();
    let dx = origin[0] - b.center[0];
    let dy = origin[1] - b.center[1];
    let o = [c * dx + s * dy, -s * dx + c * dy];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1]];
    let half = [b.size[0] / 2.0, b.size[1] / 2.0];
    let mut tmin = f32::NEG_INFINITY;
    let mut tmax = f32::INFINITY;
    for ax in 0..2 {
        if d[ax].abs() < 1e-12 {
            if o[ax].abs() > half[ax] {
                return None;
            }
            continue;
        }
        let t1 = (-half[ax] - o[ax]) / d[ax];
        let t2 = (half[ax] - o[ax]) / d[ax];
        tmin = tmin.max(t1.min(t2));
        tmax = tmax.min(t1.max(t2));
    }
    if tmax < tmin || tmin <= 1e-6 {
        return None;
    }
    Some(tmin)
}

/// Deterministic scene generation. Clouds come from 2-D ray casting with
/// nearest-hit occlusion; z is sampled evenly over the struck box side.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene, SceneError> {
    spec.validate()?;
    let mut last_err = String::new();
    for attempt in 0..spec.retry_limit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt as u64 * 0x9e3779b9));
        match try_generate(spec, &mut rng) {
            Ok(scene) => return Ok(scene),
            Err(e) => last_err = e,
        }
    }
    let _ = last_err;
    Err(SceneError::RetryLimit(spec.retry_limit))
}

fn try_generate(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Scene, String> {
    let mut agents = Vec::with_capacity(spec.num_agents);
    // agent 0 (ego) near the center; helpers spread around it
    agents.push(AgentPose::new(
        rng.random_range(-0.1..0.1) * spec.x_half,
        rng.random_range(-0.1..0.1) * spec.y_half,
        0.0,
        rng.random_range(-std::f32::consts::PI..std::f32::consts::PI),
    ));
    for _ in 1..spec.num_agents {
        for _ in 0..32 {
            let cand = AgentPose::new(
                rng.random_range(-0.55..0.55) * spec.x_half,
                rng.random_range(-0.55..0.55) * spec.y_half,
                0.0,
                rng.random_range(-std::f32::consts::PI..std::f32::consts::PI),
            );
            if agents
                .iter()
                .all(|a| (a.x - cand.x).hypot(a.y - cand.y) > 3.0)
            {
                agents.push(cand);
                break;
            }
        }
    }
    if agents.len() != spec.num_agents {
        return Err("could not place agents".into());
    }

    let ego = agents[0];
    let mut boxes: Vec<GroundTruthBox> = Vec::new();
    let mut occludee_ids: Vec<usize> = Vec::new();
    let mut next_id = 0u32;

    let sample_size = |rng: &mut ChaCha8Rng| {
        [
            rng.random_range(3.6..5.0),
            rng.random_range(1.7..2.2),
            rng.random_range(1.4..1.8),
        ]
    };
    let z_of = |size: [f32; 3]| size[2] / 2.0;

    // occluded pairs first: occludee behind a long occluder on the ego ray
    for _ in 0..spec.occluded_objects {
        let mut placed = false;
        for _ in 0..64 {
            let theta = rng.random_range(-std::f32::consts::PI..std::f32::consts::PI);
            let reach = 0.52 * spec.x_half.min(spec.y_half);
            let d = rng.random_range(0.6 * reach..reach);
            let (sn, cs) = theta.sin_cos();
            let size_b = sample_size(rng);
            let occludee = GroundTruthBox {
                center: [ego.x + d * cs, ego.y + d * sn, z_of(size_b)],
                size: size_b,
                yaw: rng.random_range(-std::f32::consts::PI..std::f32::consts::PI),
                object_id: next_id,
            };
            let f = rng.random_range(0.45..0.6);
            let size_o = [rng.random_range(4.6..5.4), rng.random_range(1.9..2.2), 1.7];
            let occluder = GroundTruthBox {
                center: [ego.x + f * d * cs, ego.y + f * d * sn, z_of(size_o)],
                // long axis across the ego ray
                size: size_o,
                yaw: wrap_angle(theta + std::f32::consts::FRAC_PI_2),
                object_id: next_id + 1,
            };
            if placement_ok(&occludee, &boxes, &agents)
                && placement_ok(&occluder, &boxes, &agents)
                && bev_separated(&occludee, &occluder)
            {
                occludee_ids.push(boxes.len());
                boxes.push(occludee);
                boxes.push(occluder);
                next_id += 2;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err("could not place occlusion pair".into());
        }
    }

    while boxes.len() < spec.num_objects {
        let mut placed = false;
        for _ in 0..64 {
            let size = sample_size(rng);
            let cand = GroundTruthBox {
                center: [
                    rng.random_range(-0.6..0.6) * spec.x_half,
                    rng.random_range(-0.6..0.6) * spec.y_half,
                    z_of(size),
                ],
                size,
                yaw: rng.random_range(-std::f32::consts::PI..std::f32::consts::PI),
                object_id: next_id,
            };
            if placement_ok(&cand, &boxes, &agents) {
                boxes.push(cand);
                next_id += 1;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err("could not place object without overlap".into());
        }
    }

    let (clouds, hit_objects) = cast_all(spec, &agents, &boxes, rng);

    // every box must be visible somewhere
    for (i, _) in boxes.iter().enumerate() {
        let seen = (0..agents.len())
            .any(|a| hit_objects[a].iter().filter(|&&o| o == i).count() >= spec.min_points);
        if !seen {
            return Err(format!("box {} invisible to all agents", i));
        }
    }
    // designated occludees: hidden from ego, visible to a helper
    for &i in &occludee_ids {
        if hit_objects[0].iter().any(|&o| o == i) {
            return Err(format!("occludee {} leaked into ego view", i));
        }
        let helper_sees = (1..agents.len())
            .any(|a| hit_objects[a].iter().filter(|&&o| o == i).count() >= spec.min_points);
        if !helper_sees {
            return Err(format!("occludee {} not visible to any helper", i));
        }
    }

    Ok(Scene { agents, boxes, clouds, hit_objects })
}

fn bev_separated(a: &GroundTruthBox, b: &GroundTruthBox) -> bool {
    // exact rotated-rectangle test with a safety margin baked into the sizes
    let inflate = |bx: &GroundTruthBox| GroundTruthBox {
        size: [bx.size[0] + 0.3, bx.size[1] + 0.3, bx.size[2]],
        ..*bx
    };
    crate::eval::rotated_iou_bev(&inflate(a), &inflate(b)) == 0.0
}

/// Agent position outside the box footprint inflated by `margin` meters.
fn agent_clear(a: &AgentPose, b: &GroundTruthBox, margin: f32) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let dx = a.x - b.center[0];
    let dy = a.y - b.center[1];
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() > b.size[0] / 2.0 + margin || v.abs() > b.size[1] / 2.0 + margin
}

fn placement_ok(cand: &GroundTruthBox, boxes: &[GroundTruthBox], agents: &[AgentPose]) -> bool {
    boxes.iter().all(|b| bev_separated(cand, b))
        && agents.iter().all(|a| agent_clear(a, cand, 1.0))
}

fn cast_all(
    spec: &SceneSpec,
    agents: &[AgentPose],
    boxes: &[GroundTruthBox],
    rng: &mut ChaCha8Rng,
) -> (Vec<PointCloud>, Vec<Vec<usize>>) {
    let mut clouds = Vec::with_capacity(agents.len());
    let mut hit_objects = Vec::with_capacity(agents.len());
    let noise = if spec.sensor_sigma > 0.0 {
        Some(Normal::new(0.0f32, spec.sensor_sigma).unwrap())
    } else {
        None
    };
    for (ai, agent) in agents.iter().enumerate() {
        let mut points = Vec::new();
        let mut hits = Vec::new();
        let max_range = spec.x_half.hypot(spec.y_half);
        for r in 0..spec.rays_per_agent {
            let theta = r as f32 / spec.rays_per_agent as f32 * std::f32::consts::TAU;
            let dir = [theta.cos(), theta.sin()];
            let origin = [agent.x, agent.y];
            let mut best: Option<(f32, usize)> = None;
            for (bi, b) in boxes.iter().enumerate() {
                if let Some(t) = ray_box_intersection(origin, dir, b) {
                    if t < max_range && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, bi));
                    }
                }
            }
            let Some((t, bi)) = best else { continue };
            let t = match &noise {
                Some(n) => (t + n.sample(rng)).max(0.1),
                None => t,
            };
            let wx = origin[0] + t * dir[0];
            let wy = origin[1] + t * dir[1];
            let b = &boxes[bi];
            for zi in 0..spec.z_samples_per_hit {
                let frac = (zi as f32 + 0.5) / spec.z_samples_per_hit as f32;
                let wz = b.center[2] - b.size[2] / 2.0 + frac * b.size[2];
                let local = agent.from_world([wx, wy, wz]);
                if local[0].abs() <= spec.x_half
                    && local[1].abs() <= spec.y_half
                    && local[2] >= spec.z_min
                    && local[2] <= spec.z_max
                {
                    points.push(Point {
                        x: local[0],
                        y: local[1],
                        z: local[2],
                        intensity: 1.0 / (1.0 + t / max_range),
                    });
                    hits.push(bi);
                }
            }
        }
        clouds.push(PointCloud { points, frame: ai });
        hit_objects.push(hits);
    }
    (clouds, hit_objects)
}
