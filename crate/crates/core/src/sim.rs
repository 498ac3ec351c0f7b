//! Deterministic planar navigation world: unicycle kinematics, landmark
//! observations, random-walk datasets and goal-reaching tasks.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose { x, y, theta: wrap_angle(theta) }
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Forward displacement `v` (m/step) and heading change `w` (rad/step).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub v: f64,
    pub w: f64,
}

impl Action {
    pub fn new(v: f64, w: f64) -> Self {
        Action { v, w }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub world_seed: u64,
    pub landmarks: usize,
    pub obs_dim: usize,
    pub v_max: f64,
    pub w_max: f64,
    pub obs_noise: f64,
    /// Distance-channel scale in `tanh(alpha / d)`.
    pub alpha: f64,
    /// Landmarks and start poses live in `[-extent, extent]^2`.
    pub extent: f64,
    /// Dataset size: trajectories and frames per trajectory.
    pub trajectories: usize,
    pub traj_len: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            world_seed: 0,
            landmarks: 16,
            obs_dim: 32,
            v_max: 0.5,
            w_max: 0.5,
            obs_noise: 0.0,
            alpha: 2.0,
            extent: 6.0,
            trajectories: 64,
            traj_len: 64,
        }
    }
}

const MIN_LANDMARK_SEPARATION: f64 = 0.5;
const MIN_ASYMMETRY: f64 = 0.05;
const DISTANCE_FLOOR: f64 = 0.1;

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.landmarks < 3 {
            return Err(Error::Config(format!("need at least 3 landmarks, got {}", self.landmarks)));
        }
        if self.obs_dim == 0 || self.obs_dim % 2 == 1 {
            return Err(Error::Config(format!("observation dimension must be even and positive, got {}", self.obs_dim)));
        }
        if self.obs_dim > 2 * self.landmarks {
            return Err(Error::Config(format!(
                "observation dimension {} exceeds twice the landmark count {}",
                self.obs_dim, self.landmarks
            )));
        }
        if !(self.v_max > 0.0 && self.w_max > 0.0 && self.alpha > 0.0 && self.extent > 0.0) {
            return Err(Error::Config("v_max, w_max, alpha and extent must be positive".into()));
        }
        if !(self.obs_noise >= 0.0) {
            return Err(Error::Config("obs_noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Smallest mismatch between the landmark set and its image under the
/// point symmetries of the plane about its centroid (half/quarter turns and
/// axis mirrors). Zero means the world looks identical from two poses.
pub fn landmark_asymmetry(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let centered: Vec<(f64, f64)> = points.iter().map(|p| (p.0 - cx, p.1 - cy)).collect();
    let transforms: [fn((f64, f64)) -> (f64, f64); 5] = [
        |(x, y)| (-x, -y),
        |(x, y)| (-y, x),
        |(x, y)| (y, -x),
        |(x, y)| (-x, y),
        |(x, y)| (x, -y),
    ];
    transforms
        .iter()
        .map(|f| {
            centered
                .iter()
                .map(|&p| {
                    let q = f(p);
                    centered.iter().map(|&r| (q.0 - r.0).hypot(q.1 - r.1)).fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// A validated world: configuration plus landmark layout.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    landmarks: Vec<(f64, f64)>,
}

impl World {
    /// Landmarks drawn uniformly in the workspace from `world_seed`,
    /// rejecting layouts that are too crowded or too symmetric.
    pub fn generate(config: WorldConfig) -> Result<World> {
        config.validate()?;
        let mut r = rng::substream(config.world_seed, "world/landmarks");
        for _ in 0..1000 {
            let pts: Vec<(f64, f64)> = (0..config.landmarks)
                .map(|_| (r.gen_range(-config.extent..config.extent), r.gen_range(-config.extent..config.extent)))
                .collect();
            if let Ok(w) = World::from_landmarks(config.clone(), pts) {
                return Ok(w);
            }
        }
        Err(Error::Config("could not place landmarks".into()))
    }

    pub fn from_landmarks(config: WorldConfig, landmarks: Vec<(f64, f64)>) -> Result<World> {
        config.validate()?;
        if landmarks.len() != config.landmarks {
            return Err(Error::Config(format!("expected {} landmarks, got {}", config.landmarks, landmarks.len())));
        }
        for (i, a) in landmarks.iter().enumerate() {
            for b in &landmarks[i + 1..] {
                if (a.0 - b.0).hypot(a.1 - b.1) < MIN_LANDMARK_SEPARATION {
                    return Err(Error::Config("landmarks too close together".into()));
                }
            }
        }
        if landmark_asymmetry(&landmarks) < MIN_ASYMMETRY {
            return Err(Error::Config("landmark layout is symmetric; observations would be ambiguous".into()));
        }
        Ok(World { config, landmarks })
    }

    pub fn landmarks(&self) -> &[(f64, f64)] {
        &self.landmarks
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim
    }

    pub fn check_action(&self, a: &Action) -> Result<()> {
        let c = &self.config;
        if !(a.v.abs() <= c.v_max + 1e-12 && a.w.abs() <= c.w_max + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "action ({}, {}) outside bounds |v|<={} |w|<={}",
                a.v, a.w, c.v_max, c.w_max
            )));
        }
        Ok(())
    }

    pub fn clip_action(&self, a: Action) -> Action {
        Action {
            v: a.v.clamp(-self.config.v_max, self.config.v_max),
            w: a.w.clamp(-self.config.w_max, self.config.w_max),
        }
    }

    pub fn step(&self, p: &Pose, a: &Action) -> Result<Pose> {
        self.check_action(a)?;
        Ok(step_unchecked(p, a))
    }

    /// Noise-free observation of `p`.
    pub fn render(&self, p: &Pose) -> Vec<f64> {
        let n = self.config.obs_dim / 2;
        let mut out = Vec::with_capacity(self.config.obs_dim);
        for &(lx, ly) in &self.landmarks[..n] {
            let d = (lx - p.x).hypot(ly - p.y).max(DISTANCE_FLOOR);
            let bearing = (ly - p.y).atan2(lx - p.x);
            out.push((self.config.alpha / d).tanh());
            out.push((bearing - p.theta).sin());
        }
        out
    }

    /// Observation with the configured Gaussian noise, clipped to `[-1, 1]`.
    pub fn render_noisy(&self, p: &Pose, r: &mut Rng) -> Vec<f64> {
        let mut obs = self.render(p);
        if self.config.obs_noise > 0.0 {
            for v in &mut obs {
                let n: f64 = StandardNormal.sample(r);
                *v = (*v + self.config.obs_noise * n).clamp(-1.0, 1.0);
            }
        }
        obs
    }

    pub fn rollout(&self, start: &Pose, actions: &[Action]) -> Result<Vec<Pose>> {
        let mut poses = Vec::with_capacity(actions.len() + 1);
        poses.push(*start);
        for a in actions {
            let next = self.step(poses.last().expect("non-empty"), a)?;
            poses.push(next);
        }
        Ok(poses)
    }
}

/// Rotate by `w`, then translate `v` along the new heading.
pub fn step_unchecked(p: &Pose, a: &Action) -> Pose {
    let theta = wrap_angle(p.theta + a.w);
    Pose { x: p.x + a.v * theta.cos(), y: p.y + a.v * theta.sin(), theta }
}

/// Inverse of [`step_unchecked`] for a known action.
pub fn unstep(p: &Pose, a: &Action) -> Pose {
    Pose { x: p.x - a.v * p.theta.cos(), y: p.y - a.v * p.theta.sin(), theta: wrap_angle(p.theta - a.w) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    pub poses: Vec<Pose>,
    pub actions: Vec<Action>,
    pub observations: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Mean-reverting random-walk behaviour policy for dataset generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WalkPolicy {
    pub reversion: f64,
    /// Mean forward speed as a fraction of `v_max`.
    pub mean_speed: f64,
    /// Per-step noise as fractions of the bounds.
    pub v_noise: f64,
    pub w_noise: f64,
    /// Beyond this radius the heading is steered back toward the origin.
    pub home_radius: f64,
    pub home_gain: f64,
}

impl Default for WalkPolicy {
    fn default() -> Self {
        WalkPolicy { reversion: 0.3, mean_speed: 0.3, v_noise: 0.35, w_noise: 0.45, home_radius: 4.0, home_gain: 0.5 }
    }
}

pub fn generate_trajectory(world: &World, id: usize, len: usize, policy: &WalkPolicy, r: &mut Rng) -> Trajectory {
    let c = &world.config;
    let half = 0.5 * c.extent;
    let start = Pose::new(r.gen_range(-half..half), r.gen_range(-half..half), r.gen_range(-PI..PI));
    let mut poses = vec![start];
    let mut actions = Vec::with_capacity(len.saturating_sub(1));
    let (mut v, mut w) = (policy.mean_speed * c.v_max, 0.0);
    for _ in 1..len {
        let p = *poses.last().expect("non-empty");
        let mut w_target = 0.0;
        let radius = p.x.hypot(p.y);
        if radius > policy.home_radius {
            let home = (-p.y).atan2(-p.x);
            w_target = policy.home_gain * wrap_angle(home - p.theta);
        }
        let nv: f64 = StandardNormal.sample(r);
        let nw: f64 = StandardNormal.sample(r);
        v += policy.reversion * (policy.mean_speed * c.v_max - v) + policy.v_noise * c.v_max * nv;
        w += policy.reversion * (w_target - w) + policy.w_noise * c.w_max * nw;
        v = v.clamp(-c.v_max, c.v_max);
        w = w.clamp(-c.w_max, c.w_max);
        let a = Action { v, w };
        actions.push(a);
        poses.push(step_unchecked(&p, &a));
    }
    let observations = poses.iter().map(|p| world.render_noisy(p, r)).collect();
    Trajectory { id, poses, actions, observations }
}

/// `n_traj` trajectories of `len` frames each, reproducible from the world
/// seed and `policy_seed`.
pub fn generate_dataset(world: &World, n_traj: usize, len: usize, policy_seed: u64) -> Result<Vec<Trajectory>> {
    if len < 2 {
        return Err(Error::Config(format!("trajectory length must be at least 2 frames, got {len}")));
    }
    let policy = WalkPolicy::default();
    Ok((0..n_traj)
        .map(|i| {
            let mut r = rng::indexed(policy_seed, "dataset/trajectory", &[i as u64]);
            generate_trajectory(world, i, len, &policy, &mut r)
        })
        .collect())
}

/// Format with 9 significant digits.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.8e}")
}

/// Header: `traj_id,step,x,y,theta,v,w,obs_0..obs_{D-1}`. The action on row
/// `k` is the one applied at frame `k`; the final frame carries a zero action.
pub fn write_trajectories_csv<W: Write>(out: W, trajs: &[Trajectory], obs_dim: usize) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["traj_id", "step", "x", "y", "theta", "v", "w"].iter().map(|s| s.to_string()).collect();
    header.extend((0..obs_dim).map(|i| format!("obs_{i}")));
    wtr.write_record(&header)?;
    for t in trajs {
        for (k, (p, o)) in t.poses.iter().zip(&t.observations).enumerate() {
            let a = t.actions.get(k).copied().unwrap_or_default();
            let mut row = vec![t.id.to_string(), k.to_string()];
            row.extend([p.x, p.y, p.theta, a.v, a.w].iter().map(|&v| fmt_real(v)));
            row.extend(o.iter().map(|&v| fmt_real(v)));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_trajectories_csv<R: Read>(input: R) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.len() < 7 || &headers[0] != "traj_id" {
        return Err(Error::InvalidArgument("not a trajectory CSV".into()));
    }
    let obs_dim = headers.len() - 7;
    let mut trajs: Vec<Trajectory> = Vec::new();
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")));
    for rec in rdr.records() {
        let rec = rec?;
        let id: usize = rec[0].parse().map_err(|_| Error::InvalidArgument("bad traj_id".into()))?;
        let pose = Pose { x: parse(&rec[2])?, y: parse(&rec[3])?, theta: parse(&rec[4])? };
        let action = Action { v: parse(&rec[5])?, w: parse(&rec[6])? };
        let obs = (0..obs_dim).map(|i| parse(&rec[7 + i])).collect::<Result<Vec<_>>>()?;
        if trajs.last().is_none_or(|t| t.id != id) {
            trajs.push(Trajectory { id, poses: vec![], actions: vec![], observations: vec![] });
        }
        let t = trajs.last_mut().expect("pushed");
        t.poses.push(pose);
        t.actions.push(action);
        t.observations.push(obs);
    }
    for t in &mut trajs {
        t.actions.pop();
    }
    Ok(trajs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Past frames before the current one (the model's memory length).
    pub memory: usize,
    pub horizon: usize,
    pub goal_min: f64,
    pub goal_max: f64,
    pub max_retries: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { memory: 3, horizon: 16, goal_min: 2.0, goal_max: 6.0, max_retries: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalTask {
    /// `memory + 1` frames, oldest first; the last is the current state.
    pub context_poses: Vec<Pose>,
    pub context_obs: Vec<Vec<f64>>,
    pub goal: Pose,
    pub goal_obs: Vec<f64>,
    /// Reference path from the current pose to the goal, `horizon` actions.
    pub demo_actions: Vec<Action>,
    pub demo_poses: Vec<Pose>,
}

impl GoalTask {
    pub fn start(&self) -> &Pose {
        self.context_poses.last().expect("context is non-empty")
    }
}

/// Turn-toward-and-drive controller; returns `horizon` actions (zero-padded)
/// and whether the target position was reached.
pub fn steer_to(world: &World, start: &Pose, target: (f64, f64), horizon: usize) -> (Vec<Action>, bool) {
    let c = &world.config;
    let mut p = *start;
    let mut actions = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let dist = (target.0 - p.x).hypot(target.1 - p.y);
        if dist < 1e-9 {
            actions.push(Action::default());
            continue;
        }
        let bearing = (target.1 - p.y).atan2(target.0 - p.x);
        let w = wrap_angle(bearing - p.theta).clamp(-c.w_max, c.w_max);
        let heading = wrap_angle(p.theta + w);
        let along = dist * wrap_angle(bearing - heading).cos();
        let v = along.clamp(0.0, c.v_max);
        let a = Action { v, w };
        actions.push(a);
        p = step_unchecked(&p, &a);
    }
    let reached = (target.0 - p.x).hypot(target.1 - p.y) < 1e-6;
    (actions, reached)
}

/// Goal-reaching task: a short random context, then a goal at a uniform
/// distance in `[goal_min, goal_max]` ahead of the robot, reachable within
/// the horizon by the steering controller.
pub fn make_goal_task(world: &World, cfg: &TaskConfig, seed: u64) -> Result<GoalTask> {
    let c = &world.config;
    let mut r = rng::substream(seed, "task");
    for _ in 0..cfg.max_retries.max(1) {
        let start = Pose::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-PI..PI));
        let mut poses = vec![start];
        for _ in 0..cfg.memory {
            let a = Action { v: r.gen_range(-c.v_max..c.v_max), w: r.gen_range(-c.w_max..c.w_max) };
            poses.push(step_unchecked(poses.last().expect("non-empty"), &a));
        }
        let cur = *poses.last().expect("non-empty");
        let d = r.gen_range(cfg.goal_min..cfg.goal_max);
        let phi = cur.theta + r.gen_range(-PI / 2.0..PI / 2.0);
        let target = (cur.x + d * phi.cos(), cur.y + d * phi.sin());
        let (demo_actions, reached) = steer_to(world, &cur, target, cfg.horizon);
        if !reached {
            continue;
        }
        let demo_poses = world.rollout(&cur, &demo_actions)?;
        let goal = *demo_poses.last().expect("non-empty");
        let context_obs = poses.iter().map(|p| world.render(p)).collect();
        return Ok(GoalTask {
            context_poses: poses,
            context_obs,
            goal,
            goal_obs: world.render(&goal),
            demo_actions,
            demo_poses,
        });
    }
    Err(Error::UnreachableGoal(cfg.max_retries))
}
