//! Trajectory and rollout-quality metrics.

use std::io::Write;

use crate::autodiff::Tensor;
use crate::diffusion::{NoiseSchedule, SubSchedule};
use crate::error::{Error, Result};
use crate::model::WorldModel;
use crate::perceptual::{frechet_feature_distance, Embedder};
use crate::rng;
use crate::rollout::{frame_noise, self_rollout, Segment};
use crate::sim::{fmt_real, wrap_angle, Pose, Trajectory, World};

pub const HORIZONS: [usize; 5] = [1, 2, 4, 8, 16];

/// Position RMSE over matching timesteps; no alignment.
pub fn ate(pred: &[Pose], gt: &[Pose]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!("ATE needs equal non-empty lengths, got {} and {}", pred.len(), gt.len())));
    }
    let sq: f64 = pred.iter().zip(gt).map(|(p, g)| (p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Displacement from `a` to `b` in the frame of `a`.
fn relative(a: &Pose, b: &Pose) -> (f64, f64) {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let (s, c) = a.theta.sin_cos();
    (c * dx + s * dy, -s * dx + c * dy)
}

/// RMSE over `k` of the difference between relative displacements over `delta` steps.
pub fn rpe(pred: &[Pose], gt: &[Pose], delta: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!("RPE length mismatch: {} vs {}", pred.len(), gt.len())));
    }
    if delta == 0 || pred.len() < delta + 1 {
        return Err(Error::InvalidArgument(format!("RPE needs at least {} poses, got {}", delta + 1, pred.len())));
    }
    let n = pred.len() - delta;
    let sq: f64 = (0..n)
        .map(|k| {
            let rp = relative(&pred[k], &pred[k + delta]);
            let rg = relative(&gt[k], &gt[k + delta]);
            (rp.0 - rg.0).powi(2) + (rp.1 - rg.1).powi(2)
        })
        .sum();
    Ok((sq / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recovered {
    pub pose: Pose,
    /// Mean squared observation residual at the returned pose.
    pub residual: f64,
    pub low_confidence: bool,
}

const GRID_STEP: f64 = 0.25;
const GRID_HEADINGS: usize = 36;
const REFINE_STEPS: usize = 20;
const REFINE_STARTS: usize = 4;
const LOW_CONFIDENCE_RESIDUAL: f64 = 1e-3;

fn residual(world: &World, p: &Pose, obs: &[f64]) -> f64 {
    let r = world.render(p);
    r.iter().zip(obs).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / obs.len() as f64
}

/// Pose whose rendering best matches `obs`: grid search over the workspace,
/// then damped Gauss-Newton steps with a finite-difference Jacobian from each
/// of the best few grid cells. Refining several starts avoids stalling on a
/// landmark, where the distance channel is floored.
pub fn pose_recovery(world: &World, obs: &[f64]) -> Result<Recovered> {
    if obs.len() != world.obs_dim() {
        return Err(Error::shape("pose_recovery", format!("{} values, expected {}", obs.len(), world.obs_dim())));
    }
    let ext = world.config.extent;
    let cells = (2.0 * ext / GRID_STEP).round() as usize;
    // best (residual, pose) per grid cell over headings
    let mut per_cell = Vec::with_capacity((cells + 1) * (cells + 1));
    for i in 0..=cells {
        for j in 0..=cells {
            let mut best = (f64::INFINITY, Pose::new(0.0, 0.0, 0.0));
            for h in 0..GRID_HEADINGS {
                let p = Pose::new(
                    -ext + i as f64 * GRID_STEP,
                    -ext + j as f64 * GRID_STEP,
                    wrap_angle(h as f64 * std::f64::consts::TAU / GRID_HEADINGS as f64),
                );
                let e = residual(world, &p, obs);
                if e < best.0 {
                    best = (e, p);
                }
            }
            per_cell.push(best);
        }
    }
    per_cell.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut err, mut pose) = (f64::INFINITY, per_cell[0].1);
    for &(e0, p0) in per_cell.iter().take(REFINE_STARTS) {
        let (e, p) = refine(world, obs, e0, p0);
        if e < err {
            (err, pose) = (e, p);
        }
    }
    Ok(Recovered { pose, residual: err, low_confidence: err > LOW_CONFIDENCE_RESIDUAL })
}

fn refine(world: &World, obs: &[f64], mut err: f64, mut p: Pose) -> (f64, Pose) {
    let mut damping = 1e-3;
    let fd = 1e-6;
    for _ in 0..REFINE_STEPS {
        let base = world.render(&p);
        let r: Vec<f64> = base.iter().zip(obs).map(|(a, b)| a - b).collect();
        let mut jac = vec![[0.0; 3]; r.len()];
        let shifted = [
            Pose::new(p.x + fd, p.y, p.theta),
            Pose::new(p.x, p.y + fd, p.theta),
            Pose::new(p.x, p.y, p.theta + fd),
        ];
        for (c, q) in shifted.iter().enumerate() {
            for (k, v) in world.render(q).iter().enumerate() {
                jac[k][c] = (v - base[k]) / fd;
            }
        }
        let mut jtj = nalgebra::Matrix3::<f64>::zeros();
        let mut jtr = nalgebra::Vector3::<f64>::zeros();
        for (row, &rk) in jac.iter().zip(&r) {
            let jr = nalgebra::Vector3::new(row[0], row[1], row[2]);
            jtj += jr * jr.transpose();
            jtr += jr * rk;
        }
        let mut improved = false;
        for _ in 0..8 {
            let a = jtj + nalgebra::Matrix3::identity() * damping;
            let Some(step) = a.lu().solve(&jtr) else {
                damping *= 10.0;
                continue;
            };
            let cand = Pose::new(p.x - step[0], p.y - step[1], wrap_angle(p.theta - step[2]));
            let e = residual(world, &cand, obs);
            if e < err {
                p = cand;
                err = e;
                damping = (damping * 0.3).max(1e-9);
                improved = true;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (err, p)
}

/// Error of self-conditioned rollouts against ground truth at each horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub horizons: Vec<usize>,
    /// Mean perceptual distance at each horizon.
    pub perceptual: Vec<f64>,
    /// Fréchet feature distance between predicted and true frames at each horizon.
    pub ffd: Vec<f64>,
    /// Mean perceptual distance at every step `1..=max horizon`.
    pub per_step: Vec<f64>,
}

impl Divergence {
    /// Mean perceptual error over every rolled-out frame.
    pub fn mean_error(&self) -> f64 {
        self.per_step.iter().sum::<f64>() / self.per_step.len() as f64
    }
}

/// Evaluation starts: every `stride` frames from `memory` while a full
/// `len`-frame segment fits.
pub fn eval_picks(trajs: &[Trajectory], len: usize, memory: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        let mut s = memory;
        while s + len < t.len() {
            out.push((i, s));
            s += stride.max(1);
        }
    }
    out
}

/// Ground-truth segments and the model's rollouts over them.
fn predict_segments(
    model: &WorldModel<f32>,
    trajs: &[Trajectory],
    picks: &[(usize, usize)],
    len: usize,
    sched: &NoiseSchedule,
    sub: &SubSchedule,
    seed: u64,
) -> Result<(Segment<f32>, Vec<Tensor<f32>>)> {
    let seg = Segment::<f32>::gather(trajs, picks, len, model.config.memory)?;
    let mut r = rng::substream(seed, "eval/rollout-noise");
    let noise = frame_noise(len, seg.batch(), model.config.obs_dim, &mut r);
    let pred = self_rollout(model, model.config.memory, &seg.history, &seg.actions, &noise, sched, sub)?;
    Ok((seg, pred))
}

/// ATE and RPE between poses recovered from the rolled-out frames and the
/// recorded poses, averaged over segments. Each segment is prefixed with its
/// true start pose. Uses the same noise as `rollout_divergence` for `seed`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_pose_errors(
    world: &World,
    model: &WorldModel<f32>,
    trajs: &[Trajectory],
    picks: &[(usize, usize)],
    len: usize,
    sched: &NoiseSchedule,
    sub: &SubSchedule,
    seed: u64,
) -> Result<(f64, f64)> {
    if picks.is_empty() {
        return Err(Error::InvalidArgument("no evaluation segments".into()));
    }
    let (_, pred) = predict_segments(model, trajs, picks, len, sched, sub, seed)?;
    let (mut ate_sum, mut rpe_sum) = (0.0, 0.0);
    for (b, &(i, s)) in picks.iter().enumerate() {
        let gt = &trajs[i].poses[s..=s + len];
        let mut est = vec![gt[0]];
        for frame in &pred {
            let obs: Vec<f64> = frame.row_slice(b).iter().map(|&v| v as f64).collect();
            est.push(pose_recovery(world, &obs)?.pose);
        }
        ate_sum += ate(&est, gt)?;
        rpe_sum += rpe(&est, gt, 1)?;
    }
    let n = picks.len() as f64;
    Ok((ate_sum / n, rpe_sum / n))
}

/// Roll the model out from ground-truth context under the recorded actions.
/// The initial noise comes from `seed` alone, so two models evaluated with
/// the same seed see identical noise.
#[allow(clippy::too_many_arguments)]
pub fn rollout_divergence(
    model: &WorldModel<f32>,
    trajs: &[Trajectory],
    picks: &[(usize, usize)],
    horizons: &[usize],
    sched: &NoiseSchedule,
    sub: &SubSchedule,
    emb: &Embedder,
    seed: u64,
) -> Result<Divergence> {
    let max_h = *horizons.iter().max().ok_or_else(|| Error::InvalidArgument("no horizons".into()))?;
    if horizons.contains(&0) {
        return Err(Error::InvalidArgument("horizons start at 1".into()));
    }
    let (seg, pred) = predict_segments(model, trajs, picks, max_h, sched, sub, seed)?;
    let to_rows = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row_slice(i).iter().map(|&v| v as f64).collect()).collect()
    };
    let mut per_step = Vec::with_capacity(max_h);
    for (p, g) in pred.iter().zip(&seg.truth) {
        let d = emb.distance_batch(p, g)?;
        per_step.push(d.iter().sum::<f64>() / d.len() as f64);
    }
    let mut ffd = Vec::with_capacity(horizons.len());
    for &h in horizons {
        ffd.push(frechet_feature_distance(emb, &to_rows(&pred[h - 1]), &to_rows(&seg.truth[h - 1]))?);
    }
    Ok(Divergence {
        horizons: horizons.to_vec(),
        perceptual: horizons.iter().map(|&h| per_step[h - 1]).collect(),
        ffd,
        per_step,
    })
}

/// One model's evaluation: per-horizon rows plus a summary row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
    pub divergence: Divergence,
    pub ate: Option<f64>,
    pub rpe: Option<f64>,
    pub sr: Option<f64>,
    pub ne: Option<f64>,
}

pub const REPORT_HEADER: [&str; 10] =
    ["model", "seed", "config_hash", "horizon", "perceptual", "ffd", "ate", "rpe", "sr", "ne"];

fn opt(v: Option<f64>) -> String {
    v.map(fmt_real).unwrap_or_default()
}

impl MetricReport {
    /// Rows keyed by horizon, then a `summary` row holding the mean rollout
    /// error and the trajectory metrics.
    pub fn records(&self) -> Vec<Vec<String>> {
        let d = &self.divergence;
        let mut rows: Vec<Vec<String>> = d
            .horizons
            .iter()
            .enumerate()
            .map(|(i, h)| {
                vec![
                    self.model.clone(),
                    self.seed.to_string(),
                    self.config_hash.clone(),
                    h.to_string(),
                    fmt_real(d.perceptual[i]),
                    fmt_real(d.ffd[i]),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]
            })
            .collect();
        rows.push(vec![
            self.model.clone(),
            self.seed.to_string(),
            self.config_hash.clone(),
            "summary".into(),
            fmt_real(d.mean_error()),
            String::new(),
            opt(self.ate),
            opt(self.rpe),
            opt(self.sr),
            opt(self.ne),
        ]);
        rows
    }
}

pub fn write_reports<W: Write>(out: W, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        for row in r.records() {
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
