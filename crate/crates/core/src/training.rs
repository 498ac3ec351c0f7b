//! Stage I teacher-forced pretraining and Stage II action-conditioned
//! consistency (ACC) post-training.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adaln_only, all_groups, Adam, AdamConfig, Graph, Real, Tensor, Var};
use crate::diffusion::{
    complete_frame, forward_noise, generate_frame, standard_normal, Denoiser, NoiseSchedule, SubSchedule, Truncation,
};
use crate::error::{Error, Result};
use crate::model::{Conditioning, WorldModel};
use crate::perceptual::Embedder;
use crate::rng::{self, Rng};
use crate::rollout::{conditioning_from_frames, Segment};
use crate::sim::{Action, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageIConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
}

impl Default for StageIConfig {
    fn default() -> Self {
        StageIConfig { lr: 6e-5, batch: 16, steps: 3000 }
    }
}

impl StageIConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("stage1.lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("stage1.batch and stage1.steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Perceptual,
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    /// Stop-gradient DDIM endpoint at `t = 0`.
    Icsd,
    /// Detached estimate at the truncation step.
    X0hat,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perceptual" => Ok(LossKind::Perceptual),
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            _ => Err(Error::Config(format!("unknown loss kind {s:?}"))),
        }
    }
}

impl FromStr for ContextKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icsd" => Ok(ContextKind::Icsd),
            "x0hat" => Ok(ContextKind::X0hat),
            _ => Err(Error::Config(format!("unknown context kind {s:?}"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Perceptual => "perceptual",
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
        })
    }
}

impl fmt::Display for ContextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextKind::Icsd => "icsd",
            ContextKind::X0hat => "x0hat",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccConfig {
    pub lr: f64,
    /// Frames per rollout segment (N).
    pub rollout: usize,
    pub loss: LossKind,
    pub context: ContextKind,
    pub steps: usize,
    /// Segments per optimization step.
    pub batch: usize,
    /// Draw a fresh truncation index for every frame instead of once per segment.
    pub k_per_frame: bool,
}

impl Default for AccConfig {
    fn default() -> Self {
        AccConfig {
            lr: 2e-4,
            rollout: 8,
            loss: LossKind::Perceptual,
            context: ContextKind::Icsd,
            steps: 1500,
            batch: 8,
            k_per_frame: false,
        }
    }
}

impl AccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("acc.lr must be positive, got {}", self.lr)));
        }
        if self.rollout < 2 {
            return Err(Error::Config(format!("acc.rollout must be at least 2, got {}", self.rollout)));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("acc.batch and acc.steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

pub fn write_loss_curve<W: std::io::Write>(out: W, curve: &[LossPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "wall_ms"])?;
    for p in curve {
        w.write_record([p.step.to_string(), crate::sim::fmt_real(p.loss), p.wall_ms.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// First `1 - held_out` of the trajectories for training, the rest for evaluation.
pub fn split_dataset(trajs: &[Trajectory], held_out: f64) -> (&[Trajectory], &[Trajectory]) {
    let n_eval = ((trajs.len() as f64) * held_out).round() as usize;
    let n_eval = n_eval.min(trajs.len().saturating_sub(1));
    trajs.split_at(trajs.len() - n_eval)
}

pub const HELD_OUT_FRACTION: f64 = 0.2;

/// Teacher-forced batch: context and memory from ground truth, one target frame.
fn sample_transitions(trajs: &[Trajectory], batch: usize, memory: usize, r: &mut Rng) -> Result<Segment<f32>> {
    let picks: Vec<(usize, usize)> = (0..batch)
        .map(|_| {
            let i = r.gen_range(0..trajs.len());
            (i, r.gen_range(0..trajs[i].len() - 1))
        })
        .collect();
    Segment::gather(trajs, &picks, 1, memory)
}

fn check_finite(loss: f64, step: usize, stage: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{stage} loss became {loss} at step {step}; aborting")))
    }
}

/// Stage I: `|| s - denoise(noise(s, t, eps), t, context, memory, a) ||^2` with
/// `t` uniform in `1..=T`, Adam over every parameter group.
pub fn train_stage1(
    model: &mut WorldModel<f32>,
    trajs: &[Trajectory],
    sched: &NoiseSchedule,
    cfg: &StageIConfig,
    seed: u64,
) -> Result<Vec<LossPoint>> {
    cfg.validate()?;
    if trajs.is_empty() || trajs.iter().any(|t| t.len() < 2) {
        return Err(Error::InvalidArgument("stage I needs trajectories with at least two frames".into()));
    }
    let mut r = rng::substream(seed, "stage1/batches");
    let mut opt = Adam::new();
    let adam = AdamConfig::with_lr(cfg.lr);
    let groups = all_groups();
    let memory = model.config.memory;
    let start = Instant::now();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seg = sample_transitions(trajs, cfg.batch, memory, &mut r)?;
        let t = r.gen_range(1..=sched.steps());
        let target = &seg.truth[0];
        let eps = standard_normal::<f32>(target.rows(), target.cols(), &mut r);
        let noisy = forward_noise(target, t, sched, &eps)?;
        let cond = conditioning_from_frames(&seg.history, &seg.actions[0], memory)?;
        let mut g = Graph::new();
        let pred = model.denoise(&mut g, &noisy.s, t, &cond)?;
        let tv = g.constant(target.clone());
        let diff = g.sub(pred, tv)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean(sq);
        let value = g.value(loss).item().as_f64();
        check_finite(value, step, "stage I")?;
        let grads = g.backward(loss)?.into_param_grads();
        opt.step(&mut model.params, &grads, &adam, &groups)?;
        curve.push(LossPoint { step, loss: value, wall_ms: start.elapsed().as_millis() as u64 });
    }
    Ok(curve)
}

/// Rollout options not tied to optimization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutOptions {
    pub context: ContextKind,
    pub k_per_frame: bool,
    /// Force the truncation index instead of drawing it.
    pub fixed_k: Option<usize>,
}

impl From<&AccConfig> for RolloutOptions {
    fn from(c: &AccConfig) -> Self {
        RolloutOptions { context: c.context, k_per_frame: c.k_per_frame, fixed_k: None }
    }
}

#[derive(Debug)]
pub struct FrameTrace<T> {
    pub k: usize,
    pub t_k: usize,
    /// `(t, s_t)` for every denoiser call up to and including `t_k`.
    pub visited: Vec<(usize, Tensor<T>)>,
    /// Gradient-bearing estimate at `t_k`, on the rollout graph.
    pub estimate: Var,
    /// Stop-gradient DDIM endpoint continued from the truncation state.
    pub sic: Tensor<T>,
    pub actions: Vec<Action>,
    pub truth: Tensor<T>,
    /// Denoiser calls on this frame that recorded gradient.
    pub grad_calls: usize,
    /// Set by [`acc_loss`].
    pub loss: Option<f64>,
}

#[derive(Debug)]
pub struct RolloutTrace<T> {
    pub frames: Vec<FrameTrace<T>>,
}

/// Counts calls made on gradient-recording graphs.
struct Counting<'a, D> {
    inner: &'a D,
    calls: std::cell::Cell<usize>,
}

impl<T: Real, D: Denoiser<T>> Denoiser<T> for Counting<'_, D> {
    type Cond = D::Cond;

    fn denoise(&self, g: &mut Graph<T>, noisy: &Tensor<T>, t: usize, cond: &D::Cond) -> Result<Var> {
        if g.tracks_params() {
            self.calls.set(self.calls.get() + 1);
        }
        self.inner.denoise(g, noisy, t, cond)
    }
}

/// Truncated self-rollout over a segment. Each frame runs the reverse chain
/// without gradient down to `t_k`, records the gradient-bearing estimate
/// there, and continues without gradient to `t = 0` for the inference
/// consistent state. Later frames condition on either that state or the
/// detached estimate.
#[allow(clippy::too_many_arguments)]
pub fn acc_rollout<T: Real, D: Denoiser<T, Cond = Conditioning<T>>>(
    denoiser: &D,
    g: &mut Graph<T>,
    memory: usize,
    sched: &NoiseSchedule,
    sub: &SubSchedule,
    segment: &Segment<T>,
    opts: RolloutOptions,
    r: &mut Rng,
) -> Result<RolloutTrace<T>> {
    if segment.is_empty() || segment.actions.len() != segment.len() {
        return Err(Error::InvalidArgument("segment needs matching actions and targets".into()));
    }
    if let Some(k) = opts.fixed_k {
        if !(1..=sub.len()).contains(&k) {
            return Err(Error::InvalidArgument(format!("truncation index {k} outside 1..={}", sub.len())));
        }
    }
    let draw = |r: &mut Rng| opts.fixed_k.unwrap_or_else(|| r.gen_range(1..=sub.len()));
    let mut k = draw(r);
    let (rows, dim) = segment.truth[0].shape();
    let mut frames = segment.history.clone();
    let mut out = Vec::with_capacity(segment.len());
    for (f, (acts, truth)) in segment.actions.iter().zip(&segment.truth).enumerate() {
        if opts.k_per_frame && f > 0 {
            k = draw(r);
        }
        let cond = conditioning_from_frames(&frames, acts, memory)?;
        let counter = Counting { inner: denoiser, calls: std::cell::Cell::new(0) };
        let gen = generate_frame(&counter, g, &cond, rows, dim, sched, sub, r, Truncation::At(k), true)?;
        let estimate = gen.grad_estimate.expect("gradient requested at truncation");
        let detached = g.value(estimate).clone();
        let sic = complete_frame(&counter, &cond, &gen.state, &detached, sched, sub)?;
        let next = match opts.context {
            ContextKind::Icsd => sic.clone(),
            ContextKind::X0hat => detached,
        };
        frames.push(next);
        if frames.len() > memory + 1 {
            frames.remove(0);
        }
        out.push(FrameTrace {
            k,
            t_k: sub.t(k),
            visited: gen.visited,
            estimate,
            sic,
            actions: acts.clone(),
            truth: truth.clone(),
            grad_calls: counter.calls.get(),
            loss: None,
        });
    }
    Ok(RolloutTrace { frames: out })
}

/// Per-row distance between `a` and `b` under `kind`, averaged over the batch.
pub fn frame_distance<T: Real>(g: &mut Graph<T>, a: Var, b: Var, kind: LossKind, emb: &Embedder) -> Result<Var> {
    match kind {
        LossKind::Perceptual => {
            let d = emb.distance_rows(g, a, b)?;
            Ok(g.mean(d))
        }
        LossKind::L1 => {
            let d = g.sub(a, b)?;
            let d = g.abs(d);
            Ok(g.mean(d))
        }
        LossKind::L2 => {
            let d = g.sub(a, b)?;
            let d = g.mul(d, d)?;
            Ok(g.mean(d))
        }
    }
}

/// `(1/N) sum_tau dist(s0_tau, s_tau)`; fills in each frame's loss.
pub fn acc_loss<T: Real>(
    g: &mut Graph<T>,
    trace: &mut RolloutTrace<T>,
    kind: LossKind,
    emb: &Embedder,
) -> Result<Var> {
    let n = trace.frames.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty rollout trace".into()));
    }
    let mut total: Option<Var> = None;
    for fr in trace.frames.iter_mut() {
        let truth = g.constant(fr.truth.clone());
        let d = frame_distance(g, fr.estimate, truth, kind, emb)?;
        fr.loss = Some(g.value(d).item().as_f64());
        total = Some(match total {
            None => d,
            Some(acc) => g.add(acc, d)?,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / n as f64))
}

/// Segments of `len` frames with a full memory of ground-truth context.
pub fn sample_segments(trajs: &[Trajectory], batch: usize, len: usize, memory: usize, r: &mut Rng) -> Result<Segment<f32>> {
    let usable: Vec<usize> = (0..trajs.len()).filter(|&i| trajs[i].len() > len + memory).collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument(format!("no trajectory is long enough for {len}-frame segments")));
    }
    let picks: Vec<(usize, usize)> = (0..batch)
        .map(|_| {
            let i = usable[r.gen_range(0..usable.len())];
            (i, r.gen_range(memory..trajs[i].len() - len))
        })
        .collect();
    Segment::gather(trajs, &picks, len, memory)
}

/// Stage II: AdaLN-only updates against the multi-frame consistency loss.
/// The backbone is never written.
#[allow(clippy::too_many_arguments)]
pub fn posttrain_acc(
    model: &mut WorldModel<f32>,
    trajs: &[Trajectory],
    sched: &NoiseSchedule,
    sub: &SubSchedule,
    cfg: &AccConfig,
    emb: &Embedder,
    seed: u64,
) -> Result<Vec<LossPoint>> {
    cfg.validate()?;
    let memory = model.config.memory;
    let mut seg_rng = rng::substream(seed, "acc/segments");
    let mut noise_rng = rng::substream(seed, "acc/rollout");
    let mut opt = Adam::new();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mask = adaln_only();
    let opts = RolloutOptions::from(cfg);
    let start = Instant::now();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seg = sample_segments(trajs, cfg.batch, cfg.rollout, memory, &mut seg_rng)?;
        let mut g = Graph::new();
        let mut trace = acc_rollout(&*model, &mut g, memory, sched, sub, &seg, opts, &mut noise_rng)?;
        let loss = acc_loss(&mut g, &mut trace, cfg.loss, emb)?;
        let value = g.value(loss).item().as_f64();
        check_finite(value, step, "ACC")?;
        let grads = g.backward(loss)?.into_param_grads();
        opt.step(&mut model.params, &grads, &adam, &mask)?;
        curve.push(LossPoint { step, loss: value, wall_ms: start.elapsed().as_millis() as u64 });
    }
    Ok(curve)
}
