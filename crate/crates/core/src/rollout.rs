//! Batched autoregressive rollouts and the segments they run on.

use crate::autodiff::{Graph, Real, Tensor};
use crate::diffusion::{generate_frame_from, Denoiser, NoiseSchedule, SubSchedule, Truncation};
use crate::error::{Error, Result};
use crate::model::Conditioning;
use crate::rng::Rng;
use crate::sim::{Action, Trajectory};

/// Conditioning from a frame history (oldest first, each `B x D`), using the
/// last `memory + 1` frames and zero-padding when the history is short.
pub fn conditioning_from_frames<T: Real>(
    history: &[Tensor<T>],
    actions: &[Action],
    memory: usize,
) -> Result<Conditioning<T>> {
    let current = history.last().ok_or_else(|| Error::shape("rollout", "empty history"))?;
    let (b, d) = current.shape();
    if actions.len() != b {
        return Err(Error::shape("rollout", format!("{} actions for batch {b}", actions.len())));
    }
    let n = history.len();
    let mem = (0..memory)
        .map(|j| match n.checked_sub(2 + j) {
            Some(i) => history[i].clone(),
            None => Tensor::zeros(b, d),
        })
        .collect();
    Ok(Conditioning { context: current.clone(), memory: mem, actions: actions.to_vec() })
}

/// A batch of ground-truth segments: `B` rows per tensor.
#[derive(Clone, Debug)]
pub struct Segment<T> {
    /// Initial context frames, oldest first, ending at the frame the rollout starts from.
    pub history: Vec<Tensor<T>>,
    /// `actions[i][b]` drives frame `i + 1` of row `b`.
    pub actions: Vec<Vec<Action>>,
    /// Ground truth for frames `1..=N`.
    pub truth: Vec<Tensor<T>>,
}

impl<T: Real> Segment<T> {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.truth.first().map_or(0, Tensor::rows)
    }

    /// Rows `(trajectory index, start frame)`; each row rolls out `len` frames
    /// from `start` with `memory` earlier frames of context.
    pub fn gather(trajs: &[Trajectory], picks: &[(usize, usize)], len: usize, memory: usize) -> Result<Self> {
        if picks.is_empty() || len == 0 {
            return Err(Error::InvalidArgument("segment needs at least one row and one frame".into()));
        }
        for &(i, s) in picks {
            let tr = trajs.get(i).ok_or_else(|| Error::InvalidArgument(format!("no trajectory {i}")))?;
            if s + len >= tr.len() {
                return Err(Error::InvalidArgument(format!(
                    "segment at frame {s} of length {len} overruns trajectory {i} ({} frames)",
                    tr.len()
                )));
            }
        }
        let frame = |off: isize| -> Result<Tensor<T>> {
            let rows: Vec<Vec<T>> = picks
                .iter()
                .map(|&(i, s)| {
                    let idx = s as isize + off;
                    let d = trajs[i].observations[0].len();
                    if idx < 0 {
                        vec![T::zero(); d]
                    } else {
                        trajs[i].observations[idx as usize].iter().map(|&v| T::lit(v)).collect()
                    }
                })
                .collect();
            Tensor::from_rows(&rows)
        };
        let history = (0..=memory as isize).rev().map(|j| frame(-j)).collect::<Result<_>>()?;
        let truth = (1..=len as isize).map(frame).collect::<Result<_>>()?;
        let actions = (0..len).map(|f| picks.iter().map(|&(i, s)| trajs[i].actions[s + f]).collect()).collect();
        Ok(Segment { history, actions, truth })
    }
}

/// Self-conditioned rollout: each frame is generated by the full reverse
/// chain from `noise[f]` and then fed back as context.
pub fn self_rollout<T: Real, D: Denoiser<T, Cond = Conditioning<T>>>(
    denoiser: &D,
    memory: usize,
    history: &[Tensor<T>],
    actions: &[Vec<Action>],
    noise: &[Tensor<T>],
    sched: &NoiseSchedule,
    sub: &SubSchedule,
) -> Result<Vec<Tensor<T>>> {
    if noise.len() != actions.len() {
        return Err(Error::shape("rollout", format!("{} noise frames for {} actions", noise.len(), actions.len())));
    }
    let mut frames: Vec<Tensor<T>> = history.to_vec();
    let mut out = Vec::with_capacity(actions.len());
    let mut scratch = Graph::no_grad();
    for (acts, init) in actions.iter().zip(noise) {
        let cond = conditioning_from_frames(&frames, acts, memory)?;
        let f = generate_frame_from(denoiser, &mut scratch, &cond, init.clone(), sched, sub, Truncation::None, false)?;
        frames.push(f.state.s.clone());
        if frames.len() > memory + 1 {
            frames.remove(0);
        }
        out.push(f.state.s);
    }
    Ok(out)
}

/// One standard-normal `rows x dim` tensor per frame.
pub fn frame_noise<T: Real>(frames: usize, rows: usize, dim: usize, r: &mut Rng) -> Vec<Tensor<T>> {
    (0..frames).map(|_| crate::diffusion::standard_normal(rows, dim, r)).collect()
}
