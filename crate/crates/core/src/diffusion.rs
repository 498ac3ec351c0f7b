//! Noise schedules, forward noising, the deterministic DDIM update and the
//! skip-step frame generator.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-beta" | "linear" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

const COSINE_OFFSET: f64 = 0.008;
const COSINE_FLOOR: f64 = 1e-9;

/// Cumulative signal coefficients `alpha_bar_1..alpha_bar_T`, with the
/// convention `alpha_bar_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("diffusion needs at least 2 steps, got {steps}")));
        }
        let alpha_bar = match kind {
            ScheduleKind::LinearBeta => {
                let (lo, hi) = (1e-4, 2e-2);
                let mut acc = 1.0;
                (0..steps)
                    .map(|i| {
                        let beta = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
                        acc *= 1.0 - beta;
                        acc
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| (((t / steps as f64) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                let f0 = f(0.0);
                (1..=steps).map(|t| (f(t as f64) / f0).max(COSINE_FLOOR)).collect()
            }
        };
        Ok(NoiseSchedule { kind, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.alpha_bar.len() => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::InvalidArgument(format!("timestep {t} outside 0..={}", self.alpha_bar.len()))),
        }
    }
}

/// Increasing skip-step subset `t_1 < ... < t_T'` of `1..=T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubSchedule {
    steps: Vec<usize>,
}

impl SubSchedule {
    /// `count` evenly spaced steps ending at `T`.
    pub fn evenly_spaced(sched: &NoiseSchedule, count: usize) -> Result<Self> {
        let total = sched.steps();
        if count == 0 || count > total {
            return Err(Error::Config(format!("sub-schedule size must be in 1..={total}, got {count}")));
        }
        let steps = (1..=count).map(|i| ((i * total) as f64 / count as f64).round() as usize).collect();
        Self::from_steps(sched, steps)
    }

    pub fn from_steps(sched: &NoiseSchedule, steps: Vec<usize>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("empty sub-schedule".into()));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) || steps[0] < 1 || *steps.last().expect("non-empty") > sched.steps() {
            return Err(Error::Config(format!("invalid sub-schedule {steps:?}")));
        }
        Ok(SubSchedule { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `t_k` for `k` in `1..=len`.
    pub fn t(&self, k: usize) -> usize {
        self.steps[k - 1]
    }

    /// The step below `t_k`: `t_{k-1}`, or 0 for `k = 1`.
    pub fn below(&self, k: usize) -> usize {
        if k == 1 {
            0
        } else {
            self.steps[k - 2]
        }
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }
}

/// A (batch of) noisy state(s) at timestep `t`; `t = 0` is clean.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState<T> {
    pub s: Tensor<T>,
    pub t: usize,
}

pub fn standard_normal<T: Real>(rows: usize, cols: usize, r: &mut Rng) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            T::lit(z)
        })
        .collect();
    Tensor::new(rows, cols, data).expect("positive extents")
}

/// `s_t = sqrt(ab_t) s + sqrt(1 - ab_t) eps`.
pub fn forward_noise<T: Real>(s: &Tensor<T>, t: usize, sched: &NoiseSchedule, eps: &Tensor<T>) -> Result<DiffusionState<T>> {
    if t < 1 || t > sched.steps() {
        return Err(Error::InvalidArgument(format!("forward noising needs 1 <= t <= {}, got {t}", sched.steps())));
    }
    if s.shape() != eps.shape() {
        return Err(Error::shape("forward_noise", format!("{:?} vs {:?}", s.shape(), eps.shape())));
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(DiffusionState { s: s.zip_map(eps, |x, e| a * x + b * e), t })
}

/// Deterministic DDIM move between arbitrary signal levels `ab_from -> ab_to`.
pub fn ddim_update<T: Real>(s: &Tensor<T>, s0_hat: &Tensor<T>, ab_from: f64, ab_to: f64) -> Result<Tensor<T>> {
    if s.shape() != s0_hat.shape() {
        return Err(Error::shape("ddim_update", format!("{:?} vs {:?}", s.shape(), s0_hat.shape())));
    }
    if ab_to >= 1.0 {
        return Ok(s0_hat.clone());
    }
    if ab_from >= 1.0 {
        return Err(Error::Numerical("DDIM step from a noise-free level divides by zero".into()));
    }
    let (sa_from, sn_from) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (sa_to, sn_to) = (T::lit(ab_to.sqrt()), T::lit((1.0 - ab_to).sqrt()));
    let (sa_from, inv_sn_from) = (T::lit(sa_from), T::lit(1.0 / sn_from));
    Ok(s.zip_map(s0_hat, |x, x0| sa_to * x0 + sn_to * ((x - sa_from * x0) * inv_sn_from)))
}

/// DDIM (eta = 0) from `state.t` down to `t_prev`. `t_prev == state.t` is the
/// identity; `t_prev == 0` returns `s0_hat` exactly.
pub fn ddim_step<T: Real>(
    state: &DiffusionState<T>,
    s0_hat: &Tensor<T>,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<DiffusionState<T>> {
    if t_prev > state.t {
        return Err(Error::InvalidArgument(format!("DDIM must move down in t, got {} -> {t_prev}", state.t)));
    }
    if t_prev == state.t {
        return Ok(state.clone());
    }
    let s = ddim_update(&state.s, s0_hat, sched.alpha_bar(state.t)?, sched.alpha_bar(t_prev)?)?;
    Ok(DiffusionState { s, t: t_prev })
}

/// Generalized DDIM with stochasticity `eta` (1 recovers ancestral DDPM
/// sampling on the sub-schedule). Baseline sampler only.
pub fn ddim_step_eta<T: Real>(
    state: &DiffusionState<T>,
    s0_hat: &Tensor<T>,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    r: &mut Rng,
) -> Result<DiffusionState<T>> {
    if eta == 0.0 || t_prev == 0 || t_prev == state.t {
        return ddim_step(state, s0_hat, t_prev, sched);
    }
    let (ab, ab_prev) = (sched.alpha_bar(state.t)?, sched.alpha_bar(t_prev)?);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let noise = standard_normal::<T>(state.s.rows(), state.s.cols(), r);
    let inv = T::lit(1.0 / (1.0 - ab).sqrt());
    let (sa, sab, d, sg) = (T::lit(ab_prev.sqrt()), T::lit(ab.sqrt()), T::lit(dir), T::lit(sigma));
    let eps = state.s.zip_map(s0_hat, |x, x0| (x - sab * x0) * inv);
    let mut s = s0_hat.map(|x0| sa * x0);
    for ((o, &e), &z) in s.data_mut().iter_mut().zip(eps.data()).zip(noise.data()) {
        *o += d * e + sg * z;
    }
    Ok(DiffusionState { s, t: t_prev })
}

/// Anything that maps a noisy batch at timestep `t` to a clean estimate.
pub trait Denoiser<T: Real> {
    type Cond;

    /// Record the estimate on `g`. With a [`Graph::no_grad`] graph this is a
    /// plain forward evaluation.
    fn denoise(&self, g: &mut Graph<T>, noisy: &Tensor<T>, t: usize, cond: &Self::Cond) -> Result<Var>;

    fn predict(&self, noisy: &Tensor<T>, t: usize, cond: &Self::Cond) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let v = self.denoise(&mut g, noisy, t, cond)?;
        Ok(g.value(v).clone())
    }
}

/// Where the reverse chain stops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Truncation {
    /// Run to `t = 0`.
    None,
    /// Stop after the estimate at `t_k`, `k` in `1..=T'`.
    At(usize),
}

#[derive(Debug)]
pub struct FrameOutput<T> {
    /// `(t, s_t)` fed to each denoiser call, from `t_T'` downwards.
    pub visited: Vec<(usize, Tensor<T>)>,
    /// Estimate produced at each visited step.
    pub estimates: Vec<Tensor<T>>,
    /// Gradient-bearing estimate at the truncation step, when requested.
    pub grad_estimate: Option<Var>,
    /// `(t_k, s^(t_k))` when truncated, else `(0, s0_hat)`.
    pub state: DiffusionState<T>,
}

/// Reverse process from standard normal noise at `t_T'`.
///
/// Every denoiser call before the truncation step runs on a scratch no-grad
/// graph; only the call at `t_k` is recorded on `g`, and only if
/// `grad_at_truncation` is set.
#[allow(clippy::too_many_arguments)]
pub fn generate_frame<T: Real, D: Denoiser<T>>(
    denoiser: &D,
    g: &mut Graph<T>,
    cond: &D::Cond,
    rows: usize,
    dim: usize,
    sched: &NoiseSchedule,
    sub: &SubSchedule,
    r: &mut Rng,
    truncate: Truncation,
    grad_at_truncation: bool,
) -> Result<FrameOutput<T>> {
    let init = standard_normal::<T>(rows, dim, r);
    generate_frame_from(denoiser, g, cond, init, sched, sub, truncate, grad_at_truncation)
}

/// [`generate_frame`] with explicit initial noise.
#[allow(clippy::too_many_arguments)]
pub fn generate_frame_from<T: Real, D: Denoiser<T>>(
    denoiser: &D,
    g: &mut Graph<T>,
    cond: &D::Cond,
    init: Tensor<T>,
    sched: &NoiseSchedule,
    sub: &SubSchedule,
    truncate: Truncation,
    grad_at_truncation: bool,
) -> Result<FrameOutput<T>> {
    let stop_k = match truncate {
        Truncation::None => 1,
        Truncation::At(k) if (1..=sub.len()).contains(&k) => k,
        Truncation::At(k) => {
            return Err(Error::InvalidArgument(format!("truncation index {k} outside 1..={}", sub.len())))
        }
    };
    let mut state = DiffusionState { s: init, t: sub.t(sub.len()) };
    let mut visited = Vec::new();
    let mut estimates = Vec::new();
    let mut grad_estimate = None;
    for k in (stop_k..=sub.len()).rev() {
        debug_assert_eq!(state.t, sub.t(k));
        visited.push((state.t, state.s.clone()));
        let is_last = k == stop_k;
        let s0 = if is_last && grad_at_truncation && truncate != Truncation::None {
            let v = denoiser.denoise(g, &state.s, state.t, cond)?;
            grad_estimate = Some(v);
            g.value(v).clone()
        } else {
            denoiser.predict(&state.s, state.t, cond)?
        };
        if !s0.is_finite() {
            return Err(Error::Numerical(format!("non-finite estimate at t={}", state.t)));
        }
        if !(is_last && truncate != Truncation::None) {
            state = ddim_step(&state, &s0, sub.below(k), sched)?;
        }
        estimates.push(s0);
    }
    Ok(FrameOutput { visited, estimates, grad_estimate, state })
}

/// Continue a chain truncated at `t_k` to `t = 0` without gradient, given the
/// estimate already produced at `t_k`. The result is the state inference
/// would have reached along the same noise path.
pub fn complete_frame<T: Real, D: Denoiser<T>>(
    denoiser: &D,
    cond: &D::Cond,
    state: &DiffusionState<T>,
    s0_at_state: &Tensor<T>,
    sched: &NoiseSchedule,
    sub: &SubSchedule,
) -> Result<Tensor<T>> {
    let k = sub
        .steps()
        .iter()
        .position(|&t| t == state.t)
        .map(|i| i + 1)
        .ok_or_else(|| Error::InvalidArgument(format!("state t={} is not on the sub-schedule", state.t)))?;
    let mut cur = ddim_step(state, s0_at_state, sub.below(k), sched)?;
    for j in (1..k).rev() {
        let s0 = denoiser.predict(&cur.s, cur.t, cond)?;
        cur = ddim_step(&cur, &s0, sub.below(j), sched)?;
    }
    debug_assert_eq!(cur.t, 0);
    Ok(cur.s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    struct Oracle(Tensor<f64>);

    impl Denoiser<f64> for Oracle {
        type Cond = ();

        fn denoise(&self, g: &mut Graph<f64>, _: &Tensor<f64>, _: usize, _: &()) -> Result<Var> {
            Ok(g.constant(self.0.clone()))
        }
    }

    fn lin() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::LinearBeta, 1000).unwrap()
    }

    #[test]
    fn schedules_decrease() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            let s = NoiseSchedule::new(kind, 1000).unwrap();
            let ab: Vec<f64> = (1..=1000).map(|t| s.alpha_bar(t).unwrap()).collect();
            assert!(ab.windows(2).all(|w| w[1] < w[0]), "{kind:?}");
            assert!(ab[0] < 1.0 && ab[999] > 0.0);
        }
        assert!(NoiseSchedule::new(ScheduleKind::LinearBeta, 1).is_err());
        assert!("sigmoid".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn linear_first_term() {
        assert!((lin().alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn cosine_profile() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
        let f = |t: f64| -> f64 { ((t / 1000.0 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2) };
        for t in [1usize, 10, 250, 500, 900, 999] {
            let ratio = s.alpha_bar(t).unwrap() / s.alpha_bar(1).unwrap();
            assert!((ratio - f(t as f64) / f(1.0)).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn forward_noise_examples() {
        let s = lin();
        let x = Tensor::row(vec![0.3, -0.7]);
        let z = forward_noise(&x, 10, &s, &Tensor::zeros(1, 2)).unwrap();
        let k = s.alpha_bar(10).unwrap().sqrt();
        assert_eq!(z.s.data(), &[0.3 * k, -0.7 * k]);
        assert!(forward_noise(&x, 0, &s, &Tensor::zeros(1, 2)).is_err());
        assert!(forward_noise(&x, 1001, &s, &Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn forward_noise_quarter_signal() {
        // sqrt(0.25) * [1, 0] + sqrt(0.75) * [0, 1]
        let out = ddim_free_noise(&Tensor::row(vec![1.0, 0.0]), 0.25, &Tensor::row(vec![0.0, 1.0]));
        assert!((out[0] - 0.5).abs() < 1e-12 && (out[1] - 0.8660).abs() < 1e-4);
    }

    fn ddim_free_noise(s: &Tensor<f64>, ab: f64, e: &Tensor<f64>) -> Vec<f64> {
        s.zip_map(e, |x, n| ab.sqrt() * x + (1.0 - ab).sqrt() * n).into_data()
    }

    #[test]
    fn ddim_hand_value() {
        let out: Tensor<f64> = ddim_update(&Tensor::row(vec![1.3660]), &Tensor::row(vec![1.0]), 0.25, 0.81).unwrap();
        assert!((out.item() - 1.3359).abs() < 1e-4, "{}", out.item());
    }

    #[test]
    fn ddim_identity_and_zero_noise() {
        let s = lin();
        let x0 = Tensor::row(vec![0.2, -0.4, 0.9]);
        let st = DiffusionState { s: x0.map(|v| v * s.alpha_bar(500).unwrap().sqrt()), t: 500 };
        assert_eq!(ddim_step(&st, &x0, 500, &s).unwrap(), st);
        let down = ddim_step(&st, &x0, 200, &s).unwrap();
        let k = s.alpha_bar(200).unwrap().sqrt();
        for (a, b) in down.s.data().iter().zip(x0.data()) {
            assert!((a - b * k).abs() < 1e-12);
        }
        assert_eq!(ddim_step(&st, &x0, 0, &s).unwrap().s, x0);
        assert!(ddim_step(&st, &x0, 600, &s).is_err());
        assert!(ddim_update(&x0, &x0, 1.0, 0.5).is_err());
    }

    #[test]
    fn oracle_chain_collapses_to_target() {
        let s = lin();
        let target = Tensor::row(vec![0.5, -0.25, 0.125]);
        let oracle = Oracle(target.clone());
        for n in [1, 5, 25] {
            let sub = SubSchedule::evenly_spaced(&s, n).unwrap();
            let mut r = rng::seeded(3);
            let mut g = Graph::no_grad();
            let out = generate_frame(&oracle, &mut g, &(), 1, 3, &s, &sub, &mut r, Truncation::None, false).unwrap();
            assert_eq!(out.state.t, 0);
            assert!(out.state.s.max_abs_diff(&target) <= 1e-5 * 0.5);
            assert_eq!(out.visited.len(), n);
        }
    }

    #[test]
    fn truncation_bounds() {
        let s = lin();
        let sub = SubSchedule::evenly_spaced(&s, 5).unwrap();
        let oracle = Oracle(Tensor::row(vec![0.0]));
        let mut g = Graph::no_grad();
        for k in [0, 6] {
            let r = generate_frame(&oracle, &mut g, &(), 1, 1, &s, &sub, &mut rng::seeded(0), Truncation::At(k), true);
            assert!(r.is_err());
        }
        let top = generate_frame(&oracle, &mut g, &(), 1, 1, &s, &sub, &mut rng::seeded(0), Truncation::At(5), true).unwrap();
        assert_eq!(top.visited.len(), 1);
        assert_eq!(top.state.t, 1000);
    }

    #[test]
    fn sub_schedule_spacing() {
        let s = lin();
        assert_eq!(SubSchedule::evenly_spaced(&s, 5).unwrap().steps(), &[200, 400, 600, 800, 1000]);
        assert_eq!(SubSchedule::evenly_spaced(&s, 1).unwrap().steps(), &[1000]);
        assert!(SubSchedule::evenly_spaced(&s, 0).is_err());
        assert!(SubSchedule::from_steps(&s, vec![5, 5]).is_err());
        assert!(SubSchedule::from_steps(&s, vec![0, 5]).is_err());
    }
}
