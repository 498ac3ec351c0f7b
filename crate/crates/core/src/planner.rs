//! Cross-entropy-method planning over action sequences, scored by rolling
//! the world model forward and comparing the last frame with the goal.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::diffusion::{NoiseSchedule, SubSchedule};
use crate::error::{Error, Result};
use crate::model::WorldModel;
use crate::perceptual::Embedder;
use crate::rng;
use crate::rollout::self_rollout;
use crate::sim::{fmt_real, Action, Pose, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalChoice {
    /// Best candidate evaluated in any iteration.
    Best,
    /// Mean of the last elite set.
    EliteMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub horizon: usize,
    pub samples: usize,
    pub iterations: usize,
    /// Rollouts per candidate; a candidate keeps its best score.
    pub sims: usize,
    pub elite_frac: f64,
    /// Initial proposal std as a fraction of each action bound.
    pub init_std: f64,
    /// Lower bound on the refit std, as a fraction of each action bound.
    pub std_floor: f64,
    pub final_choice: FinalChoice,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            horizon: 16,
            samples: 120,
            iterations: 1,
            sims: 3,
            elite_frac: 0.1,
            init_std: 0.5,
            std_floor: 0.02,
            final_choice: FinalChoice::Best,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.samples == 0 || self.iterations == 0 || self.sims == 0 {
            return Err(Error::Config("cem horizon, samples, iterations and sims must be positive".into()));
        }
        if !(self.elite_frac > 0.0 && self.elite_frac <= 1.0) {
            return Err(Error::Config(format!("cem.elite_frac must be in (0, 1], got {}", self.elite_frac)));
        }
        if !(self.init_std >= 0.0 && self.std_floor >= 0.0) {
            return Err(Error::Config("cem std settings must be non-negative".into()));
        }
        Ok(())
    }

    pub fn elites(&self) -> usize {
        ((self.elite_frac * self.samples as f64).ceil() as usize).clamp(1, self.samples)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    /// Proposal mean and std used to sample this iteration, per step.
    pub mean: Vec<Action>,
    pub std: Vec<Action>,
    /// Lowest elite score.
    pub elite_threshold: f64,
    /// Best score seen up to and including this iteration.
    pub best_so_far: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    pub actions: Vec<Action>,
    pub score: f64,
    pub iterations: Vec<IterationLog>,
    /// `scores[i][c]`: candidate `c` of iteration `i`.
    pub scores: Vec<Vec<f64>>,
    /// `(iteration, candidate)` of the returned plan, when it was evaluated.
    pub chosen: Option<(usize, usize)>,
}

/// Bounds used to clip proposals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionBounds {
    pub v_max: f64,
    pub w_max: f64,
}

impl From<&World> for ActionBounds {
    fn from(w: &World) -> Self {
        ActionBounds { v_max: w.config.v_max, w_max: w.config.w_max }
    }
}

fn sample_candidate(mean: &[Action], std: &[Action], b: ActionBounds, seed: u64, iter: usize, cand: usize) -> Vec<Action> {
    let mut r = rng::indexed(seed, "cem/sample", &[iter as u64, cand as u64]);
    mean.iter()
        .zip(std)
        .map(|(m, s)| {
            let zv: f64 = StandardNormal.sample(&mut r);
            let zw: f64 = StandardNormal.sample(&mut r);
            Action::new((m.v + s.v * zv).clamp(-b.v_max, b.v_max), (m.w + s.w * zw).clamp(-b.w_max, b.w_max))
        })
        .collect()
}

/// Worker pool sized by `MWM_THREADS`, defaulting to the logical core count.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = std::env::var("MWM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(0);
    rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| Error::Config(e.to_string()))
}

/// CEM over `horizon`-step action sequences. `score` receives the iteration
/// and `(candidate index, actions)` pairs and returns one score per pair;
/// larger is better and `-inf` marks an infeasible candidate.
pub fn cem_plan<F>(cfg: &CemConfig, bounds: ActionBounds, seed: u64, score: F) -> Result<PlanResult>
where
    F: Fn(usize, &[(usize, Vec<Action>)]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let h = cfg.horizon;
    let mut mean = vec![Action::default(); h];
    let floor = Action::new(cfg.std_floor * bounds.v_max, cfg.std_floor * bounds.w_max);
    let mut std = vec![Action::new(cfg.init_std * bounds.v_max, cfg.init_std * bounds.w_max); h];
    let mut best: Option<(f64, Vec<Action>, (usize, usize))> = None;
    let mut logs = Vec::with_capacity(cfg.iterations);
    let mut all_scores = Vec::with_capacity(cfg.iterations);
    let mut last_elite_mean = mean.clone();
    for it in 0..cfg.iterations {
        let cands: Vec<(usize, Vec<Action>)> =
            (0..cfg.samples).map(|c| (c, sample_candidate(&mean, &std, bounds, seed, it, c))).collect();
        let scores = score(it, &cands)?;
        if scores.len() != cands.len() {
            return Err(Error::shape("cem_plan", format!("{} scores for {} candidates", scores.len(), cands.len())));
        }
        let scores: Vec<f64> = scores.into_iter().map(|s| if s.is_nan() { f64::NEG_INFINITY } else { s }).collect();
        // Descending score, ties broken by candidate index.
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let top = order[0];
        if scores[top] > f64::NEG_INFINITY && best.as_ref().is_none_or(|b| scores[top] > b.0) {
            best = Some((scores[top], cands[top].1.clone(), (it, top)));
        }
        let elites: Vec<usize> =
            order.iter().copied().take(cfg.elites()).filter(|&c| scores[c] > f64::NEG_INFINITY).collect();
        logs.push(IterationLog {
            mean: mean.clone(),
            std: std.clone(),
            elite_threshold: elites.last().map_or(f64::NEG_INFINITY, |&c| scores[c]),
            best_so_far: best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0),
        });
        all_scores.push(scores);
        if elites.is_empty() {
            continue;
        }
        let n = elites.len() as f64;
        for s in 0..h {
            let (mv, mw) = elites.iter().fold((0.0, 0.0), |acc, &c| (acc.0 + cands[c].1[s].v, acc.1 + cands[c].1[s].w));
            let (mv, mw) = (mv / n, mw / n);
            let (vv, vw) = elites.iter().fold((0.0, 0.0), |acc, &c| {
                (acc.0 + (cands[c].1[s].v - mv).powi(2), acc.1 + (cands[c].1[s].w - mw).powi(2))
            });
            mean[s] = Action::new(mv, mw);
            std[s] = Action::new((vv / n).sqrt().max(floor.v), (vw / n).sqrt().max(floor.w));
        }
        last_elite_mean = mean.clone();
    }
    let Some((best_score, best_actions, at)) = best else {
        return Err(Error::NoFeasiblePlan);
    };
    let (actions, score_out, chosen) = match cfg.final_choice {
        FinalChoice::Best => (best_actions, best_score, Some(at)),
        FinalChoice::EliteMean => (last_elite_mean, best_score, None),
    };
    Ok(PlanResult { actions, score: score_out, iterations: logs, scores: all_scores, chosen })
}

/// Scores candidates by rolling the world model from a shared context.
pub struct ModelScorer<'a> {
    pub model: &'a WorldModel<f32>,
    pub sched: &'a NoiseSchedule,
    pub sub: &'a SubSchedule,
    pub emb: &'a Embedder,
    /// `memory + 1` frames, oldest first.
    pub context: &'a [Vec<f64>],
    pub goal: &'a [f64],
    pub sims: usize,
    pub seed: u64,
    pub pool: &'a rayon::ThreadPool,
}

const CHUNK_ROWS: usize = 64;

impl ModelScorer<'_> {
    /// Terminal frames for `rows` of `(candidate, sim, actions)`, one
    /// independent noise stream per row.
    fn terminal_frames(&self, iter: usize, rows: &[(usize, usize, &[Action])]) -> Result<Tensor<f32>> {
        let b = rows.len();
        let d = self.model.config.obs_dim;
        let horizon = rows[0].2.len();
        let history: Vec<Tensor<f32>> = self
            .context
            .iter()
            .map(|f| {
                let row: Vec<f32> = f.iter().map(|&v| v as f32).collect();
                Tensor::new(b, d, row.repeat(b))
            })
            .collect::<Result<_>>()?;
        let actions: Vec<Vec<Action>> = (0..horizon).map(|s| rows.iter().map(|r| r.2[s]).collect()).collect();
        let mut noise_data = vec![Vec::with_capacity(b * d); horizon];
        for &(c, sim, _) in rows {
            let mut r = rng::indexed(self.seed, "plan/rollout", &[iter as u64, c as u64, sim as u64]);
            for frame in noise_data.iter_mut() {
                for _ in 0..d {
                    let z: f64 = StandardNormal.sample(&mut r);
                    frame.push(z as f32);
                }
            }
        }
        let noise = noise_data.into_iter().map(|v| Tensor::new(b, d, v)).collect::<Result<Vec<_>>>()?;
        let out = self_rollout(self.model, self.model.config.memory, &history, &actions, &noise, self.sched, self.sub)?;
        Ok(out.into_iter().last().expect("horizon >= 1"))
    }

    fn score_rows(&self, iter: usize, rows: &[(usize, usize, &[Action])]) -> Result<Vec<f64>> {
        let goal: Vec<f32> = self.goal.iter().map(|&v| v as f32).collect();
        match self.terminal_frames(iter, rows) {
            Ok(last) => {
                let target = Tensor::new(rows.len(), goal.len(), goal.repeat(rows.len()))?;
                let d = self.emb.distance_batch(&last, &target)?;
                Ok(d.into_iter().map(|v| if v.is_finite() { -v } else { f64::NEG_INFINITY }).collect())
            }
            // A diverging row poisons the batch; rescore rows one at a time.
            Err(Error::Numerical(_)) if rows.len() > 1 => {
                rows.iter().map(|r| Ok(self.score_rows(iter, std::slice::from_ref(r))?[0])).collect()
            }
            Err(Error::Numerical(_)) => Ok(vec![f64::NEG_INFINITY]),
            Err(e) => Err(e),
        }
    }

    /// Best-of-`sims` score for each candidate.
    pub fn score(&self, iter: usize, cands: &[(usize, Vec<Action>)]) -> Result<Vec<f64>> {
        if cands.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<(usize, usize, &[Action])> = cands
            .iter()
            .flat_map(|(c, a)| (0..self.sims).map(move |s| (*c, s, a.as_slice())))
            .collect();
        let chunks: Vec<Result<Vec<f64>>> =
            self.pool.install(|| rows.par_chunks(CHUNK_ROWS).map(|ch| self.score_rows(iter, ch)).collect());
        let mut flat = Vec::with_capacity(rows.len());
        for c in chunks {
            flat.extend(c?);
        }
        Ok(flat.chunks(self.sims).map(|s| s.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect())
    }
}

/// Score of one plan: negative perceptual distance between the terminal
/// rolled-out frame and the goal, best over the scorer's sims.
pub fn score_plan(scorer: &ModelScorer<'_>, actions: &[Action]) -> Result<f64> {
    Ok(scorer.score(0, &[(0, actions.to_vec())])?[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Execution {
    pub poses: Vec<Pose>,
    /// Distance from the final pose to the goal.
    pub ne: f64,
    pub success: bool,
}

pub const SUCCESS_RADIUS: f64 = 0.5;

/// Run the plan on the simulator without feedback.
pub fn execute_openloop(world: &World, start: &Pose, plan: &[Action], goal: &Pose, radius: f64) -> Result<Execution> {
    let poses = world.rollout(start, plan)?;
    let ne = poses.last().expect("start pose").distance(goal);
    Ok(Execution { poses, ne, success: ne <= radius })
}

/// A plan drawn once from the initial proposal, as a no-model baseline.
pub fn random_plan(cfg: &CemConfig, bounds: ActionBounds, seed: u64) -> Vec<Action> {
    let mean = vec![Action::default(); cfg.horizon];
    let std = vec![Action::new(cfg.init_std * bounds.v_max, cfg.init_std * bounds.w_max); cfg.horizon];
    sample_candidate(&mean, &std, bounds, rng::substream_seed(seed, "plan/random"), 0, 0)
}

/// `task_id, iteration, candidate, score, chosen`.
pub fn write_candidates<W: Write>(out: W, results: &[(usize, &PlanResult)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task_id", "iteration", "candidate", "score", "chosen"])?;
    for (task, r) in results {
        for (i, scores) in r.scores.iter().enumerate() {
            for (c, s) in scores.iter().enumerate() {
                let chosen = r.chosen == Some((i, c));
                w.write_record([task.to_string(), i.to_string(), c.to_string(), fmt_real(*s), (chosen as u8).to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `task_id, step, v, w`.
pub fn write_plans<W: Write>(out: W, plans: &[(usize, &[Action])]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task_id", "step", "v", "w"])?;
    for (task, plan) in plans {
        for (s, a) in plan.iter().enumerate() {
            w.write_record([task.to_string(), s.to_string(), fmt_real(a.v), fmt_real(a.w)])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const B: ActionBounds = ActionBounds { v_max: 0.5, w_max: 0.5 };

    fn analytic(cands: &[(usize, Vec<Action>)]) -> Vec<f64> {
        cands.iter().map(|(_, a)| -(a[0].v - 0.3).powi(2)).collect()
    }

    #[test]
    fn single_candidate_is_returned() {
        let cfg = CemConfig { horizon: 2, samples: 1, iterations: 1, sims: 1, ..CemConfig::default() };
        let r = cem_plan(&cfg, B, 3, |_, c| Ok(analytic(c))).unwrap();
        assert_eq!(r.scores[0].len(), 1);
        assert_eq!(r.chosen, Some((0, 0)));
        assert_eq!(r.score, r.scores[0][0]);
    }

    #[test]
    fn quadratic_mean_converges() {
        let cfg = CemConfig { horizon: 1, iterations: 10, std_floor: 0.0, ..CemConfig::default() };
        let r = cem_plan(&cfg, B, 11, |_, c| Ok(analytic(c))).unwrap();
        // The mean refit after the last iteration is not logged; recompute it.
        let last = r.iterations.last().unwrap();
        assert!((last.mean[0].v - 0.3).abs() < 1e-2, "{:?}", last.mean);
        for w in r.iterations.windows(2) {
            assert!(w[1].best_so_far >= w[0].best_so_far);
        }
    }

    #[test]
    fn all_infeasible_is_an_error() {
        let cfg = CemConfig { horizon: 1, samples: 4, ..CemConfig::default() };
        let e = cem_plan(&cfg, B, 0, |_, c| Ok(vec![f64::NEG_INFINITY; c.len()])).unwrap_err();
        assert!(matches!(e, Error::NoFeasiblePlan));
    }

    #[test]
    fn zero_plan_leaves_robot_in_place() {
        let w = World::generate(Default::default()).unwrap();
        let start = Pose::new(0.0, 0.0, 0.0);
        let goal = Pose::new(3.0, 0.0, 0.0);
        let ex = execute_openloop(&w, &start, &[Action::default(); 5], &goal, SUCCESS_RADIUS).unwrap();
        assert!((ex.ne - 3.0).abs() < 1e-12);
        assert!(!ex.success);
    }
}
