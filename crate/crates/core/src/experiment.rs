//! End-to-end pipelines shared by the command line and the experiment tests.

use std::io::Write;
use std::time::Instant;

use crate::checkpoint::ScheduleKeys;
use crate::config::RunConfig;
use crate::diffusion::{NoiseSchedule, SubSchedule};
use crate::error::Result;
use crate::metrics::{ate, eval_picks, rollout_divergence, rollout_pose_errors, rpe, Divergence};
use crate::model::WorldModel;
use crate::perceptual::Embedder;
use crate::planner::{cem_plan, execute_openloop, random_plan, thread_pool, ActionBounds, ModelScorer, PlanResult};
use crate::rng;
use crate::sim::{generate_dataset, make_goal_task, Action, GoalTask, TaskConfig, Trajectory, World};
use crate::sim::fmt_real;
use crate::training::{
    posttrain_acc, split_dataset, train_stage1, AccConfig, ContextKind, LossKind, LossPoint, HELD_OUT_FRACTION,
};

/// Everything a run needs that follows from its configuration.
pub struct Setup {
    pub cfg: RunConfig,
    pub world: World,
    pub data: Vec<Trajectory>,
    pub sched: NoiseSchedule,
    pub sub: SubSchedule,
    pub baseline_sub: SubSchedule,
    pub emb: Embedder,
}

impl Setup {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let world = World::generate(cfg.world.clone())?;
        let data = generate_dataset(
            &world,
            cfg.world.trajectories,
            cfg.world.traj_len,
            rng::substream_seed(cfg.master_seed, "dataset"),
        )?;
        let sched = NoiseSchedule::new(cfg.diffusion.kind, cfg.diffusion.steps)?;
        let sub = SubSchedule::evenly_spaced(&sched, cfg.diffusion.sub_steps)?;
        let baseline_sub = SubSchedule::evenly_spaced(&sched, cfg.eval.baseline_steps)?;
        let emb = Embedder::with_defaults(cfg.world.obs_dim, cfg.perceptual.seed)?;
        Ok(Setup { cfg, world, data, sched, sub, baseline_sub, emb })
    }

    pub fn seed(&self) -> u64 {
        self.cfg.master_seed
    }

    pub fn train_split(&self) -> &[Trajectory] {
        split_dataset(&self.data, HELD_OUT_FRACTION).0
    }

    pub fn held_out(&self) -> &[Trajectory] {
        split_dataset(&self.data, HELD_OUT_FRACTION).1
    }

    pub fn schedule_keys(&self) -> ScheduleKeys {
        ScheduleKeys { steps: self.cfg.diffusion.steps, kind: self.cfg.diffusion.kind, sub_steps: self.cfg.diffusion.sub_steps }
    }

    /// Freshly initialized model.
    pub fn init_model(&self) -> Result<WorldModel<f32>> {
        let mut mc = self.cfg.model.clone();
        // 63 bits so the seed fits a TOML integer in the checkpoint sidecar
        mc.init_seed = rng::substream_seed(self.seed() ^ mc.init_seed, "model/init") & (u64::MAX >> 1);
        WorldModel::new(mc)
    }

    pub fn stage1(&self) -> Result<(WorldModel<f32>, Vec<LossPoint>)> {
        let mut m = self.init_model()?;
        let curve = train_stage1(&mut m, self.train_split(), &self.sched, &self.cfg.stage1, rng::substream_seed(self.seed(), "stage1"))?;
        Ok((m, curve))
    }

    /// Post-train a copy of `base` with `acc` (defaults to the configured one).
    pub fn acc(&self, base: &WorldModel<f32>, acc: Option<&AccConfig>) -> Result<(WorldModel<f32>, Vec<LossPoint>)> {
        let mut m = base.clone();
        let acc = acc.unwrap_or(&self.cfg.acc);
        let curve = posttrain_acc(&mut m, self.train_split(), &self.sched, &self.sub, acc, &self.emb, rng::substream_seed(self.seed(), "acc"))?;
        Ok((m, curve))
    }

    /// Held-out rollout divergence with `sub_steps` sampling steps.
    pub fn evaluate(&self, model: &WorldModel<f32>, baseline: bool) -> Result<Divergence> {
        let max_h = self.cfg.eval.horizons.iter().copied().max().unwrap_or(1);
        let picks = eval_picks(self.held_out(), max_h, model.config.memory, self.cfg.eval.stride);
        let sub = if baseline { &self.baseline_sub } else { &self.sub };
        rollout_divergence(model, self.held_out(), &picks, &self.cfg.eval.horizons, &self.sched, sub, &self.emb, rng::substream_seed(self.seed(), "eval"))
    }

    /// ATE and RPE of poses recovered from the same rollouts as `evaluate`.
    pub fn evaluate_poses(&self, model: &WorldModel<f32>, baseline: bool) -> Result<(f64, f64)> {
        let max_h = self.cfg.eval.horizons.iter().copied().max().unwrap_or(1);
        let picks = eval_picks(self.held_out(), max_h, model.config.memory, self.cfg.eval.stride);
        let sub = if baseline { &self.baseline_sub } else { &self.sub };
        let seed = rng::substream_seed(self.seed(), "eval");
        rollout_pose_errors(&self.world, model, self.held_out(), &picks, max_h, &self.sched, sub, seed)
    }

    pub fn tasks(&self) -> Result<Vec<GoalTask>> {
        let tc = TaskConfig {
            memory: self.cfg.model.memory,
            horizon: self.cfg.cem.horizon,
            goal_min: self.cfg.eval.goal_min,
            goal_max: self.cfg.eval.goal_max,
            ..TaskConfig::default()
        };
        (0..self.cfg.eval.tasks)
            .map(|i| make_goal_task(&self.world, &tc, rng::indexed_seed(self.seed(), "tasks", &[i as u64])))
            .collect()
    }

    /// Plan every task with `model`, or with one random draw per task when
    /// `model` is `None`, and execute open loop.
    pub fn plan_bench(&self, model: Option<&WorldModel<f32>>) -> Result<PlanBench> {
        let start = Instant::now();
        let pool = thread_pool()?;
        let bounds = ActionBounds::from(&self.world);
        let mut rows = Vec::new();
        for (i, task) in self.tasks()?.iter().enumerate() {
            let seed = rng::indexed_seed(self.seed(), "plan", &[i as u64]);
            let (plan, result) = match model {
                Some(m) => {
                    let scorer = ModelScorer {
                        model: m,
                        sched: &self.sched,
                        sub: &self.sub,
                        emb: &self.emb,
                        context: &task.context_obs,
                        goal: &task.goal_obs,
                        sims: self.cfg.cem.sims,
                        seed,
                        pool: &pool,
                    };
                    let r = cem_plan(&self.cfg.cem, bounds, seed, |it, c| scorer.score(it, c))?;
                    (r.actions.clone(), Some(r))
                }
                None => (random_plan(&self.cfg.cem, bounds, seed), None),
            };
            let ex = execute_openloop(&self.world, task.start(), &plan, &task.goal, self.cfg.eval.success_radius)?;
            rows.push(TaskOutcome {
                task: i,
                ne: ex.ne,
                success: ex.success,
                ate: ate(&ex.poses, &task.demo_poses)?,
                rpe: rpe(&ex.poses, &task.demo_poses, 1)?,
                plan,
                result,
            });
        }
        Ok(PlanBench { rows, seconds: start.elapsed().as_secs_f64() })
    }
}

#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub task: usize,
    pub ne: f64,
    pub success: bool,
    pub ate: f64,
    pub rpe: f64,
    pub plan: Vec<Action>,
    pub result: Option<PlanResult>,
}

#[derive(Clone, Debug)]
pub struct PlanBench {
    pub rows: Vec<TaskOutcome>,
    pub seconds: f64,
}

impl PlanBench {
    pub fn success_rate(&self) -> f64 {
        self.rows.iter().filter(|r| r.success).count() as f64 / self.rows.len().max(1) as f64
    }

    pub fn mean_ne(&self) -> f64 {
        self.rows.iter().map(|r| r.ne).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_ate(&self) -> f64 {
        self.rows.iter().map(|r| r.ate).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_rpe(&self) -> f64 {
        self.rows.iter().map(|r| r.rpe).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

/// Which ablation table a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    Loss,
    Paradigm,
    Context,
}

impl Table {
    pub const ALL: [Table; 3] = [Table::Loss, Table::Paradigm, Table::Context];

    pub fn file_name(self) -> &'static str {
        match self {
            Table::Loss => "ablation_loss.csv",
            Table::Paradigm => "ablation_paradigm.csv",
            Table::Context => "ablation_context.csv",
        }
    }

    pub fn first_column(self) -> &'static str {
        match self {
            Table::Loss => "loss",
            Table::Paradigm => "training_paradigm",
            Table::Context => "rollout_context",
        }
    }
}

/// Models trained for one seed of the ablation grid, each with its held-out
/// evaluation at the deployment step count.
pub struct Ablation {
    pub stage1: (WorldModel<f32>, Divergence),
    /// Stage I then ACC with perceptual loss and inference-consistent context.
    pub acc: (WorldModel<f32>, Divergence),
    /// ACC from a fresh initialization.
    pub acc_only: (WorldModel<f32>, Divergence),
    pub l1: (WorldModel<f32>, Divergence),
    pub l2: (WorldModel<f32>, Divergence),
    pub x0hat: (WorldModel<f32>, Divergence),
    /// Stage I evaluated with the many-step baseline sampler.
    pub stage1_baseline: Divergence,
    pub seconds: f64,
}

impl Ablation {
    /// `(table, row label, divergence)` in display order.
    pub fn rows(&self) -> Vec<(Table, &'static str, &Divergence)> {
        vec![
            (Table::Loss, "L2 loss", &self.l2.1),
            (Table::Loss, "L1 loss", &self.l1.1),
            (Table::Loss, "Perceptual loss (ACC)", &self.acc.1),
            (Table::Paradigm, "Only structure training", &self.stage1.1),
            (Table::Paradigm, "Only ACC training", &self.acc_only.1),
            (Table::Paradigm, "Structure training + ACC training", &self.acc.1),
            (Table::Context, "x0hat", &self.x0hat.1),
            (Table::Context, "inference-consistent (ICSD)", &self.acc.1),
        ]
    }
}

impl Setup {
    /// Train and evaluate every model of the ablation grid.
    pub fn ablation(&self) -> Result<Ablation> {
        let start = Instant::now();
        let (m1, _) = self.stage1()?;
        let variant = |base: &WorldModel<f32>, loss: LossKind, context: ContextKind| -> Result<(WorldModel<f32>, Divergence)> {
            let cfg = AccConfig { loss, context, ..self.cfg.acc.clone() };
            let (m, _) = self.acc(base, Some(&cfg))?;
            let d = self.evaluate(&m, false)?;
            Ok((m, d))
        };
        let (loss, context) = (self.cfg.acc.loss, self.cfg.acc.context);
        let acc = variant(&m1, loss, context)?;
        let acc_only = variant(&self.init_model()?, loss, context)?;
        let l1 = variant(&m1, LossKind::L1, context)?;
        let l2 = variant(&m1, LossKind::L2, context)?;
        let x0hat = variant(&m1, loss, ContextKind::X0hat)?;
        let d1 = self.evaluate(&m1, false)?;
        let stage1_baseline = self.evaluate(&m1, true)?;
        Ok(Ablation {
            stage1: (m1, d1),
            acc,
            acc_only,
            l1,
            l2,
            x0hat,
            stage1_baseline,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// One table as CSV: row label, seed, config hash, error and FFD at the
/// longest horizon, and the mean error over every rolled-out frame.
pub fn write_ablation<W: Write>(out: W, table: Table, rows: &[(u64, &str, &Divergence)], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([table.first_column(), "seed", "config_hash", "horizon", "perceptual", "ffd", "mean_error"])?;
    for (seed, label, d) in rows {
        let last = d.horizons.len() - 1;
        w.write_record([
            label.to_string(),
            seed.to_string(),
            config_hash.to_string(),
            d.horizons[last].to_string(),
            fmt_real(d.perceptual[last]),
            fmt_real(d.ffd[last]),
            fmt_real(d.mean_error()),
        ])?;
    }
    w.flush()?;
    Ok(())
}
