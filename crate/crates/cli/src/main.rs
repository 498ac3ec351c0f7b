use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mwm::checkpoint::{self, ScheduleKeys};
use mwm::config::RunConfig;
use mwm::experiment::{write_ablation, Setup, Table};
use mwm::metrics::{write_reports, MetricReport, REPORT_HEADER};
use mwm::model::WorldModel;
use mwm::planner::{write_candidates, write_plans};
use mwm::sim::{fmt_real, write_trajectories_csv};
use mwm::training::write_loss_curve;

#[derive(Parser)]
#[command(name = "mwm", version, about = "Mobile world model: data, training, evaluation and planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides master_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the trajectory dataset as dataset.csv.
    GenData,
    /// Teacher-forced pretraining; writes stage1.ckpt and stage1_loss.csv.
    TrainStage1,
    /// ACC post-training of stage1.ckpt; writes acc.ckpt and acc_loss.csv.
    PosttrainAcc {
        /// Base checkpoint (default: <out>/stage1.ckpt).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Held-out rollout metrics of every checkpoint in the output directory.
    RolloutEval,
    /// Goal-reaching benchmark for a random planner and every checkpoint.
    PlanBench,
    /// Train and evaluate the loss, paradigm and context ablations.
    Ablate,
    /// Merge metric CSVs from run directories into summary.csv and curves.csv.
    Report {
        /// Run directories to merge (default: the output directory).
        dirs: Vec<PathBuf>,
    },
}

/// Bad input that is not a library validation error.
#[derive(Debug)]
struct Usage;

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("invalid input")
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| {
                c.downcast_ref::<mwm::Error>().is_some_and(mwm::Error::is_validation) || c.is::<Usage>()
            });
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}

const CHECKPOINTS: [&str; 2] = ["stage1", "acc"];

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    if let Command::Report { dirs } = &cli.command {
        let dirs = if dirs.is_empty() { vec![out.clone()] } else { dirs.clone() };
        return report(&dirs, &out);
    }

    let hash = cfg.hash()?;
    let setup = Setup::new(cfg)?;
    match cli.command {
        Command::GenData => {
            write_trajectories_csv(create(&out, "dataset.csv")?, &setup.data, setup.world.obs_dim())?;
            eprintln!("wrote {} trajectories", setup.data.len());
        }
        Command::TrainStage1 => {
            let (m, curve) = setup.stage1()?;
            checkpoint::save(&out.join("stage1.ckpt"), &m, &setup.schedule_keys())?;
            write_loss_curve(create(&out, "stage1_loss.csv")?, &curve)?;
            log_curve("stage1", &curve);
        }
        Command::PosttrainAcc { from } => {
            let from = from.unwrap_or_else(|| out.join("stage1.ckpt"));
            let base = load_checked(&from, &setup)?;
            let (m, curve) = setup.acc(&base, None)?;
            checkpoint::save(&out.join("acc.ckpt"), &m, &setup.schedule_keys())?;
            write_loss_curve(create(&out, "acc_loss.csv")?, &curve)?;
            log_curve("acc", &curve);
        }
        Command::RolloutEval => {
            let models = available(&out, &setup)?;
            let mut reports = Vec::new();
            for (name, m) in &models {
                let mut runs = vec![(false, setup.cfg.diffusion.sub_steps)];
                if *name == "stage1" {
                    runs.push((true, setup.cfg.eval.baseline_steps));
                }
                for (baseline, steps) in runs {
                    let divergence = setup.evaluate(m, baseline)?;
                    let (ate, rpe) = setup.evaluate_poses(m, baseline)?;
                    eprintln!("{name}/ddim{steps}: mean rollout error {:.5}", divergence.mean_error());
                    reports.push(MetricReport {
                        model: format!("{name}/ddim{steps}"),
                        seed: setup.seed(),
                        config_hash: hash.clone(),
                        divergence,
                        ate: Some(ate),
                        rpe: Some(rpe),
                        sr: None,
                        ne: None,
                    });
                }
            }
            write_reports(create(&out, "metrics.csv")?, &reports)?;
        }
        Command::PlanBench => {
            let models = available(&out, &setup)?;
            let mut summary = csv::Writer::from_writer(create(&out, "plan_summary.csv")?);
            summary.write_record(REPORT_HEADER)?;
            let mut entries: Vec<(&str, Option<&WorldModel<f32>>)> = vec![("random", None)];
            entries.extend(models.iter().map(|(n, m)| (*n, Some(m))));
            for (name, model) in entries {
                let bench = setup.plan_bench(model)?;
                let plans: Vec<(usize, &[mwm::sim::Action])> = bench.rows.iter().map(|r| (r.task, r.plan.as_slice())).collect();
                write_plans(create(&out, &format!("plans_{name}.csv"))?, &plans)?;
                let results: Vec<(usize, &mwm::planner::PlanResult)> =
                    bench.rows.iter().filter_map(|r| r.result.as_ref().map(|p| (r.task, p))).collect();
                if !results.is_empty() {
                    write_candidates(create(&out, &format!("candidates_{name}.csv"))?, &results)?;
                }
                summary.write_record([
                    format!("{name}/plan"),
                    setup.seed().to_string(),
                    hash.clone(),
                    "summary".into(),
                    String::new(),
                    String::new(),
                    fmt_real(bench.mean_ate()),
                    fmt_real(bench.mean_rpe()),
                    fmt_real(bench.success_rate()),
                    fmt_real(bench.mean_ne()),
                ])?;
                eprintln!(
                    "{name}: SR {:.2} NE {:.3} ATE {:.3} RPE {:.3} ({:.1} s)",
                    bench.success_rate(),
                    bench.mean_ne(),
                    bench.mean_ate(),
                    bench.mean_rpe(),
                    bench.seconds
                );
            }
            summary.flush()?;
        }
        Command::Ablate => {
            let ab = setup.ablation()?;
            let rows = ab.rows();
            for table in Table::ALL {
                let picked: Vec<(u64, &str, &mwm::metrics::Divergence)> =
                    rows.iter().filter(|r| r.0 == table).map(|r| (setup.seed(), r.1, r.2)).collect();
                write_ablation(create(&out, table.file_name())?, table, &picked, &hash)?;
            }
            for (_, label, d) in &rows {
                eprintln!("{label}: mean rollout error {:.5}", d.mean_error());
            }
            eprintln!("ablation took {:.1} s", ab.seconds);
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn log_curve(stage: &str, curve: &[mwm::training::LossPoint]) {
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        eprintln!("{stage}: loss {:.5} -> {:.5} over {} steps", first.loss, last.loss, last.step + 1);
    }
}

/// Load a checkpoint and check it was trained under the configured schedule.
fn load_checked(path: &Path, setup: &Setup) -> Result<WorldModel<f32>> {
    let (m, keys): (WorldModel<f32>, ScheduleKeys) =
        checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let want = setup.schedule_keys();
    if keys != want {
        return Err(mwm::Error::Config(format!(
            "{} was trained with diffusion {keys:?}, config has {want:?}",
            path.display()
        ))
        .into());
    }
    if m.config.obs_dim != setup.cfg.world.obs_dim {
        return Err(mwm::Error::Config(format!("{} has obs_dim {}", path.display(), m.config.obs_dim)).into());
    }
    Ok(m)
}

fn available(out: &Path, setup: &Setup) -> Result<Vec<(&'static str, WorldModel<f32>)>> {
    let mut found = Vec::new();
    for name in CHECKPOINTS {
        let p = out.join(format!("{name}.ckpt"));
        if p.exists() {
            found.push((name, load_checked(&p, setup)?));
        }
    }
    if found.is_empty() {
        bail!("no checkpoints in {}; run train-stage1 first", out.display());
    }
    Ok(found)
}

/// Concatenate report-format CSVs: summary rows go to summary.csv, horizon
/// rows to curves.csv. Reads `metrics.csv` and `plan_summary.csv`.
fn report(dirs: &[PathBuf], out: &Path) -> Result<()> {
    let mut summary = csv::Writer::from_writer(create(out, "summary.csv")?);
    let mut curves = csv::Writer::from_writer(create(out, "curves.csv")?);
    summary.write_record(["model", "seed", "config_hash", "mean_error", "ate", "rpe", "sr", "ne"])?;
    curves.write_record(["model", "seed", "config_hash", "horizon", "perceptual", "ffd"])?;
    let mut inputs = 0;
    for dir in dirs {
        for name in ["metrics.csv", "plan_summary.csv"] {
            let path = dir.join(name);
            if !path.exists() {
                continue;
            }
            inputs += 1;
            let mut r = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
            if r.headers()?.iter().ne(REPORT_HEADER) {
                return Err(anyhow::Error::new(Usage).context(format!("{} does not have the report header", path.display())));
            }
            for rec in r.records() {
                let rec = rec?;
                let f = |i: usize| rec.get(i).unwrap_or_default().to_string();
                if f(3) == "summary" {
                    summary.write_record([f(0), f(1), f(2), f(4), f(6), f(7), f(8), f(9)])?;
                } else {
                    curves.write_record([f(0), f(1), f(2), f(3), f(4), f(5)])?;
                }
            }
        }
    }
    if inputs == 0 {
        return Err(anyhow::Error::new(Usage).context("no metrics.csv or plan_summary.csv found"));
    }
    summary.flush()?;
    curves.flush()?;
    Ok(())
}
