use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use contact_client::{Client, ClientError};
use contact_core::copt::ContactPlan;
use contact_core::jobs::{
    self, BenchRequest, PlanRequest, SearchOptions, TrainJobConfig, TrainRequest, ValidateRequest,
};
use contact_core::learn::write_dataset;
use contact_core::scene::{cube_scene, Scene, TrajectorySpec};
use serde::de::DeserializeOwned;
use tracing_subscriber::EnvFilter;

/// Input files that do not parse, or requests the service rejects.
const EXIT_INPUT: u8 = 2;

#[derive(Parser)]
#[command(name = "contact", version, about = "Learning-guided contact planning for rigid objects")]
struct Cli {
    /// Use a running service instead of an embedded one.
    #[arg(long, global = true, env = "CONTACT_SERVER")]
    server: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Search for the first feasible contact plan.
    Plan {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Collect search data and fit the guidance model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Model file; the dataset and training curve are written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Repeated seeded searches, one CSV row per trial.
    Bench {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Re-check a plan against its task.
    Validate {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        d: Option<usize>,
    },
}

#[derive(Args)]
struct TaskArgs {
    /// Scene JSON; the cube scene when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Trajectory spec JSON.
    #[arg(long)]
    traj: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Unique schedule evaluations.
    #[arg(long)]
    budget: Option<usize>,
    /// Seconds per search.
    #[arg(long)]
    time_cap: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Decision epoch length in timesteps.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    admm_iterations: Option<usize>,
}

impl SearchArgs {
    fn options(&self) -> SearchOptions {
        SearchOptions {
            budget: self.budget,
            time_cap_s: self.time_cap,
            gamma: self.gamma,
            rho: self.rho,
            d: self.d,
            seed: self.seed,
            admm_iterations: self.admm_iterations,
        }
    }
}

/// Failure with a chosen exit status.
#[derive(Debug)]
struct Exit(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Exit {
    fn from(e: E) -> Self {
        Exit(1, e.into())
    }
}

fn input<E: Into<anyhow::Error>>(e: E) -> Exit {
    Exit(EXIT_INPUT, e.into())
}

fn api(e: ClientError) -> Exit {
    let code = if e.is_bad_request() { EXIT_INPUT } else { 1 };
    Exit(code, e.into())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Exit> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(input)?;
    serde_json::from_str(&text).with_context(|| format!("parse error in {}", path.display())).map_err(input)
}

fn read_scene(path: Option<&Path>) -> Result<Scene, Exit> {
    path.map_or_else(|| Ok(cube_scene()), read_json)
}

fn read_model(path: Option<&Path>) -> Result<Option<String>, Exit> {
    path.map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(input))
        .transpose()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Exit> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

async fn run(cli: Cli) -> Result<(), Exit> {
    let _server;
    let client = match cli.server {
        Some(url) => Client::new(url),
        None => {
            let (addr, handle) = contact_service::spawn_local().await.context("starting embedded service")?;
            _server = handle;
            Client::new(format!("http://{addr}"))
        }
    };
    match cli.cmd {
        Cmd::Plan { task, model, out, search } => {
            let req = PlanRequest {
                scene: read_scene(task.scene.as_deref())?,
                trajectory: read_json(&task.traj)?,
                model: read_model(model.as_deref())?,
                options: search.options(),
            };
            let started = Instant::now();
            let resp = client.plan(&req).await.map_err(api)?;
            let wall = started.elapsed().as_secs_f64();
            let Some(plan) = resp.plan else {
                return Err(Exit(
                    1,
                    anyhow::anyhow!(
                        "budget exhausted after {} evaluations ({:.2} s) without a feasible plan",
                        resp.stats.evaluations,
                        wall
                    ),
                ));
            };
            write(&out, serde_json::to_string_pretty(&plan)?)?;
            println!(
                "{} {}: reward {:.4}  D {:.5}  evaluations {}  search {:.2} s  wall {:.2} s",
                resp.mix, resp.method, plan.reward, plan.distance, resp.stats.evaluations, resp.stats.wall_time_s, wall
            );
        }
        Cmd::Train { config, scene, out, seed, budget, epochs } => {
            let mut config: TrainJobConfig = read_json(&config)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(b) = budget {
                config.budget = b;
            }
            if let Some(e) = epochs {
                config.epochs = e;
            }
            let req = TrainRequest { scene: read_scene(scene.as_deref())?, config };
            let started = Instant::now();
            let resp = client.train(&req).await.map_err(api)?;
            write(&out, &resp.model)?;
            let mut data = Vec::new();
            write_dataset(&mut data, &resp.dataset)?;
            write(&sibling(&out, ".dataset.jsonl"), data)?;
            let mut curve = String::from("epoch,loss\n");
            for (i, l) in resp.losses.iter().enumerate() {
                curve.push_str(&format!("{},{l}\n", i + 1));
            }
            write(&sibling(&out, ".curve.csv"), curve)?;
            let found = resp.searches.iter().filter(|s| s.feasible_found).count();
            println!(
                "searches {} ({} feasible)  samples {} (fit on {})  final loss {:.5}  wall {:.1} s",
                resp.searches.len(),
                found,
                resp.dataset.len(),
                resp.samples,
                resp.losses.last().copied().unwrap_or(f64::NAN),
                started.elapsed().as_secs_f64()
            );
            match &resp.classifier {
                Some(c) => println!("classifier held-out balanced accuracy {:.3}", c.balanced_accuracy),
                None => println!("classifier skipped: collected states are all of one class"),
            }
        }
        Cmd::Bench { task, model, trials, out, search } => {
            let req = BenchRequest {
                scene: read_scene(task.scene.as_deref())?,
                trajectory: read_json(&task.traj)?,
                model: read_model(model.as_deref())?,
                trials,
                options: search.options(),
            };
            let resp = client.bench(&req).await.map_err(api)?;
            let mut csv = Vec::new();
            jobs::write_bench_csv(&mut csv, &resp.records)?;
            match out {
                Some(path) => write(&path, csv)?,
                None => print!("{}", String::from_utf8_lossy(&csv)),
            }
            let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
            eprintln!("mix,method,success,mean_time_s,worst_time_s,force_err_N,torque_err_Nm,evaluations");
            for s in &resp.summary {
                eprintln!(
                    "{},{},{}/{},{},{},{},{},{}",
                    s.mix,
                    s.method,
                    s.successes,
                    s.trials,
                    opt(s.mean_time_s, 3),
                    opt(s.worst_time_s, 3),
                    opt(s.mean_force_err_n, 4),
                    opt(s.mean_torque_err_nm, 4),
                    opt(s.mean_evaluations, 1)
                );
            }
        }
        Cmd::Validate { task, plan, rho, d } => {
            let trajectory: TrajectorySpec = read_json(&task.traj)?;
            let plan: ContactPlan = read_json(&plan)?;
            let options = SearchOptions { rho, d, ..SearchOptions::default() };
            let req = ValidateRequest { scene: read_scene(task.scene.as_deref())?, trajectory, plan, options };
            let report = client.validate(&req).await.map_err(api)?;
            for c in &report.checks {
                println!(
                    "{:<6} {:<28} worst {:.3e}  tolerance {:.1e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.worst,
                    c.tolerance
                );
            }
            if !report.passed {
                return Err(Exit(1, anyhow::anyhow!("plan failed validation")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT } else { 0 });
        }
    };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: starting runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
