//! Batch jobs behind the service and the command line: plan, train, bench,
//! validate and single-schedule evaluation. Every job is a pure function of
//! its request.

use std::fmt;
use std::io::{Read, Write};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copt::{audit_plan, evaluate, AdmmConfig, AuditCheck, ContactPlan, ContactSchedule, TaskContext};
use crate::error::{JobError, LearnError};
use crate::learn::{train_classifier, train_model, Architecture, ClassifierReport, GuidedModel, TrainConfig};
use crate::scene::{build_task, cube_scene, PrimitiveKind, PrimitiveSpec, Scene, TrajectorySpec};
use crate::search::{run_search, Guide, SearchConfig, SearchMode, SearchStats, TrainingSample, UniformGuide};

/// Overrides applied on top of the trajectory spec and the search defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchOptions {
    pub budget: Option<usize>,
    pub time_cap_s: Option<f64>,
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
    pub d: Option<usize>,
    /// Replaces the trajectory seed.
    pub seed: Option<u64>,
    pub admm_iterations: Option<usize>,
}

impl SearchOptions {
    pub fn admm(&self) -> AdmmConfig {
        let mut cfg = AdmmConfig::default();
        if let Some(rho) = self.rho {
            cfg.rho = rho;
        }
        if let Some(it) = self.admm_iterations {
            cfg.iterations = it;
        }
        cfg
    }

    pub fn search(&self, mode: SearchMode) -> Result<SearchConfig, JobError> {
        let mut cfg = SearchConfig { mode, admm: self.admm(), ..SearchConfig::default() };
        if let Some(b) = self.budget {
            cfg.budget = b;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if let Some(cap) = self.time_cap_s {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(JobError::Invalid(format!("time cap must be positive, got {cap}")));
            }
            cfg.time_cap = Some(Duration::from_secs_f64(cap));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn trajectory(&self, spec: &TrajectorySpec) -> TrajectorySpec {
        let mut spec = spec.clone();
        if let Some(d) = self.d {
            spec.d = d;
        }
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MctsUniform,
    MctsTrained,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MctsUniform => "mcts_uniform",
            Self::MctsTrained => "mcts_trained",
        })
    }
}

/// Validates the scene and samples the task of `spec`.
pub fn task_context(scene: &Scene, spec: &TrajectorySpec) -> Result<TaskContext, JobError> {
    scene.validate()?;
    if spec.d == 0 || spec.steps < 2 {
        return Err(JobError::Invalid(format!("need T >= 2 and d >= 1, got T = {} and d = {}", spec.steps, spec.d)));
    }
    let task = build_task(spec, &scene.object)?;
    Ok(TaskContext::new(scene, task.trajectory, spec.d)?)
}

/// Parses a model file and checks it against the scene.
pub fn load_model(text: &str, scene: &Scene) -> Result<GuidedModel, JobError> {
    let model = GuidedModel::from_json(text)?;
    model.params.arch.check_scene(scene)?;
    Ok(model)
}

/// Parses a mix label: `SC`, `3xSC` or `S+R`.
pub fn parse_mix(label: &str) -> Result<Vec<PrimitiveKind>, JobError> {
    let bad = || JobError::Invalid(format!("bad primitive mix {label:?}"));
    let label = label.trim();
    if let Some((count, kind)) = label.split_once('x') {
        if let Ok(n) = count.parse::<usize>() {
            let kind: PrimitiveKind = kind.parse().map_err(|_| bad())?;
            return if n == 0 { Err(bad()) } else { Ok(vec![kind; n]) };
        }
    }
    label.split('+').map(|k| k.trim().parse::<PrimitiveKind>().map_err(|_| bad())).collect()
}

fn guide_for(model: Option<&GuidedModel>) -> (&dyn Guide, Method) {
    match model {
        Some(m) => (m, Method::MctsTrained),
        None => (&UniformGuide, Method::MctsUniform),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRequest {
    #[serde(default = "cube_scene")]
    pub scene: Scene,
    pub trajectory: TrajectorySpec,
    /// Model file contents; uniform priors when absent.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub options: SearchOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResponse {
    pub mix: String,
    pub method: Method,
    /// `None` when the budget ran out without a feasible schedule.
    pub plan: Option<ContactPlan>,
    pub stats: SearchStats,
}

pub fn plan(req: &PlanRequest) -> Result<PlanResponse, JobError> {
    let spec = req.options.trajectory(&req.trajectory);
    let ctx = task_context(&req.scene, &spec)?;
    let model = req.model.as_deref().map(|m| load_model(m, &req.scene)).transpose()?;
    let cfg = req.options.search(SearchMode::FirstFeasible)?;
    let (guide, method) = guide_for(model.as_ref());
    let out = run_search(&req.scene, &ctx, &req.scene.robot, guide, cfg, spec.seed)?;
    let plan = out.best.map(|(_, p)| p).filter(|p| p.reward > 0.0);
    Ok(PlanResponse { mix: spec.mix_label(), method, plan, stats: out.stats })
}

fn default_steps() -> usize {
    31
}

fn default_dt() -> f64 {
    0.1
}

fn default_d() -> usize {
    3
}

/// Training protocol: uniform-guided searches over sampled trajectories,
/// then the feasibility classifier and the policy-value network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJobConfig {
    pub n_traj: usize,
    /// Mix labels, used round-robin over the trajectories.
    pub mix: Vec<String>,
    /// Unique evaluations per trajectory.
    pub budget: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Samples per primitive.
    #[serde(rename = "T", default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default)]
    pub time_cap_s: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub admm_iterations: Option<usize>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
}

impl TrainJobConfig {
    /// Trajectory spec of the `j`-th training trajectory.
    pub fn trajectory(&self, j: usize) -> Result<TrajectorySpec, JobError> {
        let kinds = parse_mix(&self.mix[j % self.mix.len()])?;
        Ok(TrajectorySpec {
            seed: self.seed.wrapping_add(j as u64),
            primitives: kinds.into_iter().map(|kind| PrimitiveSpec { kind, params: None }).collect(),
            steps: self.steps,
            dt: self.dt,
            d: self.d,
            initial: None,
        })
    }

    fn options(&self) -> SearchOptions {
        SearchOptions {
            budget: Some(self.budget),
            time_cap_s: self.time_cap_s,
            gamma: self.gamma,
            rho: self.rho,
            d: None,
            seed: None,
            admm_iterations: self.admm_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    #[serde(default = "cube_scene")]
    pub scene: Scene,
    pub config: TrainJobConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    /// Model file contents.
    pub model: String,
    pub dataset: Vec<TrainingSample>,
    /// Mean loss per epoch.
    pub losses: Vec<f64>,
    /// Samples the network was fitted on.
    pub samples: usize,
    /// `None` when the collected data had a single class.
    pub classifier: Option<ClassifierReport>,
    pub searches: Vec<SearchStats>,
}

pub fn train(req: &TrainRequest) -> Result<TrainResponse, JobError> {
    let cfg = &req.config;
    if cfg.n_traj == 0 {
        return Err(JobError::Invalid("n_traj must be at least 1".into()));
    }
    if cfg.mix.is_empty() {
        return Err(JobError::Invalid("mix must name at least one primitive".into()));
    }
    let mut search = cfg.options().search(SearchMode::Collect)?;
    if cfg.time_cap_s.is_none() {
        // A wall-clock cap would make the dataset depend on machine speed.
        search.time_cap = None;
    }
    let specs: Vec<TrajectorySpec> = (0..cfg.n_traj).map(|j| cfg.trajectory(j)).collect::<Result<_, _>>()?;
    let contexts: Vec<TaskContext> = specs.iter().map(|s| task_context(&req.scene, s)).collect::<Result<_, _>>()?;
    let runs: Vec<_> = contexts
        .par_iter()
        .zip(&specs)
        .map(|(ctx, spec)| run_search(&req.scene, ctx, &req.scene.robot, &UniformGuide, search, spec.seed))
        .collect::<Result<_, _>>()?;
    let mut dataset = Vec::new();
    let mut searches = Vec::with_capacity(runs.len());
    for run in runs {
        dataset.extend(run.dataset);
        searches.push(run.stats);
    }

    let arch = Architecture::for_scene(&req.scene, cfg.d);
    let mut train_cfg = TrainConfig { epochs: cfg.epochs, seed: cfg.seed, ..TrainConfig::default() };
    if let Some(b) = cfg.batch {
        train_cfg.batch = b;
    }
    if let Some(lr) = cfg.lr {
        train_cfg.lr = lr;
    }
    let (classifier, report) = match train_classifier(&dataset, arch, &train_cfg) {
        Ok((c, r)) => (Some(c), Some(r)),
        Err(LearnError::SingleClass) => {
            tracing::warn!("collected data has a single class; training without the feasibility gate");
            (None, None)
        }
        Err(e) => return Err(e.into()),
    };
    let (params, fit) = train_model(&dataset, arch, &train_cfg)?;
    let model = GuidedModel { params, classifier }.to_json();
    Ok(TrainResponse { model, dataset, losses: fit.losses, samples: fit.samples, classifier: report, searches })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRequest {
    #[serde(default = "cube_scene")]
    pub scene: Scene,
    /// Trial `i` samples its task with seed `trajectory.seed + i`.
    pub trajectory: TrajectorySpec,
    /// With a model both methods are run, otherwise only the uniform one.
    #[serde(default)]
    pub model: Option<String>,
    pub trials: usize,
    #[serde(default)]
    pub options: SearchOptions,
}

/// One trial. Errors are only reported for successful trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mix: String,
    pub method: Method,
    pub trial: usize,
    pub seed: u64,
    pub success: bool,
    pub time_s: f64,
    #[serde(rename = "force_err_N")]
    pub force_err: Option<f64>,
    #[serde(rename = "torque_err_Nm")]
    pub torque_err: Option<f64>,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub mix: String,
    pub method: Method,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over successful trials; `None` without any.
    pub mean_time_s: Option<f64>,
    pub worst_time_s: Option<f64>,
    pub mean_force_err_n: Option<f64>,
    pub mean_torque_err_nm: Option<f64>,
    pub mean_evaluations: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResponse {
    pub records: Vec<BenchRecord>,
    pub summary: Vec<BenchSummary>,
}

/// Runs the trials one after another so wall times are not inflated by
/// sharing cores.
pub fn bench(req: &BenchRequest) -> Result<BenchResponse, JobError> {
    if req.trials == 0 {
        return Err(JobError::Invalid("trials must be at least 1".into()));
    }
    let base = req.options.trajectory(&req.trajectory);
    let cfg = req.options.search(SearchMode::FirstFeasible)?;
    let model = req.model.as_deref().map(|m| load_model(m, &req.scene)).transpose()?;
    let mut guides: Vec<(&dyn Guide, Method)> = vec![guide_for(None)];
    if let Some(m) = model.as_ref() {
        guides.push(guide_for(Some(m)));
    }
    let mut contexts = Vec::with_capacity(req.trials);
    for trial in 0..req.trials {
        let mut spec = base.clone();
        spec.seed = base.seed.wrapping_add(trial as u64);
        contexts.push((task_context(&req.scene, &spec)?, spec.seed));
    }
    let mix = base.mix_label();
    let mut records = Vec::new();
    let mut summary = Vec::new();
    for (guide, method) in guides {
        let start = records.len();
        for (trial, (ctx, seed)) in contexts.iter().enumerate() {
            let out = run_search(&req.scene, ctx, &req.scene.robot, guide, cfg, *seed)?;
            let plan = out.best.as_ref().map(|(_, p)| p).filter(|p| p.reward > 0.0);
            records.push(BenchRecord {
                mix: mix.clone(),
                method,
                trial,
                seed: *seed,
                success: plan.is_some(),
                time_s: out.stats.wall_time_s,
                force_err: plan.map(|p| p.force_error),
                torque_err: plan.map(|p| p.torque_error),
                evaluations: out.stats.evaluations,
            });
            tracing::info!(%method, trial, success = plan.is_some(), evaluations = out.stats.evaluations, "bench trial");
        }
        summary.push(summarize(&mix, method, &records[start..]));
    }
    Ok(BenchResponse { records, summary })
}

pub fn summarize(mix: &str, method: Method, records: &[BenchRecord]) -> BenchSummary {
    let ok: Vec<&BenchRecord> = records.iter().filter(|r| r.success).collect();
    let mean = |f: &dyn Fn(&BenchRecord) -> f64| {
        (!ok.is_empty()).then(|| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64)
    };
    BenchSummary {
        mix: mix.to_string(),
        method,
        trials: records.len(),
        successes: ok.len(),
        success_rate: if records.is_empty() { 0.0 } else { ok.len() as f64 / records.len() as f64 },
        mean_time_s: mean(&|r| r.time_s),
        worst_time_s: ok.iter().map(|r| r.time_s).reduce(f64::max),
        mean_force_err_n: mean(&|r| r.force_err.unwrap_or(f64::NAN)),
        mean_torque_err_nm: mean(&|r| r.torque_err.unwrap_or(f64::NAN)),
        mean_evaluations: mean(&|r| r.evaluations as f64),
    }
}

pub fn write_bench_csv<W: Write>(out: W, records: &[BenchRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bench_csv<R: Read>(input: R) -> Result<Vec<BenchRecord>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateRequest {
    #[serde(default = "cube_scene")]
    pub scene: Scene,
    pub trajectory: TrajectorySpec,
    pub plan: ContactPlan,
    #[serde(default)]
    pub options: SearchOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateReport {
    pub passed: bool,
    pub checks: Vec<AuditCheck>,
}

pub fn validate(req: &ValidateRequest) -> Result<ValidateReport, JobError> {
    let spec = req.options.trajectory(&req.trajectory);
    let ctx = task_context(&req.scene, &spec)?;
    let checks = audit_plan(&req.plan, &ctx, &req.scene, &req.options.admm());
    Ok(ValidateReport { passed: checks.iter().all(|c| c.passed), checks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    #[serde(default = "cube_scene")]
    pub scene: Scene,
    pub trajectory: TrajectorySpec,
    pub schedule: ContactSchedule,
    #[serde(default)]
    pub options: SearchOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub reward: f64,
    pub plan: Option<ContactPlan>,
    pub failure: Option<String>,
}

pub fn evaluate_schedule(req: &EvaluateRequest) -> Result<EvaluateResponse, JobError> {
    let spec = req.options.trajectory(&req.trajectory);
    let ctx = task_context(&req.scene, &spec)?;
    let admm = req.options.admm();
    admm.validate().map_err(|e| JobError::Invalid(e.to_string()))?;
    let eval = evaluate(&req.schedule, &ctx, &req.scene, &admm);
    Ok(EvaluateResponse { reward: eval.reward, plan: eval.plan, failure: eval.failure.map(|e| e.to_string()) })
}
