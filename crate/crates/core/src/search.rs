//! Monte Carlo tree search over contact-surface schedules.
//!
//! Decisions are taken once per epoch of `d` timesteps, so every contact
//! persists for at least `d` steps by construction. Leaves are scored by the
//! contact optimizer; interior nodes are scored by a [`Guide`].

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::copt::{evaluate, AdmmConfig, ContactPlan, ContactSchedule, TaskContext};
use crate::error::SearchError;
use crate::kin::Kinematics;
use crate::learn::encode_state;
use crate::scene::Scene;

/// Velocity and acceleration bound under which a contact may be released.
pub const STILL_TOL: f64 = 1e-6;

/// Default exploration constant.
pub const DEFAULT_GAMMA: f64 = 0.1;

/// Consecutive simulations without a new node or evaluation after which the
/// tree counts as exhausted.
const MAX_IDLE_SIMULATIONS: usize = 200_000;

/// Mixed-radix indexing of joint assignments, first effector most significant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub surfaces: usize,
    pub effectors: usize,
}

impl ActionSpace {
    pub fn new(surfaces: usize, effectors: usize) -> Self {
        Self { surfaces, effectors }
    }

    pub fn size(&self) -> usize {
        (self.surfaces + 1).pow(self.effectors as u32)
    }

    pub fn encode(&self, assignment: &[usize]) -> usize {
        assignment.iter().fold(0, |acc, &s| acc * (self.surfaces + 1) + s)
    }

    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let radix = self.surfaces + 1;
        let mut out = vec![0; self.effectors];
        for slot in out.iter_mut().rev() {
            *slot = index % radix;
            index /= radix;
        }
        out
    }
}

/// Surface history up to the current epoch.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SearchState {
    pub epoch: usize,
    /// One assignment row per completed epoch.
    pub history: Vec<Vec<usize>>,
}

impl SearchState {
    pub fn root() -> Self {
        Self { epoch: 0, history: Vec::new() }
    }

    /// Assignment in force before the next decision (all zero at the root).
    pub fn last(&self, effectors: usize) -> Vec<usize> {
        self.history.last().cloned().unwrap_or_else(|| vec![0; effectors])
    }

    pub fn child(&self, assignment: Vec<usize>) -> Self {
        let mut history = self.history.clone();
        history.push(assignment);
        Self { epoch: self.epoch + 1, history }
    }

    /// First timestep of the next epoch.
    pub fn timestep(&self, d: usize) -> usize {
        self.epoch * d
    }
}

pub fn num_epochs(steps: usize, d: usize) -> usize {
    steps.div_ceil(d)
}

pub fn is_terminal(state: &SearchState, ctx: &TaskContext) -> bool {
    state.epoch >= num_epochs(ctx.steps(), ctx.d)
}

/// Assignments allowed from `state`, in increasing action index.
///
/// Rules: no surface is shared, every contacted surface is reachable and the
/// targets are jointly feasible, at most one effector changes, a surface is
/// only released (never swapped) and only while the object is still, and a
/// trailing partial epoch admits no new contact.
pub fn legal_actions(state: &SearchState, ctx: &TaskContext, scene: &Scene, kin: &dyn Kinematics) -> Vec<Vec<usize>> {
    if is_terminal(state, ctx) {
        return Vec::new();
    }
    let nc = scene.robot.num_effectors();
    let space = ActionSpace::new(scene.object.num_surfaces(), nc);
    let prev = state.last(nc);
    let t = state.timestep(ctx.d);
    let sample = &ctx.trajectory.samples[t];
    let still = sample.is_still(STILL_TOL);
    let partial = t + ctx.d > ctx.steps();
    let pose = &sample.pose;
    (0..space.size())
        .map(|i| space.decode(i))
        .filter(|a| {
            let mut changes = 0;
            for c in 0..nc {
                if a[c] == prev[c] {
                    continue;
                }
                changes += 1;
                let allowed = match (prev[c], a[c]) {
                    (_, 0) => still,
                    (0, _) => !partial,
                    _ => false,
                };
                if !allowed {
                    return false;
                }
            }
            if changes > 1 {
                return false;
            }
            let mut used = Vec::with_capacity(nc);
            for c in 0..nc {
                if a[c] == 0 {
                    continue;
                }
                if a[..c].contains(&a[c]) {
                    return false;
                }
                let surface = scene.object.surface(a[c]);
                if !kin.reachable(c, surface, pose) {
                    return false;
                }
                used.push((c, surface));
            }
            kin.pair_feasible(&used, pose)
        })
        .collect()
}

/// `Q + gamma p sqrt(sum_b N_b) / (1 + N)`.
pub fn ucb_score(q: f64, n: u32, parent_visits: u32, prior: f64, gamma: f64) -> f64 {
    q + gamma * prior * f64::from(parent_visits).sqrt() / (1.0 + f64::from(n))
}

/// Running-mean update of an edge.
pub fn backup(q: f64, n: u32, value: f64) -> (f64, u32) {
    ((f64::from(n) * q + value) / (f64::from(n) + 1.0), n + 1)
}

/// Replicates every epoch assignment over its `d` timesteps.
pub fn expand_schedule(state: &SearchState, steps: usize, d: usize) -> ContactSchedule {
    let rows = (0..steps).map(|t| state.history[t / d].clone()).collect();
    ContactSchedule { rows }
}

/// Supplies action priors and a value estimate for an interior state.
pub trait Guide: Send + Sync {
    /// `legal` holds action indices; the returned priors align with it.
    fn guide(&self, state: &SearchState, ctx: &TaskContext, legal: &[usize]) -> (Vec<f64>, f64);
}

/// Uniform priors and zero value.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformGuide;

impl Guide for UniformGuide {
    fn guide(&self, _state: &SearchState, _ctx: &TaskContext, legal: &[usize]) -> (Vec<f64>, f64) {
        (vec![1.0 / legal.len() as f64; legal.len()], 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Stop at the first schedule with positive reward.
    FirstFeasible,
    /// Spend the whole budget and keep the tree statistics.
    Collect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Unique terminal evaluations allowed.
    pub budget: usize,
    pub gamma: f64,
    pub time_cap: Option<Duration>,
    pub mode: SearchMode,
    pub admm: AdmmConfig,
    /// Goal lookahead in timesteps; defaults to `d`.
    pub lookahead: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: 500,
            gamma: DEFAULT_GAMMA,
            time_cap: Some(Duration::from_secs(60)),
            mode: SearchMode::FirstFeasible,
            admm: AdmmConfig::default(),
            lookahead: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.budget == 0 {
            return Err(SearchError::InvalidConfig("budget must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(SearchError::InvalidConfig(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.lookahead == Some(0) {
            return Err(SearchError::InvalidConfig("lookahead must be at least 1".into()));
        }
        self.admm.validate().map_err(|e| SearchError::InvalidConfig(e.to_string()))
    }
}

/// One state of the dataset extracted from a finished tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub history: Vec<Vec<usize>>,
    pub pose: Vec<f64>,
    pub goal: Vec<f64>,
    /// Legal action indices.
    pub legal: Vec<usize>,
    /// Visit distribution over `legal`.
    pub policy: Vec<f64>,
    pub value: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub evaluations: usize,
    pub feasible_found: bool,
    pub wall_time_s: f64,
    pub reward: f64,
    pub seed: u64,
    pub simulations: usize,
    pub nodes: usize,
    pub timed_out: bool,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: Option<(ContactSchedule, ContactPlan)>,
    pub dataset: Vec<TrainingSample>,
    pub stats: SearchStats,
}

impl SearchOutcome {
    /// The best plan, or `BudgetExhausted` when nothing feasible was found.
    pub fn feasible(self) -> Result<(ContactSchedule, ContactPlan, SearchStats), SearchError> {
        match self.best {
            Some((schedule, plan)) if plan.reward > 0.0 => Ok((schedule, plan, self.stats)),
            _ => Err(SearchError::BudgetExhausted { evaluations: self.stats.evaluations }),
        }
    }
}

#[derive(Debug)]
enum NodeKind {
    Interior,
    Terminal(f64),
    DeadEnd,
}

#[derive(Debug)]
struct Node {
    state: SearchState,
    kind: NodeKind,
    actions: Vec<usize>,
    prior: Vec<f64>,
    q: Vec<f64>,
    n: Vec<u32>,
    children: Vec<Option<usize>>,
}

impl Node {
    fn leaf(state: SearchState, kind: NodeKind) -> Self {
        Self { state, kind, actions: Vec::new(), prior: Vec::new(), q: Vec::new(), n: Vec::new(), children: Vec::new() }
    }

    fn visits(&self) -> u32 {
        self.n.iter().sum()
    }

    /// Highest score; ties go to the higher prior, then the lower action index.
    fn select(&self, gamma: f64) -> usize {
        let total = self.visits();
        let mut best = 0;
        let mut best_u = f64::NEG_INFINITY;
        for i in 0..self.actions.len() {
            let u = ucb_score(self.q[i], self.n[i], total, self.prior[i], gamma);
            if u > best_u || (u == best_u && self.prior[i] > self.prior[best]) {
                best = i;
                best_u = u;
            }
        }
        best
    }
}

/// One search tree over one task.
pub struct Search<'a> {
    scene: &'a Scene,
    ctx: &'a TaskContext,
    kin: &'a dyn Kinematics,
    guide: &'a dyn Guide,
    cfg: SearchConfig,
    space: ActionSpace,
    nodes: Vec<Node>,
    evaluations: usize,
    best: Option<(ContactSchedule, ContactPlan)>,
}

impl<'a> Search<'a> {
    pub fn new(
        scene: &'a Scene,
        ctx: &'a TaskContext,
        kin: &'a dyn Kinematics,
        guide: &'a dyn Guide,
        cfg: SearchConfig,
    ) -> Result<Self, SearchError> {
        cfg.validate()?;
        let space = ActionSpace::new(scene.object.num_surfaces(), scene.robot.num_effectors());
        Ok(Self { scene, ctx, kin, guide, cfg, space, nodes: Vec::new(), evaluations: 0, best: None })
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn nodes(&self) -> usize {
        self.nodes.len()
    }

    fn make_node(&mut self, state: SearchState) -> (usize, f64, bool) {
        let (node, value, evaluated) = if is_terminal(&state, self.ctx) {
            let schedule = expand_schedule(&state, self.ctx.steps(), self.ctx.d);
            let eval = evaluate(&schedule, self.ctx, self.scene, &self.cfg.admm);
            self.evaluations += 1;
            if let Some(plan) = eval.plan {
                let better = self.best.as_ref().is_none_or(|(_, b)| plan.reward > b.reward);
                if better && plan.reward > 0.0 {
                    self.best = Some((schedule, plan));
                }
            }
            (Node::leaf(state, NodeKind::Terminal(eval.reward)), eval.reward, true)
        } else {
            let legal: Vec<usize> = legal_actions(&state, self.ctx, self.scene, self.kin)
                .iter()
                .map(|a| self.space.encode(a))
                .collect();
            if legal.is_empty() {
                (Node::leaf(state, NodeKind::DeadEnd), 0.0, false)
            } else {
                let (prior, value) = self.guide.guide(&state, self.ctx, &legal);
                debug_assert_eq!(prior.len(), legal.len());
                let k = legal.len();
                let node = Node {
                    state,
                    kind: NodeKind::Interior,
                    actions: legal,
                    prior,
                    q: vec![0.0; k],
                    n: vec![0; k],
                    children: vec![None; k],
                };
                (node, value, false)
            }
        };
        self.nodes.push(node);
        (self.nodes.len() - 1, value, evaluated)
    }

    /// One selection-expansion-backup pass. Returns the leaf value and whether
    /// the pass created a node.
    pub fn simulate(&mut self) -> (f64, bool) {
        if self.nodes.is_empty() {
            let (_, value, _) = self.make_node(SearchState::root());
            return (value, true);
        }
        let mut path: Vec<(usize, usize)> = Vec::new();
        let mut current = 0;
        let (value, created) = loop {
            let node = &self.nodes[current];
            match node.kind {
                NodeKind::Terminal(reward) => break (reward, false),
                NodeKind::DeadEnd => break (0.0, false),
                NodeKind::Interior => {}
            }
            let slot = node.select(self.cfg.gamma);
            path.push((current, slot));
            match node.children[slot] {
                Some(child) => current = child,
                None => {
                    let state = node.state.child(self.space.decode(node.actions[slot]));
                    let (child, value, _) = self.make_node(state);
                    self.nodes[current].children[slot] = Some(child);
                    break (value, true);
                }
            }
        };
        for &(node, slot) in &path {
            let n = &mut self.nodes[node];
            (n.q[slot], n.n[slot]) = backup(n.q[slot], n.n[slot], value);
        }
        (value, created)
    }

    /// Runs simulations until the mode's stopping rule, the budget, the time
    /// cap or tree exhaustion.
    pub fn run(mut self, seed: u64) -> SearchOutcome {
        let start = Instant::now();
        let mut simulations = 0;
        let mut idle = 0;
        let mut timed_out = false;
        loop {
            if self.cfg.mode == SearchMode::FirstFeasible && self.best.is_some() {
                break;
            }
            if self.evaluations >= self.cfg.budget || idle >= MAX_IDLE_SIMULATIONS {
                break;
            }
            if self.cfg.time_cap.is_some_and(|cap| start.elapsed() >= cap) {
                timed_out = true;
                break;
            }
            let (_, created) = self.simulate();
            simulations += 1;
            idle = if created { 0 } else { idle + 1 };
        }
        let dataset = match self.cfg.mode {
            SearchMode::Collect => self.dataset(),
            SearchMode::FirstFeasible => Vec::new(),
        };
        let reward = self.best.as_ref().map_or(0.0, |(_, p)| p.reward);
        let stats = SearchStats {
            evaluations: self.evaluations,
            feasible_found: self.best.is_some(),
            wall_time_s: start.elapsed().as_secs_f64(),
            reward,
            seed,
            simulations,
            nodes: self.nodes.len(),
            timed_out,
        };
        SearchOutcome { best: self.best, dataset, stats }
    }

    /// Visit distributions and values of every interior state that was
    /// passed through at least once.
    pub fn dataset(&self) -> Vec<TrainingSample> {
        let h = self.cfg.lookahead.unwrap_or(self.ctx.d);
        let mut out = Vec::new();
        for node in &self.nodes {
            if !matches!(node.kind, NodeKind::Interior) {
                continue;
            }
            let total = node.visits();
            if total == 0 {
                continue;
            }
            let policy: Vec<f64> = node.n.iter().map(|&n| f64::from(n) / f64::from(total)).collect();
            let value = policy.iter().zip(&node.q).map(|(p, q)| p * q).sum::<f64>().clamp(0.0, 1.0);
            let features = encode_state(&node.state, self.ctx, h);
            out.push(TrainingSample {
                history: node.state.history.clone(),
                pose: features.pose,
                goal: features.goal,
                legal: node.actions.clone(),
                policy,
                value,
                feasible: value > 0.0,
            });
        }
        out
    }
}

/// Builds and runs one search.
pub fn run_search(
    scene: &Scene,
    ctx: &TaskContext,
    kin: &dyn Kinematics,
    guide: &dyn Guide,
    cfg: SearchConfig,
    seed: u64,
) -> Result<SearchOutcome, SearchError> {
    Ok(Search::new(scene, ctx, kin, guide, cfg)?.run(seed))
}
