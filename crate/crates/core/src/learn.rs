//! Goal-conditioned policy-value network and feasibility classifier.
//!
//! The surface history is encoded by a single GRU layer; its final hidden
//! state, the current pose and the goal offset feed a two-layer ReLU trunk
//! with a masked-softmax policy head and a sigmoid value head. Gradients are
//! written out by hand for this fixed architecture.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::copt::TaskContext;
use crate::error::LearnError;
use crate::scene::Scene;
use crate::search::{Guide, SearchState, TrainingSample};
use crate::se3::pose_diff;

pub const POSE_FEATURES: usize = 12;
pub const GOAL_FEATURES: usize = 6;
pub const MODEL_FORMAT: &str = "contact-planner-model";
pub const MODEL_VERSION: u32 = 1;

/// Inputs of the network for one search state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFeatures {
    pub history: Vec<Vec<usize>>,
    pub pose: Vec<f64>,
    pub goal: Vec<f64>,
}

/// History, the pose at the next decision and the offset to the pose `h`
/// steps later (clamped to the final sample).
pub fn encode_state(state: &SearchState, ctx: &TaskContext, h: usize) -> StateFeatures {
    let last = ctx.steps() - 1;
    let t = state.timestep(ctx.d).min(last);
    let q = ctx.trajectory.pose(t);
    let goal = pose_diff(q, ctx.trajectory.pose((t + h).min(last)));
    StateFeatures { history: state.history.clone(), pose: q.features().to_vec(), goal: goal.iter().copied().collect() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub surfaces: usize,
    pub effectors: usize,
    pub hidden: usize,
    pub trunk: [usize; 2],
    /// Goal lookahead in timesteps.
    pub lookahead: usize,
}

impl Architecture {
    pub fn new(surfaces: usize, effectors: usize, lookahead: usize) -> Self {
        Self { surfaces, effectors, hidden: 64, trunk: [128, 128], lookahead }
    }

    pub fn for_scene(scene: &Scene, lookahead: usize) -> Self {
        Self::new(scene.object.num_surfaces(), scene.robot.num_effectors(), lookahead)
    }

    /// One-hot width of one epoch assignment.
    pub fn input(&self) -> usize {
        self.effectors * (self.surfaces + 1)
    }

    pub fn actions(&self) -> usize {
        (self.surfaces + 1).pow(self.effectors as u32)
    }

    pub fn trunk_input(&self) -> usize {
        self.hidden + POSE_FEATURES + GOAL_FEATURES
    }

    pub fn check_scene(&self, scene: &Scene) -> Result<(), LearnError> {
        if self.surfaces != scene.object.num_surfaces() || self.effectors != scene.robot.num_effectors() {
            return Err(LearnError::Incompatible(format!(
                "model has {} surfaces and {} effectors, scene has {} and {}",
                self.surfaces,
                self.effectors,
                scene.object.num_surfaces(),
                scene.robot.num_effectors()
            )));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

fn add_bias(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        col += b.column(0);
    }
}

fn row_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sums = m.column_sum();
    DMatrix::from_column_slice(m.nrows(), 1, sums.as_slice())
}

/// Gated recurrent encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    /// wz, uz, bz, wr, ur, br, wn, un, bn, bun.
    pub mats: Vec<DMatrix<f64>>,
}

const GRU_NAMES: [&str; 10] =
    ["gru.wz", "gru.uz", "gru.bz", "gru.wr", "gru.ur", "gru.br", "gru.wn", "gru.un", "gru.bn", "gru.bun"];
const HEAD_NAMES: [&str; 8] = ["trunk.w1", "trunk.b1", "trunk.w2", "trunk.b2", "policy.w", "policy.b", "value.w", "value.b"];

struct GruStep {
    m: usize,
    x: DMatrix<f64>,
    h_prev: DMatrix<f64>,
    z: DMatrix<f64>,
    r: DMatrix<f64>,
    u: DMatrix<f64>,
    n: DMatrix<f64>,
}

impl Gru {
    pub fn init(arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let (h, i) = (arch.hidden, arch.input());
        let bound = 1.0 / (h as f64).sqrt();
        let mut mats = Vec::with_capacity(10);
        for _ in 0..3 {
            mats.push(uniform_matrix(rng, h, i, bound));
            mats.push(uniform_matrix(rng, h, h, bound));
            mats.push(uniform_matrix(rng, h, 1, bound));
        }
        mats.push(uniform_matrix(rng, h, 1, bound));
        Self { mats }
    }

    fn one_hot(arch: &Architecture, rows: &[&Vec<usize>]) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(arch.input(), rows.len());
        for (j, row) in rows.iter().enumerate() {
            for (c, &s) in row.iter().enumerate() {
                x[(c * (arch.surfaces + 1) + s, j)] = 1.0;
            }
        }
        x
    }

    /// Final hidden states of histories sorted by decreasing length.
    fn forward(&self, arch: &Architecture, histories: &[&[Vec<usize>]], keep: bool) -> (DMatrix<f64>, Vec<GruStep>) {
        let [wz, uz, bz, wr, ur, br, wn, un, bn, bun] = &self.mats[..] else { unreachable!() };
        let b = histories.len();
        let mut h = DMatrix::zeros(arch.hidden, b);
        let max_len = histories.first().map_or(0, |s| s.len());
        let mut steps = Vec::new();
        for t in 0..max_len {
            let m = histories.iter().take_while(|s| s.len() > t).count();
            let rows: Vec<&Vec<usize>> = histories[..m].iter().map(|s| &s[t]).collect();
            let x = Self::one_hot(arch, &rows);
            let hp = h.columns(0, m).into_owned();
            let mut z = wz * &x + uz * &hp;
            add_bias(&mut z, bz);
            z.apply(|v| *v = sigmoid(*v));
            let mut r = wr * &x + ur * &hp;
            add_bias(&mut r, br);
            r.apply(|v| *v = sigmoid(*v));
            let mut u = un * &hp;
            add_bias(&mut u, bun);
            let mut n = wn * &x + r.component_mul(&u);
            add_bias(&mut n, bn);
            n.apply(|v| *v = v.tanh());
            let hn = n.component_mul(&z.map(|v| 1.0 - v)) + z.component_mul(&hp);
            h.columns_mut(0, m).copy_from(&hn);
            if keep {
                steps.push(GruStep { m, x, h_prev: hp, z, r, u, n });
            }
        }
        (h, steps)
    }

    /// Accumulates parameter gradients given the gradient on the final states.
    fn backward(&self, steps: &[GruStep], mut dh: DMatrix<f64>, grads: &mut [DMatrix<f64>]) {
        let [_, uz, _, _, ur, _, _, un, _, _] = &self.mats[..] else { unreachable!() };
        for s in steps.iter().rev() {
            let m = s.m;
            let dhn = dh.columns(0, m).into_owned();
            let dn = dhn.component_mul(&s.z.map(|v| 1.0 - v));
            let dz = dhn.component_mul(&(&s.h_prev - &s.n));
            let mut dhp = dhn.component_mul(&s.z);
            let dan = dn.component_mul(&s.n.map(|v| 1.0 - v * v));
            let dr = dan.component_mul(&s.u);
            let du = dan.component_mul(&s.r);
            let dar = dr.component_mul(&s.r.map(|v| v * (1.0 - v)));
            let daz = dz.component_mul(&s.z.map(|v| v * (1.0 - v)));
            let xt = s.x.transpose();
            let ht = s.h_prev.transpose();
            grads[0] += &daz * &xt;
            grads[1] += &daz * &ht;
            grads[2] += row_sums(&daz);
            grads[3] += &dar * &xt;
            grads[4] += &dar * &ht;
            grads[5] += row_sums(&dar);
            grads[6] += &dan * &xt;
            grads[7] += &du * &ht;
            grads[8] += row_sums(&dan);
            grads[9] += row_sums(&du);
            dhp += uz.transpose() * &daz + ur.transpose() * &dar + un.transpose() * &du;
            dh.columns_mut(0, m).copy_from(&dhp);
        }
    }
}

/// Network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub gru: Gru,
    /// w1, b1, w2, b2, wp, bp, wv, bv.
    pub head: Vec<DMatrix<f64>>,
}

/// One network input with its legal action indices.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub history: &'a [Vec<usize>],
    pub pose: &'a [f64],
    pub goal: &'a [f64],
    pub legal: &'a [usize],
}

impl<'a> Example<'a> {
    pub fn from_sample(s: &'a TrainingSample) -> Self {
        Self { history: &s.history, pose: &s.pose, goal: &s.goal, legal: &s.legal }
    }

    pub fn from_features(f: &'a StateFeatures, legal: &'a [usize]) -> Self {
        Self { history: &f.history, pose: &f.pose, goal: &f.goal, legal }
    }
}

struct Forward {
    /// Sorted position to caller position.
    order: Vec<usize>,
    steps: Vec<GruStep>,
    input: DMatrix<f64>,
    a1: DMatrix<f64>,
    h1: DMatrix<f64>,
    a2: DMatrix<f64>,
    h2: DMatrix<f64>,
    /// Log-probabilities over each example's legal actions, sorted order.
    log_probs: Vec<Vec<f64>>,
    values: Vec<f64>,
}

/// Parameter gradients plus the loss they belong to.
pub struct Gradient {
    pub loss: f64,
    pub gru: Vec<DMatrix<f64>>,
    pub head: Vec<DMatrix<f64>>,
}

impl ModelParams {
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gru = Gru::init(&arch, &mut rng);
        let [t1, t2] = arch.trunk;
        let fan = |n: usize| (6.0 / n as f64).sqrt();
        let head = vec![
            uniform_matrix(&mut rng, t1, arch.trunk_input(), fan(arch.trunk_input())),
            DMatrix::zeros(t1, 1),
            uniform_matrix(&mut rng, t2, t1, fan(t1)),
            DMatrix::zeros(t2, 1),
            uniform_matrix(&mut rng, arch.actions(), t2, 1.0 / (t2 as f64).sqrt()),
            DMatrix::zeros(arch.actions(), 1),
            uniform_matrix(&mut rng, 1, t2, 1.0 / (t2 as f64).sqrt()),
            DMatrix::zeros(1, 1),
        ];
        Self { arch, gru, head }
    }

    pub fn num_params(&self) -> usize {
        self.gru.mats.iter().chain(&self.head).map(|m| m.len()).sum()
    }

    /// Section names aligned with `blocks`.
    pub fn block_names() -> Vec<&'static str> {
        GRU_NAMES.iter().chain(HEAD_NAMES.iter()).copied().collect()
    }

    pub fn blocks(&self) -> Vec<&DMatrix<f64>> {
        self.gru.mats.iter().chain(&self.head).collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.gru.mats.iter_mut().chain(self.head.iter_mut()).collect()
    }

    fn forward_batch(&self, examples: &[Example], keep: bool) -> Forward {
        let arch = &self.arch;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.sort_by(|&a, &b| examples[b].history.len().cmp(&examples[a].history.len()));
        let histories: Vec<&[Vec<usize>]> = order.iter().map(|&i| examples[i].history).collect();
        let (h, steps) = self.gru.forward(arch, &histories, keep);
        let b = examples.len();
        let mut input = DMatrix::zeros(arch.trunk_input(), b);
        input.rows_mut(0, arch.hidden).copy_from(&h);
        for (j, &i) in order.iter().enumerate() {
            for (k, v) in examples[i].pose.iter().enumerate() {
                input[(arch.hidden + k, j)] = *v;
            }
            for (k, v) in examples[i].goal.iter().enumerate() {
                input[(arch.hidden + POSE_FEATURES + k, j)] = *v;
            }
        }
        let [w1, b1, w2, b2, wp, bp, wv, bv] = &self.head[..] else { unreachable!() };
        let mut a1 = w1 * &input;
        add_bias(&mut a1, b1);
        let h1 = a1.map(|v| v.max(0.0));
        let mut a2 = w2 * &h1;
        add_bias(&mut a2, b2);
        let h2 = a2.map(|v| v.max(0.0));
        let mut logits = wp * &h2;
        add_bias(&mut logits, bp);
        let mut vpre = wv * &h2;
        add_bias(&mut vpre, bv);
        let mut log_probs = Vec::with_capacity(b);
        for (j, &i) in order.iter().enumerate() {
            let legal = examples[i].legal;
            let max = legal.iter().map(|&a| logits[(a, j)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + legal.iter().map(|&a| (logits[(a, j)] - max).exp()).sum::<f64>().ln();
            log_probs.push(legal.iter().map(|&a| logits[(a, j)] - lse).collect());
        }
        let values = vpre.iter().map(|&v| sigmoid(v)).collect();
        Forward { order, steps, input, a1, h1, a2, h2, log_probs, values }
    }

    /// Masked policy over `legal` and value in [0, 1].
    pub fn forward(&self, example: &Example) -> (Vec<f64>, f64) {
        assert!(!example.legal.is_empty(), "forward needs at least one legal action");
        let f = self.forward_batch(std::slice::from_ref(example), false);
        (f.log_probs[0].iter().map(|l| l.exp()).collect(), f.values[0])
    }

    /// Mean of `(v - v_target)^2 - sum p_target log p` over the batch.
    pub fn loss(&self, batch: &[&TrainingSample]) -> f64 {
        let examples: Vec<Example> = batch.iter().map(|s| Example::from_sample(s)).collect();
        let f = self.forward_batch(&examples, false);
        batch_loss(&f, batch)
    }

    pub fn gradient(&self, batch: &[&TrainingSample]) -> Gradient {
        let arch = &self.arch;
        let examples: Vec<Example> = batch.iter().map(|s| Example::from_sample(s)).collect();
        let f = self.forward_batch(&examples, true);
        let loss = batch_loss(&f, batch);
        let b = batch.len() as f64;
        let mut dlogits = DMatrix::zeros(arch.actions(), batch.len());
        let mut dvpre = DMatrix::zeros(1, batch.len());
        for (j, &i) in f.order.iter().enumerate() {
            let s = batch[i];
            for (k, &a) in s.legal.iter().enumerate() {
                dlogits[(a, j)] = (f.log_probs[j][k].exp() - s.policy[k]) / b;
            }
            let v = f.values[j];
            dvpre[(0, j)] = 2.0 * (v - s.value) * v * (1.0 - v) / b;
        }
        let [w1, _, w2, _, wp, _, wv, _] = &self.head[..] else { unreachable!() };
        let mut head = Vec::with_capacity(8);
        let h2t = f.h2.transpose();
        let mut dh2 = wp.transpose() * &dlogits + wv.transpose() * &dvpre;
        dh2.zip_apply(&f.a2, |d, a| {
            if a <= 0.0 {
                *d = 0.0
            }
        });
        let mut dh1 = w2.transpose() * &dh2;
        dh1.zip_apply(&f.a1, |d, a| {
            if a <= 0.0 {
                *d = 0.0
            }
        });
        let dinput = w1.transpose() * &dh1;
        head.push(&dh1 * f.input.transpose());
        head.push(row_sums(&dh1));
        head.push(&dh2 * f.h1.transpose());
        head.push(row_sums(&dh2));
        head.push(&dlogits * &h2t);
        head.push(row_sums(&dlogits));
        head.push(&dvpre * &h2t);
        head.push(row_sums(&dvpre));
        let mut gru: Vec<DMatrix<f64>> = self.gru.mats.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect();
        let dh = dinput.rows(0, arch.hidden).into_owned();
        self.gru.backward(&f.steps, dh, &mut gru);
        Gradient { loss, gru, head }
    }
}

fn batch_loss(f: &Forward, batch: &[&TrainingSample]) -> f64 {
    let mut total = 0.0;
    for (j, &i) in f.order.iter().enumerate() {
        let s = batch[i];
        let dv = f.values[j] - s.value;
        let ce: f64 = s.policy.iter().zip(&f.log_probs[j]).filter(|(p, _)| **p > 0.0).map(|(p, l)| -p * l).sum();
        total += dv * dv + ce;
    }
    total / batch.len() as f64
}

/// Denominator floor of the relative error: entries whose gradients are this
/// small are compared absolutely, since central differences of a loss of
/// order one carry about 1e-10 of rounding noise.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative error between analytic and central-difference gradients
/// over `probes` entries of every parameter block.
pub fn gradient_check(params: &ModelParams, batch: &[&TrainingSample], probes: usize, eps: f64, seed: u64) -> Vec<(String, f64)> {
    let grad = params.gradient(batch);
    let analytic: Vec<&DMatrix<f64>> = grad.gru.iter().chain(&grad.head).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut probe = params.clone();
    for (k, name) in ModelParams::block_names().into_iter().enumerate() {
        let len = analytic[k].len();
        let mut worst = 0.0f64;
        for _ in 0..probes.min(len) {
            let idx = rng.random_range(0..len);
            let orig = probe.blocks()[k][idx];
            probe.blocks_mut()[k][idx] = orig + eps;
            let plus = probe.loss(batch);
            probe.blocks_mut()[k][idx] = orig - eps;
            let minus = probe.loss(batch);
            probe.blocks_mut()[k][idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k][idx];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR));
        }
        out.push((name.to_string(), worst));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Classifier weight on feasible samples; `None` uses negatives / positives.
    pub positive_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epochs: 300, batch: 256, seed: 0, positive_weight: None }
    }
}

struct Adam {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<DMatrix<f64>> = params.blocks().iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, params: &mut ModelParams, grad: &Gradient, cfg: &TrainConfig) {
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let grads: Vec<&DMatrix<f64>> = grad.gru.iter().chain(&grad.head).collect();
        for (k, p) in params.blocks_mut().into_iter().enumerate() {
            let g = grads[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
        }
    }
}

fn cmp_f64s(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(a.len().cmp(&b.len()))
}

/// Canonical sample order so results do not depend on the input order.
fn canonical_cmp(a: &TrainingSample, b: &TrainingSample) -> Ordering {
    a.history
        .cmp(&b.history)
        .then_with(|| cmp_f64s(&a.pose, &b.pose))
        .then_with(|| cmp_f64s(&a.goal, &b.goal))
        .then_with(|| a.legal.cmp(&b.legal))
        .then_with(|| cmp_f64s(&a.policy, &b.policy))
        .then_with(|| a.value.total_cmp(&b.value))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub samples: usize,
}

/// Fits the policy-value network on the samples with positive value.
pub fn train_model(
    dataset: &[TrainingSample],
    arch: Architecture,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport), LearnError> {
    let mut positive: Vec<&TrainingSample> = dataset.iter().filter(|s| s.value > 0.0).collect();
    if positive.is_empty() {
        return Err(LearnError::EmptyPositiveSet);
    }
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(LearnError::Format("epochs and batch size must be positive".into()));
    }
    for s in &positive {
        check_sample(&arch, s)?;
    }
    positive.sort_by(|a, b| canonical_cmp(a, b));
    let mut params = ModelParams::init(arch, cfg.seed);
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..positive.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| positive[i]).collect();
            assert!(batch.iter().all(|s| s.value > 0.0), "zero-value sample reached the policy-value loss");
            let grad = params.gradient(&batch);
            total += grad.loss * batch.len() as f64;
            adam.step(&mut params, &grad, cfg);
        }
        losses.push(total / positive.len() as f64);
    }
    tracing::debug!(samples = positive.len(), final_loss = losses.last().copied(), "trained policy-value network");
    Ok((params, TrainReport { losses, samples: positive.len() }))
}

fn check_sample(arch: &Architecture, s: &TrainingSample) -> Result<(), LearnError> {
    let bad = |m: String| Err(LearnError::Incompatible(m));
    if s.pose.len() != POSE_FEATURES || s.goal.len() != GOAL_FEATURES {
        return bad("pose or goal has the wrong length".into());
    }
    if s.legal.is_empty() || s.legal.len() != s.policy.len() || s.legal.iter().any(|&a| a >= arch.actions()) {
        return bad("legal actions and policy disagree with the action space".into());
    }
    if s.history.iter().any(|row| row.len() != arch.effectors || row.iter().any(|&x| x > arch.surfaces)) {
        return bad("history does not match the model's surfaces and effectors".into());
    }
    Ok(())
}

/// Logistic regression over frozen recurrent features.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: Gru,
    pub weights: DVector<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub balanced_accuracy: f64,
    pub positives: usize,
    pub negatives: usize,
    pub positive_weight: f64,
}

impl Classifier {
    fn features_of(&self, arch: &Architecture, examples: &[(&[Vec<usize>], &[f64], &[f64])]) -> DMatrix<f64> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.sort_by(|&a, &b| examples[b].0.len().cmp(&examples[a].0.len()));
        let histories: Vec<&[Vec<usize>]> = order.iter().map(|&i| examples[i].0).collect();
        let (h, _) = self.encoder.forward(arch, &histories, false);
        let mut x = DMatrix::zeros(examples.len(), arch.trunk_input());
        for (j, &i) in order.iter().enumerate() {
            for k in 0..arch.hidden {
                x[(i, k)] = h[(k, j)];
            }
            for (k, v) in examples[i].1.iter().chain(examples[i].2).enumerate() {
                x[(i, arch.hidden + k)] = *v;
            }
        }
        x
    }

    pub fn score(&self, arch: &Architecture, history: &[Vec<usize>], pose: &[f64], goal: &[f64]) -> f64 {
        let x = self.features_of(arch, &[(history, pose, goal)]);
        sigmoid(x.row(0).transpose().dot(&self.weights) + self.bias)
    }
}

const RIDGE: f64 = 1e-3;

/// Weighted logistic regression by Newton iterations with a small ridge on
/// the weights.
fn fit_logistic(x: &DMatrix<f64>, y: &[bool], pos_weight: f64) -> (DVector<f64>, f64) {
    let (n, p) = x.shape();
    let mut theta = DVector::zeros(p + 1);
    for _ in 0..100 {
        let mut grad = DVector::zeros(p + 1);
        let mut hess = DMatrix::zeros(p + 1, p + 1);
        let mut row = DVector::zeros(p + 1);
        for i in 0..n {
            row.rows_mut(0, p).copy_from(&x.row(i).transpose());
            row[p] = 1.0;
            let s = sigmoid(row.dot(&theta));
            let w = if y[i] { pos_weight } else { 1.0 };
            let target = if y[i] { 1.0 } else { 0.0 };
            grad.axpy(w * (s - target), &row, 1.0);
            hess.ger(w * s * (1.0 - s), &row, &row, 1.0);
        }
        for k in 0..p {
            grad[k] += RIDGE * theta[k];
            hess[(k, k)] += RIDGE;
        }
        hess[(p, p)] += 1e-9;
        let Some(chol) = hess.cholesky() else { break };
        let step = chol.solve(&grad);
        theta -= &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    (theta.rows(0, p).into_owned(), theta[p])
}

fn balanced_accuracy(scores: &[f64], y: &[bool]) -> f64 {
    let (mut tp, mut pos, mut tn, mut neg) = (0, 0, 0, 0);
    for (s, &l) in scores.iter().zip(y) {
        if l {
            pos += 1;
            tp += usize::from(*s >= 0.5);
        } else {
            neg += 1;
            tn += usize::from(*s < 0.5);
        }
    }
    let rate = |hit: usize, all: usize| if all == 0 { 1.0 } else { hit as f64 / all as f64 };
    0.5 * (rate(tp, pos) + rate(tn, neg))
}

/// Trains the feasibility gate. Balanced accuracy is measured on a seeded
/// 20% hold-out; the returned classifier is refit on every sample.
pub fn train_classifier(
    dataset: &[TrainingSample],
    arch: Architecture,
    cfg: &TrainConfig,
) -> Result<(Classifier, ClassifierReport), LearnError> {
    let mut samples: Vec<&TrainingSample> = dataset.iter().collect();
    samples.sort_by(|a, b| canonical_cmp(a, b));
    let positives = samples.iter().filter(|s| s.feasible).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(LearnError::SingleClass);
    }
    for s in &samples {
        check_sample(&arch, s)?;
    }
    let pos_weight = cfg.positive_weight.unwrap_or(negatives as f64 / positives as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc1a5_51f1);
    let encoder = Gru::init(&arch, &mut rng);
    let mut clf = Classifier { encoder, weights: DVector::zeros(arch.trunk_input()), bias: 0.0 };
    let examples: Vec<(&[Vec<usize>], &[f64], &[f64])> =
        samples.iter().map(|s| (s.history.as_slice(), s.pose.as_slice(), s.goal.as_slice())).collect();
    let x = clf.features_of(&arch, &examples);
    let y: Vec<bool> = samples.iter().map(|s| s.feasible).collect();

    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut rng);
    let cut = samples.len() - samples.len() / 5;
    let (train, held) = idx.split_at(cut);
    let held_has_both = held.iter().any(|&i| y[i]) && held.iter().any(|&i| !y[i]);
    let train_has_both = train.iter().any(|&i| y[i]) && train.iter().any(|&i| !y[i]);
    let balanced = if held_has_both && train_has_both {
        let xt = x.select_rows(train);
        let yt: Vec<bool> = train.iter().map(|&i| y[i]).collect();
        let (w, b) = fit_logistic(&xt, &yt, pos_weight);
        let scores: Vec<f64> = held.iter().map(|&i| sigmoid(x.row(i).transpose().dot(&w) + b)).collect();
        let yh: Vec<bool> = held.iter().map(|&i| y[i]).collect();
        balanced_accuracy(&scores, &yh)
    } else {
        f64::NAN
    };
    let (w, b) = fit_logistic(&x, &y, pos_weight);
    clf.weights = w;
    clf.bias = b;
    let balanced = if balanced.is_nan() {
        let scores: Vec<f64> = (0..samples.len()).map(|i| sigmoid(x.row(i).transpose().dot(&clf.weights) + b)).collect();
        balanced_accuracy(&scores, &y)
    } else {
        balanced
    };
    Ok((clf, ClassifierReport { balanced_accuracy: balanced, positives, negatives, positive_weight: pos_weight }))
}

/// Uniform priors and zero value when the gate rejects the state, network
/// output otherwise.
pub fn guided_priors(
    model: &ModelParams,
    classifier: Option<&Classifier>,
    features: &StateFeatures,
    legal: &[usize],
) -> (Vec<f64>, f64) {
    if let Some(clf) = classifier {
        if clf.score(&model.arch, &features.history, &features.pose, &features.goal) < 0.5 {
            return (vec![1.0 / legal.len() as f64; legal.len()], 0.0);
        }
    }
    model.forward(&Example::from_features(features, legal))
}

/// Trained network and optional gate, usable as a search guide.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedModel {
    pub params: ModelParams,
    pub classifier: Option<Classifier>,
}

impl Guide for GuidedModel {
    fn guide(&self, state: &SearchState, ctx: &TaskContext, legal: &[usize]) -> (Vec<f64>, f64) {
        let features = encode_state(state, ctx, self.params.arch.lookahead);
        guided_priors(&self.params, self.classifier.as_ref(), &features, legal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Section {
    name: String,
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

impl Section {
    fn new(name: &str, m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
        Self { name: name.into(), rows: m.nrows(), cols: m.ncols(), data }
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>, LearnError> {
        if self.name != name || self.rows != rows || self.cols != cols || self.data.len() != rows * cols {
            return Err(LearnError::Format(format!(
                "section {} ({}x{}) where {name} ({rows}x{cols}) was expected",
                self.name, self.rows, self.cols
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(LearnError::Format(format!("section {name} has non-finite weights")));
        }
        Ok(DMatrix::from_row_slice(rows, cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassifierFile {
    encoder: Vec<Section>,
    weights: Vec<f64>,
    bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    architecture: Architecture,
    sections: Vec<Section>,
    classifier: Option<ClassifierFile>,
}

fn gru_shapes(arch: &Architecture) -> Vec<(usize, usize)> {
    let (h, i) = (arch.hidden, arch.input());
    vec![(h, i), (h, h), (h, 1), (h, i), (h, h), (h, 1), (h, i), (h, h), (h, 1), (h, 1)]
}

fn head_shapes(arch: &Architecture) -> Vec<(usize, usize)> {
    let [t1, t2] = arch.trunk;
    vec![(t1, arch.trunk_input()), (t1, 1), (t2, t1), (t2, 1), (arch.actions(), t2), (arch.actions(), 1), (1, t2), (1, 1)]
}

fn read_sections(sections: &[Section], names: &[&str], shapes: &[(usize, usize)]) -> Result<Vec<DMatrix<f64>>, LearnError> {
    if sections.len() != names.len() {
        return Err(LearnError::Format(format!("expected {} sections, found {}", names.len(), sections.len())));
    }
    sections.iter().zip(names).zip(shapes).map(|((s, n), &(r, c))| s.matrix(n, r, c)).collect()
}

impl GuidedModel {
    pub fn to_json(&self) -> String {
        let sections = ModelParams::block_names().into_iter().zip(self.params.blocks()).map(|(n, m)| Section::new(n, m)).collect();
        let classifier = self.classifier.as_ref().map(|c| ClassifierFile {
            encoder: GRU_NAMES.iter().zip(&c.encoder.mats).map(|(n, m)| Section::new(n, m)).collect(),
            weights: c.weights.iter().copied().collect(),
            bias: c.bias,
        });
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            architecture: self.params.arch,
            sections,
            classifier,
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LearnError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| LearnError::Format(e.to_string()))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(LearnError::Format(format!("unsupported model {} v{}", file.format, file.version)));
        }
        let arch = file.architecture;
        if arch.hidden == 0 || arch.trunk.contains(&0) || arch.effectors == 0 || arch.lookahead == 0 {
            return Err(LearnError::Format("degenerate architecture".into()));
        }
        let names = ModelParams::block_names();
        let shapes: Vec<(usize, usize)> = gru_shapes(&arch).into_iter().chain(head_shapes(&arch)).collect();
        let mut mats = read_sections(&file.sections, &names, &shapes)?;
        let head = mats.split_off(GRU_NAMES.len());
        let params = ModelParams { arch, gru: Gru { mats }, head };
        let classifier = match file.classifier {
            None => None,
            Some(c) => {
                if c.weights.len() != arch.trunk_input() || !c.bias.is_finite() || c.weights.iter().any(|w| !w.is_finite()) {
                    return Err(LearnError::Format("classifier weights do not match the architecture".into()));
                }
                let mats = read_sections(&c.encoder, &GRU_NAMES, &gru_shapes(&arch))?;
                Some(Classifier { encoder: Gru { mats }, weights: DVector::from_vec(c.weights), bias: c.bias })
            }
        };
        Ok(Self { params, classifier })
    }
}

/// Writes one JSON object per line.
pub fn write_dataset<W: Write>(mut out: W, samples: &[TrainingSample]) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<TrainingSample>, LearnError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| LearnError::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LearnError::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(history: Vec<Vec<usize>>, legal: Vec<usize>, policy: Vec<f64>, value: f64) -> TrainingSample {
        TrainingSample {
            history,
            pose: (0..12).map(|i| 0.1 * i as f64).collect(),
            goal: vec![0.01, -0.02, 0.0, 0.0, 0.0, 0.3],
            legal,
            policy,
            value,
            feasible: value > 0.0,
        }
    }

    #[test]
    fn single_legal_action_gets_all_mass() {
        let params = ModelParams::init(Architecture::new(5, 2, 1), 3);
        let s = sample(vec![vec![1, 0]], vec![8], vec![1.0], 0.5);
        let (p, v) = params.forward(&Example::from_sample(&s));
        assert_eq!(p, vec![1.0]);
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn entropy_floor() {
        let mut params = ModelParams::init(Architecture::new(5, 2, 1), 3);
        // Zero policy weights make the two legal actions equally likely.
        params.head[4].fill(0.0);
        let probe = sample(vec![], vec![0, 1], vec![0.5, 0.5], 0.0);
        let (_, v) = params.forward(&Example::from_sample(&probe));
        let s = sample(vec![], vec![0, 1], vec![0.5, 0.5], v);
        assert!((params.loss(&[&s]) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn batched_forward_matches_single() {
        let params = ModelParams::init(Architecture::new(5, 2, 1), 9);
        let a = sample(vec![vec![1, 0], vec![1, 2]], vec![8, 9, 10], vec![0.2, 0.3, 0.5], 0.4);
        let b = sample(vec![], vec![0, 1], vec![0.5, 0.5], 0.1);
        let c = sample(vec![vec![0, 3]], vec![3, 9], vec![1.0, 0.0], 0.9);
        let together = params.loss(&[&a, &b, &c]);
        let apart = (params.loss(&[&a]) + params.loss(&[&b]) + params.loss(&[&c])) / 3.0;
        assert!((together - apart).abs() < 1e-12);
    }
}
