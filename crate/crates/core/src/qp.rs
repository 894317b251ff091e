//! Convex quadratic programs
//!
//! ```text
//! minimize    1/2 x'Px + c'x
//! subject to  A x  = b
//!             G x <= h
//! ```
//!
//! solved by operator splitting (OSQP-style ADMM with Ruiz equilibration and
//! over-relaxation) followed by an active-set polishing step. Before solving,
//! variables tied by `x_i - x_j = 0` rows are merged and the problem is split
//! into independent blocks, each solved densely.
//!
//! Infeasibility is decided by a Phase-I probe that minimizes constraint
//! violation; it is triggered when the ADMM dual iterates look like a
//! certificate or when the iteration budget runs out.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

use crate::error::QpError;

/// Coordinate-format matrix; duplicate entries are summed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, entries: Vec::new() }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut out = Self::new(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.push(r, c, m[(r, c)]);
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    fn summed(&self) -> BTreeMap<(usize, usize), f64> {
        let mut map = BTreeMap::new();
        for &(r, c, v) in &self.entries {
            *map.entry((r, c)).or_insert(0.0) += v;
        }
        map
    }

    /// Row-wise lists of `(col, value)` with duplicates summed, ordered by column.
    fn row_lists(&self) -> Vec<Vec<(usize, f64)>> {
        let mut rows = vec![Vec::new(); self.rows];
        for ((r, c), v) in self.summed() {
            if v != 0.0 {
                rows[r].push((c, v));
            }
        }
        rows
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for &(r, c, v) in &self.entries {
            out[r] += v * x[c];
        }
        out
    }

    pub fn transpose_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for &(r, c, v) in &self.entries {
            out[c] += v * y[r];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuadraticProgram {
    /// Symmetric positive semidefinite `P` (both triangles stored).
    pub cost: SparseMatrix,
    pub linear: Vec<f64>,
    pub eq: SparseMatrix,
    pub eq_rhs: Vec<f64>,
    pub ineq: SparseMatrix,
    pub ineq_rhs: Vec<f64>,
}

impl QuadraticProgram {
    pub fn with_vars(n: usize) -> Self {
        Self {
            cost: SparseMatrix::new(n, n),
            linear: vec![0.0; n],
            eq: SparseMatrix::new(0, n),
            eq_rhs: Vec::new(),
            ineq: SparseMatrix::new(0, n),
            ineq_rhs: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn num_eq(&self) -> usize {
        self.eq_rhs.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.ineq_rhs.len()
    }

    /// Adds `value` to `P[i][j]` and `P[j][i]` (once on the diagonal).
    pub fn add_cost(&mut self, i: usize, j: usize, value: f64) {
        self.cost.push(i, j, value);
        if i != j {
            self.cost.push(j, i, value);
        }
    }

    pub fn add_eq(&mut self, row: &[(usize, f64)], rhs: f64) -> usize {
        let r = self.eq_rhs.len();
        self.eq.rows += 1;
        for &(c, v) in row {
            self.eq.push(r, c, v);
        }
        self.eq_rhs.push(rhs);
        r
    }

    pub fn add_ineq(&mut self, row: &[(usize, f64)], rhs: f64) -> usize {
        let r = self.ineq_rhs.len();
        self.ineq.rows += 1;
        for &(c, v) in row {
            self.ineq.push(r, c, v);
        }
        self.ineq_rhs.push(rhs);
        r
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let px = self.cost.mul_vec(x);
        0.5 * dot(x, &px) + dot(&self.linear, x)
    }

    /// Largest equality or inequality violation at `x`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let eq = self.eq.mul_vec(x);
        let ineq = self.ineq.mul_vec(x);
        let e = eq.iter().zip(&self.eq_rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let i = ineq.iter().zip(&self.ineq_rhs).map(|(a, b)| a - b).fold(0.0, f64::max);
        e.max(i)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        let dim = |what: &str| Err(QpError::Dimension(what.to_string()));
        if self.cost.rows != n || self.cost.cols != n {
            return dim("P must be n x n");
        }
        if self.eq.cols != n || self.eq.rows != self.eq_rhs.len() {
            return dim("A and b are inconsistent");
        }
        if self.ineq.cols != n || self.ineq.rows != self.ineq_rhs.len() {
            return dim("G and h are inconsistent");
        }
        for m in [&self.cost, &self.eq, &self.ineq] {
            if m.entries.iter().any(|&(r, c, v)| r >= m.rows || c >= m.cols || !v.is_finite()) {
                return Err(QpError::NonFinite);
            }
        }
        if self.linear.iter().chain(&self.eq_rhs).chain(&self.ineq_rhs).any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite);
        }
        let summed = self.cost.summed();
        let scale = summed.values().fold(1.0f64, |a, v| a.max(v.abs()));
        let mut asym = 0.0f64;
        for (&(r, c), &v) in &summed {
            let t = summed.get(&(c, r)).copied().unwrap_or(0.0);
            asym = asym.max((v - t).abs());
        }
        if asym > 1e-9 * scale {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    PrimalInfeasible,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers of `A x = b`; rows consumed by variable merging report 0.
    pub eq_multipliers: Vec<f64>,
    /// Non-negative multipliers of `G x <= h`.
    pub ineq_multipliers: Vec<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    /// ADMM step size; equality rows use 1e3 times this value.
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation.
    pub alpha: f64,
    pub scaling_iters: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            polish: true,
        }
    }
}

/// Threshold on the minimal violation above which a system is infeasible.
pub const INFEASIBILITY_TOL: f64 = 1e-6;

const CHECK_EVERY: usize = 10;
/// Iteration from which active-set polishing is attempted at every check.
const POLISH_AFTER: usize = 50;
/// Iteration after which an unconverged solve asks the Phase-I probe once.
const PROBE_AFTER: usize = 200;

pub fn solve(qp: &QuadraticProgram, settings: &QpSettings) -> Result<QpSolution, QpError> {
    solve_warm(qp, settings, None)
}

/// Solves with an optional primal starting point.
pub fn solve_warm(qp: &QuadraticProgram, settings: &QpSettings, warm: Option<&[f64]>) -> Result<QpSolution, QpError> {
    qp.validate()?;
    let pre = Presolved::new(qp);
    let n = qp.num_vars();
    let mut x = vec![0.0; n];
    let mut eq_mult = vec![0.0; qp.num_eq()];
    let mut ineq_mult = vec![0.0; qp.num_ineq()];
    let mut status = if pre.inconsistent { QpStatus::PrimalInfeasible } else { QpStatus::Optimal };
    let mut iterations = 0;
    let mut xr = vec![0.0; pre.num_reduced];

    for block in &pre.blocks {
        let dense = pre.dense_block(block);
        dense.check_psd()?;
        // One infeasible block decides the status; the rest only need validation.
        if status == QpStatus::PrimalInfeasible {
            continue;
        }
        let start: Option<Vec<f64>> = warm.map(|w| block.vars.iter().map(|&rv| w[pre.rep_of_reduced[rv]]).collect());
        let sol = dense.solve(settings, start.as_deref());
        iterations = iterations.max(sol.iterations);
        status = worse(status, sol.status);
        for (k, &rv) in block.vars.iter().enumerate() {
            xr[rv] = sol.x[k];
        }
        for (k, row) in block.rows.iter().enumerate() {
            match *row {
                RowRef::Eq(r) => eq_mult[r] = sol.y[k],
                RowRef::Ineq(r) => ineq_mult[r] = sol.y[k],
            }
        }
    }
    for (i, xi) in x.iter_mut().enumerate() {
        *xi = xr[pre.reduced_of[i]];
    }
    let (primal_residual, dual_residual) = residuals(qp, &x, &eq_mult, &ineq_mult);
    let objective = qp.objective(&x);
    Ok(QpSolution {
        x,
        eq_multipliers: eq_mult,
        ineq_multipliers: ineq_mult,
        status,
        primal_residual,
        dual_residual,
        iterations,
        objective,
    })
}

/// True iff the constraints `A x = b, G x <= h` admit no point within
/// [`INFEASIBILITY_TOL`]: a Phase-I problem minimizing the squared violation
/// is solved and its optimal violation compared to the threshold.
pub fn infeasibility_probe(qp: &QuadraticProgram) -> bool {
    if qp.validate().is_err() {
        return true;
    }
    let pre = Presolved::new(qp);
    if pre.inconsistent {
        return true;
    }
    pre.blocks.iter().any(|b| pre.dense_block(b).probe_infeasible())
}

fn worse(a: QpStatus, b: QpStatus) -> QpStatus {
    use QpStatus::*;
    match (a, b) {
        (PrimalInfeasible, _) | (_, PrimalInfeasible) => PrimalInfeasible,
        (MaxIterations, _) | (_, MaxIterations) => MaxIterations,
        _ => Optimal,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Constraint violation and stationarity residual of the original problem.
fn residuals(qp: &QuadraticProgram, x: &[f64], eq_mult: &[f64], ineq_mult: &[f64]) -> (f64, f64) {
    let primal = qp.violation(x);
    let mut grad = qp.cost.mul_vec(x);
    for (g, c) in grad.iter_mut().zip(&qp.linear) {
        *g += c;
    }
    let at = qp.eq.transpose_mul_vec(eq_mult);
    let gt = qp.ineq.transpose_mul_vec(ineq_mult);
    let dual = (0..x.len()).map(|i| (grad[i] + at[i] + gt[i]).abs()).fold(0.0, f64::max);
    (primal, dual)
}

#[derive(Debug, Clone, Copy)]
enum RowRef {
    Eq(usize),
    Ineq(usize),
}

#[derive(Debug)]
struct Block {
    vars: Vec<usize>,
    rows: Vec<RowRef>,
}

/// Problem after merging tied variables, split into independent blocks.
struct Presolved {
    num_reduced: usize,
    /// Original variable -> reduced variable.
    reduced_of: Vec<usize>,
    /// Reduced variable -> one original representative.
    rep_of_reduced: Vec<usize>,
    cost: BTreeMap<(usize, usize), f64>,
    linear: Vec<f64>,
    eq_rows: Vec<Option<Vec<(usize, f64)>>>,
    eq_rhs: Vec<f64>,
    ineq_rows: Vec<Option<Vec<(usize, f64)>>>,
    ineq_rhs: Vec<f64>,
    blocks: Vec<Block>,
    inconsistent: bool,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

fn merge_row(row: &[(usize, f64)], map: &[usize]) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for &(c, v) in row {
        *acc.entry(map[c]).or_insert(0.0) += v;
    }
    acc.into_iter().filter(|(_, v)| *v != 0.0).collect()
}

impl Presolved {
    fn new(qp: &QuadraticProgram) -> Self {
        let n = qp.num_vars();
        let eq_lists = qp.eq.row_lists();
        let ineq_lists = qp.ineq.row_lists();

        let mut uf = UnionFind::new(n);
        let mut consumed = vec![false; eq_lists.len()];
        for (r, row) in eq_lists.iter().enumerate() {
            if row.len() == 2 && qp.eq_rhs[r] == 0.0 && row[0].1 == -row[1].1 {
                uf.union(row[0].0, row[1].0);
                consumed[r] = true;
            }
        }
        let mut reduced_of = vec![0; n];
        let mut rep_of_reduced = Vec::new();
        let mut root_to_reduced = BTreeMap::new();
        for i in 0..n {
            let root = uf.find(i);
            let next = root_to_reduced.len();
            let idx = *root_to_reduced.entry(root).or_insert(next);
            if idx == rep_of_reduced.len() {
                rep_of_reduced.push(i);
            }
            reduced_of[i] = idx;
        }
        let num_reduced = rep_of_reduced.len();

        let mut cost = BTreeMap::new();
        for ((r, c), v) in qp.cost.summed() {
            *cost.entry((reduced_of[r], reduced_of[c])).or_insert(0.0) += v;
        }
        let mut linear = vec![0.0; num_reduced];
        for (i, c) in qp.linear.iter().enumerate() {
            linear[reduced_of[i]] += c;
        }

        let mut inconsistent = false;
        let mut eq_rows: Vec<Option<Vec<(usize, f64)>>> = eq_lists
            .iter()
            .enumerate()
            .map(|(r, row)| {
                if consumed[r] {
                    return None;
                }
                let merged = merge_row(row, &reduced_of);
                if merged.is_empty() {
                    if qp.eq_rhs[r].abs() > INFEASIBILITY_TOL {
                        inconsistent = true;
                    }
                    return None;
                }
                Some(merged)
            })
            .collect();
        let mut ineq_rows: Vec<Option<Vec<(usize, f64)>>> = ineq_lists
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let merged = merge_row(row, &reduced_of);
                if merged.is_empty() {
                    if qp.ineq_rhs[r] < -INFEASIBILITY_TOL {
                        inconsistent = true;
                    }
                    return None;
                }
                Some(merged)
            })
            .collect();

        // Tied variables turn per-timestep rows into exact duplicates. Keep one
        // copy (the tightest inequality) so active sets stay regular.
        let key = |row: &[(usize, f64)]| -> Vec<(usize, u64)> { row.iter().map(|&(c, v)| (c, v.to_bits())).collect() };
        let mut seen: HashMap<Vec<(usize, u64)>, usize> = HashMap::new();
        for r in 0..eq_rows.len() {
            let Some(row) = &eq_rows[r] else { continue };
            match seen.get(&key(row)) {
                Some(&first) => {
                    if (qp.eq_rhs[first] - qp.eq_rhs[r]).abs() > INFEASIBILITY_TOL {
                        inconsistent = true;
                    }
                    eq_rows[r] = None;
                }
                None => {
                    seen.insert(key(row), r);
                }
            }
        }
        seen.clear();
        for r in 0..ineq_rows.len() {
            let Some(row) = &ineq_rows[r] else { continue };
            let k = key(row);
            match seen.get(&k).copied() {
                Some(kept) if qp.ineq_rhs[r] < qp.ineq_rhs[kept] => {
                    ineq_rows[kept] = None;
                    seen.insert(k, r);
                }
                Some(_) => ineq_rows[r] = None,
                None => {
                    seen.insert(k, r);
                }
            }
        }

        // Connected components over cost couplings and shared rows.
        let mut comp = UnionFind::new(num_reduced);
        for &(r, c) in cost.keys() {
            comp.union(r, c);
        }
        for row in eq_rows.iter().chain(&ineq_rows).flatten() {
            for w in row.windows(2) {
                comp.union(w[0].0, w[1].0);
            }
        }
        let mut block_of_root: BTreeMap<usize, usize> = BTreeMap::new();
        let mut blocks: Vec<Block> = Vec::new();
        for v in 0..num_reduced {
            let root = comp.find(v);
            let b = *block_of_root.entry(root).or_insert_with(|| {
                blocks.push(Block { vars: Vec::new(), rows: Vec::new() });
                blocks.len() - 1
            });
            blocks[b].vars.push(v);
        }
        for (r, row) in eq_rows.iter().enumerate() {
            if let Some(row) = row {
                let b = block_of_root[&comp.find(row[0].0)];
                blocks[b].rows.push(RowRef::Eq(r));
            }
        }
        for (r, row) in ineq_rows.iter().enumerate() {
            if let Some(row) = row {
                let b = block_of_root[&comp.find(row[0].0)];
                blocks[b].rows.push(RowRef::Ineq(r));
            }
        }

        Self {
            num_reduced,
            reduced_of,
            rep_of_reduced,
            cost,
            linear,
            eq_rows,
            eq_rhs: qp.eq_rhs.clone(),
            ineq_rows,
            ineq_rhs: qp.ineq_rhs.clone(),
            blocks,
            inconsistent,
        }
    }

    fn dense_block(&self, block: &Block) -> DenseQp {
        let n = block.vars.len();
        let m = block.rows.len();
        let mut local = BTreeMap::new();
        for (k, &v) in block.vars.iter().enumerate() {
            local.insert(v, k);
        }
        let mut p = DMatrix::zeros(n, n);
        for (&(r, c), &v) in self.cost.range((block.vars[0], 0)..) {
            if let (Some(&i), Some(&j)) = (local.get(&r), local.get(&c)) {
                p[(i, j)] += v;
            }
        }
        let q = DVector::from_iterator(n, block.vars.iter().map(|&v| self.linear[v]));
        let mut c = DMatrix::zeros(m, n);
        let mut lower = DVector::zeros(m);
        let mut upper = DVector::zeros(m);
        for (k, row) in block.rows.iter().enumerate() {
            let (coeffs, lo, hi) = match *row {
                RowRef::Eq(r) => (self.eq_rows[r].as_ref().unwrap(), self.eq_rhs[r], self.eq_rhs[r]),
                RowRef::Ineq(r) => (self.ineq_rows[r].as_ref().unwrap(), f64::NEG_INFINITY, self.ineq_rhs[r]),
            };
            for &(col, v) in coeffs {
                c[(k, local[&col])] += v;
            }
            lower[k] = lo;
            upper[k] = hi;
        }
        DenseQp { p, q, c, lower, upper }
    }
}

/// `min 1/2 x'Px + q'x  s.t.  lower <= C x <= upper`.
#[derive(Debug, Clone)]
pub(crate) struct DenseQp {
    p: DMatrix<f64>,
    q: DVector<f64>,
    c: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct DenseSolution {
    pub x: Vec<f64>,
    /// Row multipliers, positive for active upper bounds.
    pub y: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
}

struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    cost: f64,
}

fn clamp_norm(v: f64) -> f64 {
    if v < 1e-4 {
        1.0
    } else {
        v.min(1e4)
    }
}

impl DenseQp {
    fn n(&self) -> usize {
        self.q.len()
    }

    fn m(&self) -> usize {
        self.lower.len()
    }

    fn check_psd(&self) -> Result<(), QpError> {
        if self.n() == 0 {
            return Ok(());
        }
        let scale = self.p.amax().max(1.0);
        let min_eig = self.p.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-8 * scale {
            return Err(QpError::NotPsd(min_eig));
        }
        Ok(())
    }

    fn equilibrate(&self, iters: usize) -> (DenseQp, Scaling) {
        let (n, m) = (self.n(), self.m());
        let mut s = self.clone();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        for _ in 0..iters {
            let mut dd = DVector::zeros(n);
            for j in 0..n {
                let pc = s.p.column(j).amax();
                let cc = if m > 0 { s.c.column(j).amax() } else { 0.0 };
                dd[j] = 1.0 / clamp_norm(pc.max(cc)).sqrt();
            }
            let mut de = DVector::zeros(m);
            for i in 0..m {
                de[i] = 1.0 / clamp_norm(s.c.row(i).amax()).sqrt();
            }
            for i in 0..n {
                for j in 0..n {
                    s.p[(i, j)] *= dd[i] * dd[j];
                }
                s.q[i] *= dd[i];
            }
            for i in 0..m {
                for j in 0..n {
                    s.c[(i, j)] *= de[i] * dd[j];
                }
            }
            d.component_mul_assign(&dd);
            e.component_mul_assign(&de);
        }
        let mean_col = if n > 0 { (0..n).map(|j| s.p.column(j).amax()).sum::<f64>() / n as f64 } else { 1.0 };
        let cost = 1.0 / clamp_norm(mean_col.max(s.q.amax()));
        s.p *= cost;
        s.q *= cost;
        for i in 0..m {
            s.lower[i] *= e[i];
            s.upper[i] *= e[i];
        }
        (s, Scaling { d, e, cost })
    }

    /// Unscaled residuals and their tolerances for iterate `(x, z, y)`.
    fn converged(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>, set: &QpSettings) -> bool {
        let cx = &self.c * x;
        let prim = (&cx - z).amax();
        let px = &self.p * x;
        let cty = self.c.transpose() * y;
        let dual = (&px + &self.q + &cty).amax();
        let eps_p = set.eps_abs + set.eps_rel * cx.amax().max(z.amax());
        let eps_d = set.eps_abs + set.eps_rel * px.amax().max(cty.amax()).max(self.q.amax());
        prim <= eps_p && dual <= eps_d
    }

    fn solve(&self, set: &QpSettings, warm: Option<&[f64]>) -> DenseSolution {
        self.admm(set, warm, true)
    }

    /// ADMM with in-loop polishing; `probing` enables the Phase-I probe.
    fn admm(&self, set: &QpSettings, warm: Option<&[f64]>, probing: bool) -> DenseSolution {
        let (n, m) = (self.n(), self.m());
        if n == 0 {
            let ok = (0..m).all(|i| self.lower[i] <= INFEASIBILITY_TOL && self.upper[i] >= -INFEASIBILITY_TOL);
            let status = if ok { QpStatus::Optimal } else { QpStatus::PrimalInfeasible };
            return DenseSolution { x: vec![], y: vec![0.0; m], status, iterations: 0 };
        }
        let (s, sc) = self.equilibrate(set.scaling_iters);
        let rho: DVector<f64> = DVector::from_iterator(
            m,
            (0..m).map(|i| if self.lower[i] == self.upper[i] { set.rho * 1e3 } else { set.rho }),
        );
        let mut kkt = &s.p + DMatrix::identity(n, n) * set.sigma;
        if m > 0 {
            let mut rc = s.c.clone();
            for i in 0..m {
                rc.row_mut(i).scale_mut(rho[i]);
            }
            kkt += s.c.transpose() * rc;
        }
        let chol = match kkt.clone().cholesky() {
            Some(c) => c,
            None => (kkt + DMatrix::identity(n, n) * 1e-9).cholesky().expect("regularized KKT is positive definite"),
        };

        let mut x = match warm {
            Some(w) => DVector::from_iterator(n, w.iter().enumerate().map(|(i, v)| v / sc.d[i])),
            None => DVector::zeros(n),
        };
        let mut z = &s.c * &x;
        for i in 0..m {
            z[i] = z[i].clamp(s.lower[i], s.upper[i]);
        }
        let mut y: DVector<f64> = DVector::zeros(m);
        let unscale = |x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>| {
            (
                x.component_mul(&sc.d),
                z.component_div(&sc.e),
                y.component_mul(&sc.e) / sc.cost,
            )
        };

        let mut probed = false;
        let mut tried = Vec::new();
        let mut iterations = set.max_iter;
        let mut converged = false;
        for k in 1..=set.max_iter {
            let y_prev = y.clone();
            let mut rhs = &x * set.sigma - &s.q;
            if m > 0 {
                rhs += s.c.transpose() * (rho.component_mul(&z) - &y);
            }
            let x_tilde = chol.solve(&rhs);
            let z_tilde = &s.c * &x_tilde;
            x = &x_tilde * set.alpha + &x * (1.0 - set.alpha);
            let z_relax = &z_tilde * set.alpha + &z * (1.0 - set.alpha);
            let mut z_next = &z_relax + y.component_div(&rho);
            for i in 0..m {
                z_next[i] = z_next[i].clamp(s.lower[i], s.upper[i]);
            }
            y += rho.component_mul(&(&z_relax - &z_next));
            z = z_next;

            if k % CHECK_EVERY == 0 || k == set.max_iter {
                let (xu, zu, yu) = unscale(&x, &z, &y);
                if self.converged(&xu, &zu, &yu, set) {
                    iterations = k;
                    converged = true;
                    break;
                }
                let suspicious = k >= PROBE_AFTER || self.looks_infeasible(&(&y - &y_prev).component_mul(&sc.e));
                if probing && !probed && suspicious {
                    probed = true;
                    if self.probe_infeasible() {
                        return DenseSolution {
                            x: xu.iter().copied().collect(),
                            y: vec![0.0; m],
                            status: QpStatus::PrimalInfeasible,
                            iterations: k,
                        };
                    }
                    // Feasible but stalled: degenerate or badly conditioned
                    // blocks are finished by an interior-point solve.
                    if k >= PROBE_AFTER {
                        if let Some((xi, yi)) = s.interior_point() {
                            let (xu, zu, yu) = unscale(&xi, &(&s.c * &xi), &yi);
                            if self.feasible(&xu, set.eps_abs) && self.converged(&xu, &zu, &yu, set) {
                                return DenseSolution {
                                    x: xu.iter().copied().collect(),
                                    y: yu.iter().copied().collect(),
                                    status: QpStatus::Optimal,
                                    iterations: k,
                                };
                            }
                        }
                    }
                }
                if set.polish && k >= POLISH_AFTER {
                    if let Some((xp, yp)) = self.try_polish(&xu, &zu, &yu, set, &mut tried) {
                        return DenseSolution {
                            x: xp.iter().copied().collect(),
                            y: yp.iter().copied().collect(),
                            status: QpStatus::Optimal,
                            iterations: k,
                        };
                    }
                }
            }
        }

        let (xu, zu, yu) = unscale(&x, &z, &y);
        let mut best = (xu, yu);
        if set.polish {
            tried.clear();
            if let Some(polished) = self.try_polish(&best.0, &zu, &best.1, set, &mut tried) {
                best = polished;
                converged = true;
            }
        }
        let status = if converged {
            QpStatus::Optimal
        } else if probing && self.probe_infeasible() {
            QpStatus::PrimalInfeasible
        } else {
            QpStatus::MaxIterations
        };
        DenseSolution { x: best.0.iter().copied().collect(), y: best.1.iter().copied().collect(), status, iterations }
    }

    fn feasible(&self, x: &DVector<f64>, tol: f64) -> bool {
        let cx = &self.c * x;
        (0..self.m()).all(|i| cx[i] >= self.lower[i] - tol && cx[i] <= self.upper[i] + tol)
    }

    /// Heuristic trigger for the Phase-I probe from a dual iterate difference.
    fn looks_infeasible(&self, dy: &DVector<f64>) -> bool {
        let norm = dy.amax();
        if norm < 1e-10 {
            return false;
        }
        let cty = (self.c.transpose() * dy).amax();
        let mut support = 0.0;
        for i in 0..self.m() {
            if dy[i] > 0.0 && self.upper[i].is_finite() {
                support += self.upper[i] * dy[i];
            } else if dy[i] < 0.0 && self.lower[i].is_finite() {
                support += self.lower[i] * dy[i];
            }
        }
        cty <= 1e-4 * norm && support < -1e-6 * norm
    }

    /// Candidate active sets `(row, at_upper)`: from the dual iterate, from
    /// primal slacks, and the dual guess with one inequality dropped.
    fn active_guesses(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> Vec<Vec<(usize, bool)>> {
        let m = self.m();
        let dual: Vec<(usize, bool)> = (0..m)
            .filter_map(|i| {
                if self.lower[i] == self.upper[i] || self.upper[i] - z[i] < y[i] {
                    Some((i, true))
                } else if self.lower[i].is_finite() && z[i] - self.lower[i] < -y[i] {
                    Some((i, false))
                } else {
                    None
                }
            })
            .collect();
        let cx = &self.c * x;
        let prim = (&cx - z).amax();
        let delta = 10.0 * prim + 1e-7;
        let primal: Vec<(usize, bool)> = (0..m)
            .filter_map(|i| {
                if self.lower[i] == self.upper[i] || self.upper[i] - cx[i] <= delta * (1.0 + self.upper[i].abs()) {
                    Some((i, true))
                } else if self.lower[i].is_finite() && cx[i] - self.lower[i] <= delta * (1.0 + self.lower[i].abs()) {
                    Some((i, false))
                } else {
                    None
                }
            })
            .collect();
        let mut guesses = vec![dual.clone()];
        if primal != dual {
            guesses.push(primal);
        }
        // A nearly-active row mistaken for an active one leaves ADMM stalled
        // on an overdetermined set; try each single-row removal. More than
        // n + 1 rows stay overdetermined after one removal.
        if dual.len() > self.n() + 1 {
            return guesses;
        }
        for (k, &(i, _)) in dual.iter().enumerate() {
            if self.lower[i] != self.upper[i] {
                let mut g = dual.clone();
                g.remove(k);
                guesses.push(g);
            }
        }
        guesses
    }

    /// Solves the equality-constrained KKT system on an active set and keeps
    /// the result only if it is primal feasible with correctly signed multipliers.
    fn polish(&self, active: &[(usize, bool)], set: &QpSettings) -> Option<(DVector<f64>, DVector<f64>)> {
        let (n, m) = (self.n(), self.m());
        let k = active.len();
        let delta = 1e-9;
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.p);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&self.q));
        for (a, &(i, at_upper)) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + a, j)] = self.c[(i, j)];
                kkt[(j, n + a)] = self.c[(i, j)];
            }
            rhs[n + a] = if at_upper { self.upper[i] } else { self.lower[i] };
        }
        let mut reg = kkt.clone();
        for i in 0..n {
            reg[(i, i)] += delta;
        }
        for i in n..n + k {
            reg[(i, i)] -= delta;
        }
        let lu = reg.lu();
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..5 {
            let r = &rhs - &kkt * &sol;
            sol += lu.solve(&r)?;
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let xp = sol.rows(0, n).into_owned();
        let mut yp = DVector::zeros(m);
        for (a, &(i, at_upper)) in active.iter().enumerate() {
            let yi = sol[n + a];
            if self.lower[i] != self.upper[i] && ((at_upper && yi < -1e-9) || (!at_upper && yi > 1e-9)) {
                return None;
            }
            yp[i] = yi;
        }
        let cx = &self.c * &xp;
        if self.feasible(&xp, set.eps_abs) && self.converged(&xp, &cx, &yp, set) {
            Some((xp, yp))
        } else {
            None
        }
    }

    fn try_polish(
        &self,
        x: &DVector<f64>,
        z: &DVector<f64>,
        y: &DVector<f64>,
        set: &QpSettings,
        tried: &mut Vec<Vec<(usize, bool)>>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        for guess in self.active_guesses(x, z, y) {
            if tried.contains(&guess) {
                continue;
            }
            let out = self.polish(&guess, set);
            tried.push(guess);
            if out.is_some() {
                return out;
            }
        }
        None
    }

    /// Phase I: minimize `1/2 |Ax - b|^2 + 1/2 |s|^2` s.t. `Gx - s <= h` and
    /// report whether the least violation exceeds [`INFEASIBILITY_TOL`].
    fn probe_infeasible(&self) -> bool {
        let (n, m) = (self.n(), self.m());
        let eq: Vec<usize> = (0..m).filter(|&i| self.lower[i] == self.upper[i]).collect();
        let up: Vec<usize> = (0..m).filter(|&i| self.lower[i] != self.upper[i] && self.upper[i].is_finite()).collect();
        let lo: Vec<usize> = (0..m).filter(|&i| self.lower[i] != self.upper[i] && self.lower[i].is_finite()).collect();
        let ns = up.len() + lo.len();
        let nv = n + ns;

        let mut p = DMatrix::zeros(nv, nv);
        let mut q = DVector::zeros(nv);
        for &i in &eq {
            let row = self.c.row(i);
            for a in 0..n {
                q[a] -= row[a] * self.upper[i];
                for b in 0..n {
                    p[(a, b)] += row[a] * row[b];
                }
            }
        }
        for s in 0..ns {
            p[(n + s, n + s)] = 1.0;
        }
        let mut c = DMatrix::zeros(ns, nv);
        let mut upper = DVector::zeros(ns);
        for (s, &i) in up.iter().enumerate() {
            for a in 0..n {
                c[(s, a)] = self.c[(i, a)];
            }
            c[(s, n + s)] = -1.0;
            upper[s] = self.upper[i];
        }
        for (k, &i) in lo.iter().enumerate() {
            let s = up.len() + k;
            for a in 0..n {
                c[(s, a)] = -self.c[(i, a)];
            }
            c[(s, n + s)] = -1.0;
            upper[s] = -self.lower[i];
        }
        let phase1 = DenseQp { p, q, c, lower: DVector::from_element(ns, f64::NEG_INFINITY), upper };
        let settings = QpSettings { eps_abs: 1e-9, eps_rel: 1e-9, max_iter: 20000, ..QpSettings::default() };
        let sol = phase1.solve_unprobed(&settings);
        let x = DVector::from_iterator(n, sol.iter().take(n).copied());
        let cx = &self.c * &x;
        let violation = (0..m)
            .map(|i| (cx[i] - self.upper[i]).max(self.lower[i] - cx[i]).max(0.0))
            .fold(0.0, f64::max);
        violation > INFEASIBILITY_TOL
    }

    /// Mehrotra predictor-corrector interior point on `l <= Cx <= u`.
    /// Returns `x` and row multipliers in the ADMM sign convention.
    fn interior_point(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        const MAX_ITER: usize = 100;
        const TOL: f64 = 1e-10;
        const REG: f64 = 1e-10;
        let (n, m) = (self.n(), self.m());
        let eq: Vec<usize> = (0..m).filter(|&i| self.lower[i] == self.upper[i]).collect();
        // Inequalities g x <= h as (row, sign) with g = sign * c_row.
        let mut ineq: Vec<(usize, f64)> = Vec::new();
        for i in 0..m {
            if self.lower[i] != self.upper[i] {
                if self.upper[i].is_finite() {
                    ineq.push((i, 1.0));
                }
                if self.lower[i].is_finite() {
                    ineq.push((i, -1.0));
                }
            }
        }
        let (me, mi) = (eq.len(), ineq.len());
        let a = DMatrix::from_fn(me, n, |r, j| self.c[(eq[r], j)]);
        let b = DVector::from_fn(me, |r, _| self.upper[eq[r]]);
        let g = DMatrix::from_fn(mi, n, |r, j| ineq[r].1 * self.c[(ineq[r].0, j)]);
        let h = DVector::from_fn(mi, |r, _| {
            let (i, sign) = ineq[r];
            if sign > 0.0 {
                self.upper[i]
            } else {
                -self.lower[i]
            }
        });
        let mut x = DVector::zeros(n);
        let mut y = DVector::zeros(me);
        let mut s = (&h - &g * &x).map(|v| v.max(1.0));
        let mut z = DVector::from_element(mi, 1.0);
        let scale = 1.0 + self.q.amax().max(h.amax()).max(b.amax());
        let newton = |s: &DVector<f64>, z: &DVector<f64>, rd: &DVector<f64>, rp: &DVector<f64>, rg: &DVector<f64>, rc: &DVector<f64>| {
            // Reduced system [[P + G^T W G, A^T], [A, -reg]] with W = Z / S.
            let w = z.component_div(s);
            let mut hmat = &self.p + DMatrix::identity(n, n) * REG;
            let mut wg = g.clone();
            for r in 0..mi {
                wg.row_mut(r).scale_mut(w[r]);
            }
            hmat += g.transpose() * &wg;
            let mut kkt = DMatrix::zeros(n + me, n + me);
            kkt.view_mut((0, 0), (n, n)).copy_from(&hmat);
            kkt.view_mut((n, 0), (me, n)).copy_from(&a);
            kkt.view_mut((0, n), (n, me)).copy_from(&a.transpose());
            for r in 0..me {
                kkt[(n + r, n + r)] = -REG;
            }
            let t = (rc + z.component_mul(rg)).component_div(s);
            let mut rhs = DVector::zeros(n + me);
            rhs.rows_mut(0, n).copy_from(&(-rd - g.transpose() * &t));
            rhs.rows_mut(n, me).copy_from(&(-rp));
            let lu = kkt.lu();
            let sol = lu.solve(&rhs)?;
            let dx = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, me).into_owned();
            let ds = -rg - &g * &dx;
            let dz = (rc - z.component_mul(&ds)).component_div(s);
            Some((dx, dy, ds, dz))
        };
        let max_step = |v: &DVector<f64>, dv: &DVector<f64>| {
            (0..v.len()).filter(|&i| dv[i] < 0.0).map(|i| -v[i] / dv[i]).fold(1.0f64, f64::min)
        };
        for _ in 0..MAX_ITER {
            let rd = &self.p * &x + &self.q + a.transpose() * &y + g.transpose() * &z;
            let rp = &a * &x - &b;
            let rg = &g * &x + &s - &h;
            let mu = if mi > 0 { s.dot(&z) / mi as f64 } else { 0.0 };
            if rd.amax() <= TOL * scale && rp.amax().max(rg.amax()) <= TOL * scale && mu <= TOL * scale {
                break;
            }
            let rc_aff = -s.component_mul(&z);
            let (_, _, ds, dz) = newton(&s, &z, &rd, &rp, &rg, &rc_aff)?;
            let step = max_step(&s, &ds).min(max_step(&z, &dz));
            let mu_aff = if mi > 0 { (&s + &ds * step).dot(&(&z + &dz * step)) / mi as f64 } else { 0.0 };
            let sigma = if mu > 0.0 { (mu_aff / mu).powi(3) } else { 0.0 };
            let rc = -s.component_mul(&z) - ds.component_mul(&dz) + DVector::from_element(mi, sigma * mu);
            let (dx, dy, ds, dz) = newton(&s, &z, &rd, &rp, &rg, &rc)?;
            let step = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
            x += &dx * step;
            y += &dy * step;
            s += &ds * step;
            z += &dz * step;
            if x.iter().chain(y.iter()).chain(z.iter()).any(|v| !v.is_finite()) {
                return None;
            }
        }
        let mut rows = DVector::zeros(m);
        for (r, &i) in eq.iter().enumerate() {
            rows[i] = y[r];
        }
        for (r, &(i, sign)) in ineq.iter().enumerate() {
            rows[i] += sign * z[r];
        }
        Some((x, rows))
    }

    /// ADMM plus polishing without infeasibility handling (Phase-I problems are always feasible).
    fn solve_unprobed(&self, set: &QpSettings) -> Vec<f64> {
        self.admm(set, None, false).x
    }
}
