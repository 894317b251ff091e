//! Brute-force reference for small strictly convex QPs: enumerate every
//! subset of inequality rows as the active set, solve the KKT system by
//! Gaussian elimination and keep the primal-dual feasible candidate with the
//! lowest objective.

#![allow(dead_code)]

use rand::Rng;

pub struct DenseProblem {
    pub p: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub g: Vec<Vec<f64>>,
    pub h: Vec<f64>,
}

fn gauss_solve(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            if f != 0.0 {
                for k in col..n {
                    m[r][k] -= f * m[col][k];
                }
                rhs[r] -= f * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (rhs[r] - s) / m[r][r];
    }
    Some(x)
}

impl DenseProblem {
    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let n = self.n();
        let mut v = 0.0;
        for i in 0..n {
            for j in 0..n {
                v += 0.5 * x[i] * self.p[i][j] * x[j];
            }
            v += self.c[i] * x[i];
        }
        v
    }

    /// Minimizer by exhaustive active-set enumeration.
    pub fn oracle(&self) -> Option<Vec<f64>> {
        let n = self.n();
        let me = self.b.len();
        let mi = self.h.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0u32..(1 << mi) {
            let act: Vec<usize> = (0..mi).filter(|i| mask & (1 << i) != 0).collect();
            let k = n + me + act.len();
            let mut m = vec![vec![0.0; k]; k];
            let mut rhs = vec![0.0; k];
            for i in 0..n {
                m[i][..n].copy_from_slice(&self.p[i]);
                rhs[i] = -self.c[i];
            }
            let rows: Vec<(&Vec<f64>, f64)> = self
                .a
                .iter()
                .zip(&self.b)
                .map(|(r, v)| (r, *v))
                .chain(act.iter().map(|&i| (&self.g[i], self.h[i])))
                .collect();
            for (r, (row, v)) in rows.iter().enumerate() {
                for j in 0..n {
                    m[n + r][j] = row[j];
                    m[j][n + r] = row[j];
                }
                rhs[n + r] = *v;
            }
            let Some(sol) = gauss_solve(m, rhs) else { continue };
            let x = &sol[..n];
            let feasible = self.g.iter().zip(&self.h).all(|(row, hv)| {
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() <= hv + 1e-9
            });
            let dual_ok = sol[n + me..].iter().all(|&l| l >= -1e-9);
            if feasible && dual_ok {
                let f = self.objective(x);
                if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                    best = Some((f, x.to_vec()));
                }
            }
        }
        best.map(|(_, x)| x)
    }
}

/// Random strictly convex feasible problem with `n <= 8` variables.
pub fn random_problem<R: Rng>(rng: &mut R) -> DenseProblem {
    let n = rng.random_range(1..=8);
    let me = rng.random_range(0..=n.min(2));
    let mi = rng.random_range(0..=6);
    let l: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            p[i][j] = (0..n).map(|k| l[i][k] * l[j][k]).sum::<f64>();
        }
        p[i][i] += 0.1;
    }
    let c = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let row = |rng: &mut R| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let a: Vec<Vec<f64>> = (0..me).map(|_| row(rng)).collect();
    let b = a.iter().map(|r| r.iter().zip(&x0).map(|(u, v)| u * v).sum()).collect();
    let g: Vec<Vec<f64>> = (0..mi).map(|_| row(rng)).collect();
    let h = g
        .iter()
        .map(|r| r.iter().zip(&x0).map(|(u, v)| u * v).sum::<f64>() + rng.random_range(0.0..0.5))
        .collect();
    DenseProblem { p, c, a, b, g, h }
}
