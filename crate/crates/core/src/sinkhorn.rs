//! Entropy-regularized optimal transport between instances and classes.
//!
//! Given an `N×K` cost matrix `C`, the solver finds the plan
//! `Q = Diag(u)·A·Diag(v)` with `A_iy = exp(-η·C_iy)`, rows summing to `1/N`
//! and columns summing to `1/K`. The state is kept as log potentials `ln u`,
//! `ln v`: at `η = 20` and costs around 69 the kernel `A` itself is far below
//! the smallest `f64`, so scaling sweeps only ever touch a kernel stabilized
//! by the current potentials.

use crate::error::{Error, Result};
use crate::ndmath::fastexp::{exp_nonpos, sum_exp_shifted};
use crate::ndmath::Matrix;

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Non-negative, finite `N×K` transport cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Input(format!(
                "cost matrix must be non-empty, got {:?}",
                values.shape()
            )));
        }
        if let Some(pos) = values.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite cost at ({}, {})",
                pos / values.cols(),
                pos % values.cols()
            )));
        }
        if let Some(pos) = values.as_slice().iter().position(|&v| v < 0.0) {
            return Err(Error::Input(format!(
                "negative cost at ({}, {})",
                pos / values.cols(),
                pos % values.cols()
            )));
        }
        Ok(CostMatrix(values))
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// Nonnegative `N×K` plan with target row mass `1/N` and column mass `1/K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    q: Matrix,
}

impl TransportPlan {
    /// Wraps an arbitrary nonnegative matrix as a plan. Marginals are not
    /// enforced; use [`marginal_residual`] to measure them.
    pub fn from_matrix(q: Matrix) -> Result<Self> {
        if q.as_slice().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Input("plan entries must be finite and >= 0".into()));
        }
        Ok(TransportPlan { q })
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn into_matrix(self) -> Matrix {
        self.q
    }

    pub fn n_rows(&self) -> usize {
        self.q.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.q.cols()
    }

    pub fn row_target(&self) -> f64 {
        1.0 / self.q.rows() as f64
    }

    pub fn col_target(&self) -> f64 {
        1.0 / self.q.cols() as f64
    }

    /// Rows `idx` rescaled to sum to one: per-instance class distributions.
    pub fn conditional_rows(&self, idx: &[usize]) -> Result<Matrix> {
        let mut out = self.q.select_rows(idx);
        for (r, &src) in idx.iter().enumerate() {
            let row = out.row_mut(r);
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(Error::DegenerateTarget { row: src });
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornState {
    pub log_u: Vec<f64>,
    pub log_v: Vec<f64>,
    pub iterations_used: usize,
    /// Max absolute marginal deviation of the returned plan, rows and columns.
    pub final_residual: f64,
}

impl SinkhornState {
    pub fn converged(&self, tol: f64) -> bool {
        self.final_residual < tol
    }
}

/// Solves the entropic OT problem for `cost` at inverse regularization `eta`.
///
/// The state is the pair of log potentials. Sweeps alternate row and column
/// rescaling; between absorptions they run on a kernel stabilized by the
/// current potentials, `exp(-η·C_iy + ln u_i + ln v_y)`, whose entries are on
/// the scale of the plan itself. Entries below `1e-80` are dropped and the
/// kernel is stored sparse when few survive; the plan entries they stand for
/// are below `1e-40`. Whenever a scaling factor leaves `[1e-20, 1e20]`, or a
/// marginal sum underflows, the factors are folded back into the potentials
/// (with an exact log-sum-exp sweep in the latter case) and the kernel is
/// rebuilt.
///
/// Stops once the row marginals are within `tol` (columns are exact after
/// every column update), or after `max_iters` row+column sweeps.
pub fn sinkhorn_solve(
    cost: &CostMatrix,
    eta: f64,
    max_iters: usize,
    tol: f64,
) -> Result<(TransportPlan, SinkhornState)> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Config(format!("eta must be positive, got {eta}")));
    }
    if !(tol >= 0.0) {
        return Err(Error::Config(format!("tol must be >= 0, got {tol}")));
    }
    let (q, log_u, log_v, iterations) = Solver::new(cost, eta).solve(max_iters, tol);
    let plan = TransportPlan { q };
    let (re, ce) = marginal_residual(&plan);
    let state = SinkhornState {
        log_u,
        log_v,
        iterations_used: iterations,
        final_residual: re.max(ce),
    };
    Ok((plan, state))
}

/// Scaling factors outside `[1/SCALE_BOUND, SCALE_BOUND]` are absorbed into
/// the potentials.
const SCALE_BOUND: f64 = 1e20;
/// Stabilized kernel entries below this are dropped. Between absorptions a
/// dropped entry's plan value stays below `DROP_BELOW · SCALE_BOUND² = 1e-40`.
const DROP_BELOW: f64 = 1e-80;
/// Kernels denser than this stay in dense storage.
const MAX_SPARSE_DENSITY: f64 = 0.3;

/// Stabilized kernel `exp(-η·C_iy + ln u_i + ln v_y)` as of the last
/// absorption.
enum Kernel {
    Dense(Vec<f64>),
    /// Compressed rows holding only the entries that can carry mass.
    Sparse {
        row_start: Vec<usize>,
        cols: Vec<u32>,
        vals: Vec<f64>,
    },
}

struct Solver {
    n: usize,
    k: usize,
    /// `-η·C`, row-major.
    log_kernel: Vec<f64>,
    log_u: Vec<f64>,
    log_v: Vec<f64>,
    kernel: Kernel,
    a: Vec<f64>,
    b: Vec<f64>,
    scratch: Vec<f64>,
}

impl Solver {
    fn new(cost: &CostMatrix, eta: f64) -> Self {
        let (n, k) = cost.shape();
        Solver {
            n,
            k,
            log_kernel: cost.values().as_slice().iter().map(|&c| -eta * c).collect(),
            log_u: vec![0.0; n],
            log_v: vec![0.0; k],
            kernel: Kernel::Dense(Vec::new()),
            a: vec![1.0; n],
            b: vec![1.0; k],
            scratch: vec![0.0; n.max(k)],
        }
    }

    fn run(&mut self, max_iters: usize, tol: f64) -> usize {
        let (n, k) = (self.n, self.k);
        let row_target = 1.0 / n as f64;
        let col_target = 1.0 / k as f64;
        let mut stale = true;
        for it in 0..max_iters {
            if stale {
                // Exact sweep from the potentials alone.
                let row_err = self.log_row_sweep();
                self.log_col_sweep();
                self.rebuild_kernel();
                stale = false;
                if it > 0 && row_err < tol {
                    return it + 1;
                }
                continue;
            }

            // Row update fused with the column accumulation: row i's new
            // factor is final before its column contributions are added, so
            // one pass over the kernel serves both half-steps.
            let col = &mut self.scratch[..k];
            col.fill(0.0);
            let row_err = match &self.kernel {
                Kernel::Dense(kernel) => {
                    fused_dense(kernel, k, &mut self.a, &self.b, col, row_target)
                }
                Kernel::Sparse {
                    row_start,
                    cols,
                    vals,
                } => fused_sparse(row_start, cols, vals, &mut self.a, &self.b, col, row_target),
            };
            let mut ok = row_err.is_some();
            let row_err = row_err.unwrap_or(f64::INFINITY);
            if !ok {
                self.absorb();
                stale = true;
                continue;
            }
            let converged = row_err < tol;

            for (bj, &t) in self.b.iter_mut().zip(col.iter()) {
                if !(t > 0.0) || !t.is_finite() {
                    ok = false;
                    break;
                }
                *bj = col_target / t;
            }
            if !ok {
                self.absorb();
                stale = true;
                continue;
            }
            if converged {
                return it + 1;
            }
            let out_of_range = |x: &f64| !(1.0 / SCALE_BOUND..=SCALE_BOUND).contains(x);
            if self.a.iter().any(out_of_range) || self.b.iter().any(out_of_range) {
                self.absorb();
                self.rebuild_kernel();
            }
        }
        max_iters
    }

    /// Folds the scaling factors into the log potentials.
    fn absorb(&mut self) {
        for (lu, a) in self.log_u.iter_mut().zip(self.a.iter_mut()) {
            if *a > 0.0 && a.is_finite() {
                *lu += a.ln();
            }
            *a = 1.0;
        }
        for (lv, b) in self.log_v.iter_mut().zip(self.b.iter_mut()) {
            if *b > 0.0 && b.is_finite() {
                *lv += b.ln();
            }
            *b = 1.0;
        }
    }

    fn rebuild_kernel(&mut self) {
        let (n, k) = (self.n, self.k);
        let log_drop = DROP_BELOW.ln();
        let max_nnz = (MAX_SPARSE_DENSITY * (n * k) as f64) as usize;
        let (mut row_start, mut cols, mut vals) =
            match std::mem::replace(&mut self.kernel, Kernel::Dense(Vec::new())) {
                Kernel::Sparse {
                    row_start,
                    cols,
                    vals,
                } => (row_start, cols, vals),
                Kernel::Dense(v) => (Vec::new(), Vec::new(), v),
            };
        row_start.clear();
        cols.clear();
        vals.clear();
        row_start.push(0);
        'rows: for i in 0..n {
            let lu = self.log_u[i];
            let gi = &self.log_kernel[i * k..(i + 1) * k];
            for (j, (&g, &lv)) in gi.iter().zip(&self.log_v).enumerate() {
                let x = g + lu + lv;
                if x >= log_drop {
                    cols.push(j as u32);
                    vals.push(exp_nonpos(x));
                }
            }
            row_start.push(vals.len());
            if vals.len() > max_nnz {
                break 'rows;
            }
        }
        if vals.len() <= max_nnz {
            self.kernel = Kernel::Sparse {
                row_start,
                cols,
                vals,
            };
            return;
        }
        vals.clear();
        vals.resize(n * k, 0.0);
        for i in 0..n {
            let lu = self.log_u[i];
            let src = &self.log_kernel[i * k..(i + 1) * k];
            for ((d, &g), &lv) in vals[i * k..(i + 1) * k]
                .iter_mut()
                .zip(src)
                .zip(&self.log_v)
            {
                *d = exp_nonpos(g + lu + lv);
            }
        }
        self.kernel = Kernel::Dense(vals);
    }

    /// `ln u ← ln(1/N) − LSE_y(−ηC + ln v)`; returns the pre-update row error.
    fn log_row_sweep(&mut self) -> f64 {
        let (n, k) = (self.n, self.k);
        let log_row = -(n as f64).ln();
        let row_target = 1.0 / n as f64;
        let mut err: f64 = 0.0;
        let scratch = &mut self.scratch[..k];
        for i in 0..n {
            let gi = &self.log_kernel[i * k..(i + 1) * k];
            for ((s, &g), &lv) in scratch.iter_mut().zip(gi).zip(&self.log_v) {
                *s = g + lv;
            }
            let lse = lse_in_place(scratch);
            err = err.max(((self.log_u[i] + lse).exp() - row_target).abs());
            self.log_u[i] = log_row - lse;
        }
        err
    }

    /// `ln v ← ln(1/K) − LSE_i(−ηC + ln u)`.
    fn log_col_sweep(&mut self) {
        let (n, k) = (self.n, self.k);
        let log_col = -(k as f64).ln();
        let mut col_max = vec![f64::NEG_INFINITY; k];
        for i in 0..n {
            let lu = self.log_u[i];
            for (m, &g) in col_max.iter_mut().zip(&self.log_kernel[i * k..(i + 1) * k]) {
                let x = g + lu;
                if x > *m {
                    *m = x;
                }
            }
        }
        let mut col_sum = vec![0.0; k];
        for i in 0..n {
            let lu = self.log_u[i];
            let gi = &self.log_kernel[i * k..(i + 1) * k];
            for ((s, &g), &m) in col_sum.iter_mut().zip(gi).zip(&col_max) {
                *s += exp_nonpos(g + lu - m);
            }
        }
        for ((lv, &m), &s) in self.log_v.iter_mut().zip(&col_max).zip(&col_sum) {
            *lv = log_col - (m + s.ln());
        }
    }

    /// Runs to convergence and returns the plan, the log potentials and
    /// the number of sweeps.
    fn solve(mut self, max_iters: usize, tol: f64) -> (Matrix, Vec<f64>, Vec<f64>, usize) {
        let iterations = self.run(max_iters, tol);
        self.absorb();
        let (n, k) = (self.n, self.k);
        let mut q = Matrix::zeros(n, k);
        for i in 0..n {
            let lu = self.log_u[i];
            let gi = &self.log_kernel[i * k..(i + 1) * k];
            for ((out, &g), &lv) in q.row_mut(i).iter_mut().zip(gi).zip(&self.log_v) {
                *out = exp_nonpos(g + lu + lv);
            }
        }
        (q, self.log_u, self.log_v, iterations)
    }
}

/// Row update fused with the column accumulation: row `i`'s new factor is
/// final before its column contributions are added, so one pass over the
/// kernel serves both half-steps. Returns the row error before the update,
/// or `None` if a row sum vanished.
fn fused_dense(
    kernel: &[f64],
    k: usize,
    a: &mut [f64],
    b: &[f64],
    col: &mut [f64],
    row_target: f64,
) -> Option<f64> {
    let mut row_err: f64 = 0.0;
    for (ki, ai) in kernel.chunks_exact(k).zip(a.iter_mut()) {
        let s = dot8(ki, b);
        if !(s > 0.0) || !s.is_finite() {
            return None;
        }
        row_err = row_err.max((*ai * s - row_target).abs());
        *ai = row_target / s;
        for (c, &kv) in col.iter_mut().zip(ki) {
            *c += kv * *ai;
        }
    }
    Some(row_err)
}

fn fused_sparse(
    row_start: &[usize],
    cols: &[u32],
    vals: &[f64],
    a: &mut [f64],
    b: &[f64],
    col: &mut [f64],
    row_target: f64,
) -> Option<f64> {
    let mut row_err: f64 = 0.0;
    for (bounds, ai) in row_start.windows(2).zip(a.iter_mut()) {
        let (idx, v) = (&cols[bounds[0]..bounds[1]], &vals[bounds[0]..bounds[1]]);
        let mut s = 0.0;
        for (&j, &kv) in idx.iter().zip(v) {
            s += kv * b[j as usize];
        }
        if !(s > 0.0) || !s.is_finite() {
            return None;
        }
        row_err = row_err.max((*ai * s - row_target).abs());
        *ai = row_target / s;
        for (&j, &kv) in idx.iter().zip(v) {
            col[j as usize] += kv * *ai;
        }
    }
    Some(row_err)
}

/// Dot product with eight independent accumulators (vectorizable, and the
/// summation order is fixed so results are reproducible).
fn dot8(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        let a: &[f64; 8] = a.try_into().unwrap();
        let b: &[f64; 8] = b.try_into().unwrap();
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = 0.0;
    for (a, b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Log-sum-exp that reuses `xs` as scratch.
fn lse_in_place(xs: &mut [f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs.iter() {
        if x > m {
            m = x;
        }
    }
    m + sum_exp_shifted(xs, m).ln()
}

/// `(max |row_sum − 1/N|, max |col_sum − 1/K|)`.
pub fn marginal_residual(plan: &TransportPlan) -> (f64, f64) {
    let rt = plan.row_target();
    let ct = plan.col_target();
    let row_err = plan
        .q
        .row_sums()
        .into_iter()
        .map(|s| (s - rt).abs())
        .fold(0.0, f64::max);
    let col_err = plan
        .q
        .col_sums()
        .into_iter()
        .map(|s| (s - ct).abs())
        .fold(0.0, f64::max);
    (row_err, col_err)
}

/// One-hot version of a plan: each row's mass `1/N` moves to its argmax
/// column (lowest index on ties). Column marginals are not preserved.
pub fn harden(plan: &TransportPlan) -> TransportPlan {
    let (n, k) = (plan.n_rows(), plan.n_cols());
    let mass = plan.row_target();
    let mut q = Matrix::zeros(n, k);
    for (i, row) in plan.q.row_iter().enumerate() {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        q[(i, best)] = mass;
    }
    TransportPlan { q }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain alternating Bregman projections in the probability domain. Only
    /// usable where `exp(-η·C)` is representable.
    fn bregman_oracle(cost: &Matrix, eta: f64, tol: f64) -> Matrix {
        let (n, k) = cost.shape();
        let mut q = cost.map(|c| (-eta * c).exp());
        let total = q.sum();
        q.as_mut_slice().iter_mut().for_each(|v| *v /= total);
        for _ in 0..1_000_000 {
            for i in 0..n {
                let s: f64 = q.row(i).iter().sum();
                let f = (1.0 / n as f64) / s;
                q.row_mut(i).iter_mut().for_each(|v| *v *= f);
            }
            let cs = q.col_sums();
            for i in 0..n {
                for j in 0..k {
                    q[(i, j)] *= (1.0 / k as f64) / cs[j];
                }
            }
            let re = q
                .row_sums()
                .iter()
                .map(|s| (s - 1.0 / n as f64).abs())
                .fold(0.0, f64::max);
            if re < tol {
                break;
            }
        }
        q
    }

    fn cost(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::new(Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn single_cell_plan_is_one() {
        let (plan, _) = sinkhorn_solve(&cost(&[&[3.7]]), 5.0, 100, 1e-12).unwrap();
        assert!((plan.q()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_cost_gives_uniform_plan() {
        let (plan, _) =
            sinkhorn_solve(&cost(&[&[2.0, 2.0], &[2.0, 2.0]]), 5.0, 100, 1e-12).unwrap();
        for &v in plan.q().as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_matches_bregman_oracle() {
        let c = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let oracle = bregman_oracle(&c, 5.0, 1e-12);
        let (plan, _) = sinkhorn_solve(&CostMatrix::new(c).unwrap(), 5.0, 1000, 1e-12).unwrap();
        assert!(plan.q().max_abs_diff(&oracle) < 1e-8);
        // Symmetric problem: diagonal mass e^5/(1+e^5)/2.
        let diag = 0.5 * 5f64.exp() / (1.0 + 5f64.exp());
        assert!((plan.q()[(0, 0)] - diag).abs() < 1e-10);
    }

    #[test]
    fn random_five_by_four_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = Matrix::uniform(5, 4, 0.0, 3.0, &mut rng);
        let (plan, state) =
            sinkhorn_solve(&CostMatrix::new(c).unwrap(), 20.0, 10_000, 1e-10).unwrap();
        for s in plan.q().row_sums() {
            assert!((s - 0.2).abs() < 1e-8);
        }
        for s in plan.q().col_sums() {
            assert!((s - 0.25).abs() < 1e-8);
        }
        assert!(state.final_residual < 1e-8);
    }

    #[test]
    fn small_random_instances_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = rng.gen_range(1..=6);
            let k = rng.gen_range(1..=6);
            let eta = [5.0, 20.0][rng.gen_range(0..2)];
            let c = Matrix::uniform(n, k, 0.0, 1.0, &mut rng);
            let oracle = bregman_oracle(&c, eta, 1e-13);
            let (plan, _) =
                sinkhorn_solve(&CostMatrix::new(c).unwrap(), eta, 100_000, 1e-13).unwrap();
            assert!(
                plan.q().max_abs_diff(&oracle) < 1e-8,
                "n={n} k={k} eta={eta}"
            );
        }
    }

    #[test]
    fn extreme_costs_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Matrix::uniform(40, 30, 0.0, 1e3, &mut rng);
        let (plan, state) = sinkhorn_solve(&CostMatrix::new(c).unwrap(), 100.0, 100, 1e-6).unwrap();
        assert!(plan.q().is_finite());
        assert!(state
            .log_u
            .iter()
            .chain(&state.log_v)
            .all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            CostMatrix::new(Matrix::from_rows(&[[f64::NAN]])),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            sinkhorn_solve(&cost(&[&[1.0]]), 0.0, 10, 1e-6),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sinkhorn_solve(&cost(&[&[1.0]]), -1.0, 10, 1e-6),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn residual_of_exact_and_perturbed_plans() {
        let mut q = Matrix::filled(4, 5, 1.0 / 20.0);
        let plan = TransportPlan::from_matrix(q.clone()).unwrap();
        assert_eq!(marginal_residual(&plan), (0.0, 0.0));
        q[(1, 2)] += 1e-3;
        let (re, ce) = marginal_residual(&TransportPlan::from_matrix(q).unwrap());
        assert!((re - 1e-3).abs() < 1e-15);
        assert!((ce - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn harden_rows() {
        let n = 2.0;
        let q = Matrix::from_rows(&[[0.6 / n, 0.4 / n], [0.5 / n, 0.5 / n]]);
        let h = harden(&TransportPlan::from_matrix(q).unwrap());
        assert_eq!(h.q(), &Matrix::from_rows(&[[0.5, 0.0], [0.5, 0.0]]));
        assert_eq!(harden(&h), h);
    }
}
