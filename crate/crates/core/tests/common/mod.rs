//! Oracles shared by the integration tests. Each is written independently of
//! the library code it checks.
#![allow(dead_code)]

use rand::Rng;
use swamp::ndmath::{Matrix, Tape, Var};
use swamp::Result;

/// Builds a scalar from leaf inputs on a fresh tape.
pub type Objective<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn evaluate(f: &Objective<'_>, inputs: &[Matrix]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars).expect("objective evaluates");
    tape.value(out).item()
}

/// Largest relative error between the tape gradient and central differences
/// over all inputs. Per input the error is `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, 1e-8)`.
pub fn gradient_error(f: &Objective<'_>, inputs: &[Matrix], step: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars).expect("objective evaluates");
    let grads = tape.gradients(out).expect("backward");

    let mut worst: f64 = 0.0;
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(inputs[slot].rows(), inputs[slot].cols()));
        let mut numeric = Vec::with_capacity(inputs[slot].len());
        for e in 0..inputs[slot].len() {
            let mut plus = inputs.to_vec();
            plus[slot].as_mut_slice()[e] += step;
            let mut minus = inputs.to_vec();
            minus[slot].as_mut_slice()[e] -= step;
            numeric.push((evaluate(f, &plus) - evaluate(f, &minus)) / (2.0 * step));
        }
        let diff: f64 = analytic
            .as_slice()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic
            .as_slice()
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt();
        let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-8));
    }
    worst
}

/// Contracts a matrix-valued output to a scalar with fixed random weights.
pub fn weighted_sum(tape: &mut Tape, out: Var, weights: &Matrix) -> Result<Var> {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Sweep budget of [`bregman_oracle`]; nearly decoupled instances at large
/// `η` need hundreds of thousands.
pub const ORACLE_MAX_ITERS: usize = 1_000_000;

/// Plain alternating row/column normalization of `exp(-η·C)`, run until
/// the row marginals are within `tol` (columns are exact after each sweep).
pub fn bregman_oracle(cost: &[Vec<f64>], eta: f64, tol: f64) -> Vec<Vec<f64>> {
    let n = cost.len();
    let k = cost[0].len();
    let mut q: Vec<Vec<f64>> = cost
        .iter()
        .map(|r| r.iter().map(|c| (-eta * c).exp()).collect())
        .collect();
    let total: f64 = q.iter().flatten().sum();
    q.iter_mut().flatten().for_each(|v| *v /= total);
    for _ in 0..ORACLE_MAX_ITERS {
        for row in q.iter_mut() {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v *= (1.0 / n as f64) / s);
        }
        for j in 0..k {
            let s: f64 = q.iter().map(|r| r[j]).sum();
            q.iter_mut().for_each(|r| r[j] *= (1.0 / k as f64) / s);
        }
        let row_err = q
            .iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0 / n as f64).abs())
            .fold(0.0, f64::max);
        if row_err < tol {
            return q;
        }
    }
    panic!("oracle did not converge");
}

/// 1-based rank of the first correct gallery item for every query, from a
/// full sort by descending similarity with ascending index on ties.
pub fn brute_force_ranks(
    queries: &Matrix,
    gallery: &Matrix,
    correct: impl Fn(usize, usize) -> bool,
) -> Vec<usize> {
    (0..queries.rows())
        .map(|i| {
            let mut scored: Vec<(f64, usize)> = (0..gallery.rows())
                .map(|j| {
                    let s: f64 = queries
                        .row(i)
                        .iter()
                        .zip(gallery.row(j))
                        .map(|(a, b)| a * b)
                        .sum();
                    (s, j)
                })
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            scored
                .iter()
                .position(|&(_, j)| correct(i, j))
                .expect("a correct item exists")
                + 1
        })
        .collect()
}

/// Percent of ranks ≤ k, and the lower median.
pub fn recall_and_median(ranks: &[usize], k: usize) -> (f64, f64) {
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    (
        100.0 * hits as f64 / ranks.len() as f64,
        sorted[(sorted.len() - 1) / 2] as f64,
    )
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn unit_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}
