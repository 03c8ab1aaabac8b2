//! Retrieval losses: the hard-negative margin loss over in-batch cosine
//! similarities, the prototype classifier shared by both modalities, and the
//! swapped cross-entropy against transport targets.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ndmath::{ops, HingeTerm, Matrix, ParamId, ParamSet, Tape, Var};
use crate::sinkhorn::CostMatrix;

/// Upper bound on transport costs, `−ln 1e-30`.
pub const MAX_COST: f64 = 69.077_552_789_821_37;

/// Class prototypes `K×d`, shared by the two modalities' classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrototypeBank {
    id: ParamId,
    n_classes: usize,
    dim: usize,
}

impl PrototypeBank {
    /// Gaussian rows projected onto the unit sphere.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        n_classes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let data = (0..n_classes * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let raw = Matrix::from_vec(n_classes, dim, data)?;
        let (unit, _) = ops::l2_normalize_rows(&raw)?;
        Ok(PrototypeBank {
            id: params.add(unit),
            n_classes,
            dim,
        })
    }

    pub fn from_param(params: &ParamSet, id: ParamId) -> Self {
        let (n_classes, dim) = params.get(id).value.shape();
        PrototypeBank { id, n_classes, dim }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values<'a>(&self, params: &'a ParamSet) -> &'a Matrix {
        &params.get(self.id).value
    }

    /// Re-normalizes every prototype to unit length.
    pub fn project_unit(&self, params: &mut ParamSet) -> Result<()> {
        let p = params.get_mut(self.id);
        let (unit, _) = ops::l2_normalize_rows(&p.value)?;
        p.value = unit;
        Ok(())
    }
}

/// `S = Fa · Fbᵀ` for row-normalized inputs, i.e. pairwise cosines.
pub fn similarity_matrix(tape: &mut Tape, fa: Var, fb: Var) -> Result<Var> {
    let (a, b) = (tape.value(fa).shape(), tape.value(fb).shape());
    if a.1 != b.1 {
        return Err(Error::dim(
            "similarity_matrix",
            format!("embeddings {a:?} vs {b:?}"),
        ));
    }
    tape.matmul_t(fa, fb)
}

/// Bidirectional hinge loss with the hardest in-batch negative per row and
/// per column, averaged over the batch:
///
/// `1/N Σ_i [α − S_ii + max_{j≠i} S_ij]₊ + [α − S_ii + max_{j≠i} S_ji]₊`
///
/// With a single pair there are no negatives and the loss is zero.
pub fn contrastive_loss(tape: &mut Tape, s: Var, margin: f64) -> Result<Var> {
    let sm = tape.value(s);
    let (n, m) = sm.shape();
    if n != m || n == 0 {
        return Err(Error::dim(
            "contrastive_loss",
            format!("similarity matrix must be square and non-empty, got {n}x{m}"),
        ));
    }
    let mut terms = Vec::with_capacity(2 * n);
    if n > 1 {
        for i in 0..n {
            let row_neg = hardest(n, i, |j| sm[(i, j)]);
            let col_neg = hardest(n, i, |j| sm[(j, i)]);
            terms.push(HingeTerm {
                pos: (i, i),
                neg: (i, row_neg),
            });
            terms.push(HingeTerm {
                pos: (i, i),
                neg: (col_neg, i),
            });
        }
    }
    Ok(tape.hinge_sum(s, margin, terms, n as f64))
}

/// Index `j ≠ skip` maximizing `score(j)`; lowest index wins ties.
fn hardest(n: usize, skip: usize, score: impl Fn(usize) -> f64) -> usize {
    let mut best = usize::MAX;
    let mut best_val = f64::NEG_INFINITY;
    for j in (0..n).filter(|&j| j != skip) {
        let v = score(j);
        if best == usize::MAX || v > best_val {
            best = j;
            best_val = v;
        }
    }
    best
}

/// Log class posteriors `log softmax(F·Pᵀ / τ)` for normalized features.
pub fn class_posteriors(tape: &mut Tape, f: Var, prototypes: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let logits = tape.matmul_t(f, prototypes)?;
    tape.log_softmax_rows(logits, tau)
}

/// Gradient-free [`class_posteriors`], used over the feature queue.
pub fn class_posteriors_detached(f: &Matrix, prototypes: &Matrix, tau: f64) -> Result<Matrix> {
    let logits = f.matmul_t(prototypes)?;
    ops::log_softmax_rows(&logits, tau)
}

/// Transport cost `C = −log p`, clipped to `[0, MAX_COST]`.
pub fn swap_cost(log_posteriors_other: &Matrix) -> Result<CostMatrix> {
    CostMatrix::new(log_posteriors_other.map(|lp| (-lp).clamp(0.0, MAX_COST)))
}

/// Swapped cross-entropy: mean over the batch of `CE(q^A, p^A)` plus mean of
/// `CE(q^B, p^B)`. Target rows are rescaled to sum to one and carry no
/// gradient.
pub fn swamp_loss(
    tape: &mut Tape,
    q_a: &Matrix,
    q_b: &Matrix,
    logp_a: Var,
    logp_b: Var,
) -> Result<Var> {
    let ta = normalize_targets(q_a)?;
    let tb = normalize_targets(q_b)?;
    let la = tape.cross_entropy_rows(logp_a, &ta)?;
    let lb = tape.cross_entropy_rows(logp_b, &tb)?;
    tape.add(la, lb)
}

fn normalize_targets(q: &Matrix) -> Result<Matrix> {
    let mut out = q.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            return Err(Error::DegenerateTarget { row: i });
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// `L_c + λ·L_s`.
pub fn total_loss(tape: &mut Tape, contrastive: Var, swamp: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let weighted = tape.scale(swamp, lambda);
    tape.add(contrastive, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn contrastive_value(s: Matrix, margin: f64) -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(s);
        let l = contrastive_loss(&mut tape, v, margin).unwrap();
        tape.value(l).item()
    }

    /// Every hinge term written out over all (i, j).
    fn contrastive_brute(s: &Matrix, margin: f64) -> f64 {
        let n = s.rows();
        let mut total = 0.0;
        for i in 0..n {
            let mut row_max = f64::NEG_INFINITY;
            let mut col_max = f64::NEG_INFINITY;
            for j in 0..n {
                if j != i {
                    row_max = row_max.max(s[(i, j)]);
                    col_max = col_max.max(s[(j, i)]);
                }
            }
            if n > 1 {
                total += (margin - s[(i, i)] + row_max).max(0.0);
                total += (margin - s[(i, i)] + col_max).max(0.0);
            }
        }
        total / n as f64
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_value(Matrix::identity(2), 0.1), 0.0);
        assert_eq!(contrastive_value(Matrix::scalar(0.3), 0.1), 0.0);
        let s = Matrix::from_rows(&[[0.5, 0.45], [0.2, 0.5]]);
        assert!((contrastive_value(s.clone(), 0.1) - 0.05).abs() < 1e-15);
        assert!((contrastive_brute(&s, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn contrastive_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..8 {
            let s = Matrix::uniform(n, n, -1.0, 1.0, &mut rng);
            let got = contrastive_value(s.clone(), 0.2);
            assert!((got - contrastive_brute(&s, 0.2)).abs() < 1e-14);
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn similarity_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::identity(2));
        let b = tape.leaf(Matrix::identity(2));
        let s = similarity_matrix(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(s), &Matrix::identity(2));

        let c = tape.leaf(Matrix::from_rows(&[[0.6, 0.8]]));
        let d = tape.leaf(Matrix::from_rows(&[[-0.6, -0.8]]));
        let s = similarity_matrix(&mut tape, c, d).unwrap();
        assert!((tape.value(s).item() + 1.0).abs() < 1e-15);

        let e = tape.leaf(Matrix::zeros(2, 3));
        assert!(similarity_matrix(&mut tape, a, e).is_err());
    }

    #[test]
    fn posterior_examples() {
        // Orthogonal to every prototype: uniform.
        let protos = Matrix::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let f = Matrix::from_rows(&[[1.0, 0.0, 0.0]]);
        let lp = class_posteriors_detached(&f, &protos, 0.5).unwrap();
        assert!(lp
            .as_slice()
            .iter()
            .all(|v| (v - 0.5f64.ln()).abs() < 1e-15));

        // Equal to prototype 3 of an orthonormal bank at τ = 0.01.
        let protos = Matrix::identity(4);
        let f = Matrix::from_rows(&[[0.0, 0.0, 1.0, 0.0]]);
        let lp = class_posteriors_detached(&f, &protos, 0.01).unwrap();
        let p: Vec<f64> = lp.row(0).iter().map(|v| v.exp()).collect();
        assert!(p[2] > 1.0 - 1e-10);
        assert!(p.iter().enumerate().all(|(j, &v)| j == 2 || v < p[2]));

        let mut tape = Tape::new();
        let fv = tape.leaf(f);
        let pv = tape.leaf(protos);
        assert!(matches!(
            class_posteriors(&mut tape, fv, pv, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn swap_cost_examples() {
        let lp = Matrix::from_rows(&[[0.0, f64::NEG_INFINITY.max(-1e300)]]);
        let c = swap_cost(&lp).unwrap();
        assert_eq!(c.values()[(0, 0)], 0.0);
        assert_eq!(c.values()[(0, 1)], MAX_COST);

        let c = swap_cost(&Matrix::filled(1, 4, 0.25f64.ln())).unwrap();
        assert!(c
            .values()
            .as_slice()
            .iter()
            .all(|v| (v - 4f64.ln()).abs() < 1e-15));

        let c = swap_cost(&Matrix::scalar(1e-40f64.ln())).unwrap();
        assert_eq!(c.values().item(), MAX_COST);
        assert!((MAX_COST + 1e-30f64.ln()).abs() < 1e-12);
    }

    fn swamp_value(qa: &Matrix, qb: &Matrix, la: &Matrix, lb: &Matrix) -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.leaf(la.clone());
        let b = tape.leaf(lb.clone());
        let l = swamp_loss(&mut tape, qa, qb, a, b)?;
        Ok(tape.value(l).item())
    }

    #[test]
    fn swamp_examples() {
        let q = Matrix::from_rows(&[[0.0, 1.0, 0.0]]);
        let lp = Matrix::from_rows(&[[-50.0, (1.0f64 - 1e-12).ln(), -50.0]]);
        assert!(swamp_value(&q, &q, &lp, &lp).unwrap() < 1e-11);

        let q = Matrix::filled(2, 4, 0.25);
        let lp = Matrix::filled(2, 4, 0.25f64.ln());
        let v = swamp_value(&q, &q, &lp, &lp).unwrap();
        assert!((v - 2.0 * 4f64.ln()).abs() < 1e-12);

        // Plan rows carry mass 1/N; they are rescaled internally.
        let scaled = Matrix::filled(2, 4, 0.25 / 2.0);
        let v2 = swamp_value(&scaled, &scaled, &lp, &lp).unwrap();
        assert!((v - v2).abs() < 1e-15);

        let zero = Matrix::zeros(2, 4);
        assert!(matches!(
            swamp_value(&zero, &q, &lp, &lp),
            Err(Error::DegenerateTarget { row: 0 })
        ));
    }

    #[test]
    fn swamp_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rand_dist = |rng: &mut ChaCha8Rng| {
            let m = Matrix::uniform(2, 3, 0.05, 1.0, rng);
            let s = m.row_sums();
            Matrix::from_vec(2, 3, (0..6).map(|i| m.as_slice()[i] / s[i / 3]).collect()).unwrap()
        };
        let (qa, qb) = (rand_dist(&mut rng), rand_dist(&mut rng));
        let la = rand_dist(&mut rng).map(f64::ln);
        let lb = rand_dist(&mut rng).map(f64::ln);
        let mut expected = 0.0;
        for (q, l) in [(&qa, &la), (&qb, &lb)] {
            let mut term = 0.0;
            for i in 0..2 {
                for y in 0..3 {
                    term += -q[(i, y)] * l[(i, y)];
                }
            }
            expected += term / 2.0;
        }
        assert!((swamp_value(&qa, &qb, &la, &lb).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::new();
        let lc = tape.leaf(Matrix::scalar(1.0));
        let ls = tape.leaf(Matrix::scalar(2.0));
        let t = total_loss(&mut tape, lc, ls, 0.0).unwrap();
        assert_eq!(tape.value(t).item(), 1.0);
        let t = total_loss(&mut tape, lc, ls, 0.25).unwrap();
        assert_eq!(tape.value(t).item(), 1.5);
        let zero = tape.leaf(Matrix::scalar(0.0));
        let t = total_loss(&mut tape, lc, zero, 1.0).unwrap();
        assert_eq!(tape.value(t).item(), 1.0);
        assert!(total_loss(&mut tape, lc, ls, -1.0).is_err());
    }

    #[test]
    fn prototypes_are_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let bank = PrototypeBank::new(&mut params, 10, 5, &mut rng).unwrap();
        for r in bank.values(&params).row_iter() {
            assert!((r.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        params.get_mut(bank.id()).value.as_mut_slice()[0] += 0.5;
        bank.project_unit(&mut params).unwrap();
        let r = bank.values(&params).row(0);
        assert!((r.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
