//! Forward kernels shared by the tape and by gradient-free evaluation paths.

use serde::{Deserialize, Serialize};

use super::fastexp::sum_exp_shifted;
use super::Matrix;
use crate::error::{Error, Result};

/// Rows with a smaller Euclidean norm cannot be normalized.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// `x·W + b` with `b` (1×dout) broadcast over rows.
pub fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::dim(
            "affine",
            format!("bias {:?} for weight {:?}", b.shape(), w.shape()),
        ));
    }
    let mut out = x.matmul(w).map_err(|_| {
        Error::dim(
            "affine",
            format!("input {:?} with weight {:?}", x.shape(), w.shape()),
        )
    })?;
    let bias = b.as_slice();
    for i in 0..out.rows() {
        for (o, &bv) in out.row_mut(i).iter_mut().zip(bias) {
            *o += bv;
        }
    }
    Ok(out)
}

pub fn activation(x: &Matrix, kind: Activation) -> Matrix {
    x.map(|v| kind.apply(v))
}

/// Row-wise L2 normalization; also returns the row norms.
pub fn l2_normalize_rows(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > NORM_FLOOR) {
            return Err(Error::DegenerateEmbedding {
                row: i,
                norm,
                floor: NORM_FLOOR,
            });
        }
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// `log softmax(x / τ)` per row, computed with a max shift.
pub fn log_softmax_rows(x: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mut m = f64::NEG_INFINITY;
        for v in row.iter_mut() {
            *v /= tau;
            if *v > m {
                m = *v;
            }
        }
        let lse = m + sum_exp_shifted(row, m).ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_examples() {
        let w = Matrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]]);
        let b = Matrix::zeros(1, 2);
        assert_eq!(affine(&Matrix::identity(2), &w, &b).unwrap(), w);

        let x = Matrix::from_rows(&[[1.0, 1.0]]);
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[10.0, 10.0]]);
        assert_eq!(
            affine(&x, &w, &b).unwrap(),
            Matrix::from_rows(&[[14.0, 16.0]])
        );

        let out = affine(&Matrix::zeros(3, 2), &w, &Matrix::from_rows(&[[5.0, 5.0]])).unwrap();
        assert!(out.row_iter().all(|r| r == [5.0, 5.0]));

        assert!(matches!(
            affine(&Matrix::zeros(1, 3), &w, &b),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn activation_examples() {
        let r = activation(&Matrix::from_rows(&[[-1.0, 2.0]]), Activation::Relu);
        assert_eq!(r, Matrix::from_rows(&[[0.0, 2.0]]));
        assert_eq!(
            activation(&Matrix::scalar(0.0), Activation::Tanh).item(),
            0.0
        );
        assert_eq!(
            activation(&Matrix::scalar(0.0), Activation::Sigmoid).item(),
            0.5
        );
    }

    #[test]
    fn normalize_examples() {
        let (y, _) = l2_normalize_rows(&Matrix::from_rows(&[[3.0, 4.0]])).unwrap();
        assert!((y[(0, 0)] - 0.6).abs() < 1e-15 && (y[(0, 1)] - 0.8).abs() < 1e-15);
        let (y, _) = l2_normalize_rows(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]])).unwrap();
        assert_eq!(y, Matrix::identity(2));
        assert!(matches!(
            l2_normalize_rows(&Matrix::from_rows(&[[1e-13, 0.0]])),
            Err(Error::DegenerateEmbedding { row: 0, .. })
        ));
    }

    #[test]
    fn log_softmax_examples() {
        let y = log_softmax_rows(&Matrix::filled(2, 4, 0.7), 0.3).unwrap();
        for &v in y.as_slice() {
            assert!((v - 0.25f64.ln()).abs() < 1e-15);
        }
        let y = log_softmax_rows(&Matrix::from_rows(&[[0.0, 3f64.ln()]]), 1.0).unwrap();
        assert!((y[(0, 0)] - 0.25f64.ln()).abs() < 1e-15);
        assert!((y[(0, 1)] - 0.75f64.ln()).abs() < 1e-15);
        assert!(matches!(log_softmax_rows(&y, 0.0), Err(Error::Config(_))));
    }
}
