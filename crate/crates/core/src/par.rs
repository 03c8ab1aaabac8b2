//! Prototype attention pooling of variable-size feature sets.
//!
//! A bank of learned query vectors attends over the `k` local features of a
//! set; each query yields the attention-weighted mean of the features, and
//! the concatenation of all query outputs is a fixed-length embedding. Two
//! pooled embeddings compare with a plain dot product, so matching costs are
//! linear in set size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{dot, glorot_uniform, Matrix, ParamId, ParamSet, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParConfig {
    pub n_prototypes: usize,
    pub temperature: f64,
    pub n_heads: usize,
    pub feature_dim: usize,
}

impl ParConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prototypes == 0 || self.n_heads == 0 || self.feature_dim == 0 {
            return Err(Error::Config(format!(
                "n_prototypes, n_heads and feature_dim must be positive, got {self:?}"
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "attention temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Number of query vectors across all heads.
    pub fn n_queries(&self) -> usize {
        self.n_heads * self.n_prototypes
    }

    pub fn output_len(&self) -> usize {
        self.n_queries() * self.feature_dim
    }
}

/// Query vectors shared by both modalities, one row per (head, prototype),
/// head-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParPrototypes {
    id: ParamId,
    config: ParConfig,
}

impl ParPrototypes {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        config: ParConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let id = params.add(glorot_uniform(config.n_queries(), config.feature_dim, rng));
        Ok(ParPrototypes { id, config })
    }

    pub fn from_param(params: &ParamSet, id: ParamId, config: ParConfig) -> Result<Self> {
        config.validate()?;
        let shape = params.get(id).value.shape();
        if shape != (config.n_queries(), config.feature_dim) {
            return Err(Error::dim(
                "ParPrototypes::from_param",
                format!(
                    "queries {shape:?}, config wants ({}, {})",
                    config.n_queries(),
                    config.feature_dim
                ),
            ));
        }
        Ok(ParPrototypes { id, config })
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn config(&self) -> &ParConfig {
        &self.config
    }

    pub fn encode(&self, tape: &mut Tape, params: &ParamSet, set: &LocalFeatureSet) -> Result<Var> {
        let features = tape.leaf(set.features.clone());
        let queries = tape.param(params, self.id);
        par_encode(tape, features, queries, &self.config)
    }
}

/// A non-empty set of `k` local features, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureSet {
    features: Matrix,
}

impl LocalFeatureSet {
    pub fn new(features: Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Contract(
                "local feature set must have k >= 1 features".into(),
            ));
        }
        Ok(LocalFeatureSet { features })
    }

    pub fn count(&self) -> usize {
        self.features.rows()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }
}

/// Pools the `k×D` set `features` with the `(H·p)×D` `queries` into a
/// `1×(H·p·D)` row.
pub fn par_encode(tape: &mut Tape, features: Var, queries: Var, config: &ParConfig) -> Result<Var> {
    config.validate()?;
    let (k, d) = tape.value(features).shape();
    if k == 0 {
        return Err(Error::Contract("cannot pool an empty feature set".into()));
    }
    if d != config.feature_dim {
        return Err(Error::dim(
            "par_encode",
            format!(
                "features are {d}-dim, config expects {}",
                config.feature_dim
            ),
        ));
    }
    let q_shape = tape.value(queries).shape();
    if q_shape != (config.n_queries(), d) {
        return Err(Error::dim(
            "par_encode",
            format!(
                "queries {q_shape:?}, expected ({}, {d})",
                config.n_queries()
            ),
        ));
    }
    let logits = tape.matmul_t(queries, features)?;
    let log_weights = tape.log_softmax_rows(logits, config.temperature)?;
    let weights = tape.exp(log_weights);
    let pooled = tape.matmul(weights, features)?;
    tape.reshape(pooled, 1, config.output_len())
}

/// Similarity of two pooled embeddings.
pub fn pooled_similarity(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(p: usize, h: usize, d: usize, t: f64) -> ParConfig {
        ParConfig {
            n_prototypes: p,
            temperature: t,
            n_heads: h,
            feature_dim: d,
        }
    }

    fn encode_values(v: &Matrix, q: &Matrix, cfg: &ParConfig) -> Matrix {
        let mut tape = Tape::new();
        let fv = tape.leaf(v.clone());
        let qv = tape.leaf(q.clone());
        let out = par_encode(&mut tape, fv, qv, cfg).unwrap();
        tape.value(out).clone()
    }

    fn loop_oracle(v: &Matrix, q: &Matrix, t: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for j in 0..q.rows() {
            let logits: Vec<f64> = (0..v.rows())
                .map(|i| (0..v.cols()).map(|c| q[(j, c)] * v[(i, c)]).sum::<f64>() / t)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for c in 0..v.cols() {
                let mut acc = 0.0;
                for i in 0..v.rows() {
                    acc += (logits[i] - max).exp() / z * v[(i, c)];
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn single_feature_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = config(3, 2, 4, 0.5);
        let v = Matrix::uniform(1, 4, -1.0, 1.0, &mut rng);
        let q = Matrix::uniform(6, 4, -3.0, 3.0, &mut rng);
        let out = encode_values(&v, &q, &cfg);
        for chunk in out.as_slice().chunks(4) {
            for (a, b) in chunk.iter().zip(v.as_slice()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = config(2, 1, 4, 0.5);
        let v = Matrix::uniform(3, 4, -1.0, 1.0, &mut rng);
        let q = Matrix::uniform(2, 4, -1.0, 1.0, &mut rng);
        let out = encode_values(&v, &q, &cfg);
        let oracle = loop_oracle(&v, &q, 0.5);
        assert_eq!(out.cols(), 8);
        for (a, b) in out.as_slice().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn output_length_is_independent_of_set_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let cfg = config(4, 2, 3, 0.5);
        let protos = ParPrototypes::new(&mut params, cfg, &mut rng).unwrap();
        for k in 1..=30 {
            let set = LocalFeatureSet::new(Matrix::uniform(k, 3, -1.0, 1.0, &mut rng)).unwrap();
            let mut tape = Tape::new();
            let out = protos.encode(&mut tape, &params, &set).unwrap();
            assert_eq!(tape.value(out).shape(), (1, cfg.output_len()));
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(LocalFeatureSet::new(Matrix::zeros(0, 3)).is_err());
        assert!(config(0, 1, 3, 0.5).validate().is_err());
        assert!(config(1, 1, 3, 0.0).validate().is_err());
        let mut tape = Tape::new();
        let v = tape.leaf(Matrix::zeros(2, 3));
        let q = tape.leaf(Matrix::zeros(2, 4));
        assert!(par_encode(&mut tape, v, q, &config(2, 1, 3, 0.5)).is_err());
        let e = tape.leaf(Matrix::zeros(0, 3));
        let q = tape.leaf(Matrix::zeros(2, 3));
        assert!(matches!(
            par_encode(&mut tape, e, q, &config(2, 1, 3, 0.5)),
            Err(Error::Contract(_))
        ));
    }
}
