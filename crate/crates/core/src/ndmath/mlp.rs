use rand::Rng;

use super::ops::{self, Activation};
use super::param::{glorot_uniform, ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Fully-connected network: hidden layers use `hidden_activation`, the
/// output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    hidden_activation: Activation,
}

impl Mlp {
    /// Allocates Glorot-initialized weights and zero biases for the layer
    /// widths `dims` (input first) in `params`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        dims: &[usize],
        hidden_activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: params.add(glorot_uniform(w[0], w[1], rng)),
                bias: params.add(Matrix::zeros(1, w[1])),
            })
            .collect();
        Mlp {
            layers,
            hidden_activation,
        }
    }

    /// Rebinds an existing parameter layout, e.g. after loading a checkpoint.
    pub fn from_layers(layers: Vec<Layer>, hidden_activation: Activation) -> Self {
        Mlp {
            layers,
            hidden_activation,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }

    pub fn input_dim(&self, params: &ParamSet) -> usize {
        params.get(self.layers[0].weight).value.rows()
    }

    pub fn output_dim(&self, params: &ParamSet) -> usize {
        params
            .get(self.layers[self.layers.len() - 1].weight)
            .value
            .cols()
    }

    /// Verifies that consecutive layers chain and biases are `1×out`.
    pub fn check_shapes(&self, params: &ParamSet) -> Result<()> {
        let mut width = None;
        for (idx, layer) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = params.get(layer.weight).value.shape();
            let bias = params.get(layer.bias).value.shape();
            if width.is_some_and(|w| w != fan_in) || bias != (1, fan_out) {
                return Err(Error::dim(
                    "Mlp::check_shapes",
                    format!("layer {idx}: weight {fan_in}x{fan_out}, bias {bias:?}, input width {width:?}"),
                ));
            }
            width = Some(fan_out);
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let mut h = x;
        for (idx, layer) in self.layers.iter().enumerate() {
            let w = tape.param(params, layer.weight);
            let b = tape.param(params, layer.bias);
            h = tape.affine(h, w, b)?;
            if idx + 1 < self.layers.len() {
                h = tape.activation(h, self.hidden_activation);
            }
        }
        Ok(h)
    }

    /// Same computation as [`Mlp::forward`] without recording a tape.
    pub fn apply(&self, params: &ParamSet, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            h = ops::affine(
                &h,
                &params.get(layer.weight).value,
                &params.get(layer.bias).value,
            )?;
            if idx + 1 < self.layers.len() {
                h = ops::activation(&h, self.hidden_activation);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn taped_and_plain_forward_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, &[4, 6, 6, 3], Activation::Relu, &mut rng);
        let x = Matrix::uniform(5, 4, -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = mlp.forward(&mut tape, &params, xv).unwrap();
        assert_eq!(tape.value(y), &mlp.apply(&params, &x).unwrap());
        assert_eq!(mlp.input_dim(&params), 4);
        assert_eq!(mlp.output_dim(&params), 3);
        assert_eq!(mlp.param_ids().count(), 6);
    }
}
