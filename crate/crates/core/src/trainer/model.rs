use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::PrototypeBank;
use crate::ndmath::{ops, Activation, Matrix, Mlp, ParamSet, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    A,
    B,
}

/// Dual encoders plus the shared class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    params: ParamSet,
    encoder_a: Mlp,
    encoder_b: Mlp,
    prototypes: PrototypeBank,
}

impl Model {
    /// Fresh ReLU encoders `dim → hidden → hidden → embed_dim` per modality
    /// and `n_classes` unit prototypes.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized, S: Rng + ?Sized>(
        dim_a: usize,
        dim_b: usize,
        hidden: usize,
        embed_dim: usize,
        n_classes: usize,
        encoder_rng: &mut R,
        prototype_rng: &mut S,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        let encoder_a = Mlp::new(
            &mut params,
            &[dim_a, hidden, hidden, embed_dim],
            Activation::Relu,
            encoder_rng,
        );
        let encoder_b = Mlp::new(
            &mut params,
            &[dim_b, hidden, hidden, embed_dim],
            Activation::Relu,
            encoder_rng,
        );
        let prototypes = PrototypeBank::new(&mut params, n_classes, embed_dim, prototype_rng)?;
        Ok(Model {
            params,
            encoder_a,
            encoder_b,
            prototypes,
        })
    }

    /// Reassembles a model from parameters laid out as encoder A layers,
    /// encoder B layers, prototypes, each layer as weight then bias.
    pub fn from_parts(params: ParamSet, layers_a: usize, layers_b: usize) -> Result<Self> {
        use crate::ndmath::{Layer, ParamId};
        let expected = 2 * (layers_a + layers_b) + 1;
        if params.len() != expected || layers_a == 0 || layers_b == 0 {
            return Err(Error::Contract(format!(
                "model needs {expected} tensors for {layers_a}+{layers_b} layers, got {}",
                params.len()
            )));
        }
        let ids: Vec<ParamId> = params.ids().collect();
        let layers = |ids: &[ParamId]| -> Vec<Layer> {
            ids.chunks(2)
                .map(|c| Layer {
                    weight: c[0],
                    bias: c[1],
                })
                .collect()
        };
        let encoder_a = Mlp::from_layers(layers(&ids[..2 * layers_a]), Activation::Relu);
        let encoder_b =
            Mlp::from_layers(layers(&ids[2 * layers_a..expected - 1]), Activation::Relu);
        for mlp in [&encoder_a, &encoder_b] {
            mlp.check_shapes(&params)?;
        }
        let prototypes = PrototypeBank::from_param(&params, ids[expected - 1]);
        if prototypes.dim() != encoder_a.output_dim(&params)
            || prototypes.dim() != encoder_b.output_dim(&params)
        {
            return Err(Error::dim(
                "Model::from_parts",
                format!(
                    "prototypes are {}-dim, encoders emit {} and {}",
                    prototypes.dim(),
                    encoder_a.output_dim(&params),
                    encoder_b.output_dim(&params)
                ),
            ));
        }
        Ok(Model {
            params,
            encoder_a,
            encoder_b,
            prototypes,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encoder(&self, m: Modality) -> &Mlp {
        match m {
            Modality::A => &self.encoder_a,
            Modality::B => &self.encoder_b,
        }
    }

    pub fn prototypes(&self) -> &PrototypeBank {
        &self.prototypes
    }

    pub fn prototype_values(&self) -> &Matrix {
        self.prototypes.values(&self.params)
    }

    pub fn input_dim(&self, m: Modality) -> usize {
        self.encoder(m).input_dim(&self.params)
    }

    pub fn embed_dim(&self) -> usize {
        self.prototypes.dim()
    }

    /// Unit-norm embeddings of `x`, without recording gradients.
    pub fn embed(&self, m: Modality, x: &Matrix) -> Result<Matrix> {
        let want = self.input_dim(m);
        if x.cols() != want {
            return Err(Error::dim(
                "Model::embed",
                format!(
                    "model expects {m:?} inputs of width {want}, data is {}x{}",
                    x.rows(),
                    x.cols()
                ),
            ));
        }
        let h = self.encoder(m).apply(&self.params, x)?;
        Ok(ops::l2_normalize_rows(&h)?.0)
    }

    /// Taped unit-norm embeddings of `x`.
    pub fn embed_taped(&self, tape: &mut Tape, m: Modality, x: &Matrix) -> Result<Var> {
        let xv = tape.leaf(x.clone());
        let h = self.encoder(m).forward(tape, &self.params, xv)?;
        tape.l2_normalize_rows(h)
    }

    /// Replaces the prototypes with a fresh bank drawn from `rng` and clears
    /// all optimizer state.
    pub(crate) fn restart<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let mut scratch = ParamSet::new();
        let bank = PrototypeBank::new(
            &mut scratch,
            self.prototypes.n_classes(),
            self.embed_dim(),
            rng,
        )?;
        self.params.get_mut(self.prototypes.id()).value = bank.values(&scratch).clone();
        for p in self.params.iter_mut() {
            p.zero_grad();
            p.reset_optimizer();
        }
        Ok(())
    }
}
