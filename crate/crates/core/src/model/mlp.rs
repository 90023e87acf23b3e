//! Stacked fully connected vector encoder.

use rand::Rng;

use super::layers::{expect_width, Activation, Dense, Layout};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Hidden layers `a_l = act(W_l a_{l-1} + b_l)` followed by a linear output
/// layer. With no hidden layers the encoder is a single affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder<P> {
    pub layers: Vec<Dense<P>>,
    pub activation: Activation,
}

pub type MlpEncoderParams = MlpEncoder<Tensor>;

impl MlpEncoder<Tensor> {
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], Layout::OutIn, rng))
            .collect();
        MlpEncoder { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").output_dim()
    }

    /// Checks that consecutive layer shapes chain.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("MLP encoder needs at least one layer".into()));
        }
        for w in self.layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::dim(
                    "mlp layers",
                    w[0].weight.shape(),
                    w[1].weight.shape(),
                ));
            }
        }
        Ok(())
    }

    /// Encodes a single vector `x: [d_in]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.map(&mut |t| tape.leaf(t));
        let xv = tape.constant(vec![1, x.len()], x.data().to_vec())?;
        let z = bound.forward(&mut tape, xv)?;
        Ok(Tensor::vector(tape.data(z).to_vec()))
    }
}

impl<P> MlpEncoder<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> MlpEncoder<Q> {
        MlpEncoder {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            activation: self.activation,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layer{i}"), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.layer{i}"), f);
        }
    }
}

impl MlpEncoder<Var> {
    /// `x: [B × d_in]` → `[B × d]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d_in = tape.shape(self.layers[0].weight)[1];
        expect_width(tape, x, d_in, "encode_vector")?;
        let (last, hidden) = self.layers.split_last().expect("at least one layer");
        let mut a = x;
        for layer in hidden {
            let z = layer.forward(tape, a)?;
            a = self.activation.apply(tape, z);
        }
        last.forward(tape, a)
    }
}
