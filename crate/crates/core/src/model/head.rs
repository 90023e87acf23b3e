//! Regression head: ReLU hidden layers and a scalar linear readout.

use rand::Rng;

use super::layers::Activation;
use super::mlp::MlpEncoder;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Head<P> {
    pub mlp: MlpEncoder<P>,
}

pub type HeadParams = Head<Tensor>;

impl Head<Tensor> {
    pub fn init(input_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        Head {
            mlp: MlpEncoder::init(input_dim, hidden, 1, Activation::Relu, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        if self.mlp.output_dim() != 1 {
            return Err(Error::dim("head output", &[self.mlp.output_dim()], &[1]));
        }
        Ok(())
    }

    pub fn predict(&self, z: &Tensor) -> Result<f64> {
        Ok(self.mlp.encode(z)?.data()[0])
    }
}

impl<P> Head<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Head<Q> {
        Head {
            mlp: self.mlp.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.mlp.visit(prefix, f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        self.mlp.visit_mut(prefix, f);
    }
}

impl Head<Var> {
    /// `z: [B×d]` → `ŷ: [B×1]`.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.mlp.forward(tape, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::{Dense, Layout};
    use crate::rng;

    #[test]
    fn zero_head_predicts_zero() {
        let mut r = rng::stream(2, &[]);
        let mut h = Head::init(4, &[3], &mut r);
        for layer in &mut h.mlp.layers {
            layer.weight.data_mut().fill(0.0);
            layer.bias.data_mut().fill(0.0);
        }
        assert_eq!(h.predict(&Tensor::vector(vec![1.0, 2.0, 3.0, 4.0])).unwrap(), 0.0);
    }

    #[test]
    fn affine_readout() {
        let mut layer = Dense::zeros(3, 1, Layout::OutIn);
        layer.weight = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        layer.bias = Tensor::vector(vec![2.0]);
        let h = Head {
            mlp: MlpEncoder {
                layers: vec![layer],
                activation: Activation::Relu,
            },
        };
        h.validate().unwrap();
        assert_eq!(h.predict(&Tensor::vector(vec![3.0, 9.0, -4.0])).unwrap(), 5.0);
    }

    #[test]
    fn matches_layer_by_layer_oracle() {
        let mut r = rng::stream(9, &[]);
        let h = Head::init(5, &[4, 3], &mut r);
        let z = [0.2, -0.7, 1.1, 0.0, 0.4];
        let mut a = z.to_vec();
        let n = h.mlp.layers.len();
        for (l, layer) in h.mlp.layers.iter().enumerate() {
            let (out, inp) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            a = (0..out)
                .map(|o| {
                    let v = layer.bias.data()[o]
                        + (0..inp).map(|i| layer.weight.data()[o * inp + i] * a[i]).sum::<f64>();
                    if l + 1 < n { v.max(0.0) } else { v }
                })
                .collect();
        }
        let got = h.predict(&Tensor::vector(z.to_vec())).unwrap();
        assert!((got - a[0]).abs() < 1e-12);
    }
}
