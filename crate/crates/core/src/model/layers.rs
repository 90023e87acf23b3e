use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Unary, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        let kind = match self {
            Activation::Relu => Unary::Relu,
            Activation::Sigmoid => Unary::Sigmoid,
            Activation::Tanh => Unary::Tanh,
        };
        tape.map_unary(x, kind).expect("activation is total")
    }
}

/// Orientation of a dense weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// `weight: [out × in]`, applied as `W a + b`.
    OutIn,
    /// `weight: [in × out]`, applied as `a W + b`.
    InOut,
}

/// Uniform on `[-√(1/fan_in), √(1/fan_in)]`.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<P> {
    pub weight: P,
    pub bias: P,
    pub layout: Layout,
}

impl Dense<Tensor> {
    pub fn init(input: usize, output: usize, layout: Layout, rng: &mut impl Rng) -> Self {
        let shape = match layout {
            Layout::OutIn => [output, input],
            Layout::InOut => [input, output],
        };
        Dense {
            weight: init_uniform(&shape, input, rng),
            bias: init_uniform(&[output], input, rng),
            layout,
        }
    }

    pub fn zeros(input: usize, output: usize, layout: Layout) -> Self {
        let shape = match layout {
            Layout::OutIn => [output, input],
            Layout::InOut => [input, output],
        };
        Dense {
            weight: Tensor::zeros(&shape),
            bias: Tensor::zeros(&[output]),
            layout,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.layout {
            Layout::OutIn => self.weight.shape()[1],
            Layout::InOut => self.weight.shape()[0],
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.layout {
            Layout::OutIn => self.weight.shape()[0],
            Layout::InOut => self.weight.shape()[1],
        }
    }
}

impl<P> Dense<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Dense<Q> {
        Dense {
            weight: f(&self.weight),
            bias: f(&self.bias),
            layout: self.layout,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl Dense<Var> {
    /// Applies the affine map to a batch `x: [B × in]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = match self.layout {
            Layout::OutIn => tape.matmul_nt(x, self.weight)?,
            Layout::InOut => tape.matmul(x, self.weight)?,
        };
        tape.add_row(y, self.bias)
    }
}

/// Checks that `x` is `[B × dim]` for a consistent batch.
pub(crate) fn expect_width(tape: &Tape, x: Var, dim: usize, op: &'static str) -> Result<usize> {
    match tape.shape(x) {
        [b, d] if *d == dim => Ok(*b),
        other => Err(Error::dim(op, other, &[dim])),
    }
}
