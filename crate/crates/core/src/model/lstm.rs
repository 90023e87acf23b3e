//! Gated recurrent sequence encoder, optionally bidirectional.
//!
//! Gates act on the concatenation `[h_{t-1}, x_t]`:
//!
//! ```text
//! f_t = σ(W_f [h_{t-1}, x_t] + b_f)      i_t = σ(W_i [h_{t-1}, x_t] + b_i)
//! C̃_t = tanh(W_C [h_{t-1}, x_t] + b_C)   C_t = f_t ⊙ C_{t-1} + i_t ⊙ C̃_t
//! o_t = σ(W_o [h_{t-1}, x_t] + b_o)      h_t = o_t ⊙ tanh(C_t)
//! ```

use rand::Rng;

use super::layers::{init_uniform, Dense, Layout};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Gate weights are `[d_h × (d_h + d_in)]`, biases `[d_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell<P> {
    pub w_f: P,
    pub w_i: P,
    pub w_c: P,
    pub w_o: P,
    pub b_f: P,
    pub b_i: P,
    pub b_c: P,
    pub b_o: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmEncoder<P> {
    pub forward: LstmCell<P>,
    /// Present for bidirectional encoders; runs over the reversed sequence.
    pub backward: Option<LstmCell<P>>,
    /// `[dirs·d_h × d]`, applied as `h W + b`.
    pub out: Dense<P>,
    pub input_dim: usize,
}

pub type LstmEncoderParams = LstmEncoder<Tensor>;

impl LstmCell<Tensor> {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let fan_in = hidden_dim + input_dim;
        let shape = [hidden_dim, fan_in];
        let mut w = || init_uniform(&shape, fan_in, rng);
        let (w_f, w_i, w_c, w_o) = (w(), w(), w(), w());
        let mut b = || init_uniform(&[hidden_dim], fan_in, rng);
        let (b_f, b_i, b_c, b_o) = (b(), b(), b(), b());
        LstmCell {
            w_f,
            w_i,
            w_c,
            w_o,
            b_f,
            b_i,
            b_c,
            b_o,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Tensor::zeros(&[hidden_dim, hidden_dim + input_dim]);
        let b = || Tensor::zeros(&[hidden_dim]);
        LstmCell {
            w_f: w(),
            w_i: w(),
            w_c: w(),
            w_o: w(),
            b_f: b(),
            b_i: b(),
            b_c: b(),
            b_o: b(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_f.shape()[0]
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        let d_h = self.hidden_dim();
        let want = [d_h, d_h + input_dim];
        for w in [&self.w_f, &self.w_i, &self.w_c, &self.w_o] {
            if w.shape() != want {
                return Err(Error::dim("lstm gate weight", w.shape(), &want));
            }
        }
        for b in [&self.b_f, &self.b_i, &self.b_c, &self.b_o] {
            if b.len() != d_h {
                return Err(Error::dim("lstm gate bias", b.shape(), &[d_h]));
            }
        }
        Ok(())
    }

    /// One recurrence step on single vectors; returns `(h_t, C_t)`.
    pub fn step(&self, x: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        let d_h = self.hidden_dim();
        if h_prev.len() != d_h || c_prev.len() != d_h {
            return Err(Error::dim("lstm_step state", h_prev.shape(), &[d_h]));
        }
        if self.w_f.shape()[1] != d_h + x.len() {
            return Err(Error::dim("lstm_step input", x.shape(), self.w_f.shape()));
        }
        let mut tape = Tape::new();
        let bound = self.map(&mut |t| tape.leaf(t));
        let xv = tape.constant(vec![1, x.len()], x.data().to_vec())?;
        let hv = tape.constant(vec![1, d_h], h_prev.data().to_vec())?;
        let cv = tape.constant(vec![1, d_h], c_prev.data().to_vec())?;
        let (h, c) = bound.step(&mut tape, xv, hv, cv)?;
        Ok((
            Tensor::vector(tape.data(h).to_vec()),
            Tensor::vector(tape.data(c).to_vec()),
        ))
    }
}

impl<P> LstmCell<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> LstmCell<Q> {
        LstmCell {
            w_f: f(&self.w_f),
            w_i: f(&self.w_i),
            w_c: f(&self.w_c),
            w_o: f(&self.w_o),
            b_f: f(&self.b_f),
            b_i: f(&self.b_i),
            b_c: f(&self.b_c),
            b_o: f(&self.b_o),
        }
    }

    fn fields(&self) -> [(&'static str, &P); 8] {
        [
            ("w_f", &self.w_f),
            ("w_i", &self.w_i),
            ("w_c", &self.w_c),
            ("w_o", &self.w_o),
            ("b_f", &self.b_f),
            ("b_i", &self.b_i),
            ("b_c", &self.b_c),
            ("b_o", &self.b_o),
        ]
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (name, p) in self.fields() {
            f(format!("{prefix}.{name}"), p);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        let LstmCell {
            w_f,
            w_i,
            w_c,
            w_o,
            b_f,
            b_i,
            b_c,
            b_o,
        } = self;
        for (name, p) in [
            ("w_f", w_f),
            ("w_i", w_i),
            ("w_c", w_c),
            ("w_o", w_o),
            ("b_f", b_f),
            ("b_i", b_i),
            ("b_c", b_c),
            ("b_o", b_o),
        ] {
            f(format!("{prefix}.{name}"), p);
        }
    }
}

impl LstmCell<Var> {
    fn gate(&self, tape: &mut Tape, hx: Var, w: Var, b: Var) -> Result<Var> {
        let z = tape.matmul_nt(hx, w)?;
        tape.add_row(z, b)
    }

    /// Batched step: `x: [B × d_in]`, `h, c: [B × d_h]`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hx = tape.concat_cols(&[h, x])?;
        let f_pre = self.gate(tape, hx, self.w_f, self.b_f)?;
        let f = tape.sigmoid(f_pre);
        let i_pre = self.gate(tape, hx, self.w_i, self.b_i)?;
        let i = tape.sigmoid(i_pre);
        let g_pre = self.gate(tape, hx, self.w_c, self.b_c)?;
        let g = tape.tanh(g_pre);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let o_pre = self.gate(tape, hx, self.w_o, self.b_o)?;
        let o = tape.sigmoid(o_pre);
        let squashed = tape.tanh(c_next);
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

impl LstmEncoder<Tensor> {
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        bidirectional: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let forward = LstmCell::init(input_dim, hidden_dim, rng);
        let backward = bidirectional.then(|| LstmCell::init(input_dim, hidden_dim, rng));
        let dirs = if bidirectional { 2 } else { 1 };
        LstmEncoder {
            forward,
            backward,
            out: Dense::init(dirs * hidden_dim, output_dim, Layout::InOut, rng),
            input_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.forward.validate(self.input_dim)?;
        let mut width = self.forward.hidden_dim();
        if let Some(b) = &self.backward {
            b.validate(self.input_dim)?;
            if b.hidden_dim() != self.forward.hidden_dim() {
                return Err(Error::dim("lstm directions", b.w_f.shape(), self.forward.w_f.shape()));
            }
            width *= 2;
        }
        if self.out.input_dim() != width {
            return Err(Error::dim("lstm projection", self.out.weight.shape(), &[width]));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.out.output_dim()
    }

    /// Encodes one sequence `x: [T × d_in]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let steps = match x.shape() {
            [t, d] if *d == self.input_dim => *t,
            other => return Err(Error::dim("encode_sequence", other, &[self.input_dim])),
        };
        let mut tape = Tape::new();
        let bound = self.map(&mut |t| tape.leaf(t));
        let z = bound.forward(&mut tape, 1, steps, x.data())?;
        Ok(Tensor::vector(tape.data(z).to_vec()))
    }
}

impl<P> LstmEncoder<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> LstmEncoder<Q> {
        LstmEncoder {
            forward: self.forward.map(f),
            backward: self.backward.as_ref().map(|b| b.map(f)),
            out: self.out.map(f),
            input_dim: self.input_dim,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.forward.visit(&format!("{prefix}.fwd"), f);
        if let Some(b) = &self.backward {
            b.visit(&format!("{prefix}.bwd"), f);
        }
        self.out.visit(&format!("{prefix}.out"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        self.forward.visit_mut(&format!("{prefix}.fwd"), f);
        if let Some(b) = &mut self.backward {
            b.visit_mut(&format!("{prefix}.bwd"), f);
        }
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

impl LstmEncoder<Var> {
    fn run(
        cell: &LstmCell<Var>,
        tape: &mut Tape,
        batch: usize,
        inputs: &[Var],
        order: impl Iterator<Item = usize>,
    ) -> Result<Var> {
        let d_h = tape.shape(cell.w_f)[0];
        let mut h = tape.constant(vec![batch, d_h], vec![0.0; batch * d_h])?;
        let mut c = tape.constant(vec![batch, d_h], vec![0.0; batch * d_h])?;
        for t in order {
            (h, c) = cell.step(tape, inputs[t], h, c)?;
        }
        Ok(h)
    }

    /// `seqs`: `batch` sequences of shape `[steps × d_in]`, contiguous.
    /// Unidirectional output is `h_T W + b`; bidirectional concatenates the
    /// forward `h_T` with the backward pass's final state (at position 1).
    pub fn forward(&self, tape: &mut Tape, batch: usize, steps: usize, seqs: &[f64]) -> Result<Var> {
        if steps == 0 {
            return Err(Error::domain("encode_sequence", "empty sequence"));
        }
        let d_in = self.input_dim;
        if seqs.len() != batch * steps * d_in {
            return Err(Error::dim("encode_sequence", &[batch, steps, d_in], &[seqs.len()]));
        }
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut x_t = Vec::with_capacity(batch * d_in);
            for b in 0..batch {
                let off = (b * steps + t) * d_in;
                x_t.extend_from_slice(&seqs[off..off + d_in]);
            }
            inputs.push(tape.constant(vec![batch, d_in], x_t)?);
        }
        let h_fwd = Self::run(&self.forward, tape, batch, &inputs, 0..steps)?;
        let h = match &self.backward {
            Some(cell) => {
                let h_bwd = Self::run(cell, tape, batch, &inputs, (0..steps).rev())?;
                tape.concat_cols(&[h_fwd, h_bwd])?
            }
            None => h_fwd,
        };
        self.out.forward(tape, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Per-element recurrence written out with scalar loops.
    fn oracle_step(cell: &LstmCell<Tensor>, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d_h = h.len();
        let hx: Vec<f64> = h.iter().chain(x).copied().collect();
        let pre = |w: &Tensor, b: &Tensor, r: usize| -> f64 {
            b.data()[r] + (0..hx.len()).map(|k| w.data()[r * hx.len() + k] * hx[k]).sum::<f64>()
        };
        let mut h_next = vec![0.0; d_h];
        let mut c_next = vec![0.0; d_h];
        for r in 0..d_h {
            let f = sig(pre(&cell.w_f, &cell.b_f, r));
            let i = sig(pre(&cell.w_i, &cell.b_i, r));
            let g = pre(&cell.w_c, &cell.b_c, r).tanh();
            let o = sig(pre(&cell.w_o, &cell.b_o, r));
            c_next[r] = f * c[r] + i * g;
            h_next[r] = o * c_next[r].tanh();
        }
        (h_next, c_next)
    }

    fn oracle_encode(enc: &LstmEncoder<Tensor>, x: &Tensor) -> Vec<f64> {
        let (steps, d_in) = (x.shape()[0], x.shape()[1]);
        let d_h = enc.forward.hidden_dim();
        let run = |cell: &LstmCell<Tensor>, order: Vec<usize>| {
            let (mut h, mut c) = (vec![0.0; d_h], vec![0.0; d_h]);
            for t in order {
                (h, c) = oracle_step(cell, &x.data()[t * d_in..(t + 1) * d_in], &h, &c);
            }
            h
        };
        let mut feat = run(&enc.forward, (0..steps).collect());
        if let Some(b) = &enc.backward {
            feat.extend(run(b, (0..steps).rev().collect()));
        }
        let (w, b) = (&enc.out.weight, &enc.out.bias);
        let d = enc.output_dim();
        (0..d)
            .map(|j| b.data()[j] + (0..feat.len()).map(|k| feat[k] * w.data()[k * d + j]).sum::<f64>())
            .collect()
    }

    #[test]
    fn zero_cell_keeps_zero_state() {
        let cell = LstmCell::zeros(3, 4);
        let (h, c) = cell
            .step(&Tensor::vector(vec![1.0, -2.0, 0.5]), &Tensor::zeros(&[4]), &Tensor::zeros(&[4]))
            .unwrap();
        assert_eq!(h.data(), &[0.0; 4]);
        assert_eq!(c.data(), &[0.0; 4]);
    }

    #[test]
    fn saturated_gates_preserve_memory() {
        let mut r = rng::stream(3, &[]);
        let mut cell = LstmCell::init(2, 3, &mut r);
        cell.w_f.data_mut().fill(0.0);
        cell.w_i.data_mut().fill(0.0);
        cell.b_f.data_mut().fill(30.0);
        cell.b_i.data_mut().fill(-30.0);
        let c_prev = Tensor::vector(vec![0.7, -1.2, 0.05]);
        let (_, c) = cell
            .step(&Tensor::vector(vec![0.3, -0.4]), &Tensor::vector(vec![0.1, 0.2, -0.3]), &c_prev)
            .unwrap();
        let diff: f64 = c
            .data()
            .iter()
            .zip(c_prev.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff < 1e-9, "memory drift {diff}");
    }

    #[test]
    fn step_matches_scalar_oracle_over_three_steps() {
        let mut r = rng::stream(4, &[]);
        let cell = LstmCell::init(3, 5, &mut r);
        let mut h = Tensor::zeros(&[5]);
        let mut c = Tensor::zeros(&[5]);
        let (mut oh, mut oc) = (vec![0.0; 5], vec![0.0; 5]);
        for t in 0..3 {
            let x = Tensor::vector(vec![0.5 - t as f64, 0.25 * t as f64, 1.0]);
            (h, c) = cell.step(&x, &h, &c).unwrap();
            (oh, oc) = oracle_step(&cell, x.data(), &oh, &oc);
            for k in 0..5 {
                assert!((h.data()[k] - oh[k]).abs() < 1e-12);
                assert!((c.data()[k] - oc[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_params_output_bias() {
        let mut r = rng::stream(5, &[]);
        let mut enc = LstmEncoder::init(2, 3, 4, true, &mut r);
        let bias = enc.out.bias.clone();
        enc.forward = LstmCell::zeros(2, 3);
        enc.backward = Some(LstmCell::zeros(2, 3));
        enc.out.weight.data_mut().fill(0.0);
        let z = enc.encode(&Tensor::filled(&[6, 2], 0.9)).unwrap();
        assert_eq!(z.data(), bias.data());
    }

    #[test]
    fn single_step_sequence_is_step_plus_projection() {
        let mut r = rng::stream(6, &[]);
        let enc = LstmEncoder::init(3, 4, 2, false, &mut r);
        let x = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let (h, _) = enc.forward.step(&x, &Tensor::zeros(&[4]), &Tensor::zeros(&[4])).unwrap();
        let z = enc.encode(&x.clone().reshaped(vec![1, 3]).unwrap()).unwrap();
        for j in 0..2 {
            let want: f64 = enc.out.bias.data()[j]
                + (0..4).map(|k| h.data()[k] * enc.out.weight.data()[k * 2 + j]).sum::<f64>();
            assert!((z.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bidirectional_encoder_matches_oracle_on_long_sequence() {
        let mut r = rng::stream(7, &[]);
        let enc = LstmEncoder::init(50, 8, 6, true, &mut r);
        enc.validate().unwrap();
        let data: Vec<f64> = (0..10 * 50).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let x = Tensor::new(vec![10, 50], data).unwrap();
        let got = enc.encode(&x).unwrap();
        let want = oracle_encode(&enc, &x);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence_is_domain_error() {
        let mut r = rng::stream(8, &[]);
        let enc = LstmEncoder::init(2, 3, 4, false, &mut r);
        let mut tape = Tape::new();
        let bound = enc.map(&mut |t| tape.leaf(t));
        assert!(matches!(
            bound.forward(&mut tape, 1, 0, &[]),
            Err(Error::Domain { .. })
        ));
    }
}
