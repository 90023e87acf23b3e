//! Convolutional image encoder: (conv → ReLU → max-pool)* → flatten →
//! ReLU fully connected → linear output.

use rand::Rng;

use super::layers::{init_uniform, Dense, Layout};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One convolution layer. `kernel: [k_h, k_w, C_in, C_out]`, so that
/// `K_{k,c}(p, q) = kernel[p, q, c, k]`; `bias: [C_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<P> {
    pub kernel: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder<P> {
    pub convs: Vec<ConvLayer<P>>,
    pub pool_stride: usize,
    pub fc: Dense<P>,
    pub out: Dense<P>,
    /// Expected sample shape, channel-first `(C, H, W)`.
    pub input_shape: [usize; 3],
}

pub type ConvEncoderParams = ConvEncoder<Tensor>;

/// Spatial pipeline shapes; `Err` if a kernel outgrows its input or a pool
/// stride does not divide the map.
pub fn conv_output_shape(
    input_shape: [usize; 3],
    kernels: &[(usize, usize, usize)],
    pool_stride: usize,
) -> Result<(usize, usize, usize)> {
    let [mut c, mut h, mut w] = input_shape;
    for &(k, kh, kw) in kernels {
        if kh > h || kw > w || kh == 0 || kw == 0 {
            return Err(Error::dim("conv pipeline", &[h, w, c], &[kh, kw]));
        }
        h = h - kh + 1;
        w = w - kw + 1;
        if pool_stride == 0 || h % pool_stride != 0 || w % pool_stride != 0 {
            return Err(Error::Config(format!(
                "pool stride {pool_stride} does not divide feature map {h}x{w}"
            )));
        }
        h /= pool_stride;
        w /= pool_stride;
        c = k;
    }
    Ok((h, w, c))
}

impl ConvEncoder<Tensor> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        input_shape: [usize; 3],
        channels: &[usize],
        kernel_sizes: &[usize],
        pool_stride: usize,
        fc_dim: usize,
        output_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels.len() != kernel_sizes.len() {
            return Err(Error::Config(
                "conv channels and kernel sizes must have equal length".into(),
            ));
        }
        let spec: Vec<_> = channels
            .iter()
            .zip(kernel_sizes)
            .map(|(&c, &k)| (c, k, k))
            .collect();
        let (h, w, c) = conv_output_shape(input_shape, &spec, pool_stride)?;
        let mut c_in = input_shape[0];
        let mut convs = Vec::with_capacity(channels.len());
        for (&c_out, &k) in channels.iter().zip(kernel_sizes) {
            let fan_in = k * k * c_in;
            convs.push(ConvLayer {
                kernel: init_uniform(&[k, k, c_in, c_out], fan_in, rng),
                bias: init_uniform(&[c_out], fan_in, rng),
            });
            c_in = c_out;
        }
        let d_flat = h * w * c;
        Ok(ConvEncoder {
            convs,
            pool_stride,
            fc: Dense::init(d_flat, fc_dim, Layout::InOut, rng),
            out: Dense::init(fc_dim, output_dim, Layout::InOut, rng),
            input_shape,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut c_in = self.input_shape[0];
        let mut spec = Vec::new();
        for layer in &self.convs {
            match layer.kernel.shape() {
                [kh, kw, c, k] if *c == c_in && layer.bias.len() == *k => {
                    spec.push((*k, *kh, *kw));
                    c_in = *k;
                }
                other => return Err(Error::dim("conv kernel", other, &[c_in])),
            }
        }
        let (h, w, c) = conv_output_shape(self.input_shape, &spec, self.pool_stride)?;
        if self.fc.input_dim() != h * w * c {
            return Err(Error::dim("conv flatten", &[h, w, c], self.fc.weight.shape()));
        }
        if self.fc.output_dim() != self.out.input_dim() {
            return Err(Error::dim("conv fc", self.fc.weight.shape(), self.out.weight.shape()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.out.output_dim()
    }

    /// Encodes one channel-first image `x: (C, H, W)`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.map(&mut |t| tape.leaf(t));
        let z = bound.forward(&mut tape, 1, x.data())?;
        Ok(Tensor::vector(tape.data(z).to_vec()))
    }
}

/// `[B, C, H, W]` → `[B, H, W, C]`.
pub fn chw_to_hwc(data: &[f64], batch: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let base = b * c * h * w;
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[base + (i * w + j) * c + ch] = data[base + (ch * h + i) * w + j];
                }
            }
        }
    }
    out
}

impl<P> ConvEncoder<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> ConvEncoder<Q> {
        ConvEncoder {
            convs: self
                .convs
                .iter()
                .map(|l| ConvLayer {
                    kernel: f(&l.kernel),
                    bias: f(&l.bias),
                })
                .collect(),
            pool_stride: self.pool_stride,
            fc: self.fc.map(f),
            out: self.out.map(f),
            input_shape: self.input_shape,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (i, l) in self.convs.iter().enumerate() {
            f(format!("{prefix}.conv{i}.kernel"), &l.kernel);
            f(format!("{prefix}.conv{i}.bias"), &l.bias);
        }
        self.fc.visit(&format!("{prefix}.fc"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        for (i, l) in self.convs.iter_mut().enumerate() {
            f(format!("{prefix}.conv{i}.kernel"), &mut l.kernel);
            f(format!("{prefix}.conv{i}.bias"), &mut l.bias);
        }
        self.fc.visit_mut(&format!("{prefix}.fc"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

impl ConvEncoder<Var> {
    /// `images`: `batch` channel-first images laid out contiguously.
    pub fn forward(&self, tape: &mut Tape, batch: usize, images: &[f64]) -> Result<Var> {
        let [c, h, w] = self.input_shape;
        if images.len() != batch * c * h * w {
            return Err(Error::dim("encode_image", &[batch, c, h, w], &[images.len()]));
        }
        let hwc = chw_to_hwc(images, batch, c, h, w);
        let mut x = tape.constant(vec![batch, h, w, c], hwc)?;
        for layer in &self.convs {
            let z = tape.conv2d(x, layer.kernel, layer.bias)?;
            let a = tape.relu(z);
            x = tape.maxpool(a, self.pool_stride)?;
        }
        let flat_len: usize = tape.shape(x)[1..].iter().product();
        let flat = tape.reshape(x, vec![batch, flat_len])?;
        let fc = self.fc.forward(tape, flat)?;
        let a = tape.relu(fc);
        self.out.forward(tape, a)
    }
}
