//! Layers with default uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
//! for both weights and biases.

use rand::Rng;

use crate::graph::Var;
use crate::param::{join, Module, Param};
use crate::tensor::{ConvGeom, Tensor};

fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// `y = x Wᵀ + b` over `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(fan_in_uniform(&[output, input], input, rng)),
            bias: Param::new(fan_in_uniform(&[output], input, rng)),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Self {
        assert_eq!(weight.ndim(), 2);
        assert_eq!(bias.shape(), &[weight.shape()[0]]);
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn forward(&self, x: &Var) -> Var {
        let g = x.graph();
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        &x.matmul_t(&w, false, true) + &b
    }
}

impl Module for Linear {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Square-kernel convolution over `[N, C, H, W]` with zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        Self {
            weight: Param::new(fan_in_uniform(&[cout, cin, k, k], fan_in, rng)),
            bias: Param::new(fan_in_uniform(&[cout], fan_in, rng)),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value().shape()[2]
    }

    pub fn forward(&self, x: &Var) -> Var {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv2d expects NCHW, got {s:?}");
        let (cout, k) = (self.out_channels(), self.kernel());
        assert_eq!(s[1], self.in_channels(), "conv2d channel mismatch");
        let geom = ConvGeom {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            k,
            stride: self.stride,
            pad: self.pad,
        };
        let g = x.graph();
        let w = g.param(&self.weight).reshape(&[cout, s[1] * k * k]);
        let b = g.param(&self.bias).reshape(&[1, cout, 1, 1]);
        let y = w.matmul(&x.im2col(&geom));
        let y = y
            .reshape(&[cout, s[0], geom.out_h(), geom.out_w()])
            .permute(&[1, 0, 2, 3]);
        &y + &b
    }
}

impl Module for Conv2d {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Transposed convolution; weight layout `[C_in, C_out, k, k]`.
/// Output size is `(H - 1) * stride - 2 * pad + k`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cout * k * k;
        Self {
            weight: Param::new(fan_in_uniform(&[cin, cout, k, k], fan_in, rng)),
            bias: Param::new(fan_in_uniform(&[cout], fan_in, rng)),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let s = x.shape();
        let wshape = self.weight.value().shape().to_vec();
        let (cin, cout, k) = (wshape[0], wshape[1], wshape[2]);
        assert_eq!(s[1], cin, "conv_transpose2d channel mismatch");
        let (n, h, w) = (s[0], s[2], s[3]);
        let geom = ConvGeom {
            n,
            c: cout,
            h: (h - 1) * self.stride + k - 2 * self.pad,
            w: (w - 1) * self.stride + k - 2 * self.pad,
            k,
            stride: self.stride,
            pad: self.pad,
        };
        debug_assert_eq!(geom.out_h(), h);
        let g = x.graph();
        let wt = g.param(&self.weight).reshape(&[cin, cout * k * k]);
        let xf = x.permute(&[1, 0, 2, 3]).reshape(&[cin, n * h * w]);
        let cols = wt.matmul_t(&xf, true, false);
        let b = g.param(&self.bias).reshape(&[1, cout, 1, 1]);
        &cols.col2im(&geom) + &b
    }
}

impl Module for ConvTranspose2d {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
