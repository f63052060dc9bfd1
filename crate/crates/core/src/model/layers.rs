//! Primitive differentiable layers with explicit forward and backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// 2-D convolution over a single `C×H×W` image, computed via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `out_channels × (in_channels·k·k)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn he<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride, padding);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("valid std");
        conv.weight.mapv_inplace(|_| normal.sample(rng));
        conv
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn im2col(&self, x: ArrayView3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        let (s, p) = (self.stride as isize, self.padding as isize);
        let data = cols.as_slice_mut().expect("standard layout");
        let npos = oh * ow;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut data[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
        let c = self.in_channels;
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let mut out = Array3::zeros((c, h, w));
        let npos = oh * ow;
        let data = cols.as_slice().expect("standard layout");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &data[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                out[[ci, iy as usize, ix as usize]] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the output and the im2col matrix of the input.
    pub fn forward(&self, x: ArrayView3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let cols = self.im2col(x);
        let mut out = Array2::zeros((self.out_channels, oh * ow));
        general_mat_mul(1.0, &self.weight, &cols, 0.0, &mut out);
        out += &self.bias.view().insert_axis(Axis(1));
        let out = out.into_shape_with_order((self.out_channels, oh, ow)).expect("conv output shape");
        (out, cols)
    }

    /// Gradient with respect to the input given the gradient at the output.
    pub fn backward_input(&self, grad_out: &Array3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
        let (oc, oh, ow) = grad_out.dim();
        let g = grad_out.view().into_shape_with_order((oc, oh * ow)).expect("contiguous grad");
        let mut gcols = Array2::zeros((self.weight.ncols(), oh * ow));
        general_mat_mul(1.0, &self.weight.t(), &g, 0.0, &mut gcols);
        self.col2im(&gcols, in_h, in_w)
    }

    /// Accumulates weight and bias gradients.
    pub fn accumulate_param_grads(&self, grad_out: &Array3<f64>, cols: &Array2<f64>, grads: &mut ParamGrad) {
        let (oc, oh, ow) = grad_out.dim();
        let g = grad_out.view().into_shape_with_order((oc, oh * ow)).expect("contiguous grad");
        general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut grads.weight);
        grads.bias += &g.sum_axis(Axis(1));
    }
}

/// Dense layer `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array2::zeros((outputs, inputs)), bias: Array1::zeros(outputs) }
    }

    pub fn random<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("valid std");
        let mut lin = Self::zeros(inputs, outputs);
        lin.weight.mapv_inplace(|_| normal.sample(rng));
        lin
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward_input(&self, grad_out: &Array1<f64>) -> Array1<f64> {
        self.weight.t().dot(grad_out)
    }

    pub fn accumulate_param_grads(&self, grad_out: &Array1<f64>, input: &Array1<f64>, grads: &mut ParamGrad) {
        let g = grad_out.view().insert_axis(Axis(1));
        let x = input.view().insert_axis(Axis(0));
        general_mat_mul(1.0, &g, &x, 1.0, &mut grads.weight);
        grads.bias += grad_out;
    }
}

/// Gradient buffer for one weight/bias pair.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ParamGrad {
    pub fn zeros_like(weight: &Array2<f64>, bias: &Array1<f64>) -> Self {
        Self { weight: Array2::zeros(weight.raw_dim()), bias: Array1::zeros(bias.raw_dim()) }
    }
}

/// Stabilized denominator for the epsilon rule: `z + eps·sign(z)`, with `sign(0) = 1`.
#[inline]
pub fn stabilize(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}
