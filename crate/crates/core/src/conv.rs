//! Convolution layers, leaky-rectifier activation and repeat upsampling,
//! each with an exact backward pass.
//!
//! The forward definition is cross-correlation with symmetric zero padding
//! of `(K - 1) / 2`, lowered to a matrix product over an im2col buffer.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Negative-side slope of the hidden-layer activation.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    weights: Tensor<T>,
    bias: Tensor<T>,
    stride: usize,
    padding: usize,
    has_activation: bool,
}

impl<T: Scalar> ConvLayer<T> {
    /// Builds a layer from `[Cout, Cin, K, K]` weights and `[Cout]` bias.
    pub fn new(
        weights: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        has_activation: bool,
    ) -> Result<Self> {
        let (cout, k) = match *weights.shape() {
            [cout, _, kh, kw] if kh == kw => (cout, kh),
            _ => {
                return Err(Error::Config(format!(
                    "conv weights must be [Cout, Cin, K, K], got {:?}",
                    weights.shape()
                )))
            }
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {k}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("stride must be 1 or 2, got {stride}")));
        }
        if bias.shape() != [cout] {
            return Err(Error::Config(format!(
                "bias must be [{cout}], got {:?}",
                bias.shape()
            )));
        }
        Ok(ConvLayer {
            weights,
            bias,
            stride,
            padding: (k - 1) / 2,
            has_activation,
        })
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    /// Mutable access to `(weights, bias)` for optimizer updates.
    pub fn params_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.weights, &mut self.bias)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn has_activation(&self) -> bool {
        self.has_activation
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Output spatial extents for an `h x w` input.
    pub fn output_extents(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel_size();
        let out = |n: usize| (n + 2 * self.padding - k) / self.stride + 1;
        (out(h), out(w))
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (c, h, w) = input.dims3()?;
        if c != self.in_channels() {
            return Err(Error::Config(format!(
                "layer expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        Ok((c, h, w))
    }
}

fn leaky<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::from_f64_lossy(LEAKY_SLOPE)
    }
}

struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new<T: Scalar>(layer: &ConvLayer<T>, c: usize, h: usize, w: usize) -> Self {
        let (out_h, out_w) = layer.output_extents(h, w);
        Geometry {
            channels: c,
            height: h,
            width: w,
            kernel: layer.kernel_size(),
            stride: layer.stride,
            padding: layer.padding,
            out_h,
            out_w,
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Visits every run of in-bounds taps as `(col, src, len)`: column
    /// buffer offsets `col..col + len` read input offsets `src, src + stride, ...`.
    /// Padding taps are skipped.
    fn for_each_span(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, pad) = (self.kernel, self.stride, self.padding);
        let p = self.positions();
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    // ox range with 0 <= ox * s + kj - pad < width
                    let lo = pad.saturating_sub(kj).div_ceil(s);
                    let hi = if self.width + pad > kj {
                        ((self.width + pad - kj - 1) / s + 1).min(self.out_w)
                    } else {
                        0
                    };
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.out_h {
                        let iy = oy * s + ki;
                        if iy < pad || iy - pad >= self.height {
                            continue;
                        }
                        let src = (c * self.height + iy - pad) * self.width + lo * s + kj - pad;
                        f(row * p + oy * self.out_w + lo, src, hi - lo);
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(input: &[T], g: &Geometry) -> Vec<T> {
    let mut cols = vec![T::zero(); g.rows() * g.positions()];
    let s = g.stride;
    g.for_each_span(|col, src, len| {
        let dst = &mut cols[col..col + len];
        if s == 1 {
            dst.copy_from_slice(&input[src..src + len]);
        } else {
            for (d, &x) in dst.iter_mut().zip(input[src..].iter().step_by(s)) {
                *d = x;
            }
        }
    });
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.channels * g.height * g.width];
    let s = g.stride;
    g.for_each_span(|col, src, len| {
        let from = &cols[col..col + len];
        for (o, &x) in out[src..].iter_mut().step_by(s).zip(from) {
            *o += x;
        }
    });
    out
}

/// Cross-correlates `input` (`[Cin, H, W]`) with the layer's filters, adds
/// the bias and applies the activation when the layer has one.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    let (c, h, w) = layer.check_input(input)?;
    let g = Geometry::new(layer, c, h, w);
    let cols = im2col(input.data(), &g);
    let cout = layer.out_channels();
    let p = g.positions();
    let rows = g.rows();

    let mut out = vec![T::zero(); cout * p];
    for (co, chunk) in out.chunks_mut(p).enumerate() {
        chunk.fill(layer.bias.data()[co]);
    }
    T::gemm(
        cout,
        rows,
        p,
        T::one(),
        layer.weights.data(),
        (rows as isize, 1),
        &cols,
        (p as isize, 1),
        T::one(),
        &mut out,
        (p as isize, 1),
    );
    if layer.has_activation {
        out.iter_mut().for_each(|x| *x = leaky(*x));
    }
    Tensor::from_vec(&[cout, g.out_h, g.out_w], out)
}

/// Gradients of a scalar loss with respect to one convolution's inputs.
#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward pass of [`conv2d_forward`]. Recomputes the forward output to
/// obtain the activation derivative.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let output = conv2d_forward(input, layer)?;
    conv2d_backward_with_output(input, &output, layer, grad_output)
}

/// Backward pass given the forward output already computed for `input`.
pub fn conv2d_backward_with_output<T: Scalar>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    layer: &ConvLayer<T>,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (c, h, w) = layer.check_input(input)?;
    let g = Geometry::new(layer, c, h, w);
    let cout = layer.out_channels();
    let expected = [cout, g.out_h, g.out_w];
    if grad_output.shape() != expected || output.shape() != expected {
        return Err(Error::Config(format!(
            "gradient shape {:?} does not match layer output {expected:?}",
            grad_output.shape()
        )));
    }
    let p = g.positions();
    let rows = g.rows();

    let mut grad_pre = grad_output.data().to_vec();
    if layer.has_activation {
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        grad_pre
            .iter_mut()
            .zip(output.data())
            .for_each(|(gr, &y)| {
                if y <= T::zero() {
                    *gr *= slope;
                }
            });
    }

    let grad_bias: Vec<T> = grad_pre
        .chunks(p)
        .map(|row| row.iter().fold(T::zero(), |a, &b| a + b))
        .collect();

    let cols = im2col(input.data(), &g);
    let mut grad_w = vec![T::zero(); cout * rows];
    // grad_pre (Cout x P) . cols^T (P x rows)
    T::gemm(
        cout,
        p,
        rows,
        T::one(),
        &grad_pre,
        (p as isize, 1),
        &cols,
        (1, p as isize),
        T::zero(),
        &mut grad_w,
        (rows as isize, 1),
    );

    let mut grad_cols = vec![T::zero(); rows * p];
    // W^T (rows x Cout) . grad_pre (Cout x P)
    T::gemm(
        rows,
        cout,
        p,
        T::one(),
        layer.weights.data(),
        (1, rows as isize),
        &grad_pre,
        (p as isize, 1),
        T::zero(),
        &mut grad_cols,
        (p as isize, 1),
    );
    let grad_in = col2im(&grad_cols, &g);

    Ok(ConvGrads {
        input: Tensor::from_vec(&[c, h, w], grad_in)?,
        weights: Tensor::from_vec(layer.weights.shape(), grad_w)?,
        bias: Tensor::from_vec(&[cout], grad_bias)?,
    })
}

/// Nearest-neighbour upsampling by repeating every row and column
/// `factor` times: `out(c, i, j) = in(c, i / factor, j / factor)`.
pub fn upsample_repeat<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::Config("upsampling factor must be >= 1".into()));
    }
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = (h * factor, w * factor);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            let row = &src[(ch * h + i / factor) * w..][..w];
            for j in 0..ow {
                out.push(row[j / factor]);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Adjoint of [`upsample_repeat`]: sums each `factor x factor` block.
pub fn upsample_repeat_backward<T: Scalar>(
    grad_output: &Tensor<T>,
    factor: usize,
) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::Config("upsampling factor must be >= 1".into()));
    }
    let (c, oh, ow) = grad_output.dims3()?;
    if oh % factor != 0 || ow % factor != 0 {
        return Err(Error::Shape(format!(
            "gradient extents {oh}x{ow} not divisible by factor {factor}"
        )));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![T::zero(); c * h * w];
    for (idx, &g) in grad_output.data().iter().enumerate() {
        let ch = idx / (oh * ow);
        let i = (idx / ow) % oh;
        let j = idx % ow;
        out[(ch * h + i / factor) * w + j / factor] += g;
    }
    Tensor::from_vec(&[c, h, w], out)
}
