//! Differentiable operations on [`Var`].

use super::autograd::{BackwardCtx, Var};
use super::kernels::{self, ConvGeom, UpGeom};
use super::{image_shape, Tensor};
use crate::error::{Error, Result};

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(op))
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel produced a buffer matching its shape")
}

/// Same-size zero-padded 2-D cross-correlation with stride 1.
///
/// `kernel` is `[C_out, C_in, kh, kw]` with odd `kh` and `kw`; `bias` is `[C_out]`.
pub fn conv2d(input: &Var, kernel: &Var, bias: &Var) -> Result<Var> {
    let (n, c_in, h, w) = input.value().dims4()?;
    let &[c_out, kc_in, kh, kw] = kernel.shape() else {
        return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {:?}", kernel.shape())));
    };
    if kc_in != c_in {
        return Err(Error::shape("conv2d", format!("input has {c_in} channels, kernel expects {kc_in}")));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidArgument(format!("conv2d kernel dims must be odd, got {kh}x{kw}")));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} output channels", bias.shape())));
    }
    let g = ConvGeom { n, c_in, c_out, h, w, kh, kw };
    let out = kernels::conv2d_forward(input.value().data(), kernel.value().data(), bias.value().data(), g);
    let out = finite("conv2d", tensor(image_shape(input.shape(), n, c_out, h, w), out))?;
    Ok(Var::from_op(
        "conv2d",
        out,
        vec![input.clone(), kernel.clone(), bias.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let (x, k) = (ctx.inputs[0], ctx.inputs[1]);
            let gx = ctx.needs[0]
                .then(|| tensor(x.shape().to_vec(), kernels::conv2d_backward_input(ctx.grad_out.data(), k.data(), g)));
            let (gk, gb) = if ctx.needs[1] || ctx.needs[2] {
                let (gk, gb) = kernels::conv2d_backward_params(ctx.grad_out.data(), x.data(), g);
                (Some(tensor(k.shape().to_vec(), gk)), Some(tensor(vec![g.c_out], gb)))
            } else {
                (None, None)
            };
            vec![gx, gk, gb]
        }),
    ))
}

/// Non-overlapping 2x2 max pooling; the gradient flows to the arg-max.
pub fn maxpool2(input: &Var) -> Result<Var> {
    let (n, c, h, w) = input.value().dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2", format!("spatial dims must be even, got {h}x{w}")));
    }
    let (out, argmax) = kernels::maxpool2_forward(input.value().data(), n * c, h, w);
    let out = tensor(image_shape(input.shape(), n, c, h / 2, w / 2), out);
    Ok(Var::from_op(
        "maxpool2",
        out,
        vec![input.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let mut gx = vec![0.0; ctx.inputs[0].numel()];
            for (&src, &g) in argmax.iter().zip(ctx.grad_out.data()) {
                gx[src] += g;
            }
            vec![Some(tensor(ctx.inputs[0].shape().to_vec(), gx))]
        }),
    ))
}

/// Stride-2, unpadded transposed convolution with a `[C_in, C_out, 2, 2]`
/// kernel: exactly doubles both spatial dims.
pub fn transposed_conv2(input: &Var, kernel: &Var, bias: &Var) -> Result<Var> {
    let (n, c_in, h, w) = input.value().dims4()?;
    let &[kc_in, c_out, 2, 2] = kernel.shape() else {
        return Err(Error::shape(
            "transposed_conv2",
            format!("kernel must be [C_in, C_out, 2, 2], got {:?}", kernel.shape()),
        ));
    };
    if kc_in != c_in {
        return Err(Error::shape("transposed_conv2", format!("input has {c_in} channels, kernel expects {kc_in}")));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape("transposed_conv2", format!("bias {:?} for {c_out} channels", bias.shape())));
    }
    let g = UpGeom { n, c_in, c_out, h, w };
    let out = kernels::tconv2_forward(input.value().data(), kernel.value().data(), bias.value().data(), g);
    let out = finite("transposed_conv2", tensor(image_shape(input.shape(), n, c_out, 2 * h, 2 * w), out))?;
    Ok(Var::from_op(
        "transposed_conv2",
        out,
        vec![input.clone(), kernel.clone(), bias.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let (x, k) = (ctx.inputs[0], ctx.inputs[1]);
            let gx = ctx.needs[0]
                .then(|| tensor(x.shape().to_vec(), kernels::tconv2_backward_input(ctx.grad_out.data(), k.data(), g)));
            let (gk, gb) = if ctx.needs[1] || ctx.needs[2] {
                let (gk, gb) = kernels::tconv2_backward_params(ctx.grad_out.data(), x.data(), g);
                (Some(tensor(k.shape().to_vec(), gk)), Some(tensor(vec![g.c_out], gb)))
            } else {
                (None, None)
            };
            vec![gx, gk, gb]
        }),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Infer,
}

/// Per-channel running mean/variance for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub const MOMENTUM: f64 = 0.9;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], momentum: Self::MOMENTUM, eps: Self::EPS }
    }

    fn update(&mut self, batch_mean: &[f64], batch_var_unbiased: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var_unbiased) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Batch normalization over the batch and spatial axes of each channel.
pub fn batchnorm(input: &Var, gamma: &Var, beta: &Var, stats: &mut RunningStats, mode: BatchNormMode) -> Result<Var> {
    let (n, c, h, w) = input.value().dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::shape("batchnorm", format!("parameters do not match {c} channels")));
    }
    if stats.eps <= 0.0 {
        return Err(Error::InvalidArgument("batchnorm epsilon must be positive".into()));
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    let x = input.value().data();
    let channel = move |ci: usize| (0..n).flat_map(move |b| (b * c + ci) * plane..(b * c + ci + 1) * plane);

    let (mean, var) = match mode {
        BatchNormMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                mean[ci] = channel(ci).map(|i| x[i]).sum::<f64>() / count;
                var[ci] = channel(ci).map(|i| (x[i] - mean[ci]).powi(2)).sum::<f64>() / count;
            }
            let unbiased: Vec<f64> =
                var.iter().map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v }).collect();
            stats.update(&mean, &unbiased);
            (mean, var)
        }
        BatchNormMode::Infer => (stats.mean.clone(), stats.var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();

    let (g, b) = (gamma.value().data(), beta.value().data());
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for i in channel(ci) {
            xhat[i] = (x[i] - mean[ci]) * inv_std[ci];
            out[i] = g[ci] * xhat[i] + b[ci];
        }
    }
    let out = finite("batchnorm", tensor(input.shape().to_vec(), out))?;
    Ok(Var::from_op(
        "batchnorm",
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let gy = ctx.grad_out.data();
            let gamma = ctx.inputs[1].data();
            let mut gx = vec![0.0; gy.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ci in 0..c {
                let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                for i in channel(ci) {
                    sum_g += gy[i];
                    sum_gx += gy[i] * xhat[i];
                }
                gbeta[ci] = sum_g;
                ggamma[ci] = sum_gx;
                let scale = gamma[ci] * inv_std[ci];
                match mode {
                    BatchNormMode::Train => {
                        for i in channel(ci) {
                            gx[i] = scale * (gy[i] - sum_g / count - xhat[i] * sum_gx / count);
                        }
                    }
                    BatchNormMode::Infer => {
                        for i in channel(ci) {
                            gx[i] = scale * gy[i];
                        }
                    }
                }
            }
            vec![
                Some(tensor(ctx.inputs[0].shape().to_vec(), gx)),
                Some(tensor(vec![c], ggamma)),
                Some(tensor(vec![c], gbeta)),
            ]
        }),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Log1p,
}

impl Elementwise {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Elementwise::Relu => v.max(0.0),
            Elementwise::LeakyRelu(a) => {
                if v > 0.0 {
                    v
                } else {
                    a * v
                }
            }
            Elementwise::Sigmoid => {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            }
            Elementwise::Log1p => v.ln_1p(),
        }
    }

    /// Local derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Elementwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Elementwise::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Elementwise::Sigmoid => y * (1.0 - y),
            Elementwise::Log1p => 1.0 / (1.0 + x),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Elementwise::Relu => "relu",
            Elementwise::LeakyRelu(_) => "leaky_relu",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Log1p => "log1p",
        }
    }
}

pub fn elementwise(input: &Var, f: Elementwise) -> Result<Var> {
    let data = input.value().data().iter().map(|&v| f.apply(v)).collect();
    let out = finite(f.name(), tensor(input.shape().to_vec(), data))?;
    Ok(Var::from_op(
        f.name(),
        out,
        vec![input.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let gx = ctx
                .grad_out
                .data()
                .iter()
                .zip(ctx.inputs[0].data())
                .zip(ctx.output.data())
                .map(|((g, &x), &y)| g * f.derivative(x, y))
                .collect();
            vec![Some(tensor(ctx.inputs[0].shape().to_vec(), gx))]
        }),
    ))
}

pub fn relu(input: &Var) -> Result<Var> {
    elementwise(input, Elementwise::Relu)
}

pub fn leaky_relu(input: &Var, alpha: f64) -> Result<Var> {
    elementwise(input, Elementwise::LeakyRelu(alpha))
}

pub fn sigmoid(input: &Var) -> Result<Var> {
    elementwise(input, Elementwise::Sigmoid)
}

pub fn log1p(input: &Var) -> Result<Var> {
    elementwise(input, Elementwise::Log1p)
}

/// Concatenates along the channel axis in argument order.
pub fn concat_channels(inputs: &[&Var]) -> Result<Var> {
    let first = inputs.first().ok_or(Error::Empty("concat_channels inputs"))?;
    let (n, _, h, w) = first.value().dims4()?;
    let rank = first.shape().len();
    let mut channels = Vec::with_capacity(inputs.len());
    for v in inputs {
        let (vn, vc, vh, vw) = v.value().dims4()?;
        if (vn, vh, vw) != (n, h, w) || v.shape().len() != rank {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} does not match {:?} outside the channel axis", v.shape(), first.shape()),
            ));
        }
        channels.push(vc);
    }
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (v, &c) in inputs.iter().zip(&channels) {
            out.extend_from_slice(&v.value().data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    let out = tensor(image_shape(first.shape(), n, total, h, w), out);
    Ok(Var::from_op(
        "concat_channels",
        out,
        inputs.iter().map(|&v| v.clone()).collect(),
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let g = ctx.grad_out.data();
            let mut grads: Vec<Vec<f64>> = channels.iter().map(|c| Vec::with_capacity(n * c * plane)).collect();
            for b in 0..n {
                let mut offset = b * total * plane;
                for (buf, &c) in grads.iter_mut().zip(&channels) {
                    buf.extend_from_slice(&g[offset..offset + c * plane]);
                    offset += c * plane;
                }
            }
            grads.into_iter().zip(&ctx.inputs).map(|(buf, x)| Some(tensor(x.shape().to_vec(), buf))).collect()
        }),
    ))
}

/// Channels `start..start + len` of an image tensor.
pub fn slice_channels(input: &Var, start: usize, len: usize) -> Result<Var> {
    let (n, c, h, w) = input.value().dims4()?;
    if len == 0 || start + len > c {
        return Err(Error::shape("slice_channels", format!("{start}..{} out of {c} channels", start + len)));
    }
    let plane = h * w;
    let x = input.value().data();
    let mut out = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        out.extend_from_slice(&x[(b * c + start) * plane..(b * c + start + len) * plane]);
    }
    let out = tensor(image_shape(input.shape(), n, len, h, w), out);
    Ok(Var::from_op(
        "slice_channels",
        out,
        vec![input.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let mut gx = vec![0.0; n * c * plane];
            let g = ctx.grad_out.data();
            for b in 0..n {
                gx[(b * c + start) * plane..(b * c + start + len) * plane]
                    .copy_from_slice(&g[b * len * plane..(b + 1) * len * plane]);
            }
            vec![Some(tensor(ctx.inputs[0].shape().to_vec(), gx))]
        }),
    ))
}

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn binary(
    op: &'static str,
    a: &Var,
    b: &Var,
    f: fn(f64, f64) -> f64,
    grads: fn(f64, f64, f64) -> (f64, f64),
) -> Result<Var> {
    same_shape(op, a, b)?;
    let data = a.value().data().iter().zip(b.value().data()).map(|(&x, &y)| f(x, y)).collect();
    let out = finite(op, tensor(a.shape().to_vec(), data))?;
    Ok(Var::from_op(
        op,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut ga = Vec::with_capacity(x.len());
            let mut gb = Vec::with_capacity(x.len());
            for ((&g, &xi), &yi) in ctx.grad_out.data().iter().zip(x).zip(y) {
                let (da, db) = grads(g, xi, yi);
                ga.push(da);
                gb.push(db);
            }
            let shape = ctx.inputs[0].shape().to_vec();
            vec![Some(tensor(shape.clone(), ga)), Some(tensor(shape, gb))]
        }),
    ))
}

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    binary("add", a, b, |x, y| x + y, |g, _, _| (g, g))
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    binary("sub", a, b, |x, y| x - y, |g, _, _| (g, -g))
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    binary("mul", a, b, |x, y| x * y, |g, x, y| (g * y, g * x))
}

pub fn scale(a: &Var, factor: f64) -> Result<Var> {
    let data = a.value().data().iter().map(|v| v * factor).collect();
    let out = finite("scale", tensor(a.shape().to_vec(), data))?;
    Ok(Var::from_op(
        "scale",
        out,
        vec![a.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let g = ctx.grad_out.data().iter().map(|g| g * factor).collect();
            vec![Some(tensor(ctx.inputs[0].shape().to_vec(), g))]
        }),
    ))
}

pub fn square(a: &Var) -> Result<Var> {
    let data = a.value().data().iter().map(|v| v * v).collect();
    let out = finite("square", tensor(a.shape().to_vec(), data))?;
    Ok(Var::from_op(
        "square",
        out,
        vec![a.clone()],
        Box::new(|ctx: &BackwardCtx<'_>| {
            let g = ctx.grad_out.data().iter().zip(ctx.inputs[0].data()).map(|(g, x)| 2.0 * g * x).collect();
            vec![Some(tensor(ctx.inputs[0].shape().to_vec(), g))]
        }),
    ))
}

pub fn sum(a: &Var) -> Result<Var> {
    let out = finite("sum", Tensor::scalar(a.value().data().iter().sum()))?;
    Ok(Var::from_op(
        "sum",
        out,
        vec![a.clone()],
        Box::new(|ctx: &BackwardCtx<'_>| vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), ctx.grad_out.item()))]),
    ))
}

pub fn mean(a: &Var) -> Result<Var> {
    let n = a.value().numel() as f64;
    scale(&sum(a)?, 1.0 / n)
}
