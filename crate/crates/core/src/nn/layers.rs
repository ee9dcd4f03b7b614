//! Layer kinds with explicit forward and backward passes.
//!
//! Activations are laid out `[N, C, H, W]` for spatial layers and `[N, F]` for
//! dense ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tensor::{Param, Tensor};
use crate::{Error, Result};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Structural description of a layer; parameters are owned by [`Layer`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Zero-padded (`kernel / 2`) square convolution.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    /// Per-channel (4D input) or per-feature (2D input) batch normalization.
    BatchNorm { features: usize },
    Relu,
    Softplus,
    Dropout { rate: f64 },
    Dense { inputs: usize, outputs: usize },
    Flatten,
    /// Softmax over the last dimension of a 2D input.
    Softmax,
    /// Spatial mean, `[N, C, H, W] -> [N, C]`.
    GlobalAvgPool,
}

impl LayerKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if stride < 1 || kernel < 1 || in_channels < 1 || out_channels < 1 {
                    return Err(Error::param("conv2d", "sizes and stride must be >= 1"));
                }
            }
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::param("dropout", format!("rate {rate} outside [0, 1)")));
                }
            }
            LayerKind::BatchNorm { features } if features == 0 => {
                return Err(Error::param("batchnorm", "features must be >= 1"));
            }
            LayerKind::Dense { inputs, outputs } if inputs == 0 || outputs == 0 => {
                return Err(Error::param("dense", "sizes must be >= 1"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Shapes of the trainable parameters, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![vec![out_channels, in_channels, kernel, kernel]];
                if bias {
                    v.push(vec![out_channels]);
                }
                v
            }
            LayerKind::BatchNorm { features } => vec![vec![features], vec![features]],
            LayerKind::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            _ => vec![],
        }
    }

    /// Shapes of the non-trainable state buffers.
    pub fn buffer_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::BatchNorm { features } => vec![vec![features], vec![features]],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Conv {
        input_shape: Vec<usize>,
        cols: Vec<Vec<f64>>,
        out_hw: (usize, usize),
    },
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        shape: Vec<usize>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Relu {
        mask: Vec<bool>,
    },
    Softplus {
        input: Vec<f64>,
    },
    Dropout {
        scale: Vec<f64>,
    },
    Dense {
        input: Tensor,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Softmax {
        output: Tensor,
    },
}

/// A layer with its parameters, state buffers and forward cache.
#[derive(Debug, Clone)]
pub struct Layer {
    kind: LayerKind,
    params: Vec<Param>,
    buffers: Vec<Tensor>,
    cache: Option<Cache>,
}

fn shape_err(layer: usize, expected: impl Into<String>, got: &[usize]) -> Error {
    Error::Shape {
        layer,
        expected: expected.into(),
        got: got.to_vec(),
    }
}

#[inline]
fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (size + 2 * pad - kernel) / stride + 1
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Layer {
    /// Creates a layer with zero-filled parameters (call [`Layer::init`] next).
    pub fn new(kind: LayerKind) -> Result<Self> {
        kind.validate()?;
        let params = kind
            .param_shapes()
            .iter()
            .map(|s| Param::new(Tensor::zeros(s)))
            .collect();
        let mut buffers: Vec<Tensor> = kind.buffer_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        let mut layer = Self {
            kind,
            params,
            buffers: Vec::new(),
            cache: None,
        };
        if let LayerKind::BatchNorm { .. } = layer.kind {
            layer.params[0].value.fill(1.0);
            buffers[1].fill(1.0);
        }
        layer.buffers = buffers;
        Ok(layer)
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor] {
        &mut self.buffers
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// He-uniform weights, zero biases, unit/zero batchnorm affine.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = match self.kind {
            LayerKind::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerKind::Dense { inputs, .. } => inputs,
            _ => return,
        };
        let limit = (6.0 / fan_in as f64).sqrt();
        for v in self.params[0].value.data_mut() {
            *v = rng.gen_range(-limit..limit);
        }
        if let Some(b) = self.params.get_mut(1) {
            b.value.fill(0.0);
        }
    }

    /// Relu activation pattern from the last training forward, if any.
    pub(crate) fn relu_mask(&self) -> Option<&[bool]> {
        match &self.cache {
            Some(Cache::Relu { mask }) => Some(mask),
            _ => None,
        }
    }

    /// Training-mode forward: stores the backward cache and updates
    /// batchnorm running statistics.
    pub(crate) fn forward_train(&mut self, index: usize, x: &Tensor, dropout_seed: u64) -> Result<Tensor> {
        let (out, cache) = self.compute(index, x, Some(dropout_seed))?;
        if let Some(Cache::BatchNorm { mean, var, .. }) = &cache {
            let (rm, rv) = self.buffers.split_at_mut(1);
            for c in 0..mean.len() {
                let m = &mut rm[0].data_mut()[c];
                *m = (1.0 - BATCHNORM_MOMENTUM) * *m + BATCHNORM_MOMENTUM * mean[c];
                let v = &mut rv[0].data_mut()[c];
                *v = (1.0 - BATCHNORM_MOMENTUM) * *v + BATCHNORM_MOMENTUM * var[c];
            }
        }
        self.cache = cache;
        Ok(out)
    }

    /// Inference forward; leaves the layer untouched.
    pub(crate) fn forward_eval(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        Ok(self.compute(index, x, None)?.0)
    }

    fn compute(&self, index: usize, x: &Tensor, dropout_seed: Option<u64>) -> Result<(Tensor, Option<Cache>)> {
        let train = dropout_seed.is_some();
        let shape = x.shape().to_vec();
        match self.kind.clone() {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                bias,
            } => {
                if shape.len() != 4 || shape[1] != in_channels {
                    return Err(shape_err(index, format!("[N, {in_channels}, H, W]"), &shape));
                }
                let (n, h, w) = (shape[0], shape[2], shape[3]);
                if h + 2 * (kernel / 2) < kernel || w + 2 * (kernel / 2) < kernel {
                    return Err(shape_err(index, format!("spatial size >= {kernel}"), &shape));
                }
                let (oh, ow) = (conv_out(h, kernel, stride), conv_out(w, kernel, stride));
                let weight = self.params[0].value.data();
                let bias_v = bias.then(|| self.params[1].value.data());
                let rows = in_channels * kernel * kernel;
                let positions = oh * ow;
                let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let sample = x.row(s);
                        let cols = im2col(sample, in_channels, h, w, kernel, stride, oh, ow);
                        let mut out = vec![0.0; out_channels * positions];
                        for o in 0..out_channels {
                            let dst = &mut out[o * positions..(o + 1) * positions];
                            if let Some(b) = bias_v {
                                dst.iter_mut().for_each(|v| *v = b[o]);
                            }
                            for r in 0..rows {
                                let wv = weight[o * rows + r];
                                let src = &cols[r * positions..(r + 1) * positions];
                                for (d, c) in dst.iter_mut().zip(src) {
                                    *d += wv * c;
                                }
                            }
                        }
                        (cols, out)
                    })
                    .collect();
                let mut data = Vec::with_capacity(n * out_channels * positions);
                let mut cols_cache = Vec::with_capacity(n);
                for (cols, out) in per_sample {
                    data.extend_from_slice(&out);
                    cols_cache.push(cols);
                }
                let cache = train.then_some(Cache::Conv {
                    input_shape: shape,
                    cols: cols_cache,
                    out_hw: (oh, ow),
                });
                Ok((Tensor::new(vec![n, out_channels, oh, ow], data)?, cache))
            }
            LayerKind::BatchNorm { features } => {
                if !(shape.len() == 2 || shape.len() == 4) || shape[1] != features {
                    return Err(shape_err(index, format!("[N, {features}] or [N, {features}, H, W]"), &shape));
                }
                let inner: usize = shape[2..].iter().product();
                let n = shape[0];
                let count = (n * inner) as f64;
                let xd = x.data();
                let channel_iter = |c: usize| {
                    (0..n).flat_map(move |s| {
                        let base = (s * features + c) * inner;
                        base..base + inner
                    })
                };
                let (mean, var): (Vec<f64>, Vec<f64>) = if train {
                    (0..features)
                        .map(|c| {
                            let m = channel_iter(c).map(|i| xd[i]).sum::<f64>() / count;
                            let v = channel_iter(c).map(|i| (xd[i] - m).powi(2)).sum::<f64>() / count;
                            (m, v)
                        })
                        .unzip()
                } else {
                    (self.buffers[0].data().to_vec(), self.buffers[1].data().to_vec())
                };
                let gamma = self.params[0].value.data();
                let beta = self.params[1].value.data();
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
                let mut xhat = vec![0.0; xd.len()];
                let mut out = vec![0.0; xd.len()];
                for c in 0..features {
                    for i in channel_iter(c) {
                        xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                        out[i] = gamma[c] * xhat[i] + beta[c];
                    }
                }
                let cache = train.then(|| Cache::BatchNorm {
                    xhat,
                    inv_std,
                    shape: shape.clone(),
                    mean,
                    var,
                });
                Ok((Tensor::new(shape, out)?, cache))
            }
            LayerKind::Relu => {
                let out: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
                let cache = train.then(|| Cache::Relu {
                    mask: x.data().iter().map(|&v| v > 0.0).collect(),
                });
                Ok((Tensor::new(shape, out)?, cache))
            }
            LayerKind::Softplus => {
                let out = x.data().iter().map(|&v| softplus(v)).collect();
                let cache = train.then(|| Cache::Softplus {
                    input: x.data().to_vec(),
                });
                Ok((Tensor::new(shape, out)?, cache))
            }
            LayerKind::Dropout { rate } => match dropout_seed {
                Some(seed) if rate > 0.0 => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let keep = 1.0 - rate;
                    let scale: Vec<f64> = (0..x.len())
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let out = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
                    Ok((Tensor::new(shape, out)?, Some(Cache::Dropout { scale })))
                }
                Some(_) => Ok((
                    x.clone(),
                    Some(Cache::Dropout {
                        scale: vec![1.0; x.len()],
                    }),
                )),
                None => Ok((x.clone(), None)),
            },
            LayerKind::Dense { inputs, outputs } => {
                if shape.len() != 2 || shape[1] != inputs {
                    return Err(shape_err(index, format!("[N, {inputs}]"), &shape));
                }
                let n = shape[0];
                let w = self.params[0].value.data();
                let b = self.params[1].value.data();
                let mut out = vec![0.0; n * outputs];
                for s in 0..n {
                    let xr = x.row(s);
                    for o in 0..outputs {
                        let wr = &w[o * inputs..(o + 1) * inputs];
                        out[s * outputs + o] = b[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                let cache = train.then(|| Cache::Dense { input: x.clone() });
                Ok((Tensor::new(vec![n, outputs], out)?, cache))
            }
            LayerKind::Flatten => {
                if shape.is_empty() {
                    return Err(shape_err(index, "[N, ...]", &shape));
                }
                let n = shape[0];
                let rest: usize = shape[1..].iter().product();
                let cache = train.then(|| Cache::Reshape { shape: shape.clone() });
                Ok((x.clone().reshape(&[n, rest])?, cache))
            }
            LayerKind::Softmax => {
                if shape.len() != 2 {
                    return Err(shape_err(index, "[N, K]", &shape));
                }
                let k = shape[1];
                let mut out = vec![0.0; x.len()];
                for s in 0..shape[0] {
                    let xr = x.row(s);
                    let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let dst = &mut out[s * k..(s + 1) * k];
                    let mut z = 0.0;
                    for (d, v) in dst.iter_mut().zip(xr) {
                        *d = (v - max).exp();
                        z += *d;
                    }
                    dst.iter_mut().for_each(|d| *d /= z);
                }
                let out = Tensor::new(shape, out)?;
                let cache = train.then(|| Cache::Softmax { output: out.clone() });
                Ok((out, cache))
            }
            LayerKind::GlobalAvgPool => {
                if shape.len() != 4 {
                    return Err(shape_err(index, "[N, C, H, W]", &shape));
                }
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let out = x
                    .data()
                    .chunks_exact(hw)
                    .map(|ch| ch.iter().sum::<f64>() / hw as f64)
                    .collect();
                let cache = train.then(|| Cache::Reshape { shape: shape.clone() });
                Ok((Tensor::new(vec![n, c], out)?, cache))
            }
        }
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub(crate) fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardState)?;
        match (&self.kind, cache) {
            (
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    bias,
                },
                Cache::Conv {
                    input_shape,
                    cols,
                    out_hw,
                },
            ) => {
                let (in_channels, out_channels, kernel, stride) = (*in_channels, *out_channels, *kernel, *stride);
                let (n, h, w) = (input_shape[0], input_shape[2], input_shape[3]);
                let positions = out_hw.0 * out_hw.1;
                let rows = in_channels * kernel * kernel;
                let weight = self.params[0].value.data();
                let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let g = dy.row(s);
                        let c = &cols[s];
                        let mut dw = vec![0.0; out_channels * rows];
                        let mut db = vec![0.0; out_channels];
                        let mut dcols = vec![0.0; rows * positions];
                        for o in 0..out_channels {
                            let go = &g[o * positions..(o + 1) * positions];
                            db[o] = go.iter().sum();
                            for r in 0..rows {
                                let cr = &c[r * positions..(r + 1) * positions];
                                dw[o * rows + r] = go.iter().zip(cr).map(|(a, b)| a * b).sum();
                                let wv = weight[o * rows + r];
                                let dc = &mut dcols[r * positions..(r + 1) * positions];
                                for (d, gv) in dc.iter_mut().zip(go) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        let dx = col2im(&dcols, in_channels, h, w, kernel, stride, out_hw.0, out_hw.1);
                        (dw, db, dx)
                    })
                    .collect();
                let mut dx_all = Vec::with_capacity(n * in_channels * h * w);
                for (dw, db, dx) in per_sample {
                    for (acc, v) in self.params[0].grad.data_mut().iter_mut().zip(&dw) {
                        *acc += v;
                    }
                    if *bias {
                        for (acc, v) in self.params[1].grad.data_mut().iter_mut().zip(&db) {
                            *acc += v;
                        }
                    }
                    dx_all.extend_from_slice(&dx);
                }
                Tensor::new(input_shape.clone(), dx_all)
            }
            (LayerKind::BatchNorm { features }, Cache::BatchNorm { xhat, inv_std, shape, .. }) => {
                let features = *features;
                let inner: usize = shape[2..].iter().product();
                let n = shape[0];
                let m = (n * inner) as f64;
                let g = dy.data();
                let gamma = self.params[0].value.data().to_vec();
                let mut dx = vec![0.0; g.len()];
                for c in 0..features {
                    let idx = || {
                        (0..n).flat_map(move |s| {
                            let base = (s * features + c) * inner;
                            base..base + inner
                        })
                    };
                    let sum_dy: f64 = idx().map(|i| g[i]).sum();
                    let sum_dy_xhat: f64 = idx().map(|i| g[i] * xhat[i]).sum();
                    self.params[0].grad.data_mut()[c] += sum_dy_xhat;
                    self.params[1].grad.data_mut()[c] += sum_dy;
                    let k = gamma[c] * inv_std[c] / m;
                    for i in idx() {
                        dx[i] = k * (m * g[i] - sum_dy - xhat[i] * sum_dy_xhat);
                    }
                }
                Tensor::new(shape.clone(), dx)
            }
            (LayerKind::Relu, Cache::Relu { mask }) => {
                let dx = dy
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(g, &m)| if m { *g } else { 0.0 })
                    .collect();
                Tensor::new(dy.shape().to_vec(), dx)
            }
            (LayerKind::Softplus, Cache::Softplus { input }) => {
                let dx = dy.data().iter().zip(input).map(|(g, &x)| g * sigmoid(x)).collect();
                Tensor::new(dy.shape().to_vec(), dx)
            }
            (LayerKind::Dropout { .. }, Cache::Dropout { scale }) => {
                let dx = dy.data().iter().zip(scale).map(|(g, s)| g * s).collect();
                Tensor::new(dy.shape().to_vec(), dx)
            }
            (LayerKind::Dense { inputs, outputs }, Cache::Dense { input }) => {
                let (inputs, outputs) = (*inputs, *outputs);
                let n = input.batch();
                let w = self.params[0].value.data().to_vec();
                let mut dx = vec![0.0; n * inputs];
                for s in 0..n {
                    let xr = input.row(s);
                    let gr = dy.row(s);
                    for o in 0..outputs {
                        let go = gr[o];
                        if go == 0.0 {
                            continue;
                        }
                        self.params[1].grad.data_mut()[o] += go;
                        let dw = &mut self.params[0].grad.data_mut()[o * inputs..(o + 1) * inputs];
                        for (d, xv) in dw.iter_mut().zip(xr) {
                            *d += go * xv;
                        }
                        let wr = &w[o * inputs..(o + 1) * inputs];
                        for (d, wv) in dx[s * inputs..(s + 1) * inputs].iter_mut().zip(wr) {
                            *d += go * wv;
                        }
                    }
                }
                Tensor::new(vec![n, inputs], dx)
            }
            (LayerKind::Flatten, Cache::Reshape { shape }) => dy.clone().reshape(shape),
            (LayerKind::GlobalAvgPool, Cache::Reshape { shape }) => {
                let hw = shape[2] * shape[3];
                let mut dx = Vec::with_capacity(shape.iter().product());
                for g in dy.data() {
                    dx.extend(std::iter::repeat(g / hw as f64).take(hw));
                }
                Tensor::new(shape.clone(), dx)
            }
            (LayerKind::Softmax, Cache::Softmax { output }) => {
                let k = output.shape()[1];
                let mut dx = vec![0.0; output.len()];
                for s in 0..output.batch() {
                    let y = output.row(s);
                    let g = dy.row(s);
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dx[s * k + j] = y[j] * (g[j] - dot);
                    }
                }
                Tensor::new(output.shape().to_vec(), dx)
            }
            _ => Err(Error::NoForwardState),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let pad = kernel / 2;
    let positions = oh * ow;
    let mut cols = vec![0.0; channels * kernel * kernel * positions];
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let r = (c * kernel + ki) * kernel + kj;
                let dst = &mut cols[r * positions..(r + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = plane[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let pad = kernel / 2;
    let positions = oh * ow;
    let mut x = vec![0.0; channels * h * w];
    for c in 0..channels {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let r = (c * kernel + ki) * kernel + kj;
                let src = &cols[r * positions..(r + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[c * h * w + iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
