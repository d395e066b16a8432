//! Forward numeric kernels and the matching vector-Jacobian products.
//!
//! Layouts are row-major. Convolution inputs are `[N, C, F, T]` (frequency by
//! time), kernels `[C_out, C_in, kh, kw]`. Convolution is correlation: the kernel
//! is not flipped.

use super::linalg::{gemm, Mat};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// How the time axis is padded by a convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TimePadding {
    /// Out-of-range time indices read zero.
    #[default]
    Zero,
    /// Out-of-range time indices wrap around the time extent.
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    /// (frequency, time)
    pub stride: (usize, usize),
    /// (frequency, time)
    pub padding: (usize, usize),
    pub time_padding: TimePadding,
}

impl ConvGeometry {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { stride, padding, time_padding: TimePadding::Zero }
    }

    pub fn with_time_padding(mut self, mode: TimePadding) -> Self {
        self.time_padding = mode;
        self
    }

    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn out_extent(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if stride == 0 || kernel > padded {
            None
        } else {
            Some((padded - kernel) / stride + 1)
        }
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::new((1, 1), (0, 0))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub f: usize,
    pub t: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub f_out: usize,
    pub t_out: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn new(input: &[usize], kernel: &[usize], geom: ConvGeometry) -> Result<Self> {
        let &[n, c_in, f, t] = input else {
            return dim_err(format!("conv2d input must be [N, C, F, T], got {input:?}"));
        };
        let &[c_out, kc_in, kh, kw] = kernel else {
            return dim_err(format!("conv2d kernel must be [C_out, C_in, kh, kw], got {kernel:?}"));
        };
        if kc_in != c_in {
            return dim_err(format!("conv2d input has {c_in} channels, kernel expects {kc_in}"));
        }
        if geom.stride.0 == 0 || geom.stride.1 == 0 {
            return Err(Error::Parameter("conv2d stride must be at least 1".into()));
        }
        let f_out = ConvGeometry::out_extent(f, kh, geom.stride.0, geom.padding.0);
        let t_out = ConvGeometry::out_extent(t, kw, geom.stride.1, geom.padding.1);
        match (f_out, t_out) {
            (Some(f_out), Some(t_out)) if t > 0 => Ok(Self { n, c_in, f, t, c_out, kh, kw, f_out, t_out, geom }),
            _ => dim_err(format!(
                "conv2d kernel {kh}x{kw} does not fit padded input {f}x{t} (padding {:?})",
                geom.padding
            )),
        }
    }

    fn ckk(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.f_out * self.t_out
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.f * self.t
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.positions()
    }

    /// Source time index for output column `to` and kernel tap `j`.
    #[inline]
    fn src_time(&self, to: usize, j: usize) -> Option<usize> {
        let raw = (to * self.geom.stride.1 + j) as isize - self.geom.padding.1 as isize;
        match self.geom.time_padding {
            TimePadding::Zero => (raw >= 0 && (raw as usize) < self.t).then_some(raw as usize),
            TimePadding::Circular => Some(raw.rem_euclid(self.t as isize) as usize),
        }
    }

    #[inline]
    fn src_freq(&self, fo: usize, i: usize) -> Option<usize> {
        let raw = (fo * self.geom.stride.0 + i) as isize - self.geom.padding.0 as isize;
        (raw >= 0 && (raw as usize) < self.f).then_some(raw as usize)
    }
}

fn im2col(x: &[f64], d: &ConvDims, col: &mut [f64]) {
    let p = d.positions();
    let time_map: Vec<Vec<Option<usize>>> =
        (0..d.kw).map(|j| (0..d.t_out).map(|to| d.src_time(to, j)).collect()).collect();
    for ci in 0..d.c_in {
        let plane = &x[ci * d.f * d.t..(ci + 1) * d.f * d.t];
        for i in 0..d.kh {
            for (j, tmap) in time_map.iter().enumerate() {
                let row = ((ci * d.kh + i) * d.kw + j) * p;
                for fo in 0..d.f_out {
                    let dst = &mut col[row + fo * d.t_out..row + (fo + 1) * d.t_out];
                    match d.src_freq(fo, i) {
                        None => dst.fill(0.0),
                        Some(fi) => {
                            let src = &plane[fi * d.t..(fi + 1) * d.t];
                            for (v, ti) in dst.iter_mut().zip(tmap) {
                                *v = ti.map_or(0.0, |ti| src[ti]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let p = d.positions();
    for ci in 0..d.c_in {
        let plane = &mut dx[ci * d.f * d.t..(ci + 1) * d.f * d.t];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = ((ci * d.kh + i) * d.kw + j) * p;
                for fo in 0..d.f_out {
                    let Some(fi) = d.src_freq(fo, i) else { continue };
                    let src = &col[row + fo * d.t_out..row + (fo + 1) * d.t_out];
                    for (to, &g) in src.iter().enumerate() {
                        if let Some(ti) = d.src_time(to, j) {
                            plane[fi * d.t + ti] += g;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
    let (p, ckk) = (d.positions(), d.ckk());
    let mut out = vec![0.0; d.n * d.out_len()];
    let mut col = vec![0.0; ckk * p];
    for n in 0..d.n {
        im2col(&x[n * d.in_len()..(n + 1) * d.in_len()], d, &mut col);
        let out_n = &mut out[n * d.out_len()..(n + 1) * d.out_len()];
        gemm(d.c_out, ckk, p, Mat::rm(w, ckk), Mat::rm(&col, p), 0.0, out_n);
        for (co, row) in out_n.chunks_exact_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(x: &[f64], w: &[f64], dy: &[f64], d: &ConvDims, need: (bool, bool, bool)) -> ConvGrads {
    let (p, ckk) = (d.positions(), d.ckk());
    let mut dx = need.0.then(|| vec![0.0; d.n * d.in_len()]);
    let mut dw = need.1.then(|| vec![0.0; d.c_out * ckk]);
    let mut db = need.2.then(|| vec![0.0; d.c_out]);
    let mut col = vec![0.0; ckk * p];
    for n in 0..d.n {
        let dy_n = &dy[n * d.out_len()..(n + 1) * d.out_len()];
        if let Some(db) = db.as_mut() {
            for (co, row) in dy_n.chunks_exact(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[n * d.in_len()..(n + 1) * d.in_len()], d, &mut col);
            gemm(d.c_out, p, ckk, Mat::rm(dy_n, p), Mat::tr(&col, p), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(ckk, d.c_out, p, Mat::tr(w, ckk), Mat::rm(dy_n, p), 0.0, &mut col);
            col2im(&col, d, &mut dx[n * d.in_len()..(n + 1) * d.in_len()]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Promotes a `[C, F, T]` input to `[1, C, F, T]`.
fn batched_shape(shape: &[usize]) -> Result<(Vec<usize>, bool)> {
    match shape.len() {
        3 => Ok((std::iter::once(1).chain(shape.iter().copied()).collect(), true)),
        4 => Ok((shape.to_vec(), false)),
        _ => dim_err(format!("conv2d input must be [C, F, T] or [N, C, F, T], got {shape:?}")),
    }
}

/// 2-D correlation with zero padding.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    conv2d_with(input, kernel, bias, ConvGeometry::new(stride, padding))
}

pub fn conv2d_with(input: &Tensor, kernel: &Tensor, bias: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (shape, unbatched) = batched_shape(input.shape())?;
    let d = ConvDims::new(&shape, kernel.shape(), geom)?;
    if bias.numel() != d.c_out {
        return dim_err(format!("conv2d bias has {} entries, expected {}", bias.numel(), d.c_out));
    }
    let out = conv2d_forward(input.data(), kernel.data(), bias.data(), &d);
    let out_shape = if unbatched { vec![d.c_out, d.f_out, d.t_out] } else { vec![d.n, d.c_out, d.f_out, d.t_out] };
    Tensor::new(out_shape, out)
}

/// Splits a trailing-axis layout into (rows, width).
pub(crate) fn rows_of(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.split_last() {
        Some((&w, rest)) => Ok((rest.iter().product(), w)),
        None => dim_err("tensor has no axes"),
    }
}

pub(crate) fn affine_forward(x: &[f64], w: &[f64], b: &[f64], rows: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d_out];
    for row in out.chunks_exact_mut(d_out) {
        row.copy_from_slice(b);
    }
    gemm(rows, d_in, d_out, Mat::rm(x, d_in), Mat::tr(w, d_in), 1.0, &mut out);
    out
}

pub(crate) fn check_affine(input: &[usize], weight: &[usize], bias: &[usize]) -> Result<(usize, usize, usize)> {
    let (rows, d_in) = rows_of(input)?;
    let &[d_out, w_in] = weight else {
        return dim_err(format!("affine weight must be [D_out, D_in], got {weight:?}"));
    };
    if w_in != d_in {
        return dim_err(format!("affine input trailing extent {d_in} != weight input extent {w_in}"));
    }
    if bias.iter().product::<usize>() != d_out {
        return dim_err(format!("affine bias shape {bias:?} does not match D_out {d_out}"));
    }
    Ok((rows, d_in, d_out))
}

/// `input · weightᵀ + bias` over the trailing axis.
pub fn affine(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, d_in, d_out) = check_affine(input.shape(), weight.shape(), bias.shape())?;
    let out = affine_forward(input.data(), weight.data(), bias.data(), rows, d_in, d_out);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank checked") = d_out;
    Tensor::new(shape, out)
}

pub(crate) fn softmax_rows(x: &[f64], width: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = ((v - max) / temperature).exp();
            total += *o;
        }
        dst.iter_mut().for_each(|o| *o /= total);
    }
    out
}

pub(crate) fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("softmax temperature must be positive, got {temperature}")))
    }
}

/// Softmax of `logits / temperature` along the trailing axis.
pub fn softmax_tempered(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    logits.check_finite("softmax logits")?;
    let (_, width) = rows_of(logits.shape())?;
    Tensor::new(logits.shape(), softmax_rows(logits.data(), width, temperature))
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel layout `[N, C, rest...]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BnDims {
    pub n: usize,
    pub c: usize,
    pub inner: usize,
}

impl BnDims {
    pub fn new(shape: &[usize], channels: usize) -> Result<Self> {
        if shape.len() < 2 || shape[1] != channels {
            return dim_err(format!("batch norm over {channels} channels got input {shape:?}"));
        }
        Ok(Self { n: shape[0], c: shape[1], inner: shape[2..].iter().product() })
    }

    fn count(&self) -> f64 {
        (self.n * self.inner) as f64
    }

    fn for_channel(&self, c: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.n).map(move |n| {
            let start = (n * self.c + c) * self.inner;
            start..start + self.inner
        })
    }
}

pub(crate) struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalizes with batch statistics (population variance).
pub(crate) fn bn_train_forward(x: &[f64], d: &BnDims, gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, BnSaved) {
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let (mut means, mut vars, mut inv_stds) = (vec![0.0; d.c], vec![0.0; d.c], vec![0.0; d.c]);
    for c in 0..d.c {
        let mean = d.for_channel(c).flat_map(|r| &x[r]).sum::<f64>() / d.count();
        let var = d.for_channel(c).flat_map(|r| &x[r]).map(|v| (v - mean).powi(2)).sum::<f64>() / d.count();
        let inv_std = 1.0 / (var + eps).sqrt();
        for r in d.for_channel(c) {
            for i in r {
                xhat[i] = (x[i] - mean) * inv_std;
                out[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
        means[c] = mean;
        vars[c] = var;
        inv_stds[c] = inv_std;
    }
    (out, BnSaved { xhat, inv_std: inv_stds, mean: means, var: vars })
}

pub(crate) fn bn_eval_forward(
    x: &[f64],
    d: &BnDims,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Vec<f64>, BnSaved) {
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    for c in 0..d.c {
        for r in d.for_channel(c) {
            for i in r {
                xhat[i] = (x[i] - mean[c]) * inv_std[c];
                out[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    (out, BnSaved { xhat, inv_std, mean: mean.to_vec(), var: var.to_vec() })
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn bn_backward(
    dy: &[f64],
    d: &BnDims,
    gamma: &[f64],
    saved: &BnSaved,
    mode: BatchNormMode,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; dy.len()];
    let (mut dgamma, mut dbeta) = (vec![0.0; d.c], vec![0.0; d.c]);
    for c in 0..d.c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for r in d.for_channel(c) {
            for i in r {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * saved.xhat[i];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * saved.inv_std[c];
        match mode {
            BatchNormMode::Eval => {
                for r in d.for_channel(c) {
                    for i in r {
                        dx[i] = scale * dy[i];
                    }
                }
            }
            BatchNormMode::Train => {
                let m = d.count();
                for r in d.for_channel(c) {
                    for i in r {
                        dx[i] = scale * (dy[i] - sum_dy / m - saved.xhat[i] * sum_dy_xhat / m);
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch normalization parameters and running statistics for `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([channels], 1.0).with_requires_grad(true),
            beta: Tensor::zeros([channels]).with_requires_grad(true),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], 1.0),
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Batch normalization over `[N, C, ...]`. Train mode normalizes with batch
/// statistics and folds them into the running statistics.
pub fn batch_norm(input: &Tensor, bn: &mut BatchNorm2d, mode: BatchNormMode) -> Result<Tensor> {
    let d = BnDims::new(input.shape(), bn.channels())?;
    let (out, saved) = match mode {
        BatchNormMode::Train => {
            if d.n < 2 {
                return Err(Error::DegenerateBatch("train-mode batch norm needs N >= 2".into()));
            }
            bn_train_forward(input.data(), &d, bn.gamma.data(), bn.beta.data(), bn.eps)
        }
        BatchNormMode::Eval => bn_eval_forward(
            input.data(),
            &d,
            bn.gamma.data(),
            bn.beta.data(),
            bn.running_mean.data(),
            bn.running_var.data(),
            bn.eps,
        ),
    };
    if mode == BatchNormMode::Train {
        bn.update_running(&saved.mean, &saved.var);
    }
    Tensor::new(input.shape(), out)
}
