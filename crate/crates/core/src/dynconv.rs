//! Temporal dynamic convolution.
//!
//! A layer owns `K` basis kernels `W_k` with biases `b_k` and a two-layer
//! attention network. For every output time bin `t` the attention network maps
//! the corresponding input column (flattened over channel and frequency) to
//! softmax weights `π_k(t)`. The output is
//!
//! ```text
//! y_k = W_k ⋆ x + b_k
//! y(f, t) = relu( Σ_k π_k(t) · y_k(f, t) )
//! ```
//!
//! which equals convolving each time bin with its own aggregated kernel
//! `Σ_k π_k(t) W_k` (see [`adaptive_kernel_oracle`]), but needs only one
//! stacked convolution for all `K` kernels.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::ops::ConvGeometry;
use crate::tensor::{Backward, BackwardCtx};
use crate::tensor::{Tape, Tensor, Var};

pub const MAX_TEMPERATURE: f64 = 31.0;
pub const MIN_TEMPERATURE: f64 = 1.0;

/// Where attention inputs come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionScope {
    /// One weight vector per output time bin (TDY).
    Frame,
    /// One weight vector per utterance from the time-averaged input (DY).
    Utterance,
}

/// `π_k(t)` for one utterance and one layer, stored `[K, T']`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Tensor,
    pub layer_id: usize,
    pub temperature: f64,
}

impl AttentionMap {
    pub fn k(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn time_bins(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Attention vector of one time bin.
    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.k()).map(|k| self.weights.at(&[k, t])).collect()
    }
}

/// Hidden width of the attention network: one eighth of its input, at least 1.
pub fn attention_hidden(input: usize) -> usize {
    (input / 8).max(1)
}

/// Basis kernels, biases, attention network and softmax temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct TdyConvLayer {
    pub name: String,
    pub layer_id: usize,
    /// `[K, C_out, C_in, kh, kw]`
    pub basis_kernels: Tensor,
    /// `[K, C_out]`
    pub basis_biases: Tensor,
    /// `[H, C_in·F_in]`
    pub attn_w1: Tensor,
    pub attn_b1: Tensor,
    /// `[K, H]`
    pub attn_w2: Tensor,
    pub attn_b2: Tensor,
    pub geom: ConvGeometry,
    in_freq: usize,
    temperature: f64,
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng).with_requires_grad(true)
}

fn bias_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng).with_requires_grad(true)
}

impl TdyConvLayer {
    /// Randomly initialized layer for inputs with `in_freq` frequency rows.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        in_freq: usize,
        k: usize,
        geom: ConvGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || c_in == 0 || c_out == 0 || in_freq == 0 {
            return Err(Error::Parameter("dynamic conv extents must be positive".into()));
        }
        let fan_in = c_in * kernel.0 * kernel.1;
        let flat = c_in * in_freq;
        let hidden = attention_hidden(flat);
        Ok(Self {
            name: name.into(),
            layer_id: 0,
            basis_kernels: he_uniform(&[k, c_out, c_in, kernel.0, kernel.1], fan_in, rng),
            basis_biases: bias_uniform(&[k, c_out], fan_in, rng),
            attn_w1: he_uniform(&[hidden, flat], flat, rng),
            attn_b1: bias_uniform(&[hidden], flat, rng),
            attn_w2: he_uniform(&[k, hidden], hidden, rng),
            attn_b2: bias_uniform(&[k], hidden, rng),
            geom,
            in_freq,
            temperature: MAX_TEMPERATURE,
        })
    }

    pub fn k(&self) -> usize {
        self.basis_kernels.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.basis_kernels.shape()[1]
    }

    pub fn c_in(&self) -> usize {
        self.basis_kernels.shape()[2]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.basis_kernels.shape()[3], self.basis_kernels.shape()[4])
    }

    pub fn in_freq(&self) -> usize {
        self.in_freq
    }

    pub fn hidden(&self) -> usize {
        self.attn_w1.shape()[0]
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        if !(MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&temperature) {
            return Err(Error::Parameter(format!(
                "temperature {temperature} outside [{MIN_TEMPERATURE}, {MAX_TEMPERATURE}]"
            )));
        }
        self.temperature = temperature;
        Ok(())
    }

    /// Output extents `(F', T')` for an input with `t` time bins.
    pub fn out_extent(&self, t: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel_size();
        Some((
            ConvGeometry::out_extent(self.in_freq, kh, self.geom.stride.0, self.geom.padding.0)?,
            ConvGeometry::out_extent(t, kw, self.geom.stride.1, self.geom.padding.1)?,
        ))
    }

    /// `(name, tensor)` for every trainable tensor.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{}.basis_kernels", self.name), &self.basis_kernels),
            (format!("{}.basis_biases", self.name), &self.basis_biases),
            (format!("{}.attn_w1", self.name), &self.attn_w1),
            (format!("{}.attn_b1", self.name), &self.attn_b1),
            (format!("{}.attn_w2", self.name), &self.attn_w2),
            (format!("{}.attn_b2", self.name), &self.attn_b2),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let n = &self.name;
        vec![
            (format!("{n}.basis_kernels"), &mut self.basis_kernels),
            (format!("{n}.basis_biases"), &mut self.basis_biases),
            (format!("{n}.attn_w1"), &mut self.attn_w1),
            (format!("{n}.attn_b1"), &mut self.attn_b1),
            (format!("{n}.attn_w2"), &mut self.attn_w2),
            (format!("{n}.attn_b2"), &mut self.attn_b2),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Input time index feeding the attention of each output bin: the window
    /// center, clamped to the valid range.
    pub fn attention_columns(&self, t_in: usize, t_out: usize) -> Vec<usize> {
        let (_, kw) = self.kernel_size();
        (0..t_out)
            .map(|t| {
                let center = (t * self.geom.stride.1 + kw / 2) as isize - self.geom.padding.1 as isize;
                center.clamp(0, t_in as isize - 1) as usize
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let &[n, c, f, t] = shape else {
            return dim_err(format!("dynamic conv input must be [N, C, F, T], got {shape:?}"));
        };
        if c != self.c_in() || f != self.in_freq {
            return dim_err(format!(
                "layer {} expects {} channels x {} frequency rows, got {c} x {f}",
                self.name,
                self.c_in(),
                self.in_freq
            ));
        }
        Ok((n, t))
    }

    /// Records the attention network; returns `π` as `[N, T_att, K]`.
    pub fn attention_tape(&self, tape: &mut Tape, x: Var, t_out: usize, scope: AttentionScope) -> Result<Var> {
        let (_, t) = self.check_input(tape.value(x).shape())?;
        let flat = match scope {
            AttentionScope::Frame => {
                let cols = self.attention_columns(t, t_out);
                gather_columns(tape, x, cols)?
            }
            AttentionScope::Utterance => time_mean_flat(tape, x)?,
        };
        let w1 = tape.param(&format!("{}.attn_w1", self.name), &self.attn_w1);
        let b1 = tape.param(&format!("{}.attn_b1", self.name), &self.attn_b1);
        let w2 = tape.param(&format!("{}.attn_w2", self.name), &self.attn_w2);
        let b2 = tape.param(&format!("{}.attn_b2", self.name), &self.attn_b2);
        let h = tape.affine(flat, w1, b1)?;
        let h = tape.relu(h);
        let logits = tape.affine(h, w2, b2)?;
        tape.softmax_tempered(logits, self.temperature)
    }

    /// Records the full layer on `[N, C_in, F, T]`. Returns the output
    /// `[N, C_out, F', T']` and the attention weights `[N, T_att, K]`.
    /// `activation` applies the trailing relu.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, scope: AttentionScope, activation: bool) -> Result<(Var, Var)> {
        self.check_input(tape.value(x).shape())?;
        let (k, c_out, c_in) = (self.k(), self.c_out(), self.c_in());
        let (kh, kw) = self.kernel_size();
        let kernels = tape.param(&format!("{}.basis_kernels", self.name), &self.basis_kernels);
        let biases = tape.param(&format!("{}.basis_biases", self.name), &self.basis_biases);
        let stacked_k = tape.reshape(kernels, &[k * c_out, c_in, kh, kw])?;
        let stacked_b = tape.reshape(biases, &[k * c_out])?;
        let branches = tape.conv2d(x, stacked_k, stacked_b, self.geom)?;
        let t_out = tape.value(branches).shape()[3];
        let pi = self.attention_tape(tape, x, t_out, scope)?;
        let mixed = temporal_mix(tape, branches, pi, k)?;
        let out = if activation { tape.relu(mixed) } else { mixed };
        Ok((out, pi))
    }

    fn unbatched(x: &Tensor) -> Result<Tensor> {
        match x.shape() {
            &[c, f, t] => x.reshape([1, c, f, t]),
            s => dim_err(format!("expected a single [C, F, T] input, got {s:?}")),
        }
    }

    fn attention_map(&self, tape: &Tape, pi: Var, t_out: usize) -> Result<AttentionMap> {
        let p = tape.value(pi);
        let (t_att, k) = (p.shape()[1], p.shape()[2]);
        let mut w = Tensor::zeros([k, t_out]);
        for t in 0..t_out {
            let src = if t_att == 1 { 0 } else { t };
            for kk in 0..k {
                w.set(&[kk, t], p.at(&[0, src, kk]));
            }
        }
        Ok(AttentionMap { weights: w, layer_id: self.layer_id, temperature: self.temperature })
    }

    fn single_forward(&self, x: &Tensor, scope: AttentionScope) -> Result<(Tensor, AttentionMap)> {
        let mut tape = Tape::inference();
        let xv = tape.constant(Self::unbatched(x)?);
        let (out, pi) = self.forward_tape(&mut tape, xv, scope, true)?;
        let value = tape.value(out);
        let s = value.shape();
        let map = self.attention_map(&tape, pi, s[3])?;
        Ok((value.reshape([s[1], s[2], s[3]])?, map))
    }
}

/// Per-bin attention weights of `layer` for one `[C_in, F, T]` input.
pub fn attention_weights(x: &Tensor, layer: &TdyConvLayer) -> Result<AttentionMap> {
    let xb = TdyConvLayer::unbatched(x)?;
    let (_, t) = layer.check_input(xb.shape())?;
    let (_, t_out) = layer
        .out_extent(t)
        .ok_or_else(|| Error::Dimension(format!("kernel of {} does not fit {t} time bins", layer.name)))?;
    let mut tape = Tape::inference();
    let xv = tape.constant(xb);
    let pi = layer.attention_tape(&mut tape, xv, t_out, AttentionScope::Frame)?;
    layer.attention_map(&tape, pi, t_out)
}

/// Frame-level dynamic convolution with trailing relu.
pub fn tdy_conv_forward(x: &Tensor, layer: &TdyConvLayer) -> Result<(Tensor, AttentionMap)> {
    layer.single_forward(x, AttentionScope::Frame)
}

/// Utterance-level dynamic convolution: one weight vector for all time bins.
pub fn dy_conv_forward(x: &Tensor, layer: &TdyConvLayer) -> Result<(Tensor, AttentionMap)> {
    layer.single_forward(x, AttentionScope::Utterance)
}

/// Convolves every output time bin separately with its aggregated kernel
/// `Σ_k π_k(t) W_k` and bias `Σ_k π_k(t) b_k`, then applies relu.
pub fn adaptive_kernel_oracle(x: &Tensor, layer: &TdyConvLayer, attn: &AttentionMap) -> Result<Tensor> {
    let &[c_in, f, t] = x.shape() else {
        return dim_err(format!("expected a single [C, F, T] input, got {:?}", x.shape()));
    };
    if c_in != layer.c_in() || f != layer.in_freq() {
        return dim_err(format!("layer {} does not accept input {:?}", layer.name, x.shape()));
    }
    let (f_out, t_out) = layer.out_extent(t).ok_or_else(|| Error::Dimension("kernel does not fit input".into()))?;
    if attn.k() != layer.k() || attn.time_bins() != t_out {
        return dim_err(format!(
            "attention map [{}, {}] does not match layer output ({} kernels, {t_out} bins)",
            attn.k(),
            attn.time_bins(),
            layer.k()
        ));
    }
    let (k, c_out) = (layer.k(), layer.c_out());
    let (kh, kw) = layer.kernel_size();
    let per_kernel = c_out * c_in * kh * kw;
    let geom = layer.geom;
    let kernels = layer.basis_kernels.data();
    let biases = layer.basis_biases.data();
    let xd = x.data();
    let mut out = vec![0.0; c_out * f_out * t_out];
    let mut kernel = vec![0.0; per_kernel];
    let mut bias = vec![0.0; c_out];
    for to in 0..t_out {
        kernel.fill(0.0);
        bias.fill(0.0);
        for kk in 0..k {
            let p = attn.weights.at(&[kk, to]);
            for (a, w) in kernel.iter_mut().zip(&kernels[kk * per_kernel..(kk + 1) * per_kernel]) {
                *a += p * w;
            }
            for (a, b) in bias.iter_mut().zip(&biases[kk * c_out..(kk + 1) * c_out]) {
                *a += p * b;
            }
        }
        for co in 0..c_out {
            for fo in 0..f_out {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    for i in 0..kh {
                        let fi = (fo * geom.stride.0 + i) as isize - geom.padding.0 as isize;
                        if fi < 0 || fi as usize >= f {
                            continue;
                        }
                        for j in 0..kw {
                            let raw = (to * geom.stride.1 + j) as isize - geom.padding.1 as isize;
                            let ti = match geom.time_padding {
                                crate::tensor::TimePadding::Zero if raw < 0 || raw as usize >= t => continue,
                                crate::tensor::TimePadding::Zero => raw as usize,
                                crate::tensor::TimePadding::Circular => raw.rem_euclid(t as isize) as usize,
                            };
                            acc += kernel[((co * c_in + ci) * kh + i) * kw + j] * xd[(ci * f + fi as usize) * t + ti];
                        }
                    }
                }
                out[(co * f_out + fo) * t_out + to] = acc.max(0.0);
            }
        }
    }
    Tensor::new([c_out, f_out, t_out], out)
}

/// `[N, C, F, T]` → `[N, T', C·F]` taking input column `cols[t']` for each output bin.
pub(crate) fn gather_columns(tape: &mut Tape, x: Var, cols: Vec<usize>) -> Result<Var> {
    let &[n, c, f, t] = tape.value(x).shape() else {
        return dim_err("gather_columns expects [N, C, F, T]");
    };
    if cols.iter().any(|&i| i >= t) {
        return dim_err("gather_columns index out of range");
    }
    let src = tape.value(x).data();
    let (t_out, cf) = (cols.len(), c * f);
    let mut out = vec![0.0; n * t_out * cf];
    for ni in 0..n {
        for row in 0..cf {
            let line = &src[(ni * cf + row) * t..][..t];
            for (to, &ti) in cols.iter().enumerate() {
                out[(ni * t_out + to) * cf + row] = line[ti];
            }
        }
    }
    let value = Tensor::new([n, t_out, cf], out)?;
    Ok(tape.push_op(value, &[x], GatherBackward { n, cf, t, cols }))
}

struct GatherBackward {
    n: usize,
    cf: usize,
    t: usize,
    cols: Vec<usize>,
}

impl Backward for GatherBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (n, cf, t, t_out) = (self.n, self.cf, self.t, self.cols.len());
        let mut dx = vec![0.0; n * cf * t];
        for ni in 0..n {
            for row in 0..cf {
                let line = &mut dx[(ni * cf + row) * t..][..t];
                for (to, &ti) in self.cols.iter().enumerate() {
                    line[ti] += ctx.grad[(ni * t_out + to) * cf + row];
                }
            }
        }
        vec![Some(dx)]
    }
}

/// `[N, C, F, T]` → `[N, 1, C·F]`, the time average of every row.
pub(crate) fn time_mean_flat(tape: &mut Tape, x: Var) -> Result<Var> {
    let &[n, c, f, t] = tape.value(x).shape() else {
        return dim_err("time_mean_flat expects [N, C, F, T]");
    };
    let cf = c * f;
    let out = tape.value(x).data().chunks_exact(t).map(|r| r.iter().sum::<f64>() / t as f64).collect();
    let value = Tensor::new([n, 1, cf], out)?;
    Ok(tape.push_op(value, &[x], TimeMeanFlatBackward { t }))
}

struct TimeMeanFlatBackward {
    t: usize,
}

impl Backward for TimeMeanFlatBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let dx = ctx.grad.iter().flat_map(|&g| std::iter::repeat_n(g / self.t as f64, self.t)).collect();
        vec![Some(dx)]
    }
}

/// Aggregates `K` branch outputs `[N, K·C, F, T]` with weights `[N, T_w, K]`
/// where `T_w` is `T` (per bin) or 1 (broadcast).
pub(crate) fn temporal_mix(tape: &mut Tape, branches: Var, weights: Var, k: usize) -> Result<Var> {
    let &[n, kc, f, t] = tape.value(branches).shape() else {
        return dim_err("temporal_mix branches must be [N, K*C, F, T]");
    };
    let &[wn, t_w, wk] = tape.value(weights).shape() else {
        return dim_err("temporal_mix weights must be [N, T, K]");
    };
    if wn != n || wk != k || kc % k != 0 || !(t_w == t || t_w == 1) {
        return dim_err(format!(
            "temporal_mix: branches {:?} incompatible with weights {:?}",
            tape.value(branches).shape(),
            tape.value(weights).shape()
        ));
    }
    let dims = MixDims { n, k, c: kc / k, f, t, t_w };
    let (br, w) = (tape.value(branches).data(), tape.value(weights).data());
    let mut out = vec![0.0; n * dims.c * f * t];
    for ni in 0..n {
        for kk in 0..k {
            for ci in 0..dims.c {
                for fi in 0..f {
                    let src = &br[dims.branch_row(ni, kk, ci, fi)..][..t];
                    let dst = &mut out[((ni * dims.c + ci) * f + fi) * t..][..t];
                    for ti in 0..t {
                        dst[ti] += w[dims.weight_at(ni, ti, kk)] * src[ti];
                    }
                }
            }
        }
    }
    let value = Tensor::new([n, dims.c, f, t], out)?;
    Ok(tape.push_op(value, &[branches, weights], MixBackward(dims)))
}

#[derive(Clone, Copy)]
struct MixDims {
    n: usize,
    k: usize,
    c: usize,
    f: usize,
    t: usize,
    t_w: usize,
}

impl MixDims {
    fn branch_row(&self, n: usize, k: usize, c: usize, f: usize) -> usize {
        (((n * self.k + k) * self.c + c) * self.f + f) * self.t
    }

    fn weight_at(&self, n: usize, t: usize, k: usize) -> usize {
        let t = if self.t_w == 1 { 0 } else { t };
        (n * self.t_w + t) * self.k + k
    }
}

struct MixBackward(MixDims);

impl Backward for MixBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let d = self.0;
        let (br, w, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let mut dbr = ctx.needs(0).then(|| vec![0.0; br.len()]);
        let mut dw = ctx.needs(1).then(|| vec![0.0; w.len()]);
        for ni in 0..d.n {
            for kk in 0..d.k {
                for ci in 0..d.c {
                    for fi in 0..d.f {
                        let row = d.branch_row(ni, kk, ci, fi);
                        let gout = &g[((ni * d.c + ci) * d.f + fi) * d.t..][..d.t];
                        if let Some(dbr) = dbr.as_mut() {
                            for ti in 0..d.t {
                                dbr[row + ti] = w[d.weight_at(ni, ti, kk)] * gout[ti];
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            for ti in 0..d.t {
                                dw[d.weight_at(ni, ti, kk)] += gout[ti] * br[row + ti];
                            }
                        }
                    }
                }
            }
        }
        vec![dbr, dw]
    }
}
