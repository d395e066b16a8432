use rand::Rng;

use crate::dynconv::{AttentionScope, TdyConvLayer};
use crate::error::{dim_err, Result};
use crate::tensor::ops::{BatchNorm2d, BatchNormMode, ConvGeometry};
use crate::tensor::{Tape, Tensor, Var};

/// Batch statistics produced by one train-mode batch-norm call.
pub type BnStats = (String, Vec<f64>, Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct StaticConv {
    pub name: String,
    pub kernel: Tensor,
    pub bias: Tensor,
    pub geom: ConvGeometry,
}

impl StaticConv {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        geom: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * kernel.0 * kernel.1) as f64;
        Self {
            name: name.into(),
            kernel: Tensor::uniform([c_out, c_in, kernel.0, kernel.1], (6.0 / fan_in).sqrt(), rng)
                .with_requires_grad(true),
            bias: Tensor::uniform([c_out], 1.0 / fan_in.sqrt(), rng).with_requires_grad(true),
            geom,
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.kernel", self.name), &self.kernel);
        let b = tape.param(&format!("{}.bias", self.name), &self.bias);
        tape.conv2d(x, w, b, self.geom)
    }
}

/// A convolution that is either static or attention-mixed.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvUnit {
    Static(StaticConv),
    Dynamic { layer: TdyConvLayer, scope: AttentionScope },
}

impl ConvUnit {
    /// Output before any activation, plus attention weights for dynamic units.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<(Var, Option<Var>)> {
        match self {
            ConvUnit::Static(c) => Ok((c.forward_tape(tape, x)?, None)),
            ConvUnit::Dynamic { layer, scope } => {
                let (y, pi) = layer.forward_tape(tape, x, *scope, false)?;
                Ok((y, Some(pi)))
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            ConvUnit::Static(c) => {
                vec![(format!("{}.kernel", c.name), &c.kernel), (format!("{}.bias", c.name), &c.bias)]
            }
            ConvUnit::Dynamic { layer, .. } => layer.named_params(),
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            ConvUnit::Static(c) => {
                vec![(format!("{}.kernel", c.name), &mut c.kernel), (format!("{}.bias", c.name), &mut c.bias)]
            }
            ConvUnit::Dynamic { layer, .. } => layer.named_params_mut(),
        }
    }

    /// Kernel and bias scalars only (basis kernels for dynamic units).
    pub fn conv_param_count(&self) -> usize {
        match self {
            ConvUnit::Static(c) => c.kernel.numel() + c.bias.numel(),
            ConvUnit::Dynamic { layer, .. } => layer.basis_kernels.numel() + layer.basis_biases.numel(),
        }
    }

    pub fn dynamic(&self) -> Option<&TdyConvLayer> {
        match self {
            ConvUnit::Dynamic { layer, .. } => Some(layer),
            ConvUnit::Static(_) => None,
        }
    }

    pub fn dynamic_mut(&mut self) -> Option<&mut TdyConvLayer> {
        match self {
            ConvUnit::Dynamic { layer, .. } => Some(layer),
            ConvUnit::Static(_) => None,
        }
    }

    pub fn time_stride(&self) -> usize {
        match self {
            ConvUnit::Static(c) => c.geom.stride.1,
            ConvUnit::Dynamic { layer, .. } => layer.geom.stride.1,
        }
    }
}

/// Convolution followed by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: ConvUnit,
    pub bn_name: String,
    pub bn: BatchNorm2d,
}

/// Values a layer appends to the running forward record.
#[derive(Default)]
pub struct ForwardRecord {
    pub attention: Vec<(usize, Var, usize)>,
    pub bn_stats: Vec<BnStats>,
}

impl ConvBn {
    pub fn new(conv: ConvUnit, c_out: usize, bn_name: impl Into<String>) -> Self {
        Self { conv, bn_name: bn_name.into(), bn: BatchNorm2d::new(c_out) }
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var, mode: BatchNormMode, rec: &mut ForwardRecord) -> Result<Var> {
        let (y, pi) = self.conv.forward_tape(tape, x)?;
        if let (Some(pi), Some(layer)) = (pi, self.conv.dynamic()) {
            let t_out = tape.value(y).shape()[3];
            rec.attention.push((layer.layer_id, pi, t_out));
        }
        let gamma = tape.param(&format!("{}.gamma", self.bn_name), &self.bn.gamma);
        let beta = tape.param(&format!("{}.beta", self.bn_name), &self.bn.beta);
        let running = (self.bn.running_mean.data(), self.bn.running_var.data());
        let (out, stats) = tape.batch_norm(y, gamma, beta, mode, running, self.bn.eps)?;
        if let Some((mean, var)) = stats {
            rec.bn_stats.push((self.bn_name.clone(), mean, var));
        }
        Ok(out)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.conv.named_params();
        v.push((format!("{}.gamma", self.bn_name), &self.bn.gamma));
        v.push((format!("{}.beta", self.bn_name), &self.bn.beta));
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.conv.named_params_mut();
        v.push((format!("{}.gamma", self.bn_name), &mut self.bn.gamma));
        v.push((format!("{}.beta", self.bn_name), &mut self.bn.beta));
        v
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{}.running_mean", self.bn_name), &self.bn.running_mean),
            (format!("{}.running_var", self.bn_name), &self.bn.running_var),
        ]
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{}.running_mean", self.bn_name), &mut self.bn.running_mean),
            (format!("{}.running_var", self.bn_name), &mut self.bn.running_var),
        ]
    }
}

/// Fully connected map over the trailing axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: impl Into<String>, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            name: name.into(),
            weight: Tensor::uniform([d_out, d_in], bound, rng).with_requires_grad(true),
            bias: Tensor::uniform([d_out], bound, rng).with_requires_grad(true),
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).shape().last() != Some(&self.weight.shape()[1]) {
            return dim_err(format!("{} expects trailing extent {}", self.name, self.weight.shape()[1]));
        }
        let w = tape.param(&format!("{}.weight", self.name), &self.weight);
        let b = tape.param(&format!("{}.bias", self.name), &self.bias);
        tape.affine(x, w, b)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![(format!("{}.weight", self.name), &self.weight), (format!("{}.bias", self.name), &self.bias)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![(format!("{}.weight", self.name), &mut self.weight), (format!("{}.bias", self.name), &mut self.bias)]
    }
}
