//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value, the ids of its
//! inputs and a vector-Jacobian product. Node ids grow monotonically, so a
//! single reverse sweep over the node list visits each operation exactly once
//! after all of its consumers.

use std::collections::HashMap;

use super::ops::{self, BatchNormMode, BnDims, BnSaved, ConvDims, ConvGeometry};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Inputs visible to a backward function.
pub(crate) struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f64],
    pub needs: Vec<bool>,
}

impl BackwardCtx<'_> {
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

/// Vector-Jacobian product of one recorded operation.
pub(crate) trait Backward {
    /// One entry per input; `None` where the input needs no gradient.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    inference: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters are recorded as constants.
    pub fn inference() -> Self {
        Self { inference: true, ..Self::default() }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient if `value.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad() && !self.inference;
        self.push_node(value, Vec::new(), None, requires_grad)
    }

    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.set_requires_grad(false);
        self.push_node(value, Vec::new(), None, false)
    }

    /// Records a named parameter once; later calls with the same name reuse it.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let mut value = value.clone();
        value.clear_grad();
        let v = self.leaf(value);
        self.params.insert(name.to_owned(), v);
        v
    }

    /// Binds `name` to an existing variable so later [`Tape::param`] calls reuse it.
    pub fn alias_param(&mut self, name: &str, var: Var) {
        self.params.insert(name.to_owned(), var);
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.param_var(name).and_then(|v| self.grad(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        backward: Option<Box<dyn Backward>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node { value, inputs, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation output computed outside the tape.
    pub(crate) fn push_op(&mut self, value: Tensor, inputs: &[Var], backward: impl Backward + 'static) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let backward: Option<Box<dyn Backward>> = requires_grad.then(|| Box::new(backward) as Box<dyn Backward>);
        self.push_node(value, inputs.to_vec(), backward, requires_grad)
    }

    /// Populates the gradient slot of every node that requires one and is
    /// reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(bw) = node.backward.as_ref() {
                let ctx = BackwardCtx {
                    inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                    output: &node.value,
                    grad: &grad,
                    needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
                };
                let input_grads = bw.backward(&ctx);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (&input, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match grads[input.0].as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => grads[input.0] = Some(g),
                    }
                }
            }
            if self.nodes[id].requires_grad {
                self.nodes[id].value.set_grad(grad)?;
            }
        }
        Ok(())
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let d = ConvDims::new(self.shape(x), self.shape(kernel), geom)?;
        if self.value(bias).numel() != d.c_out {
            return dim_err(format!("conv2d bias has {} entries, expected {}", self.value(bias).numel(), d.c_out));
        }
        let out = ops::conv2d_forward(self.value(x).data(), self.value(kernel).data(), self.value(bias).data(), &d);
        let value = Tensor::new([d.n, d.c_out, d.f_out, d.t_out], out)?;
        Ok(self.push_op(value, &[x, kernel, bias], ConvBackward(d)))
    }

    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (rows, d_in, d_out) = ops::check_affine(self.shape(x), self.shape(weight), self.shape(bias))?;
        let out = ops::affine_forward(
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            rows,
            d_in,
            d_out,
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("rank checked") = d_out;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, &[x, weight, bias], AffineBackward { rows, d_in, d_out }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = ops::relu(self.value(x));
        self.push_op(value, &[x], ReluBackward)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("add of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push_op(value, &[a, b], AddBackward))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("mul of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push_op(value, &[a, b], MulBackward))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.push_op(value, &[x], ScaleBackward(factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op(value, &[x], SumBackward)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push_op(value, &[x], ReshapeBackward))
    }

    pub fn softmax_tempered(&mut self, x: Var, temperature: f64) -> Result<Var> {
        ops::check_temperature(temperature)?;
        self.value(x).check_finite("softmax logits")?;
        let (_, width) = ops::rows_of(self.shape(x))?;
        let value = Tensor::new(self.shape(x), ops::softmax_rows(self.value(x).data(), width, temperature))?;
        Ok(self.push_op(value, &[x], SoftmaxBackward { width, temperature }))
    }

    /// Batch normalization. In train mode the batch statistics `(mean, var)`
    /// are returned so the caller can fold them into its running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        running: (&[f64], &[f64]),
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let d = BnDims::new(self.shape(x), self.value(gamma).numel())?;
        if self.value(beta).numel() != d.c || running.0.len() != d.c || running.1.len() != d.c {
            return dim_err("batch norm parameter extents disagree with channel count");
        }
        let (out, saved) = match mode {
            BatchNormMode::Train => {
                if d.n < 2 {
                    return Err(Error::DegenerateBatch("train-mode batch norm needs N >= 2".into()));
                }
                ops::bn_train_forward(self.value(x).data(), &d, self.value(gamma).data(), self.value(beta).data(), eps)
            }
            BatchNormMode::Eval => ops::bn_eval_forward(
                self.value(x).data(),
                &d,
                self.value(gamma).data(),
                self.value(beta).data(),
                running.0,
                running.1,
                eps,
            ),
        };
        let stats = (mode == BatchNormMode::Train).then(|| (saved.mean.clone(), saved.var.clone()));
        let value = Tensor::new(self.shape(x), out)?;
        let v = self.push_op(value, &[x, gamma, beta], BnBackward { d, saved, mode });
        Ok((v, stats))
    }

    /// `[N, C, F, T]` → `[N, T, C]` by averaging over frequency.
    pub fn freq_mean_frames(&mut self, x: Var) -> Result<Var> {
        let &[n, c, f, t] = self.shape(x) else {
            return dim_err(format!("freq_mean_frames expects [N, C, F, T], got {:?}", self.shape(x)));
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; n * t * c];
        for ni in 0..n {
            for ci in 0..c {
                for fi in 0..f {
                    let row = &src[((ni * c + ci) * f + fi) * t..][..t];
                    for (ti, &v) in row.iter().enumerate() {
                        out[(ni * t + ti) * c + ci] += v / f as f64;
                    }
                }
            }
        }
        let value = Tensor::new([n, t, c], out)?;
        Ok(self.push_op(value, &[x], FreqMeanBackward { n, c, f, t }))
    }

    /// `[N, T, D]` → `[N, D]` by averaging over time.
    pub fn time_mean(&mut self, x: Var) -> Result<Var> {
        let &[n, t, d] = self.shape(x) else {
            return dim_err(format!("time_mean expects [N, T, D], got {:?}", self.shape(x)));
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for ni in 0..n {
            for ti in 0..t {
                for (o, v) in out[ni * d..(ni + 1) * d].iter_mut().zip(&src[(ni * t + ti) * d..][..d]) {
                    *o += v / t as f64;
                }
            }
        }
        let value = Tensor::new([n, d], out)?;
        Ok(self.push_op(value, &[x], TimeMeanBackward { n, t, d }))
    }
}

struct ConvBackward(ConvDims);

impl Backward for ConvBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ops::conv2d_backward(
            ctx.inputs[0].data(),
            ctx.inputs[1].data(),
            ctx.grad,
            &self.0,
            (ctx.needs(0), ctx.needs(1), ctx.needs(2)),
        );
        vec![g.dx, g.dw, g.db]
    }
}

struct AffineBackward {
    rows: usize,
    d_in: usize,
    d_out: usize,
}

impl Backward for AffineBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        use super::linalg::{gemm, Mat};
        let (rows, d_in, d_out) = (self.rows, self.d_in, self.d_out);
        let (x, w, dy) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let dx = ctx.needs(0).then(|| {
            let mut dx = vec![0.0; rows * d_in];
            gemm(rows, d_out, d_in, Mat::rm(dy, d_out), Mat::rm(w, d_in), 0.0, &mut dx);
            dx
        });
        let dw = ctx.needs(1).then(|| {
            let mut dw = vec![0.0; d_out * d_in];
            gemm(d_out, rows, d_in, Mat::tr(dy, d_out), Mat::rm(x, d_in), 0.0, &mut dw);
            dw
        });
        let db = ctx.needs(2).then(|| {
            let mut db = vec![0.0; d_out];
            for row in dy.chunks_exact(d_out) {
                db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            db
        });
        vec![dx, dw, db]
    }
}

struct ReluBackward;

impl Backward for ReluBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.inputs[0].data().iter().zip(ctx.grad).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 });
        vec![Some(g.collect())]
    }
}

struct AddBackward;

impl Backward for AddBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs(0).then(|| ctx.grad.to_vec()), ctx.needs(1).then(|| ctx.grad.to_vec())]
    }
}

struct MulBackward;

impl Backward for MulBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        vec![
            ctx.needs(0).then(|| ctx.grad.iter().zip(b).map(|(g, y)| g * y).collect()),
            ctx.needs(1).then(|| ctx.grad.iter().zip(a).map(|(g, x)| g * x).collect()),
        ]
    }
}

struct ScaleBackward(f64);

impl Backward for ScaleBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad.iter().map(|g| g * self.0).collect())]
    }
}

struct SumBackward;

impl Backward for SumBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])]
    }
}

struct ReshapeBackward;

impl Backward for ReshapeBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad.to_vec())]
    }
}

struct SoftmaxBackward {
    width: usize,
    temperature: f64,
}

impl Backward for SoftmaxBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; ctx.grad.len()];
        let rows = ctx.output.data().chunks_exact(self.width).zip(ctx.grad.chunks_exact(self.width));
        for ((y, g), d) in rows.zip(dx.chunks_exact_mut(self.width)) {
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for ((d, &y), &g) in d.iter_mut().zip(y).zip(g) {
                *d = y * (g - dot) / self.temperature;
            }
        }
        vec![Some(dx)]
    }
}

struct BnBackward {
    d: BnDims,
    saved: BnSaved,
    mode: BatchNormMode,
}

impl Backward for BnBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (dx, dgamma, dbeta) = ops::bn_backward(ctx.grad, &self.d, ctx.inputs[1].data(), &self.saved, self.mode);
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

struct FreqMeanBackward {
    n: usize,
    c: usize,
    f: usize,
    t: usize,
}

impl Backward for FreqMeanBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let Self { n, c, f, t } = *self;
        let mut dx = vec![0.0; n * c * f * t];
        for ni in 0..n {
            for ci in 0..c {
                for fi in 0..f {
                    let row = &mut dx[((ni * c + ci) * f + fi) * t..][..t];
                    for (ti, v) in row.iter_mut().enumerate() {
                        *v = ctx.grad[(ni * t + ti) * c + ci] / f as f64;
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

struct TimeMeanBackward {
    n: usize,
    t: usize,
    d: usize,
}

impl Backward for TimeMeanBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let Self { n, t, d } = *self;
        let mut dx = vec![0.0; n * t * d];
        for ni in 0..n {
            for ti in 0..t {
                for (o, g) in dx[(ni * t + ti) * d..][..d].iter_mut().zip(&ctx.grad[ni * d..(ni + 1) * d]) {
                    *o = g / t as f64;
                }
            }
        }
        vec![Some(dx)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_quadratic_functionals() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap().with_requires_grad(true));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap().with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([2], 1.0).with_requires_grad(true));
        let y = tape.leaf(Tensor::full([2], 1.0).with_requires_grad(true));
        let c = tape.constant(Tensor::full([2], 3.0));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        let _unused = tape.relu(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
        assert!(tape.grad(y).is_none());
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut tape = Tape::new();
        let w = Tensor::full([1], 2.0).with_requires_grad(true);
        let a = tape.param("w", &w);
        let b = tape.param("w", &w);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        tape.backward(p).unwrap();
        assert_eq!(tape.param_grad("w").unwrap(), &[4.0]);
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::inference();
        let w = tape.param("w", &Tensor::full([1], 2.0).with_requires_grad(true));
        assert!(!tape.requires_grad(w));
    }
}
