//! Softmax cross-entropy and the angular prototypical loss.
//!
//! With `M = 2` utterances per speaker, utterance 0 of speaker `j` is its
//! prototype `c_j` and utterance 1 the query `q_j`:
//!
//! ```text
//! S_jk = w · cos(q_j, c_k) + b
//! L_ap = −(1/N) Σ_j log softmax_k(S_j·)_j
//! ```

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Backward, BackwardCtx, Tape, Tensor, Var};

/// Lower bound applied to the AP scale `w`.
pub const MIN_AP_SCALE: f64 = 1e-6;
const MIN_NORM: f64 = 1e-12;

/// Learnable scale and offset of the cosine logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ApParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl Default for ApParams {
    fn default() -> Self {
        Self { w: Tensor::scalar(10.0).with_requires_grad(true), b: Tensor::scalar(-5.0).with_requires_grad(true) }
    }
}

impl ApParams {
    pub fn clamp(&mut self) {
        let w = &mut self.w.data_mut()[0];
        *w = w.max(MIN_AP_SCALE);
    }
}

/// Mean of `−log softmax(logits_r)[labels_r]` over the rows of `[R, C]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let &[rows, classes] = tape.value(logits).shape() else {
        return dim_err(format!("cross entropy expects [R, C] logits, got {:?}", tape.value(logits).shape()));
    };
    if labels.len() != rows {
        return dim_err(format!("{} labels for {rows} rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    tape.value(logits).check_finite("logits")?;
    let src = tape.value(logits).data();
    let mut probs = vec![0.0; rows * classes];
    let mut loss = 0.0;
    for r in 0..rows {
        let row = &src[r * classes..][..classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for (p, v) in probs[r * classes..][..classes].iter_mut().zip(row) {
            *p = (v - max).exp() / z;
        }
        loss += max + z.ln() - row[labels[r]];
    }
    let value = Tensor::scalar(loss / rows as f64);
    Ok(tape.push_op(value, &[logits], CrossEntropyBackward { probs, labels: labels.to_vec(), classes }))
}

struct CrossEntropyBackward {
    probs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl Backward for CrossEntropyBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let rows = self.labels.len();
        let g = ctx.grad[0] / rows as f64;
        let mut dx: Vec<f64> = self.probs.iter().map(|p| p * g).collect();
        for (r, &l) in self.labels.iter().enumerate() {
            dx[r * self.classes + l] -= g;
        }
        vec![Some(dx)]
    }
}

/// Scales every row of `[R, D]` to unit length.
pub fn l2_normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let &[rows, d] = tape.value(x).shape() else {
        return dim_err(format!("row normalization expects [R, D], got {:?}", tape.value(x).shape()));
    };
    let src = tape.value(x).data();
    let mut norms = Vec::with_capacity(rows);
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &src[r * d..][..d];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > MIN_NORM) {
            return Err(Error::NumericGuard(format!("embedding {r} has norm {n}")));
        }
        for (o, v) in out[r * d..][..d].iter_mut().zip(row) {
            *o = v / n;
        }
        norms.push(n);
    }
    let value = Tensor::new([rows, d], out)?;
    Ok(tape.push_op(value, &[x], NormalizeBackward { norms, d }))
}

struct NormalizeBackward {
    norms: Vec<f64>,
    d: usize,
}

impl Backward for NormalizeBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let d = self.d;
        let y = ctx.output.data();
        let mut dx = vec![0.0; y.len()];
        for (r, &n) in self.norms.iter().enumerate() {
            let (yr, gr) = (&y[r * d..][..d], &ctx.grad[r * d..][..d]);
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((o, &yv), &gv) in dx[r * d..][..d].iter_mut().zip(yr).zip(gr) {
                *o = (gv - yv * dot) / n;
            }
        }
        vec![Some(dx)]
    }
}

/// Member `m` of every group in `[N, M, D]`, giving `[N, D]`.
pub fn select_member(tape: &mut Tape, x: Var, m: usize) -> Result<Var> {
    let &[n, members, d] = tape.value(x).shape() else {
        return dim_err(format!("select_member expects [N, M, D], got {:?}", tape.value(x).shape()));
    };
    if m >= members {
        return dim_err(format!("member {m} of {members}"));
    }
    let src = tape.value(x).data();
    let out: Vec<f64> = (0..n).flat_map(|i| src[(i * members + m) * d..][..d].iter().copied()).collect();
    let value = Tensor::new([n, d], out)?;
    Ok(tape.push_op(value, &[x], SelectBackward { n, members, d, m }))
}

struct SelectBackward {
    n: usize,
    members: usize,
    d: usize,
    m: usize,
}

impl Backward for SelectBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; self.n * self.members * self.d];
        for i in 0..self.n {
            dx[(i * self.members + self.m) * self.d..][..self.d].copy_from_slice(&ctx.grad[i * self.d..][..self.d]);
        }
        vec![Some(dx)]
    }
}

/// `max(w, MIN_AP_SCALE) · x + b` for scalar `w` and `b`.
pub fn scale_shift(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    if tape.value(w).numel() != 1 || tape.value(b).numel() != 1 {
        return dim_err("scale and shift must be scalars");
    }
    let (wv, bv) = (tape.value(w).data()[0], tape.value(b).data()[0]);
    let clamped = wv < MIN_AP_SCALE;
    let w_eff = wv.max(MIN_AP_SCALE);
    let data = tape.value(x).data().iter().map(|v| w_eff * v + bv).collect();
    let value = Tensor::new(tape.value(x).shape(), data)?;
    Ok(tape.push_op(value, &[x, w, b], ScaleShiftBackward { w: w_eff, clamped }))
}

struct ScaleShiftBackward {
    w: f64,
    clamped: bool,
}

impl Backward for ScaleShiftBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.inputs[0].data();
        let dx = ctx.needs(0).then(|| ctx.grad.iter().map(|g| g * self.w).collect());
        let dw = ctx.needs(1).then(|| {
            let s = if self.clamped { 0.0 } else { ctx.grad.iter().zip(x).map(|(g, v)| g * v).sum() };
            vec![s]
        });
        let db = ctx.needs(2).then(|| vec![ctx.grad.iter().sum()]);
        vec![dx, dw, db]
    }
}

/// Angular prototypical loss of `[N, 2, D]` embeddings.
pub fn angular_prototypical_loss(tape: &mut Tape, embeddings: Var, w: Var, b: Var) -> Result<Var> {
    let &[n, m, _] = tape.value(embeddings).shape() else {
        return dim_err(format!("AP loss expects [N, 2, D], got {:?}", tape.value(embeddings).shape()));
    };
    if m != 2 {
        return dim_err(format!("AP loss needs exactly 2 utterances per speaker, got {m}"));
    }
    if n < 2 {
        return Err(Error::Data("AP loss needs at least 2 speakers".into()));
    }
    let protos = select_member(tape, embeddings, 0)?;
    let queries = select_member(tape, embeddings, 1)?;
    let protos = l2_normalize_rows(tape, protos)?;
    let queries = l2_normalize_rows(tape, queries)?;
    let zero = tape.constant(Tensor::zeros([n]));
    let cos = tape.affine(queries, protos, zero)?;
    let logits = scale_shift(tape, cos, w, b)?;
    let labels: Vec<usize> = (0..n).collect();
    cross_entropy(tape, logits, &labels)
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub ap: Var,
}

/// `cross_entropy(logits, labels) + angular_prototypical_loss(embeddings)`.
pub fn combined_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    embeddings: Var,
    w: Var,
    b: Var,
) -> Result<LossVars> {
    let rows = tape.value(logits).shape().first().copied().unwrap_or(0);
    let shape = tape.value(embeddings).shape();
    if shape.len() != 3 || shape[0] * shape[1] != rows {
        return dim_err(format!("{rows} logit rows for embeddings {shape:?}"));
    }
    let ce = cross_entropy(tape, logits, labels)?;
    let ap = angular_prototypical_loss(tape, embeddings, w, b)?;
    let total = tape.add(ce, ap)?;
    Ok(LossVars { total, ce, ap })
}
