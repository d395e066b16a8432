#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdycnn::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst relative error between tape gradients and central differences
/// (`h = 1e-5`) over `coords` random coordinates of the inputs.
///
/// The scalar probed is `Σ out ⊙ R` for a fixed random `R`, so every output
/// entry contributes with a distinct weight.
pub fn grad_check<F>(inputs: &[Tensor], coords: usize, seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut r = rng(seed);
    let probe = |tape: &mut Tape, vars: &[Var], weights: &Option<Tensor>| -> (Var, Tensor) {
        let out = build(tape, vars);
        let w = weights.clone().unwrap_or_else(|| Tensor::randn(tape.value(out).shape(), &mut rng(seed ^ 0xabc)));
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        (tape.sum(prod), w)
    };
    let loss_at = |values: &[Tensor], weights: &Option<Tensor>| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let (loss, _) = probe(&mut tape, &vars, weights);
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let (loss, weights) = probe(&mut tape, &vars, &None);
    tape.backward(loss).unwrap();
    let weights = Some(weights);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let which = r.random_range(0..inputs.len());
        let idx = r.random_range(0..inputs[which].numel());
        let analytic = tape.grad(vars[which]).map_or(0.0, |g| g[idx]);
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[idx] += h;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[idx] -= h;
        let numeric = (loss_at(&plus, &weights) - loss_at(&minus, &weights)) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
