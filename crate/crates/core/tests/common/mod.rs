//! Finite-difference gradient oracle shared by the integration tests.
#![allow(dead_code)]

use hybridstat::rng;
use hybridstat::tensor::{NodeId, Result, Tape, Tensor};
use rand::Rng as _;
use rand_distr::StandardNormal;

pub fn normal(seed: u64, shape: &[usize], scale: f64) -> Tensor<f64> {
    let mut r = rng::rng(seed, &[]);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Scalar objective `Σ f(inputs) ⊙ r` with a fixed random probe `r`, so every
/// output element contributes a distinct weight.
fn probe_loss<F>(tape: &mut Tape<f64>, ids: &[NodeId], f: &F, seed: u64) -> Result<NodeId>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let out = f(tape, ids)?;
    let shape = tape.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 {
        return tape.reshape(out, &[]);
    }
    let r = tape.constant(normal(seed ^ 0x9e37_79b9, &shape, 1.0));
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

fn loss_value<F>(inputs: &[Tensor<f64>], f: &F, seed: u64) -> f64
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let l = probe_loss(&mut tape, &ids, f, seed).unwrap();
    tape.value(l).item()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every input element.
pub fn max_grad_error<F>(inputs: &[Tensor<f64>], f: F, seed: u64, h: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    max_grad_error_steps(inputs, f, seed, &[h])
}

/// As [`max_grad_error`], keeping each element's smallest error over several
/// step sizes.
pub fn max_grad_error_steps<F>(inputs: &[Tensor<f64>], f: F, seed: u64, steps: &[f64]) -> f64
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let l = probe_loss(&mut tape, &ids, &f, seed).unwrap();
    let grads = tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let g = grads.wrt(*id);
        for e in 0..inputs[k].len() {
            let mut best = f64::INFINITY;
            for &h in steps {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[e] -= h;
                let num = (loss_value(&plus, &f, seed) - loss_value(&minus, &f, seed)) / (2.0 * h);
                best = best.min(rel_err(g.data()[e], num, 1e-3));
            }
            worst = worst.max(best);
        }
    }
    worst
}
