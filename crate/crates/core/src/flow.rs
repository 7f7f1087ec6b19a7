//! Conditional masked autoregressive flow for `p(θ | z)`.
//!
//! Each layer is a MADE network with inputs `x` (the current θ-space vector)
//! and context `z` that outputs a shift `μᵢ` and log-scale `αᵢ` depending
//! only on `x_{<i}` and `z`. The density direction is
//! `uᵢ = (xᵢ − μᵢ)·exp(−αᵢ)` with log-determinant `−Σαᵢ`. Consecutive layers
//! use reversed variable orders, implemented by reversing the degree labels
//! rather than permuting data.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::io::Checkpoint;
use crate::nn::train::{fit, FitCfg, FitReport, Objective, Pass};
use crate::nn::{normal_tensor, Activation, EpochRecord, ParamSet};
use crate::rng::{self, stream, Rng};
use crate::tensor::{NodeId, Real, Result, Tape, Tensor, TensorError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub layers: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Symmetric clamp on the log-scale outputs.
    pub log_scale_clamp: f64,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self {
            layers: 5,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            log_scale_clamp: 7.0,
        }
    }
}

impl FlowSpec {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.layers == 0 {
            return Err("flow needs at least one layer".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err("flow hidden widths must be non-empty and positive".into());
        }
        if !(self.log_scale_clamp > 0.0) {
            return Err("log_scale_clamp must be positive".into());
        }
        Ok(())
    }
}

/// Per-dimension affine standardization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Whitening {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Whitening {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Statistics of `rows`; zero-variance columns keep std 1.
    pub fn fit(rows: &[&[f64]]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r.iter()) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *v += (x - m).powi(2) / n;
            }
        }
        let std = var
            .iter()
            .map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((u, m), s)| u * s + m)
            .collect()
    }

    pub fn log_jacobian(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

/// Degree of input/output variable `i` in layer `layer` (1-based degrees).
fn var_degree(i: usize, d: usize, layer: usize) -> usize {
    if layer % 2 == 0 {
        i + 1
    } else {
        d - i
    }
}

fn hidden_degree(k: usize, d: usize) -> usize {
    if d == 1 {
        0
    } else {
        k % (d - 1) + 1
    }
}

/// Binary masks `[input→h0, h0→h1, …, h_last→output]` for one layer, each
/// shaped like the weight it multiplies (`fan_in × fan_out`).
pub fn made_masks(d: usize, hidden: &[usize], layer: usize) -> Vec<Tensor<f64>> {
    let mut masks = Vec::new();
    let mut prev: Vec<usize> = (0..d).map(|i| var_degree(i, d, layer)).collect();
    for &h in hidden {
        let cur: Vec<usize> = (0..h).map(|k| hidden_degree(k, d)).collect();
        let mut m = Vec::with_capacity(prev.len() * h);
        for &p in &prev {
            for &c in &cur {
                m.push(if c >= p { 1.0 } else { 0.0 });
            }
        }
        masks.push(Tensor::new(vec![prev.len(), h], m).unwrap());
        prev = cur;
    }
    let out_deg: Vec<usize> = (0..2 * d).map(|o| var_degree(o % d, d, layer)).collect();
    let mut m = Vec::with_capacity(prev.len() * 2 * d);
    for &p in &prev {
        for &o in &out_deg {
            m.push(if o > p { 1.0 } else { 0.0 });
        }
    }
    masks.push(Tensor::new(vec![prev.len(), 2 * d], m).unwrap());
    masks
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<T: Real = f32> {
    pub spec: FlowSpec,
    pub d: usize,
    pub n_z: usize,
    pub theta_white: Whitening,
    pub z_white: Whitening,
    pub params: ParamSet<T>,
    masks: Vec<Vec<Tensor<T>>>,
}

/// Descriptor block stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FlowDescriptor {
    kind: String,
    spec: FlowSpec,
    d: usize,
    n_z: usize,
    theta_white: Whitening,
    z_white: Whitening,
    param_names: Vec<String>,
}

impl<T: Real> FlowModel<T> {
    /// Identity-initialized flow: the output layer of every MADE is zero, so
    /// all shifts and log-scales start at 0.
    pub fn new(spec: FlowSpec, d: usize, n_z: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::default();
        let gain = match spec.activation {
            Activation::Tanh => 1.0,
            _ => 2.0,
        };
        for l in 0..spec.layers {
            let h0 = spec.hidden[0];
            params.push(format!("l{l}.wx"), normal_tensor(rng, &[d, h0], (gain / (d + n_z) as f64).sqrt()));
            let wz = if n_z > 0 {
                normal_tensor(rng, &[n_z, h0], (gain / (d + n_z) as f64).sqrt())
            } else {
                Tensor::zeros(&[1, h0])
            };
            params.push(format!("l{l}.wz"), wz);
            params.push(format!("l{l}.b0"), Tensor::zeros(&[h0]));
            for (i, w) in spec.hidden.windows(2).enumerate() {
                params.push(format!("l{l}.w{}", i + 1), normal_tensor(rng, &[w[0], w[1]], (gain / w[0] as f64).sqrt()));
                params.push(format!("l{l}.b{}", i + 1), Tensor::zeros(&[w[1]]));
            }
            let last = *spec.hidden.last().unwrap();
            params.push(format!("l{l}.wo"), Tensor::zeros(&[last, 2 * d]));
            params.push(format!("l{l}.bo"), Tensor::zeros(&[2 * d]));
        }
        Self::assemble(spec, d, n_z, Whitening::identity(d), Whitening::identity(n_z), params)
    }

    fn assemble(spec: FlowSpec, d: usize, n_z: usize, theta_white: Whitening, z_white: Whitening, params: ParamSet<T>) -> Self {
        let masks = (0..spec.layers)
            .map(|l| made_masks(d, &spec.hidden, l).iter().map(Tensor::cast).collect())
            .collect();
        Self {
            spec,
            d,
            n_z,
            theta_white,
            z_white,
            params,
            masks,
        }
    }

    /// Tensors per layer: wx, wz, b0, (w_i, b_i)…, wo, bo.
    fn per_layer(&self) -> usize {
        3 + 2 * (self.spec.hidden.len() - 1) + 2
    }

    fn whiten_rows(w: &Whitening, rows: &[Vec<f64>]) -> Result<Tensor<T>> {
        let flat: Vec<f64> = rows.iter().flat_map(|r| w.apply(r)).collect();
        let width = w.mean.len().max(1);
        if rows.is_empty() || flat.len() != rows.len() * w.mean.len() {
            return Err(TensorError::InvalidArgument {
                op: "flow",
                reason: format!("expected {} rows of width {}", rows.len(), w.mean.len()),
            });
        }
        if w.mean.is_empty() {
            return Ok(Tensor::zeros(&[rows.len(), width]));
        }
        Tensor::from_f64(&[rows.len(), width], &flat)
    }

    /// MADE outputs `(μ, α)` of `layer` for inputs `x` and context `z`.
    fn made(&self, tape: &mut Tape<T>, ids: &[NodeId], layer: usize, x: NodeId, z: NodeId) -> Result<(NodeId, NodeId)> {
        let base = layer * self.per_layer();
        let masks = &self.masks[layer];
        let act = self.spec.activation;
        let m0 = tape.constant(masks[0].clone());
        let wx = tape.mul(ids[base], m0)?;
        let mut h = tape.matmul(x, wx)?;
        if self.n_z > 0 {
            let hz = tape.matmul(z, ids[base + 1])?;
            h = tape.add(h, hz)?;
        }
        h = tape.add(h, ids[base + 2])?;
        h = act.apply(tape, h)?;
        for i in 1..self.spec.hidden.len() {
            let m = tape.constant(masks[i].clone());
            let w = tape.mul(ids[base + 1 + 2 * i], m)?;
            h = tape.matmul(h, w)?;
            h = tape.add(h, ids[base + 2 + 2 * i])?;
            h = act.apply(tape, h)?;
        }
        let nh = self.spec.hidden.len();
        let m = tape.constant(masks[nh].clone());
        let wo = tape.mul(ids[base + 1 + 2 * nh], m)?;
        let out = tape.matmul(h, wo)?;
        let out = tape.add(out, ids[base + 2 + 2 * nh])?;
        let mu = tape.slice(out, 0, self.d)?;
        let alpha = tape.slice(out, self.d, 2 * self.d)?;
        let c = self.spec.log_scale_clamp;
        let alpha = tape.clamp(alpha, -c, c)?;
        Ok((mu, alpha))
    }

    /// Records `u` and the per-row log-determinant of the whitened-space map.
    fn forward_nodes(&self, tape: &mut Tape<T>, ids: &[NodeId], x: NodeId, z: NodeId) -> Result<(NodeId, Option<NodeId>)> {
        let mut cur = x;
        let mut logdet: Option<NodeId> = None;
        for l in 0..self.spec.layers {
            let step = (|| -> Result<(NodeId, NodeId)> {
                let (mu, alpha) = self.made(tape, ids, l, cur, z)?;
                let diff = tape.sub(cur, mu)?;
                let neg = tape.scale(alpha, -1.0)?;
                let inv = tape.exp(neg)?;
                let u = tape.mul(diff, inv)?;
                let ld = tape.sum_last(neg)?;
                Ok((u, ld))
            })();
            let (u, ld) = step.map_err(|e| match e {
                TensorError::NonFinite { .. } => TensorError::NonFiniteLayer { model: "flow", layer: l },
                other => other,
            })?;
            cur = u;
            logdet = Some(match logdet {
                None => ld,
                Some(acc) => tape.add(acc, ld)?,
            });
        }
        Ok((cur, logdet))
    }

    /// Per-row `log p(θ | z)` in raw θ units, shape `(B,)`.
    pub fn log_prob_node(&self, tape: &mut Tape<T>, ids: &[NodeId], theta: &[Vec<f64>], z: &[Vec<f64>]) -> Result<NodeId> {
        let x = tape.constant(Self::whiten_rows(&self.theta_white, theta)?);
        let zt = tape.constant(Self::whiten_rows(&self.z_white, z)?);
        if tape.shape(x)[0] != tape.shape(zt)[0] {
            return Err(TensorError::ShapeMismatch {
                op: "flow_log_prob",
                shapes: vec![tape.shape(x).to_vec(), tape.shape(zt).to_vec()],
            });
        }
        let (u, logdet) = self.forward_nodes(tape, ids, x, zt)?;
        let sq = tape.mul(u, u)?;
        let sq = tape.sum_last(sq)?;
        let base = tape.scale(sq, -0.5)?;
        let constant = -0.5 * self.d as f64 * LN_2PI + self.theta_white.log_jacobian();
        let mut lp = tape.add_scalar(base, constant)?;
        if let Some(ld) = logdet {
            lp = tape.add(lp, ld)?;
        }
        Ok(lp)
    }

    /// `log p(θᵢ | zᵢ)` for each row, without gradients.
    pub fn log_prob(&self, theta: &[Vec<f64>], z: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ids = self.params.bind_frozen(&mut tape);
        let lp = self.log_prob_node(&mut tape, &ids, theta, z)?;
        Ok(tape.value(lp).to_f64_vec())
    }

    /// Whitened-space transform `x → u` and its log-determinant per row.
    pub fn transform(&self, x: &[Vec<f64>], z: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut tape = Tape::new();
        let ids = self.params.bind_frozen(&mut tape);
        let flat: Vec<f64> = x.iter().flatten().copied().collect();
        let xn = tape.constant(Tensor::from_f64(&[x.len(), self.d], &flat)?);
        let zt = tape.constant(Self::whiten_rows(&self.z_white, z)?);
        let (u, ld) = self.forward_nodes(&mut tape, &ids, xn, zt)?;
        let u = tape.value(u).to_f64_vec().chunks(self.d).map(<[f64]>::to_vec).collect();
        let ld = match ld {
            Some(n) => tape.value(n).to_f64_vec(),
            None => vec![0.0; x.len()],
        };
        Ok((u, ld))
    }

    /// Inverse of [`FlowModel::transform`]: sequential per-dimension inversion
    /// through the layers in reverse.
    pub fn inverse(&self, u: &[Vec<f64>], z: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = u.len();
        let d = self.d;
        let mut tape = Tape::new();
        let ids = self.params.bind_frozen(&mut tape);
        let zt = tape.constant(Self::whiten_rows(&self.z_white, z)?);
        let mut cur: Vec<f64> = u.iter().flatten().copied().collect();
        for l in (0..self.spec.layers).rev() {
            let mut x = vec![0.0; n * d];
            for k in 1..=d {
                let i = (0..d).find(|&i| var_degree(i, d, l) == k).unwrap();
                let xn = tape.constant(Tensor::from_f64(&[n, d], &x)?);
                let (mu, alpha) = self.made(&mut tape, &ids, l, xn, zt)?;
                let mu = tape.value(mu).to_f64_vec();
                let alpha = tape.value(alpha).to_f64_vec();
                for r in 0..n {
                    let p = r * d + i;
                    x[p] = cur[p] * alpha[p].exp() + mu[p];
                }
            }
            cur = x;
        }
        Ok(cur.chunks(d).map(<[f64]>::to_vec).collect())
    }

    /// `n` posterior draws for one context vector, in raw θ units.
    pub fn sample(&self, z: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut r = rng::rng(seed, &[stream::SAMPLE]);
        let u: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..self.d).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        let zs = vec![z.to_vec(); n];
        let x = self.inverse(&u, &zs)?;
        Ok(x.iter().map(|r| self.theta_white.invert(r)).collect())
    }

    pub fn cast<U: Real>(&self) -> FlowModel<U> {
        FlowModel::assemble(
            self.spec.clone(),
            self.d,
            self.n_z,
            self.theta_white.clone(),
            self.z_white.clone(),
            self.params.cast(),
        )
    }
}

impl FlowModel<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let desc = FlowDescriptor {
            kind: "maf".into(),
            spec: self.spec.clone(),
            d: self.d,
            n_z: self.n_z,
            theta_white: self.theta_white.clone(),
            z_white: self.z_white.clone(),
            param_names: self.params.names.clone(),
        };
        Checkpoint {
            descriptor: toml::to_string(&desc).expect("flow descriptor serializes"),
            tensors: self.params.tensors.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> std::result::Result<Self, String> {
        let desc: FlowDescriptor = toml::from_str(&ck.descriptor).map_err(|e| e.to_string())?;
        if desc.kind != "maf" {
            return Err(format!("checkpoint holds a {:?}, not a flow", desc.kind));
        }
        desc.spec.validate()?;
        let mut model = Self::new(desc.spec, desc.d, desc.n_z, &mut rng::rng(0, &[]));
        model.params.names = desc.param_names;
        model.params.replace_all(ck.tensors.clone()).map_err(|e| e.to_string())?;
        model.theta_white = desc.theta_white;
        model.z_white = desc.z_white;
        Ok(model)
    }
}

struct FlowObjective<'a> {
    flow: FlowModel,
    z: &'a [Vec<f64>],
    theta: &'a [Vec<f64>],
}

impl Objective for FlowObjective<'_> {
    fn params(&self) -> Vec<&ParamSet> {
        vec![&self.flow.params]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.flow.params]
    }

    fn loss(&mut self, tape: &mut Tape<f32>, ids: &[Vec<NodeId>], rows: &[usize], _: Pass) -> Result<NodeId> {
        let th: Vec<Vec<f64>> = rows.iter().map(|&i| self.theta[i].clone()).collect();
        let zz: Vec<Vec<f64>> = rows.iter().map(|&i| self.z[i].clone()).collect();
        let lp = self.flow.log_prob_node(tape, &ids[0], &th, &zz)?;
        let m = tape.mean(lp)?;
        tape.scale(m, -1.0)
    }
}

/// Fits a fresh flow to `(θ, z)` rows by maximum likelihood. Whitening
/// statistics come from the training rows only.
#[allow(clippy::too_many_arguments)]
pub fn train_posterior(
    spec: &FlowSpec,
    z: &[Vec<f64>],
    theta: &[Vec<f64>],
    train: &[usize],
    val: &[usize],
    cfg: &FitCfg,
    seed: u64,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<(FlowModel, FitReport)> {
    let Some(&first) = train.first() else {
        return Err(TensorError::InvalidArgument {
            op: "train_posterior",
            reason: "no training rows".into(),
        });
    };
    let (d, n_z) = (theta[first].len(), z[first].len());
    if let Some(&i) = train.iter().chain(val).find(|&&i| z[i].len() != n_z || theta[i].len() != d) {
        return Err(TensorError::InvalidArgument {
            op: "train_posterior",
            reason: format!("row {i} has widths ({}, {}), expected ({d}, {n_z})", theta[i].len(), z[i].len()),
        });
    }
    let mut flow = FlowModel::new(spec.clone(), d, n_z, &mut rng::rng(seed, &[stream::INIT]));
    let th_rows: Vec<&[f64]> = train.iter().map(|&i| theta[i].as_slice()).collect();
    flow.theta_white = Whitening::fit(&th_rows);
    if n_z > 0 {
        let z_rows: Vec<&[f64]> = train.iter().map(|&i| z[i].as_slice()).collect();
        flow.z_white = Whitening::fit(&z_rows);
    }
    let mut obj = FlowObjective { flow, z, theta };
    let report = fit(&mut obj, train, val, cfg, seed, log)?;
    Ok((obj.flow, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randomize(flow: &mut FlowModel<f64>, seed: u64, scale: f64) {
        let mut r = rng::rng(seed, &[]);
        for t in flow.params.tensors.iter_mut() {
            let noise: Tensor<f64> = normal_tensor(&mut r, t.shape(), scale);
            *t = noise;
        }
    }

    fn small_spec(layers: usize) -> FlowSpec {
        FlowSpec {
            layers,
            hidden: vec![8, 8],
            ..FlowSpec::default()
        }
    }

    #[test]
    fn identity_flow_is_standard_normal() {
        let flow: FlowModel<f64> = FlowModel::new(FlowSpec::default(), 2, 3, &mut rng::rng(1, &[]));
        let lp = flow.log_prob(&[vec![0.0, 0.0]], &[vec![0.3, -1.0, 2.0]]).unwrap();
        assert!((lp[0] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let lp = flow.log_prob(&[vec![1.0, -2.0]], &[vec![0.0; 3]]).unwrap();
        assert!((lp[0] - (-LN_2PI - 2.5)).abs() < 1e-12);
    }

    #[test]
    fn single_affine_layer_matches_gaussian() {
        // Zero hidden-path weights leave μ and α equal to the output biases.
        let mut flow: FlowModel<f64> = FlowModel::new(small_spec(1), 1, 1, &mut rng::rng(2, &[]));
        let (mu, sigma): (f64, f64) = (1.5, 0.4);
        let last = flow.params.len() - 1;
        // x = u·exp(α) + μ, so exp(α) = σ.
        flow.params.tensors[last] = Tensor::from_f64(&[2], &[mu, sigma.ln()]).unwrap();
        for x in [-1.0, 0.3, 1.5, 2.9] {
            let lp = flow.log_prob(&[vec![x]], &[vec![0.7]]).unwrap()[0];
            let expect = -0.5 * ((x - mu) / sigma).powi(2) - sigma.ln() - 0.5 * LN_2PI;
            assert!((lp - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn made_outputs_are_autoregressive() {
        let d = 3;
        let mut flow: FlowModel<f64> = FlowModel::new(small_spec(2), d, 2, &mut rng::rng(3, &[]));
        randomize(&mut flow, 4, 0.5);
        for layer in 0..2 {
            let eval = |x: &[f64]| {
                let mut tape = Tape::new();
                let ids = flow.params.bind_frozen(&mut tape);
                let xn = tape.constant(Tensor::from_f64(&[1, d], x).unwrap());
                let zn = tape.constant(Tensor::from_f64(&[1, 2], &[0.2, -0.4]).unwrap());
                let (mu, a) = flow.made(&mut tape, &ids, layer, xn, zn).unwrap();
                (tape.value(mu).to_f64_vec(), tape.value(a).to_f64_vec())
            };
            let x0 = [0.3, -0.7, 1.1];
            let (mu0, a0) = eval(&x0);
            for j in 0..d {
                let mut x1 = x0;
                x1[j] += 0.37;
                let (mu1, a1) = eval(&x1);
                for i in 0..d {
                    let allowed = var_degree(j, d, layer) < var_degree(i, d, layer);
                    if !allowed {
                        assert_eq!(mu0[i].to_bits(), mu1[i].to_bits(), "layer {layer}: μ{i} moved with x{j}");
                        assert_eq!(a0[i].to_bits(), a1[i].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        let mut flow: FlowModel<f64> = FlowModel::new(FlowSpec::default(), 2, 3, &mut rng::rng(5, &[]));
        randomize(&mut flow, 6, 0.2);
        let mut r = rng::rng(7, &[]);
        let u: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..2).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        let z: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        let x = flow.inverse(&u, &z).unwrap();
        let (back, _) = flow.transform(&x, &z).unwrap();
        for (a, b) in u.iter().flatten().zip(back.iter().flatten()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn log_det_matches_numerical_jacobian() {
        let mut flow: FlowModel<f64> = FlowModel::new(FlowSpec::default(), 2, 2, &mut rng::rng(8, &[]));
        randomize(&mut flow, 9, 0.2);
        let z = vec![vec![0.4, -0.1]];
        let h = 1e-5;
        for x0 in [[0.1, 0.2], [-1.3, 0.8], [2.0, -0.5]] {
            let (_, ld) = flow.transform(&[x0.to_vec()], &z).unwrap();
            let mut jac = [[0.0; 2]; 2];
            for j in 0..2 {
                let mut p = x0;
                let mut m = x0;
                p[j] += h;
                m[j] -= h;
                let up = flow.transform(&[p.to_vec()], &z).unwrap().0;
                let um = flow.transform(&[m.to_vec()], &z).unwrap().0;
                for i in 0..2 {
                    jac[i][j] = (up[0][i] - um[0][i]) / (2.0 * h);
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            assert!((det.abs().ln() - ld[0]).abs() < 1e-4, "{} vs {}", det.abs().ln(), ld[0]);
        }
    }

    #[test]
    fn identity_samples_are_standard_normal() {
        let flow: FlowModel<f32> = FlowModel::new(FlowSpec::default(), 2, 1, &mut rng::rng(1, &[]));
        let n = 10_000;
        let s = flow.sample(&[0.5], n, 3).unwrap();
        for d in 0..2 {
            let m = s.iter().map(|r| r[d]).sum::<f64>() / n as f64;
            let v = s.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / n as f64;
            assert!(m.abs() < 4.0 / (n as f64).sqrt());
            assert!((v - 1.0).abs() < 0.1);
        }
        // Importance weights p/q are all equal when sampling from the flow itself.
        let lp = flow.log_prob(&s[..100], &vec![vec![0.5]; 100]).unwrap();
        let w: Vec<f64> = s[..100]
            .iter()
            .zip(&lp)
            .map(|(x, l)| {
                let q = -LN_2PI - 0.5 * (x[0] * x[0] + x[1] * x[1]);
                (l - q).exp()
            })
            .collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(w.iter().all(|x| (x / mean - 1.0).abs() < 0.01));
        assert_eq!(s, flow.sample(&[0.5], n, 3).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut flow: FlowModel<f64> = FlowModel::new(small_spec(2), 2, 3, &mut rng::rng(1, &[]));
        randomize(&mut flow, 2, 0.3);
        let mut f32flow: FlowModel<f32> = flow.cast();
        f32flow.theta_white = Whitening {
            mean: vec![1.0, 2.0],
            std: vec![0.5, 3.0],
        };
        let back = FlowModel::from_checkpoint(&f32flow.to_checkpoint()).unwrap();
        assert_eq!(back, f32flow);
    }

    #[test]
    fn learns_independent_standard_normal() {
        let mut r = rng::rng(11, &[]);
        let n = 3000;
        let theta: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        let z: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![StandardNormal.sample(&mut r)])
            .collect();
        let idx: Vec<usize> = (0..n).collect();
        let cfg = FitCfg {
            max_epochs: 30,
            patience: 5,
            ..FitCfg::default()
        };
        let (_, rep) = train_posterior(&small_spec(2), &z, &theta, &idx[..2100], &idx[2100..], &cfg, 1, &mut |_| {}).unwrap();
        let entropy = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((rep.best_val - entropy).abs() < 0.05, "val NLL {} vs {entropy}", rep.best_val);
    }

    #[test]
    fn conditions_on_z_when_row_zero_is_unused() {
        // Only the job's rows carry a context vector; row 0 is outside the job.
        let mut r = rng::rng(12, &[]);
        let n = 1500;
        let mut theta = Vec::new();
        let mut z = vec![Vec::new()];
        theta.push(vec![0.0]);
        for _ in 1..n {
            let c: f64 = StandardNormal.sample(&mut r);
            let e: f64 = StandardNormal.sample(&mut r);
            theta.push(vec![c + 0.1 * e]);
            z.push(vec![c]);
        }
        let idx: Vec<usize> = (1..n).collect();
        let cfg = FitCfg {
            max_epochs: 40,
            patience: 5,
            ..FitCfg::default()
        };
        let (flow, rep) = train_posterior(&small_spec(2), &z, &theta, &idx[..1000], &idx[1000..], &cfg, 1, &mut |_| {}).unwrap();
        assert_eq!(flow.n_z, 1);
        // The marginal has entropy near 1.4; the conditional near -0.9.
        assert!(rep.best_val < 0.0, "val NLL {}", rep.best_val);

        z[5] = vec![0.0, 1.0];
        let err = train_posterior(&small_spec(2), &z, &theta, &idx[..1000], &idx[1000..], &cfg, 1, &mut |_| {});
        assert!(matches!(err, Err(TensorError::InvalidArgument { .. })));
    }
}
