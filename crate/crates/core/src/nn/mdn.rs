use serde::{Deserialize, Serialize};

use super::{dense_stack, init_dense_stack, Activation, MlpSpec, ParamSet};
use crate::rng::Rng;
use crate::tensor::{lse_f64, NodeId, Real, Result, Tape, Tensor, TensorError};

/// Clamp on the raw log standard deviation, i.e. `σ ∈ [1e-3, 10]` in scaled
/// parameter units.
pub const LOG_STD_MIN: f64 = -6.907_755_278_982_137; // ln 1e-3
pub const LOG_STD_MAX: f64 = 2.302_585_092_994_046; // ln 10

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Affine map `u = (θ − center) / scale` into the unit scale the density
/// heads work in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaScaler {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ThetaScaler {
    pub fn identity(d: usize) -> Self {
        Self {
            center: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Center and half-width of a box.
    pub fn from_bounds(lower: &[f64], upper: &[f64]) -> Self {
        Self {
            center: lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect(),
            scale: lower.iter().zip(upper).map(|(l, u)| 0.5 * (u - l)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn scale_tensor<T: Real>(&self, theta: &Tensor<T>) -> Tensor<T> {
        let d = self.dim();
        let mut out = theta.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = T::from_f64((v.as_f64() - self.center[j]) / self.scale[j]);
        }
        out
    }

    /// `log |det ∂u/∂θ|`.
    pub fn log_jacobian(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdnSpec {
    pub trunk: MlpSpec,
    pub components: usize,
}

impl MdnSpec {
    /// One 64-unit hidden layer, five components.
    pub fn cm21() -> Self {
        Self {
            trunk: MlpSpec::new(vec![64], Activation::Relu),
            components: 5,
        }
    }

    /// Hidden layers [70, 70], four components.
    pub fn wl() -> Self {
        Self {
            trunk: MlpSpec::new(vec![70, 70], Activation::Relu),
            components: 4,
        }
    }
}

/// Gaussian mixture with diagonal covariances, in raw parameter units.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    /// `K × D`
    pub means: Vec<Vec<f64>>,
    /// `K × D`, strictly positive.
    pub stds: Vec<Vec<f64>>,
}

impl MixtureParams {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// `log Σₖ wₖ Πᵈ N(θᵈ; μₖᵈ, σₖᵈ)` via log-sum-exp.
    pub fn log_prob(&self, theta: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|k| {
                let lp: f64 = theta
                    .iter()
                    .zip(self.means[k].iter().zip(&self.stds[k]))
                    .map(|(&x, (&m, &s))| {
                        let z = (x - m) / s;
                        -0.5 * z * z - s.ln() - HALF_LN_2PI
                    })
                    .sum();
                self.weights[k].ln() + lp
            })
            .collect();
        lse_f64(&terms)
    }
}

/// Tape handles for a batch of mixtures in scaled units.
#[derive(Debug, Clone, Copy)]
pub struct MixtureNodes {
    /// `(B, K)` unnormalized weight logits.
    pub logits: NodeId,
    /// `(B, K, D)`
    pub means: NodeId,
    /// `(B, K, D)` clamped log standard deviations.
    pub log_std: NodeId,
}

/// Mixture density network `q(θ | z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdn<T: Real = f32> {
    pub spec: MdnSpec,
    pub n_z: usize,
    pub d_theta: usize,
    pub scaler: ThetaScaler,
    pub params: ParamSet<T>,
}

impl<T: Real> Mdn<T> {
    pub fn new(spec: MdnSpec, n_z: usize, scaler: ThetaScaler, rng: &mut Rng) -> Self {
        let d = scaler.dim();
        let k = spec.components;
        let mut params = ParamSet::default();
        let out = k + 2 * k * d;
        init_dense_stack(
            &mut params,
            "mdn",
            n_z,
            &spec.trunk.hidden,
            out,
            spec.trunk.activation,
            rng,
        );
        // Spread component means over the scaled prior range [-1, 1].
        let bias = params.tensors.last_mut().unwrap();
        for c in 0..k {
            let m = -1.0 + 2.0 * (c as f64 + 0.5) / k as f64;
            for j in 0..d {
                bias.data_mut()[k + c * d + j] = T::from_f64(m);
            }
        }
        Self {
            spec,
            n_z,
            d_theta: d,
            scaler,
            params,
        }
    }

    pub fn components(&self) -> usize {
        self.spec.components
    }

    pub fn forward(&self, tape: &mut Tape<T>, ids: &[NodeId], z: NodeId) -> Result<MixtureNodes> {
        let s = tape.shape(z);
        if s.len() != 2 || s[1] != self.n_z {
            return Err(TensorError::ShapeMismatch {
                op: "mdn",
                shapes: vec![s.to_vec(), vec![self.n_z]],
            });
        }
        let b = s[0];
        let (k, d) = (self.components(), self.d_theta);
        let raw = dense_stack(tape, ids, z, self.spec.trunk.activation)?;
        let logits = tape.slice(raw, 0, k)?;
        let means = tape.slice(raw, k, k + k * d)?;
        let means = tape.reshape(means, &[b, k, d])?;
        let ls = tape.slice(raw, k + k * d, k + 2 * k * d)?;
        let ls = tape.clamp(ls, LOG_STD_MIN, LOG_STD_MAX)?;
        let log_std = tape.reshape(ls, &[b, k, d])?;
        Ok(MixtureNodes {
            logits,
            means,
            log_std,
        })
    }

    /// Per-row `log q(θ | z)` in raw parameter units, shape `(B,)`.
    pub fn log_prob(
        &self,
        tape: &mut Tape<T>,
        mix: &MixtureNodes,
        theta: &Tensor<T>,
    ) -> Result<NodeId> {
        let (k, d) = (self.components(), self.d_theta);
        let b = theta.shape()[0];
        if theta.shape() != [b, d] || tape.shape(mix.means)[0] != b {
            return Err(TensorError::ShapeMismatch {
                op: "mdn_log_prob",
                shapes: vec![theta.shape().to_vec(), tape.shape(mix.means).to_vec()],
            });
        }
        let u = self.scaler.scale_tensor(theta);
        let mut tiled = Vec::with_capacity(b * k * d);
        for row in u.data().chunks(d) {
            for _ in 0..k {
                tiled.extend_from_slice(row);
            }
        }
        let u = tape.constant(Tensor::new(vec![b, k, d], tiled)?);
        let diff = tape.sub(u, mix.means)?;
        let neg_ls = tape.scale(mix.log_std, -1.0)?;
        let inv_std = tape.exp(neg_ls)?;
        let zs = tape.mul(diff, inv_std)?;
        let sq = tape.mul(zs, zs)?;
        let quad = tape.scale(sq, -0.5)?;
        let per_dim = tape.sub(quad, mix.log_std)?;
        let per_dim = tape.add_scalar(per_dim, -HALF_LN_2PI)?;
        let comp = tape.sum_last(per_dim)?;
        let joint = tape.add(comp, mix.logits)?;
        let num = tape.logsumexp(joint)?;
        let den = tape.logsumexp(mix.logits)?;
        let lp = tape.sub(num, den)?;
        tape.add_scalar(lp, self.scaler.log_jacobian())
    }

    /// Mixture parameters for each row of `z`, in raw parameter units.
    pub fn mixture_params(&self, z: &Tensor<T>) -> Result<Vec<MixtureParams>> {
        let mut tape = Tape::new();
        let ids = self.params.bind_frozen(&mut tape);
        let zn = tape.constant(z.clone());
        let mix = self.forward(&mut tape, &ids, zn)?;
        let w = tape.softmax(mix.logits)?;
        let (k, d) = (self.components(), self.d_theta);
        let wv = tape.value(w).to_f64_vec();
        let mv = tape.value(mix.means).to_f64_vec();
        let sv = tape.value(mix.log_std).to_f64_vec();
        let b = z.shape()[0];
        Ok((0..b)
            .map(|r| MixtureParams {
                weights: wv[r * k..(r + 1) * k].to_vec(),
                means: (0..k)
                    .map(|c| {
                        (0..d)
                            .map(|j| {
                                let u = mv[(r * k + c) * d + j];
                                self.scaler.center[j] + self.scaler.scale[j] * u
                            })
                            .collect()
                    })
                    .collect(),
                stds: (0..k)
                    .map(|c| {
                        (0..d)
                            .map(|j| self.scaler.scale[j] * sv[(r * k + c) * d + j].exp())
                            .collect()
                    })
                    .collect(),
            })
            .collect())
    }

    /// Mean `log q(θ | z)` over rows, evaluated without gradients.
    pub fn mean_log_prob(&self, z: &Tensor<T>, theta: &Tensor<T>, batch: usize) -> Result<f64> {
        let n = z.shape()[0];
        let mut total = 0.0;
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let mut tape = Tape::new();
            let ids = self.params.bind_frozen(&mut tape);
            let zn = tape.constant(z.rows(start, end));
            let mix = self.forward(&mut tape, &ids, zn)?;
            let lp = self.log_prob(&mut tape, &mix, &theta.rows(start, end))?;
            total += tape.value(lp).data().iter().map(|v| v.as_f64()).sum::<f64>();
            start = end;
        }
        Ok(total / n as f64)
    }

    pub fn cast<U: Real>(&self) -> Mdn<U> {
        Mdn {
            spec: self.spec.clone(),
            n_z: self.n_z,
            d_theta: self.d_theta,
            scaler: self.scaler.clone(),
            params: self.params.cast(),
        }
    }
}
