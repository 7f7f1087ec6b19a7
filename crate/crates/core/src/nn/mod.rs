//! Network building blocks: parameter sets, dense stacks, CNN compressors,
//! the mixture density head, the joint/marginal classifier, Adam and the
//! early-stopping training loop.

mod adam;
mod cnn;
mod mdn;
pub mod train;

pub use adam::{grad_norm, Adam, AdamConfig};
pub use cnn::{Cnn, CnnSpec, ConvLayerSpec, Pool, Readout};
pub use mdn::{Mdn, MdnSpec, MixtureNodes, MixtureParams, ThetaScaler};
pub use train::EpochRecord;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{NodeId, Real, Result, Tape, Tensor, TensorError};

/// Leaky slope of [`smooth_leaky`] for `x → −∞`.
pub const SMOOTH_LEAKY_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    SmoothLeaky,
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::SmoothLeaky => smooth_leaky(tape, x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    /// Variance-scaling gain for fan-in initialization.
    fn gain(self) -> f64 {
        match self {
            Activation::Relu | Activation::SmoothLeaky => 2.0,
            Activation::Tanh => 1.0,
        }
    }
}

/// Smooth, monotone leaky activation `α·x + (1 − α)·x·σ(x)` with `α = 0.1`.
pub fn smooth_leaky<T: Real>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    tape.smooth_leaky(x, SMOOTH_LEAKY_ALPHA)
}

/// Scalar form of [`smooth_leaky`].
pub fn smooth_leaky_scalar(x: f64) -> f64 {
    let a = SMOOTH_LEAKY_ALPHA;
    a * x + (1.0 - a) * x * crate::tensor::sigmoid(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(hidden: Vec<usize>, activation: Activation) -> Self {
        Self { hidden, activation }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.hidden.is_empty() {
            return Err("an MLP needs at least one hidden layer".into());
        }
        if self.hidden.contains(&0) {
            return Err("MLP layer sizes must be positive".into());
        }
        Ok(())
    }
}

/// Named tensors owned by one model, in binding order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<NodeId> {
        self.tensors.iter().map(|t| tape.var(t.clone())).collect()
    }

    /// Records every tensor as a constant (frozen network).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<NodeId> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Flattened view used by finite-difference checks.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(Tensor::to_f64_vec).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = T::from_f64(*it.next().expect("flat parameter vector too short"));
            }
        }
    }

    pub fn replace_all(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len()
            || tensors
                .iter()
                .zip(&self.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(TensorError::ShapeMismatch {
                op: "param_set",
                shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
            });
        }
        self.tensors = tensors;
        Ok(())
    }
}

pub fn normal_tensor<T: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Appends the weights of a dense stack `input → hidden… → output`.
pub(crate) fn init_dense_stack<T: Real>(
    params: &mut ParamSet<T>,
    prefix: &str,
    input: usize,
    hidden: &[usize],
    output: usize,
    activation: Activation,
    rng: &mut Rng,
) {
    let mut fan_in = input;
    for (i, &h) in hidden.iter().enumerate() {
        let std = (activation.gain() / fan_in as f64).sqrt();
        params.push(format!("{prefix}{i}.w"), normal_tensor(rng, &[fan_in, h], std));
        params.push(format!("{prefix}{i}.b"), Tensor::zeros(&[h]));
        fan_in = h;
    }
    let std = (1.0 / fan_in as f64).sqrt();
    params.push(
        format!("{prefix}{}.w", hidden.len()),
        normal_tensor(rng, &[fan_in, output], std),
    );
    params.push(format!("{prefix}{}.b", hidden.len()), Tensor::zeros(&[output]));
}

/// Applies a dense stack bound as `[w0, b0, w1, b1, …]`; no activation after
/// the last layer.
pub(crate) fn dense_stack<T: Real>(
    tape: &mut Tape<T>,
    ids: &[NodeId],
    x: NodeId,
    activation: Activation,
) -> Result<NodeId> {
    let layers = ids.len() / 2;
    let mut h = x;
    for l in 0..layers {
        h = tape.matmul(h, ids[2 * l])?;
        h = tape.add(h, ids[2 * l + 1])?;
        if l + 1 < layers {
            h = activation.apply(tape, h)?;
        }
    }
    Ok(h)
}

/// Fully connected network `input → spec.hidden… → output`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Real = f32> {
    pub spec: MlpSpec,
    pub input: usize,
    pub output: usize,
    pub params: ParamSet<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new(input: usize, spec: MlpSpec, output: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::default();
        init_dense_stack(
            &mut params,
            "dense",
            input,
            &spec.hidden,
            output,
            spec.activation,
            rng,
        );
        Self {
            spec,
            input,
            output,
            params,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.input {
            return Err(TensorError::ShapeMismatch {
                op: "mlp",
                shapes: vec![s.to_vec(), vec![self.input]],
            });
        }
        dense_stack(tape, ids, x, self.spec.activation)
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            spec: self.spec.clone(),
            input: self.input,
            output: self.output,
            params: self.params.cast(),
        }
    }
}

/// Classifier `c(θ, z)` of the cross-entropy objective: an MLP over the
/// concatenation `[θ_scaled, z]` with a single logit output.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T: Real = f32> {
    pub mlp: Mlp<T>,
    pub scaler: ThetaScaler,
}

impl<T: Real> Classifier<T> {
    pub fn new(d_theta: usize, n_z: usize, spec: MlpSpec, scaler: ThetaScaler, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::new(d_theta + n_z, spec, 1, rng),
            scaler,
        }
    }

    /// Logits `(B,)` for raw parameters `theta: (B, D)` and summaries `z: (B, n_z)`.
    pub fn logits(
        &self,
        tape: &mut Tape<T>,
        ids: &[NodeId],
        theta: &Tensor<T>,
        z: NodeId,
    ) -> Result<NodeId> {
        let th = tape.constant(self.scaler.scale_tensor(theta));
        let x = tape.concat(&[th, z])?;
        let out = self.mlp.forward(tape, ids, x)?;
        tape.sum_last(out)
    }

    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            mlp: self.mlp.cast(),
            scaler: self.scaler.clone(),
        }
    }
}
