//! Mutual-information objectives and stage-1 compressor training.
//!
//! The compressor output `s(d)` is concatenated with the normalized existing
//! summary `t(d)` to form `z = [s, t]`, which feeds either a mixture density
//! head (EPE objective, `−E log q(θ | z)`) or a joint/marginal classifier
//! (CE objective, `E_joint sp(−c) + E_marginal sp(c)`).

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::io::Dataset;
use crate::nn::train::{fit, FitCfg, FitReport, Objective, Pass};
use crate::nn::{Classifier, Cnn, EpochRecord, Mdn, ParamSet};
use crate::rng::{self, stream};
use crate::sim::add_noise_into;
use crate::summaries::{SpectrumEstimator, SummaryNormalizer};
use crate::tensor::{NodeId, Real, Result, Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Epe,
    Ce,
}

/// One minibatch. `fields` feed the compressor, `t` is the precomputed
/// (already normalized) existing summary.
#[derive(Debug, Clone)]
pub struct Batch<T: Real = f32> {
    pub fields: Option<Tensor<T>>,
    pub theta: Tensor<T>,
    pub t: Option<Tensor<T>>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head<T: Real = f32> {
    Mdn(Mdn<T>),
    Classifier(Classifier<T>),
}

impl<T: Real> Head<T> {
    pub fn params(&self) -> &ParamSet<T> {
        match self {
            Head::Mdn(m) => &m.params,
            Head::Classifier(c) => &c.mlp.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        match self {
            Head::Mdn(m) => &mut m.params,
            Head::Classifier(c) => &mut c.mlp.params,
        }
    }

    pub fn kind(&self) -> LossKind {
        match self {
            Head::Mdn(_) => LossKind::Epe,
            Head::Classifier(_) => LossKind::Ce,
        }
    }
}

/// Optional compressor CNN plus a loss head over `z = [s, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel<T: Real = f32> {
    pub cnn: Option<Cnn<T>>,
    pub head: Head<T>,
    /// Multiplies raw pixels before the CNN (train-split `1/std`).
    pub input_scale: f64,
}

impl<T: Real> HybridModel<T> {
    pub fn param_sets(&self) -> Vec<&ParamSet<T>> {
        let mut v: Vec<&ParamSet<T>> = self.cnn.iter().map(|c| &c.params).collect();
        v.push(self.head.params());
        v
    }

    pub fn param_sets_mut(&mut self) -> Vec<&mut ParamSet<T>> {
        let mut v: Vec<&mut ParamSet<T>> = self.cnn.iter_mut().map(|c| &mut c.params).collect();
        v.push(self.head.params_mut());
        v
    }

    fn split_ids<'a>(&self, ids: &'a [Vec<NodeId>]) -> (Option<&'a [NodeId]>, &'a [NodeId]) {
        if self.cnn.is_some() {
            (Some(&ids[0]), &ids[1])
        } else {
            (None, &ids[0])
        }
    }

    /// Records `z = [s(d), t]` for the batch.
    pub fn embed(&self, tape: &mut Tape<T>, ids: &[Vec<NodeId>], batch: &Batch<T>) -> Result<NodeId> {
        let (cnn_ids, _) = self.split_ids(ids);
        let mut parts = Vec::new();
        if let (Some(cnn), Some(cnn_ids)) = (&self.cnn, cnn_ids) {
            let fields = batch.fields.as_ref().ok_or(TensorError::InvalidArgument {
                op: "embed",
                reason: "compressor model needs fields in the batch".into(),
            })?;
            let x = tape.constant(fields.clone());
            let x = tape.scale(x, self.input_scale)?;
            parts.push(cnn.forward(tape, cnn_ids, x)?);
        }
        if let Some(t) = &batch.t {
            parts.push(tape.constant(t.clone()));
        }
        match parts.len() {
            0 => Err(TensorError::InvalidArgument {
                op: "embed",
                reason: "neither a compressor nor t summaries".into(),
            }),
            1 => Ok(parts[0]),
            _ => tape.concat(&parts),
        }
    }

    /// `−mean log q(θ | z)`.
    pub fn epe_loss(&self, tape: &mut Tape<T>, ids: &[Vec<NodeId>], batch: &Batch<T>) -> Result<NodeId> {
        let Head::Mdn(mdn) = &self.head else {
            return Err(TensorError::InvalidArgument {
                op: "epe_loss",
                reason: "EPE needs a mixture density head".into(),
            });
        };
        let z = self.embed(tape, ids, batch)?;
        let (_, head_ids) = self.split_ids(ids);
        let mix = mdn.forward(tape, head_ids, z)?;
        let lp = mdn.log_prob(tape, &mix, &batch.theta)?;
        let m = tape.mean(lp)?;
        tape.scale(m, -1.0)
    }

    /// Joint pairs `(θᵢ, zᵢ)` against marginal pairs `(θ_{π(i)}, zᵢ)`.
    pub fn ce_loss(
        &self,
        tape: &mut Tape<T>,
        ids: &[Vec<NodeId>],
        batch: &Batch<T>,
        perm: &[usize],
    ) -> Result<NodeId> {
        let Head::Classifier(clf) = &self.head else {
            return Err(TensorError::InvalidArgument {
                op: "ce_loss",
                reason: "CE needs a classifier head".into(),
            });
        };
        if batch.len() < 2 || perm.len() != batch.len() {
            return Err(TensorError::InvalidArgument {
                op: "ce_loss",
                reason: format!("batch of {} with permutation of {}", batch.len(), perm.len()),
            });
        }
        let z = self.embed(tape, ids, batch)?;
        let (_, head_ids) = self.split_ids(ids);
        let joint = clf.logits(tape, head_ids, &batch.theta, z)?;
        let shuffled = batch.theta.select_rows(perm);
        let marginal = clf.logits(tape, head_ids, &shuffled, z)?;
        ce_from_logits(tape, joint, marginal)
    }

    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        ids: &[Vec<NodeId>],
        batch: &Batch<T>,
        perm_seed: u64,
    ) -> Result<NodeId> {
        match self.head {
            Head::Mdn(_) => self.epe_loss(tape, ids, batch),
            Head::Classifier(_) => {
                let perm = permutation(batch.len(), perm_seed);
                self.ce_loss(tape, ids, batch, &perm)
            }
        }
    }

    /// Frozen learned summaries `s(d)` for `(N, H, W, C)` fields.
    pub fn learned_summaries(&self, fields: &Tensor<T>, batch: usize) -> Result<Vec<Vec<f64>>> {
        let cnn = self.cnn.as_ref().ok_or(TensorError::InvalidArgument {
            op: "learned_summaries",
            reason: "model has no compressor".into(),
        })?;
        let scale = self.input_scale;
        cnn.summarize(&fields.map(|x| T::from_f64(x.as_f64() * scale)), batch)
    }

    pub fn cast<U: Real>(&self) -> HybridModel<U> {
        HybridModel {
            cnn: self.cnn.as_ref().map(Cnn::cast),
            head: match &self.head {
                Head::Mdn(m) => Head::Mdn(m.cast()),
                Head::Classifier(c) => Head::Classifier(c.cast()),
            },
            input_scale: self.input_scale,
        }
    }
}

/// `mean sp(−c_joint) + mean sp(c_marginal)`.
pub fn ce_from_logits<T: Real>(tape: &mut Tape<T>, joint: NodeId, marginal: NodeId) -> Result<NodeId> {
    let neg = tape.scale(joint, -1.0)?;
    let a = tape.softplus(neg)?;
    let a = tape.mean(a)?;
    let b = tape.softplus(marginal)?;
    let b = tape.mean(b)?;
    tape.add(a, b)
}

/// Uniform random permutation of `0..n` (fixed points allowed).
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng::rng(seed, &[stream::PERMUTE]));
    p
}

/// Produces aligned batches for a set of row indices.
pub trait BatchSource {
    fn batch(&mut self, rows: &[usize], pass: Pass) -> Batch<f32>;
}

/// Precomputed `z` rows with their parameters (no compressor input).
#[derive(Debug, Clone)]
pub struct MemorySource {
    pub z: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
}

impl BatchSource for MemorySource {
    fn batch(&mut self, rows: &[usize], _: Pass) -> Batch<f32> {
        Batch {
            fields: None,
            theta: rows_tensor(&self.theta, rows),
            t: Some(rows_tensor(&self.z, rows)),
        }
    }
}

pub fn rows_tensor(data: &[Vec<f64>], rows: &[usize]) -> Tensor<f32> {
    let w = data[rows[0]].len();
    let flat: Vec<f64> = rows.iter().flat_map(|&i| data[i].iter().copied()).collect();
    Tensor::from_f64(&[rows.len(), w], &flat).expect("rows share a width")
}

/// Noise seed of the fixed observation of dataset row `i`.
pub fn observation_seed(obs_seed: u64, i: usize) -> u64 {
    rng::derive_seed(obs_seed, &[stream::OBS_NOISE, i as u64])
}

/// The fixed noisy observation of dataset row `i`.
pub fn observe(ds: &Dataset, i: usize, sigma_n: f64, obs_seed: u64) -> Vec<f32> {
    let mut out = vec![0.0; ds.field_len()];
    add_noise_into(ds.field(i), sigma_n, observation_seed(obs_seed, i), &mut out);
    out
}

/// Batches of simulated fields. Training passes draw fresh noise per epoch
/// (and recompute `t` from the noisy field); validation uses the fixed
/// observation noise and the cached reference `t`.
pub struct FieldSource<'a> {
    pub ds: &'a Dataset,
    /// Normalized `t` of the fixed observations, one row per dataset row.
    pub ref_t: &'a [Vec<f64>],
    pub normalizer: &'a SummaryNormalizer,
    pub estimator: SpectrumEstimator,
    pub sigma_n: f64,
    pub obs_seed: u64,
    pub train_seed: u64,
    pub use_fields: bool,
    pub use_t: bool,
    /// Random rotation/reflection of each training field per epoch.
    pub augment: bool,
}

/// Applies element `k` (0..8) of the square's symmetry group to an
/// `(n, n, c)` field: bit 2 transposes, bits 0 and 1 flip rows and columns.
pub fn dihedral(src: &[f32], n: usize, c: usize, k: u8, dst: &mut [f32]) {
    for y in 0..n {
        for x in 0..n {
            let (mut sy, mut sx) = if k & 4 != 0 { (x, y) } else { (y, x) };
            if k & 1 != 0 {
                sy = n - 1 - sy;
            }
            if k & 2 != 0 {
                sx = n - 1 - sx;
            }
            let (d, s) = ((y * n + x) * c, (sy * n + sx) * c);
            dst[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
}

impl BatchSource for FieldSource<'_> {
    fn batch(&mut self, rows: &[usize], pass: Pass) -> Batch<f32> {
        let ds = self.ds;
        let fl = ds.field_len();
        let fresh = matches!(pass, Pass::Train { .. }) && self.sigma_n > 0.0;
        let mut fields = Vec::with_capacity(if self.use_fields { rows.len() * fl } else { 0 });
        let mut t = Vec::with_capacity(rows.len());
        let mut buf = vec![0f32; fl];
        let mut turned = vec![0f32; if self.augment { fl } else { 0 }];
        for &i in rows {
            let seed = match pass {
                Pass::Train { epoch } if fresh => {
                    rng::derive_seed(self.train_seed, &[stream::NOISE, epoch as u64, i as u64])
                }
                _ => observation_seed(self.obs_seed, i),
            };
            if self.use_fields || fresh {
                add_noise_into(ds.field(i), self.sigma_n, seed, &mut buf);
            }
            if let (true, Pass::Train { epoch }) = (self.augment, pass) {
                let k = rng::rng(self.train_seed, &[stream::NOISE, epoch as u64, i as u64, 1]).random_range(0..8);
                dihedral(&buf, ds.size, ds.channels, k, &mut turned);
                std::mem::swap(&mut buf, &mut turned);
            }
            if self.use_fields {
                fields.extend_from_slice(&buf);
            }
            if self.use_t {
                if fresh {
                    let raw = quantize(&self.estimator.cross(&buf, ds.channels));
                    t.push(self.normalizer.apply(&raw));
                } else {
                    t.push(self.ref_t[i].clone());
                }
            }
        }
        let thetas: Vec<Vec<f64>> = rows.iter().map(|&i| ds.theta(i)).collect();
        let all: Vec<usize> = (0..rows.len()).collect();
        Batch {
            fields: self.use_fields.then(|| {
                Tensor::new(vec![rows.len(), ds.size, ds.size, ds.channels], fields).expect("field block")
            }),
            theta: rows_tensor(&thetas, &all),
            t: self.use_t.then(|| rows_tensor(&t, &all)),
        }
    }
}

/// Rounds summaries through `f32`, the precision they are cached at.
pub fn quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

struct Stage1<'s, S: BatchSource> {
    model: HybridModel,
    source: &'s mut S,
    seed: u64,
}

impl<S: BatchSource> Objective for Stage1<'_, S> {
    fn params(&self) -> Vec<&ParamSet> {
        self.model.param_sets()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamSet> {
        self.model.param_sets_mut()
    }

    fn loss(&mut self, tape: &mut Tape<f32>, ids: &[Vec<NodeId>], rows: &[usize], pass: Pass) -> Result<NodeId> {
        let batch = self.source.batch(rows, pass);
        let tag = match pass {
            Pass::Train { epoch } => epoch as u64,
            Pass::Validate => u64::MAX,
        };
        let perm_seed = rng::derive_seed(self.seed, &[stream::PERMUTE, tag, rows[0] as u64]);
        self.model.loss(tape, ids, &batch, perm_seed)
    }
}

/// Trains compressor and head jointly with early stopping and returns the
/// best-validation model; the compressor is frozen from then on.
pub fn train_compressor<S: BatchSource>(
    model: HybridModel,
    source: &mut S,
    train: &[usize],
    val: &[usize],
    cfg: &FitCfg,
    seed: u64,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<(HybridModel, FitReport)> {
    let mut obj = Stage1 { model, source, seed };
    let report = fit(&mut obj, train, val, cfg, seed, log)?;
    Ok((obj.model, report))
}

/// Barber–Agakov bound `E[log q(θ|z)] + h(θ)` with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiBound {
    pub nats: f64,
    pub se: f64,
}

pub fn mi_lower_bound(log_q: &[f64], prior_entropy: f64) -> MiBound {
    let n = log_q.len() as f64;
    let mean = log_q.iter().sum::<f64>() / n;
    let var = log_q.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    MiBound {
        nats: mean + prior_entropy,
        se: (var / n).sqrt(),
    }
}

/// Entropy of an isotropic Gaussian prior with per-dimension std.
pub fn gaussian_entropy(sigmas: &[f64]) -> f64 {
    sigmas
        .iter()
        .map(|s| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * s * s).ln())
        .sum()
}

/// `I(θ; θ + ε) = ½ Σ ln(1 + σ_θ²/σ_ε²)`.
pub fn gaussian_mi(sigma_theta: &[f64], sigma_eps: &[f64]) -> f64 {
    sigma_theta
        .iter()
        .zip(sigma_eps)
        .map(|(t, e)| 0.5 * (1.0 + t * t / (e * e)).ln())
        .sum()
}

/// Linear-Gaussian toy `z = θ + ε` with independent dimensions.
pub fn linear_gaussian_toy(
    n: usize,
    sigma_theta: &[f64],
    sigma_eps: &[f64],
    seed: u64,
) -> MemorySource {
    let mut r = rng::rng(seed, &[stream::SAMPLE]);
    let mut theta = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        let th: Vec<f64> = sigma_theta
            .iter()
            .map(|&s| Normal::new(0.0, s).unwrap().sample(&mut r))
            .collect();
        let zz = th
            .iter()
            .zip(sigma_eps)
            .map(|(t, &e)| t + Normal::new(0.0, e).unwrap().sample(&mut r))
            .collect();
        theta.push(th);
        z.push(zz);
    }
    MemorySource { z, theta }
}
