//! Synthetic non-Gaussian field simulators.
//!
//! A Gaussian random field `g` with isotropic spectrum `P(k) = A·k^(−n)` is
//! drawn by filtering real white noise in Fourier space, so the Hermitian
//! symmetry of the modes comes for free. Channel `c` uses `g` smoothed by a
//! Gaussian of width `c·smoothing` pixels and is then made non-Gaussian with a
//! local quadratic term `f_ng·(c + 1)·(g_c² − ⟨g_c²⟩)`.
//!
//! Wavenumbers are in radians per pixel (box side `L = H`), so the
//! fundamental mode is `2π/H` and the Nyquist frequency `π`.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fourier::{wavenumber, Fft2};
use crate::rng::{self, stream};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid prior box: {0}")]
    InvalidPrior(String),
    #[error("parameter {name} = {value} outside prior [{lo}, {hi}]")]
    OutOfPrior {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
}

pub type ParamVector = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl PriorBox {
    pub fn new(names: &[&str], lower: &[f64], upper: &[f64]) -> Result<Self, SimError> {
        let b = Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            lower: lower.to_vec(),
            upper: upper.to_vec(),
        };
        b.validate()?;
        Ok(b)
    }

    /// Ionization efficiency `ζ ∈ [10, 250]` and `log₁₀ T_vir ∈ [4, 6]`.
    pub fn cm21() -> Self {
        Self::new(&["zeta", "log10_tvir"], &[10.0, 4.0], &[250.0, 6.0]).unwrap()
    }

    /// `Ω_m ∈ [0.15, 0.7]`, `S_8 ∈ [0.35, 1.52]`.
    pub fn wl() -> Self {
        Self::new(&["omega_m", "s8"], &[0.15, 0.35], &[0.7, 1.52]).unwrap()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let d = self.lower.len();
        if d == 0 || self.upper.len() != d || self.names.len() != d {
            return Err(SimError::InvalidPrior(format!(
                "{} names, {} lower, {} upper bounds",
                self.names.len(),
                d,
                self.upper.len()
            )));
        }
        for i in 0..d {
            if !(self.lower[i] < self.upper[i]) || !self.lower[i].is_finite() || !self.upper[i].is_finite() {
                return Err(SimError::InvalidPrior(format!(
                    "{}: lower {} must be below upper {}",
                    self.names[i], self.lower[i], self.upper[i]
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    /// Differential entropy of the uniform prior, `ln(volume)`.
    pub fn log_volume(&self) -> f64 {
        self.widths().iter().map(|w| w.ln()).sum()
    }

    pub fn check(&self, theta: &[f64]) -> Result<(), SimError> {
        if theta.len() != self.dim() {
            return Err(SimError::InvalidConfig(format!(
                "θ has {} entries, prior has {}",
                theta.len(),
                self.dim()
            )));
        }
        for (i, &v) in theta.iter().enumerate() {
            if !(v >= self.lower[i] && v <= self.upper[i]) {
                return Err(SimError::OutOfPrior {
                    name: self.names[i].clone(),
                    value: v,
                    lo: self.lower[i],
                    hi: self.upper[i],
                });
            }
        }
        Ok(())
    }
}

/// i.i.d. uniform draws from the box; draw `i` uses its own stream.
pub fn sample_prior(prior: &PriorBox, n: usize, seed: u64) -> Vec<ParamVector> {
    (0..n as u64)
        .map(|i| {
            let mut r = rng::rng(seed, &[stream::PRIOR, i]);
            prior
                .lower
                .iter()
                .zip(&prior.upper)
                .map(|(&lo, &hi)| lo + (hi - lo) * r.random::<f64>())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analog {
    Cm21,
    Wl,
}

impl Analog {
    pub fn default_prior(self) -> PriorBox {
        match self {
            Analog::Cm21 => PriorBox::cm21(),
            Analog::Wl => PriorBox::wl(),
        }
    }
}

/// Pivot scale of the amplitude, radians per pixel.
const K_PIVOT: f64 = PI / 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimCfg {
    pub analog: Analog,
    /// Side length `H = W`, a power of two.
    pub size: usize,
    pub channels: usize,
    pub f_ng: f64,
    /// Shape-noise standard deviation added on the fly.
    pub sigma_n: f64,
    /// Extra Gaussian smoothing width per channel index, pixels.
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
}

fn default_smoothing() -> f64 {
    1.0
}

impl SimCfg {
    pub fn cm21() -> Self {
        Self {
            analog: Analog::Cm21,
            size: 64,
            channels: 1,
            f_ng: 0.7,
            sigma_n: 0.0,
            smoothing: 1.0,
        }
    }

    pub fn wl() -> Self {
        Self {
            analog: Analog::Wl,
            size: 64,
            channels: 4,
            f_ng: 0.35,
            sigma_n: 0.1,
            smoothing: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.size < 4 || !self.size.is_power_of_two() {
            return Err(SimError::InvalidConfig(format!(
                "size {} must be a power of two ≥ 4",
                self.size
            )));
        }
        if self.channels == 0 {
            return Err(SimError::InvalidConfig("channels must be ≥ 1".into()));
        }
        for (name, v) in [("f_ng", self.f_ng), ("sigma_n", self.sigma_n), ("smoothing", self.smoothing)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    /// Maps physical parameters to the spectrum `(A, n)`.
    ///
    /// The amplitude is set at a pivot scale, `A = a·k_p^n`, which keeps the
    /// pixel variance of order `a` across the whole slope range.
    pub fn spectrum_params(&self, theta: &[f64]) -> (f64, f64) {
        let (amp, slope) = match self.analog {
            Analog::Cm21 => (theta[0] / 100.0, theta[1] - 3.0),
            Analog::Wl => {
                let s8 = theta[1] / 0.8;
                (0.5 * s8 * s8, 1.0 + 2.0 * (theta[0] - 0.15) / 0.55)
            }
        };
        (amp * K_PIVOT.powf(slope), slope)
    }
}

/// Simulated field, channels-last `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub size: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    pub theta: ParamVector,
    pub seed: u64,
    pub noise_seed: Option<u64>,
}

impl Field {
    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.pixels
            .iter()
            .skip(c)
            .step_by(self.channels)
            .map(|&x| x as f64)
    }
}

/// Reusable simulation workspace (FFT plans and buffers).
pub struct Simulator {
    cfg: SimCfg,
    prior: PriorBox,
    fft: Fft2,
    modes: Vec<Complex64>,
    buf: Vec<Complex64>,
}

impl Simulator {
    pub fn new(cfg: SimCfg, prior: PriorBox) -> Result<Self, SimError> {
        cfg.validate()?;
        prior.validate()?;
        if prior.dim() != 2 {
            return Err(SimError::InvalidPrior(format!(
                "the field simulators take 2 parameters, prior has {}",
                prior.dim()
            )));
        }
        let n = cfg.size;
        Ok(Self {
            fft: Fft2::new(n),
            modes: vec![Complex64::default(); n * n],
            buf: vec![Complex64::default(); n * n],
            cfg,
            prior,
        })
    }

    pub fn cfg(&self) -> &SimCfg {
        &self.cfg
    }

    pub fn prior(&self) -> &PriorBox {
        &self.prior
    }

    /// Noise-free field for `θ`; bit-identical for identical `(θ, seed)`.
    pub fn simulate(&mut self, theta: &[f64], seed: u64) -> Result<Field, SimError> {
        self.prior.check(theta)?;
        let n = self.cfg.size;
        let c_total = self.cfg.channels;
        let (a, slope) = self.cfg.spectrum_params(theta);

        let mut r = rng::rng(seed, &[stream::SAMPLE]);
        for m in self.modes.iter_mut() {
            *m = Complex64::new(StandardNormal.sample(&mut r), 0.0);
        }
        self.fft.forward(&mut self.modes);
        for i in 0..n {
            for j in 0..n {
                let k = wavenumber(i, j, n);
                let amp = if k == 0.0 { 0.0 } else { (a * k.powf(-slope)).sqrt() };
                self.modes[i * n + j] *= amp;
            }
        }

        let mut pixels = vec![0f32; n * n * c_total];
        let norm = 1.0 / (n * n) as f64;
        for c in 0..c_total {
            let width = self.cfg.smoothing * c as f64;
            for i in 0..n {
                for j in 0..n {
                    let k = wavenumber(i, j, n);
                    let w = (-0.5 * k * k * width * width).exp();
                    self.buf[i * n + j] = self.modes[i * n + j] * w;
                }
            }
            self.fft.inverse(&mut self.buf);
            let g: Vec<f64> = self.buf.iter().map(|z| z.re * norm).collect();
            let mean_sq = g.iter().map(|x| x * x).sum::<f64>() * norm;
            let coef = self.cfg.f_ng * (c + 1) as f64;
            for (p, &gv) in g.iter().enumerate() {
                pixels[p * c_total + c] = (gv + coef * (gv * gv - mean_sq)) as f32;
            }
        }
        Ok(Field {
            size: n,
            channels: c_total,
            pixels,
            theta: theta.to_vec(),
            seed,
            noise_seed: None,
        })
    }

    /// Model spectrum `P(k)` summed over every synthesized (non-DC) mode.
    pub fn mode_power_sum(&self, theta: &[f64]) -> f64 {
        let n = self.cfg.size;
        let (a, slope) = self.cfg.spectrum_params(theta);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let k = wavenumber(i, j, n);
                if k > 0.0 {
                    total += a * k.powf(-slope);
                }
            }
        }
        total
    }
}

/// One-shot convenience wrapper around [`Simulator::simulate`].
pub fn simulate_field(
    theta: &[f64],
    cfg: &SimCfg,
    prior: &PriorBox,
    seed: u64,
) -> Result<Field, SimError> {
    Simulator::new(cfg.clone(), prior.clone())?.simulate(theta, seed)
}

/// Adds i.i.d. `N(0, σ_n²)` pixel noise into `out` (same length as `clean`).
pub fn add_noise_into(clean: &[f32], sigma_n: f64, noise_seed: u64, out: &mut [f32]) {
    assert_eq!(clean.len(), out.len());
    if sigma_n == 0.0 {
        out.copy_from_slice(clean);
        return;
    }
    let mut r = rng::rng(noise_seed, &[stream::NOISE]);
    for (o, &c) in out.iter_mut().zip(clean) {
        let e: f64 = StandardNormal.sample(&mut r);
        *o = (c as f64 + sigma_n * e) as f32;
    }
}

/// Noisy copy of `field`; the clean field is left untouched.
pub fn add_noise(field: &Field, sigma_n: f64, noise_seed: u64) -> Result<Field, SimError> {
    if !(sigma_n.is_finite() && sigma_n >= 0.0) {
        return Err(SimError::InvalidConfig(format!("sigma_n = {sigma_n} must be ≥ 0")));
    }
    let mut out = field.clone();
    add_noise_into(&field.pixels, sigma_n, noise_seed, &mut out.pixels);
    out.noise_seed = Some(noise_seed);
    Ok(out)
}
