//! The existing statistic `t(d)`: radially binned auto- and cross-power
//! spectra, and train-split normalization of summary vectors.
//!
//! Spectra use `P̂(k) = |FFT d(k)|² / (H·W)`, so unit-variance white noise has
//! a flat expected spectrum of 1. Bin edges are log-spaced between the
//! fundamental `2π/H` and the Nyquist frequency `π` (radians per pixel); the
//! corner modes beyond `π` fall into the last bin and the DC mode is dropped.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fourier::{wavenumber, Fft2};
use crate::sim::Field;

#[derive(Debug, Clone, PartialEq)]
pub struct BinningScheme {
    pub size: usize,
    pub n_bins: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Bin of every grid mode in row-major order; `None` for DC.
    bin_of: Vec<Option<usize>>,
}

impl BinningScheme {
    pub fn new(size: usize, n_bins: usize) -> Result<Self, String> {
        if size < 4 || !size.is_power_of_two() {
            return Err(format!("grid size {size} must be a power of two ≥ 4"));
        }
        if n_bins == 0 {
            return Err("need at least one k-bin".into());
        }
        let k_min = 2.0 * std::f64::consts::PI / size as f64;
        let k_max = std::f64::consts::PI;
        let ratio = (k_max / k_min).ln();
        let edges: Vec<f64> = (0..=n_bins)
            .map(|i| k_min * (ratio * i as f64 / n_bins as f64).exp())
            .collect();
        let mut counts = vec![0; n_bins];
        let mut bin_of = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                let k = wavenumber(i, j, size);
                if k == 0.0 {
                    bin_of.push(None);
                    continue;
                }
                // Small tolerance so that modes sitting on an edge land on
                // the upper side regardless of rounding in exp/ln.
                let pos = (k / k_min).ln() / ratio * n_bins as f64 + 1e-9;
                let b = (pos.floor().max(0.0) as usize).min(n_bins - 1);
                counts[b] += 1;
                bin_of.push(Some(b));
            }
        }
        Ok(Self {
            size,
            n_bins,
            edges,
            counts,
            bin_of,
        })
    }

    /// Bins that contain at least one mode; empty bins are left out of `t`.
    pub fn active_bins(&self) -> Vec<usize> {
        (0..self.n_bins).filter(|&b| self.counts[b] > 0).collect()
    }

    pub fn empty_bins(&self) -> Vec<usize> {
        (0..self.n_bins).filter(|&b| self.counts[b] == 0).collect()
    }

    pub fn bin_of(&self, i: usize, j: usize) -> Option<usize> {
        self.bin_of[i * self.size + j]
    }

    /// Length of `t` for a `channels`-channel field.
    pub fn n_t(&self, channels: usize) -> usize {
        channels * (channels + 1) / 2 * self.active_bins().len()
    }

    /// Which entries of `t` are auto-spectra (positive, log-transformed).
    pub fn auto_mask(&self, channels: usize) -> Vec<bool> {
        let nb = self.active_bins().len();
        channel_pairs(channels)
            .into_iter()
            .flat_map(|(a, b)| std::iter::repeat_n(a == b, nb))
            .collect()
    }

    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"binning/log/v1");
        h.update((self.size as u64).to_le_bytes());
        h.update((self.n_bins as u64).to_le_bytes());
        h.finalize().into()
    }
}

/// Channel pairs `(i, j)` with `i ≤ j` in row order.
pub fn channel_pairs(channels: usize) -> Vec<(usize, usize)> {
    (0..channels)
        .flat_map(|i| (i..channels).map(move |j| (i, j)))
        .collect()
}

/// Computes spectra of many fields with shared FFT plans.
pub struct SpectrumEstimator {
    scheme: BinningScheme,
    fft: Fft2,
    active: Vec<usize>,
}

impl SpectrumEstimator {
    pub fn new(scheme: BinningScheme) -> Self {
        Self {
            fft: Fft2::new(scheme.size),
            active: scheme.active_bins(),
            scheme,
        }
    }

    pub fn scheme(&self) -> &BinningScheme {
        &self.scheme
    }

    fn transform(&mut self, pixels: &[f32], channels: usize, c: usize) -> Vec<Complex64> {
        self.fft
            .forward_real(pixels.iter().skip(c).step_by(channels).map(|&x| x as f64))
    }

    fn bin(&self, a: &[Complex64], b: &[Complex64]) -> Vec<f64> {
        let n = self.scheme.size;
        let norm = 1.0 / (n * n) as f64;
        let mut acc = vec![0.0; self.scheme.n_bins];
        for (idx, bin) in self.scheme.bin_of.iter().enumerate() {
            if let Some(bin) = *bin {
                acc[bin] += (a[idx] * b[idx].conj()).re * norm;
            }
        }
        self.active
            .iter()
            .map(|&b| acc[b] / self.scheme.counts[b] as f64)
            .collect()
    }

    /// Binned auto-spectrum of channel `c` of a channels-last pixel block.
    pub fn auto(&mut self, pixels: &[f32], channels: usize, c: usize) -> Vec<f64> {
        let f = self.transform(pixels, channels, c);
        self.bin(&f, &f)
    }

    /// All auto and cross spectra, pair-major: `C(C+1)/2 · n_active` numbers.
    pub fn cross(&mut self, pixels: &[f32], channels: usize) -> Vec<f64> {
        let n = self.scheme.size;
        assert_eq!(pixels.len(), n * n * channels, "pixel block size");
        let modes: Vec<Vec<Complex64>> = (0..channels)
            .map(|c| self.transform(pixels, channels, c))
            .collect();
        channel_pairs(channels)
            .into_iter()
            .flat_map(|(i, j)| self.bin(&modes[i], &modes[j]))
            .collect()
    }
}

pub fn power_spectrum_2d(field: &Field, channel: usize, scheme: &BinningScheme) -> Vec<f64> {
    SpectrumEstimator::new(scheme.clone()).auto(&field.pixels, field.channels, channel)
}

pub fn cross_spectra(field: &Field, scheme: &BinningScheme) -> Vec<f64> {
    SpectrumEstimator::new(scheme.clone()).cross(&field.pixels, field.channels)
}

/// Train-split statistics for summary vectors: `log1p` on auto-spectrum
/// entries, then a per-element z-score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryNormalizer {
    pub log_mask: Vec<bool>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Elements whose training std was zero (replaced by 1).
    pub zero_std: Vec<bool>,
}

impl SummaryNormalizer {
    pub fn fit(rows: &[Vec<f64>], log_mask: Vec<bool>) -> Self {
        let d = log_mask.len();
        assert!(!rows.is_empty(), "cannot fit a normalizer on no rows");
        let n = rows.len() as f64;
        let pre = |row: &[f64]| -> Vec<f64> {
            row.iter()
                .zip(&log_mask)
                .map(|(&x, &l)| if l { x.ln_1p() } else { x })
                .collect()
        };
        let mut mean = vec![0.0; d];
        let transformed: Vec<Vec<f64>> = rows.iter().map(|r| pre(r)).collect();
        for r in &transformed {
            assert_eq!(r.len(), d, "summary width");
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in &transformed {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let mut zero_std = vec![false; d];
        let std = var
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let s = (v / n).sqrt();
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    zero_std[i] = true;
                    1.0
                }
            })
            .collect();
        Self {
            log_mask,
            mean,
            std,
            zero_std,
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, &x)| {
                let x = if self.log_mask[i] { x.ln_1p() } else { x };
                (x - self.mean[i]) / self.std[i]
            })
            .collect()
    }

    pub fn apply_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply(r)).collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, &y)| {
                let x = y * self.std[i] + self.mean[i];
                if self.log_mask[i] {
                    x.exp_m1()
                } else {
                    x
                }
            })
            .collect()
    }
}
