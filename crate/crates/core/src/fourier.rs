use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Cached forward/inverse plans for an `n × n` 2-D transform.
pub(crate) struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    column: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Self {
            n,
            fwd,
            inv,
            scratch: vec![Complex64::default(); len],
            column: vec![Complex64::default(); n],
        }
    }

    /// Unnormalized transform of a row-major `n × n` buffer, in place.
    pub fn forward(&mut self, buf: &mut [Complex64]) {
        let plan = self.fwd.clone();
        self.run(&*plan, buf);
    }

    /// Unnormalized inverse; divide by `n²` to undo [`Fft2::forward`].
    pub fn inverse(&mut self, buf: &mut [Complex64]) {
        let plan = self.inv.clone();
        self.run(&*plan, buf);
    }

    fn run(&mut self, plan: &dyn Fft<f64>, buf: &mut [Complex64]) {
        let n = self.n;
        assert_eq!(buf.len(), n * n);
        for row in buf.chunks_exact_mut(n) {
            plan.process_with_scratch(row, &mut self.scratch);
        }
        for j in 0..n {
            for i in 0..n {
                self.column[i] = buf[i * n + j];
            }
            plan.process_with_scratch(&mut self.column, &mut self.scratch);
            for i in 0..n {
                buf[i * n + j] = self.column[i];
            }
        }
    }

    pub fn forward_real(&mut self, data: impl Iterator<Item = f64>) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.map(|x| Complex64::new(x, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }
}

/// Signed integer frequency of FFT index `i` on an `n`-point grid.
pub(crate) fn signed_freq(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Radial wavenumber in radians per pixel for grid index `(i, j)`.
pub(crate) fn wavenumber(i: usize, j: usize, n: usize) -> f64 {
    let (a, b) = (signed_freq(i, n) as f64, signed_freq(j, n) as f64);
    2.0 * std::f64::consts::PI * (a * a + b * b).sqrt() / n as f64
}
