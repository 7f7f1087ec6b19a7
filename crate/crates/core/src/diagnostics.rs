//! Posterior calibration, sharpness and run comparison.
//!
//! Coverage is per-dimension: for each test pair `(θ*, z)` the rank of `θ*ᵈ`
//! among `M` posterior draws gives a percentile `pᵈ` (ties count one half).
//! The empirical percentile at nominal level `q` is the fraction of test
//! points with `pᵈ ≤ q`; a calibrated posterior gives the diagonal.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::FlowModel;
use crate::rng::{self, stream};
use crate::sim::PriorBox;
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("records were evaluated on different test sets ({0} vs {1})")]
    TestSetMismatch(String, String),
    #[error("posterior evaluation failed: {0}")]
    Posterior(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("writing {path}: {msg}")]
    Write { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

/// Anything that can be sampled and evaluated as `p(θ | z)`.
pub trait Posterior {
    fn dim(&self) -> usize;
    fn sample(&self, z: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>>;
    fn log_prob(&self, theta: &[Vec<f64>], z: &[Vec<f64>]) -> Result<Vec<f64>>;
}

impl<T: Real> Posterior for FlowModel<T> {
    fn dim(&self) -> usize {
        self.d
    }

    fn sample(&self, z: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        FlowModel::sample(self, z, n, seed).map_err(|e| DiagnosticsError::Posterior(e.to_string()))
    }

    fn log_prob(&self, theta: &[Vec<f64>], z: &[Vec<f64>]) -> Result<Vec<f64>> {
        FlowModel::log_prob(self, theta, z).map_err(|e| DiagnosticsError::Posterior(e.to_string()))
    }
}

/// Fraction of `samples` below `truth`, counting ties as one half.
pub fn rank_percentile(samples: &[f64], truth: f64) -> f64 {
    let (mut below, mut equal) = (0usize, 0usize);
    for &s in samples {
        match s.partial_cmp(&truth) {
            Some(Ordering::Less) => below += 1,
            Some(Ordering::Equal) => equal += 1,
            _ => {}
        }
    }
    (below as f64 + 0.5 * equal as f64) / samples.len() as f64
}

/// Nominal levels `0.1, 0.2, …, 0.9`.
pub fn default_levels() -> Vec<f64> {
    (1..10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub names: Vec<String>,
    pub levels: Vec<f64>,
    pub n_test: usize,
    /// `empirical[d][l]`: fraction of truths with rank percentile ≤ `levels[l]`.
    pub empirical: Vec<Vec<f64>>,
    /// Fraction of truths inside the central `levels[l]` credible interval.
    pub central: Vec<Vec<f64>>,
    /// Binomial standard error `√(q(1−q)/n)` per level.
    pub se: Vec<f64>,
    /// Kolmogorov–Smirnov distance of the percentiles from uniform, per dimension.
    pub ks: Vec<f64>,
}

impl CoverageReport {
    pub fn from_percentiles(names: &[String], percentiles: &[Vec<f64>], levels: &[f64]) -> Self {
        let n = percentiles.len();
        let d = names.len();
        let column = |j: usize| percentiles.iter().map(|p| p[j]).collect::<Vec<_>>();
        let frac = |xs: &[f64], pred: &dyn Fn(f64) -> bool| xs.iter().filter(|&&x| pred(x)).count() as f64 / n as f64;
        let mut empirical = Vec::with_capacity(d);
        let mut central = Vec::with_capacity(d);
        let mut ks = Vec::with_capacity(d);
        for j in 0..d {
            let col = column(j);
            empirical.push(levels.iter().map(|&q| frac(&col, &|p| p <= q)).collect());
            central.push(levels.iter().map(|&q| frac(&col, &|p| (p - 0.5).abs() <= 0.5 * q)).collect());
            ks.push(ks_uniform(&col));
        }
        Self {
            names: names.to_vec(),
            levels: levels.to_vec(),
            n_test: n,
            empirical,
            central,
            se: levels.iter().map(|q| (q * (1.0 - q) / n as f64).sqrt()).collect(),
            ks,
        }
    }

    pub fn max_abs_deviation(&self) -> f64 {
        self.deviations().map(|(dev, _)| dev).fold(0.0, f64::max)
    }

    /// Largest deviation measured in binomial standard errors.
    pub fn max_deviation_in_se(&self) -> f64 {
        self.deviations().map(|(dev, se)| dev / se).fold(0.0, f64::max)
    }

    fn deviations(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.empirical.iter().flat_map(move |row| {
            row.iter()
                .zip(&self.levels)
                .zip(&self.se)
                .map(|((e, q), se)| ((e - q).abs(), *se))
        })
    }

    pub fn is_monotone(&self) -> bool {
        self.empirical
            .iter()
            .chain(&self.central)
            .all(|row| row.windows(2).all(|w| w[0] <= w[1]) && row.iter().all(|x| (0.0..=1.0).contains(x)))
    }

    /// One row per parameter and level: plot-ready columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let res = (|| -> std::result::Result<(), csv::Error> {
            w.write_record(["param", "nominal", "empirical", "err", "central_empirical"])?;
            for (d, name) in self.names.iter().enumerate() {
                for (l, q) in self.levels.iter().enumerate() {
                    w.write_record([
                        name.clone(),
                        fmt_f(*q),
                        fmt_f(self.empirical[d][l]),
                        fmt_f(self.se[l]),
                        fmt_f(self.central[d][l]),
                    ])?;
                }
            }
            w.flush()?;
            Ok(())
        })();
        res.map_err(|e| write_err(path, e))
    }
}

/// `sup |F_n(x) − x|` for samples on `[0, 1]`.
pub fn ks_uniform(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

/// Per-dimension rank percentiles of each truth among `m` posterior draws.
/// Draw seeds depend only on `seed` and the test index.
pub fn rank_percentiles<P: Posterior + ?Sized>(
    post: &P,
    z: &[Vec<f64>],
    theta: &[Vec<f64>],
    m: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    z.iter()
        .zip(theta)
        .enumerate()
        .map(|(i, (zi, ti))| {
            let draws = post.sample(zi, m, rng::derive_seed(seed, &[stream::SAMPLE, i as u64]))?;
            Ok((0..post.dim())
                .map(|d| {
                    let col: Vec<f64> = draws.iter().map(|s| s[d]).collect();
                    rank_percentile(&col, ti[d])
                })
                .collect())
        })
        .collect()
}

pub fn coverage_test<P: Posterior + ?Sized>(
    post: &P,
    names: &[String],
    z: &[Vec<f64>],
    theta: &[Vec<f64>],
    m: usize,
    levels: &[f64],
    seed: u64,
) -> Result<CoverageReport> {
    if m < 100 {
        return Err(DiagnosticsError::Invalid(format!("M = {m} posterior samples; need at least 100")));
    }
    if z.is_empty() || z.len() != theta.len() {
        return Err(DiagnosticsError::Invalid(format!("{} contexts for {} truths", z.len(), theta.len())));
    }
    let p = rank_percentiles(post, z, theta, m, seed)?;
    Ok(CoverageReport::from_percentiles(names, &p, levels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sharpness {
    pub mean_log_prob: f64,
    pub se_log_prob: f64,
    /// Mean area of the 68% highest-density region, in raw θ units.
    pub mean_hpd_area: f64,
}

/// Area of the highest-density region holding `mass` of a density given by
/// `log_prob` on a `grid × grid` cell-centred lattice over `[lo, hi]`.
/// The density is renormalized within the lattice.
pub fn hpd_area(log_prob: &[f64], lo: [f64; 2], hi: [f64; 2], grid: usize, mass: f64) -> f64 {
    let cell = (hi[0] - lo[0]) * (hi[1] - lo[1]) / (grid * grid) as f64;
    let max = log_prob.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_prob.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    for (k, x) in w.iter().enumerate() {
        acc += x / total;
        if acc >= mass - 1e-12 {
            return (k + 1) as f64 * cell;
        }
    }
    w.len() as f64 * cell
}

/// Cell-centred `grid × grid` lattice over `[lo, hi]`, row-major in θ₀.
pub fn lattice(lo: [f64; 2], hi: [f64; 2], grid: usize) -> Vec<Vec<f64>> {
    let step = [(hi[0] - lo[0]) / grid as f64, (hi[1] - lo[1]) / grid as f64];
    (0..grid * grid)
        .map(|k| {
            vec![
                lo[0] + step[0] * ((k / grid) as f64 + 0.5),
                lo[1] + step[1] * ((k % grid) as f64 + 0.5),
            ]
        })
        .collect()
}

/// Region the HPD grid covers: the padded bounding box of posterior draws,
/// clipped to the prior box.
pub fn hpd_region(draws: &[Vec<f64>], prior: &PriorBox, pad: f64) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for s in draws {
        for d in 0..2 {
            lo[d] = lo[d].min(s[d]);
            hi[d] = hi[d].max(s[d]);
        }
    }
    for d in 0..2 {
        let w = (hi[d] - lo[d]).max(1e-9 * prior.widths()[d]);
        lo[d] = (lo[d] - pad * w).max(prior.lower[d]);
        hi[d] = (hi[d] + pad * w).min(prior.upper[d]);
        if !(hi[d] > lo[d]) {
            lo[d] = prior.lower[d];
            hi[d] = prior.upper[d];
        }
    }
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpnessCfg {
    pub n_samples: usize,
    pub grid: usize,
    pub mass: f64,
    pub pad: f64,
}

impl Default for SharpnessCfg {
    fn default() -> Self {
        Self {
            n_samples: 500,
            grid: 64,
            mass: 0.68,
            pad: 0.25,
        }
    }
}

/// Mean HPD area over the given contexts (two-parameter θ).
pub fn mean_hpd_area<P: Posterior + ?Sized>(
    post: &P,
    prior: &PriorBox,
    z: &[Vec<f64>],
    cfg: &SharpnessCfg,
    seed: u64,
) -> Result<f64> {
    if post.dim() != 2 {
        return Err(DiagnosticsError::Invalid("HPD areas need a two-parameter posterior".into()));
    }
    if z.is_empty() {
        return Err(DiagnosticsError::Invalid("no test points".into()));
    }
    let mut total = 0.0;
    for (i, zi) in z.iter().enumerate() {
        let draws = post.sample(zi, cfg.n_samples, rng::derive_seed(seed, &[stream::SAMPLE, i as u64, 1]))?;
        let (lo, hi) = hpd_region(&draws, prior, cfg.pad);
        let pts = lattice(lo, hi, cfg.grid);
        let grid_lp = post.log_prob(&pts, &vec![zi.clone(); pts.len()])?;
        total += hpd_area(&grid_lp, lo, hi, cfg.grid, cfg.mass);
    }
    Ok(total / z.len() as f64)
}

/// Mean and standard error of a per-point score.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Mean log-density at the truths and mean 68% HPD area (two-parameter θ).
pub fn sharpness_metrics<P: Posterior + ?Sized>(
    post: &P,
    prior: &PriorBox,
    z: &[Vec<f64>],
    theta: &[Vec<f64>],
    cfg: &SharpnessCfg,
    seed: u64,
) -> Result<(Sharpness, Vec<f64>)> {
    let lp = post.log_prob(theta, z)?;
    let (mean, se) = mean_se(&lp);
    let area = mean_hpd_area(post, prior, z, cfg, seed)?;
    Ok((
        Sharpness {
            mean_log_prob: mean,
            se_log_prob: se,
            mean_hpd_area: area,
        },
        lp,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    ConcatSeparate,
    HybridCe,
    HybridEpe,
    PsOnly,
}

impl SummaryKind {
    pub const ALL: [SummaryKind; 4] = [
        SummaryKind::PsOnly,
        SummaryKind::HybridEpe,
        SummaryKind::HybridCe,
        SummaryKind::ConcatSeparate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SummaryKind::PsOnly => "ps_only",
            SummaryKind::HybridEpe => "hybrid_epe",
            SummaryKind::HybridCe => "hybrid_ce",
            SummaryKind::ConcatSeparate => "concat_separate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for SummaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub summary_kind: SummaryKind,
    pub n_train: usize,
    pub mean_log_prob: f64,
    pub se_log_prob: f64,
    pub hpd_area: f64,
    pub coverage_max_dev: f64,
    pub coverage_max_dev_se: f64,
    pub mi_bound: f64,
    pub test_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRow {
    pub n_train: usize,
    pub rank: usize,
    pub record: ComparisonRecord,
    /// Coverage deviates by 3 or more binomial standard errors.
    pub coverage_flag: bool,
}

/// Ranks records within each budget by mean test log-prob (descending), ties
/// broken by summary-kind name. Budgets are listed largest first.
pub fn compare_runs(records: &[ComparisonRecord]) -> Result<Vec<RankRow>> {
    if let Some(first) = records.first() {
        if let Some(bad) = records.iter().find(|r| r.test_hash != first.test_hash) {
            return Err(DiagnosticsError::TestSetMismatch(first.test_hash.clone(), bad.test_hash.clone()));
        }
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| {
        b.n_train
            .cmp(&a.n_train)
            .then(b.mean_log_prob.total_cmp(&a.mean_log_prob))
            .then(a.summary_kind.as_str().cmp(b.summary_kind.as_str()))
    });
    let mut rows = Vec::with_capacity(sorted.len());
    let mut rank = 0;
    let mut budget = None;
    for r in sorted {
        if budget != Some(r.n_train) {
            budget = Some(r.n_train);
            rank = 0;
        }
        rank += 1;
        rows.push(RankRow {
            n_train: r.n_train,
            rank,
            coverage_flag: r.coverage_max_dev_se >= 3.0,
            record: r,
        });
    }
    Ok(rows)
}

pub fn write_ranking_csv(rows: &[RankRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let res = (|| -> std::result::Result<(), csv::Error> {
        w.write_record([
            "n_train",
            "rank",
            "summary_kind",
            "mean_log_prob",
            "se_log_prob",
            "hpd_area_68",
            "coverage_max_dev",
            "coverage_max_dev_se",
            "coverage_flag",
            "mi_bound",
        ])?;
        for r in rows {
            let c = &r.record;
            w.write_record([
                r.n_train.to_string(),
                r.rank.to_string(),
                c.summary_kind.to_string(),
                fmt_f(c.mean_log_prob),
                fmt_f(c.se_log_prob),
                fmt_f(c.hpd_area),
                fmt_f(c.coverage_max_dev),
                fmt_f(c.coverage_max_dev_se),
                r.coverage_flag.to_string(),
                fmt_f(c.mi_bound),
            ])?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| write_err(path, e))
}

/// Shortest round-trip representation, so reruns compare byte for byte.
pub fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| write_err(path, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| write_err(path, e))
}

fn write_err(path: &Path, e: impl fmt::Display) -> DiagnosticsError {
    DiagnosticsError::Write {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal, StandardNormal};
    use statrs::distribution::{ContinuousCDF, Normal as SNormal};

    /// Gaussian posterior `θ | z ~ N(a·z, s²)` per dimension.
    struct Gauss {
        shrink: f64,
        sd: f64,
        spread: f64,
    }

    impl Posterior for Gauss {
        fn dim(&self) -> usize {
            2
        }
        fn sample(&self, z: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
            let mut r = rng::rng(seed, &[]);
            Ok((0..n)
                .map(|_| {
                    (0..2)
                        .map(|d| {
                            let e: f64 = StandardNormal.sample(&mut r);
                            self.shrink * z[d] + self.spread * self.sd * e
                        })
                        .collect()
                })
                .collect())
        }
        fn log_prob(&self, theta: &[Vec<f64>], z: &[Vec<f64>]) -> Result<Vec<f64>> {
            let s = self.spread * self.sd;
            Ok(theta
                .iter()
                .zip(z)
                .map(|(t, z)| {
                    (0..2)
                        .map(|d| {
                            let u = (t[d] - self.shrink * z[d]) / s;
                            -0.5 * u * u - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                        })
                        .sum()
                })
                .collect())
        }
    }

    /// Linear-Gaussian toy θ ~ N(0, 1), z = θ + N(0, σ²): θ|z ~ N(z/(1+σ²), σ²/(1+σ²)).
    fn toy(n: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Gauss) {
        let mut r = rng::rng(seed, &[]);
        let noise = Normal::new(0.0, sigma).unwrap();
        let theta: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        let z = theta
            .iter()
            .map(|t| t.iter().map(|x| x + noise.sample(&mut r)).collect())
            .collect();
        let v = sigma * sigma / (1.0 + sigma * sigma);
        (
            theta,
            z,
            Gauss {
                shrink: 1.0 / (1.0 + sigma * sigma),
                sd: v.sqrt(),
                spread: 1.0,
            },
        )
    }

    fn names() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn tie_convention() {
        assert_eq!(rank_percentile(&[2.0; 100], 2.0), 0.5);
        assert_eq!(rank_percentile(&[1.0, 2.0, 3.0, 4.0], 2.0), 0.375);
    }

    #[test]
    fn calibrated_toy_passes() {
        let (theta, z, post) = toy(512, 0.7, 4);
        let rep = coverage_test(&post, &names(), &z, &theta, 200, &default_levels(), 104).unwrap();
        assert!(rep.is_monotone());
        assert!(rep.max_deviation_in_se() < 3.0, "{rep:?}");
        assert!(rep.ks.iter().all(|&k| k < ks_critical_1pct(512)));
    }

    #[test]
    fn overconfident_posterior_undercovers() {
        let (theta, z, mut post) = toy(512, 0.7, 2);
        post.spread = 0.5;
        let rep = coverage_test(&post, &names(), &z, &theta, 200, &default_levels(), 3).unwrap();
        // Truth falls in the central 68% interval of a half-width posterior
        // with probability P(|x| ≤ Φ⁻¹(0.84)/2) ≈ 0.38.
        let std_normal = SNormal::new(0.0, 1.0).unwrap();
        let expect = 2.0 * std_normal.cdf(std_normal.inverse_cdf(0.84) / 2.0) - 1.0;
        assert!((expect - 0.381).abs() < 0.01);
        let l68 = rep.levels.iter().position(|&q| (q - 0.7).abs() < 1e-9).unwrap();
        for d in 0..2 {
            assert!(rep.central[d][l68] < 0.55, "{:?}", rep.central[d]);
        }
        assert!(rep.max_deviation_in_se() > 3.0);
    }

    #[test]
    fn coverage_rejects_small_m() {
        let (theta, z, post) = toy(4, 0.7, 2);
        assert!(coverage_test(&post, &names(), &z, &theta, 50, &default_levels(), 3).is_err());
    }

    #[test]
    fn uniform_posterior_hpd_is_068_of_box() {
        let lp = vec![-(4.0f64.ln()); 64 * 64];
        let a = hpd_area(&lp, [0.0, 0.0], [2.0, 2.0], 64, 0.68);
        assert!((a - 0.68 * 4.0).abs() < 4.0 / 4096.0 + 1e-12);
    }

    #[test]
    fn gaussian_hpd_matches_chi2_ellipse() {
        let post = Gauss { shrink: 0.0, sd: 0.05, spread: 1.0 };
        let prior = PriorBox::new(&["a", "b"], &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let (s, _) = sharpness_metrics(&post, &prior, &[vec![0.0, 0.0]], &[vec![0.0, 0.0]], &SharpnessCfg::default(), 1).unwrap();
        // 68% region of an isotropic 2-D Gaussian: χ²₂ quantile −2 ln(0.32).
        let analytic = std::f64::consts::PI * 0.05 * 0.05 * (-2.0 * 0.32f64.ln());
        assert!((s.mean_hpd_area / analytic - 1.0).abs() < 0.05, "{} vs {analytic}", s.mean_hpd_area);
    }

    #[test]
    fn tighter_calibrated_posterior_scores_higher() {
        let (theta, z_lo, post_lo) = toy(512, 1.0, 4);
        let mut r = rng::rng(5, &[]);
        // A more informative observation of the same truths.
        let z_hi: Vec<Vec<f64>> = theta
            .iter()
            .map(|t| t.iter().map(|x| { let e: f64 = StandardNormal.sample(&mut r); x + 0.3 * e }).collect())
            .collect();
        let post_hi = Gauss { shrink: 1.0 / 1.09, sd: (0.09f64 / 1.09).sqrt(), spread: 1.0 };
        let lo = post_lo.log_prob(&theta, &z_lo).unwrap();
        let hi = post_hi.log_prob(&theta, &z_hi).unwrap();
        assert!(hi.iter().sum::<f64>() > lo.iter().sum::<f64>());
    }

    fn record(kind: SummaryKind, n: usize, lp: f64) -> ComparisonRecord {
        ComparisonRecord {
            summary_kind: kind,
            n_train: n,
            mean_log_prob: lp,
            se_log_prob: 0.01,
            hpd_area: 1.0,
            coverage_max_dev: 0.01,
            coverage_max_dev_se: 0.5,
            mi_bound: 1.0,
            test_hash: "h".into(),
        }
    }

    #[test]
    fn ranking_table() {
        let one = compare_runs(&[record(SummaryKind::PsOnly, 10, -1.0)]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].rank, 1);

        let tied = compare_runs(&[
            record(SummaryKind::PsOnly, 10, -1.0),
            record(SummaryKind::HybridEpe, 10, -1.0),
            record(SummaryKind::ConcatSeparate, 10, -1.0),
        ])
        .unwrap();
        let order: Vec<_> = tied.iter().map(|r| r.record.summary_kind.as_str()).collect();
        assert_eq!(order, ["concat_separate", "hybrid_epe", "ps_only"]);

        let mut grid = Vec::new();
        for (i, n) in [5000, 1000, 500].into_iter().enumerate() {
            for (j, k) in SummaryKind::ALL.into_iter().enumerate() {
                grid.push(record(k, n, -(i as f64) - j as f64 * 0.1));
            }
        }
        let table = compare_runs(&grid).unwrap();
        assert_eq!(table.len(), 12);
        assert_eq!(table[0].n_train, 5000);
        assert_eq!(table[0].record.summary_kind, SummaryKind::PsOnly);
        assert_eq!(table[4].rank, 1);

        let mut bad = record(SummaryKind::HybridCe, 10, 0.0);
        bad.test_hash = "other".into();
        assert!(matches!(
            compare_runs(&[record(SummaryKind::PsOnly, 10, 0.0), bad]),
            Err(DiagnosticsError::TestSetMismatch(..))
        ));
    }

    #[test]
    fn csv_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let (theta, z, post) = toy(64, 0.7, 1);
        let rep = coverage_test(&post, &names(), &z, &theta, 100, &default_levels(), 3).unwrap();
        let p = dir.path().join("cov.csv");
        rep.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 9);
        assert!(text.starts_with("param,nominal,empirical,err,central_empirical"));
        let rows = compare_runs(&[record(SummaryKind::PsOnly, 10, -1.0)]).unwrap();
        write_ranking_csv(&rows, &dir.path().join("rank.csv")).unwrap();
    }
}
