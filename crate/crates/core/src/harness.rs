//! Config-driven pipeline: simulate, train (compressor then posterior),
//! evaluate, coverage and the simulation-budget ablation.
//!
//! On-disk layout under the run root (`--out`, else `$HYBRIDSTAT_RUNS`, else
//! `runs`):
//!
//! ```text
//! <name>/dataset.hss             simulated fields (training pool then test rows)
//! <name>/dataset.toml            sidecar with the simulation hash
//! <name>/summaries-<key>.hsss    cached power spectra of the fixed observations
//! <name>/run-<hash>/             everything keyed by the full config hash
//!     config.toml manifest.toml comparison.csv ablation.csv summary.txt
//!     <kind>/n<N>/               compressor.ckpt flow.ckpt *.log metrics.csv ...
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diagnostics::{
    self, compare_runs, coverage_test, default_levels, fmt_f, mean_hpd_area, mean_se, ComparisonRecord,
    CoverageReport, DiagnosticsError, SharpnessCfg, SummaryKind,
};
use crate::flow::{train_posterior, FlowModel, FlowSpec};
use crate::io::{self, file_hash, sha256_hex, write_atomic, Checkpoint, Dataset, IoError, SummaryCache};
use crate::mi::{mi_lower_bound, observe, quantize, train_compressor, FieldSource, Head, HybridModel};
use crate::nn::train::{FitCfg, FitReport};
use crate::nn::{Activation, AdamConfig, Classifier, Cnn, CnnSpec, EpochRecord, Mdn, MdnSpec, MlpSpec, ThetaScaler};
use crate::rng::{self, stream};
use crate::sim::{sample_prior, Analog, PriorBox, SimCfg, SimError, Simulator};
use crate::summaries::{BinningScheme, SpectrumEstimator, SummaryNormalizer};
use crate::tensor::{Tensor, TensorError};

pub const RUNS_ENV: &str = "HYBRIDSTAT_RUNS";
const DEFAULT_ROOT: &str = "runs";
const SUMMARY_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Failed(String),
}

impl HarnessError {
    /// Process exit code: 2 for validation errors, 3 for missing prerequisites.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 2,
            HarnessError::Missing(_) => 3,
            _ => 1,
        }
    }
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        HarnessError::Failed(e.to_string())
    }
}

impl From<SimError> for HarnessError {
    fn from(e: SimError) -> Self {
        HarnessError::Validation(e.to_string())
    }
}

impl From<DiagnosticsError> for HarnessError {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::Invalid(m) => HarnessError::Validation(m),
            other => HarnessError::Failed(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| {
        HarnessError::Io(IoError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataCfg {
    /// Simulations available for training and validation.
    pub n_total: usize,
    /// Held-out test simulations shared by every run.
    pub n_test: usize,
    pub split_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryCfg {
    pub n_bins: usize,
    /// Number of learned summaries.
    pub n_s: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkCfg {
    /// Compressor of the hybrid kinds.
    pub compressor: CnnSpec,
    /// Compressor of `concat_separate`, trained without `t`.
    pub large_compressor: CnnSpec,
    pub mdn: MdnSpec,
    pub classifier: MlpSpec,
    pub flow: FlowSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingCfg {
    pub compressor: FitCfg,
    pub posterior: FitCfg,
    /// Random rotations/reflections of training fields in stage 1.
    #[serde(default)]
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCfg {
    /// Leading test points used for coverage and HPD areas.
    pub n_coverage: usize,
    /// Posterior draws per test point for coverage ranks.
    pub posterior_samples: usize,
    pub levels: Vec<f64>,
    pub hpd: SharpnessCfg,
    /// Test-set index of the single observation whose posterior is dumped.
    pub observation: usize,
    pub dump_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub sim: u64,
    pub train: u64,
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub kinds: Vec<SummaryKind>,
    /// Simulation budgets; each must not exceed `data.n_total`.
    pub ablation: Vec<usize>,
    /// Parallel jobs. Results do not depend on it.
    #[serde(default = "one")]
    pub workers: usize,
    pub seeds: Seeds,
    pub sim: SimCfg,
    pub prior: PriorBox,
    pub data: DataCfg,
    pub summary: SummaryCfg,
    pub networks: NetworkCfg,
    pub training: TrainingCfg,
    pub eval: EvalCfg,
}

fn one() -> usize {
    1
}

fn eval_defaults(n_coverage: usize) -> EvalCfg {
    EvalCfg {
        n_coverage,
        posterior_samples: 500,
        levels: default_levels(),
        hpd: SharpnessCfg::default(),
        observation: 0,
        dump_samples: 2000,
    }
}

impl RunConfig {
    /// 21cm analog: 10,000 single-channel 64×64 fields, 11 spectrum bins,
    /// two learned summaries.
    pub fn cm21() -> Self {
        let n_s = 2;
        Self {
            name: "cm21".into(),
            kinds: vec![SummaryKind::PsOnly, SummaryKind::HybridEpe, SummaryKind::HybridCe],
            ablation: vec![10_000],
            workers: 1,
            seeds: Seeds { sim: 1, train: 2, eval: 3 },
            sim: SimCfg::cm21(),
            prior: PriorBox::cm21(),
            data: DataCfg {
                n_total: 10_000,
                n_test: 2048,
                split_fraction: 0.7,
            },
            summary: SummaryCfg { n_bins: 11, n_s },
            networks: NetworkCfg {
                compressor: CnnSpec::cm21_with_filters(&[8, 16, 32], 128, n_s),
                large_compressor: CnnSpec::wl_large_paper(n_s),
                mdn: MdnSpec::cm21(),
                classifier: MlpSpec::new(vec![128, 64, 64], Activation::Relu),
                flow: FlowSpec::default(),
            },
            training: TrainingCfg {
                compressor: FitCfg {
                    max_epochs: 25,
                    batch_size: 128,
                    patience: 8,
                    adam: AdamConfig::default(),
                },
                posterior: FitCfg {
                    max_epochs: 300,
                    batch_size: 128,
                    patience: 20,
                    adam: AdamConfig::default(),
                },
                augment: true,
            },
            eval: eval_defaults(512),
        }
    }

    /// Weak-lensing analog: 5,000 four-channel noisy maps, auto and cross
    /// spectra, budgets 5000/1000/500.
    pub fn wl() -> Self {
        let n_s = 2;
        Self {
            name: "wl".into(),
            kinds: SummaryKind::ALL.to_vec(),
            ablation: vec![5000, 1000, 500],
            workers: 1,
            seeds: Seeds { sim: 11, train: 12, eval: 13 },
            sim: SimCfg::wl(),
            prior: PriorBox::wl(),
            data: DataCfg {
                n_total: 5000,
                n_test: 512,
                split_fraction: 0.7,
            },
            summary: SummaryCfg { n_bins: 6, n_s },
            networks: NetworkCfg {
                compressor: CnnSpec::strided(8, &[16, 32], 64, n_s),
                large_compressor: CnnSpec::wl_large_paper(n_s),
                mdn: MdnSpec::wl(),
                classifier: MlpSpec::new(vec![128, 64, 64], Activation::Relu),
                flow: FlowSpec::default(),
            },
            training: TrainingCfg {
                compressor: FitCfg {
                    max_epochs: 40,
                    batch_size: 128,
                    patience: 8,
                    adam: AdamConfig::default(),
                },
                posterior: FitCfg {
                    max_epochs: 300,
                    batch_size: 128,
                    patience: 20,
                    adam: AdamConfig::default(),
                },
                augment: true,
            },
            eval: eval_defaults(512),
        }
    }

    /// Seconds-scale pipeline for tests and smoke runs.
    pub fn smoke() -> Self {
        let mut c = Self::cm21();
        c.name = "smoke".into();
        c.kinds = SummaryKind::ALL.to_vec();
        c.ablation = vec![64, 32];
        c.sim.size = 16;
        c.data = DataCfg {
            n_total: 64,
            n_test: 16,
            split_fraction: 0.7,
        };
        c.summary.n_bins = 4;
        c.networks.compressor = CnnSpec::cm21_with_filters(&[2], 8, 2);
        c.networks.large_compressor = CnnSpec::strided(2, &[4], 8, 2);
        c.networks.mdn = MdnSpec {
            trunk: MlpSpec::new(vec![8], Activation::Relu),
            components: 2,
        };
        c.networks.classifier = MlpSpec::new(vec![8], Activation::Relu);
        c.networks.flow = FlowSpec {
            layers: 2,
            hidden: vec![8],
            ..FlowSpec::default()
        };
        c.training.compressor = FitCfg {
            max_epochs: 2,
            batch_size: 16,
            patience: 2,
            adam: AdamConfig::default(),
        };
        c.training.posterior = FitCfg {
            max_epochs: 3,
            batch_size: 16,
            patience: 3,
            adam: AdamConfig::default(),
        };
        c.eval = EvalCfg {
            n_coverage: 8,
            posterior_samples: 100,
            levels: default_levels(),
            hpd: SharpnessCfg {
                n_samples: 50,
                grid: 8,
                ..SharpnessCfg::default()
            },
            observation: 0,
            dump_samples: 20,
        };
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => HarnessError::Missing(format!("config file {} not found", path.display())),
            _ => fs_err(path)(e),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Validation(m) => HarnessError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hash of everything that affects results (the worker count does not).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 1;
        sha256_hex(c.to_toml().as_bytes())
    }

    /// Hash of the simulation inputs only.
    pub fn sim_hash(&self) -> String {
        #[derive(Serialize)]
        struct SimPart<'a> {
            seed: u64,
            n_total: usize,
            n_test: usize,
            sim: &'a SimCfg,
            prior: &'a PriorBox,
        }
        let part = SimPart {
            seed: self.seeds.sim,
            n_total: self.data.n_total,
            n_test: self.data.n_test,
            sim: &self.sim,
            prior: &self.prior,
        };
        sha256_hex(toml::to_string(&part).expect("sim part serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Validation(m));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return bad(format!("name {:?} must be non-empty [A-Za-z0-9_-]", self.name));
        }
        if self.kinds.is_empty() {
            return bad("kinds must list at least one summary kind".into());
        }
        if self.kinds.iter().collect::<HashSet<_>>().len() != self.kinds.len() {
            return bad("kinds contains duplicates".into());
        }
        if self.workers == 0 {
            return bad("workers must be ≥ 1".into());
        }
        let d = &self.data;
        if d.n_total == 0 {
            return bad("data.n_total must be positive".into());
        }
        if d.n_test == 0 {
            return bad("data.n_test must be positive (empty test set)".into());
        }
        if !(d.split_fraction > 0.0 && d.split_fraction < 1.0) {
            return bad(format!("data.split_fraction = {} must lie in (0, 1)", d.split_fraction));
        }
        if self.ablation.is_empty() {
            return bad("ablation must list at least one budget".into());
        }
        for &n in &self.ablation {
            if n > d.n_total {
                return bad(format!("ablation budget {n} exceeds data.n_total = {}", d.n_total));
            }
            let (tr, va) = split_sizes(n, d.split_fraction);
            if tr < 2 || va < 1 {
                return bad(format!("budget {n} gives {tr} training and {va} validation rows"));
            }
        }
        self.sim.validate()?;
        self.prior.validate()?;
        if self.prior.dim() != 2 {
            return bad(format!("the prior must have 2 parameters, got {}", self.prior.dim()));
        }
        BinningScheme::new(self.sim.size, self.summary.n_bins).map_err(HarnessError::Validation)?;
        if self.summary.n_s == 0 {
            return bad("summary.n_s must be ≥ 1".into());
        }
        let n = &self.networks;
        for (what, spec) in [("compressor", &n.compressor), ("large_compressor", &n.large_compressor)] {
            spec.validate().map_err(|e| HarnessError::Validation(format!("networks.{what}: {e}")))?;
            if spec.feature_shape(self.sim.size, self.sim.size, self.sim.channels).0 == 0 {
                return bad(format!("networks.{what} reduces a {} px field to nothing", self.sim.size));
            }
        }
        n.mdn.trunk.validate().map_err(HarnessError::Validation)?;
        if n.mdn.components == 0 {
            return bad("networks.mdn.components must be ≥ 1".into());
        }
        n.classifier.validate().map_err(HarnessError::Validation)?;
        n.flow.validate().map_err(HarnessError::Validation)?;
        for (what, f) in [("compressor", &self.training.compressor), ("posterior", &self.training.posterior)] {
            if f.batch_size < 2 {
                return bad(format!("training.{what}.batch_size must be ≥ 2"));
            }
            if !(f.adam.lr > 0.0) {
                return bad(format!("training.{what}.adam.lr must be positive"));
            }
        }
        let e = &self.eval;
        if e.n_coverage == 0 || e.n_coverage > d.n_test {
            return bad(format!("eval.n_coverage = {} must lie in 1..={}", e.n_coverage, d.n_test));
        }
        if e.posterior_samples < 100 {
            return bad("eval.posterior_samples must be ≥ 100".into());
        }
        if e.levels.is_empty() || e.levels.iter().any(|q| !(*q > 0.0 && *q < 1.0)) || e.levels.windows(2).any(|w| w[0] >= w[1]) {
            return bad("eval.levels must be increasing values in (0, 1)".into());
        }
        if e.observation >= d.n_test {
            return bad(format!("eval.observation = {} is outside the test set", e.observation));
        }
        if e.hpd.grid < 2 || e.hpd.n_samples < 2 || !(e.hpd.mass > 0.0 && e.hpd.mass < 1.0) {
            return bad("eval.hpd needs grid ≥ 2, n_samples ≥ 2 and mass in (0, 1)".into());
        }
        Ok(())
    }

    fn compressor_spec(&self, kind: SummaryKind) -> CnnSpec {
        let mut spec = if kind == SummaryKind::ConcatSeparate {
            self.networks.large_compressor.clone()
        } else {
            self.networks.compressor.clone()
        };
        spec.n_outputs = self.summary.n_s;
        spec
    }

    fn scheme(&self) -> BinningScheme {
        BinningScheme::new(self.sim.size, self.summary.n_bins).expect("validated")
    }

    fn obs_seed(&self) -> u64 {
        rng::derive_seed(self.seeds.sim, &[stream::OBS_NOISE])
    }
}

fn split_sizes(n: usize, frac: f64) -> (usize, usize) {
    let tr = ((n as f64) * frac).round() as usize;
    (tr, n - tr)
}

/// Command-line options shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub out: Option<PathBuf>,
    pub force: bool,
    /// Overrides `workers` from the config.
    pub workers: Option<usize>,
    /// Restricts `train` (and `evaluate`/`coverage`) to one summary kind.
    pub kind: Option<SummaryKind>,
    pub stage: Option<Stage>,
    /// Echo training progress to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Compressor,
    Posterior,
}

impl Stage {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "compressor" => Some(Stage::Compressor),
            "posterior" => Some(Stage::Posterior),
            _ => None,
        }
    }
}

/// `--out`, else `$HYBRIDSTAT_RUNS`, else `./runs`.
pub fn runs_root(out: Option<&Path>) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(RUNS_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT)),
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub exp_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig, opts: &Options) -> Self {
        let exp_dir = runs_root(opts.out.as_deref()).join(&cfg.name);
        let run_dir = exp_dir.join(format!("run-{}", &cfg.hash()[..12]));
        Self { exp_dir, run_dir }
    }

    pub fn dataset(&self) -> PathBuf {
        self.exp_dir.join("dataset.hss")
    }

    pub fn sidecar(&self) -> PathBuf {
        self.exp_dir.join("dataset.toml")
    }

    pub fn job_dir(&self, kind: SummaryKind, n: usize) -> PathBuf {
        self.run_dir.join(kind.as_str()).join(format!("n{n}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format: String,
    pub sim_hash: String,
    pub data_hash: String,
    pub n_total: usize,
    pub n_test: usize,
    pub size: usize,
    pub channels: usize,
    pub params: Vec<String>,
    pub analog: Analog,
    pub seed: u64,
}

/// Runs `f(0..n)` on up to `workers` threads; results come back in index order.
pub fn run_pool<T: Send, F: Fn(usize) -> T + Sync>(n: usize, workers: usize, f: F) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every job ran"))
        .collect()
}

fn workers(cfg: &RunConfig, opts: &Options) -> usize {
    opts.workers.unwrap_or(cfg.workers).max(1)
}

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub path: PathBuf,
    pub hash: String,
    pub reused: bool,
}

/// Simulates the training pool followed by the test rows. Row `i` uses
/// `θ` from the prior stream and its own field seed, so the file does not
/// depend on the worker count.
pub fn cmd_simulate(cfg: &RunConfig, opts: &Options) -> Result<SimulateOutcome> {
    cfg.validate()?;
    let layout = Layout::new(cfg, opts);
    let path = layout.dataset();
    let sim_hash = cfg.sim_hash();
    if path.exists() {
        let existing = read_sidecar(&layout.sidecar());
        let matches = match &existing {
            Some(sc) if sc.sim_hash == sim_hash => file_hash(&path).ok().as_deref() == Some(sc.data_hash.as_str()),
            _ => false,
        };
        if matches {
            let hash = existing.expect("checked").data_hash;
            return Ok(SimulateOutcome { path, hash, reused: true });
        }
        if !opts.force {
            return Err(HarnessError::Validation(format!(
                "{} exists but does not match this configuration (simulation hash {}); pass --force to overwrite",
                path.display(),
                &sim_hash[..12]
            )));
        }
    }
    let t0 = Instant::now();
    let ds = simulate_dataset(cfg, workers(cfg, opts))?;
    fs::create_dir_all(&layout.exp_dir).map_err(fs_err(&layout.exp_dir))?;
    let hash = ds.write(&path)?;
    let sidecar = DatasetSidecar {
        format: "HSS1".into(),
        sim_hash,
        data_hash: hash.clone(),
        n_total: cfg.data.n_total,
        n_test: cfg.data.n_test,
        size: cfg.sim.size,
        channels: cfg.sim.channels,
        params: cfg.prior.names.clone(),
        analog: cfg.sim.analog,
        seed: cfg.seeds.sim,
    };
    write_atomic(&layout.sidecar(), toml::to_string(&sidecar).expect("sidecar serializes").as_bytes())?;
    record_timing(&layout, cfg, &hash, "simulate", t0.elapsed().as_secs_f64())?;
    Ok(SimulateOutcome { path, hash, reused: false })
}

pub fn simulate_dataset(cfg: &RunConfig, workers: usize) -> Result<Dataset> {
    let n = cfg.data.n_total + cfg.data.n_test;
    let thetas = sample_prior(&cfg.prior, n, cfg.seeds.sim);
    let field_len = cfg.sim.size * cfg.sim.size * cfg.sim.channels;
    let chunk = 256;
    let n_chunks = n.div_ceil(chunk);
    let parts = run_pool(n_chunks, workers, |k| -> Result<Vec<f32>> {
        let mut sim = Simulator::new(cfg.sim.clone(), cfg.prior.clone())?;
        let mut out = Vec::with_capacity(chunk * field_len);
        for i in k * chunk..((k + 1) * chunk).min(n) {
            let seed = rng::derive_seed(cfg.seeds.sim, &[stream::SAMPLE, i as u64]);
            out.extend_from_slice(&sim.simulate(&thetas[i], seed)?.pixels);
        }
        Ok(out)
    });
    let mut fields = Vec::with_capacity(n * field_len);
    for p in parts {
        fields.extend(p?);
    }
    Ok(Dataset {
        n,
        d_theta: cfg.prior.dim(),
        size: cfg.sim.size,
        channels: cfg.sim.channels,
        thetas: thetas.iter().flatten().map(|&x| x as f32).collect(),
        fields,
    })
}

fn read_sidecar(path: &Path) -> Option<DatasetSidecar> {
    toml::from_str(&fs::read_to_string(path).ok()?).ok()
}

/// Everything shared by the jobs of one run.
pub struct Context {
    pub cfg: RunConfig,
    pub layout: Layout,
    pub ds: Dataset,
    pub ds_hash: String,
    /// Quantized raw spectra of the fixed observation of every row.
    pub raw_t: Vec<Vec<f64>>,
    /// Seed-shuffled training pool; budget `N` uses the first `N` entries.
    pub order: Vec<usize>,
    pub test: Vec<usize>,
    pub test_hash: String,
    row_hash: Vec<[u8; 32]>,
}

impl Context {
    pub fn load(cfg: &RunConfig, opts: &Options) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg, opts);
        let path = layout.dataset();
        if !path.exists() {
            return Err(HarnessError::Missing(format!(
                "dataset {} not found; run `hybridstat simulate --config <file>` first",
                path.display()
            )));
        }
        let sidecar = read_sidecar(&layout.sidecar()).ok_or_else(|| {
            HarnessError::Missing(format!("dataset sidecar {} missing or unreadable; rerun simulate", layout.sidecar().display()))
        })?;
        if sidecar.sim_hash != cfg.sim_hash() {
            return Err(HarnessError::Validation(format!(
                "{} was simulated from a different configuration; rerun `hybridstat simulate --force`",
                path.display()
            )));
        }
        let (ds, ds_hash) = Dataset::read(&path)?;
        if ds_hash != sidecar.data_hash {
            return Err(HarnessError::Validation(format!(
                "{} does not match the hash recorded in its sidecar",
                path.display()
            )));
        }
        let n_total = cfg.data.n_total;
        let mut order: Vec<usize> = (0..n_total).collect();
        order.shuffle(&mut rng::rng(cfg.seeds.train, &[stream::SPLIT]));
        let test: Vec<usize> = (n_total..n_total + cfg.data.n_test).collect();
        let row_hash: Vec<[u8; 32]> = (0..ds.n).map(|i| row_digest(&ds, i)).collect();
        let mut h = Sha256::new();
        for &i in &test {
            h.update(row_hash[i]);
        }
        let test_hash = hex::encode(h.finalize());
        let raw_t = spectra(cfg, &layout, &ds, &ds_hash, workers(cfg, opts))?;
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            ds,
            ds_hash,
            raw_t,
            order,
            test,
            test_hash,
            row_hash,
        })
    }

    pub fn split(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        let rows = &self.order[..n];
        let (tr, _) = split_sizes(n, self.cfg.data.split_fraction);
        (rows[..tr].to_vec(), rows[tr..].to_vec())
    }

    /// Fails if any test row's content also appears among `rows`.
    pub fn check_isolation(&self, rows: &[usize]) -> Result<()> {
        let test: HashSet<&[u8; 32]> = self.test.iter().map(|&i| &self.row_hash[i]).collect();
        if let Some(&i) = rows.iter().find(|&&i| test.contains(&self.row_hash[i])) {
            return Err(HarnessError::Validation(format!(
                "dataset row {i} is used for training but duplicates a test row"
            )));
        }
        Ok(())
    }

    fn theta_rows(&self, rows: &[usize]) -> Vec<Vec<f64>> {
        rows.iter().map(|&i| self.ds.theta(i)).collect()
    }
}

fn row_digest(ds: &Dataset, i: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    for x in &ds.thetas[i * ds.d_theta..(i + 1) * ds.d_theta] {
        h.update(x.to_le_bytes());
    }
    for x in ds.field(i) {
        h.update(x.to_le_bytes());
    }
    h.finalize().into()
}

/// Spectra of the fixed observations, cached next to the dataset.
fn spectra(cfg: &RunConfig, layout: &Layout, ds: &Dataset, ds_hash: &str, workers: usize) -> Result<Vec<Vec<f64>>> {
    let scheme = cfg.scheme();
    let mut h = Sha256::new();
    h.update(scheme.hash());
    h.update(cfg.sim.sigma_n.to_le_bytes());
    h.update(cfg.obs_seed().to_le_bytes());
    let key: [u8; 32] = h.finalize().into();
    let ds_key = io::hash_bytes(ds_hash);
    let path = layout.exp_dir.join(format!("summaries-{}.hsss", &hex::encode(key)[..12]));
    if let Some(c) = SummaryCache::load_matching(&path, &ds_key, &key)? {
        if c.n() == ds.n {
            return Ok((0..c.n()).map(|i| c.row(i)).collect());
        }
    }
    let chunk = 256;
    let parts = run_pool(ds.n.div_ceil(chunk), workers, |k| {
        let mut est = SpectrumEstimator::new(scheme.clone());
        (k * chunk..((k + 1) * chunk).min(ds.n))
            .map(|i| quantize(&est.cross(&observe(ds, i, cfg.sim.sigma_n, cfg.obs_seed()), ds.channels)))
            .collect::<Vec<_>>()
    });
    let rows: Vec<Vec<f64>> = parts.into_iter().flatten().collect();
    let cache = SummaryCache {
        dataset_hash: ds_key,
        scheme_hash: key,
        width: rows[0].len(),
        rows: rows.iter().flatten().map(|&x| x as f32).collect(),
    };
    write_atomic(&path, &cache.to_bytes())?;
    Ok(rows)
}

/// One `(summary kind, budget)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Job {
    pub kind: SummaryKind,
    pub n: usize,
}

impl Job {
    fn tag(&self) -> String {
        format!("{}/n{}", self.kind, self.n)
    }

    fn code(&self) -> u64 {
        match self.kind {
            SummaryKind::PsOnly => 0,
            SummaryKind::HybridEpe => 1,
            SummaryKind::HybridCe => 2,
            SummaryKind::ConcatSeparate => 3,
        }
    }

    fn seed(&self, train_seed: u64) -> u64 {
        rng::derive_seed(train_seed, &[self.code(), self.n as u64])
    }

    fn uses_compressor(&self) -> bool {
        self.kind != SummaryKind::PsOnly
    }
}

/// Per-job data: budget split and the normalizer fitted on its training rows.
struct JobData {
    train: Vec<usize>,
    val: Vec<usize>,
    normalizer: SummaryNormalizer,
    t: Vec<Vec<f64>>,
}

fn job_data(ctx: &Context, job: Job) -> JobData {
    let (train, val) = ctx.split(job.n);
    let rows: Vec<Vec<f64>> = train.iter().map(|&i| ctx.raw_t[i].clone()).collect();
    let normalizer = SummaryNormalizer::fit(&rows, ctx.cfg.scheme().auto_mask(ctx.ds.channels));
    let t = normalizer.apply_all(&ctx.raw_t);
    JobData { train, val, normalizer, t }
}

#[derive(Debug, Serialize, Deserialize)]
struct CompressorDescriptor {
    kind: String,
    summary_kind: SummaryKind,
    spec: CnnSpec,
    input: [usize; 3],
    input_scale: f64,
    param_names: Vec<String>,
}

/// A frozen stage-1 compressor.
pub struct Compressor {
    pub cnn: Cnn,
    pub input_scale: f64,
}

impl Compressor {
    fn to_checkpoint(&self, kind: SummaryKind) -> Checkpoint {
        let (h, w, c) = self.cnn.input;
        let desc = CompressorDescriptor {
            kind: "compressor".into(),
            summary_kind: kind,
            spec: self.cnn.spec.clone(),
            input: [h, w, c],
            input_scale: self.input_scale,
            param_names: self.cnn.params.names.clone(),
        };
        Checkpoint {
            descriptor: toml::to_string(&desc).expect("descriptor serializes"),
            tensors: self.cnn.params.tensors.clone(),
        }
    }

    fn from_checkpoint(ck: &Checkpoint) -> std::result::Result<Self, String> {
        let desc: CompressorDescriptor = toml::from_str(&ck.descriptor).map_err(|e| e.to_string())?;
        if desc.kind != "compressor" {
            return Err(format!("checkpoint holds a {:?}, not a compressor", desc.kind));
        }
        let [h, w, c] = desc.input;
        let mut cnn = Cnn::new(desc.spec, (h, w, c), &mut rng::rng(0, &[]));
        cnn.params.names = desc.param_names;
        cnn.params.replace_all(ck.tensors.clone()).map_err(|e| e.to_string())?;
        Ok(Self {
            cnn,
            input_scale: desc.input_scale,
        })
    }

    /// Learned summaries of the fixed observations of `rows`.
    fn summaries(&self, ctx: &Context, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        let ds = &ctx.ds;
        let model = HybridModel {
            cnn: Some(self.cnn.clone()),
            head: Head::Mdn(Mdn::new(
                MdnSpec {
                    trunk: MlpSpec::new(vec![1], Activation::Relu),
                    components: 1,
                },
                1,
                ThetaScaler::identity(ds.d_theta),
                &mut rng::rng(0, &[]),
            )),
            input_scale: self.input_scale,
        };
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(SUMMARY_BATCH) {
            let mut px = Vec::with_capacity(chunk.len() * ds.field_len());
            for &i in chunk {
                px.extend(observe(ds, i, ctx.cfg.sim.sigma_n, ctx.cfg.obs_seed()));
            }
            let fields = Tensor::new(vec![chunk.len(), ds.size, ds.size, ds.channels], px)?;
            out.extend(model.learned_summaries(&fields, SUMMARY_BATCH)?);
        }
        Ok(out)
    }
}

/// `1/std` of the observed training pixels: clean variance plus noise.
fn input_scale(ctx: &Context, train: &[usize]) -> f64 {
    let (mut s, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
    for &i in train {
        for &x in ctx.ds.field(i) {
            s += x as f64;
            s2 += (x as f64) * (x as f64);
            n += 1;
        }
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0) + ctx.cfg.sim.sigma_n.powi(2);
    if var > 0.0 {
        1.0 / var.sqrt()
    } else {
        1.0
    }
}

struct Logger {
    file: fs::File,
    tag: String,
    echo: bool,
}

impl Logger {
    fn open(path: &Path, tag: String, echo: bool) -> Result<Self> {
        let file = fs::File::create(path).map_err(fs_err(path))?;
        Ok(Self { file, tag, echo })
    }

    fn line(&mut self, s: &str) {
        let _ = writeln!(self.file, "{s}");
        if self.echo {
            eprintln!("[{}] {s}", self.tag);
        }
    }

    fn epoch(&mut self, r: &EpochRecord) {
        self.line(&r.line());
    }

    fn report(&mut self, r: &FitReport) {
        for w in &r.warnings {
            self.line(&format!("warning: {w}"));
        }
        self.line(&format!(
            "done initial_val={:.6} best_val={:.6} best_epoch={} epochs_run={}",
            r.initial_val, r.best_val, r.best_epoch, r.epochs_run
        ));
    }
}

fn run_compressor(ctx: &Context, job: Job, data: &JobData, echo: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    let dir = ctx.layout.job_dir(job.kind, job.n);
    fs::create_dir_all(&dir).map_err(fs_err(&dir))?;
    ctx.check_isolation(&data.train)?;
    ctx.check_isolation(&data.val)?;
    let seed = job.seed(cfg.seeds.train);
    let ds = &ctx.ds;
    let use_t = job.kind != SummaryKind::ConcatSeparate;
    let n_t = data.t[0].len();
    let n_z = cfg.summary.n_s + if use_t { n_t } else { 0 };
    let scaler = ThetaScaler::from_bounds(&cfg.prior.lower, &cfg.prior.upper);
    let cnn = Cnn::new(
        cfg.compressor_spec(job.kind),
        (ds.size, ds.size, ds.channels),
        &mut rng::rng(seed, &[stream::INIT, 0]),
    );
    let mut head_rng = rng::rng(seed, &[stream::INIT, 1]);
    let head = match job.kind {
        SummaryKind::HybridCe => Head::Classifier(Classifier::new(
            ds.d_theta,
            n_z,
            cfg.networks.classifier.clone(),
            scaler,
            &mut head_rng,
        )),
        _ => Head::Mdn(Mdn::new(cfg.networks.mdn.clone(), n_z, scaler, &mut head_rng)),
    };
    let scale = input_scale(ctx, &data.train);
    let model = HybridModel {
        cnn: Some(cnn),
        head,
        input_scale: scale,
    };
    let mut source = FieldSource {
        ds,
        ref_t: &data.t,
        normalizer: &data.normalizer,
        estimator: SpectrumEstimator::new(cfg.scheme()),
        sigma_n: cfg.sim.sigma_n,
        obs_seed: cfg.obs_seed(),
        train_seed: seed,
        use_fields: true,
        use_t,
        augment: cfg.training.augment,
    };
    let mut log = Logger::open(&dir.join("compressor.log"), format!("{} compressor", job.tag()), echo)?;
    let (model, report) = train_compressor(
        model,
        &mut source,
        &data.train,
        &data.val,
        &cfg.training.compressor,
        seed,
        &mut |r| log.epoch(r),
    )?;
    log.report(&report);
    let comp = Compressor {
        cnn: model.cnn.expect("compressor model"),
        input_scale: scale,
    };
    comp.to_checkpoint(job.kind).write(&dir.join("compressor.ckpt"))?;
    Ok(())
}

fn load_compressor(ctx: &Context, job: Job) -> Result<Compressor> {
    let path = ctx.layout.job_dir(job.kind, job.n).join("compressor.ckpt");
    if !path.exists() {
        return Err(HarnessError::Missing(format!(
            "{} has no compressor checkpoint ({}); run `hybridstat train --stage compressor` first",
            job.tag(),
            path.display()
        )));
    }
    Compressor::from_checkpoint(&Checkpoint::read(&path)?).map_err(|e| HarnessError::Failed(format!("{}: {e}", path.display())))
}

/// `z = [s, t]` (or `t` alone) for `rows`, indexed like the dataset.
fn embeddings(ctx: &Context, job: Job, data: &JobData, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut z = vec![Vec::new(); ctx.ds.n];
    let s = if job.uses_compressor() {
        Some(load_compressor(ctx, job)?.summaries(ctx, rows)?)
    } else {
        None
    };
    for (k, &i) in rows.iter().enumerate() {
        let mut row = s.as_ref().map(|s| s[k].clone()).unwrap_or_default();
        row.extend_from_slice(&data.t[i]);
        z[i] = row;
    }
    Ok(z)
}

fn run_posterior(ctx: &Context, job: Job, data: &JobData, echo: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    let dir = ctx.layout.job_dir(job.kind, job.n);
    fs::create_dir_all(&dir).map_err(fs_err(&dir))?;
    ctx.check_isolation(&data.train)?;
    ctx.check_isolation(&data.val)?;
    let rows: Vec<usize> = data.train.iter().chain(&data.val).copied().collect();
    let z = embeddings(ctx, job, data, &rows)?;
    let theta: Vec<Vec<f64>> = (0..ctx.ds.n).map(|i| ctx.ds.theta(i)).collect();
    let seed = rng::derive_seed(job.seed(cfg.seeds.train), &[stream::INIT, 2]);
    let mut log = Logger::open(&dir.join("posterior.log"), format!("{} posterior", job.tag()), echo)?;
    let (flow, report) = train_posterior(
        &cfg.networks.flow,
        &z,
        &theta,
        &data.train,
        &data.val,
        &cfg.training.posterior,
        seed,
        &mut |r| log.epoch(r),
    )?;
    log.report(&report);
    flow.to_checkpoint().write(&dir.join("flow.ckpt"))?;
    Ok(())
}

fn load_flow(ctx: &Context, job: Job) -> Result<FlowModel> {
    let path = ctx.layout.job_dir(job.kind, job.n).join("flow.ckpt");
    if !path.exists() {
        return Err(HarnessError::Missing(format!(
            "{} has no trained posterior ({}); run `hybridstat train` first",
            job.tag(),
            path.display()
        )));
    }
    FlowModel::from_checkpoint(&Checkpoint::read(&path)?).map_err(|e| HarnessError::Failed(format!("{}: {e}", path.display())))
}

/// Trains whichever stages are missing (or all of them with `force`).
fn train_job(ctx: &Context, job: Job, opts: &Options) -> Result<()> {
    let dir = ctx.layout.job_dir(job.kind, job.n);
    let data = job_data(ctx, job);
    let want = |s: Stage| opts.stage.is_none_or(|x| x == s);
    let mut retrained = false;
    if job.uses_compressor() && want(Stage::Compressor) && (opts.force || !dir.join("compressor.ckpt").exists()) {
        run_compressor(ctx, job, &data, opts.verbose)?;
        retrained = true;
    }
    if want(Stage::Posterior) && (opts.force || retrained || !dir.join("flow.ckpt").exists()) {
        run_posterior(ctx, job, &data, opts.verbose)?;
    }
    Ok(())
}

/// Test-set metrics of one trained job.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub record: ComparisonRecord,
    pub coverage: CoverageReport,
    pub log_prob: Vec<f64>,
    pub mi_se: f64,
}

fn evaluate_job(ctx: &Context, job: Job, with_sharpness: bool) -> Result<Evaluation> {
    let cfg = &ctx.cfg;
    let dir = ctx.layout.job_dir(job.kind, job.n);
    let flow = load_flow(ctx, job)?.cast::<f64>();
    let data = job_data(ctx, job);
    ctx.check_isolation(&data.train)?;
    ctx.check_isolation(&data.val)?;
    let z_all = embeddings(ctx, job, &data, &ctx.test)?;
    let z: Vec<Vec<f64>> = ctx.test.iter().map(|&i| z_all[i].clone()).collect();
    let theta = ctx.theta_rows(&ctx.test);
    let e = &cfg.eval;
    let nc = e.n_coverage;

    let names = cfg.prior.names.clone();
    let coverage = coverage_test(&flow, &names, &z[..nc], &theta[..nc], e.posterior_samples, &e.levels, cfg.seeds.eval)?;
    coverage.write_csv(&dir.join("coverage.csv"))?;

    let log_prob = diagnostics::Posterior::log_prob(&flow, &theta, &z)?;
    let (mean, se) = mean_se(&log_prob);
    let mi = mi_lower_bound(&log_prob, cfg.prior.log_volume());
    let hpd = if with_sharpness {
        mean_hpd_area(&flow, &cfg.prior, &z[..nc], &e.hpd, cfg.seeds.eval)?
    } else {
        f64::NAN
    };
    let record = ComparisonRecord {
        summary_kind: job.kind,
        n_train: job.n,
        mean_log_prob: mean,
        se_log_prob: se,
        hpd_area: hpd,
        coverage_max_dev: coverage.max_abs_deviation(),
        coverage_max_dev_se: coverage.max_deviation_in_se(),
        mi_bound: mi.nats,
        test_hash: ctx.test_hash.clone(),
    };
    if with_sharpness {
        write_csv(
            &dir.join("test_log_prob.csv"),
            &["test_index", "dataset_row", "log_prob"],
            log_prob
                .iter()
                .enumerate()
                .map(|(k, lp)| vec![k.to_string(), ctx.test[k].to_string(), fmt_f(*lp)]),
        )?;
        let obs = e.observation;
        let draws = flow
            .sample(&z[obs], e.dump_samples, rng::derive_seed(cfg.seeds.eval, &[stream::SAMPLE, u64::MAX]))
            .map_err(HarnessError::from)?;
        write_csv(
            &dir.join("posterior_samples.csv"),
            &names.iter().map(String::as_str).collect::<Vec<_>>(),
            draws.iter().map(|d| d.iter().map(|x| fmt_f(*x)).collect()),
        )?;
        write_csv(
            &dir.join("observation.csv"),
            &[&["test_index", "dataset_row"][..], &names.iter().map(String::as_str).collect::<Vec<_>>()].concat(),
            std::iter::once(
                [vec![obs.to_string(), ctx.test[obs].to_string()], theta[obs].iter().map(|x| fmt_f(*x)).collect()].concat(),
            ),
        )?;
        write_records(&dir.join("metrics.csv"), &[(record.clone(), mi.se)])?;
    }
    Ok(Evaluation {
        record,
        coverage,
        log_prob,
        mi_se: mi.se,
    })
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Failed(format!("{}: {e}", path.display())))?;
    let res = (|| -> std::result::Result<(), csv::Error> {
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| HarnessError::Failed(format!("{}: {e}", path.display())))
}

fn write_records(path: &Path, records: &[(ComparisonRecord, f64)]) -> Result<()> {
    write_csv(
        path,
        &[
            "summary_kind",
            "n_train",
            "mean_log_prob",
            "se_log_prob",
            "hpd_area_68",
            "mi_bound",
            "mi_se",
            "coverage_max_dev",
            "coverage_max_dev_se",
            "test_hash",
        ],
        records.iter().map(|(r, mi_se)| {
            vec![
                r.summary_kind.to_string(),
                r.n_train.to_string(),
                fmt_f(r.mean_log_prob),
                fmt_f(r.se_log_prob),
                fmt_f(r.hpd_area),
                fmt_f(r.mi_bound),
                fmt_f(*mi_se),
                fmt_f(r.coverage_max_dev),
                fmt_f(r.coverage_max_dev_se),
                r.test_hash.clone(),
            ]
        }),
    )
}

/// Writes the config copy and the manifest of the run directory.
fn finish_run(ctx: &Context, stage: &str, seconds: f64) -> Result<()> {
    fs::create_dir_all(&ctx.layout.run_dir).map_err(fs_err(&ctx.layout.run_dir))?;
    write_atomic(&ctx.layout.run_dir.join("config.toml"), ctx.cfg.to_toml().as_bytes())?;
    record_timing(&ctx.layout, &ctx.cfg, &ctx.ds_hash, stage, seconds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub dataset_hash: String,
    /// Wall-clock seconds of the most recent run of each command.
    pub timings: BTreeMap<String, f64>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(fs_err(path))?;
        toml::from_str(&text).map_err(|e| HarnessError::Failed(format!("{}: {e}", path.display())))
    }

    /// Every artifact still exists and matches its recorded hash.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            let p = run_dir.join(&a.path);
            let h = file_hash(&p)?;
            if h != a.sha256 {
                return Err(HarnessError::Validation(format!("{} changed since the manifest was written", p.display())));
            }
        }
        Ok(())
    }
}

fn record_timing(layout: &Layout, cfg: &RunConfig, ds_hash: &str, stage: &str, seconds: f64) -> Result<()> {
    fs::create_dir_all(&layout.run_dir).map_err(fs_err(&layout.run_dir))?;
    let path = layout.run_dir.join("manifest.toml");
    let mut timings = RunManifest::read(&path).map(|m| m.timings).unwrap_or_default();
    timings.insert(stage.into(), seconds);
    let mut files = Vec::new();
    collect_files(&layout.run_dir, &mut files).map_err(fs_err(&layout.run_dir))?;
    files.sort();
    let mut artifacts = Vec::new();
    for f in files {
        let rel = f.strip_prefix(&layout.run_dir).expect("inside run dir");
        let ext = f.extension().and_then(|e| e.to_str()).unwrap_or("");
        if matches!(ext, "ckpt" | "csv") || rel == Path::new("config.toml") {
            artifacts.push(Artifact {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: file_hash(&f)?,
            });
        }
    }
    let m = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        dataset_hash: ds_hash.into(),
        timings,
        artifacts,
    };
    write_atomic(&path, toml::to_string(&m).expect("manifest serializes").as_bytes())?;
    Ok(())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn selected_kinds(cfg: &RunConfig, opts: &Options) -> Result<Vec<SummaryKind>> {
    match opts.kind {
        Some(k) if !cfg.kinds.contains(&k) => Err(HarnessError::Validation(format!("kind {k} is not listed in the config"))),
        Some(k) => Ok(vec![k]),
        None => Ok(cfg.kinds.clone()),
    }
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Trains the selected stages for every kind at the full budget.
pub fn cmd_train(cfg: &RunConfig, opts: &Options) -> Result<Vec<PathBuf>> {
    let t0 = Instant::now();
    let ctx = Context::load(cfg, opts)?;
    let jobs: Vec<Job> = selected_kinds(cfg, opts)?
        .into_iter()
        .map(|kind| Job { kind, n: cfg.data.n_total })
        .collect();
    first_error(run_pool(jobs.len(), workers(cfg, opts), |k| train_job(&ctx, jobs[k], opts)))?;
    finish_run(&ctx, "train", t0.elapsed().as_secs_f64())?;
    Ok(jobs.iter().map(|j| ctx.layout.job_dir(j.kind, j.n)).collect())
}

/// Full metrics for every kind at the full budget plus the comparison table.
pub fn cmd_evaluate(cfg: &RunConfig, opts: &Options) -> Result<Vec<Evaluation>> {
    let t0 = Instant::now();
    let ctx = Context::load(cfg, opts)?;
    let jobs: Vec<Job> = selected_kinds(cfg, opts)?
        .into_iter()
        .map(|kind| Job { kind, n: cfg.data.n_total })
        .collect();
    for j in &jobs {
        load_flow(&ctx, *j)?;
    }
    let evals = first_error(run_pool(jobs.len(), workers(cfg, opts), |k| evaluate_job(&ctx, jobs[k], true)))?;
    write_tables(&ctx, &evals, "comparison.csv")?;
    finish_run(&ctx, "evaluate", t0.elapsed().as_secs_f64())?;
    Ok(evals)
}

/// Coverage reports only, for every kind at the full budget.
pub fn cmd_coverage(cfg: &RunConfig, opts: &Options) -> Result<Vec<(SummaryKind, CoverageReport)>> {
    let t0 = Instant::now();
    let ctx = Context::load(cfg, opts)?;
    let jobs: Vec<Job> = selected_kinds(cfg, opts)?
        .into_iter()
        .map(|kind| Job { kind, n: cfg.data.n_total })
        .collect();
    for j in &jobs {
        load_flow(&ctx, *j)?;
    }
    let evals = first_error(run_pool(jobs.len(), workers(cfg, opts), |k| evaluate_job(&ctx, jobs[k], false)))?;
    let mut rows = Vec::new();
    for ev in &evals {
        let c = &ev.coverage;
        for (d, name) in c.names.iter().enumerate() {
            rows.push(vec![
                ev.record.summary_kind.to_string(),
                name.clone(),
                fmt_f(c.max_abs_deviation()),
                fmt_f(c.max_deviation_in_se()),
                fmt_f(c.ks[d]),
            ]);
        }
    }
    write_csv(
        &ctx.layout.run_dir.join("coverage_summary.csv"),
        &["summary_kind", "param", "max_dev", "max_dev_se", "ks"],
        rows,
    )?;
    finish_run(&ctx, "coverage", t0.elapsed().as_secs_f64())?;
    Ok(evals.into_iter().map(|e| (e.record.summary_kind, e.coverage)).collect())
}

/// Retrains every kind from scratch at each budget and evaluates all of
/// them on the shared test set. Existing stages are reused unless `force`.
pub fn cmd_ablate(cfg: &RunConfig, opts: &Options) -> Result<Vec<Evaluation>> {
    let t0 = Instant::now();
    let ctx = Context::load(cfg, opts)?;
    let mut budgets = cfg.ablation.clone();
    budgets.sort_unstable_by(|a, b| b.cmp(a));
    budgets.dedup();
    let kinds = selected_kinds(cfg, opts)?;
    let jobs: Vec<Job> = budgets
        .iter()
        .flat_map(|&n| kinds.iter().map(move |&kind| Job { kind, n }))
        .collect();
    let train_opts = Options { stage: None, ..opts.clone() };
    let evals = first_error(run_pool(jobs.len(), workers(cfg, opts), |k| {
        train_job(&ctx, jobs[k], &train_opts)?;
        evaluate_job(&ctx, jobs[k], true)
    }))?;
    write_tables(&ctx, &evals, "ablation.csv")?;
    finish_run(&ctx, "ablate", t0.elapsed().as_secs_f64())?;
    Ok(evals)
}

fn write_tables(ctx: &Context, evals: &[Evaluation], ranking: &str) -> Result<()> {
    let dir = &ctx.layout.run_dir;
    fs::create_dir_all(dir).map_err(fs_err(dir))?;
    let records: Vec<ComparisonRecord> = evals.iter().map(|e| e.record.clone()).collect();
    let rows = compare_runs(&records)?;
    diagnostics::write_ranking_csv(&rows, &dir.join(ranking))?;
    let mut text = String::new();
    text.push_str(&format!("test_hash={}\nn_test={}\n", ctx.test_hash, ctx.test.len()));
    for r in &rows {
        let c = &r.record;
        text.push_str(&format!(
            "n_train={} rank={} kind={} mean_log_prob={:.4} se={:.4} hpd_area_68={:.6} mi_bound={:.4} coverage_max_dev_se={:.2}{}\n",
            r.n_train,
            r.rank,
            c.summary_kind,
            c.mean_log_prob,
            c.se_log_prob,
            c.hpd_area,
            c.mi_bound,
            c.coverage_max_dev_se,
            if r.coverage_flag { " coverage_flag" } else { "" }
        ));
    }
    let stem = Path::new(ranking).file_stem().and_then(|s| s.to_str()).unwrap_or("summary");
    write_atomic(&dir.join(format!("{stem}_summary.txt")), text.as_bytes())?;
    Ok(())
}

/// Paired difference `a − b` of per-test-point log-probs: mean and standard error.
pub fn paired_difference(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_se(&d)
}
