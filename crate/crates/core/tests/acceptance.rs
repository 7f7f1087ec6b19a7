//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line. The three experiment-scale criteria (6, 7, 8) are `#[ignore]`d and
//! run with `cargo test --test acceptance -- --ignored`; they reuse trained
//! stages found under `HYBRIDSTAT_RUNS` (default `target/acceptance-runs`).

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{max_grad_error, max_grad_error_steps, normal, rel_err};
use hybridstat::diagnostics::SummaryKind;
use hybridstat::flow::{made_masks, FlowModel, FlowSpec};
use hybridstat::harness::{
    cmd_ablate, cmd_coverage, cmd_evaluate, cmd_simulate, cmd_train, paired_difference, Evaluation, Layout, Options,
    RunConfig,
};
use hybridstat::mi::{
    ce_from_logits, gaussian_entropy, gaussian_mi, linear_gaussian_toy, mi_lower_bound, rows_tensor, train_compressor,
    Batch, Head, HybridModel,
};
use hybridstat::nn::train::FitCfg;
use hybridstat::nn::{Activation, Classifier, Cnn, CnnSpec, Mdn, MdnSpec, MlpSpec, ThetaScaler};
use hybridstat::rng;
use hybridstat::tensor::{NodeId, Padding, Tape, Tensor};

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn run_root() -> PathBuf {
    std::env::var_os("HYBRIDSTAT_RUNS")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-runs"))
}

fn tiny_model(seed: u64, clf: bool) -> HybridModel<f64> {
    let mut r = rng::rng(seed, &[]);
    let cnn: Cnn<f64> = Cnn::new(CnnSpec::cm21_with_filters(&[2], 4, 2), (8, 8, 1), &mut r);
    let scaler = ThetaScaler::from_bounds(&[0.0, 0.0], &[1.0, 1.0]);
    let spec = MlpSpec::new(vec![6], Activation::Relu);
    let head = if clf {
        Head::Classifier(Classifier::new(2, 5, MlpSpec::new(vec![8, 8], Activation::Relu), scaler, &mut r))
    } else {
        Head::Mdn(Mdn::new(MdnSpec { trunk: spec, components: 3 }, 5, scaler, &mut r))
    };
    let mut model = HybridModel { cnn: Some(cnn), head, input_scale: 0.8 };
    // Zero-initialized biases put dead-unit rows exactly on the relu kink;
    // a small offset moves every parameter to a generic point.
    for (k, set) in model.param_sets_mut().into_iter().enumerate() {
        for (j, t) in set.tensors.iter_mut().enumerate() {
            let jitter = normal(seed * 1000 + 100 * k as u64 + j as u64, t.shape(), 0.05);
            *t = Tensor::new(t.shape().to_vec(), t.data().iter().zip(jitter.data()).map(|(a, b)| a + b).collect())
                .unwrap();
        }
    }
    model
}

fn tiny_batch(seed: u64) -> Batch<f64> {
    let th = normal(seed + 1, &[4, 2], 0.3).map(|v| 0.5 + v);
    Batch {
        fields: Some(normal(seed + 2, &[4, 8, 8, 1], 1.0)),
        theta: th,
        t: Some(normal(seed + 3, &[4, 3], 1.0)),
    }
}

/// Max relative error of a full loss gradient over every model parameter.
/// Relu and max-pool kinks can fall inside a central-difference stencil, so
/// each element keeps its best agreement over two step sizes.
fn loss_grad_error(seed: u64, clf: bool) -> f64 {
    let model = tiny_model(seed, clf);
    let batch = tiny_batch(seed);
    let sizes: Vec<usize> = model.param_sets().iter().map(|p| p.len()).collect();
    let inputs: Vec<Tensor<f64>> = model.param_sets().iter().flat_map(|p| p.tensors.clone()).collect();
    max_grad_error_steps(
        &inputs,
        |tape, ids| {
            let mut grouped: Vec<Vec<NodeId>> = Vec::new();
            let mut at = 0;
            for s in &sizes {
                grouped.push(ids[at..at + s].to_vec());
                at += s;
            }
            model.loss(tape, &grouped, &batch, seed)
        },
        seed,
        &[1e-6, 1e-8],
    )
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let mut prim: f64 = 0.0;
    for s in 0..100u64 {
        let x = normal(s, &[3, 4], 1.0).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let y = normal(s + 500, &[4, 2], 1.0);
        let img = normal(s + 900, &[2, 6, 6, 2], 1.0);
        let k = normal(s + 901, &[3, 3, 2, 3], 0.5);
        let errs = [
            max_grad_error(&[x.clone(), y], |t, i| t.matmul(i[0], i[1]), s, 1e-6),
            max_grad_error(
                &[x.clone()],
                |t, i| {
                    let a = t.tanh(i[0])?;
                    let b = t.sigmoid(i[0])?;
                    let c = t.softplus(i[0])?;
                    let d = t.relu(i[0])?;
                    let e = t.exp(i[0])?;
                    let sm = t.softmax(i[0])?;
                    let l = t.logsumexp(i[0])?;
                    let l = t.reshape(l, &[3, 1])?;
                    let sl = t.slice(i[0], 1, 3)?;
                    t.concat(&[a, b, c, d, e, sm, l, sl])
                },
                s,
                1e-6,
            ),
            max_grad_error(&[x.map(f64::abs)], |t, i| t.log(i[0]), s, 1e-6),
            max_grad_error(
                &[img, k],
                |t, i| {
                    let c = t.conv2d(i[0], i[1], 1 + (s % 2) as usize, Padding::Same)?;
                    let p = t.maxpool2d(c, 1 + (s % 2 == 0) as usize)?;
                    t.meanpool_spatial(p)
                },
                s,
                1e-6,
            ),
        ];
        prim = errs.into_iter().fold(prim, f64::max);
    }
    let mut composed: f64 = 0.0;
    for s in 0..100u64 {
        composed = composed.max(loss_grad_error(s, false)).max(loss_grad_error(s, true));
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        1,
        prim < 1e-4 && composed < 1e-3 && secs < 60.0,
        format!("primitives max rel err {prim:.2e}, EPE/CE losses {composed:.2e}, {secs:.1}s"),
    );
}

#[test]
fn criterion_2_ce_anchors() {
    let mut tape: Tape<f64> = Tape::new();
    let zero = tape.constant(Tensor::zeros(&[5]));
    let zero2 = tape.constant(Tensor::zeros(&[5]));
    let l0 = ce_from_logits(&mut tape, zero, zero2).unwrap();
    let exact = tape.value(l0).item() == 2.0 * std::f64::consts::LN_2;

    // B = 2, classifier 2 → 2 (relu) → 1 with hand-set weights.
    let mut clf: Classifier<f64> = Classifier::new(
        1,
        1,
        MlpSpec::new(vec![2], Activation::Relu),
        ThetaScaler::identity(1),
        &mut rng::rng(0, &[]),
    );
    let set = [
        Tensor::from_f64(&[2, 2], &[1.0, -1.0, 0.5, 2.0]).unwrap(),
        Tensor::from_f64(&[2], &[0.1, -0.2]).unwrap(),
        Tensor::from_f64(&[2, 1], &[1.5, -0.5]).unwrap(),
        Tensor::from_f64(&[1], &[0.3]).unwrap(),
    ];
    clf.mlp.params.replace_all(set.to_vec()).unwrap();
    let model = HybridModel { cnn: None, head: Head::Classifier(clf), input_scale: 1.0 };
    let (th, z) = ([0.4, -0.6], [1.0, 0.2]);
    let batch = Batch {
        fields: None,
        theta: Tensor::from_f64(&[2, 1], &th).unwrap(),
        t: Some(Tensor::from_f64(&[2, 1], &z).unwrap()),
    };
    let mut tape = Tape::new();
    let ids: Vec<Vec<NodeId>> = model.param_sets().iter().map(|p| p.bind(&mut tape)).collect();
    let l = model.ce_loss(&mut tape, &ids, &batch, &[1, 0]).unwrap();
    let got = tape.value(l).item();

    let c = |t: f64, z: f64| {
        let h0 = (1.0 * t + 0.5 * z + 0.1).max(0.0);
        let h1 = (-1.0 * t + 2.0 * z - 0.2).max(0.0);
        1.5 * h0 - 0.5 * h1 + 0.3
    };
    let sp = |x: f64| (1.0 + x.exp()).ln();
    let hand = 0.5 * (sp(-c(th[0], z[0])) + sp(-c(th[1], z[1]))) + 0.5 * (sp(c(th[1], z[0])) + sp(c(th[0], z[1])));
    let err = (got - hand).abs();
    report(
        2,
        exact && err < 1e-6,
        format!("zero logits exact 2 ln 2: {exact}; B=2 example {got:.9} vs {hand:.9}"),
    );
}

fn toy_cfg(max_epochs: usize) -> FitCfg {
    FitCfg { max_epochs, batch_size: 128, patience: 20, ..FitCfg::default() }
}

fn mdn_model(d: usize, seed: u64) -> HybridModel {
    let mdn = Mdn::new(MdnSpec::cm21(), d, ThetaScaler::identity(d), &mut rng::rng(seed, &[rng::stream::INIT]));
    HybridModel { cnn: None, head: Head::Mdn(mdn), input_scale: 1.0 }
}

#[test]
fn criterion_3_mdn_integrates_to_one() {
    let mut src = linear_gaussian_toy(3000, &[1.0], &[0.7], 31);
    let idx: Vec<usize> = (0..3000).collect();
    let (model, _) =
        train_compressor(mdn_model(1, 31), &mut src, &idx[..2400], &idx[2400..], &toy_cfg(40), 31, &mut |_| {}).unwrap();
    let Head::Mdn(mdn) = &model.head else { unreachable!() };
    let zs = [-3.0, -1.0, 0.0, 0.4, 2.5];
    let mix = mdn.mixture_params(&rows_tensor(&zs.iter().map(|&z| vec![z]).collect::<Vec<_>>(), &[0, 1, 2, 3, 4]))
        .unwrap();
    let mut worst: f64 = 0.0;
    for m in &mix {
        let lo = (0..m.components()).map(|k| m.means[k][0] - 12.0 * m.stds[k][0]).fold(f64::MAX, f64::min);
        let hi = (0..m.components()).map(|k| m.means[k][0] + 12.0 * m.stds[k][0]).fold(f64::MIN, f64::max);
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        // Composite Simpson rule.
        let mut acc = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * m.log_prob(&[lo + i as f64 * h]).exp();
        }
        worst = worst.max((acc * h / 3.0 - 1.0).abs());
    }
    report(3, worst < 1e-3, format!("max |∫q − 1| over {} conditionals = {worst:.2e}", zs.len()));
}

#[test]
fn criterion_4_flow_correctness() {
    let d = 3;
    // Connectivity of the masked stack: input j reaches output i only when
    // j precedes i in the layer's ordering.
    let mut sparsity = true;
    for layer in 0..4 {
        let masks = made_masks(d, &[8, 8], layer);
        let mut conn = masks[0].to_f64_vec();
        let mut cols = masks[0].shape()[1];
        for m in &masks[1..] {
            let next = m.shape()[1];
            let mut out = vec![0.0; d * next];
            for i in 0..d {
                for k in 0..cols {
                    for j in 0..next {
                        out[i * next + j] += conn[i * cols + k] * m.data()[k * next + j];
                    }
                }
            }
            conn = out;
            cols = next;
        }
        let order = |v: usize| if layer % 2 == 0 { v } else { d - 1 - v };
        for j in 0..d {
            for o in 0..2 * d {
                let allowed = order(j) < order(o % d);
                sparsity &= (conn[j * cols + o] > 0.0) == allowed;
            }
        }
    }
    let mut flow: FlowModel<f64> = FlowModel::new(FlowSpec::default(), 2, 2, &mut rng::rng(1, &[]));
    let lp0 = flow.log_prob(&[vec![0.0, 0.0]], &[vec![0.5, -1.0]]).unwrap()[0];
    let ident = (lp0 + (2.0 * std::f64::consts::PI).ln()).abs();

    for (i, t) in flow.params.tensors.iter_mut().enumerate() {
        *t = normal(100 + i as u64, t.shape(), 0.2);
    }
    let z = vec![vec![0.3, -0.4]; 50];
    let u: Vec<Vec<f64>> = normal(7, &[50, 2], 1.0).data().chunks(2).map(<[f64]>::to_vec).collect();
    let x = flow.inverse(&u, &z).unwrap();
    let (back, _) = flow.transform(&x, &z).unwrap();
    let trip = u.iter().flatten().zip(back.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let h = 1e-5;
    let mut logdet: f64 = 0.0;
    for x0 in x.iter().take(10) {
        let (_, ld) = flow.transform(std::slice::from_ref(x0), &z[..1]).unwrap();
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let (mut p, mut m) = (x0.clone(), x0.clone());
            p[j] += h;
            m[j] -= h;
            let up = &flow.transform(&[p], &z[..1]).unwrap().0[0];
            let um = &flow.transform(&[m], &z[..1]).unwrap().0[0];
            for i in 0..2 {
                jac[i][j] = (up[i] - um[i]) / (2.0 * h);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        logdet = logdet.max((det.abs().ln() - ld[0]).abs());
    }
    report(
        4,
        sparsity && trip < 1e-5 && logdet < 1e-4 && ident < 1e-6,
        format!("masks exact: {sparsity}; round trip {trip:.1e}; log-det {logdet:.1e}; identity at 0 {ident:.1e}"),
    );
}

#[test]
fn criterion_5_mi_bound_on_linear_gaussian_toy() {
    let t0 = Instant::now();
    let (st, se) = ([1.0, 1.0], [0.5, 1.0]);
    let truth = gaussian_mi(&st, &se);
    let mut src = linear_gaussian_toy(10_000, &st, &se, 5);
    let idx: Vec<usize> = (0..10_000).collect();
    let (model, report_fit) =
        train_compressor(mdn_model(2, 5), &mut src, &idx[..8000], &idx[8000..], &toy_cfg(200), 5, &mut |_| {})
            .unwrap();
    let Head::Mdn(mdn) = &model.head else { unreachable!() };
    let test = linear_gaussian_toy(20_000, &st, &se, 6);
    let all: Vec<usize> = (0..20_000).collect();
    let z = rows_tensor(&test.z, &all);
    let th = rows_tensor(&test.theta, &all);
    let mix = mdn.mixture_params(&z).unwrap();
    let lq: Vec<f64> = mix.iter().zip(&test.theta).map(|(m, t)| m.log_prob(t)).collect();
    let b = mi_lower_bound(&lq, gaussian_entropy(&st));
    let tape_mean = mdn.mean_log_prob(&z, &th, 1024).unwrap();
    let consistent = rel_err(tape_mean, lq.iter().sum::<f64>() / lq.len() as f64, 1.0) < 1e-4;
    // The bound holds in expectation; the estimate may exceed it by noise only.
    let below = b.nats <= truth + 3.0 * b.se;
    let frac = b.nats / truth;
    let secs = t0.elapsed().as_secs_f64();
    report(
        5,
        below && frac >= 0.9 && consistent && report_fit.epochs_run <= 200 && secs < 300.0,
        format!(
            "bound {:.4} ± {:.4} nats vs analytic {truth:.4} ({:.1}%), {} epochs, {secs:.0}s",
            b.nats,
            b.se,
            100.0 * frac,
            report_fit.epochs_run
        ),
    );
}

fn prepared(cfg: &RunConfig) -> Options {
    let o = Options { out: Some(run_root()), ..Options::default() };
    cmd_simulate(cfg, &o).unwrap();
    o
}

#[test]
#[ignore = "trains the cm21-analog comparison (about 30 min on one core)"]
fn criterion_6_hybrids_beat_power_spectrum() {
    let t0 = Instant::now();
    let cfg = RunConfig::cm21();
    let o = prepared(&cfg);
    cmd_train(&cfg, &o).unwrap();
    let evals = cmd_evaluate(&cfg, &o).unwrap();
    let get = |k: SummaryKind| evals.iter().find(|e| e.record.summary_kind == k).unwrap();
    let ps = get(SummaryKind::PsOnly);
    let (epe, ce) = (get(SummaryKind::HybridEpe), get(SummaryKind::HybridCe));
    let (d_epe, se_epe) = paired_difference(&epe.log_prob, &ps.log_prob);
    let (d_ce, se_ce) = paired_difference(&ce.log_prob, &ps.log_prob);
    let gap = (epe.record.mean_log_prob - ce.record.mean_log_prob).abs();
    report(
        6,
        d_epe > 3.0 * se_epe && d_ce > 3.0 * se_ce && gap < 0.1 && ps.log_prob.len() >= 256,
        format!(
            "ps {:.3}, epe {:.3} (+{d_epe:.3} ± {se_epe:.3}), ce {:.3} (+{d_ce:.3} ± {se_ce:.3}), |epe−ce| {gap:.3} over {} points, {:.0}s",
            ps.record.mean_log_prob,
            epe.record.mean_log_prob,
            ce.record.mean_log_prob,
            ps.log_prob.len(),
            t0.elapsed().as_secs_f64()
        ),
    );
}

fn wl_ablation() -> (RunConfig, Vec<Evaluation>) {
    let cfg = RunConfig::wl();
    let o = prepared(&cfg);
    let evals = cmd_ablate(&cfg, &o).unwrap();
    (cfg, evals)
}

#[test]
#[ignore = "trains the full wl-analog ablation grid"]
fn criterion_7_hybrid_is_robust_to_budget() {
    let t0 = Instant::now();
    let (cfg, evals) = wl_ablation();
    let lp: BTreeMap<(SummaryKind, usize), f64> =
        evals.iter().map(|e| ((e.record.summary_kind, e.record.n_train), e.record.mean_log_prob)).collect();
    let (hi, lo) = (*cfg.ablation.iter().max().unwrap(), *cfg.ablation.iter().min().unwrap());
    let mut pass = true;
    let mut detail = Vec::new();
    for h in [SummaryKind::HybridEpe, SummaryKind::HybridCe] {
        for &n in &cfg.ablation {
            pass &= lp[&(h, n)] > lp[&(SummaryKind::ConcatSeparate, n)];
        }
        let drop_h = lp[&(h, hi)] - lp[&(h, lo)];
        let drop_c = lp[&(SummaryKind::ConcatSeparate, hi)] - lp[&(SummaryKind::ConcatSeparate, lo)];
        pass &= drop_h < drop_c;
        detail.push(format!("{} drop {drop_h:.3} vs concat {drop_c:.3}", h.as_str()));
    }
    let table: Vec<String> = lp.iter().map(|((k, n), v)| format!("{}@{n}={v:.3}", k.as_str())).collect();
    report(7, pass, format!("{}; {}; {:.0}s", detail.join(", "), table.join(" "), t0.elapsed().as_secs_f64()));
}

#[test]
#[ignore = "needs the wl-analog ablation grid"]
fn criterion_8_coverage_is_calibrated() {
    let (cfg, evals) = wl_ablation();
    let top = *cfg.ablation.iter().max().unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for e in evals.iter().filter(|e| e.record.n_train == top) {
        pass &= e.record.coverage_max_dev_se < 3.0 && e.coverage.n_test == 512;
        detail.push(format!("{} {:.2} SE", e.record.summary_kind.as_str(), e.record.coverage_max_dev_se));
    }
    report(8, pass, format!("max deviation at N={top}: {}", detail.join(", ")));
}

fn csv_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_9_determinism_audit() {
    let cfg = RunConfig::smoke();
    let mut snapshots = Vec::new();
    for workers in [1, 1, 3] {
        let tmp = tempfile::tempdir().unwrap();
        let o = Options { out: Some(tmp.path().to_path_buf()), workers: Some(workers), ..Options::default() };
        cmd_simulate(&cfg, &o).unwrap();
        cmd_train(&cfg, &o).unwrap();
        cmd_evaluate(&cfg, &o).unwrap();
        cmd_coverage(&cfg, &o).unwrap();
        cmd_ablate(&cfg, &o).unwrap();
        let run_dir = Layout::new(&cfg, &o).run_dir;
        let mut files = csv_files(&run_dir);
        files.insert("dataset.hss".into(), fs::read(Layout::new(&cfg, &o).dataset()).unwrap());
        snapshots.push(files);
    }
    let n = snapshots[0].len();
    let same = snapshots.iter().all(|s| s == &snapshots[0]);
    report(9, same && n > 20, format!("{n} output files byte-identical across 3 runs (pools of 1 and 3): {same}"));
}
