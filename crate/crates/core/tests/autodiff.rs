mod common;

use common::{max_grad_error, normal, rel_err};
use hybridstat::nn::{Activation, Mlp, MlpSpec};
use hybridstat::rng;
use hybridstat::tensor::{NodeId, Padding, Tape, Tensor, TensorError};
use rand::Rng as _;

const SEEDS: u64 = 100;
const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn dims(seed: u64, n: usize) -> Vec<usize> {
    let mut r = rng::rng(seed, &[77]);
    (0..n).map(|_| r.random_range(1..=4)).collect()
}

/// Values bounded away from zero (for kinks at 0 and for log).
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor<f64> {
    normal(seed, shape, 1.0).map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
}

fn check_all(name: &str, f: impl Fn(u64) -> f64) {
    let worst = (0..SEEDS).map(&f).fold(0.0, f64::max);
    assert!(worst < TOL, "{name}: max relative gradient error {worst:e}");
}

#[test]
fn unary_primitives_match_finite_differences() {
    type Op = fn(&mut Tape<f64>, NodeId) -> hybridstat::tensor::Result<NodeId>;
    let ops: Vec<(&str, Op)> = vec![
        ("exp", |t, x| t.exp(x)),
        ("tanh", |t, x| t.tanh(x)),
        ("sigmoid", |t, x| t.sigmoid(x)),
        ("softplus", |t, x| t.softplus(x)),
        ("relu", |t, x| t.relu(x)),
        ("smooth_leaky", |t, x| t.smooth_leaky(x, 0.1)),
        ("clamp", |t, x| t.clamp(x, -0.5, 0.7)),
        ("softmax", |t, x| t.softmax(x)),
        ("logsumexp", |t, x| t.logsumexp(x)),
        ("sum", |t, x| t.sum(x)),
        ("mean", |t, x| t.mean(x)),
        ("sum_last", |t, x| t.sum_last(x)),
        ("scale", |t, x| t.scale(x, -1.7)),
        ("add_scalar", |t, x| t.add_scalar(x, 0.3)),
    ];
    for (name, op) in ops {
        check_all(name, |s| {
            let mut x = away_from_zero(s, &dims(s, 2));
            if name == "clamp" {
                x = x.map(|v| if (v + 0.5).abs() < 0.01 || (v - 0.7).abs() < 0.01 { v + 0.05 } else { v });
            }
            max_grad_error(&[x], |t, ids| op(t, ids[0]), s, H)
        });
    }
    check_all("log", |s| {
        let x = normal(s, &dims(s, 2), 1.0).map(f64::exp);
        max_grad_error(&[x], |t, ids| t.log(ids[0]), s, H)
    });
    // Both stable branches of softplus.
    check_all("softplus tails", |s| {
        let x = normal(s, &[2, 3], 1.0).map(|v| v + if v > 0.0 { 33.0 } else { -33.0 });
        max_grad_error(&[x], |t, ids| t.softplus(ids[0]), s, H)
    });
}

#[test]
fn binary_and_shape_primitives_match_finite_differences() {
    check_all("add/sub/mul broadcast", |s| {
        let d = dims(s, 2);
        let a = normal(s, &d, 1.0);
        let b = normal(s + 1000, &d[1..], 1.0);
        let full = normal(s + 2000, &d, 1.0);
        let e1 = max_grad_error(&[a.clone(), b.clone()], |t, i| t.add(i[0], i[1]), s, H);
        let e2 = max_grad_error(&[a.clone(), b], |t, i| t.sub(i[0], i[1]), s, H);
        let e3 = max_grad_error(&[a, full], |t, i| t.mul(i[0], i[1]), s, H);
        e1.max(e2).max(e3)
    });
    check_all("matmul", |s| {
        let d = dims(s, 3);
        let a = normal(s, &[d[0], d[1]], 1.0);
        let b = normal(s + 1, &[d[1], d[2]], 1.0);
        max_grad_error(&[a, b], |t, i| t.matmul(i[0], i[1]), s, H)
    });
    check_all("slice/concat/reshape", |s| {
        let d = dims(s, 2);
        let a = normal(s, &[d[0], d[1] + 2], 1.0);
        let b = normal(s + 1, &[d[0], 3], 1.0);
        max_grad_error(
            &[a, b],
            |t, i| {
                let w = t.shape(i[0])[1];
                let sl = t.slice(i[0], 1, w)?;
                let c = t.concat(&[sl, i[1], i[0]])?;
                let n = t.shape(c).iter().product::<usize>();
                t.reshape(c, &[n])
            },
            s,
            H,
        )
    });
}

#[test]
fn spatial_primitives_match_finite_differences() {
    check_all("conv2d", |s| {
        let d = dims(s, 3);
        let stride = 1 + (s % 2) as usize;
        let padding = if s % 3 == 0 { Padding::Valid } else { Padding::Same };
        let k = if s % 4 == 0 { 1 } else { 3 };
        let x = normal(s, &[d[0].min(2), 5, 6, d[1]], 1.0);
        let w = normal(s + 1, &[k, k, d[1], d[2]], 0.5);
        max_grad_error(&[x, w], |t, i| t.conv2d(i[0], i[1], stride, padding), s, H)
    });
    check_all("maxpool2d", |s| {
        let d = dims(s, 2);
        // Well separated values so the argmax never flips under ±h.
        let n = d[0] * 4 * 4 * d[1];
        let mut r = rng::rng(s, &[5]);
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        for i in (1..n).rev() {
            vals.swap(i, r.random_range(0..=i));
        }
        let x = Tensor::new(vec![d[0], 4, 4, d[1]], vals).unwrap();
        max_grad_error(&[x], |t, i| t.maxpool2d(i[0], 2), s, H)
    });
    check_all("meanpool_spatial", |s| {
        let d = dims(s, 4);
        let x = normal(s, &d, 1.0);
        max_grad_error(&[x], |t, i| t.meanpool_spatial(i[0]), s, H)
    });
}

/// Direct nested-loop cross-correlation with zero 'same' padding.
fn conv_oracle(x: &[f64], h: usize, w: usize, cin: usize, k: &[f64], ks: usize, cout: usize) -> Vec<f64> {
    let p = ks as isize / 2;
    let mut out = vec![0.0; h * w * cout];
    for i in 0..h as isize {
        for j in 0..w as isize {
            for o in 0..cout {
                let mut acc = 0.0;
                for di in 0..ks as isize {
                    for dj in 0..ks as isize {
                        let (ii, jj) = (i + di - p, j + dj - p);
                        if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                            continue;
                        }
                        for c in 0..cin {
                            acc += x[((ii as usize) * w + jj as usize) * cin + c]
                                * k[((di as usize * ks + dj as usize) * cin + c) * cout + o];
                        }
                    }
                }
                out[((i as usize) * w + j as usize) * cout + o] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_loop_oracle() {
    for s in 0..10 {
        let x = normal(s, &[8, 8, 3], 1.0);
        let k = normal(s + 50, &[3, 3, 3, 4], 1.0);
        let want = conv_oracle(x.data(), 8, 8, 3, k.data(), 3, 4);
        let mut tape: Tape<f32> = Tape::new();
        let xi = tape.constant(x.cast());
        let ki = tape.constant(k.cast());
        let y = tape.conv2d(xi, ki, 1, Padding::Same).unwrap();
        assert_eq!(tape.shape(y), &[8, 8, 4]);
        for (a, b) in tape.value(y).to_f64_vec().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn conv2d_shapes_and_trivial_kernels() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.constant(normal(1, &[1, 128, 128, 2], 1.0).cast());
    let w = tape.constant(normal(2, &[3, 3, 2, 5], 1.0).cast());
    let y = tape.conv2d(x, w, 2, Padding::Same).unwrap();
    assert_eq!(tape.shape(y), &[1, 64, 64, 5]);

    let img = normal(3, &[7, 9, 1], 1.0).cast::<f32>();
    let xi = tape.constant(img.clone());
    let one = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0f32));
    let y = tape.conv2d(xi, one, 1, Padding::Same).unwrap();
    assert_eq!(tape.value(y), &img);

    let c = 1.5f32;
    let kernel = normal(4, &[3, 3, 1, 1], 1.0).cast::<f32>();
    let ksum: f64 = kernel.to_f64_vec().iter().sum();
    let xi = tape.constant(Tensor::full(&[10, 10, 1], c));
    let ki = tape.constant(kernel);
    let y = tape.conv2d(xi, ki, 1, Padding::Same).unwrap();
    let v = tape.value(y).to_f64_vec();
    for i in 1..9 {
        for j in 1..9 {
            assert!((v[i * 10 + j] - c as f64 * ksum).abs() < 1e-5);
        }
    }
}

#[test]
fn matmul_identity_and_softplus_anchors() {
    let mut tape: Tape<f64> = Tape::new();
    let a = normal(5, &[3, 3], 1.0);
    let eye = Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let (ai, ii) = (tape.constant(a.clone()), tape.constant(eye));
    let y = tape.matmul(ii, ai).unwrap();
    assert_eq!(tape.value(y), &a);

    let x = tape.var(Tensor::from_f64(&[4], &[0.0, 31.0, -31.0, 3.0]).unwrap());
    let sp = tape.softplus(x).unwrap();
    let v = tape.value(sp).to_f64_vec();
    assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(v[1], 31.0);
    assert!((v[2] - (-31.0f64).exp()).abs() < 1e-25);
    assert!((v[3] - (1.0 + 3.0f64.exp()).ln()).abs() < 1e-12);
    let first = tape.slice(sp, 0, 1).unwrap();
    let l = tape.sum(first).unwrap();
    let g = tape.backward(l).unwrap().wrt(x);
    assert!((g.data()[0] - 0.5).abs() < 1e-12);
    assert_eq!(g.data()[1], 0.0);

    let mut tape: Tape<f64> = Tape::new();
    let x = tape.var(Tensor::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    assert_eq!(tape.backward(sq).unwrap().wrt(x).item(), 6.0);
}

#[test]
fn small_mlp_gradient_with_coarse_step() {
    let mut r = rng::rng(9, &[]);
    let mlp: Mlp<f64> = Mlp::new(2, MlpSpec::new(vec![3], Activation::Tanh), 2, &mut r);
    assert_eq!(mlp.params.num_scalars(), 17);
    let x = normal(10, &[5, 2], 1.0);
    let f = |t: &mut Tape<f64>, ids: &[NodeId]| {
        let xi = t.constant(x.clone());
        mlp.forward(t, ids, xi)
    };
    let err = max_grad_error(&mlp.params.tensors, f, 3, 1e-3);
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn backward_is_linear() {
    for s in 0..20 {
        let x0 = normal(s, &[3, 4], 1.0);
        let (a, b) = (0.7, -2.3);
        let grad = |wa: f64, wb: f64| {
            let mut t: Tape<f64> = Tape::new();
            let x = t.var(x0.clone());
            let f = t.tanh(x).unwrap();
            let f = t.sum(f).unwrap();
            let g = t.softmax(x).unwrap();
            let g = t.logsumexp(g).unwrap();
            let g = t.sum(g).unwrap();
            let fa = t.scale(f, wa).unwrap();
            let gb = t.scale(g, wb).unwrap();
            let l = t.add(fa, gb).unwrap();
            t.backward(l).unwrap().wrt(x).to_f64_vec()
        };
        let (gf, gg, gc) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..gc.len() {
            assert!(rel_err(gc[i], a * gf[i] + b * gg[i], 1e-9) < 1e-12);
        }
    }
}

#[test]
fn non_participating_parameter_has_zero_gradient() {
    let mut t: Tape<f64> = Tape::new();
    let used = t.var(normal(1, &[2, 2], 1.0));
    let unused = t.var(normal(2, &[3], 1.0));
    let l = t.sum(used).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.wrt(unused).data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut t: Tape<f32> = Tape::new();
        let x = t.constant(normal(1, &[4, 16, 16, 2], 1.0).cast());
        let w = t.constant(normal(2, &[3, 3, 2, 8], 0.3).cast());
        let y = t.conv2d(x, w, 1, Padding::Same).unwrap();
        let y = t.maxpool2d(y, 2).unwrap();
        let y = t.meanpool_spatial(y).unwrap();
        t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn error_paths() {
    let mut t: Tape<f64> = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(TensorError::ShapeMismatch { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("{other:?}"),
    }
    let x = t.constant(Tensor::zeros(&[4, 4, 2]));
    let w = t.constant(Tensor::zeros(&[3, 3, 3, 1]));
    let e = t.conv2d(x, w, 1, Padding::Same).unwrap_err();
    assert!(e.to_string().contains("conv2d"), "{e}");
    let even = t.constant(Tensor::zeros(&[2, 2, 2, 1]));
    assert!(matches!(t.conv2d(x, even, 1, Padding::Same), Err(TensorError::InvalidArgument { .. })));
    assert!(matches!(t.backward(a), Err(TensorError::NonScalarLoss { .. })));
    let neg = t.constant(Tensor::scalar(-1.0));
    assert!(matches!(t.log(neg), Err(TensorError::NonFinite { op: "log" })));
    let c = t.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(t.add(a, c), Err(TensorError::ShapeMismatch { op: "add", .. })));
}
