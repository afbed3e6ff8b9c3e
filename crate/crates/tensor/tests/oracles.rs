use autoalign_tensor::{grad_check, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matmul_identity_and_hand_cases() {
    let t = Tape::new();
    let i2 = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = t.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(t.value(t.matmul(i2, b).unwrap()), vec![3.0, 4.0, 5.0, 6.0]);

    let a = t.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
    let c = t.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
    assert_eq!(t.value(t.matmul(a, c).unwrap()), vec![11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[5, 3]);
    let mut oracle = vec![0.0; 12];
    for i in 0..4 {
        for j in 0..3 {
            for k in 0..5 {
                oracle[i * 3 + j] += a.data()[i * 5 + k] * b.data()[k * 3 + j];
            }
        }
    }
    let t = Tape::new();
    let out = t.matmul(t.leaf(&a), t.leaf(&b)).unwrap();
    assert!(max_abs_diff(&t.value(out), &oracle) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let t = Tape::new();
    let a = t.leaf(&Tensor::zeros(&[2, 3]));
    let b = t.leaf(&Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn softmax_cases() {
    let t = Tape::new();
    let x = t.constant(&[4], vec![0.0; 4]).unwrap();
    assert_eq!(t.value(t.softmax(x).unwrap()), vec![0.25; 4]);

    let x = t.constant(&[2], vec![1000.0, 0.0]).unwrap();
    let y = t.value(t.softmax(x).unwrap());
    assert!((y[0] - 1.0).abs() < 1e-12 && y[1].abs() < 1e-12);

    let x = t.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = t.value(t.softmax(x).unwrap());
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let oracle: Vec<f64> = [1f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
    assert!(max_abs_diff(&y, &oracle) < 1e-15);

    let x = t.constant(&[2], vec![f64::NAN, 0.0]).unwrap();
    assert!(matches!(t.softmax(x), Err(TensorError::NonFinite { .. })));
}

#[test]
fn elementwise_cases() {
    let t = Tape::new();
    let x = t.constant(&[2], vec![-1.0, 2.0]).unwrap();
    assert_eq!(t.value(t.relu(x)), vec![0.0, 2.0]);

    let x = t.constant(&[2], vec![3.0, 4.0]).unwrap();
    let y = t.value(t.l2_normalize(x, 0).unwrap());
    assert!(max_abs_diff(&y, &[0.6, 0.8]) < 1e-15);

    let z = t.constant(&[3], vec![0.0; 3]).unwrap();
    assert_eq!(t.value(t.l2_normalize(z, 0).unwrap()), vec![0.0; 3]);
    assert!(matches!(t.l2_normalize(z, 1), Err(TensorError::Axis { .. })));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[2, 3]);
    let c = t.concat(&[t.leaf(&a), t.leaf(&b)], 0).unwrap();
    assert_eq!(t.shape(c), vec![4, 3]);
    let mut oracle = vec![0.0; 12];
    for r in 0..4 {
        for col in 0..3 {
            oracle[r * 3 + col] = if r < 2 { a.data()[r * 3 + col] } else { b.data()[(r - 2) * 3 + col] };
        }
    }
    assert_eq!(t.value(c), oracle);

    let c1 = t.concat(&[t.leaf(&a), t.leaf(&b)], 1).unwrap();
    assert_eq!(t.shape(c1), vec![2, 6]);
    assert_eq!(t.value(c1)[3..6], b.data()[0..3]);

    let bad = t.leaf(&Tensor::zeros(&[3, 3]));
    assert!(matches!(t.add(t.leaf(&a), bad), Err(TensorError::Shape { .. })));
}

fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x.data()[(c * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (vec![co, ho, wo], out)
}

#[test]
fn conv2d_hand_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 4, 5]);
    let t = Tape::new();
    let ident = t.constant(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = t.conv2d(t.leaf(&x), ident, None, 1, 0).unwrap();
    assert_eq!(t.value(y), x.data());

    let ones = t.leaf(&Tensor::full(&[1, 5, 5], 1.0));
    let k = t.leaf(&Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = t.value(t.conv2d(ones, k, None, 1, 1).unwrap());
    assert_eq!(y[2 * 5 + 2], 9.0);
    assert_eq!(y[0], 4.0);
    assert_eq!(y[4], 4.0);
    assert_eq!(y[1], 6.0);
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5)] {
        let x = rand_tensor(&mut rng, &[3, 7, 6]);
        let w = rand_tensor(&mut rng, &[4, 3, k, k]);
        let t = Tape::new();
        let y = t.conv2d(t.leaf(&x), t.leaf(&w), None, stride, pad).unwrap();
        let (shape, oracle) = conv_oracle(&x, &w, stride, pad);
        assert_eq!(t.shape(y), shape);
        assert!(max_abs_diff(&t.value(y), &oracle) < 1e-10);
    }
}

#[test]
fn conv2d_rejects_empty_output() {
    let t = Tape::new();
    let x = t.leaf(&Tensor::zeros(&[1, 2, 2]));
    let w = t.leaf(&Tensor::zeros(&[1, 1, 5, 5]));
    assert!(t.conv2d(x, w, None, 1, 0).is_err());
}

#[test]
fn bilinear_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = rand_tensor(&mut rng, &[2, 4, 5]);
    let t = Tape::new();
    let fv = t.leaf(&f);
    let y = t.value(t.bilinear_sample(fv, 3.0, 2.0).unwrap());
    assert_eq!(y, vec![f.data()[2 * 5 + 3], f.data()[20 + 2 * 5 + 3]]);

    let sq = t.constant(&[1, 2, 2], vec![0.0, 0.0, 4.0, 4.0]).unwrap();
    assert_eq!(t.value(t.bilinear_sample(sq, 0.5, 0.5).unwrap()), vec![2.0]);

    for _ in 0..20 {
        let u: f64 = rng.random_range(0.0..4.0);
        let v: f64 = rng.random_range(0.0..3.0);
        let y = t.value(t.bilinear_sample(fv, u, v).unwrap());
        let (u0, v0) = (u.floor(), v.floor());
        let (du, dv) = (u - u0, v - v0);
        for c in 0..2 {
            let at = |r: f64, col: f64| f.data()[c * 20 + r as usize * 5 + col as usize];
            let oracle = at(v0, u0) * (1.0 - du) * (1.0 - dv)
                + at(v0, u0 + 1.0) * du * (1.0 - dv)
                + at(v0 + 1.0, u0) * (1.0 - du) * dv
                + at(v0 + 1.0, u0 + 1.0) * du * dv;
            assert!((y[c] - oracle).abs() < 1e-12);
        }
    }

    // clamp to border
    let y = t.value(t.bilinear_sample(fv, -3.0, 10.0).unwrap());
    assert_eq!(y[0], f.data()[3 * 5]);
}

#[test]
fn stopgrad_contract() {
    let x = Tensor::new(&[3], vec![0.5, -1.5, 2.0]).unwrap().with_grad();
    let t = Tape::new();
    let xv = t.leaf(&x);
    let s = t.stopgrad(xv);
    assert_eq!(t.value(s), x.data());
    let loss = t.sum(s);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(xv), None);

    // d/dx sum(x * stopgrad(x)) = stopgrad(x) = x
    let t = Tape::new();
    let xv = t.leaf(&x);
    let prod = t.mul(xv, t.stopgrad(xv)).unwrap();
    let loss = t.sum(prod);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(xv).unwrap(), x.data());
}

#[test]
fn stopgrad_gradient_differs_from_finite_differences_as_expected() {
    // Central differences see the full derivative 2x; the tape sees x.
    let x = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
    let report = grad_check(
        |t: &Tape, p: &[Var]| -> Result<Var, TensorError> {
            let prod = t.mul(p[0], t.stopgrad(p[0]))?;
            Ok(t.sum(prod))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!((report.max_rel_error - 0.5).abs() < 1e-8);
}

#[test]
fn backward_cases() {
    let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
    let t = Tape::new();
    let xv = t.leaf(&x);
    let l = t.sum(xv);
    t.backward(l).unwrap();
    assert_eq!(t.grad(xv).unwrap(), vec![1.0; 3]);
    assert!(matches!(t.backward(l), Err(TensorError::BackwardTwice)));
    t.reset();
    assert!(t.is_empty());

    let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad();
    let xv = t.leaf(&x);
    let sq = t.mul(xv, xv).unwrap();
    let l = t.sum(sq);
    t.backward(l).unwrap();
    assert_eq!(t.grad(xv).unwrap(), vec![2.0, 4.0]);

    let t = Tape::new();
    let xv = t.leaf(&x);
    assert!(matches!(t.backward(xv), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn write_grad_populates_tensor() {
    let mut x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad();
    let mut unused = Tensor::zeros(&[2]).with_grad();
    let t = Tape::new();
    let xv = t.leaf(&x);
    let uv = t.leaf(&unused);
    let l = t.sum(xv);
    t.backward(l).unwrap();
    t.write_grad(xv, &mut x);
    t.write_grad(uv, &mut unused);
    assert_eq!(x.grad, Some(vec![1.0, 1.0]));
    assert_eq!(unused.grad, Some(vec![0.0, 0.0]));
}

#[test]
fn grad_check_quadratic_is_exact() {
    let x = Tensor::new(&[3], vec![0.3, -1.2, 2.5]).unwrap();
    let a = Tensor::new(&[3], vec![1.5, 0.5, -2.0]).unwrap();
    let r = grad_check(
        |t: &Tape, p: &[Var]| -> Result<Var, TensorError> {
            let sq = t.mul(p[0], p[0])?;
            let lin = t.mul(p[0], p[1])?;
            Ok(t.sum(t.add(sq, lin)?))
        },
        &[x, a],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-10, "{r:?}");
}

#[test]
fn grad_check_attention_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = rand_tensor(&mut rng, &[3, 4]);
    let k = rand_tensor(&mut rng, &[5, 4]);
    let v = rand_tensor(&mut rng, &[5, 4]);
    let probe = rand_tensor(&mut rng, &[3, 4]);
    let r = grad_check(
        |t: &Tape, p: &[Var]| -> Result<Var, TensorError> {
            let kt = t.transpose(p[1])?;
            let logits = t.scale(t.matmul(p[0], kt)?, 0.5);
            let att = t.softmax(logits)?;
            let out = t.matmul(att, p[2])?;
            let pr = t.leaf(&probe);
            Ok(t.sum(t.mul(out, pr)?))
        },
        &[q, k, v],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}
