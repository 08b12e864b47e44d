use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::DEFAULT_STEP;
use super::tape::BnMode;
use super::*;
use crate::error::{Error, Result};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

/// Fixed pseudo-random weights projecting any output to a scalar.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let w: Vec<f64> = (0..tape.value(y).len()).map(|i| (1.7 * i as f64 + 0.3).sin()).collect();
    tape.dot(y, &w)
}

/// Gradient check of `op` at ten random points drawn from `[lo, hi)`.
fn ten_points<F>(shapes: &[&[usize]], lo: f64, hi: f64, mut op: F)
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(&mut rng, s, lo, hi)).collect();
        let r = grad_check(
            |tape, v| {
                let y = op(tape, v)?;
                project(tape, y)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.passes(1e-4), "seed {seed}: {r:?}");
    }
}

/// Quadruple-loop cross-correlation with zero padding.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let (bn, c, h, wd) = x.dims4("oracle").unwrap();
    let (co, _, k, _) = w.dims4("oracle").unwrap();
    let p = (k - 1) as isize / 2;
    let mut out = vec![0.0; bn * co * h * wd];
    for bi in 0..bn {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = b[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - p;
                                let sx = xx as isize + kx as isize - p;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                s += w.data()[((o * c + ci) * k + ky) * k + kx]
                                    * x.data()[((bi * c + ci) * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[((bi * co + o) * h + y) * wd + xx] = s;
                }
            }
        }
    }
    out
}

fn conv(x: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
    let k = tape.value(w).shape()[2];
    let y = tape.conv2d(x, w, b, (k - 1) / 2)?;
    Ok(tape.value(y).clone())
}

#[test]
fn conv_identity_kernel() {
    let x = t(&[1, 1, 2, 3], &[1.0, -2.0, 3.0, 4.5, 0.0, 6.0]);
    let y = conv(x.clone(), t(&[1, 1, 1, 1], &[1.0]), t(&[1], &[0.0])).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_ones_hand_count() {
    let y = conv(Tensor::full(&[1, 1, 3, 3], 1.0), Tensor::full(&[1, 1, 3, 3], 1.0), t(&[1], &[0.0])).unwrap();
    assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // covers the direct, im2col and per-tap kernels
    for (b, c, co, h, w, k) in [(2, 3, 2, 5, 4, 3), (2, 2, 6, 4, 5, 5), (1, 9, 7, 3, 6, 3), (3, 8, 1, 6, 6, 9)] {
        let x = rand_tensor(&mut rng, &[b, c, h, w], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[co, c, k, k], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[co], -1.0, 1.0);
        let want = conv_oracle(&x, &wt, bias.data());
        let got = conv(x, wt, bias).unwrap();
        assert_eq!(got.shape(), &[b, co, h, w]);
        for (a, e) in got.data().iter().zip(&want) {
            assert!((a - e).abs() <= 1e-10);
        }
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let x = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
    let err = conv(x.clone(), Tensor::zeros(&[1, 3, 3, 3]), Tensor::zeros(&[1])).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(conv(x.clone(), Tensor::zeros(&[1, 2, 2, 2]), Tensor::zeros(&[1])).is_err());
    assert!(conv(x, Tensor::zeros(&[1, 2, 3, 3]), Tensor::zeros(&[2])).is_err());
}

fn bn_train(x: Tensor<f64>) -> Result<Vec<f64>> {
    let c = x.shape()[1];
    let mut tape = Tape::new();
    let x = tape.leaf(x);
    let g = tape.leaf(Tensor::full(&[c], 1.0));
    let b = tape.leaf(Tensor::zeros(&[c]));
    let (y, _) = tape.batch_norm(x, g, b, BnMode::Train { eps: 1e-5 })?;
    Ok(tape.value(y).data().to_vec())
}

#[test]
fn bn_constant_input_is_zero() {
    let mut x = vec![0.0; 2 * 2 * 4];
    for (i, v) in x.iter_mut().enumerate() {
        *v = if (i / 4) % 2 == 0 { 3.0 } else { -7.5 };
    }
    assert!(bn_train(t(&[2, 2, 2, 2], &x)).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn bn_eval_with_initial_stats_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 3, 2, 2], -5.0, 5.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let g = tape.leaf(Tensor::full(&[3], 1.0));
    let b = tape.leaf(Tensor::zeros(&[3]));
    let (y, stats) = tape
        .batch_norm(xv, g, b, BnMode::Eval { mean: &[0.0; 3], var: &[1.0; 3], eps: 1e-5 })
        .unwrap();
    assert!(stats.is_none());
    for (a, e) in tape.value(y).data().iter().zip(x.data()) {
        assert!((a - e).abs() <= 1e-5 * e.abs());
    }
}

#[test]
fn bn_train_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, c, plane) = (4, 3, 25);
    let y = bn_train(rand_tensor(&mut rng, &[b, c, 5, 5], -3.0, 10.0)).unwrap();
    for ch in 0..c {
        let vals: Vec<f64> = (0..b).flat_map(|bi| y[(bi * c + ch) * plane..(bi * c + ch + 1) * plane].to_vec()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-4);
    }
}

#[test]
fn bn_train_needs_two_samples() {
    let err = bn_train(Tensor::zeros(&[1, 2, 3, 3])).unwrap_err();
    assert!(matches!(err, Error::Domain { .. }));
}

#[test]
fn bn_running_stats_follow_momentum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 2, BnConfig::default(), &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[3, 2, 2, 2], 0.0, 4.0);
    // unbiased per-channel statistics computed directly
    let (mut mean, mut var) = ([0.0; 2], [0.0; 2]);
    for ch in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|b| x.data()[(b * 2 + ch) * 4..(b * 2 + ch + 1) * 4].to_vec()).collect();
        mean[ch] = vals.iter().sum::<f64>() / 12.0;
        var[ch] = vals.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / 11.0;
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let mut drng = ChaCha8Rng::seed_from_u64(0);
    let mut pass = Pass::new(Mode::Train, &mut drng);
    bn.forward(&mut tape, &store, xv, &mut pass).unwrap();
    pass.apply_bn_updates(&mut store);
    let rm = store.buffer(bn.running_mean).value.data();
    let rv = store.buffer(bn.running_var).value.data();
    for ch in 0..2 {
        assert!((rm[ch] - 0.1 * mean[ch]).abs() <= 1e-12);
        assert!((rv[ch] - (0.9 + 0.1 * var[ch])).abs() <= 1e-12);
    }
}

fn shuffle(x: Tensor<f64>, r: usize) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let y = tape.pixel_shuffle(v, r)?;
    Ok(tape.value(y).clone())
}

#[test]
fn pixel_shuffle_examples() {
    let y = shuffle(t(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    assert!(matches!(shuffle(Tensor::zeros(&[1, 6, 2, 2]), 2), Err(Error::Shape { .. })));
}

#[test]
fn pixel_shuffle_index_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, c, h, w, r) = (2, 2, 3, 2, 3);
    let x = rand_tensor(&mut rng, &[b, c * r * r, h, w], -1.0, 1.0);
    let y = shuffle(x.clone(), r).unwrap();
    let (oh, ow) = (h * r, w * r);
    for bi in 0..b {
        for ch in 0..c {
            for yy in 0..oh {
                for xx in 0..ow {
                    let src_c = ch * r * r + (yy % r) * r + xx % r;
                    let want = x.data()[((bi * c * r * r + src_c) * h + yy / r) * w + xx / r];
                    assert_eq!(y.data()[((bi * c + ch) * oh + yy) * ow + xx], want);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn pixel_shuffle_is_a_bijection(vals in prop::collection::vec(-1e3f64..1e3, 2 * 9 * 2 * 3)) {
        let y = shuffle(t(&[2, 9, 2, 3], &vals), 3).unwrap();
        let mut a = vals.clone();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn relu_is_max_with_zero(vals in prop::collection::vec(-10f64..10.0, 1..40)) {
        let mut tape = Tape::new();
        let v = tape.leaf(t(&[vals.len()], &vals));
        let y = tape.relu(v);
        for (o, i) in tape.value(y).data().iter().zip(&vals) {
            prop_assert_eq!(*o, i.max(0.0));
        }
    }
}

fn dense(x: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
    let y = tape.dense(x, w, b)?;
    Ok(tape.value(y).clone())
}

#[test]
fn dense_examples() {
    let x = t(&[2, 3], &[1.0, 2.0, 3.0, -4.0, 5.0, 0.5]);
    let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(dense(x.clone(), eye, Tensor::zeros(&[3])).unwrap().data(), x.data());
    let y = dense(x.clone(), Tensor::zeros(&[2, 3]), t(&[2], &[0.5, -1.0])).unwrap();
    assert_eq!(y.data(), &[0.5, -1.0, 0.5, -1.0]);
    assert!(matches!(dense(x, Tensor::zeros(&[2, 4]), Tensor::zeros(&[2])), Err(Error::Shape { .. })));
}

#[test]
fn dense_matches_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (b, din, dout) = (3, 5, 4);
    let x = rand_tensor(&mut rng, &[b, din], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[dout, din], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[dout], -1.0, 1.0);
    let y = dense(x.clone(), w.clone(), bias.clone()).unwrap();
    for i in 0..b {
        for o in 0..dout {
            let want: f64 = bias.data()[o] + (0..din).map(|k| x.data()[i * din + k] * w.data()[o * din + k]).sum::<f64>();
            assert!((y.data()[i * dout + o] - want).abs() <= 1e-10);
        }
    }
}

#[test]
fn embedding_lookup_and_gradient() {
    let table = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let mut tape = Tape::new();
    let tv = tape.leaf(table.clone());
    let e = tape.embedding(tv, &[2]).unwrap();
    assert_eq!(tape.value(e).data(), &[5.0, 6.0]);
    let g = [0.7, -1.3];
    let l = tape.dot(e, &g).unwrap();
    let grads = tape.backward(l).unwrap();
    assert_eq!(grads.get(tv).unwrap(), &[0.0, 0.0, 0.0, 0.0, 0.7, -1.3]);
    let err = tape.embedding(tv, &[3]).unwrap_err();
    assert!(matches!(err, Error::Domain { .. }));
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[100_000], 1.0, 2.0);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let id = tape.dropout(v, 0.0, Some(&mut rng)).unwrap();
    assert_eq!(tape.value(id).data(), x.data());
    let ev = tape.dropout::<ChaCha8Rng>(v, 0.5, None).unwrap();
    assert_eq!(tape.value(ev).data(), x.data());
    let d = tape.dropout(v, 0.3, Some(&mut rng)).unwrap();
    let out = tape.value(d).data();
    let zeros = out.iter().filter(|o| **o == 0.0).count() as f64 / out.len() as f64;
    assert!((zeros - 0.3).abs() <= 0.01, "{zeros}");
    for (o, i) in out.iter().zip(x.data()) {
        assert!(*o == 0.0 || (o - i / 0.7).abs() <= 1e-12);
    }
    assert!(matches!(tape.dropout(v, 1.0, Some(&mut rng)), Err(Error::Domain { .. })));
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let v = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(v);
    let l = tape.dot(y, &[1.0, 1.0, 1.0]).unwrap();
    assert_eq!(tape.backward(l).unwrap().get(v).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn shared_inputs_accumulate() {
    // y = x + x and z = relu(x)·x-path share x; backward visits each node once
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.5, -2.0]));
    let s = tape.add(x, x).unwrap();
    let r = tape.relu(x);
    let y = tape.add(s, r).unwrap();
    let l = tape.dot(y, &[1.0, 1.0]).unwrap();
    assert_eq!(tape.backward(l).unwrap().get(x).unwrap(), &[3.0, 2.0]);
    assert!(tape.backward(y).is_err());
}

#[test]
fn grad_check_conv2d() {
    ten_points(&[&[2, 2, 4, 3], &[3, 2, 3, 3], &[3]], -1.0, 1.0, |tp, v| tp.conv2d(v[0], v[1], v[2], 1));
    ten_points(&[&[1, 9, 3, 3], &[5, 9, 3, 3], &[5]], -1.0, 1.0, |tp, v| tp.conv2d(v[0], v[1], v[2], 1));
    ten_points(&[&[2, 1, 4, 4], &[1, 1, 5, 5], &[1]], -1.0, 1.0, |tp, v| tp.conv2d(v[0], v[1], v[2], 2));
}

#[test]
fn grad_check_batch_norm() {
    ten_points(&[&[3, 2, 2, 2], &[2], &[2]], -1.0, 1.0, |tp, v| {
        Ok(tp.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 })?.0)
    });
    ten_points(&[&[2, 2, 2, 2], &[2], &[2]], -1.0, 1.0, |tp, v| {
        Ok(tp
            .batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &[0.2, -0.1], var: &[1.5, 0.7], eps: 1e-5 })?
            .0)
    });
}

#[test]
fn grad_check_reshaping_ops() {
    ten_points(&[&[2, 8, 1, 2]], -1.0, 1.0, |tp, v| tp.pixel_shuffle(v[0], 2));
    ten_points(&[&[2, 6]], -1.0, 1.0, |tp, v| tp.reshape(v[0], &[2, 1, 2, 3]));
    ten_points(&[&[2, 1, 2, 2], &[2, 3, 2, 2]], -1.0, 1.0, |tp, v| tp.concat_channels(v[0], v[1]));
    ten_points(&[&[2, 2], &[2, 3], &[2, 1]], -1.0, 1.0, |tp, v| tp.concat_features(v));
}

#[test]
fn grad_check_dense_and_embedding() {
    ten_points(&[&[3, 4], &[2, 4], &[2]], -1.0, 1.0, |tp, v| tp.dense(v[0], v[1], v[2]));
    ten_points(&[&[4, 3]], -1.0, 1.0, |tp, v| tp.embedding(v[0], &[1, 3, 1]));
}

#[test]
fn grad_check_elementwise() {
    ten_points(&[&[2, 5]], -1.0, 1.0, |tp, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        tp.dropout(v[0], 0.3, Some(&mut rng))
    });
    ten_points(&[&[12]], -1.0, 1.0, |tp, v| Ok(tp.relu(v[0])));
    ten_points(&[&[3, 2], &[3, 2]], -1.0, 1.0, |tp, v| tp.add(v[0], v[1]));
    ten_points(&[&[3, 2], &[3, 2]], -1.0, 1.0, |tp, v| tp.weighted_sum(v[0], v[1], 0.37));
    let f = t(&[2, 3], &[0.5, -2.0, 1.5, 3.0, 0.0, -0.25]);
    ten_points(&[&[2, 3]], -1.0, 1.0, |tp, v| tp.mul_const(v[0], &f));
    ten_points(&[&[7]], -1.0, 1.0, |tp, v| tp.dot(v[0], &[1.0, -2.0, 0.5, 0.0, 3.0, 1.5, -0.5]));
}

#[test]
fn grad_check_n2_normalize() {
    ten_points(&[&[2, 1, 4, 4]], 0.1, 2.0, |tp, v| tp.n2_normalize(v[0], 2, 1e-7));
    ten_points(&[&[1, 2, 3, 3]], 0.1, 2.0, |tp, v| tp.n2_normalize(v[0], 3, 0.0));
}

#[test]
fn grad_check_losses() {
    let target = t(&[2, 1, 2, 2], &[0.3, -0.2, 1.0, 0.0, 0.5, 0.5, -1.0, 2.0]);
    ten_points(&[&[2, 1, 2, 2]], -1.0, 1.0, |tp, v| tp.mse(v[0], &target));
    // residuals stay away from the |.| kink
    let coarse = t(&[2, 1, 1, 2], &[5.0, 6.0, 7.0, 8.0]);
    ten_points(&[&[2, 1, 2, 4]], 0.0, 1.0, |tp, v| tp.structural_l1(v[0], &coarse, 2));
    let low = t(&[2, 1, 1, 2], &[-5.0, -6.0, -7.0, -8.0]);
    ten_points(&[&[2, 1, 2, 4]], 0.0, 1.0, |tp, v| tp.structural_l1(v[0], &low, 2));
}

#[test]
fn grad_check_on_a_linear_map() {
    let x = t(&[3], &[0.5, 1.0, 2.0]);
    let r = grad_check(|tp, v| tp.dot(v[0], &[1.0, 2.0, 3.0]), &[x], DEFAULT_STEP).unwrap();
    assert!(r.passes(1e-8));
    assert!((gradcheck::relative_error(1.0, 1.1) - 0.1 / 2.1).abs() <= 1e-15);
    assert_eq!(gradcheck::relative_error(0.0, 0.0), 0.0);
}
