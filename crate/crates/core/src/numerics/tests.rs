use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

/// Central-difference gradients of `f` w.r.t. every input, compared against
/// the tape. Returns the worst `‖a − n‖ / (‖a‖ + ‖n‖)` across inputs.
fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let h = 1e-5;
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.numel()]);
        let mut numeric = vec![0.0; x.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&xs);
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale =
            analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

#[test]
fn matmul_identity_and_hand_product() {
    let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(matmul(&Tensor::eye(2), &m).unwrap().data(), m.data());
    let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
    assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let c = matmul(&a, &b).unwrap();
    for (x, y) in c.data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn matmul_is_associative() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let c = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn bmm_transposes_match_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let mut tape = Tape::no_grad();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let c = tape.bmm(va, vb, false, true).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 5]);
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4)
                    .map(|p| a.data()[bi * 12 + i * 4 + p] * b.data()[bi * 20 + j * 4 + p])
                    .sum();
                assert!((tape.data(c)[bi * 15 + i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let s = softmax_with_temperature(&Tensor::zeros(&[3]), 1.0).unwrap();
    for p in s.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let z = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
    let s = softmax_with_temperature(&z, 2.0).unwrap();
    assert!((s.data()[0] - 0.37754).abs() < 1e-4);
    assert!((s.data()[1] - 0.62246).abs() < 1e-4);
    let z = Tensor::new(&[2], vec![5.0, -5.0]).unwrap();
    let s = softmax_with_temperature(&z, 1000.0).unwrap();
    assert!(s.data().iter().all(|p| (p - 0.5).abs() < 0.01));
}

#[test]
fn softmax_rejects_non_positive_temperature() {
    let z = Tensor::zeros(&[2]);
    assert!(matches!(softmax_with_temperature(&z, 0.0), Err(Error::Domain(_))));
    assert!(matches!(softmax_with_temperature(&z, -1.0), Err(Error::Domain(_))));
}

#[test]
fn activation_examples() {
    let x = |v: f64| Tensor::new(&[1], vec![v]).unwrap();
    assert_eq!(activate(&x(0.0), Activation::Sigmoid).item(), 0.5);
    assert!((activate(&x(-2.0), Activation::LeakyRelu).item() + 0.02).abs() < 1e-15);
    assert!((activate(&x(1.0), Activation::Gelu).item() - 0.8412).abs() < 1e-3);
    assert!("swish".parse::<Activation>().is_err());
    assert_eq!("gelu".parse::<Activation>().unwrap(), Activation::Gelu);
}

#[test]
fn loss_examples() {
    let mut tape = Tape::no_grad();
    let logits = tape.constant(Tensor::new(&[1, 3], vec![60.0, 0.0, 0.0]).unwrap());
    let ce = tape.cross_entropy(logits, &[0]).unwrap();
    assert!(tape.value(ce).item() < 1e-20);

    let x = tape.constant(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let mse = tape.mse(x, &[1.0, -2.0, 0.5]).unwrap();
    assert_eq!(tape.value(mse).item(), 0.0);

    let p = tape.constant(Tensor::new(&[1], vec![0.5]).unwrap());
    let bce = tape.binary_cross_entropy(p, &[1.0]).unwrap();
    assert!((tape.value(bce).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn loss_errors() {
    let mut tape = Tape::no_grad();
    let p = tape.constant(Tensor::new(&[2], vec![0.5, 1.0]).unwrap());
    assert!(matches!(
        tape.binary_cross_entropy(p, &[1.0, 1.0]),
        Err(Error::Domain(_))
    ));
    let x = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(
        tape.loss(x, &Tensor::zeros(&[2]), LossKind::Mse),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn backward_square() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn no_grad_tape_yields_no_gradients() {
    let mut tape = Tape::no_grad();
    let x = tape.param(&Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.get(x).is_none());
}

#[test]
fn tempered_softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = rand_tensor(&mut rng, &[3, 5], -3.0, 3.0);
    let err = gradcheck(&[z], |t, v| {
        let p = t.softmax(v[0], 2.0).unwrap();
        // cross-entropy of probabilities: −mean log p[target]
        let targets = Tensor::new(&[3, 5], {
            let mut oh = vec![0.0; 15];
            oh[1] = 1.0;
            oh[5 + 4] = 1.0;
            oh[10] = 1.0;
            oh
        })
        .unwrap();
        let onehot = t.constant(targets);
        let picked = t.mul(p, onehot).unwrap();
        let s = t.sum(picked).unwrap();
        t.scale(s, -1.0).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    let w = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[6], -1.0, 1.0);
    let r = rand_tensor(&mut rng, &[2, 3, 6], -1.0, 1.0);

    // weights a scalar readout so every output coordinate matters
    let readout = |t: &mut Tape, y: Var, r: &Tensor| {
        let rv = t.constant(r.clone());
        let m = t.mul(y, rv).unwrap();
        t.sum(m).unwrap()
    };

    let e = gradcheck(&[x.clone(), w.clone(), b.clone()], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
        readout(t, y, &r)
    });
    assert!(e < 1e-4, "linear {e}");

    for kind in [
        Activation::Gelu,
        Activation::LeakyRelu,
        Activation::Sigmoid,
        Activation::Tanh,
    ] {
        let e = gradcheck(std::slice::from_ref(&x), |t, v| {
            let y = t.activation(v[0], kind).unwrap();
            let r4 = Tensor::new(&[2, 3, 4], r.data()[..24].to_vec()).unwrap();
            readout(t, y, &r4)
        });
        assert!(e < 1e-4, "{kind:?} {e}");
    }

    let g = rand_tensor(&mut rng, &[4], 0.5, 1.5);
    let be = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    let e = gradcheck(&[x.clone(), g, be], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
        let r4 = Tensor::new(&[2, 3, 4], r.data()[..24].to_vec()).unwrap();
        readout(t, y, &r4)
    });
    assert!(e < 1e-4, "layer_norm {e}");

    let q = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let r35 = rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0);
    let e = gradcheck(&[q.clone(), k.clone()], |t, v| {
        let y = t.bmm(v[0], v[1], false, true).unwrap();
        readout(t, y, &r35)
    });
    assert!(e < 1e-4, "bmm_tb {e}");
    let at = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
    let r35b = rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0);
    let e = gradcheck(&[at, k.clone()], |t, v| {
        let y = t.bmm(v[0], v[1], true, true).unwrap();
        readout(t, y, &r35b)
    });
    assert!(e < 1e-4, "bmm_ta_tb {e}");

    let scores = rand_tensor(&mut rng, &[1, 2, 3, 3], -2.0, 2.0);
    let rs = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
    let e = gradcheck(&[scores], |t, v| {
        let y = t.masked_softmax(v[0], &[true, true, false], 0.5).unwrap();
        readout(t, y, &rs)
    });
    assert!(e < 1e-4, "masked_softmax {e}");

    let src = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let rg = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let e = gradcheck(&[src], |t, v| {
        let y = t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap();
        readout(t, y, &rg)
    });
    assert!(e < 1e-4, "gather {e}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
    let e = gradcheck(std::slice::from_ref(&z), |t, v| {
        t.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()
    });
    assert!(e < 1e-4, "ce {e}");

    let target = softmax_with_temperature(&rand_tensor(&mut rng, &[4, 3], -2.0, 2.0), 1.0).unwrap();
    let e = gradcheck(std::slice::from_ref(&z), |t, v| {
        t.soft_cross_entropy(v[0], &target, 2.0).unwrap()
    });
    assert!(e < 1e-4, "soft ce {e}");

    let p = rand_tensor(&mut rng, &[4], 0.1, 0.9);
    let e = gradcheck(&[p], |t, v| {
        t.binary_cross_entropy(v[0], &[1.0, 0.0, 1.0, 0.3]).unwrap()
    });
    assert!(e < 1e-4, "bce {e}");

    let s = rand_tensor(&mut rng, &[4], -3.0, 3.0);
    let e = gradcheck(std::slice::from_ref(&s), |t, v| {
        t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.0]).unwrap()
    });
    assert!(e < 1e-4, "bce logits {e}");
    let e = gradcheck(&[s], |t, v| t.mse(v[0], &[0.1, 0.2, 0.3, 0.4]).unwrap());
    assert!(e < 1e-4, "mse {e}");

    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let e = gradcheck(&[a, b], |t, v| t.cosine_loss(v[0], v[1], &[0, 2]).unwrap());
    assert!(e < 1e-4, "cosine {e}");

    let x = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
    let y = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
    let e = gradcheck(&[x, y], |t, v| {
        let m = t.mul(v[0], v[1]).unwrap();
        let w = t.weighted_sum(&[(m, 0.3), (v[0], -2.0)]).unwrap();
        t.mean(w).unwrap()
    });
    assert!(e < 1e-4, "mul/weighted_sum {e}");
}

#[test]
fn masked_keys_receive_no_attention() {
    let mut tape = Tape::no_grad();
    let s = tape.constant(Tensor::new(&[1, 1, 2, 3], vec![1.0, 50.0, 100.0, 0.0, 0.0, 0.0]).unwrap());
    let p = tape.masked_softmax(s, &[true, true, false], 1.0).unwrap();
    let d = tape.data(p);
    assert_eq!(d[2], 0.0);
    assert_eq!(d[5], 0.0);
    assert!((d[3] - 0.5).abs() < 1e-15);
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            z in prop::collection::vec(-50.0f64..50.0, 1..12),
            t in prop::sample::select(vec![0.5, 1.0, 2.0, 10.0]),
        ) {
            let n = z.len();
            let s = softmax_with_temperature(&Tensor::new(&[n], z).unwrap(), t).unwrap();
            prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn temperature_preserves_argmax(
            z in prop::collection::vec(-50.0f64..50.0, 2..12),
            t in 0.05f64..100.0,
        ) {
            let argmax = |v: &[f64]| v.iter().enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc }).0;
            let n = z.len();
            let s = softmax_with_temperature(&Tensor::new(&[n], z.clone()).unwrap(), t).unwrap();
            prop_assert_eq!(argmax(s.data()), argmax(&z));
        }

        #[test]
        fn clip_twice_equals_once(
            g in prop::collection::vec(-100.0f64..100.0, 1..10),
            max in 0.1f64..50.0,
        ) {
            let mut t = Tensor::zeros(&[g.len()]);
            t.grad = Some(g);
            clip_grad_norm([&mut t], max).unwrap();
            let once = t.grad.clone().unwrap();
            clip_grad_norm([&mut t], max).unwrap();
            for (a, b) in once.iter().zip(t.grad.as_ref().unwrap()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
