use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check;
use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Fixed random weights turning any output into a scalar, so every output
/// entry gets a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(v));
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn conv_of_ones_is_nine() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), &t(&[1, 1, 1], &[9.0]));
}

#[test]
fn conv_output_size_and_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![2, 7, 9]));
    let k = tape.constant(Tensor::zeros(vec![3, 2, 4, 4]));
    let b = tape.constant(Tensor::zeros(vec![3]));
    let y = tape.conv2d(x, k, b, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[3, 3, 4]);
    let bad = tape.constant(Tensor::zeros(vec![3, 5, 4, 4]));
    assert!(matches!(tape.conv2d(x, bad, b, 2, 1), Err(Error::Shape(_))));
    let tiny = tape.constant(Tensor::zeros(vec![2, 2, 2]));
    assert!(tape.conv2d(tiny, k, b, 1, 0).is_err());
}

#[test]
fn linear_example() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[1.0, 1.0]));
    let w = tape.constant(t(&[1, 2], &[2.0, 3.0]));
    let b = tape.constant(t(&[1], &[5.0]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[10.0]);
}

#[test]
fn leaky_relu_values_and_slope() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
    let y = tape.leaky_relu(x, 0.2).unwrap();
    assert_eq!(tape.value(y).data(), &[-0.2, 0.0, 2.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.2, 0.2, 1.0]);
    assert!(tape.leaky_relu(x, 1.0).is_err());
}

#[test]
fn softmax_example_and_shift_invariance() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 1, 1], &[0.0, 2f64.ln()]));
    let y = tape.softmax_channel(x).unwrap();
    let d = tape.value(y).data().to_vec();
    assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);
    let big = tape.constant(t(&[2, 1, 1], &[1000.0, 1000.0 + 2f64.ln()]));
    let z = tape.softmax_channel(big).unwrap();
    assert!(tape.value(z).max_abs_diff(tape.value(y)) < 1e-12);
}

#[test]
fn upsample_midpoint_and_identity() {
    let (a, b) = (0.3, -1.7);
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2], &[a, b]));
    let y = tape.bilinear_upsample(x, 1, 3).unwrap();
    let d = tape.value(y).data();
    assert_eq!(d[0], a);
    assert!((d[1] - (a + b) / 2.0).abs() < 1e-15);
    assert_eq!(d[2], b);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = tape.constant(random(&mut rng, &[2, 3, 4]));
    let same = tape.bilinear_upsample(r, 3, 4).unwrap();
    assert_eq!(tape.value(same), tape.value(r));
    assert!(tape.bilinear_upsample(r, 2, 4).is_err());
}

#[test]
fn half_sum_of_squares_has_gradient_x() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xv = random(&mut rng, &[5]);
    let mut tape = Tape::new();
    let x = tape.leaf(xv.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let loss = tape.scale(s, 0.5);
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).unwrap().max_abs_diff(&xv) < 1e-15);
}

#[test]
fn backward_accumulates_and_zero_grad_resets() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, -2.0]), true);
    let c = tape.leaf(t(&[2], &[3.0, 3.0]), false);
    let p = tape.mul(x, c).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 6.0]);
    assert!(tape.grad(c).is_none());
    tape.zero_grad();
    assert!(tape.grad(x).map_or(true, |g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_rejects_non_scalar_and_constant_losses() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![2]), true);
    assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(tape.backward(c).is_err());
}

#[test]
fn backward_visits_every_op_once_in_reverse() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let a = tape.mul(x, x).unwrap();
    let b = tape.add(a, x).unwrap();
    let c = tape.scale(b, 2.0);
    let s = tape.sum(c);
    let visited = tape.backward(s).unwrap();
    assert_eq!(visited, vec![s, c, b, a]);
}

#[test]
fn pointwise_conv_equals_per_pixel_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (cin, cout, h, w) = (5, 4, 3, 6);
    let xv = random(&mut rng, &[cin, h, w]);
    let kv = random(&mut rng, &[cout, cin, 1, 1]);
    let bv = random(&mut rng, &[cout]);
    let mut tape = Tape::new();
    let x = tape.constant(xv.clone());
    let k = tape.constant(kv.clone());
    let b = tape.constant(bv.clone());
    let y = tape.conv2d(x, k, b, 1, 0).unwrap();
    let wl = tape.constant(kv.clone().reshape(vec![cout, cin]).unwrap());
    for i in 0..h {
        for j in 0..w {
            let px = tape.constant(Tensor::from_fn(vec![cin], |c| xv.at(&[c, i, j])));
            let o = tape.linear(px, wl, b).unwrap();
            for co in 0..cout {
                let got = tape.value(y).at(&[co, i, j]);
                assert!((got - tape.value(o).data()[co]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn neg_log_pick_clamps_zero_probabilities() {
    let mut tape = Tape::new();
    let p = tape.leaf(t(&[2], &[0.0, 1.0]), true);
    let l = tape.neg_log_pick(p, vec![0], 1.0).unwrap();
    let v = tape.value(l).item();
    assert!((v + LOG_EPS.ln()).abs() < 1e-9 && v.is_finite());
    tape.backward(l).unwrap();
    assert!(tape.grad(p).unwrap().all_finite());
}

#[test]
fn class_pool_averages_and_counts() {
    let mut tape = Tape::new();
    let f = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let (v, counts) = tape.class_pool(f, &[0, 0, 1, 1], 4).unwrap();
    assert_eq!(counts, vec![2, 2, 0, 0]);
    assert_eq!(tape.value(v).shape(), &[4, 1]);
    assert_eq!(&tape.value(v).data()[..2], &[1.5, 3.5]);
}

fn gradcheck_instances(name: &str, build: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, GraphFn)) {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, f) = build(&mut rng);
        let r = check(&inputs, STEP, |tape, vars| f(tape, vars)).unwrap();
        assert!(r.relative_error < TOL, "{name} seed {seed}: {r:?}");
    }
}

type GraphFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, Error>>;

#[test]
fn gradcheck_conv2d() {
    gradcheck_instances("conv2d", |rng| {
        let cin = rng.random_range(1..4);
        let cout = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..2);
        let h = rng.random_range(k.max(3)..7);
        let w = rng.random_range(k.max(3)..7);
        let inputs = vec![random(rng, &[cin, h, w]), random(rng, &[cout, cin, k, k]), random(rng, &[cout])];
        (
            inputs,
            Box::new(move |tape, v| {
                let y = tape.conv2d(v[0], v[1], v[2], stride, padding)?;
                project(tape, y, 1)
            }),
        )
    });
}

#[test]
fn gradcheck_linear() {
    gradcheck_instances("linear", |rng| {
        let din = rng.random_range(1..6);
        let dout = rng.random_range(1..6);
        let inputs = vec![random(rng, &[din]), random(rng, &[dout, din]), random(rng, &[dout])];
        (
            inputs,
            Box::new(|tape, v| {
                let y = tape.linear(v[0], v[1], v[2])?;
                project(tape, y, 2)
            }),
        )
    });
}

#[test]
fn gradcheck_leaky_relu() {
    gradcheck_instances("leaky_relu", |rng| {
        // Keep entries away from the kink at zero.
        let x = Tensor::from_fn(vec![3, 4], |_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random::<bool>() { m } else { -m }
        });
        (
            vec![x],
            Box::new(|tape, v| {
                let y = tape.leaky_relu(v[0], 0.2)?;
                project(tape, y, 3)
            }),
        )
    });
}

#[test]
fn gradcheck_softmax() {
    gradcheck_instances("softmax_channel", |rng| {
        let c = rng.random_range(2..5);
        (
            vec![random(rng, &[c, 2, 3])],
            Box::new(|tape, v| {
                let y = tape.softmax_channel(v[0])?;
                project(tape, y, 4)
            }),
        )
    });
}

#[test]
fn gradcheck_bilinear_upsample() {
    gradcheck_instances("bilinear_upsample", |rng| {
        let h = rng.random_range(1..4);
        let w = rng.random_range(2..4);
        let oh = rng.random_range(h..h + 5);
        let ow = rng.random_range(w..w + 5);
        (
            vec![random(rng, &[2, h, w])],
            Box::new(move |tape, v| {
                let y = tape.bilinear_upsample(v[0], oh, ow)?;
                project(tape, y, 5)
            }),
        )
    });
}

#[test]
fn gradcheck_neg_log_pick() {
    gradcheck_instances("neg_log_pick", |rng| {
        let n = 12;
        let p = Tensor::from_fn(vec![n], |_| rng.random_range(0.05..1.0));
        let picks: Vec<usize> = (0..5).map(|_| rng.random_range(0..n)).collect();
        (vec![p], Box::new(move |tape, v| tape.neg_log_pick(v[0], picks.clone(), 0.2)))
    });
}

#[test]
fn gradcheck_class_pool() {
    gradcheck_instances("class_pool", |rng| {
        let labels: Vec<u8> = (0..6).map(|_| [0, 1, 2, crate::datagen::IGNORE][rng.random_range(0..4)]).collect();
        (
            vec![random(rng, &[3, 2, 3])],
            Box::new(move |tape, v| {
                let (p, _) = tape.class_pool(v[0], &labels, 4)?;
                project(tape, p, 6)
            }),
        )
    });
}

#[test]
fn gradcheck_elementwise_and_reductions() {
    gradcheck_instances("row/add/mul/scale/sum", |rng| {
        (
            vec![random(rng, &[3, 4]), random(rng, &[4])],
            Box::new(|tape, v| {
                let r = tape.row(v[0], 1)?;
                let m = tape.mul(r, v[1])?;
                let a = tape.add(m, v[1])?;
                let s = tape.scale(a, -1.5);
                let q = tape.mul(s, s)?;
                Ok(tape.sum(q))
            }),
        )
    });
}

proptest! {
    #[test]
    fn softmax_is_a_simplex(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 2, 2], vals).unwrap());
        let y = tape.softmax_channel(x).unwrap();
        let d = tape.value(y).data();
        for loc in 0..4 {
            let s: f64 = (0..3).map(|c| d[c * 4 + loc]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!((0..3).all(|c| d[c * 4 + loc] >= 0.0));
        }
    }

    #[test]
    fn grads_match_leaf_shapes(h in 3usize..6, w in 3usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[2, h, w]), true);
        let k = tape.leaf(random(&mut rng, &[3, 2, 3, 3]), true);
        let b = tape.leaf(random(&mut rng, &[3]), false);
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        prop_assert_eq!(tape.grad(x).unwrap().shape(), &[2, h, w]);
        prop_assert_eq!(tape.grad(k).unwrap().shape(), &[3, 2, 3, 3]);
        prop_assert!(tape.grad(b).is_none());
    }
}
