use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn matmul_hand_example() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn relu_definition() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn sum_of_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(vec![2, 3]));
    let s = tape.sum(x).unwrap();
    assert_eq!(tape.value(s).item().unwrap(), 6.0);
}

#[test]
fn shape_errors_name_operands() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { op, shapes, .. }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = tape.constant(Tensor::zeros(vec![4]));
    assert!(matches!(tape.add(a, c), Err(Error::Shape { .. })));
}

#[test]
fn log_below_floor_is_domain_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[1.0, 1e-13]));
    assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
    let z = tape.constant(t(&[1], &[0.0]));
    assert!(matches!(tape.log(z), Err(Error::Domain { .. })));
    let y = tape.constant(t(&[1], &[1e-12]));
    assert!(tape.log(y).is_ok());
}

#[test]
fn divide_by_zero_is_domain_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[1.0, 2.0]));
    let z = tape.constant(Tensor::scalar(0.0));
    assert!(matches!(tape.div_scalar(x, z), Err(Error::Domain { .. })));
    let zz = tape.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(tape.div(x, zz), Err(Error::Domain { .. })));
}

#[test]
fn softmax_examples() {
    let p = softmax(&t(&[3], &[0.0, 0.0, 0.0])).unwrap();
    for &v in p.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let p = softmax(&t(&[2], &[1000.0, 0.0])).unwrap();
    assert!(p.all_finite());
    assert!((p.data()[0] - 1.0).abs() < 1e-15);
    assert!(p.data()[1] < 1e-300);

    // exp(ln 7) = 7, exp(ln 2) = 2, exp(ln 1) = 1; normalized by 10
    let p = softmax(&t(&[3], &[7f64.ln(), 2f64.ln(), 0.0])).unwrap();
    for (v, want) in p.data().iter().zip([0.7, 0.2, 0.1]) {
        assert!((v - want).abs() < 1e-15, "{v} vs {want}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let x = Tensor::from_fn(vec![4, 7], |_| rng.random_range(-30.0..30.0));
        let p = softmax(&x).unwrap();
        for r in 0..4 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(r).iter().all(|&v| v > 0.0 && v < 1.0 || v == 1.0));
        }
    }
}

#[test]
fn softmax_rejects_scalar() {
    assert!(matches!(softmax(&Tensor::scalar(1.0f64)), Err(Error::Shape { .. })));
}

#[test]
fn backward_sum_and_mean() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_fn(vec![2, 3, 2], |i| i as f64));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.dense(s).data(), &[1.0]);
    assert!(g.dense(x).data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[4], &[1.0, 5.0, -2.0, 0.5]));
    let m = tape.mean(x).unwrap();
    let g = tape.backward(m).unwrap();
    assert_eq!(g.dense(x).data(), &[0.25; 4]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::ones(vec![3]));
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn unreachable_nodes_get_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::ones(vec![3]));
    let unrelated = tape.leaf(Tensor::<f64>::ones(vec![2]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(unrelated).is_none());
    assert_eq!(g.dense(unrelated).data(), &[0.0, 0.0]);
}

#[test]
fn add_and_mul_route_gradients() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let b = tape.leaf(t(&[3], &[4.0, 5.0, 6.0]));
    let w = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let s = tape.add(a, b).unwrap();
    let sw = tape.mul(s, w).unwrap();
    let root = tape.sum(sw).unwrap();
    let g = tape.backward(root).unwrap();
    // upstream into the add is w; both parents receive it unchanged
    assert_eq!(g.dense(a).data(), &[0.5, -1.0, 2.0]);
    assert_eq!(g.dense(b).data(), &[0.5, -1.0, 2.0]);

    let mut tape = Tape::new();
    let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let b = tape.leaf(t(&[3], &[4.0, 5.0, 6.0]));
    let p = tape.mul(a, b).unwrap();
    let root = tape.sum(p).unwrap();
    let g = tape.backward(root).unwrap();
    assert_eq!(g.dense(a).data(), &[4.0, 5.0, 6.0]);
    assert_eq!(g.dense(b).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn fan_out_accumulates() {
    // f = sum(x * x + x) → df/dx = 2x + 1
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[3.0, -1.0]));
    let sq = tape.mul(x, x).unwrap();
    let y = tape.add(sq, x).unwrap();
    let root = tape.sum(y).unwrap();
    let g = tape.backward(root).unwrap();
    assert_eq!(g.dense(x).data(), &[7.0, -1.0]);
}

#[test]
fn broadcast_binary_reduces_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f64 * 0.1));
    let c = tape.leaf(t(&[1, 3, 1, 1], &[1.0, 2.0, 3.0]));
    let y = tape.mul(x, c).unwrap();
    let root = tape.sum(y).unwrap();
    let g = tape.backward(root).unwrap();
    let gc = g.dense(c);
    // each channel gradient is the sum of that channel's inputs
    let xv = tape.value(x).data();
    for ch in 0..3 {
        let want: f64 = (0..2)
            .flat_map(|b| (0..4).map(move |k| (b * 3 + ch) * 4 + k))
            .map(|i| xv[i])
            .sum();
        assert!((gc.data()[ch] - want).abs() < 1e-12);
    }
}

#[test]
fn grad_check_sum_of_squares() {
    let x = t(&[3], &[1.0, 2.0, 3.0]);
    let err = grad_check(
        |tape, v| {
            let sq = tape.mul(v, v)?;
            tape.sum(sq)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_constant_function() {
    let x = t(&[3], &[1.0, 2.0, 3.0]);
    let err = grad_check(|tape, _| Ok(tape.constant(Tensor::scalar(4.0))), &x, 1e-4).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_reports_non_finite() {
    let x = t(&[1], &[800.0]);
    let r = grad_check(
        |tape, v| {
            let s = tape.scale(v, 1.0)?;
            let e = tape.sum(s)?;
            let big = tape.constant(Tensor::scalar(f64::INFINITY));
            tape.add(e, big)
        },
        &x,
        1e-4,
    );
    assert!(matches!(r, Err(Error::Domain { .. })));
}

type UnaryCase = (
    &'static str,
    fn(&mut Tape<f64>, Var) -> Result<Var>,
    fn(&mut ChaCha8Rng) -> Tensor<f64>,
);

fn positive(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(vec![3, 4], |_| rng.random_range(0.5..2.0))
}

fn signed(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    // keep clear of relu's kink
    Tensor::from_fn(vec![3, 4], |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Weighted sum makes every coordinate's gradient distinct.
fn weighted(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let w = Tensor::from_fn(tape.shape(y).to_vec(), |i| {
        0.3 + (i as f64 * 0.7).sin() * (n as f64).recip()
    });
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[test]
fn every_op_passes_grad_check_at_ten_points() {
    let cases: Vec<UnaryCase> = vec![
        (
            "relu",
            |tp, v| {
                let y = tp.relu(v)?;
                weighted(tp, y)
            },
            signed,
        ),
        (
            "log",
            |tp, v| {
                let y = tp.log(v)?;
                weighted(tp, y)
            },
            positive,
        ),
        (
            "exp",
            |tp, v| {
                let y = tp.exp(v)?;
                weighted(tp, y)
            },
            signed,
        ),
        (
            "sum",
            |tp, v| {
                let y = tp.mul(v, v)?;
                tp.sum(y)
            },
            signed,
        ),
        (
            "mean",
            |tp, v| {
                let y = tp.mul(v, v)?;
                tp.mean(y)
            },
            signed,
        ),
        (
            "sum_last",
            |tp, v| {
                let y = tp.sum_last(v)?;
                let y = tp.mul(y, y)?;
                tp.sum(y)
            },
            signed,
        ),
        (
            "mean_last",
            |tp, v| {
                let y = tp.mean_last(v)?;
                let y = tp.mul(y, y)?;
                tp.sum(y)
            },
            signed,
        ),
        (
            "max_last",
            |tp, v| {
                let y = tp.max_last(v)?;
                weighted(tp, y)
            },
            signed,
        ),
        (
            "scale",
            |tp, v| {
                let y = tp.scale(v, -2.5)?;
                weighted(tp, y)
            },
            signed,
        ),
        (
            "reshape",
            |tp, v| {
                let y = tp.reshape(v, &[2, 6])?;
                weighted(tp, y)
            },
            signed,
        ),
        (
            "broadcast",
            |tp, v| {
                let r = tp.reshape(v, &[1, 3, 4])?;
                let y = tp.broadcast(r, &[2, 3, 4])?;
                weighted(tp, y)
            },
            signed,
        ),
        (
            "softmax",
            |tp, v| {
                let y = tp.softmax(v)?;
                weighted(tp, y)
            },
            signed,
        ),
        (
            "log_softmax",
            |tp, v| {
                let y = tp.log_softmax(v)?;
                weighted(tp, y)
            },
            signed,
        ),
        (
            "matmul",
            |tp, v| {
                let w = tp.constant(Tensor::from_fn(vec![4, 2], |i| i as f64 * 0.3 - 1.0));
                let y = tp.matmul(v, w)?;
                weighted(tp, y)
            },
            signed,
        ),
        (
            "matmul_rhs",
            |tp, v| {
                let w = tp.constant(Tensor::from_fn(vec![2, 3], |i| i as f64 * 0.3 - 1.0));
                let y = tp.matmul(w, v)?;
                weighted(tp, y)
            },
            signed,
        ),
        (
            "add_broadcast",
            |tp, v| {
                let c = tp.constant(Tensor::from_fn(vec![4], |i| i as f64));
                let y = tp.add(v, c)?;
                let y = tp.mul(y, y)?;
                weighted(tp, y)
            },
            signed,
        ),
        (
            "sub",
            |tp, v| {
                let r = tp.sum_last(v)?;
                let r = tp.reshape(r, &[3, 1])?;
                let y = tp.sub(v, r)?;
                let y = tp.mul(y, y)?;
                weighted(tp, y)
            },
            signed,
        ),
        (
            "mul_broadcast",
            |tp, v| {
                let r = tp.mean_last(v)?;
                let r = tp.reshape(r, &[3, 1])?;
                let y = tp.mul(v, r)?;
                weighted(tp, y)
            },
            signed,
        ),
        (
            "div",
            |tp, v| {
                let r = tp.sum_last(v)?;
                let r = tp.reshape(r, &[3, 1])?;
                let y = tp.div(v, r)?;
                weighted(tp, y)
            },
            positive,
        ),
        (
            "div_scalar",
            |tp, v| {
                let s = tp.sum(v)?;
                let y = tp.div_scalar(v, s)?;
                weighted(tp, y)
            },
            positive,
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, f, gen) in cases {
        for _ in 0..10 {
            let x = gen(&mut rng);
            let err = grad_check(f, &x, 1e-4).unwrap();
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

#[test]
fn conv2d_passes_grad_check_for_input_and_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
        let weight = random(&mut rng, &[3, 2, 3, 3]);
        let input = random(&mut rng, &[2, 2, 5, 6]);
        let w = weight.clone();
        let err = grad_check(
            move |tp, x| {
                let wv = tp.constant(w.clone());
                let y = tp.conv2d(x, wv, stride, pad)?;
                weighted(tp, y)
            },
            &input,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "input grad, stride {stride} pad {pad}: {err}");
        let err = grad_check(
            move |tp, wv| {
                let x = tp.constant(input.clone());
                let y = tp.conv2d(x, wv, stride, pad)?;
                weighted(tp, y)
            },
            &weight,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "weight grad, stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[2, 3, 6, 6]));
        let w = tape.leaf(random(&mut rng, &[4, 3, 3, 3]));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let y = tape.relu(y).unwrap();
        let s = tape.mean(y).unwrap();
        let g = tape.backward(s).unwrap();
        (tape.value(y).clone(), g.dense(w))
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(ga, gb);
}

#[test]
fn generic_over_f32() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap());
    let y = tape.mul(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.dense(x).data(), &[2.0f32, 4.0]);
}
