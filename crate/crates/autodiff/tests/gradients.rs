use autodiff::{gradient_check, Adam, AdamConfig, ParamStore, Primitive, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Max relative error between tape gradients and central differences, over
/// every coordinate of every input. The loss is `sum(out * w)` for a fixed
/// random weighting `w` so that no output coordinate is privileged.
fn fd_error<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let loss_of = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        let n = tape.value(out).len();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 13.0).collect();
        let w = tape.constant(Tensor::new(tape.value(out).shape().to_vec(), w)?);
        let p = tape.mul(out, w)?;
        tape.sum(p)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = loss_of(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let l = loss_of(&mut tape, &vars).unwrap();
        tape.value(l).item()
    };

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    worst
}

fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Values kept away from zero so kinked primitives are probed off their kink.
fn off_zero(range: std::ops::Range<f64>) -> impl Strategy<Value = f64> {
    range.prop_filter("near kink", |v: &f64| v.abs() > 1e-2)
}

fn matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| {
        prop::collection::vec(off_zero(-2.0..2.0), r * c).prop_map(move |d| tensor(&[r, c], &d))
    })
}

fn same_shape_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..=4, 1usize..=5).prop_flat_map(|(r, c)| {
        (
            prop::collection::vec(off_zero(-2.0..2.0), r * c),
            prop::collection::vec(off_zero(-2.0..2.0), r * c),
        )
            .prop_map(move |(a, b)| (tensor(&[r, c], &a), tensor(&[r, c], &b)))
    })
}

fn rows_of(width: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..=4).prop_flat_map(move |r| {
        (
            prop::collection::vec(-2.0..2.0f64, r * width),
            prop::collection::vec(-2.0..2.0f64, r * width),
        )
            .prop_map(move |(a, b)| (tensor(&[r, width], &a), tensor(&[r, width], &b)))
    })
}

fn unary(prim: Primitive, x: &Tensor) -> f64 {
    fd_error(std::slice::from_ref(x), |t, v| t.apply(prim, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_gradients(
        (m, k, n) in (1usize..=4, 1usize..=4, 1usize..=4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let err = fd_error(&[tensor(&[m, k], &a), tensor(&[k, n], &b)], |t, v| t.apply(Primitive::MatMul, v));
        prop_assert!(err < FD_TOL, "err {err}");
    }

    #[test]
    fn elementwise_binary_gradients((a, b) in same_shape_pair()) {
        for prim in [Primitive::Add, Primitive::Sub, Primitive::Multiply, Primitive::Divide] {
            let err = fd_error(&[a.clone(), b.clone()], |t, v| t.apply(prim, v));
            prop_assert!(err < FD_TOL, "{prim:?} err {err}");
        }
    }

    #[test]
    fn broadcast_binary_gradients(a in matrix(4, 5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let bias: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        let per_row: Vec<f64> = (0..r).map(|_| rng.random_range(0.5..2.0)).collect();
        for b in [tensor(&[c], &bias), tensor(&[r, 1], &per_row), tensor(&[1], &bias[..1])] {
            for prim in [Primitive::Add, Primitive::Sub, Primitive::Multiply, Primitive::Divide] {
                let err = fd_error(&[a.clone(), b.clone()], |t, v| t.apply(prim, v));
                prop_assert!(err < FD_TOL, "{prim:?} {:?} err {err}", b.shape());
            }
            let err = fd_error(&[b.clone(), a.clone()], |t, v| t.apply(Primitive::Broadcast, v));
            prop_assert!(err < FD_TOL, "broadcast err {err}");
        }
    }

    #[test]
    fn activation_gradients(x in matrix(4, 5)) {
        for prim in [
            Primitive::Relu,
            Primitive::Sigmoid,
            Primitive::Tanh,
            Primitive::Silu,
            Primitive::Square,
            Primitive::Abs,
            Primitive::Exp,
            Primitive::Scale(-1.7),
            Primitive::MeanReduce,
            Primitive::SumReduce,
            Primitive::SumLast,
        ] {
            let err = unary(prim, &x);
            prop_assert!(err < FD_TOL, "{prim:?} err {err}");
        }
    }

    #[test]
    fn sqrt_gradient(x in matrix(4, 5)) {
        let pos = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.abs() + 0.1).collect()).unwrap();
        let err = unary(Primitive::Sqrt, &pos);
        prop_assert!(err < FD_TOL, "err {err}");
    }

    #[test]
    fn clamp_gradient(x in matrix(4, 5)) {
        let kept = x.data().iter().all(|v| (v - 0.5).abs() > 1e-2 && (v + 0.5).abs() > 1e-2);
        prop_assume!(kept);
        let err = fd_error(std::slice::from_ref(&x), |t, v| t.clamp(v[0], -0.5, 0.5));
        prop_assert!(err < FD_TOL, "err {err}");
    }

    #[test]
    fn structural_gradients((a, b) in same_shape_pair(), cut in 0usize..5) {
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let err = fd_error(&[a.clone(), b.clone()], |t, v| t.apply(Primitive::ConcatCols, v));
        prop_assert!(err < FD_TOL);
        let err = fd_error(&[a.clone(), b.clone()], |t, v| t.apply(Primitive::ConcatRows, v));
        prop_assert!(err < FD_TOL);
        let s = cut.min(c - 1);
        let err = unary(Primitive::SliceCols { start: s, end: c }, &a);
        prop_assert!(err < FD_TOL);
        let s = cut.min(r - 1);
        let err = unary(Primitive::SliceRows { start: s, end: r }, &a);
        prop_assert!(err < FD_TOL);
        let idx: Vec<usize> = (0..2 * r).map(|i| (i * 3 + cut) % r).collect();
        let err = fd_error(std::slice::from_ref(&a), |t, v| t.gather_rows(v[0], &idx));
        prop_assert!(err < FD_TOL);
        let err = fd_error(std::slice::from_ref(&a), |t, v| {
            let flat = t.reshape(v[0], &[r * c])?;
            t.square(flat)
        });
        prop_assert!(err < FD_TOL);
    }

    #[test]
    fn group_max_gradient(x in matrix(6, 4)) {
        let r = x.shape()[0];
        let groups = if r % 2 == 0 { 2 } else { 1 };
        // Ties within a group make the max non-differentiable.
        let c = x.shape()[1];
        let distinct = (0..c).all(|j| {
            let mut col: Vec<f64> = (0..r).map(|i| x.data()[i * c + j]).collect();
            col.sort_by(f64::total_cmp);
            col.windows(2).all(|w| w[1] - w[0] > 1e-3)
        });
        prop_assume!(distinct);
        let err = fd_error(std::slice::from_ref(&x), |t, v| t.group_max(v[0], groups));
        prop_assert!(err < FD_TOL, "err {err}");
    }

    #[test]
    fn block_left_matmul_gradient(j in 1usize..=4, blocks in 1usize..=3, h in 1usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adj: Vec<f64> = (0..j * j).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..blocks * j * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = fd_error(&[tensor(&[j, j], &adj), tensor(&[blocks * j, h], &x)], |t, v| {
            t.block_left_matmul(v[0], v[1])
        });
        prop_assert!(err < FD_TOL, "err {err}");
    }

    #[test]
    fn rotation_algebra_gradients((a, b) in rows_of(9), (u, w) in rows_of(3)) {
        prop_assume!(a.shape()[0] == u.shape()[0]);
        let err = fd_error(&[a.clone(), b.clone()], |t, v| t.apply(Primitive::Bmm3, v));
        prop_assert!(err < FD_TOL);
        let err = fd_error(&[a.clone(), u.clone()], |t, v| t.apply(Primitive::Bmv3, v));
        prop_assert!(err < FD_TOL);
        let err = fd_error(&[u.clone(), w.clone()], |t, v| t.apply(Primitive::Cross3, v));
        prop_assert!(err < FD_TOL);
    }

    #[test]
    fn backward_is_linear_in_the_loss(x in matrix(3, 4)) {
        let loss_a = |t: &mut Tape, v: Var| -> Result<Var> {
            let s = t.sigmoid(v)?;
            t.sum(s)
        };
        let loss_b = |t: &mut Tape, v: Var| -> Result<Var> {
            let s = t.square(v)?;
            t.mean(s)
        };
        let grad_of = |combine: u8| -> Vec<f64> {
            let mut t = Tape::new();
            let v = t.param(x.clone());
            let la = loss_a(&mut t, v).unwrap();
            let lb = loss_b(&mut t, v).unwrap();
            let l = match combine {
                0 => la,
                1 => lb,
                _ => t.add(la, lb).unwrap(),
            };
            t.backward(l).unwrap().get(v).unwrap().data().to_vec()
        };
        let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..gs.len() {
            prop_assert!((gs[i] - (ga[i] + gb[i])).abs() < 1e-12);
        }
    }
}

#[derive(Clone)]
struct Mlp {
    params: ParamStore,
}

impl Mlp {
    fn random(seed: u64, widths: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (i, w) in widths.windows(2).enumerate() {
            let scale = (1.0 / w[0] as f64).sqrt();
            let wdata: Vec<f64> = (0..w[0] * w[1]).map(|_| rng.random_range(-scale..scale)).collect();
            let bdata: Vec<f64> = (0..w[1]).map(|_| rng.random_range(-0.1..0.1)).collect();
            params.add(format!("w{i}"), tensor(&[w[0], w[1]], &wdata));
            params.add(format!("b{i}"), tensor(&[w[1]], &bdata));
        }
        Self { params }
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let layers = vars.len() / 2;
        let mut h = x;
        for l in 0..layers {
            let z = tape.matmul(h, vars[2 * l])?;
            h = tape.add(z, vars[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.tanh(h)?;
            }
        }
        let sq = tape.square(h)?;
        tape.mean(sq)
    }
}

#[test]
fn three_layer_net_matches_finite_differences() {
    let net = Mlp::random(7, &[4, 6, 5, 2]);
    let x = tensor(&[3, 4], &[0.3, -0.2, 0.9, 1.1, -0.7, 0.4, 0.05, -1.3, 0.6, 0.6, -0.5, 0.2]);
    let mut tape = Tape::new();
    let vars = net.params.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let loss = net.forward(&mut tape, &vars, xv).unwrap();
    let grads = tape.backward(loss).unwrap();

    let loss_at = |params: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let vars = params.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let l = Mlp { params: params.clone() }.forward(&mut t, &vars, xv).unwrap();
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (slot, v) in vars.iter().enumerate() {
        let g = grads.get(*v).expect("every parameter reaches the loss");
        for i in 0..g.len() {
            let mut plus = net.params.clone();
            plus.get_mut(slot).data_mut()[i] += FD_STEP;
            let mut minus = net.params.clone();
            minus.get_mut(slot).data_mut()[i] -= FD_STEP;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP);
            worst = worst.max((g.data()[i] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn forward_and_backward_are_bit_identical() {
    let run = || {
        let net = Mlp::random(11, &[3, 8, 1]);
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape, true);
        let x = tape.constant(tensor(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]));
        let loss = net.forward(&mut tape, &vars, x).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let value = tape.value(loss).item();
        (value, net.params.collect_grads(&mut grads, &vars))
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    for (a, b) in g1.iter().zip(&g2) {
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let mut params = ParamStore::new();
    params.add("p", tensor(&[2], &[1.5, -0.8]));
    let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() }, &params);
    let bowl = |t: &mut Tape, v: Var| -> Result<Var> {
        let k = t.constant(tensor(&[2], &[1.0, 4.0]));
        let sq = t.square(v)?;
        let w = t.mul(sq, k)?;
        t.sum(w)
    };
    let mut last = f64::INFINITY;
    for _ in 0..100 {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let loss = bowl(&mut tape, vars[0]).unwrap();
        let value = tape.value(loss).item();
        assert!(value < last, "loss went from {last} to {value}");
        last = value;
        let mut grads = tape.backward(loss).unwrap();
        let g = params.collect_grads(&mut grads, &vars);
        adam.step(&mut params, &g).unwrap();
    }
}

#[test]
fn gradient_check_on_a_smooth_network() {
    let p = tensor(&[2, 3], &[0.4, -0.1, 0.8, -0.9, 0.3, 0.2]);
    let w = tensor(&[3, 2], &[0.5, -0.3, 0.2, 0.7, -0.6, 0.1]);
    let err = gradient_check(
        |t, x| {
            let w = t.constant(w.clone());
            let h = t.matmul(x, w)?;
            let h = t.silu(h)?;
            let s = t.sum_last(h)?;
            let s = t.sigmoid(s)?;
            t.mean(s)
        },
        &p,
        FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "err {err}");
}
