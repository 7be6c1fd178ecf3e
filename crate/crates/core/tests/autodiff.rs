use cda::autodiff::{grad_check, Graph, Var, EXP_CLAMP};
use cda::optim::Sgd;
use cda::params::ParamStore;
use cda::tensor::{Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Contracts the op output with fixed random weights so every output
/// coordinate carries a distinct upstream gradient.
fn contract(g: &mut Graph, out: Var, seed: u64) -> Result<Var, TensorError> {
    let v = g.value(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, v.rows(), v.cols(), -1.0, 1.0));
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

fn check_op(
    store: &ParamStore,
    seed: u64,
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
) -> Result<(), TestCaseError> {
    let rep = grad_check(store, None, 1e-5, 1e-4, |g: &mut Graph, p: &ParamStore| {
        let vars: Vec<Var> = p.names().map(|n| g.param(p, n)).collect::<Result<_, _>>()?;
        let out = op(g, &vars)?;
        contract(g, out, seed)
    })
    .map_err(|e: TensorError| TestCaseError::fail(e.to_string()))?;
    prop_assert!(rep.passed, "max rel error {} failures {:?}", rep.max_rel_error, rep.failures.first());
    Ok(())
}

fn store(rng: &mut ChaCha8Rng, shapes: &[(usize, usize)], lo: f64, hi: f64) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        s.insert(format!("p{i}"), random(rng, r, c, lo, hi));
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_matches_finite_differences(seed in any::<u64>(), r in 1usize..4, k in 1usize..4, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = store(&mut rng, &[(r, k), (k, c)], -1.0, 1.0);
        check_op(&s, seed, |g, v| g.matmul(v[0], v[1]))?;
    }

    #[test]
    fn elementwise_binaries_match(seed in any::<u64>(), r in 1usize..4, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = store(&mut rng, &[(r, c), (r, c), (1, c)], -1.0, 1.0);
        check_op(&s, seed, |g, v| g.add(v[0], v[1]))?;
        check_op(&s, seed, |g, v| g.sub(v[0], v[1]))?;
        check_op(&s, seed, |g, v| g.mul(v[0], v[1]))?;
        check_op(&s, seed, |g, v| g.add(v[0], v[2]))?;
        check_op(&s, seed, |g, v| g.mul(v[1], v[2]))?;
    }

    #[test]
    fn unary_ops_match(seed in any::<u64>(), r in 1usize..4, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = store(&mut rng, &[(r, c)], -2.0, 2.0);
        check_op(&s, seed, |g, v| g.tanh(v[0]))?;
        check_op(&s, seed, |g, v| g.sigmoid(v[0]))?;
        check_op(&s, seed, |g, v| g.exp(v[0]))?;
        check_op(&s, seed, |g, v| g.square(v[0]))?;
        check_op(&s, seed, |g, v| g.log_sigmoid(v[0]))?;
        check_op(&s, seed, |g, v| g.scale(v[0], -1.7))?;
        check_op(&s, seed, |g, v| g.neg(v[0]))?;
        let pos = store(&mut rng, &[(r, c)], 0.3, 3.0);
        check_op(&pos, seed, |g, v| g.ln(v[0]))?;
        check_op(&pos, seed, |g, v| g.sqrt(v[0]))?;
    }

    #[test]
    fn reductions_match(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = store(&mut rng, &[(r, c)], -1.0, 1.0);
        for axis in [0, 1] {
            check_op(&s, seed, |g, v| g.sum_axis(v[0], axis))?;
            check_op(&s, seed, |g, v| g.mean_axis(v[0], axis))?;
            check_op(&s, seed, |g, v| g.softmax(v[0], axis))?;
        }
        check_op(&s, seed, |g, v| g.sum_all(v[0]))?;
        check_op(&s, seed, |g, v| g.mean_all(v[0]))?;
        check_op(&s, seed, |g, v| g.sq_norm(v[0]))?;
    }

    #[test]
    fn structural_ops_match(seed in any::<u64>(), r in 1usize..4, c in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shapes = vec![(r, n), (r, 1), (r, c)];
        shapes.extend(std::iter::repeat_n((r, c), n));
        let s = store(&mut rng, &shapes, -1.0, 1.0);
        check_op(&s, seed, |g, v| g.concat_cols(&[v[0], v[1], v[2]]))?;
        check_op(&s, seed, |g, v| g.concat_rows(&[v[2], v[3]]))?;
        check_op(&s, seed, |g, v| g.slice_cols(v[0], n - 1, 1))?;
        check_op(&s, seed, |g, v| g.gather_rows(v[2], &[r - 1, 0, r - 1]))?;
        check_op(&s, seed, |g, v| g.scale_rows(v[2], v[1]))?;
        check_op(&s, seed, |g, v| g.row_dot(v[2], v[3]))?;
        check_op(&s, seed, |g, v| g.weighted_sum(v[0], &v[3..3 + n]))?;
    }

    #[test]
    fn softmax_gradient_sums_to_zero_along_axis(seed in any::<u64>(), r in 1usize..5, c in 1usize..5, axis in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let a = g.constant(random(&mut rng, r, c, -3.0, 3.0));
        let s = g.softmax(a, axis).unwrap();
        let root = contract(&mut g, s, seed).unwrap();
        let grad = g.backward(root).unwrap().get(a).unwrap().clone();
        let lanes = if axis == 1 { r } else { c };
        for l in 0..lanes {
            let sum: f64 = if axis == 1 {
                grad.row(l).iter().sum()
            } else {
                (0..r).map(|i| grad.get(i, l)).sum()
            };
            prop_assert!(sum.abs() < 1e-12, "lane {l} sums to {sum}");
        }
    }

    #[test]
    fn evaluation_is_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let a = g.constant(random(&mut rng, 3, 4, -1.0, 1.0));
            let b = g.constant(random(&mut rng, 4, 2, -1.0, 1.0));
            let m = g.matmul(a, b).unwrap();
            let t = g.tanh(m).unwrap();
            let s = g.softmax(t, 1).unwrap();
            let root = g.sq_norm(s).unwrap();
            let grads = g.backward(root).unwrap();
            (g.scalar(root).to_bits(), grads.get(a).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn gradient_shapes_match_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let a = g.constant(random(&mut rng, 3, 2, -1.0, 1.0));
    let b = g.constant(random(&mut rng, 2, 5, -1.0, 1.0));
    let m = g.matmul(a, b).unwrap();
    let root = g.mean_all(m).unwrap();
    let grads = g.backward(root).unwrap();
    for v in [a, b, m] {
        assert_eq!(grads.get(v).unwrap().shape(), g.value(v).shape());
    }
}

#[test]
fn backward_is_repeatable() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::row_vector(&[0.3, -1.2, 2.0]));
    let e = g.exp(a).unwrap();
    let root = g.sum_all(e).unwrap();
    let first = g.backward(root).unwrap().get(a).unwrap().clone();
    let second = g.backward(root).unwrap().get(a).unwrap().clone();
    assert_eq!(first, second);
}

#[test]
fn grad_reverse_negates_and_detach_blocks() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::row_vector(&[1.0, 2.0]));
    let r = g.grad_reverse(a, 0.5).unwrap();
    let d = g.detach(a);
    assert_eq!(g.value(r), g.value(a));
    let sr = g.sum_all(r).unwrap();
    let sd = g.sum_all(d).unwrap();
    let root = g.add(sr, sd).unwrap();
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[-0.5, -0.5]);
}

#[test]
fn exp_clamp_is_counted() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::row_vector(&[EXP_CLAMP + 10.0, 0.0]));
    let e = g.exp(a).unwrap();
    assert_eq!(g.exp_clamp_count(), 1);
    assert_eq!(g.value(e).data()[0], EXP_CLAMP.exp());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::row_vector(&[-1.0]));
    assert!(g.ln(a).is_err());
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(2, 3));
    assert!(g.matmul(a, b).is_err());
    let c = g.constant(Tensor::zeros(3, 2));
    assert!(g.add(a, c).is_err());
}

#[test]
fn sgd_on_square_converges() {
    let mut p = ParamStore::new();
    p.insert("x", Tensor::scalar(1.0));
    let mut opt = Sgd::new(0.1, 0.0, None).unwrap();
    for _ in 0..100 {
        let mut g = Graph::new();
        let x = g.param(&p, "x").unwrap();
        let root = g.square(x).unwrap();
        let grads = g.backward(root).unwrap().for_params(&g);
        opt.step(&mut p, &grads).unwrap();
    }
    let x = p.get("x").unwrap().item();
    assert!(x.abs() < 1e-8);
    assert!((x - 0.8f64.powi(100)).abs() < 1e-20);
}
