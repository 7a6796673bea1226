use proptest::prelude::*;
use varnorm::ndtensor::{gradcheck, gradcheck_many, Graph, Result, Rng, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn points(shape: &[usize], seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = Rng::new(seed);
    (0..5).map(|_| rng.randn(shape)).collect()
}

/// Same points shifted away from zero, for ops defined on positives.
fn positive_points(shape: &[usize], seed: u64) -> Vec<Tensor<f64>> {
    points(shape, seed)
        .into_iter()
        .map(|t| t.map(|v| 0.5 + v.abs()))
        .collect()
}

/// Reduces any node to a scalar through a fixed random weighting, so every
/// output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let w = Rng::new(seed).randn(g.shape(v));
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn check_unary(name: &str, pts: &[Tensor<f64>], op: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) {
    for p in pts {
        let r = gradcheck(
            |g, x| {
                let y = op(g, x)?;
                weighted_sum(g, y, 99)
            },
            p,
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{name}: {r:?}");
    }
}

fn check_binary(
    name: &str,
    lhs: &[Tensor<f64>],
    rhs: &[Tensor<f64>],
    op: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
) {
    for (a, b) in lhs.iter().zip(rhs) {
        let r = gradcheck_many(
            |g, v| {
                let y = op(g, v[0], v[1])?;
                weighted_sum(g, y, 98)
            },
            &[a.clone(), b.clone()],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{name}: {r:?}");
    }
}

#[test]
fn elementwise_binary_ops() {
    let a = points(&[3, 4], 1);
    let b = points(&[3, 4], 2);
    check_binary("add", &a, &b, |g, x, y| g.add(x, y));
    check_binary("sub", &a, &b, |g, x, y| g.sub(x, y));
    check_binary("mul", &a, &b, |g, x, y| g.mul(x, y));
    check_binary("div", &a, &positive_points(&[3, 4], 3), |g, x, y| {
        g.div(x, y)
    });
}

#[test]
fn broadcast_binary_ops() {
    let m = points(&[3, 4], 4);
    let row = points(&[4], 5);
    let s = points(&[1], 6);
    check_binary("add row", &m, &row, |g, x, y| g.add(x, y));
    check_binary("mul row", &row, &m, |g, x, y| g.mul(x, y));
    check_binary("sub scalar", &m, &s, |g, x, y| g.sub(x, y));
    check_binary("div scalar", &m, &positive_points(&[1], 7), |g, x, y| {
        g.div(x, y)
    });
}

#[test]
fn linear_ops() {
    let a = points(&[3, 4], 8);
    let b = points(&[4, 2], 9);
    check_binary("matmul", &a, &b, |g, x, y| g.matmul(x, y));
    let bias = points(&[2], 10);
    for ((x, w), bb) in a.iter().zip(&b).zip(&bias) {
        let r = gradcheck_many(
            |g, v| {
                let y = g.affine(v[0], v[1], v[2])?;
                weighted_sum(g, y, 11)
            },
            &[x.clone(), w.clone(), bb.clone()],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "affine: {r:?}");
    }
}

#[test]
fn unary_ops() {
    let p = points(&[2, 5], 12);
    // keep relu and clamp probes off their kinks
    let off_kink: Vec<Tensor<f64>> = p
        .iter()
        .map(|t| t.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v }))
        .collect();
    check_unary("relu", &off_kink, |g, x| g.relu(x));
    check_unary("exp", &p, |g, x| g.exp(x));
    check_unary("log", &positive_points(&[2, 5], 13), |g, x| g.log(x));
    check_unary("sqrt", &positive_points(&[2, 5], 14), |g, x| g.sqrt(x));
    check_unary("square", &p, |g, x| g.square(x));
    check_unary("neg", &p, |g, x| g.neg(x));
    check_unary("scale", &p, |g, x| g.scale(x, -1.7));
    check_unary("offset", &p, |g, x| g.offset(x, 0.3));
    let clamp_pts: Vec<Tensor<f64>> = p
        .iter()
        .map(|t| {
            t.map(|v| {
                if (v.abs() - 0.5).abs() < 0.05 {
                    v * 1.3
                } else {
                    v
                }
            })
        })
        .collect();
    check_unary("clamp", &clamp_pts, |g, x| g.clamp(x, -0.5, 0.5));
}

#[test]
fn reductions_and_reshapes() {
    let p = points(&[3, 4], 15);
    check_unary("sum", &p, |g, x| g.sum(x));
    check_unary("mean", &p, |g, x| g.mean(x));
    check_unary("sum_rows", &p, |g, x| g.sum_rows(x));
    check_unary("log_softmax_rows", &p, |g, x| g.log_softmax_rows(x));
    check_unary("gather_rows", &p, |g, x| g.gather_rows(x, &[2, 0, 2, 1]));
    check_unary("slice", &p, |g, x| g.slice(x, 3, &[2, 3]));
    check_binary("concat_cols", &p, &points(&[3, 2], 16), |g, x, y| {
        g.concat_cols(x, y)
    });
}

#[test]
fn matmul_matches_naive_loops() {
    let mut rng = Rng::new(17);
    let a: Tensor<f64> = rng.randn(&[5, 7]);
    let b: Tensor<f64> = rng.randn(&[7, 3]);
    let c = a.matmul(&b).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..7 {
                s += a.get2(i, k) * b.get2(k, j);
            }
            assert!((c.get2(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn shared_subexpression_accumulates() {
    // f(x) = x * x + x has f'(x) = 2x + 1
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    let y = g.add(sq, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).data(), &[7.0]);
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::zeros(&[2, 3]));
    let b = g.param(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, b).is_err());
    assert!(g.matmul(a, a).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::scalar(1000.0));
    assert!(g.exp(a).is_err());
    let z = g.param(Tensor::scalar(0.0));
    assert!(g.log(z).is_err());
    assert!(g.div(a, z).is_err());
}

#[test]
fn backward_from_non_scalar_is_an_error() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(a).is_err());
}

fn small_matrix() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c)
            .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

proptest! {
    #[test]
    fn add_commutes(a in small_matrix(), seed in any::<u64>()) {
        let b = Rng::new(seed).randn(a.shape());
        prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
    }

    #[test]
    fn transpose_is_an_involution(a in small_matrix()) {
        prop_assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }

    #[test]
    fn sum_gradient_is_ones(a in small_matrix()) {
        let mut g = Graph::<f64>::new();
        let x = g.param(a.clone());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        prop_assert!(grads.wrt(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn log_softmax_rows_normalize(a in small_matrix()) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(a.clone());
        let l = g.log_softmax_rows(x).unwrap();
        let v = g.value(l);
        for i in 0..v.rows() {
            let total: f64 = v.row(i).iter().map(|x| x.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
