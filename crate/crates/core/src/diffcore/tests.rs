use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

#[test]
fn grad_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, -2.0, 5.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn grad_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = g.mul(x, x);
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn sigmoid_slope_at_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25]);
}

#[test]
fn non_scalar_root_rejected() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(Error::InvalidArgument(_))));
}

#[test]
fn unreachable_leaf_keeps_zero_grad() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let unused = g.param(t(&[2], &[3.0, 4.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_twice_doubles_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.param(rand_t(&mut rng, &[4, 3]));
    let w = g.param(rand_t(&mut rng, &[3, 2]));
    let y = g.matmul(x, w);
    let y = g.gelu(y);
    let s = g.mean(y);
    g.backward(s).unwrap();
    let once: Vec<f64> = g.grad(w).unwrap().to_vec();
    g.backward(s).unwrap();
    let twice = g.grad(w).unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
    g.zero_grad();
    assert!(g.grad(w).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn constants_get_no_grad() {
    let mut g = Graph::new();
    let c = g.constant(t(&[2], &[1.0, 2.0]));
    let x = g.param(t(&[2], &[3.0, 4.0]));
    let y = g.mul(c, x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert!(!g.requires_grad(c));
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn max_routes_to_lowest_index_on_tie() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 3], &[2.0, 5.0, 5.0]));
    let m = g.max_axis(x, 1);
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, -1.0, -1.0]));
    let m = g.min_axis(x, 0);
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f32>::new();
        let x = g.param(rand_t(&mut rng, &[5, 8]).cast());
        let w = g.param(rand_t(&mut rng, &[8, 8]).cast());
        let h = g.matmul(x, w);
        let h = g.layer_norm(h, 1e-5);
        let h = g.softmax(h);
        let s = g.sum(h);
        let s2 = g.mean(x);
        let r = g.add(s, s2);
        g.backward(r).unwrap();
        (g.value(h).clone(), g.grad(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

// One finite-difference case per primitive. Each closure reduces the
// primitive's output with a random weighting so every output coordinate
// contributes to the checked gradient.
fn check_primitive<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let params: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
    let probe_seed: u64 = rng.random();
    let build = |g: &mut Graph<f64>, vars: &[Var]| {
        let y = f(g, vars);
        let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
        let shape = g.shape(y).to_vec();
        let w = rand_t(&mut prng, &shape);
        let w = g.constant(w);
        let p = g.mul(y, w);
        Ok(g.sum(p))
    };
    let report = finite_diff_check(build, &params, &FdOptions::default()).unwrap();
    assert!(
        report.max_rel_error <= 1e-3 && report.pass_fraction >= 0.99,
        "{name}: {report:?}"
    );
}

#[test]
fn primitive_gradients_match_finite_differences() {
    check_primitive("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check_primitive("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    check_primitive("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check_primitive("sq_diff", &[&[3, 4], &[3, 4]], |g, v| g.sq_diff(v[0], v[1]));
    check_primitive("add_row", &[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1]));
    check_primitive("mul_row", &[&[2, 3, 4], &[4]], |g, v| g.mul_row(v[0], v[1]));
    check_primitive("scale", &[&[5]], |g, v| g.scale(v[0], -1.7));
    check_primitive("matmul", &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]));
    check_primitive("transpose", &[&[3, 4]], |g, v| g.transpose(v[0]));
    check_primitive("reshape", &[&[3, 4]], |g, v| g.reshape(v[0], &[2, 6]));
    check_primitive("concat", &[&[2, 3], &[1, 3]], |g, v| g.concat(&[v[0], v[1], v[0]]));
    check_primitive("concat_cols", &[&[2, 3], &[2, 1]], |g, v| {
        g.concat_cols(&[v[0], v[1]])
    });
    check_primitive("slice_cols", &[&[3, 5]], |g, v| g.slice_cols(v[0], 1, 3));
    check_primitive("gather", &[&[4, 2]], |g, v| g.gather(v[0], &[3, 0, 3, 1]));
    check_primitive("sum_axis", &[&[2, 3, 4]], |g, v| g.sum_axis(v[0], 1));
    check_primitive("mean_axis", &[&[2, 3, 4]], |g, v| g.mean_axis(v[0], 2));
    check_primitive("mean", &[&[2, 3]], |g, v| g.mean(v[0]));
    check_primitive("max_axis", &[&[3, 5, 2]], |g, v| g.max_axis(v[0], 1));
    check_primitive("min_axis", &[&[3, 5]], |g, v| g.min_axis(v[0], 0));
    check_primitive("exp", &[&[6]], |g, v| g.exp(v[0]));
    check_primitive("log", &[&[6]], |g, v| {
        let e = g.exp(v[0]);
        g.log(e)
    });
    check_primitive("sigmoid", &[&[6]], |g, v| g.sigmoid(v[0]));
    check_primitive("log_sigmoid", &[&[6]], |g, v| {
        let s = g.scale(v[0], 8.0);
        g.log_sigmoid(s)
    });
    check_primitive("gelu", &[&[8]], |g, v| {
        let s = g.scale(v[0], 3.0);
        g.gelu(s)
    });
    check_primitive("softmax", &[&[3, 5]], |g, v| g.softmax(v[0]));
    check_primitive("layer_norm", &[&[3, 6]], |g, v| g.layer_norm(v[0], 1e-5));
    check_primitive("pairwise_sq_dist", &[&[2, 4, 3], &[2, 5, 3]], |g, v| {
        g.pairwise_sq_dist(v[0], v[1])
    });
}

#[test]
fn quadratic_form_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_t(&mut rng, &[4, 4]);
    let x = rand_t(&mut rng, &[4, 1]);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let ax = g.matmul(v[0], v[1]);
        let xt = g.transpose(v[1]);
        let q = g.matmul(xt, ax);
        Ok(g.sum(q))
    };
    let r = finite_diff_check(build, &[a, x], &FdOptions::default()).unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn wrong_gradient_is_caught() {
    let x = t(&[3], &[0.5, -1.0, 2.0]);
    let value = |p: &[Tensor<f64>]| Ok(p[0].data().iter().map(|v| v * v).sum::<f64>());
    let bad_grad = |p: &[Tensor<f64>]| Ok(vec![p[0].data().iter().map(|v| -2.0 * v).collect()]);
    let r = finite_diff_check_with(value, bad_grad, &[x], &FdOptions::default()).unwrap();
    assert!(r.max_rel_error >= 0.5, "{r:?}");
}

#[test]
fn non_finite_objective_names_parameter() {
    let x = t(&[2], &[1.0, 0.0]);
    // log(x) is finite at x=1 but not at 0 - eps
    let value = |p: &[Tensor<f64>]| Ok(p[0].data()[0].ln() + p[0].data()[1].sqrt());
    let grad = |_: &[Tensor<f64>]| Ok(vec![vec![1.0, 0.0]]);
    let err = finite_diff_check_with(value, grad, &[x], &FdOptions::default()).unwrap_err();
    assert!(err.to_string().contains("parameter 0 coordinate 1"), "{err}");
}
