use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
    /// Per-coordinate tolerance used for the pass-fraction statistic.
    pub tolerance: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-4,
            max_coords_per_param: None,
            seed: 0,
            tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// (param index, coordinate) where the max error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Fraction of checked coordinates within `tolerance`.
    pub pass_fraction: f64,
}

fn rel_error(auto: f64, num: f64) -> f64 {
    (auto - num).abs() / 1f64.max(auto.abs()).max(num.abs())
}

/// Compares an analytic gradient against central differences of `value`.
///
/// Relative error per coordinate is `|g_auto - g_num| / max(1, |g_auto|, |g_num|)`.
pub fn finite_diff_check_with<V, G>(
    value: V,
    grad: G,
    params: &[Tensor<f64>],
    opts: &FdOptions,
) -> Result<FdReport>
where
    V: Fn(&[Tensor<f64>]) -> Result<f64>,
    G: Fn(&[Tensor<f64>]) -> Result<Vec<Vec<f64>>>,
{
    let base = value(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("objective at the unperturbed point".into()));
    }
    let auto = grad(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();

    let mut max_err = 0.0;
    let mut worst = (0, 0);
    let mut checked = 0;
    let mut passed = 0;
    for p in 0..params.len() {
        let n = params[p].numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params[p].data()[c];
            work[p].data_mut()[c] = orig + opts.eps;
            let fp = value(&work)?;
            work[p].data_mut()[c] = orig - opts.eps;
            let fm = value(&work)?;
            work[p].data_mut()[c] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective when perturbing parameter {p} coordinate {c}"
                )));
            }
            let num = (fp - fm) / (2.0 * opts.eps);
            let err = rel_error(auto[p][c], num);
            checked += 1;
            if err <= opts.tolerance {
                passed += 1;
            }
            if err > max_err {
                max_err = err;
                worst = (p, c);
            }
        }
    }
    Ok(FdReport {
        max_rel_error: max_err,
        worst,
        checked,
        pass_fraction: if checked == 0 { 1.0 } else { passed as f64 / checked as f64 },
    })
}

/// Finite-difference check of a graph-built objective. `build` receives the
/// graph and one leaf per parameter and returns the scalar root.
pub fn finite_diff_check<F>(build: F, params: &[Tensor<f64>], opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let value = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.constant(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        Ok(g.value(root).item())
    };
    let grad = |ps: &[Tensor<f64>]| -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        g.backward(root)?;
        Ok(vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect())
    };
    finite_diff_check_with(value, grad, params, opts)
}
