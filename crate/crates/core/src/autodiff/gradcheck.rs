//! Central finite-difference verification of analytic gradients (float64).
//!
//! The relative error of one coordinate is
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)`; the floor keeps
//! coordinates whose true gradient is ~0 from dividing round-off by ~0.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per tensor; tensors with fewer elements are probed
    /// exhaustively.
    pub max_coords: usize,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: 24,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub label: String,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic and central-difference gradients of the scalar built
/// by `f` with respect to every named input.
pub fn grad_check<F>(
    label: impl Into<String>,
    inputs: &[(String, Tensor<f64>)],
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, t))| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        label: label.into(),
        tensors: Vec::with_capacity(inputs.len()),
    };
    for (ti, (name, tensor)) in inputs.iter().enumerate() {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_coords).into_vec()
        };
        let mut entry = TensorCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &k in &coords {
            let orig = values[ti].data()[k];
            values[ti].data_mut()[k] = orig + opts.step;
            let plus = eval(&values)?;
            values[ti].data_mut()[k] = orig - opts.step;
            let minus = eval(&values)?;
            values[ti].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[ti].data()[k];
            let err = rel_error(a, numeric, opts.floor);
            if err >= entry.max_rel_error {
                entry.max_rel_error = err;
                entry.worst_index = k;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.tensors.push(entry);
    }
    Ok(report)
}

/// `Σ out ⊙ u` for a fixed random `u`: turns any tensor-valued op into a
/// scalar whose gradient is a generic vector-Jacobian product.
pub fn random_projection(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let u = random_tensor(g.shape(out), seed, 1.0);
    let u = g.input(u);
    let p = g.mul(out, u)?;
    Ok(g.sum(p))
}

/// Uniform entries in `[-scale, scale]`, seeded.
pub fn random_tensor(shape: Shape, seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..=scale))
}

/// Adjoint identity along one direction: finite-difference derivative of
/// `⟨f(x + t·d), u⟩` at `t = 0` against `⟨Jᵀu, d⟩` from the backward pass.
/// Returns `(numeric, analytic)`.
pub fn directional_check<F>(
    x: &Tensor<f64>,
    direction: &Tensor<f64>,
    u: &Tensor<f64>,
    step: f64,
    f: F,
) -> Result<(f64, f64)>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let inner = |x: &Tensor<f64>, track: bool| -> Result<(f64, Option<Tensor<f64>>)> {
        let mut g = Graph::new();
        let xv = if track { g.param(x.clone()) } else { g.input(x.clone()) };
        let y = f(&mut g, xv)?;
        let uv = g.input(u.clone());
        let p = g.mul(y, uv)?;
        let s = g.sum(p);
        let value = g.value(s).item();
        if track {
            g.backward(s)?;
            Ok((value, g.grad(xv).cloned()))
        } else {
            Ok((value, None))
        }
    };
    let shifted = |t: f64| {
        let data = x
            .data()
            .iter()
            .zip(direction.data())
            .map(|(a, d)| a + t * d)
            .collect();
        Tensor::from_vec(x.shape(), data).unwrap()
    };
    let (_, grad) = inner(x, true)?;
    let grad = grad.unwrap_or_else(|| Tensor::zeros(x.shape()));
    let analytic = grad
        .data()
        .iter()
        .zip(direction.data())
        .map(|(g, d)| g * d)
        .sum();
    let (plus, _) = inner(&shifted(step), false)?;
    let (minus, _) = inner(&shifted(-step), false)?;
    Ok(((plus - minus) / (2.0 * step), analytic))
}
