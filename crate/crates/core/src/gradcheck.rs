//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::scalar::Real;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("function evaluation failed: {0}")]
    Evaluation(#[from] TensorError),
    #[error("function value is non-finite at {param}[{index}]")]
    NonFinite { param: String, index: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Elements whose step had to be shrunk because `θ ± ε` straddled a kink.
    pub reduced_steps: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen elements per parameter; `None` checks all.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            max_per_param: None,
            seed: 0,
        }
    }
}

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares the gradient of the scalar produced by `f` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every element of every parameter. Elements are
/// evaluated in parallel.
pub fn grad_check<T, F>(
    params: &[(String, Tensor<T>)],
    eps: f64,
    f: F,
) -> Result<GradCheckReport, GradCheckError>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, TensorError> + Sync,
{
    grad_check_with(
        params,
        GradCheckOptions {
            eps,
            ..GradCheckOptions::default()
        },
        f,
    )
}

pub fn grad_check_with<T, F>(
    params: &[(String, Tensor<T>)],
    options: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport, GradCheckError>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, TensorError> + Sync,
{
    let evaluate = |values: &[Tensor<T>]| -> Result<(Graph<T>, Vec<Var>, Var), TensorError> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| graph.param(t.clone())).collect();
        let out = f(&mut graph, &vars)?;
        if graph.value(out).numel() != 1 {
            return Err(TensorError::invalid(
                "grad_check",
                "function must return a scalar",
            ));
        }
        Ok((graph, vars, out))
    };

    let values: Vec<Tensor<T>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (graph, vars, out) = evaluate(&values)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(&values)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut report = GradCheckReport::default();

    for (p, (name, _)) in params.iter().enumerate() {
        let numel = values[p].numel();
        let indices: Vec<usize> = match options.max_per_param {
            Some(k) if k < numel => {
                let mut picked = sample(&mut rng, numel, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..numel).collect(),
        };
        let numeric: Vec<(f64, bool)> = indices
            .par_iter()
            .map(|&i| central_difference(&evaluate, &values, p, i, options.eps, name))
            .collect::<Result<_, _>>()?;

        let mut check = ParamCheck {
            name: name.clone(),
            checked: indices.len(),
            reduced_steps: numeric.iter().filter(|(_, r)| *r).count(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (k, (&i, &(num, _))) in indices.iter().zip(&numeric).enumerate() {
            let a = analytic[p].data()[i].to_f64_lossy();
            let err = relative_error(a, num);
            if err > check.max_rel_error || k == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = num;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

/// Largest number of times the step is shrunk when `θ ± ε` straddle a kink.
const MAX_STEP_REDUCTIONS: usize = 6;

/// Central difference for element `i` of parameter `p`. If the two evaluations fall
/// on different linear pieces (a rectifier changes sign or a sampling point changes
/// cell), the difference quotient is meaningless, so the step is divided by 8 until
/// both sides agree. Returns the estimate and whether the step was reduced.
fn central_difference<T, E>(
    evaluate: &E,
    values: &[Tensor<T>],
    p: usize,
    i: usize,
    eps: f64,
    name: &str,
) -> Result<(f64, bool), GradCheckError>
where
    T: Real,
    E: Fn(&[Tensor<T>]) -> Result<(Graph<T>, Vec<Var>, Var), TensorError> + Sync,
{
    let mut local = values.to_vec();
    let original = local[p].data()[i];
    let mut step = eps;
    let mut estimate = 0.0;
    for attempt in 0..=MAX_STEP_REDUCTIONS {
        let h = T::lit(step);
        local[p].data_mut()[i] = original + h;
        let (plus, sig_plus) = scalar_value(evaluate, &local, name, i)?;
        local[p].data_mut()[i] = original - h;
        let (minus, sig_minus) = scalar_value(evaluate, &local, name, i)?;
        // the step actually taken after rounding θ ± h
        let taken = (original + h).to_f64_lossy() - (original - h).to_f64_lossy();
        estimate = (plus - minus) / taken;
        if sig_plus == sig_minus {
            return Ok((estimate, attempt > 0));
        }
        step /= 8.0;
    }
    Ok((estimate, true))
}

fn scalar_value<T, E>(
    evaluate: &E,
    values: &[Tensor<T>],
    name: &str,
    index: usize,
) -> Result<(f64, Vec<i64>), GradCheckError>
where
    T: Real,
    E: Fn(&[Tensor<T>]) -> Result<(Graph<T>, Vec<Var>, Var), TensorError>,
{
    let (graph, _, out) = match evaluate(values) {
        Ok(r) => r,
        Err(TensorError::NonFinite { .. }) => {
            return Err(GradCheckError::NonFinite {
                param: name.to_string(),
                index,
            })
        }
        Err(e) => return Err(e.into()),
    };
    let v = graph.value(out).data()[0].to_f64_lossy();
    if !v.is_finite() {
        return Err(GradCheckError::NonFinite {
            param: name.to_string(),
            index,
        });
    }
    Ok((v, graph.piece_signature()))
}
