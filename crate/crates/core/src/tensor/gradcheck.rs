use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::params::ParamStore;

/// Finite-difference step used by [`gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-4;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1)` over all
    /// checked input elements.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub elements_checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Check the backward pass of `op` against central differences in `f64`.
///
/// `op` builds a computation from the given input variables. Its output is
/// projected onto a random direction (drawn from `seed`) to obtain a scalar,
/// whose gradient with respect to every input element is then compared.
pub fn gradcheck<F>(op: F, inputs: &[Tensor<f64>], seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check(op, 0, inputs.to_vec(), seed)
}

/// Like [`gradcheck`], with `params` bound to the graph first (so `op` can
/// read them through [`Graph::param`]); parameter gradients are checked too.
pub fn gradcheck_with_params<F>(op: F, params: &ParamStore<f64>, inputs: &[Tensor<f64>], seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut all: Vec<Tensor<f64>> = params.iter().map(|p| p.value.clone()).collect();
    all.extend_from_slice(inputs);
    check(op, params.len(), all, seed)
}

fn check<F>(op: F, n_params: usize, inputs: Vec<Tensor<f64>>, seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut projection: Option<Tensor<f64>> = None;

    let mut eval = |xs: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::with_params(xs[..n_params].iter());
        let mut vars: Vec<Var> = (0..n_params).map(Var).collect();
        vars.extend(xs[n_params..].iter().map(|t| g.variable(t.clone())));
        let out = op(&mut g, &vars[n_params..])?;
        let shape = g.shape(out).to_vec();
        let proj = projection
            .get_or_insert_with(|| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)))
            .clone();
        let p = g.constant(proj);
        let prod = g.mul(out, p)?;
        let loss = g.sum_all(prod)?;
        let value = g.value(loss).item();
        let grads = if want_grad {
            let grads = g.backward(loss)?;
            vars.iter()
                .zip(xs)
                .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(&inputs, true)?;
    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        elements_checked: 0,
    };
    let mut work = inputs;
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..work[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + GRADCHECK_STEP;
            let (plus, _) = eval(&work, false)?;
            work[k].data_mut()[i] = orig - GRADCHECK_STEP;
            let (minus, _) = eval(&work, false)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1.0);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.elements_checked += 1;
        }
    }
    Ok(report)
}

/// Uniform random tensor in `[lo, hi)`, for building gradcheck inputs.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}
