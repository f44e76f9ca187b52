//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
///
/// The error for each coordinate is `|a - n| / max(1, |a|, |n|)`: relative
/// for gradients of magnitude at least one, absolute below that.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    /// Coordinates where `f` was not finite at a perturbed point.
    pub non_finite: Vec<(usize, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_empty() && self.max_rel_error <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks `f` with respect to a single input tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), step, tol)
}

/// Checks `f` with respect to every tensor in `xs`.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_reference(&f, &f, xs, step, tol)
}

/// Analytic gradients of `f` against central differences of `reference`.
///
/// Where `f` blocks gradient paths with `stop_gradient`, `reference` must
/// compute the same value with those paths replaced by constants taken at
/// `xs`.
pub fn grad_check_reference<F, R>(
    f: F,
    reference: R,
    xs: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            reason: format!("step must be positive, got {step}"),
        });
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = reference(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(AutodiffError::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|gr| gr.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut inputs = xs.to_vec();
    let mut numeric = Vec::with_capacity(xs.len());
    let mut non_finite = Vec::new();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for t in 0..xs.len() {
        let mut num = vec![0.0; xs[t].numel()];
        for i in 0..xs[t].numel() {
            let orig = xs[t].data()[i];
            inputs[t].data_mut()[i] = orig + step;
            let plus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig - step;
            let minus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                non_finite.push((t, i));
                continue;
            }
            num[i] = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[t][i], num[i]);
            if err > max_rel_error || worst.is_none() {
                max_rel_error = err;
                worst = Some((t, i));
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
        non_finite,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let report =
            grad_check(|g, _x| Ok(g.constant(Tensor::scalar(4.0))), &x, 1e-5, 1e-6).unwrap();
        assert!(report.passed());
        assert!(report.analytic[0].iter().all(|&v| v == 0.0));
        assert!(report.numeric[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_points_are_reported_per_coordinate() {
        let x = Tensor::vector(vec![1.0, 5e-6]);
        let report = grad_check(
            |g, x| {
                let l = g.log(x);
                Ok(g.sum(l))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.non_finite, vec![(0, 1)]);
        assert!(!report.passed());
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.0, 1e-6).is_err());
    }
}
