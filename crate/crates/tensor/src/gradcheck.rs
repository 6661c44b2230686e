//! Central finite-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
    pub max_rel_error: f64,
    /// (input index, flat coordinate) where the maximum occurred
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compare autodiff gradients of a scalar function against central differences.
///
/// `f` receives a fresh graph and one leaf per entry of `points` (all with
/// `requires_grad`) and must return a scalar. `max_coords` limits how many
/// coordinates per input are perturbed (evenly strided); `None` checks all.
pub fn gradient_check<F>(f: F, points: &[Tensor<f64>], step: f64, max_coords: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Graph<f64>, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), with_grad)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(TensorError::NonScalarLoss(g.shape(out).to_vec()));
        }
        let y = g.value(out).item();
        if !y.is_finite() {
            return Err(TensorError::NonFinite(format!("function value {y}")));
        }
        if with_grad {
            g.backward(out)?;
        }
        Ok((y, g, vars))
    };

    let (_, graph, vars) = eval(points, true)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| graph.grad_data(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    drop(graph);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coords_checked: 0 };
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (input, point) in points.iter().enumerate() {
        let n = point.len();
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for coord in (0..n).step_by(stride) {
            let orig = point.data()[coord];
            work[input].data_mut()[coord] = orig + step;
            let (plus, _, _) = eval(&work, false)?;
            work[input].data_mut()[coord] = orig - step;
            let (minus, _, _) = eval(&work, false)?;
            work[input].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[input][coord];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(TensorError::NonFinite(format!("input {input} coord {coord}")));
            }
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((input, coord));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        };
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = f(&mut g, &[xv]).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad_data(xv).unwrap(), &[2.0, 4.0, 6.0]);
        let report = gradient_check(f, &[x], DEFAULT_STEP, None).unwrap();
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let inf = g.constant(Tensor::from_f64(&[1], &[f64::INFINITY])?);
            let s = g.add(v[0], inf)?;
            Ok(g.sum(s))
        };
        assert!(matches!(gradient_check(f, &[x], DEFAULT_STEP, None), Err(TensorError::NonFinite(_))));
    }
}
