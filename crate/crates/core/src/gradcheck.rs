//! Central finite differences, used as the independent oracle for every backward rule.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let plus = f(&probe);
            probe[i] = x[i] - eps;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((input, elem, analytic, numeric));
        }
    }
}

/// Checks the backward rule of `op` at `inputs`.
///
/// The scalar under test is `sum(op(inputs) * w)` with a fixed random `w`, so
/// every output element contributes a distinct weight.
pub fn check_op<F>(op: F, inputs: &[Tensor<f64>], eps: f64, seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&mut tape, &vars)?;
        Tensor::<f64>::from_fn(tape.shape(out), |_| rng.random::<f64>() * 2.0 - 1.0)
    };
    let eval = |tape: &mut Tape<f64>, vals: &[Tensor<f64>], leaf: bool| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| if leaf { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let out = op(tape, &vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        Ok((tape.sum(prod), vars))
    };

    let mut tape = Tape::new();
    let (loss, vars) = eval(&mut tape, inputs, true)?;
    tape.backward(loss)?;

    let mut report = GradReport::default();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[which]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let numeric = central_difference(
            |x| {
                let mut vals = inputs.to_vec();
                vals[which] = Tensor::new(input.shape().to_vec(), x.to_vec()).expect("same shape");
                let mut t = Tape::new();
                let (l, _) = eval(&mut t, &vals, false).expect("op succeeded once");
                t.value(l).data()[0]
            },
            input.data(),
            eps,
        );
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            report.record(which, i, a, n);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_of_cubic() {
        let g = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }
}
