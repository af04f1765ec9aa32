use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central differences.
///
/// `f` records its computation on the supplied tape, reading its input from
/// the given variable, and returns a one-element output. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over all coordinates of `point`.
pub fn gradient_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::InvalidArgument {
            op: "gradient_check",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |p: Tensor, index: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let v = match f(&mut tape, x) {
            Ok(y) => tape.value(y).item(),
            Err(AutodiffError::NonFinite { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFiniteProbe { index })
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus, i)? - eval(minus, i)?) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        let a = Tensor::new(vec![3, 3], vec![2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0]).unwrap();
        let p = Tensor::new(vec![3, 1], vec![0.7, -1.2, 0.4]).unwrap();
        let err = gradient_check(
            |t, x| {
                let a = t.constant(a.clone());
                let ax = t.matmul(a, x)?;
                let xax = t.mul(ax, x)?;
                t.sum(xax)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = gradient_check(
            |t, x| {
                let s = t.sqrt(x)?;
                t.sum(s)
            },
            &p,
            1e-3,
        );
        assert_eq!(r, Err(AutodiffError::NonFiniteProbe { index: 0 }));
    }

    #[test]
    fn rejects_non_positive_eps() {
        let p = Tensor::scalar(1.0);
        assert!(gradient_check(|t, x| t.sum(x), &p, 0.0).is_err());
    }
}
