//! Finite-difference gradient checking used throughout the test suite.

use crate::error::Result;
use crate::tape::{Tape, TensorRef};
use crate::tensor::{Scalar, Tensor};

/// Relative error with a unit floor: tiny gradients are compared absolutely,
/// larger ones relatively.
pub fn rel_err(a: Scalar, b: Scalar) -> Scalar {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite-difference gradient of `f` at `x0`.
pub fn central_diff(
    mut f: impl FnMut(&[Scalar]) -> Result<Scalar>,
    x0: &[Scalar],
    eps: Scalar,
) -> Result<Vec<Scalar>> {
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x)?;
        x[i] = orig - eps;
        let fm = f(&x)?;
        x[i] = orig;
        out.push((fp - fm) / (2.0 * eps));
    }
    Ok(out)
}

/// Builds a scalar-valued tape function of a flat input vector, computes its
/// analytic gradient via backward, and returns the worst per-coordinate
/// relative error against central differences.
pub fn max_grad_err(
    x0: &[Scalar],
    eps: Scalar,
    build: impl Fn(&mut Tape, TensorRef) -> Result<TensorRef>,
) -> Result<Scalar> {
    let run = |xs: &[Scalar]| -> Result<(Scalar, Vec<Scalar>)> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(&Tensor::from_vec(vec![xs.len()], xs.to_vec())?.with_grad())?;
        let out = build(&mut tape, leaf)?;
        let v = tape.value(out)[0];
        let grads = tape.backward(out)?;
        Ok((v, grads.get(leaf)))
    };
    let (_, analytic) = run(x0)?;
    let numeric = central_diff(|xs| run(xs).map(|(v, _)| v), x0, eps)?;
    let mut worst: Scalar = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        worst = worst.max(rel_err(*a, *n));
    }
    Ok(worst)
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;

    #[test]
    fn central_diff_recovers_polynomial_gradient() {
        // f(x) = x0^2 + 3 x1, gradient (2 x0, 3).
        let g = central_diff(|x| Ok(x[0] * x[0] + 3.0 * x[1]), &[2.0, -1.0], 1e-5).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_floors_at_one() {
        assert_eq!(rel_err(0.0, 1e-9), 1e-9);
        assert!((rel_err(200.0, 100.0) - 0.5).abs() < 1e-15);
    }
}
