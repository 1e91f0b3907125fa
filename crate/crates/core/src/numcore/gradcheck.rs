use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A scalar objective over a flat parameter vector with an analytical gradient.
pub trait Objective<F: Scalar> {
    fn evaluate(&self, params: &[F]) -> Result<F>;
    fn gradient(&self, params: &[F]) -> Result<Vec<F>>;
}

/// Outcome of comparing analytical gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport<F> {
    pub max_rel_error: F,
    pub param_count: usize,
    pub per_param_errors: Vec<F>,
}

impl<F: Scalar> GradCheckReport<F> {
    /// Index of the worst parameter, if any.
    pub fn worst(&self) -> Option<usize> {
        self.per_param_errors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
    }
}

/// Compares `objective.gradient` with `(f(θ+h) − f(θ−h)) / 2h` for every
/// parameter. The relative error uses `max(|g|, |g_fd|, 1e-8)` as denominator.
pub fn grad_check<F: Scalar, O: Objective<F> + ?Sized>(
    objective: &O,
    params: &[F],
    probe_step: F,
) -> Result<GradCheckReport<F>> {
    if !(probe_step > F::zero()) {
        return Err(Error::Domain("probe step must be positive".into()));
    }
    let analytic = objective.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let floor = F::lit(1e-8);
    let two_h = probe_step + probe_step;
    let mut theta = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + probe_step;
        let fp = objective.evaluate(&theta)?;
        theta[i] = orig - probe_step;
        let fm = objective.evaluate(&theta)?;
        theta[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluation at parameter {i}")));
        }
        let fd = (fp - fm) / two_h;
        let g = analytic[i];
        let denom = g.abs().fmax(fd.abs()).fmax(floor);
        errors.push((g - fd).abs() / denom);
    }
    let max_rel_error = errors.iter().copied().fold(F::zero(), F::fmax);
    Ok(GradCheckReport {
        max_rel_error,
        param_count: params.len(),
        per_param_errors: errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct HalfSquaredNorm;

    impl Objective<f64> for HalfSquaredNorm {
        fn evaluate(&self, p: &[f64]) -> Result<f64> {
            Ok(0.5 * p.iter().map(|x| x * x).sum::<f64>())
        }
        fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
            Ok(p.to_vec())
        }
    }

    struct Exploding;

    impl Objective<f64> for Exploding {
        fn evaluate(&self, _: &[f64]) -> Result<f64> {
            Ok(f64::NAN)
        }
        fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0; p.len()])
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(&HalfSquaredNorm, &[0.3, -1.2, 4.0, 0.0], 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{}", r.max_rel_error);
        assert_eq!(r.param_count, 4);
    }

    #[test]
    fn empty_parameter_set() {
        let r = grad_check(&HalfSquaredNorm, &[], 1e-5).unwrap();
        assert_eq!(r.param_count, 0);
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.worst(), None);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        assert!(matches!(
            grad_check(&Exploding, &[1.0], 1e-5),
            Err(Error::NonFinite(_))
        ));
        assert!(grad_check(&HalfSquaredNorm, &[1.0], 0.0).is_err());
    }
}
