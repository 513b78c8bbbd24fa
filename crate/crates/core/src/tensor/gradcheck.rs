use crate::error::{Error, Result};

use super::{Gradient, ParamVector};

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max_j |a_j − n_j| / max(1, |a_j| + |n_j|)`; zero when there are no
    /// parameters.
    pub max_rel_error: f64,
    /// Flat coordinate attaining the maximum, if any.
    pub worst_coordinate: Option<usize>,
    pub coordinates: usize,
}

/// Compares `loss_and_grad`'s analytic gradient at `params` with central
/// finite differences of its loss.
pub fn grad_check<F>(loss_and_grad: F, params: &ParamVector) -> Result<GradCheckReport>
where
    F: Fn(&ParamVector) -> Result<(f64, Gradient)>,
{
    let (loss, analytic) = loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::GradCheck {
            coordinate: 0,
            message: format!("loss at the base point is {loss}"),
        });
    }
    params.ensure_congruent(&analytic, "gradient")?;
    let layout = params.layout();
    let base = params.flatten();
    let analytic = analytic.flatten();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: None,
        coordinates: base.len(),
    };
    let mut probe = base.clone();
    for j in 0..base.len() {
        probe[j] = base[j] + STEP;
        let (plus, _) = loss_and_grad(&ParamVector::unflatten(&layout, &probe)?)?;
        probe[j] = base[j] - STEP;
        let (minus, _) = loss_and_grad(&ParamVector::unflatten(&layout, &probe)?)?;
        probe[j] = base[j];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::GradCheck {
                coordinate: j,
                message: format!("non-finite loss while probing ({plus}, {minus})"),
            });
        }
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[j];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0);
        if !(err <= report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_coordinate = Some(j);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn constant_function_has_zero_error() {
        let p = ParamVector::new(vec![("w".into(), Tensor::vector(vec![1.0, 2.0]).unwrap())])
            .unwrap();
        let r = grad_check(|p| Ok((3.0, p.zeros_like())), &p).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn empty_parameters_pass_vacuously() {
        let r = grad_check(|p| Ok((1.0, p.zeros_like())), &ParamVector::empty()).unwrap();
        assert_eq!(r.coordinates, 0);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let p = ParamVector::new(vec![("w".into(), Tensor::vector(vec![1.5]).unwrap())]).unwrap();
        let r = grad_check(
            |p| {
                let w = p.tensor(0).data()[0];
                Ok((w * w, p.scaled(3.0)))
            },
            &p,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
        assert_eq!(r.worst_coordinate, Some(0));
    }

    #[test]
    fn non_finite_loss_names_coordinate() {
        let p = ParamVector::new(vec![("w".into(), Tensor::vector(vec![1.0, 0.0]).unwrap())])
            .unwrap();
        let err = grad_check(
            |p| {
                let w = p.tensor(0).data();
                let loss = if w[1] > 0.0 { f64::NAN } else { w[0] };
                Ok((loss, p.zeros_like()))
            },
            &p,
        )
        .unwrap_err();
        assert!(matches!(err, Error::GradCheck { coordinate: 1, .. }), "{err}");
    }
}
