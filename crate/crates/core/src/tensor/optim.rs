use crate::error::{Error, Result};

use super::{Gradient, ParamVector};

/// Plain stochastic gradient descent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Parameter(format!(
                "learning rate must be finite and non-negative, got {lr}"
            )));
        }
        Ok(Sgd { lr })
    }

    /// `params ← params − lr · grad`. A zero learning rate leaves `params`
    /// untouched bit for bit.
    pub fn step(&self, params: &mut ParamVector, grad: &Gradient) -> Result<()> {
        params.ensure_congruent(grad, "sgd step")?;
        if self.lr == 0.0 {
            return Ok(());
        }
        params.axpy(-self.lr, grad);
        Ok(())
    }
}
