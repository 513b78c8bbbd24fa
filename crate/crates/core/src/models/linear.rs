use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamVector, Tape, Var};

use super::init::dense_segments;

/// Single affine layer: softmax regression for classification data, linear
/// regression (column 0) for real targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearConfig {
    pub input_dim: usize,
    pub outputs: usize,
    pub bias: bool,
}

impl LinearConfig {
    pub fn new(input_dim: usize, outputs: usize, bias: bool) -> Result<Self> {
        if input_dim == 0 || outputs == 0 {
            return Err(Error::config("model", "linear widths must be >= 1"));
        }
        Ok(LinearConfig {
            input_dim,
            outputs,
            bias,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let [weight, bias] = dense_segments(rng, "linear", self.input_dim, self.outputs);
        let segments = if self.bias { vec![weight, bias] } else { vec![weight] };
        ParamVector::new(segments).expect("unique layer names")
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var> {
        let expected = 1 + usize::from(self.bias);
        if params.len() != expected {
            return Err(Error::Structural(format!(
                "linear model expects {expected} parameter tensors, got {}",
                params.len()
            )));
        }
        if tape.value(input).cols() != self.input_dim {
            return Err(Error::Structural(format!(
                "batch {:?} does not match input_dim {}",
                tape.value(input).shape(),
                self.input_dim
            )));
        }
        if self.bias {
            tape.dense(input, params[0], params[1])
        } else {
            tape.matmul(input, params[0])
        }
    }
}
