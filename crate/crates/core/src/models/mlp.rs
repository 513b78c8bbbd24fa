use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamVector, Tape, Var};

use super::init::dense_segments;

/// Fully connected classifier: `input → hidden… → num_classes`, ReLU between
/// layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        if hidden_dims.is_empty() {
            return Err(Error::config("model.hidden", "at least one hidden layer"));
        }
        if hidden_dims.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be >= 1"));
        }
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::config("model", "all layer widths must be >= 1"));
        }
        Ok(MlpConfig {
            input_dim,
            hidden_dims,
            num_classes,
        })
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let segments = self
            .widths()
            .windows(2)
            .enumerate()
            .flat_map(|(i, w)| dense_segments(rng, &format!("layer{i}"), w[0], w[1]))
            .collect();
        ParamVector::new(segments).expect("unique layer names")
    }

    /// Logits `[batch × num_classes]` for `input: [batch × input_dim]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var> {
        let layers = self.hidden_dims.len() + 1;
        if params.len() != 2 * layers {
            return Err(Error::Structural(format!(
                "mlp expects {} parameter tensors, got {}",
                2 * layers,
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
        let mut h = input;
        for layer in 0..layers {
            h = tape.dense(h, params[2 * layer], params[2 * layer + 1])?;
            if layer + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}
