use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::tape::pool_segments;
use crate::tensor::{Pool, Tape, Tensor, Var};

/// Graph readout. `Mix` concatenates sum, mean and max pooling in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadoutMode {
    Sum,
    Mean,
    Max,
    Mix,
}

impl ReadoutMode {
    /// Output width for node embeddings of width `d`.
    pub fn output_width(self, d: usize) -> usize {
        match self {
            ReadoutMode::Mix => 3 * d,
            _ => d,
        }
    }

    pub(crate) fn apply(self, tape: &mut Tape, x: Var, offsets: &[usize]) -> Result<Var> {
        let pool = |tape: &mut Tape, p| tape.segment_pool(x, offsets.to_vec(), p);
        match self {
            ReadoutMode::Sum => pool(tape, Pool::Sum),
            ReadoutMode::Mean => pool(tape, Pool::Mean),
            ReadoutMode::Max => pool(tape, Pool::Max),
            ReadoutMode::Mix => {
                let parts = [
                    pool(tape, Pool::Sum)?,
                    pool(tape, Pool::Mean)?,
                    pool(tape, Pool::Max)?,
                ];
                tape.concat_cols(&parts)
            }
        }
    }
}

impl fmt::Display for ReadoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReadoutMode::Sum => "sum",
            ReadoutMode::Mean => "mean",
            ReadoutMode::Max => "max",
            ReadoutMode::Mix => "mix",
        })
    }
}

impl FromStr for ReadoutMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sum" => Ok(ReadoutMode::Sum),
            "mean" => Ok(ReadoutMode::Mean),
            "max" => Ok(ReadoutMode::Max),
            "mix" => Ok(ReadoutMode::Mix),
            other => Err(format!("unknown readout `{other}` (sum|mean|max|mix)")),
        }
    }
}

/// Reduces `[num_nodes × d]` node embeddings to a graph-level vector of width
/// `d` (or `3d` for mix).
pub fn readout(node_embeddings: &Tensor, mode: ReadoutMode) -> Result<Tensor> {
    if node_embeddings.shape().len() != 2 {
        return Err(Error::Structural(format!(
            "node embeddings must be a matrix, got {:?}",
            node_embeddings.shape()
        )));
    }
    let offsets = [0, node_embeddings.rows()];
    let pooled = |p| pool_segments(node_embeddings, &offsets, p).map(|(t, _)| t.into_data());
    let values = match mode {
        ReadoutMode::Sum => pooled(Pool::Sum)?,
        ReadoutMode::Mean => pooled(Pool::Mean)?,
        ReadoutMode::Max => pooled(Pool::Max)?,
        ReadoutMode::Mix => [pooled(Pool::Sum)?, pooled(Pool::Mean)?, pooled(Pool::Max)?].concat(),
    };
    Tensor::vector(values)
}
