//! Model families trained by clients: linear models, an MLP classifier and a
//! GIN graph network with selectable readout, plus output-column views that
//! let clients with different tasks share one multi-task model.

mod gin;
mod graph;
mod init;
mod linear;
mod mlp;
mod readout;

pub use gin::{GinConfig, Head};
pub use graph::{Graph, GraphBatch, Target};
pub use linear::LinearConfig;
pub use mlp::MlpConfig;
pub use readout::{readout, ReadoutMode};

use rand::Rng;

use crate::datagen::{Dataset, Features, TaskKind, Targets};
use crate::error::{Error, Result};
use crate::tensor::{Gradient, ParamVector, Tape, Tensor, Var};

/// Architecture of a client model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelSpec {
    Linear(LinearConfig),
    Mlp(MlpConfig),
    Gin(GinConfig),
    /// Output columns `start..start + len` of `inner`, sharing its parameters.
    Slice {
        inner: Box<ModelSpec>,
        start: usize,
        len: usize,
    },
}

impl ModelSpec {
    pub fn slice(inner: ModelSpec, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > inner.outputs() {
            return Err(Error::Structural(format!(
                "output slice {start}..{} of a model with {} outputs",
                start + len,
                inner.outputs()
            )));
        }
        Ok(ModelSpec::Slice {
            inner: Box::new(inner),
            start,
            len,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        match self {
            ModelSpec::Linear(c) => c.init(rng),
            ModelSpec::Mlp(c) => c.init(rng),
            ModelSpec::Gin(c) => c.init(rng),
            ModelSpec::Slice { inner, .. } => inner.init(rng),
        }
    }

    /// Width of the prediction rows.
    pub fn outputs(&self) -> usize {
        match self {
            ModelSpec::Linear(c) => c.outputs,
            ModelSpec::Mlp(c) => c.num_classes,
            ModelSpec::Gin(c) => c.head.outputs(),
            ModelSpec::Slice { len, .. } => *len,
        }
    }

    /// Predictions for samples `idx` of `data`, recorded on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        data: &Dataset,
        idx: &[usize],
    ) -> Result<Var> {
        match (self, data.features()) {
            (ModelSpec::Slice { inner, start, len }, _) => {
                let out = inner.forward(tape, params, data, idx)?;
                tape.slice_cols(out, *start, *len)
            }
            (ModelSpec::Linear(c), Features::Vectors(x)) => {
                let batch = tape.constant(gather_rows(x, idx)?);
                c.forward(tape, params, batch)
            }
            (ModelSpec::Mlp(c), Features::Vectors(x)) => {
                let batch = tape.constant(gather_rows(x, idx)?);
                c.forward(tape, params, batch)
            }
            (ModelSpec::Gin(c), Features::Graphs(graphs)) => {
                let picked: Vec<&Graph> = idx.iter().map(|&i| &graphs[i]).collect();
                let batch = GraphBatch::new(&picked)?;
                c.forward(tape, params, &batch)
            }
            (ModelSpec::Linear(_) | ModelSpec::Mlp(_), Features::Graphs(_)) => Err(
                Error::Structural("vector models cannot consume graph samples".into()),
            ),
            (ModelSpec::Gin(_), Features::Vectors(_)) => Err(Error::Structural(
                "a gin cannot consume vector samples".into(),
            )),
        }
    }
}

/// Pushes every segment of `params` onto the tape, in order.
pub fn load_params(tape: &mut Tape, params: &ParamVector, trainable: bool) -> Vec<Var> {
    params
        .segments()
        .iter()
        .map(|(_, t)| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

pub(crate) fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if idx.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    for &i in idx {
        if i >= x.rows() {
            return Err(Error::Data(format!("sample {i} out of range")));
        }
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![idx.len(), x.cols()], data)
}

/// Supervised loss of `pred` on samples `idx`: cross-entropy for
/// classification, MSE on output column 0 for regression.
pub fn task_loss(tape: &mut Tape, pred: Var, data: &Dataset, idx: &[usize]) -> Result<Var> {
    match (data.task(), data.targets()) {
        (TaskKind::Classification { .. }, Targets::Classes(labels)) => {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            tape.cross_entropy(pred, &y)
        }
        (TaskKind::Regression, Targets::Values(values)) => {
            let y: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
            tape.mse(pred, &y, 0)
        }
        _ => Err(Error::Structural("task kind and targets disagree".into())),
    }
}

/// Supervised loss on a batch and its gradient with respect to `params`.
pub fn loss_and_grad(
    model: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    idx: &[usize],
) -> Result<(f64, Gradient)> {
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params, true);
    let pred = model.forward(&mut tape, &vars, data, idx)?;
    let loss = task_loss(&mut tape, pred, data, idx)?;
    let grads = tape.backward(loss);
    Ok((tape.value(loss).data()[0], collect_grads(params, &vars, &grads)?))
}

pub(crate) fn collect_grads(
    params: &ParamVector,
    vars: &[Var],
    grads: &crate::tensor::Grads,
) -> Result<Gradient> {
    let segments = params
        .segments()
        .iter()
        .zip(vars)
        .map(|((name, _), &v)| (name.clone(), grads.wrt(v)))
        .collect();
    ParamVector::new(segments)
}

/// Predictions for samples `idx`, without gradients.
pub fn predict(
    model: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    idx: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params, false);
    let pred = model.forward(&mut tape, &vars, data, idx)?;
    Ok(tape.value(pred).clone())
}

/// Logits of an MLP for a `[batch × input_dim]` matrix.
pub fn mlp_forward(config: &MlpConfig, params: &ParamVector, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params, false);
    let input = tape.constant(batch.clone());
    let out = config.forward(&mut tape, &vars, input)?;
    Ok(tape.value(out).clone())
}

/// Prediction row of a GIN for a single graph.
pub fn gin_forward(config: &GinConfig, params: &ParamVector, graph: &Graph) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params, false);
    let batch = GraphBatch::new(&[graph])?;
    let out = config.forward(&mut tape, &vars, &batch)?;
    let t = tape.value(out).clone();
    let width = t.cols();
    t.reshaped(vec![width])
}
