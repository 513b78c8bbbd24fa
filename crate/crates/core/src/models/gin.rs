//! Graph isomorphism network: each layer updates node states as
//! `h_v ← MLP((1 + ε)·h_v + Σ_{u∈N(v)} h_u)` with a learnable ε, followed by
//! a graph readout and a two-layer head.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamVector, Tape, Tensor, Var};

use super::graph::GraphBatch;
use super::init::dense_segments;
use super::ReadoutMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Classification(usize),
    Regression,
    /// Raw output columns shared by several tasks; each client reads its own
    /// slice through [`ModelSpec::Slice`](super::ModelSpec::Slice).
    MultiTask(usize),
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Classification(c) | Head::MultiTask(c) => c,
            Head::Regression => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GinConfig {
    pub input_dim: usize,
    pub num_layers: usize,
    pub width: usize,
    pub readout: ReadoutMode,
    pub head: Head,
    /// Hidden width of the head is `width × head_width_multiplier`.
    pub head_width_multiplier: usize,
}

/// Number of parameter tensors per GIN layer: ε plus two dense layers.
const LAYER_TENSORS: usize = 5;

impl GinConfig {
    pub fn new(
        input_dim: usize,
        num_layers: usize,
        width: usize,
        readout: ReadoutMode,
        head: Head,
    ) -> Result<Self> {
        let cfg = GinConfig {
            input_dim,
            num_layers,
            width,
            readout,
            head,
            head_width_multiplier: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_head_width_multiplier(mut self, multiplier: usize) -> Result<Self> {
        self.head_width_multiplier = multiplier;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be >= 1"));
        }
        if self.num_layers == 0 {
            return Err(Error::config("model.layers", "must be >= 1"));
        }
        if self.width == 0 {
            return Err(Error::config("model.width", "must be >= 1"));
        }
        if self.head_width_multiplier == 0 {
            return Err(Error::config("model.head_width_multiplier", "must be >= 1"));
        }
        match self.head {
            Head::Classification(c) if c < 2 => {
                return Err(Error::config("model.classes", "need at least 2 classes"));
            }
            Head::MultiTask(0) => {
                return Err(Error::config("model.head", "need at least one output column"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Width of the graph embedding fed to the head.
    pub fn head_input_width(&self) -> usize {
        self.readout.output_width(self.width)
    }

    pub fn head_hidden_width(&self) -> usize {
        self.width * self.head_width_multiplier
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut segments = Vec::new();
        for l in 0..self.num_layers {
            let fan_in = if l == 0 { self.input_dim } else { self.width };
            segments.push((format!("gin{l}.eps"), Tensor::scalar(0.0)));
            segments.extend(dense_segments(rng, &format!("gin{l}.mlp0"), fan_in, self.width));
            segments.extend(dense_segments(rng, &format!("gin{l}.mlp1"), self.width, self.width));
        }
        segments.extend(dense_segments(
            rng,
            "head.hidden",
            self.head_input_width(),
            self.head_hidden_width(),
        ));
        segments.extend(dense_segments(
            rng,
            "head.out",
            self.head_hidden_width(),
            self.head.outputs(),
        ));
        ParamVector::new(segments).expect("unique layer names")
    }

    /// Node embeddings after all GIN layers, `[total_nodes × width]`.
    pub fn embed(&self, tape: &mut Tape, params: &[Var], batch: &GraphBatch) -> Result<Var> {
        let expected = LAYER_TENSORS * self.num_layers + 4;
        if params.len() != expected {
            return Err(Error::Structural(format!(
                "gin expects {expected} parameter tensors, got {}",
                params.len()
            )));
        }
        if batch.features.cols() != self.input_dim {
            return Err(Error::Structural(format!(
                "node features of width {} do not match input_dim {}",
                batch.features.cols(),
                self.input_dim
            )));
        }
        let edges: Arc<[(usize, usize)]> = batch.edges.clone().into();
        let mut h = tape.constant(batch.features.clone());
        for l in 0..self.num_layers {
            let p = &params[LAYER_TENSORS * l..LAYER_TENSORS * (l + 1)];
            let one_plus_eps = tape.add_const(p[0], 1.0);
            let self_term = tape.mul_scalar(h, one_plus_eps)?;
            let neighbors = tape.neighbor_sum(h, edges.clone())?;
            let combined = tape.add(self_term, neighbors)?;
            let z = tape.dense(combined, p[1], p[2])?;
            let z = tape.relu(z);
            let z = tape.dense(z, p[3], p[4])?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    /// Per-graph predictions `[graphs × head outputs]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], batch: &GraphBatch) -> Result<Var> {
        let h = self.embed(tape, params, batch)?;
        let pooled = self.readout.apply(tape, h, &batch.offsets)?;
        let head = &params[LAYER_TENSORS * self.num_layers..];
        let z = tape.dense(pooled, head[0], head[1])?;
        let z = tape.relu(z);
        tape.dense(z, head[2], head[3])
    }
}
