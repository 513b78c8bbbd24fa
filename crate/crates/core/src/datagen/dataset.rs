use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{gather_rows, Graph, Target};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    /// `[N × F]` matrix, one row per sample.
    Vectors(Tensor),
    Graphs(Vec<Graph>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

/// A labeled sample collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Features,
    targets: Targets,
    task: TaskKind,
}

impl Dataset {
    pub fn new(features: Features, targets: Targets, task: TaskKind) -> Result<Self> {
        let n = match &features {
            Features::Vectors(x) => {
                if x.shape().len() != 2 {
                    return Err(Error::Structural(format!(
                        "feature matrix has shape {:?}",
                        x.shape()
                    )));
                }
                x.rows()
            }
            Features::Graphs(g) => g.len(),
        };
        let m = match &targets {
            Targets::Classes(y) => y.len(),
            Targets::Values(y) => y.len(),
        };
        if n != m {
            return Err(Error::Structural(format!("{n} samples but {m} targets")));
        }
        match (&targets, task) {
            (Targets::Classes(y), TaskKind::Classification { classes }) => {
                if let Some(bad) = y.iter().find(|&&c| c >= classes) {
                    return Err(Error::Data(format!(
                        "label {bad} out of range for {classes} classes"
                    )));
                }
            }
            (Targets::Values(_), TaskKind::Regression) => {}
            _ => return Err(Error::Structural("task kind and targets disagree".into())),
        }
        Ok(Dataset {
            features,
            targets,
            task,
        })
    }

    /// Collects graphs into a dataset, taking targets from the graphs.
    pub fn from_graphs(graphs: Vec<Graph>, task: TaskKind) -> Result<Self> {
        let targets = match task {
            TaskKind::Classification { .. } => Targets::Classes(
                graphs
                    .iter()
                    .map(|g| match g.target {
                        Target::Class(c) => Ok(c),
                        Target::Value(_) => Err(Error::Data("regression target in a classification set".into())),
                    })
                    .collect::<Result<_>>()?,
            ),
            TaskKind::Regression => Targets::Values(
                graphs
                    .iter()
                    .map(|g| match g.target {
                        Target::Value(v) => Ok(v),
                        Target::Class(_) => Err(Error::Data("class target in a regression set".into())),
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Dataset::new(Features::Graphs(graphs), targets, task)
    }

    pub fn len(&self) -> usize {
        match &self.targets {
            Targets::Classes(y) => y.len(),
            Targets::Values(y) => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &Features {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut Features {
        &mut self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    /// Class labels, if this is a classification set.
    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(y) => Some(y),
            Targets::Values(_) => None,
        }
    }

    /// Samples at `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("sample {bad} out of range")));
        }
        let features = match &self.features {
            Features::Vectors(x) => Features::Vectors(gather_rows(x, idx)?),
            Features::Graphs(g) => Features::Graphs(idx.iter().map(|&i| g[i].clone()).collect()),
        };
        let targets = match &self.targets {
            Targets::Classes(y) => Targets::Classes(idx.iter().map(|&i| y[i]).collect()),
            Targets::Values(y) => Targets::Values(idx.iter().map(|&i| y[i]).collect()),
        };
        Ok(Dataset {
            features,
            targets,
            task: self.task,
        })
    }

    /// Writes `index,f0,…,label` rows with a one-line header. Only vector
    /// datasets have a flat representation.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let Features::Vectors(x) = &self.features else {
            return Err(Error::Data("graph datasets have no CSV form".into()));
        };
        let mut out = Vec::new();
        let header: Vec<String> = std::iter::once("index".to_string())
            .chain((0..x.cols()).map(|j| format!("f{j}")))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(out, "{}", header.join(",")).expect("write to vec");
        for i in 0..self.len() {
            let label = match &self.targets {
                Targets::Classes(y) => y[i].to_string(),
                Targets::Values(y) => format!("{:?}", y[i]),
            };
            let feats: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{i},{},{label}", feats.join(",")).expect("write to vec");
        }
        crate::io::write_atomic(path, &out)
    }
}
