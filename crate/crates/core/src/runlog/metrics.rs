use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::datagen::{Dataset, TaskKind, Targets};
use crate::error::{Error, Result};
use crate::models::{predict, ModelSpec};
use crate::tensor::{cross_entropy, mse};

/// Who a metric row describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClientRef {
    Client(usize),
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Acc,
    AvgLoss,
    Mse,
    ImpRatio,
}

/// One evaluation result row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRecord {
    pub round: usize,
    pub client: ClientRef,
    pub split: Split,
    pub metric: Metric,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(round: usize, client: ClientRef, split: Split, metric: Metric, value: f64) -> Self {
        MetricRecord {
            round,
            client,
            split,
            metric,
            value,
        }
    }
}

macro_rules! text_enum {
    ($ty:ty, $($variant:path => $text:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(format!("unknown value `{other}`")),
                }
            }
        }
    };
}

text_enum!(Split, Split::Train => "train", Split::Test => "test");
text_enum!(
    Metric,
    Metric::Acc => "acc",
    Metric::AvgLoss => "avg_loss",
    Metric::Mse => "mse",
    Metric::ImpRatio => "imp_ratio",
);

impl fmt::Display for ClientRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientRef::Client(k) => write!(f, "{k}"),
            ClientRef::Global => f.write_str("global"),
        }
    }
}

impl FromStr for ClientRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "global" {
            return Ok(ClientRef::Global);
        }
        s.parse()
            .map(ClientRef::Client)
            .map_err(|_| format!("client must be an integer or `global`, got `{s}`"))
    }
}

/// Summary of a model on a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Evaluation {
    Classification { acc: f64, avg_loss: f64 },
    Regression { mse: f64 },
}

impl Evaluation {
    /// Error rate for classification, MSE for regression.
    pub fn error(&self) -> f64 {
        match *self {
            Evaluation::Classification { acc, .. } => 1.0 - acc,
            Evaluation::Regression { mse } => mse,
        }
    }

    pub fn records(&self, round: usize, client: ClientRef, split: Split) -> Vec<MetricRecord> {
        match *self {
            Evaluation::Classification { acc, avg_loss } => vec![
                MetricRecord::new(round, client, split, Metric::Acc, acc),
                MetricRecord::new(round, client, split, Metric::AvgLoss, avg_loss),
            ],
            Evaluation::Regression { mse } => {
                vec![MetricRecord::new(round, client, split, Metric::Mse, mse)]
            }
        }
    }
}

const EVAL_CHUNK: usize = 512;

/// Accuracy and mean cross-entropy (classification) or MSE on output column 0
/// (regression) over every sample of `data`.
pub fn evaluate_model(model: &ModelSpec, params: &crate::tensor::ParamVector, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let n = data.len();
    let all: Vec<usize> = (0..n).collect();
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    for chunk in all.chunks(EVAL_CHUNK) {
        let pred = predict(model, params, data, chunk)?;
        match data.targets() {
            Targets::Classes(labels) => {
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let (loss, _) = cross_entropy(&pred, &y)?;
                loss_sum += loss * chunk.len() as f64;
                for (r, &label) in y.iter().enumerate() {
                    if argmax(pred.row(r)) == label {
                        correct += 1;
                    }
                }
            }
            Targets::Values(values) => {
                let y: Vec<f64> = chunk.iter().map(|&i| values[i]).collect();
                let (loss, _) = mse(&pred, &y, 0)?;
                loss_sum += loss * chunk.len() as f64;
            }
        }
    }
    Ok(match data.task() {
        TaskKind::Classification { .. } => Evaluation::Classification {
            acc: correct as f64 / n as f64,
            avg_loss: loss_sum / n as f64,
        },
        TaskKind::Regression => Evaluation::Regression {
            mse: loss_sum / n as f64,
        },
    })
}

/// [`evaluate_model`] as metric rows.
pub fn evaluate(
    model: &ModelSpec,
    params: &crate::tensor::ParamVector,
    data: &Dataset,
    round: usize,
    client: ClientRef,
    split: Split,
) -> Result<Vec<MetricRecord>> {
    Ok(evaluate_model(model, params, data)?.records(round, client, split))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Recorded in run manifests next to `imp_ratio` values.
pub const IMP_RATIO_DEFINITION: &str = "(baseline - metric) / baseline";

/// Relative improvement over an isolated-training baseline:
/// `(b − m) / b`, where `b` and `m` are error rates or MSEs.
pub fn improvement_ratio(baseline: f64, metric: f64) -> Result<f64> {
    if !(baseline > 0.0) || !baseline.is_finite() {
        return Err(Error::config(
            "baseline",
            format!("isolated baseline must be positive, got {baseline}"),
        ));
    }
    Ok((baseline - metric) / baseline)
}

/// Per-client isolated-training baselines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IsolatedBaseline {
    values: BTreeMap<usize, f64>,
}

impl IsolatedBaseline {
    pub fn new(values: BTreeMap<usize, f64>) -> Result<Self> {
        for (&k, &b) in &values {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::config(
                    format!("baseline[{k}]"),
                    format!("must be positive, got {b}"),
                ));
            }
        }
        Ok(IsolatedBaseline { values })
    }

    pub fn get(&self, client: usize) -> Option<f64> {
        self.values.get(&client).copied()
    }

    pub fn values(&self) -> &BTreeMap<usize, f64> {
        &self.values
    }

    /// Reads a `client,baseline` CSV.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut values = BTreeMap::new();
        for row in reader.records() {
            let row = row.map_err(|e| csv_error(path, e))?;
            let line = row.position().map_or(0, |p| p.line());
            let bad = |msg: &str| Error::format(path, format!("line {line}"), msg);
            if row.len() != 2 {
                return Err(bad("expected client,baseline"));
            }
            let k: usize = row[0].trim().parse().map_err(|_| bad("client is not an integer"))?;
            let b: f64 = row[1].trim().parse().map_err(|_| bad("baseline is not a number"))?;
            if values.insert(k, b).is_some() {
                return Err(bad("duplicate client"));
            }
        }
        IsolatedBaseline::new(values)
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let location = e
        .position()
        .map_or_else(|| "unknown".to_string(), |p| format!("line {}", p.line()));
    Error::format(path, location, e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_ratio_cases() {
        assert_eq!(improvement_ratio(0.5, 0.25).unwrap(), 0.5);
        assert_eq!(improvement_ratio(0.3, 0.3).unwrap(), 0.0);
        assert!(improvement_ratio(0.3, 0.6).unwrap() < 0.0);
        assert!(improvement_ratio(0.0, 0.1).is_err());
        assert!(improvement_ratio(-1.0, 0.1).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn text_forms_roundtrip() {
        for m in [Metric::Acc, Metric::AvgLoss, Metric::Mse, Metric::ImpRatio] {
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
        for c in [ClientRef::Global, ClientRef::Client(12)] {
            assert_eq!(c.to_string().parse::<ClientRef>().unwrap(), c);
        }
        assert!("x".parse::<ClientRef>().is_err());
    }
}
