//! Evaluation metrics and their CSV persistence.

mod csv_io;
mod metrics;

pub use csv_io::{format_value, read_csv, write_csv, HEADER};
pub use metrics::{
    argmax, evaluate, evaluate_model, improvement_ratio, ClientRef, Evaluation, IsolatedBaseline,
    Metric, MetricRecord, Split, IMP_RATIO_DEFINITION,
};
