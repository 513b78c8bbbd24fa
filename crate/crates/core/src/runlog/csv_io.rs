use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

use super::metrics::csv_error;
use super::MetricRecord;

pub const HEADER: [&str; 5] = ["round", "client", "split", "metric", "value"];

/// Formats `v` with 9 significant digits, like C's `%.9g`.
pub fn format_value(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        return format!("{mantissa}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn to_bytes(records: &[MetricRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::Report(e.to_string());
    w.write_record(HEADER).map_err(wrap)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.client.to_string(),
            r.split.to_string(),
            r.metric.to_string(),
            format_value(r.value),
        ])
        .map_err(wrap)?;
    }
    w.into_inner().map_err(|e| Error::Report(e.to_string()))
}

/// Writes records under the `round,client,split,metric,value` header,
/// atomically.
pub fn write_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(records)?)
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::format(path, "line 1", "unexpected header"));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::format(path, format!("line {line}"), msg);
        if row.len() != HEADER.len() {
            return Err(bad(format!("expected 5 fields, got {}", row.len())));
        }
        let record = MetricRecord {
            round: row[0].parse().map_err(|_| bad(format!("bad round `{}`", &row[0])))?,
            client: row[1].parse().map_err(bad)?,
            split: row[2].parse().map_err(bad)?,
            metric: row[3].parse().map_err(bad)?,
            value: row[4].parse().map_err(|_| bad(format!("bad value `{}`", &row[4])))?,
        };
        out.push(record);
    }
    Ok(out)
}
