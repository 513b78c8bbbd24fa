//! Run comparison: final, best and convergence round of one metric, plus an
//! optional SVG line chart.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedsim_core::io::write_atomic;
use fedsim_core::runlog::{read_csv, ClientRef, Metric, MetricRecord, Split};
use fedsim_core::{Error, Result};

/// Fraction of the final value that marks convergence.
pub const CONVERGENCE_FRACTION: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub final_round: usize,
    pub final_value: f64,
    pub best_value: f64,
    pub best_round: usize,
    pub convergence_round: usize,
    /// `(round, value)` in round order.
    pub series: Vec<(usize, f64)>,
}

fn lower_is_better(metric: Metric) -> bool {
    matches!(metric, Metric::Mse | Metric::AvgLoss)
}

/// Global rows of `metric`, falling back to the test split and then the
/// train split.
pub fn global_series(records: &[MetricRecord], metric: Metric) -> Vec<(usize, f64)> {
    for split in [Split::Test, Split::Train] {
        let mut s: Vec<(usize, f64)> = records
            .iter()
            .filter(|r| r.client == ClientRef::Global && r.metric == metric && r.split == split)
            .map(|r| (r.round, r.value))
            .collect();
        if !s.is_empty() {
            s.sort_by_key(|&(round, _)| round);
            return s;
        }
    }
    Vec::new()
}

/// First round whose value reaches 95% of the final one. For
/// lower-is-better metrics the threshold is `final / 0.95`.
pub fn convergence_round(series: &[(usize, f64)], metric: Metric) -> Option<usize> {
    let &(_, last) = series.last()?;
    let reached = |v: f64| {
        if lower_is_better(metric) {
            v <= last / CONVERGENCE_FRACTION
        } else {
            v >= CONVERGENCE_FRACTION * last
        }
    };
    series.iter().find(|&&(_, v)| reached(v)).map(|&(r, _)| r)
}

pub fn summarize(name: &str, records: &[MetricRecord], metric: Metric) -> Result<RunSummary> {
    let series = global_series(records, metric);
    let Some(&(final_round, final_value)) = series.last() else {
        return Err(Error::Report(format!("{name}: no global `{metric}` rows")));
    };
    let better = |a: f64, b: f64| if lower_is_better(metric) { a < b } else { a > b };
    let (mut best_round, mut best_value) = series[0];
    for &(r, v) in &series[1..] {
        if better(v, best_value) {
            best_round = r;
            best_value = v;
        }
    }
    Ok(RunSummary {
        name: name.to_string(),
        final_round,
        final_value,
        best_value,
        best_round,
        convergence_round: convergence_round(&series, metric).expect("series is non-empty"),
        series,
    })
}

pub fn summarize_files(paths: &[PathBuf], metric: Metric) -> Result<Vec<RunSummary>> {
    if paths.is_empty() {
        return Err(Error::Report("need at least one metrics CSV".into()));
    }
    paths
        .iter()
        .map(|p| summarize(&p.display().to_string(), &read_csv(p)?, metric))
        .collect()
}

pub fn format_table(rows: &[RunSummary], metric: Metric) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(3).max(3);
    let mut s = String::new();
    writeln!(
        s,
        "{:<width$}  {:>12}  {:>12}  {:>10}  {:>11}",
        "run",
        format!("final {metric}"),
        format!("best {metric}"),
        "best_round",
        "conv_round"
    )
    .expect("write to string");
    for r in rows {
        writeln!(
            s,
            "{:<width$}  {:>12.6}  {:>12.6}  {:>10}  {:>11}",
            r.name, r.final_value, r.best_value, r.best_round, r.convergence_round
        )
        .expect("write to string");
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Self-contained SVG line chart of every run's series.
pub fn line_chart(rows: &[RunSummary], metric: Metric) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let points = rows.iter().flat_map(|r| r.series.iter());
    let (mut x_max, mut y_min, mut y_max) = (1usize, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-12 {
        y_max = y_min + 1.0;
    }
    let sx = |x: usize| pad + (w - 2.0 * pad) * x as f64 / x_max as f64;
    let sy = |y: f64| h - pad - (h - 2.0 * pad) * (y - y_min) / (y_max - y_min);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .expect("write to string");
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).expect("write to string");
    writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad
    )
    .expect("write to string");
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">round</text>"#,
        w / 2.0,
        h - 10.0
    )
    .expect("write to string");
    writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">{metric}</text>"#,
        h / 2.0,
        h / 2.0
    )
    .expect("write to string");
    for (label, y) in [(y_min, sy(y_min)), (y_max, sy(y_max))] {
        writeln!(
            s,
            r#"<text x="{}" y="{y:.1}" font-size="10" text-anchor="end">{label:.4}</text>"#,
            pad - 4.0
        )
        .expect("write to string");
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{}" font-size="10" text-anchor="middle">{x_max}</text>"#,
        sx(x_max),
        h - pad + 14.0
    )
    .expect("write to string");
    for (i, r) in rows.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = r
            .series
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            pts.join(" ")
        )
        .expect("write to string");
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" fill="{colour}">{}</text>"#,
            pad + 8.0,
            pad + 12.0 * (i + 1) as f64,
            escape(&r.name)
        )
        .expect("write to string");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn write_chart(rows: &[RunSummary], metric: Metric, path: &Path) -> Result<()> {
    write_atomic(path, line_chart(rows, metric).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acc(round: usize, value: f64) -> MetricRecord {
        MetricRecord::new(round, ClientRef::Global, Split::Test, Metric::Acc, value)
    }

    #[test]
    fn convergence_is_first_round_at_95_percent_of_final() {
        let rows = [acc(1, 0.5), acc(2, 0.76), acc(3, 0.9), acc(4, 0.8)];
        let s = summarize("r", &rows, Metric::Acc).unwrap();
        assert_eq!(s.final_value, 0.8);
        assert_eq!(s.best_value, 0.9);
        assert_eq!(s.best_round, 3);
        assert_eq!(s.convergence_round, 2);
    }

    #[test]
    fn lower_is_better_for_losses() {
        let rows: Vec<_> = [(1, 2.0), (2, 1.04), (3, 1.0)]
            .iter()
            .map(|&(r, v)| MetricRecord::new(r, ClientRef::Global, Split::Train, Metric::AvgLoss, v))
            .collect();
        let s = summarize("r", &rows, Metric::AvgLoss).unwrap();
        assert_eq!(s.best_value, 1.0);
        assert_eq!(s.convergence_round, 2);
    }

    #[test]
    fn missing_metric_is_a_report_error() {
        assert!(matches!(
            summarize("r", &[acc(1, 0.5)], Metric::Mse),
            Err(Error::Report(_))
        ));
    }

    #[test]
    fn chart_has_one_polyline_per_run() {
        let s = summarize("a<b", &[acc(1, 0.5), acc(2, 0.7)], Metric::Acc).unwrap();
        let svg = line_chart(&[s.clone(), s], Metric::Acc);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
