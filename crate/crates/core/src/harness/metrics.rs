use std::fmt::Write as _;

use serde::Serialize;

/// One logged evaluation, on held-out data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: u64,
    /// InfoNCE loss per horizon `k = 1..=K`.
    pub loss_k: Vec<f64>,
    pub acc_k: Vec<f64>,
    pub loss: f64,
    pub mi_bound: f64,
    pub mine: f64,
}

/// Column names; a function of `K` only.
pub fn csv_header(horizons: usize) -> String {
    let mut cols = vec!["step".to_string()];
    cols.extend((1..=horizons).map(|k| format!("loss_k{k}")));
    cols.extend((1..=horizons).map(|k| format!("acc_k{k}")));
    cols.extend(["loss", "mi_bound", "mine"].map(String::from));
    cols.join(",")
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        let mut s = self.step.to_string();
        for v in self.loss_k.iter().chain(&self.acc_k).chain([&self.loss, &self.mi_bound, &self.mine]) {
            write!(s, ",{v}").expect("string write");
        }
        s
    }
}

pub fn metrics_csv(horizons: usize, rows: &[MetricRow]) -> String {
    let mut out = csv_header(horizons);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Least-squares slope of `loss` against step, per 1000 steps, over the
/// last `window` rows.
pub fn loss_slope(rows: &[MetricRow], window: usize) -> Option<f64> {
    let tail = &rows[rows.len().saturating_sub(window)..];
    if tail.len() < 2 {
        return None;
    }
    let n = tail.len() as f64;
    let mx = tail.iter().map(|r| r.step as f64).sum::<f64>() / n;
    let my = tail.iter().map(|r| r.loss).sum::<f64>() / n;
    let sxy: f64 = tail.iter().map(|r| (r.step as f64 - mx) * (r.loss - my)).sum();
    let sxx: f64 = tail.iter().map(|r| (r.step as f64 - mx).powi(2)).sum();
    Some(1000.0 * sxy / sxx)
}
