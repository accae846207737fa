//! File formats: dataset CSV, CUBE1 hyperspectral images, model documents,
//! and TOML run/scenario configuration.
//!
//! All parsers here take untrusted input and validate strictly; they are the
//! crate's fuzzing surface. Emitters are deterministic: same value, same
//! bytes, locale independent.

mod config;
mod cube;
mod dataset_csv;
mod model_doc;
pub mod scenario;

pub use config::RunConfig;
pub use cube::{decode_cube, encode_cube, CubeImage};
pub use dataset_csv::{dataset_to_csv, parse_dataset_csv};
pub use model_doc::{FitMeta, ModelDocument, ModelPayload};

use crate::selection::SelectionReport;
use crate::simulate::RiskCurve;

/// Selection report as CSV (header `id,dim,neg_loglik,penalty,score,chosen`).
pub fn selection_report_to_csv(report: &SelectionReport) -> String {
    let mut out = String::from("id,dim,neg_loglik,penalty,score,chosen\n");
    for (i, r) in report.records.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_quote(&r.id),
            r.dim,
            fmt(r.neg_loglik),
            fmt(r.penalty),
            fmt(r.score),
            u8::from(i == report.chosen)
        ));
    }
    out
}

/// Risk curve as CSV (header `n,label,mean_risk,std_error,replicates`).
pub fn risk_curve_to_csv(curve: &RiskCurve) -> String {
    let mut out = String::from("n,label,mean_risk,std_error,replicates\n");
    for r in &curve.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.n,
            csv_quote(&r.label),
            fmt(r.mean_risk),
            fmt(r.std_error),
            r.replicates
        ));
    }
    out
}

/// Per-point labels, one row per input point (header `index,label`).
pub fn labels_to_csv(labels: &[usize]) -> String {
    let mut out = String::from("index,label\n");
    for (i, l) in labels.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

/// Labels keyed by image position (header `row,col,label`); `labels` must be
/// in row-major pixel order.
pub fn labels_to_grid_csv(labels: &[usize], height: usize, width: usize) -> String {
    debug_assert_eq!(labels.len(), height * width);
    let mut out = String::from("row,col,label\n");
    for (i, l) in labels.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", i / width.max(1), i % width.max(1), l));
    }
    out
}

/// Slope diagnostics as CSV (header `kappa,selected_dim`).
pub fn slope_sweep_to_csv(diag: &crate::selection::SlopeDiagnostics) -> String {
    let mut out = String::from("kappa,selected_dim\n");
    for (kappa, dim) in &diag.sweep {
        out.push_str(&format!("{},{}\n", fmt(*kappa), dim));
    }
    out
}

pub(crate) fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else if v != 0.0 && (v.abs() >= 1e16 || v.abs() < 1e-4) {
        // Scientific notation for extremes keeps rows short; '.' decimal
        // separator in all cases.
        format!("{v:e}")
    } else {
        let mut buf = format!("{v}");
        if !buf.contains('.') {
            buf.push_str(".0");
        }
        buf
    }
}

fn csv_quote(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
