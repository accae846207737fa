//! Dataset CSV: header `x1,..,x{d_x},y1,..,y{d_y}`, then rows of decimal
//! floats. Covariates must lie in `[0,1]`; responses are unrestricted (the
//! mixture family lives on all of `R^p`).

use crate::dataset::Dataset;
use crate::{Error, Result};

use super::fmt;

pub fn parse_dataset_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty file".into()))?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    let d_x = cols.iter().take_while(|c| c.starts_with('x')).count();
    let d_y = cols.len() - d_x;
    if d_x == 0 || d_y == 0 {
        return Err(Error::Format("header must be x1..x{dx},y1..y{dy}".into()));
    }
    for (i, c) in cols.iter().enumerate() {
        let expect = if i < d_x { format!("x{}", i + 1) } else { format!("y{}", i - d_x + 1) };
        if *c != expect {
            return Err(Error::Format(format!("column {} is `{c}`, expected `{expect}`", i + 1)));
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d_x + d_y {
            return Err(Error::Format(format!(
                "row {}: {} fields, expected {}",
                lineno + 2,
                fields.len(),
                d_x + d_y
            )));
        }
        let mut row = Vec::with_capacity(fields.len());
        for f in &fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("row {}: `{f}` is not a number", lineno + 2)))?;
            if !v.is_finite() {
                return Err(Error::Format(format!("row {}: non-finite value", lineno + 2)));
            }
            row.push(v);
        }
        let (x, y) = row.split_at(d_x);
        if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Format(format!("row {}: covariate outside [0,1]", lineno + 2)));
        }
        xs.push(x.to_vec());
        ys.push(y.to_vec());
    }
    if xs.is_empty() {
        return Err(Error::Format("no data rows".into()));
    }
    Dataset::new(xs, ys)
}

pub fn dataset_to_csv(data: &Dataset) -> String {
    let mut out = String::new();
    let cols: Vec<String> = (1..=data.d_x)
        .map(|i| format!("x{i}"))
        .chain((1..=data.d_y).map(|i| format!("y{i}")))
        .collect();
    out.push_str(&cols.join(","));
    out.push('\n');
    for (x, y) in data.x.iter().zip(&data.y) {
        let row: Vec<String> = x.iter().chain(y).map(|v| fmt(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
