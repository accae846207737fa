//! Covariate/response sample storage.

use crate::{Error, Result};

/// `n` covariate/response pairs `(X_i, Y_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub d_x: usize,
    pub d_y: usize,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Contract("need equally many covariates and responses".into()));
        }
        let d_x = x[0].len();
        let d_y = y[0].len();
        if d_x == 0 || d_y == 0 {
            return Err(Error::Contract("zero-dimensional rows".into()));
        }
        if x.iter().any(|r| r.len() != d_x) || y.iter().any(|r| r.len() != d_y) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Ok(Dataset { x, y, d_x, d_y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Restriction to the given row indices.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i].clone()).collect(),
            d_x: self.d_x,
            d_y: self.d_y,
        }
    }
}
