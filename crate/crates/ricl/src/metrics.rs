//! Accuracy-matrix bookkeeping and the retention/forgetting metrics.
//!
//! `m[i][j]` (percent, lower triangular) is the accuracy on task `j`'s test
//! split after training through task `i`; AP is the mean of the final row,
//! AF the mean diagonal-to-final drop over all but the last task.

use crate::error::{Result, RiclError};
use crate::nn::{forward, FeatureConfig, ModelParams};
use crate::stream::Sample;

/// Lower-triangular accuracy matrix, filled one row per completed task.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        AccuracyMatrix {
            num_tasks,
            rows: Vec::with_capacity(num_tasks),
        }
    }

    /// Builds a matrix directly from rows (row `i` must have `i + 1`
    /// entries).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for row in rows {
            m.record_row(row)?;
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn rows_recorded(&self) -> usize {
        self.rows.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.num_tasks
    }

    /// Appends the row for the next completed task; entry `j` is the
    /// accuracy on task `j` (percent).
    pub fn record_row(&mut self, row: Vec<f64>) -> Result<()> {
        if self.rows.len() == self.num_tasks {
            return Err(RiclError::InvalidArgument(
                "accuracy matrix already complete".into(),
            ));
        }
        if row.len() != self.rows.len() + 1 {
            return Err(RiclError::ShapeMismatch(format!(
                "accuracy row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|v| !(0.0..=100.0).contains(v)) {
            return Err(RiclError::InvalidArgument(
                "accuracy entries must lie in [0, 100]".into(),
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    /// `m[i][j]` for `j <= i`.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        if self.is_complete() {
            self.rows.last().map(|r| r.as_slice())
        } else {
            None
        }
    }

    /// CSV rendering: one row per completed task, empty cells above the
    /// diagonal, then `AP,AF` summary lines.
    pub fn to_csv(&self) -> Result<String> {
        let ap = ap(self)?;
        let af = if self.num_tasks >= 2 { af(self)? } else { 0.0 };
        let mut out = String::new();
        out.push_str("after_task");
        for j in 0..self.num_tasks {
            out.push_str(&format!(",task_{j}"));
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&i.to_string());
            for j in 0..self.num_tasks {
                out.push(',');
                if j < row.len() {
                    out.push_str(&format!("{:.4}", row[j]));
                }
            }
            out.push('\n');
        }
        out.push_str("AP,AF\n");
        out.push_str(&format!("{ap:.4},{af:.4}\n"));
        Ok(out)
    }
}

/// Accuracy (percent) of a model on a test split, scored against the true
/// labels; argmax ties break to the lowest class index.
pub fn evaluate(params: &ModelParams, feat: &FeatureConfig, split: &[Sample]) -> Result<f64> {
    if split.is_empty() {
        return Err(RiclError::Empty("evaluate: test split".into()));
    }
    let mut correct = 0usize;
    for s in split {
        let x = feat.featurize(&s.tokens)?;
        let out = forward(params, &x)?;
        if out.predicted_class() == s.y_true {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / split.len() as f64)
}

/// Average performance: mean of the final row.
pub fn ap(matrix: &AccuracyMatrix) -> Result<f64> {
    let row = matrix.final_row().ok_or_else(|| {
        RiclError::InvalidArgument("ap: final accuracy row is incomplete".into())
    })?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Average forgetting: mean over tasks (except the last) of the drop from
/// immediate post-task accuracy to final accuracy. Negative values mean
/// late improvement and are not clamped.
pub fn af(matrix: &AccuracyMatrix) -> Result<f64> {
    if matrix.num_tasks() < 2 {
        return Err(RiclError::InvalidArgument(
            "af: needs at least two tasks".into(),
        ));
    }
    let final_row = matrix.final_row().ok_or_else(|| {
        RiclError::InvalidArgument("af: final accuracy row is incomplete".into())
    })?;
    let m = matrix.num_tasks();
    let mut total = 0.0;
    for i in 0..m - 1 {
        let diag = matrix.get(i, i).ok_or_else(|| {
            RiclError::InvalidArgument(format!("af: missing diagonal entry {i}"))
        })?;
        total += diag - final_row[i];
    }
    Ok(total / (m - 1) as f64)
}
