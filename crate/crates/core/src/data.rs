//! Observation batches and per-task train/validation splits.

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// A batch of observations.
///
/// Density-estimation tasks store one observation vector per row of `x`
/// and leave `y` empty. Regression tasks store inputs in `x` (one row per
/// point) and targets in `y`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub x: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub y: Vec<f64>,
}

impl Batch {
    pub fn unlabelled(x: Vec<Vec<f64>>) -> Self {
        Self { x, y: Vec::new() }
    }

    /// Scalar-input regression batch.
    pub fn regression(xs: &[f64], ys: &[f64]) -> Self {
        assert_eq!(xs.len(), ys.len());
        Self {
            x: xs.iter().map(|&v| vec![v]).collect(),
            y: ys.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Concatenation of two batches.
    pub fn concat(&self, other: &Batch) -> Batch {
        let mut x = self.x.clone();
        x.extend(other.x.iter().cloned());
        let mut y = self.y.clone();
        y.extend(other.y.iter().copied());
        Batch { x, y }
    }
}

/// One task's data, split into a training and a validation part.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub train: Batch,
    pub val: Batch,
}

impl TaskData {
    pub fn new(train: Batch, val: Batch) -> Self {
        Self { train, val }
    }

    /// Both splits merged, train first.
    pub fn full(&self) -> Batch {
        self.train.concat(&self.val)
    }
}

pub fn tasks_to_json(tasks: &[TaskData]) -> Result<String> {
    Ok(serde_json::to_string(tasks)?)
}

pub fn tasks_from_json(s: &str) -> Result<Vec<TaskData>> {
    Ok(serde_json::from_str(s)?)
}
