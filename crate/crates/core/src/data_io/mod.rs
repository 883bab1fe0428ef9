//! Datasets, MNIST ingestion and checkpoints.

pub mod checkpoint;
pub mod datasets;
pub mod mnist;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use datasets::{gen_four_spin, gen_two_spiral, SpiralFamily, FOUR_SPIN, TWO_SPIRAL};
pub use mnist::load_mnist_idx;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[M, d_in]`, one example per row.
    pub points: Tensor,
    pub name: String,
    /// Human-readable note on any scaling applied to the raw data.
    pub normalization: String,
    /// Arm index for synthetic data, digit class for MNIST.
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.numel() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Keeps the first `n` rows.
    pub fn truncate(mut self, n: usize) -> Self {
        if n < self.len() {
            let idx: Vec<usize> = (0..n).collect();
            self.points = self.points.select_rows(&idx);
            if let Some(l) = self.labels.as_mut() {
                l.truncate(n);
            }
        }
        self
    }

    /// Writes one point per row as comma-separated values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_points_csv(&self.points, path)
    }
}

pub fn write_points_csv(points: &Tensor, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..points.cols()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..points.rows() {
        let row: Vec<String> = points.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
