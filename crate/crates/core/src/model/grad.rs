use serde::{Deserialize, Serialize};

use super::layout::{IndexSet, ParamId, ParamLayout};
use crate::error::{Error, Result};

/// Gradients for exactly the indices of `coverage`, one dense block per
/// coverage rectangle (row-major within the rectangle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBuffer {
    coverage: IndexSet,
    blocks: Vec<Vec<f64>>,
}

impl GradientBuffer {
    pub fn zeros(coverage: IndexSet) -> Self {
        let blocks = coverage
            .entries()
            .iter()
            .map(|(_, r)| vec![0.0; r.len()])
            .collect();
        Self { coverage, blocks }
    }

    pub fn coverage(&self) -> &IndexSet {
        &self.coverage
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.blocks
    }

    /// Number of stored gradient entries.
    pub fn len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored gradient, or `None` when `id` is outside the coverage.
    pub fn try_get(&self, layout: &ParamLayout, id: ParamId) -> Option<f64> {
        let (t, r, c) = layout.locate(id);
        self.coverage
            .entries()
            .iter()
            .zip(&self.blocks)
            .find(|((bt, rect), _)| *bt == t && rect.contains(r, c))
            .map(|((_, rect), block)| {
                block[(r - rect.rows.start) * rect.cols.len() + (c - rect.cols.start)]
            })
    }

    /// Gradient value; frozen (uncovered) indices read as zero.
    pub fn get(&self, layout: &ParamLayout, id: ParamId) -> f64 {
        self.try_get(layout, id).unwrap_or(0.0)
    }

    /// Scatter into a dense full-space vector (zeros outside coverage).
    pub fn to_dense(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut out = vec![0.0; layout.len()];
        let mut values = self.blocks.iter().flatten();
        for seg in self.coverage.flat_segments(layout) {
            for slot in &mut out[seg] {
                *slot = *values.next().expect("block sizes match coverage");
            }
        }
        out
    }

    /// `self += other`; both buffers must share the same coverage.
    pub fn add_assign(&mut self, other: &GradientBuffer) -> Result<()> {
        if self.coverage != other.coverage {
            return Err(Error::Contract(
                "gradient buffers with different coverage cannot be summed".into(),
            ));
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.blocks.iter_mut().flatten() {
            *v *= s;
        }
    }

    /// Replaces each value by `v / d`.
    pub fn divide(&mut self, d: f64) {
        for v in self.blocks.iter_mut().flatten() {
            *v /= d;
        }
    }
}
