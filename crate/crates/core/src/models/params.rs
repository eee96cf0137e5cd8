use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Describes how a flat parameter vector maps onto a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ParamLayout {
    /// Row-major `rows x cols` matrix.
    Linear { rows: usize, cols: usize },
    /// Per layer: `channels * 9` filter taps followed by `log(lambda)`.
    Pdnet {
        layers: usize,
        channels: usize,
        tau: f64,
        gamma: f64,
    },
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        match *self {
            ParamLayout::Linear { rows, cols } => rows * cols,
            ParamLayout::Pdnet { layers, channels, .. } => layers * (channels * 9 + 1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when two layouts describe the same trainable shapes.
    pub fn compatible(&self, other: &ParamLayout) -> bool {
        match (self, other) {
            (ParamLayout::Linear { rows, cols }, ParamLayout::Linear { rows: r2, cols: c2 }) => {
                rows == r2 && cols == c2
            }
            (
                ParamLayout::Pdnet { layers, channels, .. },
                ParamLayout::Pdnet {
                    layers: l2,
                    channels: c2,
                    ..
                },
            ) => layers == l2 && channels == c2,
            _ => false,
        }
    }
}

/// Flat view of every trainable parameter of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: ParamLayout,
}

impl ParamVector {
    pub fn new(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape(format!(
                "layout expects {} parameters, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.values)
    }

    pub fn ensure_compatible(&self, other: &ParamVector) -> Result<()> {
        if !self.layout.compatible(&other.layout) {
            return Err(Error::shape(format!(
                "parameter layouts differ: {:?} vs {:?}",
                self.layout, other.layout
            )));
        }
        Ok(())
    }

    /// Stable fingerprint of the values and layout.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in &self.values {
            v.to_bits().hash(&mut h);
        }
        format!("{:?}", self.layout).hash(&mut h);
        h.finish()
    }
}
