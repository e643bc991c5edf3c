use std::sync::Arc;

use crate::codec::Stream;
use crate::tensor::{Checkpoint, Scalar, Tensor};

use super::ModelError;

/// Cached layer inputs of the previous segments, per stream and layer.
/// Values only: nothing here is ever differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamMemory<T> {
    d_model: usize,
    rows: usize,
    layers: Vec<Vec<Arc<Tensor<T>>>>,
}

impl<T: Scalar> StreamMemory<T> {
    pub fn empty(n_layers: usize, d_model: usize) -> Self {
        let blank = Arc::new(Tensor::zeros(&[0, d_model]));
        Self {
            d_model,
            rows: 0,
            layers: (0..4).map(|_| vec![Arc::clone(&blank); n_layers]).collect(),
        }
    }

    /// Cached positions per layer.
    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn n_layers(&self) -> usize {
        self.layers[0].len()
    }

    /// Number of stored scalars across all streams and layers.
    pub fn live_elements(&self) -> usize {
        self.layers.iter().flatten().map(|t| t.len()).sum()
    }

    pub fn layer(&self, s: Stream, n: usize) -> Option<Arc<Tensor<T>>> {
        self.layers[s.index()].get(n).cloned()
    }

    pub(super) fn check(&self, n_layers: usize, d_model: usize) -> Result<(), ModelError> {
        if self.n_layers() != n_layers || self.d_model != d_model {
            return Err(ModelError::Input(format!(
                "memory has {} layers of width {}, model expects {n_layers} of width {d_model}",
                self.n_layers(),
                self.d_model
            )));
        }
        Ok(())
    }

    /// Appends this segment's layer inputs and keeps the newest `mem_len` rows.
    pub(super) fn advanced(&self, inputs: &[Vec<Arc<Tensor<T>>>; 4], mem_len: usize) -> Result<Self, ModelError> {
        let mut layers = Vec::with_capacity(4);
        let mut rows = 0;
        for (old, new) in self.layers.iter().zip(inputs) {
            let mut per_layer = Vec::with_capacity(old.len());
            for (o, n) in old.iter().zip(new) {
                let joined = Tensor::concat_rows(&[o, n])?;
                let keep = joined.rows().min(mem_len);
                rows = keep;
                per_layer.push(Arc::new(joined.slice_rows(joined.rows() - keep, joined.rows())));
            }
            layers.push(per_layer);
        }
        Ok(Self {
            d_model: self.d_model,
            rows,
            layers,
        })
    }

    /// Appends tensors named `{prefix}{stream}.layer{n}` to `ck`.
    pub fn save_into(&self, ck: &mut Checkpoint<T>, prefix: &str) {
        for s in Stream::ALL {
            for (n, t) in self.layers[s.index()].iter().enumerate() {
                ck.push(format!("{prefix}{}.layer{n}", s.name()), (**t).clone());
            }
        }
    }

    pub fn load_from(ck: &Checkpoint<T>, prefix: &str, n_layers: usize, d_model: usize) -> Result<Self, ModelError> {
        let mut layers = Vec::with_capacity(4);
        let mut rows = None;
        for s in Stream::ALL {
            let mut per_layer = Vec::with_capacity(n_layers);
            for n in 0..n_layers {
                let t = ck.get(&format!("{prefix}{}.layer{n}", s.name()))?;
                if t.shape().len() != 2 || t.cols() != d_model || rows.is_some_and(|r| r != t.rows()) {
                    return Err(ModelError::Config(format!(
                        "memory tensor {prefix}{}.layer{n} has shape {:?}",
                        s.name(),
                        t.shape()
                    )));
                }
                rows = Some(t.rows());
                per_layer.push(Arc::new(t.clone()));
            }
            layers.push(per_layer);
        }
        Ok(Self {
            d_model,
            rows: rows.unwrap_or(0),
            layers,
        })
    }
}
