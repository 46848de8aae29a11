use std::collections::HashSet;

use ndarray::ArrayView2;
use sha2::{Digest, Sha256};

use crate::Scalar;

/// Append-only key/value store keyed by absolute position.
///
/// Keys are stored after rotary encoding. Every layer holds the same positions
/// in the same (insertion) order.
#[derive(Clone, Debug)]
pub struct KvCache<F> {
    d_model: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    positions: Vec<usize>,
    index: HashSet<usize>,
}

impl<F: Scalar> KvCache<F> {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        Self {
            d_model,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            positions: Vec::new(),
            index: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    /// Cached positions in insertion order.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn contains(&self, position: usize) -> bool {
        self.index.contains(&position)
    }

    /// `len x d_model` keys of one layer.
    pub fn keys(&self, layer: usize) -> ArrayView2<'_, F> {
        ArrayView2::from_shape((self.len(), self.d_model), &self.keys[layer]).expect("rows are d_model wide")
    }

    pub fn values(&self, layer: usize) -> ArrayView2<'_, F> {
        ArrayView2::from_shape((self.len(), self.d_model), &self.values[layer]).expect("rows are d_model wide")
    }

    /// `(position, key, value)` of every entry of one layer.
    pub fn entries(&self, layer: usize) -> impl Iterator<Item = (usize, &[F], &[F])> + '_ {
        let d = self.d_model;
        self.positions
            .iter()
            .enumerate()
            .map(move |(i, &p)| (p, &self.keys[layer][i * d..(i + 1) * d], &self.values[layer][i * d..(i + 1) * d]))
    }

    /// SHA-256 over the positions and the f64 image of all keys and values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &p in &self.positions {
            h.update((p as u64).to_le_bytes());
        }
        for (k, v) in self.keys.iter().zip(&self.values) {
            for x in k.iter().chain(v) {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Per-entry checksum, so tests can check single entries never change.
    pub fn entry_checksum(&self, position: usize) -> Option<String> {
        let i = self.positions.iter().position(|&p| p == position)?;
        let d = self.d_model;
        let mut h = Sha256::new();
        for layer in 0..self.n_layers() {
            for x in self.keys[layer][i * d..(i + 1) * d].iter().chain(&self.values[layer][i * d..(i + 1) * d]) {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        Some(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub(crate) fn reserve_positions(&mut self, positions: &[usize]) {
        for &p in positions {
            self.index.insert(p);
            self.positions.push(p);
        }
    }

    /// Append rows for positions already registered with `reserve_positions`.
    pub(crate) fn append_layer(&mut self, layer: usize, keys: ArrayView2<F>, values: ArrayView2<F>) {
        self.keys[layer].extend(keys.iter().copied());
        self.values[layer].extend(values.iter().copied());
    }
}
