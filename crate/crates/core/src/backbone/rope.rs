use ndarray::{Array2, ArrayViewMut2};

use super::ModelConfig;
use crate::Scalar;

/// Precomputed rotary angles for positions `0..max_position`.
///
/// Channel pairs `(2i, 2i+1)` of every head rotate by `pos * base^(-2i/d_head)`.
#[derive(Clone, Debug)]
pub struct RopeTable<F> {
    cos: Array2<F>,
    sin: Array2<F>,
    n_heads: usize,
    d_head: usize,
}

impl<F: Scalar> RopeTable<F> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d_head = cfg.d_head();
        let half = d_head / 2;
        let mut cos = Array2::zeros((cfg.max_position, half));
        let mut sin = Array2::zeros((cfg.max_position, half));
        for pos in 0..cfg.max_position {
            for i in 0..half {
                let freq = cfg.rope_base.powf(-(2.0 * i as f64) / d_head as f64);
                let angle = pos as f64 * freq;
                cos[[pos, i]] = F::of(angle.cos());
                sin[[pos, i]] = F::of(angle.sin());
            }
        }
        Self { cos, sin, n_heads: cfg.n_heads, d_head }
    }

    /// Rotate every row of `x` (shape `n x d_model`) by its position. With
    /// `inverse`, rotate backwards (used to pull gradients through the rotation).
    pub fn apply(&self, mut x: ArrayViewMut2<F>, positions: &[usize], inverse: bool) {
        let half = self.d_head / 2;
        for (mut row, &pos) in x.outer_iter_mut().zip(positions) {
            let cos = self.cos.row(pos);
            let sin = self.sin.row(pos);
            for h in 0..self.n_heads {
                let base = h * self.d_head;
                for i in 0..half {
                    let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                    let a = row[base + 2 * i];
                    let b = row[base + 2 * i + 1];
                    row[base + 2 * i] = a * c - b * s;
                    row[base + 2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
}
