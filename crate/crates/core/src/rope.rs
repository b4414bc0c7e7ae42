//! Rotary position embedding at arbitrary, possibly non-contiguous coordinates.
//!
//! Dimensions are rotated in adjacent pairs `(2p, 2p + 1)`; pair `p` turns by
//! `position * theta_base^(-2p / head_dim)`. Angles and their sines/cosines
//! are evaluated in `f64` and then narrowed, so large coordinates keep full
//! `f32` accuracy.

use std::collections::BTreeMap;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{LayoutEntry, PositionMode};

pub const DEFAULT_THETA_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RopeError {
    #[error("head_dim must be even and non-zero, got {0}")]
    OddHeadDim(usize),
    #[error("theta_base must be positive, got {0}")]
    BadTheta(f64),
    #[error("vector has length {got}, expected head_dim {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    head_dim: usize,
    theta_base: f64,
}

impl RopeParams {
    pub fn new(head_dim: usize, theta_base: f64) -> Result<Self, RopeError> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(RopeError::OddHeadDim(head_dim));
        }
        if !theta_base.is_finite() || theta_base <= 0.0 {
            return Err(RopeError::BadTheta(theta_base));
        }
        Ok(Self { head_dim, theta_base })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    /// Angular frequency of each dimension pair.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.head_dim / 2)
            .map(|p| self.theta_base.powf(-2.0 * p as f64 / self.head_dim as f64))
            .collect()
    }

    fn cos_sin(&self, position: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        let pos = position as f64;
        (0..self.head_dim / 2).map(move |p| {
            let freq = self.theta_base.powf(-2.0 * p as f64 / self.head_dim as f64);
            let angle = pos * freq;
            (angle.cos(), angle.sin())
        })
    }
}

fn cast<F: Float>(x: f64) -> F {
    F::from(x).expect("float conversion")
}

fn rotate_pairs<F: Float>(v: &mut [F], cos_sin: impl Iterator<Item = (F, F)>) {
    for (pair, (c, s)) in v.chunks_exact_mut(2).zip(cos_sin) {
        let (x, y) = (pair[0], pair[1]);
        pair[0] = x * c - y * s;
        pair[1] = x * s + y * c;
    }
}

/// `R(position) v`.
pub fn rotate<F: Float>(params: &RopeParams, position: usize, v: &[F]) -> Result<Vec<F>, RopeError> {
    if v.len() != params.head_dim {
        return Err(RopeError::DimensionMismatch {
            expected: params.head_dim,
            got: v.len(),
        });
    }
    let mut out = v.to_vec();
    rotate_pairs(&mut out, params.cos_sin(position).map(|(c, s)| (cast(c), cast(s))));
    Ok(out)
}

/// Cached cosines and sines for a fixed list of coordinates.
#[derive(Debug, Clone)]
pub struct RopeTable<F> {
    half: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Float> RopeTable<F> {
    pub fn new(params: &RopeParams, coordinates: &[usize]) -> Self {
        let half = params.head_dim / 2;
        let mut cos = Vec::with_capacity(coordinates.len() * half);
        let mut sin = Vec::with_capacity(coordinates.len() * half);
        for &pos in coordinates {
            for (c, s) in params.cos_sin(pos) {
                cos.push(cast(c));
                sin.push(cast(s));
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates one head slice of row `row` forward by its coordinate.
    pub fn apply(&self, row: usize, v: &mut [F]) {
        let base = row * self.half;
        let cs = (0..self.half).map(|p| (self.cos[base + p], self.sin[base + p]));
        rotate_pairs(v, cs);
    }

    /// Applies the transpose (inverse) rotation; used to backpropagate through RoPE.
    pub fn apply_inverse(&self, row: usize, v: &mut [F]) {
        let base = row * self.half;
        let cs = (0..self.half).map(|p| (self.cos[base + p], -self.sin[base + p]));
        rotate_pairs(v, cs);
    }
}

/// Coordinate fed to RoPE for one layout entry.
///
/// Positions missing from `compact_ranks` fall back to the original
/// coordinate; a rank map built from the same selection always covers every entry.
pub fn position_for_entry(
    entry: &LayoutEntry,
    position_mode: PositionMode,
    compact_ranks: &BTreeMap<usize, usize>,
) -> usize {
    match position_mode {
        PositionMode::Preserved => entry.position,
        PositionMode::CompactRank => compact_ranks.get(&entry.position).copied().unwrap_or(entry.position),
    }
}
