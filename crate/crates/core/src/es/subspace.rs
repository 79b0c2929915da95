use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Residual norm, relative to the unit-normalized input, below which a
/// buffered vector is treated as dependent and dropped from the basis.
pub const DEPENDENCE_TOL: f64 = 1e-8;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Ring buffer of recent gradients and an orthonormal basis of their span.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSubspace {
    dim: usize,
    capacity: usize,
    buffer: VecDeque<Vec<f64>>,
    /// Columns of U.
    basis: Vec<Vec<f64>>,
}

impl GradientSubspace {
    pub fn new(dim: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("subspace size k must be >= 1"));
        }
        Ok(GradientSubspace {
            dim,
            capacity,
            buffer: VecDeque::with_capacity(capacity),
            basis: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn buffer(&self) -> impl Iterator<Item = &[f64]> {
        self.buffer.iter().map(Vec::as_slice)
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    /// Pushes `g` and rebuilds the basis. Zero or non-finite vectors are
    /// skipped; returns whether `g` entered the buffer.
    pub fn update(&mut self, g: &[f64]) -> Result<bool> {
        if g.len() != self.dim {
            return Err(Error::dim("subspace gradient", self.dim, g.len()));
        }
        if !g.iter().all(|x| x.is_finite()) || g.iter().all(|&x| x == 0.0) {
            return Ok(false);
        }
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(g.to_vec());
        self.rebuild();
        Ok(true)
    }

    /// Modified Gram-Schmidt with one re-orthogonalization pass.
    fn rebuild(&mut self) {
        self.basis.clear();
        for g in &self.buffer {
            let n0 = norm(g);
            let mut v: Vec<f64> = g.iter().map(|x| x / n0).collect();
            for _ in 0..2 {
                for u in &self.basis {
                    let c = dot(u, &v);
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
                }
            }
            let r = norm(&v);
            if r < DEPENDENCE_TOL {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= r);
            self.basis.push(v);
        }
    }

    /// `U Uᵀ v`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for u in &self.basis {
            let c = dot(u, v);
            out.iter_mut().zip(u).for_each(|(o, b)| *o += c * b);
        }
        out
    }

    /// `max |UᵀU - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.basis.iter().enumerate() {
            for (j, b) in self.basis.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(a, b) - target).abs());
            }
        }
        worst
    }

    /// Adds `scale * U z` to `out`.
    pub(crate) fn add_combination(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        for (u, &zi) in self.basis.iter().zip(z) {
            let c = scale * zi;
            out.iter_mut().zip(u).for_each(|(o, b)| *o += c * b);
        }
    }
}
