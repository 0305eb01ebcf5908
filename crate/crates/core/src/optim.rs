//! Row-sparse gradient buffers and first-order optimizers.
//!
//! A ray batch touches a small fraction of the voxels, so gradients are
//! kept in dense buffers with a list of touched rows, and only touched rows
//! are updated.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::render::{forward_backward, Ray, RenderConfig, SampleGrad, VoxelSource};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent, `p -= lr * g`.
    Sgd,
    /// Adam with lazy (touched-rows-only) moment updates.
    #[default]
    Adam,
}

/// Dense gradient storage with touched-row bookkeeping.
#[derive(Clone, Debug)]
pub struct SparseRows<T> {
    width: usize,
    values: Vec<T>,
    touched: Vec<u32>,
    mark: Vec<bool>,
}

impl<T: Real> SparseRows<T> {
    pub fn new(rows: usize, width: usize) -> Self {
        SparseRows {
            width,
            values: vec![T::zero(); rows * width],
            touched: Vec::new(),
            mark: vec![false; rows],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [T] {
        if !self.mark[row] {
            self.mark[row] = true;
            self.touched.push(row as u32);
        }
        &mut self.values[row * self.width..(row + 1) * self.width]
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[T] {
        &self.values[row * self.width..(row + 1) * self.width]
    }

    /// Touched rows in first-touch order.
    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    pub fn clear(&mut self) {
        for &r in &self.touched {
            let r = r as usize;
            self.mark[r] = false;
            self.values[r * self.width..(r + 1) * self.width]
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
        self.touched.clear();
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.99;
const EPS: f64 = 1e-10;

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { len } else { 0 };
        Optimizer {
            kind,
            m: vec![T::zero(); state],
            v: vec![T::zero(); state],
            step: 0,
        }
    }

    /// Applies one update to every touched row of `grads`.
    pub fn apply(&mut self, params: &mut [T], grads: &SparseRows<T>, lr: f64) {
        self.step += 1;
        let w = grads.width;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = T::of(lr);
                for &r in grads.touched() {
                    let r = r as usize;
                    for j in r * w..(r + 1) * w {
                        params[j] -= lr * grads.values[j];
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::of(BETA1);
                let b2 = T::of(BETA2);
                let t = self.step as i32;
                let c1 = T::of(1.0 - BETA1.powi(t));
                let c2 = T::of(1.0 - BETA2.powi(t));
                let lr = T::of(lr);
                let eps = T::of(EPS);
                for &r in grads.touched() {
                    let r = r as usize;
                    for j in r * w..(r + 1) * w {
                        let g = grads.values[j];
                        let m = b1 * self.m[j] + (T::one() - b1) * g;
                        let v = b2 * self.v[j] + (T::one() - b2) * g * g;
                        self.m[j] = m;
                        self.v[j] = v;
                        params[j] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Exponential schedule: `lr * decay^(iteration / every)`.
pub fn decayed_lr(lr: f64, decay: f64, every: usize, iteration: usize) -> f64 {
    lr * decay.powf(iteration as f64 / every.max(1) as f64)
}

/// Rays per work unit. Fixed so that reductions do not depend on the
/// number of worker threads.
pub(crate) const RAY_CHUNK: usize = 128;

pub(crate) struct BatchGrad<T> {
    /// Per-chunk sample gradients, in chunk order.
    pub chunks: Vec<Vec<SampleGrad<T>>>,
    /// Sum of squared errors over rays and channels.
    pub sse: f64,
}

/// Forward/backward over a batch of `(ray, target)` pairs for the mean
/// squared error over rays and channels.
pub(crate) fn batch_mse_gradients<T: Real, S: VoxelSource<T> + ?Sized>(
    src: &S,
    batch: &[(Ray<T>, [T; 3])],
    cfg: &RenderConfig,
) -> BatchGrad<T> {
    let scale = T::of(2.0 / (3.0 * batch.len().max(1) as f64));
    let parts: Vec<(Vec<SampleGrad<T>>, f64)> = batch
        .par_chunks(RAY_CHUNK)
        .map(|chunk| {
            let mut scratch = Vec::new();
            let mut out = Vec::new();
            let mut sse = 0.0f64;
            for (ray, target) in chunk {
                forward_backward(
                    src,
                    ray,
                    cfg,
                    |px| {
                        let mut g = [T::zero(); 3];
                        for c in 0..3 {
                            let d = px[c] - target[c];
                            sse += d.f64() * d.f64();
                            g[c] = scale * d;
                        }
                        g
                    },
                    &mut scratch,
                    &mut out,
                );
            }
            (out, sse)
        })
        .collect();
    let mut sse = 0.0;
    let mut chunks = Vec::with_capacity(parts.len());
    for (c, s) in parts {
        sse += s;
        chunks.push(c);
    }
    BatchGrad { chunks, sse }
}
