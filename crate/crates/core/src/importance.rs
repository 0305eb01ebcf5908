//! Voxel importance from training rays, the cumulative score rate, quantile
//! thresholds and the prune / quantize / keep classification.
//!
//! The importance of a sample is `T * alpha`, its weight in the composited
//! pixel. Each sample spreads its importance over the eight voxels of its
//! trilinear stencil with the interpolation weights.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DenseGrid, GridDims, ImportanceField, VoxelClass, VoxelClassMask};
use crate::render::{march_active, RenderConfig};
use crate::scalar::Real;
use crate::scene::Dataset;

/// Which training rays feed the importance pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum RaySelection {
    /// Every training pixel once.
    #[default]
    All,
    /// `count` pixels drawn uniformly with replacement.
    Sampled { count: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImportanceConfig {
    pub beta_p: f64,
    pub beta_k: f64,
    pub rays: RaySelection,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig {
            beta_p: 0.001,
            beta_k: 0.6,
            rays: RaySelection::All,
        }
    }
}

impl ImportanceConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta_p.is_finite()
            && self.beta_k.is_finite()
            && 0.0 <= self.beta_p
            && self.beta_p <= self.beta_k
            && self.beta_k <= 1.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "quantiles must satisfy 0 <= beta_p <= beta_k <= 1, got {} and {}",
                self.beta_p, self.beta_k
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds<T> {
    pub theta_p: T,
    pub theta_k: T,
}

/// Rays per parallel work unit.
const IMPORTANCE_CHUNK: usize = 1024;
/// Work units evaluated before their results are merged.
const CHUNKS_PER_WAVE: usize = 32;

/// Accumulates per-voxel importance over the selected training rays.
///
/// The sum is carried in `f64` and merged in a fixed order, so the result
/// does not depend on the number of worker threads.
pub fn compute_importance<T: Real>(
    grid: &DenseGrid<T>,
    dataset: &Dataset,
    render: &RenderConfig,
    rays: RaySelection,
) -> Result<ImportanceField<T>> {
    render.validate()?;
    grid.validate()?;
    if dataset.is_empty() || dataset.pixel_count() == 0 {
        return Err(Error::EmptyDataset);
    }
    let offsets: Vec<usize> = dataset
        .cameras
        .iter()
        .scan(0, |acc, c| {
            let start = *acc;
            *acc += c.width * c.height;
            Some(start)
        })
        .collect();
    let total_pixels = dataset.pixel_count();
    let pixels: Vec<usize> = match rays {
        RaySelection::All => (0..total_pixels).collect(),
        RaySelection::Sampled { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count).map(|_| rng.gen_range(0..total_pixels)).collect()
        }
    };
    let mut acc = vec![0f64; grid.dims.len()];
    for wave in pixels.chunks(IMPORTANCE_CHUNK * CHUNKS_PER_WAVE) {
        let parts: Vec<Vec<(u32, f64)>> = wave
            .par_chunks(IMPORTANCE_CHUNK)
            .map(|chunk| {
                let mut active = Vec::new();
                let mut out: Vec<(u32, f64)> = Vec::new();
                for &g in chunk {
                    let view = offsets.partition_point(|&o| o <= g) - 1;
                    let (ray, _) = dataset.sample::<T>(view, g - offsets[view]);
                    march_active(grid, &ray, render, &mut active);
                    for s in &active {
                        let imp = (s.transmittance * s.alpha).f64();
                        for k in 0..8 {
                            let w = s.stencil.weights[k].f64();
                            if w != 0.0 {
                                out.push((s.stencil.voxels[k], w * imp));
                            }
                        }
                    }
                }
                // Stable, so contributions to one voxel keep ray order.
                out.sort_by_key(|e| e.0);
                let mut merged: Vec<(u32, f64)> = Vec::with_capacity(out.len() / 4);
                for (v, x) in out {
                    match merged.last_mut() {
                        Some(last) if last.0 == v => last.1 += x,
                        _ => merged.push((v, x)),
                    }
                }
                merged
            })
            .collect();
        for part in parts {
            for (v, x) in part {
                acc[v as usize] += x;
            }
        }
    }
    ImportanceField::new(acc.into_iter().map(T::of).collect())
}

/// Scores sorted ascending with their running sums; the last prefix is the
/// total.
struct SortedScores {
    sorted: Vec<f64>,
    prefix: Vec<f64>,
}

impl SortedScores {
    fn new<T: Real>(field: &ImportanceField<T>) -> Result<Self> {
        let mut sorted: Vec<f64> = field.scores.iter().map(|s| s.f64()).collect();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut prefix = Vec::with_capacity(sorted.len());
        let mut run = 0.0;
        for s in &sorted {
            run += s;
            prefix.push(run);
        }
        if !(run > 0.0) {
            return Err(Error::DegenerateImportance);
        }
        Ok(SortedScores { sorted, prefix })
    }

    fn total(&self) -> f64 {
        *self.prefix.last().unwrap()
    }

    /// Fraction of the total carried by scores strictly below `theta`.
    fn rate(&self, theta: f64) -> f64 {
        let m = self.sorted.partition_point(|&s| s < theta);
        if m == 0 {
            0.0
        } else {
            self.prefix[m - 1] / self.total()
        }
    }

    /// Score of the first voxel whose inclusion pushes the cumulative
    /// fraction above `beta`; the maximum when no voxel does.
    fn quantile(&self, beta: f64) -> f64 {
        let total = self.total();
        let j = self.prefix.partition_point(|&p| p / total <= beta);
        self.sorted[j.min(self.sorted.len() - 1)]
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!(
            "quantile {beta} is outside [0, 1]"
        )));
    }
    Ok(())
}

/// Fraction of total importance held by voxels scoring strictly below
/// `theta`.
pub fn cumulative_score_rate<T: Real>(field: &ImportanceField<T>, theta: T) -> Result<f64> {
    Ok(SortedScores::new(field)?.rate(theta.f64()))
}

/// Discrete inverse of [`cumulative_score_rate`]: the returned `theta`
/// satisfies `F(theta) <= beta`, and `F` exceeds `beta` at the next
/// distinct score above it.
pub fn quantile_threshold<T: Real>(field: &ImportanceField<T>, beta: f64) -> Result<T> {
    check_beta(beta)?;
    Ok(T::of(SortedScores::new(field)?.quantile(beta)))
}

/// Labels voxels below `theta_p` pruned, above `theta_k` kept, and the rest
/// (including ties at either threshold) for quantization.
pub fn classify_voxels<T: Real>(
    field: &ImportanceField<T>,
    cfg: &ImportanceConfig,
) -> Result<(VoxelClassMask, Thresholds<T>)> {
    cfg.validate()?;
    let sorted = SortedScores::new(field)?;
    let theta_p = T::of(sorted.quantile(cfg.beta_p));
    let theta_k = T::of(sorted.quantile(cfg.beta_k));
    let labels = field
        .scores
        .iter()
        .map(|&s| {
            if s < theta_p {
                VoxelClass::Pruned
            } else if s > theta_k {
                VoxelClass::Kept
            } else {
                VoxelClass::Vq
            }
        })
        .collect();
    Ok((VoxelClassMask { labels }, Thresholds { theta_p, theta_k }))
}

/// Points `(x, y)` in percent: the least important `x`% of voxels hold `y`%
/// of the total importance. `steps + 1` evenly spaced values of `x`.
pub fn quantile_curve<T: Real>(field: &ImportanceField<T>, steps: usize) -> Result<Vec<(f64, f64)>> {
    let sorted = SortedScores::new(field)?;
    let n = sorted.sorted.len();
    let total = sorted.total();
    let steps = steps.max(1);
    Ok((0..=steps)
        .map(|i| {
            let m = (i * n + steps / 2) / steps;
            let y = if m == 0 { 0.0 } else { sorted.prefix[m - 1] / total };
            (100.0 * i as f64 / steps as f64, 100.0 * y)
        })
        .collect())
}

pub fn write_quantile_curve_csv<T: Real>(field: &ImportanceField<T>, path: &Path) -> Result<()> {
    let mut out = String::from("voxel_pct,importance_pct\n");
    for (x, y) in quantile_curve(field, 1000)? {
        out.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Sidecar layout: `"VQIF"`, then `nx`, `ny`, `nz` as `u32`, then one `f32`
/// per voxel in linear index order, all little-endian.
pub fn importance_to_bytes<T: Real>(field: &ImportanceField<T>, dims: &GridDims) -> Result<Vec<u8>> {
    if field.len() != dims.len() {
        return Err(Error::InvalidArgument("importance field size does not match grid".into()));
    }
    let mut out = Vec::with_capacity(16 + 4 * field.len());
    out.extend_from_slice(b"VQIF");
    for n in dims.shape() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in &field.scores {
        out.extend_from_slice(&s.f32().to_le_bytes());
    }
    Ok(out)
}

/// Parses a sidecar written by [`importance_to_bytes`]; returns the grid
/// shape alongside the field.
pub fn importance_from_bytes<T: Real>(bytes: &[u8]) -> Result<([usize; 3], ImportanceField<T>)> {
    if bytes.len() < 16 {
        return Err(Error::Truncated("VQIF header"));
    }
    if &bytes[..4] != b"VQIF" {
        return Err(Error::BadMagic { expected: "VQIF" });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    let n = shape[0] * shape[1] * shape[2];
    if bytes.len() != 16 + 4 * n {
        return Err(Error::Truncated("VQIF scores"));
    }
    let scores = bytes[16..]
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok((shape, ImportanceField::new(scores)?))
}

pub fn write_importance<T: Real>(field: &ImportanceField<T>, dims: &GridDims, path: &Path) -> Result<()> {
    std::fs::File::create(path)?.write_all(&importance_to_bytes(field, dims)?)?;
    Ok(())
}
