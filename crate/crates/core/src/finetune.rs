//! Joint finetuning of a quantized model with its voxel-to-code mapping
//! frozen.
//!
//! Tuned parameters are the codebook, the density of every non-pruned voxel
//! and the features of kept voxels. A quantized voxel reads its features
//! straight from its code, so a code's gradient is the sum over the voxels
//! that share it; the applied step uses the mean over those voxels.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{feature_dim, GridDims, VQModel, VoxelClass, VoxelClassMask};
use crate::image::psnr_from_mse;
use crate::optim::{batch_mse_gradients, decayed_lr, Optimizer, OptimizerKind, SparseRows};
use crate::render::{RenderConfig, VoxelSource};
use crate::scalar::Real;
use crate::scene::{sample_batch, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    /// Iterations between code updates.
    pub sync_interval: usize,
    pub lr_density: f64,
    pub lr_features: f64,
    pub lr_codes: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub step_size: f64,
    pub early_stop_t: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iterations: 10_000,
            rays_per_batch: 8192,
            sync_interval: 1,
            lr_density: 0.1 * 0.3,
            lr_features: 0.02 * 0.3,
            lr_codes: 0.02 * 0.3,
            lr_decay: 0.3,
            lr_decay_every: 1000,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            step_size: 0.5,
            early_stop_t: 1e-4,
        }
    }
}

impl FinetuneConfig {
    /// Defaults scaled for the bundled toy scene.
    pub fn toy() -> Self {
        FinetuneConfig {
            iterations: 2000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_density, self.lr_features, self.lr_codes];
        if self.rays_per_batch == 0
            || self.sync_interval == 0
            || lrs.iter().any(|l| !(*l >= 0.0 && l.is_finite()))
            || !(self.lr_decay > 0.0)
            || self.lr_decay_every == 0
        {
            return Err(Error::InvalidArgument("invalid finetune configuration".into()));
        }
        Ok(())
    }

    pub fn render_config(&self, background: [f64; 3]) -> RenderConfig {
        RenderConfig {
            step_size: self.step_size,
            early_stop_t: self.early_stop_t,
            background,
        }
    }
}

/// Where a voxel reads its features from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Empty,
    Code(u32),
    Kept(u32),
}

/// Dense read view of a [`VQModel`]'s parameters without expanding
/// features: quantized voxels point at their code row.
struct VqView<'a, T> {
    dims: &'a GridDims,
    sh_degree: u8,
    c: usize,
    slots: &'a [Slot],
    density: &'a [T],
    codes: &'a [T],
    kept: &'a [T],
    zeros: Vec<T>,
}

impl<T: Real> VoxelSource<T> for VqView<'_, T> {
    fn dims(&self) -> &GridDims {
        self.dims
    }

    fn sh_degree(&self) -> u8 {
        self.sh_degree
    }

    #[inline]
    fn density(&self, voxel: usize) -> T {
        self.density[voxel]
    }

    #[inline]
    fn features(&self, voxel: usize) -> &[T] {
        let c = self.c;
        match self.slots[voxel] {
            Slot::Empty => &self.zeros,
            Slot::Code(k) => &self.codes[k as usize * c..(k as usize + 1) * c],
            Slot::Kept(i) => &self.kept[i as usize * c..(i as usize + 1) * c],
        }
    }
}

fn slots(mask: &VoxelClassMask, indices: &[u32]) -> Vec<Slot> {
    let (mut q, mut k) = (0usize, 0u32);
    mask.labels
        .iter()
        .map(|l| match l {
            VoxelClass::Pruned => Slot::Empty,
            VoxelClass::Vq => {
                q += 1;
                Slot::Code(indices[q - 1])
            }
            VoxelClass::Kept => {
                k += 1;
                Slot::Kept(k - 1)
            }
        })
        .collect()
}

/// Sums per-voxel feature gradients into their codes. Entries for voxels
/// that are not quantized are ignored, and a voxel listed more than once is
/// counted once. Returns the per-code sums (`K x C`) and the number of
/// distinct contributing voxels per code.
pub fn scatter_code_gradients<T: Real>(
    grads: &[(usize, &[T])],
    indices: &[u32],
    mask: &VoxelClassMask,
    codebook_size: usize,
) -> Result<(Vec<T>, Vec<u32>)> {
    let c = grads.first().map_or(0, |g| g.1.len());
    let mut ordinal = vec![u32::MAX; mask.len()];
    let mut q = 0u32;
    for (v, l) in mask.labels.iter().enumerate() {
        if *l == VoxelClass::Vq {
            ordinal[v] = q;
            q += 1;
        }
    }
    if q as usize != indices.len() {
        return Err(Error::InvalidArgument("index stream does not match mask".into()));
    }
    let mut sums = vec![T::zero(); codebook_size * c];
    let mut counts = vec![0u32; codebook_size];
    let mut seen = vec![false; indices.len()];
    for &(v, g) in grads {
        let o = *ordinal.get(v).ok_or(Error::IndexOutOfGrid)?;
        if o == u32::MAX {
            continue;
        }
        let k = indices[o as usize] as usize;
        if k >= codebook_size {
            return Err(Error::CorruptIndexStream);
        }
        if !seen[o as usize] {
            seen[o as usize] = true;
            counts[k] += 1;
        }
        for (s, x) in sums[k * c..(k + 1) * c].iter_mut().zip(g) {
            *s += *x;
        }
    }
    Ok((sums, counts))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub iteration: usize,
    pub loss: f64,
    pub train_psnr: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult<T> {
    pub model: VQModel<T>,
    pub progress: Vec<FinetuneRecord>,
}

/// Tunes codes, non-pruned densities and kept features on random ray
/// batches. Mask and indices are left untouched.
pub fn joint_finetune<T: Real>(
    model: &VQModel<T>,
    dataset: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneResult<T>> {
    cfg.validate()?;
    model.validate()?;
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = model.dims.len();
    let c = feature_dim(model.sh_degree);
    let k = model.codebook.len();
    let slots = slots(&model.mask, &model.indices);
    let n_kept = model.mask.counts().kept;

    let mut density = vec![T::zero(); n];
    let mut d = model.density.iter();
    for (v, s) in slots.iter().enumerate() {
        if *s != Slot::Empty {
            density[v] = *d.next().unwrap();
        }
    }
    let mut codes = model.codebook.codes.clone();
    let mut kept = model.kept_features.clone();

    let render_cfg = cfg.render_config(dataset.background);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g_density = SparseRows::<T>::new(n, 1);
    let mut g_voxel = SparseRows::<T>::new(n, c);
    let mut g_kept = SparseRows::<T>::new(n_kept, c);
    let mut g_code = SparseRows::<T>::new(k, c);
    let mut window: Vec<(usize, Vec<T>)> = Vec::new();
    let mut opt_density = Optimizer::new(cfg.optimizer, n);
    let mut opt_kept = Optimizer::new(cfg.optimizer, n_kept * c);
    let mut opt_code = Optimizer::new(cfg.optimizer, k * c);
    let mut progress = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let batch = sample_batch::<T>(dataset, &mut rng, cfg.rays_per_batch);
        let view = VqView {
            dims: &model.dims,
            sh_degree: model.sh_degree,
            c,
            slots: &slots,
            density: &density,
            codes: &codes,
            kept: &kept,
            zeros: vec![T::zero(); c],
        };
        let bg = batch_mse_gradients(&view, &batch, &render_cfg);
        let loss = bg.sse / (3.0 * batch.len() as f64);
        if !loss.is_finite() {
            return Err(Error::FinetuneDiverged);
        }
        progress.push(FinetuneRecord {
            iteration: it,
            loss,
            train_psnr: psnr_from_mse(loss),
        });
        for chunk in &bg.chunks {
            for s in chunk {
                for j in 0..8 {
                    let w = s.stencil.weights[j];
                    if w == T::zero() {
                        continue;
                    }
                    let v = s.stencil.voxels[j] as usize;
                    if slots[v] == Slot::Empty {
                        continue;
                    }
                    g_density.row_mut(v)[0] += w * s.d_density;
                    for (r, x) in g_voxel.row_mut(v).iter_mut().zip(&s.d_coeffs[..c]) {
                        *r += w * *x;
                    }
                }
            }
        }
        for &v in g_voxel.touched() {
            let v = v as usize;
            match slots[v] {
                Slot::Kept(i) => g_kept.row_mut(i as usize).copy_from_slice(g_voxel.row(v)),
                Slot::Code(_) => window.push((v, g_voxel.row(v).to_vec())),
                Slot::Empty => {}
            }
        }
        let lr = |base| decayed_lr(base, cfg.lr_decay, cfg.lr_decay_every, it);
        opt_density.apply(&mut density, &g_density, lr(cfg.lr_density));
        opt_kept.apply(&mut kept, &g_kept, lr(cfg.lr_features));
        g_density.clear();
        g_voxel.clear();
        g_kept.clear();
        if (it + 1) % cfg.sync_interval == 0 || it + 1 == cfg.iterations {
            apply_code_step(&window, model, k, &mut g_code)?;
            opt_code.apply(&mut codes, &g_code, lr(cfg.lr_codes));
            g_code.clear();
            window.clear();
        }
    }

    if density.iter().chain(&codes).chain(&kept).any(|v| !v.is_finite()) {
        return Err(Error::FinetuneDiverged);
    }
    let mut out = model.clone();
    out.codebook.codes = codes;
    out.kept_features = kept;
    out.density = slots
        .iter()
        .zip(&density)
        .filter(|(s, _)| **s != Slot::Empty)
        .map(|(_, d)| *d)
        .collect();
    Ok(FinetuneResult {
        model: out,
        progress,
    })
}

/// Loads the mean code gradients of one sync window into `g_code`.
fn apply_code_step<T: Real>(
    window: &[(usize, Vec<T>)],
    model: &VQModel<T>,
    k: usize,
    g_code: &mut SparseRows<T>,
) -> Result<()> {
    if window.is_empty() {
        return Ok(());
    }
    let refs: Vec<(usize, &[T])> = window.iter().map(|(v, g)| (*v, g.as_slice())).collect();
    let (sums, counts) = scatter_code_gradients(&refs, &model.indices, &model.mask, k)?;
    let c = g_code.width();
    for (j, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let inv = T::one() / T::of(n as f64);
        for (r, s) in g_code.row_mut(j).iter_mut().zip(&sums[j * c..(j + 1) * c]) {
            *r = *s * inv;
        }
    }
    Ok(())
}

pub fn write_progress_csv(progress: &[FinetuneRecord], path: &Path) -> Result<()> {
    let mut out = String::from("iteration,loss,train_psnr\n");
    for r in progress {
        out.push_str(&format!("{},{},{}\n", r.iteration, r.loss, r.train_psnr));
    }
    std::fs::write(path, out)?;
    Ok(())
}
