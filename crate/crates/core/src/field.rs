//! Dense, pruned and vector-quantized voxel radiance fields.
//!
//! Every per-voxel array is indexed by the linear index
//! `x + nx * (y + ny * z)`. Feature arrays are voxel-major: the `C`
//! channels of voxel 0, then voxel 1, and so on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Lattice resolution and world-space bounds of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub aabb_min: [f64; 3],
    pub aabb_max: [f64; 3],
}

impl GridDims {
    pub fn new(n: [usize; 3], aabb_min: [f64; 3], aabb_max: [f64; 3]) -> Result<Self> {
        let dims = GridDims {
            nx: n[0],
            ny: n[1],
            nz: n[2],
            aabb_min,
            aabb_max,
        };
        dims.validate()?;
        Ok(dims)
    }

    /// Cube of `n` voxels per axis spanning `[lo, hi]` on every axis.
    pub fn cube(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new([n; 3], [lo; 3], [hi; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 || self.nz < 2 {
            return Err(Error::InvalidGrid(format!(
                "every axis needs at least 2 voxels, got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        for a in 0..3 {
            let (lo, hi) = (self.aabb_min[a], self.aabb_max[a]);
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::InvalidGrid(format!("axis {a}: bounds [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    /// Total voxel count `N`.
    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.nx;
        let yz = index / self.nx;
        [x, yz % self.ny, yz / self.ny]
    }

    #[inline]
    pub fn cell_size(&self) -> [f64; 3] {
        [
            (self.aabb_max[0] - self.aabb_min[0]) / self.nx as f64,
            (self.aabb_max[1] - self.aabb_min[1]) / self.ny as f64,
            (self.aabb_max[2] - self.aabb_min[2]) / self.nz as f64,
        ]
    }

    /// Length of one voxel's diagonal in world units.
    pub fn voxel_diagonal(&self) -> f64 {
        let c = self.cell_size();
        (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
    }

    pub fn voxel_center(&self, index: usize) -> Result<[f64; 3]> {
        if index >= self.len() {
            return Err(Error::IndexOutOfGrid);
        }
        let ijk = self.coords(index);
        let cell = self.cell_size();
        Ok(std::array::from_fn(|a| {
            self.aabb_min[a] + (ijk[a] as f64 + 0.5) * cell[a]
        }))
    }

    /// Voxel whose cell contains `p`, or `None` outside the box.
    pub fn nearest_voxel(&self, p: [f64; 3]) -> Option<usize> {
        let cell = self.cell_size();
        let shape = self.shape();
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let u = (p[a] - self.aabb_min[a]) / cell[a];
            if !(0.0..=shape[a] as f64).contains(&u) {
                return None;
            }
            ijk[a] = (u.floor() as usize).min(shape[a] - 1);
        }
        Some(self.linear_index(ijk[0], ijk[1], ijk[2]))
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.aabb_min[a] && p[a] <= self.aabb_max[a])
    }
}

/// Number of feature channels for a spherical-harmonic degree: `3 (deg+1)^2`.
pub fn feature_dim(sh_degree: u8) -> usize {
    let b = sh_degree as usize + 1;
    3 * b * b
}

fn check_sh_degree(sh_degree: u8) -> Result<()> {
    if sh_degree > 2 {
        return Err(Error::InvalidArgument(format!(
            "sh_degree must be 0, 1 or 2, got {sh_degree}"
        )));
    }
    Ok(())
}

/// Uncompressed field: raw density plus SH color coefficients per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid<T> {
    pub dims: GridDims,
    pub sh_degree: u8,
    /// Raw pre-activation density, length `N`.
    pub density: Vec<T>,
    /// Voxel-major SH coefficients, length `N * C`.
    pub features: Vec<T>,
}

impl<T: Real> DenseGrid<T> {
    pub fn filled(dims: GridDims, sh_degree: u8, density: T, feature: T) -> Result<Self> {
        dims.validate()?;
        check_sh_degree(sh_degree)?;
        let n = dims.len();
        let c = feature_dim(sh_degree);
        Ok(DenseGrid {
            dims,
            sh_degree,
            density: vec![density; n],
            features: vec![feature; n * c],
        })
    }

    pub fn zeros(dims: GridDims, sh_degree: u8) -> Result<Self> {
        Self::filled(dims, sh_degree, T::zero(), T::zero())
    }

    pub fn from_parts(
        dims: GridDims,
        sh_degree: u8,
        density: Vec<T>,
        features: Vec<T>,
    ) -> Result<Self> {
        let grid = DenseGrid {
            dims,
            sh_degree,
            density,
            features,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        check_sh_degree(self.sh_degree)?;
        let n = self.dims.len();
        if self.density.len() != n || self.features.len() != n * self.feature_dim() {
            return Err(Error::InvalidGrid(format!(
                "array lengths {} / {} do not match {} voxels x {} channels",
                self.density.len(),
                self.features.len(),
                n,
                self.feature_dim()
            )));
        }
        if self.density.iter().chain(&self.features).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    #[inline]
    pub fn feature_dim(&self) -> usize {
        feature_dim(self.sh_degree)
    }

    #[inline]
    pub fn voxel_features(&self, voxel: usize) -> &[T] {
        let c = self.feature_dim();
        &self.features[voxel * c..(voxel + 1) * c]
    }

    #[inline]
    pub fn voxel_features_mut(&mut self, voxel: usize) -> &mut [T] {
        let c = self.feature_dim();
        &mut self.features[voxel * c..(voxel + 1) * c]
    }

    /// Converts to another scalar type.
    pub fn cast<U: Real>(&self) -> DenseGrid<U> {
        DenseGrid {
            dims: self.dims.clone(),
            sh_degree: self.sh_degree,
            density: self.density.iter().map(|v| U::of(v.f64())).collect(),
            features: self.features.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// Per-voxel importance accumulated from training rays.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceField<T> {
    pub scores: Vec<T>,
    pub total: T,
}

impl<T: Real> ImportanceField<T> {
    pub fn new(scores: Vec<T>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite() || *s < T::zero()) {
            return Err(Error::InvalidArgument(
                "importance scores must be finite and non-negative".into(),
            ));
        }
        let total = T::of(scores.iter().map(|s| s.f64()).sum::<f64>());
        Ok(ImportanceField { scores, total })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Voxel label after pruning and keep-threshold classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum VoxelClass {
    Pruned = 0,
    Vq = 1,
    Kept = 2,
}

impl VoxelClass {
    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            0 => Some(VoxelClass::Pruned),
            1 => Some(VoxelClass::Vq),
            2 => Some(VoxelClass::Kept),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub pruned: usize,
    pub vq: usize,
    pub kept: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.pruned + self.vq + self.kept
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelClassMask {
    pub labels: Vec<VoxelClass>,
}

impl VoxelClassMask {
    pub fn uniform(n: usize, class: VoxelClass) -> Self {
        VoxelClassMask {
            labels: vec![class; n],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        for l in &self.labels {
            match l {
                VoxelClass::Pruned => c.pruned += 1,
                VoxelClass::Vq => c.vq += 1,
                VoxelClass::Kept => c.kept += 1,
            }
        }
        c
    }

    /// Linear indices carrying `class`, ascending.
    pub fn indices_of(&self, class: VoxelClass) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// `K x C` code table with per-code capacity accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub dim: usize,
    pub codes: Vec<T>,
    pub capacity: Vec<T>,
}

impl<T: Real> Codebook<T> {
    pub fn new(dim: usize, codes: Vec<T>) -> Result<Self> {
        if dim == 0 || codes.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "code table of length {} is not a multiple of dimension {dim}",
                codes.len()
            )));
        }
        let k = codes.len() / dim;
        Ok(Codebook {
            dim,
            codes,
            capacity: vec![T::zero(); k],
        })
    }

    pub fn empty(dim: usize) -> Self {
        Codebook {
            dim,
            codes: Vec::new(),
            capacity: Vec::new(),
        }
    }

    /// Number of codes `K`.
    #[inline]
    pub fn len(&self) -> usize {
        self.capacity.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.capacity.is_empty()
    }

    #[inline]
    pub fn code(&self, k: usize) -> &[T] {
        &self.codes[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn code_mut(&mut self, k: usize) -> &mut [T] {
        &mut self.codes[k * self.dim..(k + 1) * self.dim]
    }
}

/// Compressed field: mask, codebook, frozen voxel-to-code mapping, and the
/// raw values of every voxel that is not represented by a code.
#[derive(Clone, Debug, PartialEq)]
pub struct VQModel<T> {
    pub dims: GridDims,
    pub sh_degree: u8,
    pub mask: VoxelClassMask,
    pub codebook: Codebook<T>,
    /// One code index per VQ voxel, ascending linear index.
    pub indices: Vec<u32>,
    /// Features of KEPT voxels, ascending linear index.
    pub kept_features: Vec<T>,
    /// Raw density of non-PRUNED voxels, ascending linear index.
    pub density: Vec<T>,
}

impl<T: Real> VQModel<T> {
    #[inline]
    pub fn feature_dim(&self) -> usize {
        feature_dim(self.sh_degree)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        check_sh_degree(self.sh_degree)?;
        let c = self.feature_dim();
        if self.mask.len() != self.dims.len() {
            return Err(Error::InvalidGrid("mask length differs from voxel count".into()));
        }
        if !self.codebook.is_empty() && self.codebook.dim != c {
            return Err(Error::InvalidGrid("codebook dimension differs from C".into()));
        }
        let counts = self.mask.counts();
        if self.indices.len() != counts.vq
            || self.kept_features.len() != counts.kept * c
            || self.density.len() != counts.vq + counts.kept
        {
            return Err(Error::InvalidGrid(
                "stream lengths do not match mask counts".into(),
            ));
        }
        if self.indices.iter().any(|&i| i as usize >= self.codebook.len()) {
            return Err(Error::CorruptIndexStream);
        }
        Ok(())
    }

    /// Model that stores every non-pruned voxel of `grid` verbatim.
    pub fn lossless(grid: &DenseGrid<T>, mask: &VoxelClassMask) -> Result<Self> {
        let c = grid.feature_dim();
        let mut labels = mask.labels.clone();
        for l in labels.iter_mut() {
            if *l == VoxelClass::Vq {
                *l = VoxelClass::Kept;
            }
        }
        let mut kept_features = Vec::new();
        let mut density = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            if *l == VoxelClass::Kept {
                kept_features.extend_from_slice(grid.voxel_features(i));
                density.push(grid.density[i]);
            }
        }
        Ok(VQModel {
            dims: grid.dims.clone(),
            sh_degree: grid.sh_degree,
            mask: VoxelClassMask { labels },
            codebook: Codebook::empty(c),
            indices: Vec::new(),
            kept_features,
            density,
        })
    }

    /// Decodes to a dense grid; pruned voxels become zero.
    pub fn expand(&self) -> Result<DenseGrid<T>> {
        expand_vq_model(self)
    }
}

/// World-space center of voxel `linear_index`.
pub fn voxel_center(dims: &GridDims, linear_index: usize) -> Result<[f64; 3]> {
    dims.voxel_center(linear_index)
}

/// Scatters a [`VQModel`] back into a dense grid.
pub fn expand_vq_model<T: Real>(model: &VQModel<T>) -> Result<DenseGrid<T>> {
    let c = model.feature_dim();
    let n = model.dims.len();
    if model.mask.len() != n {
        return Err(Error::InvalidGrid("mask length differs from voxel count".into()));
    }
    let mut grid = DenseGrid::zeros(model.dims.clone(), model.sh_degree)?;
    let k = model.codebook.len();
    let (mut vq_i, mut kept_i, mut dens_i) = (0usize, 0usize, 0usize);
    for (v, label) in model.mask.labels.iter().enumerate() {
        match label {
            VoxelClass::Pruned => continue,
            VoxelClass::Vq => {
                let idx = *model.indices.get(vq_i).ok_or(Error::CorruptIndexStream)? as usize;
                if idx >= k {
                    return Err(Error::CorruptIndexStream);
                }
                grid.voxel_features_mut(v)
                    .copy_from_slice(model.codebook.code(idx));
                vq_i += 1;
            }
            VoxelClass::Kept => {
                let src = model
                    .kept_features
                    .get(kept_i * c..(kept_i + 1) * c)
                    .ok_or_else(|| Error::InvalidGrid("kept feature stream too short".into()))?;
                grid.voxel_features_mut(v).copy_from_slice(src);
                kept_i += 1;
            }
        }
        grid.density[v] = *model
            .density
            .get(dens_i)
            .ok_or_else(|| Error::InvalidGrid("density stream too short".into()))?;
        dens_i += 1;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit2() -> GridDims {
        GridDims::cube(2, 0.0, 1.0).unwrap()
    }

    #[test]
    fn voxel_center_examples() {
        let d = unit2();
        assert_eq!(voxel_center(&d, 0).unwrap(), [0.25, 0.25, 0.25]);
        assert_eq!(voxel_center(&d, 7).unwrap(), [0.75, 0.75, 0.75]);
        let d = GridDims::new([4, 2, 2], [0.0; 3], [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(voxel_center(&d, 1).unwrap(), [0.75, 0.25, 0.25]);
        assert!(matches!(voxel_center(&d, 16), Err(Error::IndexOutOfGrid)));
    }

    #[test]
    fn dims_validation() {
        assert!(GridDims::new([1, 2, 2], [0.0; 3], [1.0; 3]).is_err());
        assert!(GridDims::new([2, 2, 2], [0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn center_then_nearest_is_identity() {
        let d = GridDims::new([5, 3, 4], [-1.0, 0.5, 2.0], [3.0, 1.0, 7.0]).unwrap();
        for i in 0..d.len() {
            let c = d.voxel_center(i).unwrap();
            assert_eq!(d.nearest_voxel(c), Some(i));
            assert_eq!(d.linear_index(d.coords(i)[0], d.coords(i)[1], d.coords(i)[2]), i);
        }
    }

    fn model_with(labels: Vec<VoxelClass>, k: usize, c: usize) -> VQModel<f32> {
        let dims = unit2();
        let mask = VoxelClassMask { labels };
        let counts = mask.counts();
        let codes = (0..k * c).map(|v| v as f32 * 0.5).collect();
        VQModel {
            dims,
            sh_degree: 0,
            mask,
            codebook: Codebook::new(c, codes).unwrap(),
            indices: vec![0; counts.vq],
            kept_features: vec![1.0; counts.kept * c],
            density: vec![2.0; counts.vq + counts.kept],
        }
    }

    #[test]
    fn expand_all_pruned_is_zero() {
        let m = model_with(vec![VoxelClass::Pruned; 8], 4, 3);
        let g = m.expand().unwrap();
        assert!(g.density.iter().chain(&g.features).all(|v| *v == 0.0));
    }

    #[test]
    fn expand_single_vq_voxel_reads_code_row() {
        let mut labels = vec![VoxelClass::Pruned; 8];
        labels[5] = VoxelClass::Vq;
        let mut m = model_with(labels, 4, 3);
        m.indices = vec![3];
        let g = m.expand().unwrap();
        assert_eq!(g.voxel_features(5), m.codebook.code(3));
        assert_eq!(g.density[5], 2.0);
        m.indices = vec![4];
        assert!(matches!(m.expand(), Err(Error::CorruptIndexStream)));
        assert!(matches!(m.validate(), Err(Error::CorruptIndexStream)));
    }

    #[test]
    fn lossless_model_round_trips_bit_exactly() {
        let dims = GridDims::cube(3, -1.0, 1.0).unwrap();
        let n = dims.len();
        let density: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
        let features: Vec<f32> = (0..n * 12).map(|i| (i as f32 * 0.11).cos()).collect();
        let grid = DenseGrid::from_parts(dims, 1, density, features).unwrap();
        let mask = VoxelClassMask::uniform(n, VoxelClass::Kept);
        let m = VQModel::lossless(&grid, &mask).unwrap();
        m.validate().unwrap();
        let back = m.expand().unwrap();
        assert_eq!(back, grid);
        assert_eq!(m.expand().unwrap(), back);
    }

    #[test]
    fn counts_partition() {
        let labels = [0u32, 1, 2, 2, 1, 0, 0, 2]
            .iter()
            .map(|&b| VoxelClass::from_bits(b).unwrap())
            .collect();
        let mask = VoxelClassMask { labels };
        let c = mask.counts();
        assert_eq!((c.pruned, c.vq, c.kept), (3, 2, 3));
        assert_eq!(c.total(), 8);
        assert_eq!(VoxelClass::from_bits(3), None);
    }
}
