//! Importance-weighted vector quantization of voxel features.
//!
//! The codebook is learned by mini-batch weighted clustering: each round
//! assigns a uniformly sampled batch to its nearest codes, moves every code
//! towards the importance-weighted mean of its cluster with an exponential
//! moving average, and re-seeds the least used codes from the most
//! important voxels of the batch.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Codebook, DenseGrid, ImportanceField, VQModel, VoxelClass, VoxelClassMask};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VQConfig {
    /// Codebook size `K`.
    pub codebook_size: usize,
    pub init_iters: usize,
    pub batch_voxels: usize,
    /// Moving-average decay.
    pub lambda_d: f64,
    /// Codes re-seeded per round.
    pub expire_j: usize,
    pub seeding: Seeding,
    /// Independent runs; the one with the lowest weighted objective wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for VQConfig {
    fn default() -> Self {
        VQConfig {
            codebook_size: 4096,
            init_iters: 100,
            batch_voxels: 10_000,
            lambda_d: 0.8,
            expire_j: 10,
            seeding: Seeding::default(),
            restarts: 6,
            seed: 0,
        }
    }
}

impl VQConfig {
    /// Defaults scaled for the bundled toy scene.
    pub fn toy() -> Self {
        VQConfig {
            codebook_size: 256,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::InvalidArgument("codebook size must be at least 2".into()));
        }
        if self.expire_j >= self.codebook_size {
            return Err(Error::InvalidArgument(
                "expired codes per round must be fewer than the codebook size".into(),
            ));
        }
        if !(self.lambda_d >= 0.0 && self.lambda_d < 1.0) {
            return Err(Error::InvalidArgument("lambda_d must lie in [0, 1)".into()));
        }
        if self.batch_voxels == 0 {
            return Err(Error::InvalidArgument("batch must hold at least one voxel".into()));
        }
        Ok(())
    }
}

/// Storage ratio of `N` raw `C`-dimensional 16-bit features over `N`
/// `log2(K)`-bit indices plus a 16-bit `K x C` codebook.
pub fn compression_rate(n: f64, c: f64, k: f64) -> f64 {
    16.0 * n * c / (n * k.log2() + 16.0 * k * c)
}

/// Limit of [`compression_rate`] as `N` grows.
pub fn asymptotic_compression_rate(c: f64, k: f64) -> f64 {
    16.0 * c / k.log2()
}

#[inline]
fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

#[inline]
fn nearest<T: Real>(u: &[T], book: &Codebook<T>) -> (u32, T) {
    let mut best = 0u32;
    let mut best_d = sq_dist(u, book.code(0));
    for k in 1..book.len() {
        let d = sq_dist(u, book.code(k));
        if d < best_d {
            best_d = d;
            best = k as u32;
        }
    }
    (best, best_d)
}

/// Nearest code of every row of `features` (row-major, `codebook.dim`
/// wide). Ties go to the lower code index.
pub fn assign<T: Real>(features: &[T], codebook: &Codebook<T>) -> Result<Vec<u32>> {
    if codebook.is_empty() {
        return Err(Error::EmptyCodebook);
    }
    let c = codebook.dim;
    if features.len() % c != 0 {
        return Err(Error::InvalidArgument("feature rows do not match codebook dimension".into()));
    }
    Ok(features
        .par_chunks(c)
        .with_min_len(256)
        .map(|u| nearest(u, codebook).0)
        .collect())
}

/// Objective `sum_j I_j * min_k |u_j - b_k|^2`.
pub fn weighted_wcss<T: Real>(features: &[T], importance: &[T], codebook: &Codebook<T>) -> f64 {
    if codebook.is_empty() {
        return 0.0;
    }
    let c = codebook.dim;
    let parts: Vec<f64> = features
        .par_chunks(c * 256)
        .zip(importance.par_chunks(256))
        .map(|(rows, imp)| {
            rows.chunks_exact(c)
                .zip(imp)
                .map(|(u, w)| w.f64() * nearest(u, codebook).1.f64())
                .sum()
        })
        .collect();
    parts.iter().sum()
}

/// Moves each code with a non-empty cluster to
/// `lambda * b + (1 - lambda) * weighted_mean(cluster)` and decays every
/// capacity to `lambda * s + (1 - lambda) * cluster_importance`. Clusters
/// whose importance sums to zero leave their code untouched.
pub fn ema_update<T: Real>(
    codebook: &mut Codebook<T>,
    features: &[T],
    importance: &[T],
    assignments: &[u32],
    lambda_d: f64,
) {
    let c = codebook.dim;
    let k = codebook.len();
    let mut sums = vec![0f64; k * c];
    let mut weights = vec![0f64; k];
    for ((u, w), &a) in features.chunks_exact(c).zip(importance).zip(assignments) {
        let a = a as usize;
        let w = w.f64();
        weights[a] += w;
        for (s, x) in sums[a * c..(a + 1) * c].iter_mut().zip(u) {
            *s += w * x.f64();
        }
    }
    let keep = lambda_d;
    for j in 0..k {
        let cap = &mut codebook.capacity[j];
        *cap = T::of(keep * cap.f64() + (1.0 - keep) * weights[j]);
        if weights[j] > 0.0 {
            let inv = 1.0 / weights[j];
            let sums = &sums[j * c..(j + 1) * c];
            for (b, s) in codebook.code_mut(j).iter_mut().zip(sums) {
                *b = T::of(keep * b.f64() + (1.0 - keep) * s * inv);
            }
        }
    }
}

/// Overwrites the `j` lowest-capacity codes with the features of the `j`
/// most important rows of the batch. The least used code receives the most
/// important row; ties go to the lower code index and the lower row.
/// `distinct` optionally names the source voxel of each row so that a voxel
/// drawn twice is used once.
pub fn expire_codes<T: Real>(
    codebook: &mut Codebook<T>,
    features: &[T],
    importance: &[T],
    j: usize,
    distinct: Option<&[usize]>,
) {
    if j == 0 || codebook.is_empty() {
        return;
    }
    let c = codebook.dim;
    let mut codes: Vec<usize> = (0..codebook.len()).collect();
    codes.sort_by(|&a, &b| {
        codebook.capacity[a]
            .partial_cmp(&codebook.capacity[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut rows: Vec<usize> = (0..importance.len()).collect();
    rows.sort_by(|&a, &b| {
        importance[b]
            .partial_cmp(&importance[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    if let Some(ids) = distinct {
        let mut seen = std::collections::HashSet::new();
        rows.retain(|&r| seen.insert(ids[r]));
    }
    for (&code, &row) in codes.iter().zip(&rows).take(j) {
        codebook
            .code_mut(code)
            .copy_from_slice(&features[row * c..(row + 1) * c]);
        codebook.capacity[code] = importance[row];
    }
}

/// How the initial `K` codes are drawn from the population.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Seeding {
    /// Probability proportional to importance.
    Importance,
    /// First code by importance, each further code with probability
    /// proportional to importance times the squared distance to the nearest
    /// code drawn so far.
    #[default]
    ImportanceDistance,
}

/// Draws `k` codes without replacement over distinct feature vectors. Rows
/// sharing a feature vector pool their importance. Once no remaining vector
/// carries weight the rest are drawn uniformly, and duplicates fill in only
/// when the population has fewer than `k` distinct vectors.
fn seed_codes<T: Real>(
    features: &[T],
    importance: &[T],
    dim: usize,
    k: usize,
    seeding: Seeding,
    rng: &mut ChaCha8Rng,
) -> Vec<T> {
    let mut groups: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut reps: Vec<usize> = Vec::new();
    let mut weight: Vec<f64> = Vec::new();
    for (r, (u, w)) in features.chunks_exact(dim).zip(importance).enumerate() {
        let key: Vec<u64> = u.iter().map(|x| x.f64().to_bits()).collect();
        let g = *groups.entry(key).or_insert_with(|| {
            reps.push(r);
            weight.push(0.0);
            reps.len() - 1
        });
        weight[g] += w.f64();
    }
    let order = match seeding {
        Seeding::Importance => exponential_key_order(&weight, rng),
        Seeding::ImportanceDistance => distance_order(features, dim, &reps, &weight, k, rng),
    };
    let mut codes = Vec::with_capacity(k * dim);
    for i in 0..k {
        let r = reps[order[i % order.len()]];
        codes.extend_from_slice(&features[r * dim..(r + 1) * dim]);
    }
    codes
}

/// Weighted sampling without replacement by exponential keys; zero-weight
/// entries rank after every weighted one, in uniform random order.
fn exponential_key_order(weight: &[f64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut keyed: Vec<(bool, f64, usize)> = weight
        .iter()
        .enumerate()
        .map(|(g, &w)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            if w > 0.0 {
                (false, -u.ln() / w, g)
            } else {
                (true, u, g)
            }
        })
        .collect();
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.partial_cmp(&b.1).unwrap())
            .then(a.2.cmp(&b.2))
    });
    keyed.into_iter().map(|e| e.2).collect()
}

/// Draws `k` distinct groups: the first by weight, each further one from a
/// few candidates drawn with probability proportional to weight times
/// squared distance to the nearest group already drawn, keeping the
/// candidate that lowers the weighted objective most.
fn distance_order<T: Real>(
    features: &[T],
    dim: usize,
    reps: &[usize],
    weight: &[f64],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let g = reps.len();
    let row = |i: usize| &features[reps[i] * dim..(reps[i] + 1) * dim];
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut d2 = vec![f64::INFINITY; g];
    let mut taken = vec![false; g];
    let mut order = Vec::with_capacity(k.min(g));
    while order.len() < k.min(g) {
        let first = order.is_empty();
        let score: Vec<f64> = (0..g)
            .map(|i| {
                if taken[i] {
                    0.0
                } else if first {
                    weight[i]
                } else {
                    weight[i] * d2[i]
                }
            })
            .collect();
        let total: f64 = score.iter().sum();
        let candidates: Vec<usize> = if total > 0.0 {
            let n = if first { 1 } else { trials };
            (0..n).map(|_| draw(&score, total, rng)).collect()
        } else {
            let free: Vec<usize> = (0..g).filter(|&i| !taken[i]).collect();
            vec![free[rng.gen_range(0..free.len())]]
        };
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for &c in &candidates {
            let p = row(c);
            let next: Vec<f64> = d2
                .par_iter()
                .enumerate()
                .with_min_len(1024)
                .map(|(i, &d)| d.min(sq_dist(row(i), p).f64()))
                .collect();
            let cost: f64 = next.iter().zip(weight).map(|(d, w)| d * w).sum();
            if best.as_ref().map_or(true, |b| cost < b.0) {
                best = Some((cost, c, next));
            }
        }
        let (_, pick, next) = best.unwrap();
        taken[pick] = true;
        order.push(pick);
        d2 = next;
    }
    order
}

/// Index drawn with probability `score[i] / total`.
fn draw(score: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut target = rng.gen_range(0.0..total);
    let mut last = 0;
    for (i, &s) in score.iter().enumerate() {
        if s > 0.0 {
            last = i;
            if target < s {
                return i;
            }
            target -= s;
        }
    }
    last
}

/// Learns a codebook for the rows of `features` weighted by `importance`.
/// Each restart seeds its own codes and runs `init_iters` rounds of batch
/// assignment, moving-average update and code expiration.
pub fn cluster_population<T: Real>(
    features: &[T],
    importance: &[T],
    dim: usize,
    cfg: &VQConfig,
) -> Result<Codebook<T>> {
    cfg.validate()?;
    if dim == 0 || features.len() % dim != 0 || features.len() / dim != importance.len() {
        return Err(Error::InvalidArgument("population rows and importance differ".into()));
    }
    let m = importance.len();
    let k = cfg.codebook_size;
    if m < k {
        return Err(Error::CodebookLargerThanPopulation);
    }
    let mut best: Option<(f64, Codebook<T>)> = None;
    for r in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64);
        let book = cluster_once(features, importance, dim, cfg, &mut rng)?;
        if cfg.restarts <= 1 {
            return Ok(book);
        }
        let cost = weighted_wcss(features, importance, &book);
        if best.as_ref().map_or(true, |b| cost < b.0) {
            best = Some((cost, book));
        }
    }
    Ok(best.unwrap().1)
}

fn cluster_once<T: Real>(
    features: &[T],
    importance: &[T],
    dim: usize,
    cfg: &VQConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Codebook<T>> {
    let m = importance.len();
    let k = cfg.codebook_size;
    let mut book = Codebook::new(dim, seed_codes(features, importance, dim, k, cfg.seeding, rng))?;
    let bsize = cfg.batch_voxels;
    let mut rows = vec![0usize; bsize];
    let mut bf = vec![T::zero(); bsize * dim];
    let mut bi = vec![T::zero(); bsize];
    for _ in 0..cfg.init_iters {
        for (i, r) in rows.iter_mut().enumerate() {
            *r = rng.gen_range(0..m);
            bf[i * dim..(i + 1) * dim].copy_from_slice(&features[*r * dim..(*r + 1) * dim]);
            bi[i] = importance[*r];
        }
        let a = assign(&bf, &book)?;
        ema_update(&mut book, &bf, &bi, &a, cfg.lambda_d);
        expire_codes(&mut book, &bf, &bi, cfg.expire_j, Some(&rows));
    }
    Ok(book)
}

/// Features and importance of the VQ-labeled voxels, ascending voxel index.
pub fn vq_population<T: Real>(
    grid: &DenseGrid<T>,
    field: &ImportanceField<T>,
    mask: &VoxelClassMask,
) -> Result<(Vec<T>, Vec<T>)> {
    let n = grid.dims.len();
    if field.len() != n || mask.len() != n {
        return Err(Error::InvalidArgument("grid, importance and mask sizes differ".into()));
    }
    let ids = mask.indices_of(VoxelClass::Vq);
    let mut feats = Vec::with_capacity(ids.len() * grid.feature_dim());
    let mut imp = Vec::with_capacity(ids.len());
    for &v in &ids {
        feats.extend_from_slice(grid.voxel_features(v));
        imp.push(field.scores[v]);
    }
    Ok((feats, imp))
}

/// Learns the codebook from the VQ-labeled voxels only.
pub fn init_codebook<T: Real>(
    grid: &DenseGrid<T>,
    field: &ImportanceField<T>,
    mask: &VoxelClassMask,
    cfg: &VQConfig,
) -> Result<Codebook<T>> {
    let (feats, imp) = vq_population(grid, field, mask)?;
    cluster_population(&feats, &imp, grid.feature_dim(), cfg)
}

/// Freezes the voxel-to-code mapping and gathers the streams of a
/// [`VQModel`].
pub fn build_vq_model<T: Real>(
    grid: &DenseGrid<T>,
    mask: &VoxelClassMask,
    codebook: &Codebook<T>,
) -> Result<VQModel<T>> {
    let n = grid.dims.len();
    if mask.len() != n {
        return Err(Error::InvalidArgument("mask length differs from voxel count".into()));
    }
    let c = grid.feature_dim();
    let mut vq_feats = Vec::new();
    let mut kept_features = Vec::new();
    let mut density = Vec::new();
    for (v, label) in mask.labels.iter().enumerate() {
        match label {
            VoxelClass::Pruned => continue,
            VoxelClass::Vq => vq_feats.extend_from_slice(grid.voxel_features(v)),
            VoxelClass::Kept => kept_features.extend_from_slice(grid.voxel_features(v)),
        }
        density.push(grid.density[v]);
    }
    let indices = if vq_feats.is_empty() {
        Vec::new()
    } else {
        if codebook.dim != c {
            return Err(Error::InvalidArgument("codebook dimension differs from C".into()));
        }
        assign(&vq_feats, codebook)?
    };
    let model = VQModel {
        dims: grid.dims.clone(),
        sh_degree: grid.sh_degree,
        mask: mask.clone(),
        codebook: codebook.clone(),
        indices,
        kept_features,
        density,
    };
    model.validate()?;
    Ok(model)
}

/// Debug dump: one line per code with its capacity.
pub fn write_capacity_csv<T: Real>(codebook: &Codebook<T>, path: &Path) -> Result<()> {
    let mut out = String::from("code,capacity\n");
    for (k, s) in codebook.capacity.iter().enumerate() {
        out.push_str(&format!("{k},{s}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridDims;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn book(dim: usize, codes: &[f64]) -> Codebook<f64> {
        Codebook::new(dim, codes.to_vec()).unwrap()
    }

    #[test]
    fn compression_rate_values() {
        assert!((asymptotic_compression_rate(12.0, 4096.0) - 16.0).abs() < 1e-12);
        assert!((asymptotic_compression_rate(48.0, 4096.0) - 64.0).abs() < 1e-12);
        assert!((asymptotic_compression_rate(27.0, 4096.0) - 36.0).abs() < 1e-12);
        let r = compression_rate(1e6, 12.0, 4096.0);
        assert!((r - 192e6 / 12_786_432.0).abs() < 1e-9);
        assert!((r - 15.0159).abs() < 1e-4);
        assert!((compression_rate(1e15, 12.0, 4096.0) - 16.0).abs() < 1e-6);
    }

    #[test]
    fn assign_examples() {
        let b = book(1, &[0.0, 1.0]);
        assert_eq!(assign(&[0.4, 0.6, 0.5], &b).unwrap(), vec![0, 1, 0]);
        let mut codes: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
        codes[15] = 9.0;
        let b3 = book(3, &codes);
        assert_eq!(assign(&codes[15..18], &b3).unwrap(), vec![5]);
        assert!(matches!(
            assign(&[1.0], &Codebook::<f64>::empty(1)),
            Err(Error::EmptyCodebook)
        ));
    }

    #[test]
    fn assign_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 12;
        let feats: Vec<f64> = (0..100 * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let codes: Vec<f64> = (0..32 * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = book(c, &codes);
        let got = assign(&feats, &b).unwrap();
        for (row, &g) in feats.chunks(c).zip(&got) {
            let d: Vec<f64> = codes
                .chunks(c)
                .map(|k| k.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let want = d.iter().position(|&x| x == best).unwrap();
            assert_eq!(g as usize, want);
        }
    }

    #[test]
    fn ema_examples() {
        let mut b = book(1, &[1.0, 5.0]);
        ema_update(&mut b, &[2.0], &[1.0], &[0], 0.8);
        assert!((b.codes[0] - 1.2).abs() < 1e-12);
        assert_eq!(b.codes[1], 5.0);
        let mut b = book(1, &[0.0]);
        ema_update(&mut b, &[0.0, 4.0], &[1.0, 3.0], &[0, 0], 0.8);
        assert!((b.codes[0] - 0.6).abs() < 1e-12);
        assert!((b.capacity[0] - 0.8).abs() < 1e-12);
        // Zero-importance cluster counts as empty.
        let mut b = book(1, &[0.3]);
        ema_update(&mut b, &[4.0], &[0.0], &[0], 0.5);
        assert_eq!(b.codes[0], 0.3);
    }

    #[test]
    fn capacities_sum_to_batch_importance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats: Vec<f64> = (0..300).map(|_| rng.gen()).collect();
        let imp: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..5.0)).collect();
        let mut b = book(3, &feats[..24]);
        let a = assign(&feats, &b).unwrap();
        ema_update(&mut b, &feats, &imp, &a, 0.0);
        let s: f64 = b.capacity.iter().sum();
        let t: f64 = imp.iter().sum();
        assert!((s - t).abs() <= 1e-5 * t);
    }

    #[test]
    fn expire_examples() {
        let mut b = book(1, &[0.0, 1.0, 2.0, 3.0]);
        let orig = b.clone();
        expire_codes(&mut b, &[7.0, 8.0], &[1.0, 2.0], 0, None);
        assert_eq!(b, orig);
        expire_codes(&mut b, &[7.0, 8.0, 9.0], &[1.0, 2.0, 0.5], 1, None);
        assert_eq!(b.codes, vec![8.0, 1.0, 2.0, 3.0]);
        assert_eq!(b.capacity[0], 2.0);

        // Capacities 0.5, 0.1, 0.9, 0.1: codes 1 then 3 are the least used.
        // Batch importance 2, 5, 5, 1: rows 1 then 2 are the most important.
        let mut b = book(1, &[10.0, 11.0, 12.0, 13.0]);
        b.capacity = vec![0.5, 0.1, 0.9, 0.1];
        expire_codes(&mut b, &[-1.0, -2.0, -3.0, -4.0], &[2.0, 5.0, 5.0, 1.0], 2, None);
        assert_eq!(b.codes, vec![10.0, -2.0, 12.0, -3.0]);
        assert_eq!(b.capacity, vec![0.5, 5.0, 0.9, 5.0]);
    }

    #[test]
    fn wcss_examples() {
        let b = book(2, &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(weighted_wcss(&[0.0, 0.0, 1.0, 1.0], &[3.0, 4.0], &b), 0.0);
        assert_eq!(weighted_wcss(&[5.0, 5.0], &[0.0], &b), 0.0);
        // (0,1): d=1 to either code, w=2. (2,1): d=1 to (1,1), w=1.
        // (0.5,0.5): d=0.5 to either, w=4.
        let v = weighted_wcss(&[0.0, 1.0, 2.0, 1.0, 0.5, 0.5], &[2.0, 1.0, 4.0], &b);
        assert!((v - 5.0).abs() < 1e-12);
    }

    fn cfg(k: usize) -> VQConfig {
        VQConfig {
            codebook_size: k,
            expire_j: 0,
            ..Default::default()
        }
    }

    #[test]
    fn too_few_voxels_is_an_error() {
        let r = cluster_population(&[0.0f64, 1.0, 2.0], &[1.0; 3], 1, &cfg(4));
        assert!(matches!(r, Err(Error::CodebookLargerThanPopulation)));
    }

    #[test]
    fn population_of_exactly_k_points_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (k, c) = (16, 4);
        let pts: Vec<f64> = (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = cluster_population(&pts, &vec![1.0; k], c, &cfg(k)).unwrap();
        let mut used = vec![false; k];
        for code in b.codes.chunks(c) {
            let (i, d) = pts
                .chunks(c)
                .enumerate()
                .map(|(i, p)| (i, sq_dist(code, p)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert!(d.sqrt() < 1e-4);
            assert!(!used[i]);
            used[i] = true;
        }
    }

    #[test]
    fn duplicate_population_clusters_exactly() {
        let base = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [3.0, 3.0]];
        let mut feats = Vec::new();
        let mut imp = Vec::new();
        for i in 0..200 {
            feats.extend_from_slice(&base[i % 4]);
            imp.push(1.0 + (i % 7) as f64);
        }
        let b = cluster_population(&feats, &imp, 2, &cfg(4)).unwrap();
        assert!(weighted_wcss(&feats, &imp, &b) < 1e-9);
    }

    #[test]
    fn clustering_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats: Vec<f32> = (0..3000).map(|_| rng.gen()).collect();
        let imp: Vec<f32> = (0..1000).map(|_| rng.gen()).collect();
        let c = VQConfig {
            codebook_size: 32,
            init_iters: 10,
            batch_voxels: 500,
            ..Default::default()
        };
        let a = cluster_population(&feats, &imp, 3, &c).unwrap();
        let b = cluster_population(&feats, &imp, 3, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_model_layout() {
        let dims = GridDims::cube(2, 0.0, 1.0).unwrap();
        let mut g = DenseGrid::<f64>::zeros(dims, 0).unwrap();
        for v in 0..8 {
            g.density[v] = v as f64;
            g.voxel_features_mut(v).copy_from_slice(&[v as f64; 3]);
        }
        let mut labels = vec![VoxelClass::Vq; 8];
        labels[0] = VoxelClass::Pruned;
        labels[3] = VoxelClass::Kept;
        let mask = VoxelClassMask { labels };
        let b = book(3, &[1.0, 1.0, 1.0, 6.0, 6.0, 6.0]);
        let m = build_vq_model(&g, &mask, &b).unwrap();
        assert_eq!(m.indices, vec![0, 0, 1, 1, 1, 1]);
        assert_eq!(m.kept_features, vec![3.0; 3]);
        assert_eq!(m.density, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let e = m.expand().unwrap();
        assert_eq!(e.voxel_features(3), g.voxel_features(3));
        assert_eq!(e.density[0], 0.0);

        let none = VoxelClassMask::uniform(8, VoxelClass::Kept);
        let m = build_vq_model(&g, &none, &Codebook::empty(3)).unwrap();
        assert!(m.indices.is_empty());
        assert_eq!(m.expand().unwrap(), g);
    }

    proptest! {
        #[test]
        fn ema_is_convex(
            old in prop::collection::vec(-5.0..5.0f64, 3),
            rows in prop::collection::vec((prop::collection::vec(-5.0..5.0f64, 3), 0.0..4.0f64), 1..20),
            lambda in 0.0..1.0f64,
        ) {
            let mut b = book(3, &old);
            let feats: Vec<f64> = rows.iter().flat_map(|r| r.0.clone()).collect();
            let imp: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let w: f64 = imp.iter().sum();
            ema_update(&mut b, &feats, &imp, &vec![0; rows.len()], lambda);
            for d in 0..3 {
                if w > 0.0 {
                    let mean = rows.iter().map(|r| r.0[d] * r.1).sum::<f64>() / w;
                    let (lo, hi) = (old[d].min(mean), old[d].max(mean));
                    prop_assert!(b.codes[d] >= lo - 1e-12 && b.codes[d] <= hi + 1e-12);
                } else {
                    prop_assert_eq!(b.codes[d], old[d]);
                }
            }
        }
    }
}
