//! Volume rendering of voxel fields with trilinear interpolation, SH color,
//! and exact analytic gradients.
//!
//! Density is activated with ReLU after interpolation; colors are the
//! sigmoid of the interpolated SH expansion.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{DenseGrid, GridDims};
use crate::image::Image;
use crate::scalar::{sigmoid, Real};
use crate::scene::Camera;
use crate::sh::{basis_len, eval_with_basis, sh_basis};

/// Read access to per-voxel parameters. Implemented by dense grids and by
/// the compressed-model view used during finetuning.
pub trait VoxelSource<T: Real>: Sync {
    fn dims(&self) -> &GridDims;
    fn sh_degree(&self) -> u8;
    fn density(&self, voxel: usize) -> T;
    fn features(&self, voxel: usize) -> &[T];
}

impl<T: Real> VoxelSource<T> for DenseGrid<T> {
    #[inline]
    fn dims(&self) -> &GridDims {
        &self.dims
    }
    #[inline]
    fn sh_degree(&self) -> u8 {
        self.sh_degree
    }
    #[inline]
    fn density(&self, voxel: usize) -> T {
        self.density[voxel]
    }
    #[inline]
    fn features(&self, voxel: usize) -> &[T] {
        self.voxel_features(voxel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: [T; 3],
    pub direction: [T; 3],
    pub t_near: T,
    pub t_far: T,
}

impl<T: Real> Ray<T> {
    pub fn new(origin: [T; 3], direction: [T; 3], t_near: T, t_far: T) -> Result<Self> {
        let n = (direction[0] * direction[0]
            + direction[1] * direction[1]
            + direction[2] * direction[2])
            .sqrt();
        if (n - T::one()).abs().f64() > 1e-6 {
            return Err(Error::InvalidArgument(format!("ray direction norm {n} is not 1")));
        }
        if !(t_near < t_far) {
            return Err(Error::InvalidArgument("ray needs t_near < t_far".into()));
        }
        Ok(Ray {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    /// Ray from `origin` along the normalized `direction`, unbounded in `t`.
    pub fn towards(origin: [T; 3], direction: [T; 3]) -> Self {
        let n = (direction[0] * direction[0]
            + direction[1] * direction[1]
            + direction[2] * direction[2])
            .sqrt();
        Ray {
            origin,
            direction: [direction[0] / n, direction[1] / n, direction[2] / n],
            t_near: T::zero(),
            t_far: T::infinity(),
        }
    }

    #[inline]
    pub fn at(&self, t: T) -> [T; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// One sample along a ray, as seen by the compositor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint<T> {
    pub position: [T; 3],
    pub t: T,
    pub delta: T,
    pub sigma: T,
    pub color: [T; 3],
    pub alpha: T,
    pub transmittance: T,
    pub importance: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    /// Sample spacing as a fraction of the voxel diagonal.
    pub step_size: f64,
    /// Marching stops once transmittance falls below this value.
    pub early_stop_t: f64,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            step_size: 0.5,
            early_stop_t: 1e-4,
            background: [1.0; 3],
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidArgument("step_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.early_stop_t) {
            return Err(Error::InvalidArgument("early_stop_t must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn step_length(&self, dims: &GridDims) -> f64 {
        self.step_size * dims.voxel_diagonal()
    }
}

/// Clips `ray` against the grid box. `None` when it misses.
pub fn intersect_aabb<T: Real>(ray: &Ray<T>, dims: &GridDims) -> Option<(T, T)> {
    let mut t0 = ray.t_near;
    let mut t1 = ray.t_far;
    for a in 0..3 {
        let lo = T::of(dims.aabb_min[a]);
        let hi = T::of(dims.aabb_max[a]);
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d == T::zero() {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let inv = T::one() / d;
        let (mut ta, mut tb) = ((lo - o) * inv, (hi - o) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Eight voxels and weights surrounding a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil<T> {
    pub voxels: [u32; 8],
    pub weights: [T; 8],
}

/// Grid geometry converted once per ray into the working scalar.
#[derive(Clone, Copy)]
struct Lattice<T> {
    min: [T; 3],
    max: [T; 3],
    inv_cell: [T; 3],
    upper: [T; 3],
    n: [usize; 3],
}

impl<T: Real> Lattice<T> {
    fn new(dims: &GridDims) -> Self {
        let cell = dims.cell_size();
        let n = dims.shape();
        Lattice {
            min: std::array::from_fn(|a| T::of(dims.aabb_min[a])),
            max: std::array::from_fn(|a| T::of(dims.aabb_max[a])),
            inv_cell: std::array::from_fn(|a| T::of(1.0 / cell[a])),
            upper: std::array::from_fn(|a| T::of((n[a] - 1) as f64)),
            n,
        }
    }

    #[inline]
    fn clamp_inside(&self, p: [T; 3]) -> [T; 3] {
        std::array::from_fn(|a| p[a].max(self.min[a]).min(self.max[a]))
    }

    /// Stencil for a point assumed inside the box; the half-cell border
    /// band clamps onto edge voxels.
    #[inline]
    fn stencil(&self, p: [T; 3]) -> Stencil<T> {
        let half = T::of(0.5);
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for a in 0..3 {
            let u = ((p[a] - self.min[a]) * self.inv_cell[a] - half)
                .max(T::zero())
                .min(self.upper[a]);
            let i = u.floor().to_usize().unwrap_or(0).min(self.n[a] - 2);
            base[a] = i;
            frac[a] = u - T::of(i as f64);
        }
        let sx = 1usize;
        let sy = self.n[0];
        let sz = self.n[0] * self.n[1];
        let origin = base[0] * sx + base[1] * sy + base[2] * sz;
        let mut voxels = [0u32; 8];
        let mut weights = [T::zero(); 8];
        for corner in 0..8 {
            let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            voxels[corner] = (origin + dx * sx + dy * sy + dz * sz) as u32;
            let wx = if dx == 1 { frac[0] } else { T::one() - frac[0] };
            let wy = if dy == 1 { frac[1] } else { T::one() - frac[1] };
            let wz = if dz == 1 { frac[2] } else { T::one() - frac[2] };
            weights[corner] = wx * wy * wz;
        }
        Stencil { voxels, weights }
    }
}

/// Trilinear stencil of `x`; errors outside the box.
pub fn trilerp_stencil<T: Real>(dims: &GridDims, x: [T; 3]) -> Result<Stencil<T>> {
    let p: [f64; 3] = std::array::from_fn(|a| x[a].f64());
    if !dims.contains(p) {
        return Err(Error::SampleOutsideGrid);
    }
    Ok(Lattice::new(dims).stencil(x))
}

/// Interpolates a per-voxel array with `channels` values per voxel.
pub fn trilerp<T: Real>(values: &[T], channels: usize, dims: &GridDims, x: [T; 3]) -> Result<Vec<T>> {
    if values.len() != dims.len() * channels {
        return Err(Error::InvalidArgument("value array does not match grid".into()));
    }
    let st = trilerp_stencil(dims, x)?;
    let mut out = vec![T::zero(); channels];
    for (v, w) in st.voxels.iter().zip(st.weights) {
        let row = &values[*v as usize * channels..(*v as usize + 1) * channels];
        for (o, r) in out.iter_mut().zip(row) {
            *o += w * *r;
        }
    }
    Ok(out)
}

/// Front-to-back alpha compositor.
#[derive(Clone, Copy, Debug)]
pub struct Compositor<T> {
    pub rgb: [T; 3],
    pub transmittance: T,
    early_stop: T,
}

impl<T: Real> Compositor<T> {
    pub fn new(early_stop_t: f64) -> Self {
        Compositor {
            rgb: [T::zero(); 3],
            transmittance: T::one(),
            early_stop: T::of(early_stop_t),
        }
    }

    /// True once the remaining transmittance is below the early-stop level.
    #[inline]
    pub fn saturated(&self) -> bool {
        self.transmittance < self.early_stop
    }

    /// Adds one sample; returns `(alpha, transmittance_before)`.
    #[inline]
    pub fn push(&mut self, sigma: T, delta: T, color: [T; 3]) -> (T, T) {
        let alpha = T::one() - (-sigma * delta).exp();
        let t = self.transmittance;
        let w = t * alpha;
        for c in 0..3 {
            self.rgb[c] += w * color[c];
        }
        self.transmittance = t * (T::one() - alpha);
        (alpha, t)
    }

    pub fn finish(&self, background: [T; 3]) -> [T; 3] {
        std::array::from_fn(|c| self.rgb[c] + self.transmittance * background[c])
    }
}

/// Forward result with the full per-sample trace.
#[derive(Clone, Debug)]
pub struct RayRender<T> {
    pub pixel: [T; 3],
    pub trace: Vec<SamplePoint<T>>,
    #[allow(dead_code)]
    pub final_transmittance: T,
}

/// A sample with non-zero density, with everything the backward pass needs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ActiveSample<T> {
    pub stencil: Stencil<T>,
    pub alpha: T,
    pub transmittance: T,
    pub color: [T; 3],
}

pub(crate) struct March<T> {
    pub pixel: [T; 3],
    pub delta: T,
    pub basis: [T; 9],
    #[allow(dead_code)]
    pub final_transmittance: T,
}

/// Sample positions along a ray: uniform spacing starting half a step
/// inside the box entry point.
struct Stepper<T> {
    t: T,
    t_exit: T,
    step: T,
}

impl<T: Real> Iterator for Stepper<T> {
    type Item = T;
    #[inline]
    fn next(&mut self) -> Option<T> {
        if self.t >= self.t_exit {
            return None;
        }
        let t = self.t;
        self.t += self.step;
        Some(t)
    }
}

fn stepper<T: Real>(ray: &Ray<T>, dims: &GridDims, cfg: &RenderConfig) -> Option<Stepper<T>> {
    let (t0, t1) = intersect_aabb(ray, dims)?;
    let step = T::of(cfg.step_length(dims));
    Some(Stepper {
        t: t0 + step * T::of(0.5),
        t_exit: t1,
        step,
    })
}

#[inline(always)]
fn interp_density<T: Real, S: VoxelSource<T> + ?Sized>(src: &S, st: &Stencil<T>) -> T {
    let mut s = T::zero();
    for c in 0..8 {
        s += st.weights[c] * src.density(st.voxels[c] as usize);
    }
    s
}

#[inline(always)]
fn interp_features<T: Real, S: VoxelSource<T> + ?Sized>(src: &S, st: &Stencil<T>, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..8 {
        let w = st.weights[c];
        if w == T::zero() {
            continue;
        }
        let f = src.features(st.voxels[c] as usize);
        for (o, v) in out.iter_mut().zip(f) {
            *o += w * *v;
        }
    }
}

/// Marches `ray`, recording only samples with non-zero density. Samples
/// with zero density leave color, transmittance and every gradient
/// unchanged, so they need no bookkeeping.
pub(crate) fn march_active<T: Real, S: VoxelSource<T> + ?Sized>(
    src: &S,
    ray: &Ray<T>,
    cfg: &RenderConfig,
    active: &mut Vec<ActiveSample<T>>,
) -> March<T> {
    active.clear();
    let dims = src.dims();
    let bg: [T; 3] = std::array::from_fn(|c| T::of(cfg.background[c]));
    let deg = src.sh_degree();
    let basis = sh_basis(deg, ray.direction);
    let delta = T::of(cfg.step_length(dims));
    let Some(steps) = stepper(ray, dims, cfg) else {
        return March {
            pixel: bg,
            delta,
            basis,
            final_transmittance: T::one(),
        };
    };
    let lattice = Lattice::new(dims);
    let b = basis_len(deg);
    let mut coeffs = [T::zero(); 27];
    let coeffs = &mut coeffs[..3 * b];
    let mut comp = Compositor::new(cfg.early_stop_t);
    for t in steps {
        if comp.saturated() {
            break;
        }
        let st = lattice.stencil(lattice.clamp_inside(ray.at(t)));
        let s = interp_density(src, &st);
        if s <= T::zero() {
            continue;
        }
        interp_features(src, &st, coeffs);
        let h = eval_with_basis(coeffs, b, &basis);
        let color = [sigmoid(h[0]), sigmoid(h[1]), sigmoid(h[2])];
        let (alpha, trans) = comp.push(s, delta, color);
        active.push(ActiveSample {
            stencil: st,
            alpha,
            transmittance: trans,
            color,
        });
    }
    March {
        pixel: comp.finish(bg),
        delta,
        basis,
        final_transmittance: comp.transmittance,
    }
}

/// Renders one ray and returns the pixel together with every sample.
pub fn render_ray<T: Real, S: VoxelSource<T> + ?Sized>(
    src: &S,
    ray: &Ray<T>,
    cfg: &RenderConfig,
) -> Result<RayRender<T>> {
    cfg.validate()?;
    let dims = src.dims();
    let bg: [T; 3] = std::array::from_fn(|c| T::of(cfg.background[c]));
    let Some(steps) = stepper(ray, dims, cfg) else {
        return Ok(RayRender {
            pixel: bg,
            trace: Vec::new(),
            final_transmittance: T::one(),
        });
    };
    let deg = src.sh_degree();
    let b = basis_len(deg);
    let basis = sh_basis(deg, ray.direction);
    let delta = steps.step;
    let lattice = Lattice::new(dims);
    let mut coeffs = vec![T::zero(); 3 * b];
    let mut comp = Compositor::new(cfg.early_stop_t);
    let mut trace = Vec::new();
    for t in steps {
        if comp.saturated() {
            break;
        }
        let p = lattice.clamp_inside(ray.at(t));
        let st = lattice.stencil(p);
        let sigma = interp_density(src, &st).max(T::zero());
        interp_features(src, &st, &mut coeffs);
        let h = eval_with_basis(&coeffs, b, &basis);
        let color = [sigmoid(h[0]), sigmoid(h[1]), sigmoid(h[2])];
        let (alpha, trans) = comp.push(sigma, delta, color);
        trace.push(SamplePoint {
            position: p,
            t,
            delta,
            sigma,
            color,
            alpha,
            transmittance: trans,
            importance: trans * alpha,
        });
    }
    Ok(RayRender {
        pixel: comp.finish(bg),
        trace,
        final_transmittance: comp.transmittance,
    })
}

/// Gradient contribution of one active sample: derivatives of the loss
/// with respect to the interpolated raw density and the interpolated SH
/// coefficients. Multiplying by the stencil weights yields per-voxel terms.
#[derive(Clone, Copy, Debug)]
pub struct SampleGrad<T> {
    pub stencil: Stencil<T>,
    pub d_density: T,
    pub d_coeffs: [T; 27],
}

/// Parameter addressed by a gradient entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GradChannel {
    Density,
    Feature(u16),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradEntry<T> {
    pub voxel: usize,
    pub channel: GradChannel,
    pub value: T,
}

/// Sparse gradient of one ray.
#[derive(Clone, Debug)]
pub struct RayGradient<T> {
    pub pixel: [T; 3],
    pub channels: usize,
    pub samples: Vec<SampleGrad<T>>,
}

impl<T: Real> RayGradient<T> {
    /// Merged `(voxel, channel, value)` triples sorted by voxel then channel.
    pub fn triples(&self) -> Vec<GradEntry<T>> {
        let mut acc: BTreeMap<(usize, GradChannel), T> = BTreeMap::new();
        for s in &self.samples {
            for c in 0..8 {
                let v = s.stencil.voxels[c] as usize;
                let w = s.stencil.weights[c];
                *acc.entry((v, GradChannel::Density)).or_insert(T::zero()) += w * s.d_density;
                for j in 0..self.channels {
                    *acc.entry((v, GradChannel::Feature(j as u16)))
                        .or_insert(T::zero()) += w * s.d_coeffs[j];
                }
            }
        }
        acc.into_iter()
            .map(|((voxel, channel), value)| GradEntry {
                voxel,
                channel,
                value,
            })
            .collect()
    }

    /// Adds the gradient into dense density / feature buffers.
    pub fn accumulate(&self, d_density: &mut [T], d_features: &mut [T]) {
        for s in &self.samples {
            s.scatter(self.channels, d_density, d_features);
        }
    }
}

impl<T: Real> SampleGrad<T> {
    #[inline]
    pub fn scatter(&self, channels: usize, d_density: &mut [T], d_features: &mut [T]) {
        for c in 0..8 {
            let v = self.stencil.voxels[c] as usize;
            let w = self.stencil.weights[c];
            if w == T::zero() {
                continue;
            }
            d_density[v] += w * self.d_density;
            let row = &mut d_features[v * channels..(v + 1) * channels];
            for (r, g) in row.iter_mut().zip(&self.d_coeffs[..channels]) {
                *r += w * *g;
            }
        }
    }
}

/// Forward pass followed by the exact backward pass. `upstream` maps the
/// rendered pixel to dL/dpixel. Appends one record per active sample to
/// `out` and returns the pixel.
pub(crate) fn forward_backward<T: Real, S: VoxelSource<T> + ?Sized>(
    src: &S,
    ray: &Ray<T>,
    cfg: &RenderConfig,
    upstream: impl FnOnce([T; 3]) -> [T; 3],
    scratch: &mut Vec<ActiveSample<T>>,
    out: &mut Vec<SampleGrad<T>>,
) -> [T; 3] {
    let m = march_active(src, ray, cfg, scratch);
    let g = upstream(m.pixel);
    let deg = src.sh_degree();
    let b = basis_len(deg);
    // Color of everything behind the current sample, normalized by the
    // transmittance in front of it. Starts as the background.
    let mut behind: [T; 3] = std::array::from_fn(|c| T::of(cfg.background[c]));
    let start = out.len();
    out.resize(
        start + scratch.len(),
        SampleGrad {
            stencil: Stencil {
                voxels: [0; 8],
                weights: [T::zero(); 8],
            },
            d_density: T::zero(),
            d_coeffs: [T::zero(); 27],
        },
    );
    for (i, s) in scratch.iter().enumerate().rev() {
        let one_minus = T::one() - s.alpha;
        let mut d_alpha = T::zero();
        for c in 0..3 {
            d_alpha += g[c] * (s.color[c] - behind[c]);
        }
        d_alpha *= s.transmittance;
        let weight = s.transmittance * s.alpha;
        let rec = &mut out[start + i];
        rec.stencil = s.stencil;
        rec.d_density = d_alpha * m.delta * one_minus;
        for c in 0..3 {
            let dh = g[c] * weight * s.color[c] * (T::one() - s.color[c]);
            for k in 0..b {
                rec.d_coeffs[c * b + k] = dh * m.basis[k];
            }
        }
        for c in 0..3 {
            behind[c] = s.alpha * s.color[c] + one_minus * behind[c];
        }
    }
    m.pixel
}

/// Sparse gradient of `d_loss_d_pixel · pixel` with respect to every
/// density and feature parameter touched by the ray.
pub fn render_ray_backward<T: Real, S: VoxelSource<T> + ?Sized>(
    src: &S,
    ray: &Ray<T>,
    cfg: &RenderConfig,
    d_loss_d_pixel: [T; 3],
) -> Result<RayGradient<T>> {
    cfg.validate()?;
    let mut scratch = Vec::new();
    let mut samples = Vec::new();
    let pixel = forward_backward(src, ray, cfg, |_| d_loss_d_pixel, &mut scratch, &mut samples);
    Ok(RayGradient {
        pixel,
        channels: 3 * basis_len(src.sh_degree()),
        samples,
    })
}

/// Fast forward render: pixel only.
pub(crate) fn render_pixel<T: Real, S: VoxelSource<T> + ?Sized>(
    src: &S,
    ray: &Ray<T>,
    cfg: &RenderConfig,
    scratch: &mut Vec<ActiveSample<T>>,
) -> [T; 3] {
    march_active(src, ray, cfg, scratch).pixel
}

/// Renders every pixel of `camera`.
pub fn render_image<T: Real, S: VoxelSource<T> + ?Sized>(
    src: &S,
    camera: &Camera,
    cfg: &RenderConfig,
) -> Result<Image> {
    cfg.validate()?;
    if camera.width == 0 || camera.height == 0 {
        return Err(Error::ZeroResolution);
    }
    let (w, h) = (camera.width, camera.height);
    let mut data = vec![0f32; w * h * 3];
    data.par_chunks_mut(w * 3)
        .enumerate()
        .for_each_init(Vec::new, |scratch, (py, row)| {
            for px in 0..w {
                let ray = camera.ray::<T>(px, py);
                let p = render_pixel(src, &ray, cfg, scratch);
                for c in 0..3 {
                    row[px * 3 + c] = p[c].f32();
                }
            }
        });
    Ok(Image::from_rgb(w, h, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize) -> GridDims {
        GridDims::cube(n, 0.0, 1.0).unwrap()
    }

    #[test]
    fn aabb_axis_aligned_hit() {
        let r = Ray::new([-1.0f64, 0.5, 0.5], [1.0, 0.0, 0.0], 0.0, 100.0).unwrap();
        assert_eq!(intersect_aabb(&r, &unit(2)), Some((1.0, 2.0)));
    }

    #[test]
    fn aabb_parallel_miss() {
        let r = Ray::new([-1.0f64, 1.5, 0.5], [1.0, 0.0, 0.0], 0.0, 100.0).unwrap();
        assert_eq!(intersect_aabb(&r, &unit(2)), None);
    }

    #[test]
    fn aabb_diagonal() {
        let s = 1.0f64 / 3f64.sqrt();
        let r = Ray::new([-1.0, -1.0, -1.0], [s, s, s], 0.0, 100.0).unwrap();
        let (a, b) = intersect_aabb(&r, &unit(2)).unwrap();
        assert!((a - 3f64.sqrt()).abs() < 1e-12);
        assert!((b - 2.0 * 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ray_validation() {
        assert!(Ray::new([0.0f64; 3], [1.0, 1.0, 0.0], 0.0, 1.0).is_err());
        assert!(Ray::new([0.0f64; 3], [1.0, 0.0, 0.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn trilerp_at_center_and_midpoint() {
        let d = unit(4);
        let n = d.len();
        let mut vals = vec![0.0f64; n];
        vals[d.linear_index(2, 1, 1)] = 1.0;
        let c = d.voxel_center(d.linear_index(2, 1, 1)).unwrap();
        assert_eq!(trilerp(&vals, 1, &d, c).unwrap(), vec![1.0]);
        let c0 = d.voxel_center(d.linear_index(1, 1, 1)).unwrap();
        let mid = [(c[0] + c0[0]) / 2.0, c[1], c[2]];
        assert!((trilerp(&vals, 1, &d, mid).unwrap()[0] - 0.5).abs() < 1e-12);
        // Edge voxel centers hit the top corner of the stencil.
        let last = d.len() - 1;
        vals[last] = 7.0;
        let cl = d.voxel_center(last).unwrap();
        assert_eq!(trilerp(&vals, 1, &d, cl).unwrap(), vec![7.0]);
    }

    #[test]
    fn trilerp_constant_and_outside() {
        let d = GridDims::new([3, 4, 5], [-1.0, 0.0, 2.0], [1.0, 2.0, 3.0]).unwrap();
        let vals = vec![3.7f64; d.len() * 2];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..2.0),
                rng.gen_range(2.0..3.0),
            ];
            for v in trilerp(&vals, 2, &d, p).unwrap() {
                assert!((v - 3.7).abs() < 1e-12);
            }
        }
        assert!(matches!(
            trilerp(&vals, 2, &d, [1.5, 1.0, 2.5]),
            Err(Error::SampleOutsideGrid)
        ));
    }

    #[test]
    fn compositor_single_and_double_sample() {
        let ln2 = 2f64.ln();
        let mut c = Compositor::<f64>::new(0.0);
        let (a, t) = c.push(ln2, 1.0, [1.0, 0.0, 0.0]);
        assert!((a - 0.5).abs() < 1e-15);
        assert!((t * a - 0.5).abs() < 1e-15);
        c.push(1.0, ln2, [0.0, 1.0, 0.0]);
        let px = c.finish([0.0; 3]);
        assert!((px[0] - 0.5).abs() < 1e-15);
        assert!((px[1] - 0.25).abs() < 1e-15);
        assert_eq!(px[2], 0.0);
    }

    #[test]
    fn zero_density_gives_background() {
        let g = DenseGrid::<f64>::zeros(unit(4), 1).unwrap();
        let r = Ray::towards([-1.0, 0.3, 0.6], [1.0, 0.1, 0.0]);
        let out = render_ray(&g, &r, &RenderConfig::default()).unwrap();
        assert_eq!(out.pixel, [1.0; 3]);
        assert!(!out.trace.is_empty());
        assert!(out.trace.iter().all(|s| s.alpha == 0.0 && s.transmittance == 1.0));
    }

    #[test]
    fn miss_gives_background_and_empty_trace() {
        let g = DenseGrid::<f64>::filled(unit(4), 0, 5.0, 1.0).unwrap();
        let r = Ray::towards([-1.0, 3.0, 0.5], [1.0, 0.0, 0.0]);
        let cfg = RenderConfig {
            background: [0.2, 0.3, 0.4],
            ..Default::default()
        };
        let out = render_ray(&g, &r, &cfg).unwrap();
        assert_eq!(out.pixel, [0.2, 0.3, 0.4]);
        assert!(out.trace.is_empty());
    }

    fn random_grid(rng: &mut ChaCha8Rng, n: usize, deg: u8) -> DenseGrid<f64> {
        let d = GridDims::cube(n, -1.0, 1.0).unwrap();
        let mut g = DenseGrid::zeros(d, deg).unwrap();
        for v in g.density.iter_mut() {
            *v = rng.gen_range(-2.0..6.0);
        }
        for v in g.features.iter_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
        g
    }

    fn random_ray(rng: &mut ChaCha8Rng) -> Ray<f64> {
        let o = [
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(2.0..3.0),
        ];
        let target = [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)];
        Ray::towards(o, [target[0] - o[0], target[1] - o[1], target[2] - o[2]])
    }

    #[test]
    fn trace_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = RenderConfig::default();
        for _ in 0..50 {
            let g = random_grid(&mut rng, 6, 2);
            let r = random_ray(&mut rng);
            let out = render_ray(&g, &r, &cfg).unwrap();
            let mut prev = 1.0;
            let mut sum = 0.0;
            for s in &out.trace {
                assert!(s.transmittance <= prev);
                for v in [s.alpha, s.transmittance, s.importance] {
                    assert!((0.0..=1.0).contains(&v));
                }
                prev = s.transmittance;
                sum += s.importance;
            }
            assert!((sum + out.final_transmittance - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn fast_path_matches_trace_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = RenderConfig::default();
        let mut scratch = Vec::new();
        for _ in 0..30 {
            let g = random_grid(&mut rng, 5, 1);
            let r = random_ray(&mut rng);
            let a = render_ray(&g, &r, &cfg).unwrap().pixel;
            let b = render_pixel(&g, &r, &cfg, &mut scratch);
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn early_stop_zero_matches_full_march() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let g = random_grid(&mut rng, 6, 0);
            let r = random_ray(&mut rng);
            let full = render_ray(
                &g,
                &r,
                &RenderConfig {
                    early_stop_t: 0.0,
                    ..Default::default()
                },
            )
            .unwrap();
            let stopped = render_ray(&g, &r, &RenderConfig::default()).unwrap();
            for c in 0..3 {
                // Whatever early stop drops is bounded by the residual transmittance.
                assert!((full.pixel[c] - stopped.pixel[c]).abs() <= 2e-4);
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_grid(&mut rng, 5, 2);
        let r = random_ray(&mut rng);
        let grad = render_ray_backward(&g, &r, &RenderConfig::default(), [0.0; 3]).unwrap();
        assert!(grad.triples().iter().all(|e| e.value == 0.0));
    }

    #[test]
    fn single_sample_density_derivative() {
        // A 2x2x2 grid of constant density, one sample at the center.
        let d = GridDims::cube(2, 0.0, 1.0).unwrap();
        let cfg = RenderConfig {
            step_size: 1.0 / d.voxel_diagonal(),
            early_stop_t: 0.0,
            background: [0.0; 3],
        };
        let ray = Ray::towards([0.5, 0.5, -1.0], [0.0, 0.0, 1.0]);
        let delta = cfg.step_length(&d);
        for raw in [0.7f64, -0.7] {
            let g = DenseGrid::filled(d.clone(), 0, raw, 0.0).unwrap();
            // Upstream (1,1,1) and color 0.5 with black background: dC/dalpha = 1.5.
            let grad = render_ray_backward(&g, &ray, &cfg, [1.0; 3]).unwrap();
            assert_eq!(render_ray(&g, &ray, &cfg).unwrap().trace.len(), 1);
            let total: f64 = grad
                .triples()
                .iter()
                .filter(|e| e.channel == GradChannel::Density)
                .map(|e| e.value)
                .sum();
            let expect = if raw > 0.0 { 1.5 * delta * (-raw * delta).exp() } else { 0.0 };
            assert!((total - expect).abs() < 1e-12, "{total} vs {expect}");
        }
    }

    #[test]
    fn render_image_rejects_zero_resolution() {
        let g = DenseGrid::<f32>::zeros(unit(2), 0).unwrap();
        let cam = Camera::look_at([0.0, 0.0, 5.0], [0.5; 3], 10.0, 0, 4);
        assert!(matches!(
            render_image(&g, &cam, &RenderConfig::default()),
            Err(Error::ZeroResolution)
        ));
    }

    #[test]
    fn one_pixel_image_is_principal_ray() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = random_grid(&mut rng, 6, 1).cast::<f32>();
        let cam = Camera::look_at([0.3, -4.0, 1.0], [0.0, 0.1, -0.2], 50.0, 1, 1);
        let img = render_image(&g, &cam, &RenderConfig::default()).unwrap();
        let ray = Ray::towards(
            cam.center().map(|v| v as f32),
            cam.forward().map(|v| v as f32),
        );
        let p = render_ray(&g, &ray, &RenderConfig::default()).unwrap().pixel;
        for c in 0..3 {
            assert!((img.get(0, 0)[c] - p[c]).abs() < 1e-6);
        }
        let zero = DenseGrid::<f32>::zeros(g.dims.clone(), 1).unwrap();
        let cam = Camera::look_at([0.3, -4.0, 1.0], [0.0, 0.1, -0.2], 5.0, 7, 5);
        let img = render_image(&zero, &cam, &RenderConfig::default()).unwrap();
        assert!(img.data().iter().all(|v| *v == 1.0));
    }
}
