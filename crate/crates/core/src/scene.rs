//! Procedural scenes, cameras, training-view synthesis, and grid fitting.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DenseGrid, GridDims};
use crate::image::{psnr_from_mse, Image};
use crate::optim::{batch_mse_gradients, decayed_lr, Optimizer, OptimizerKind, SparseRows};
use crate::render::{intersect_aabb, Compositor, Ray, RenderConfig};
use crate::scalar::{cross3, dot3, normalize3, norm3, sub3, Real};

/// Pinhole camera. `pose` is world-from-camera `[R | t]`; the camera looks
/// down its +z axis with +x right and +y down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pose: [[f64; 4]; 3],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn look_at(eye: [f64; 3], target: [f64; 3], focal: f64, width: usize, height: usize) -> Self {
        let forward = normalize3(sub3(target, eye));
        let mut up = [0.0, 0.0, 1.0];
        if dot3(forward, up).abs() > 0.999 {
            up = [0.0, 1.0, 0.0];
        }
        let right = normalize3(cross3(forward, up));
        let down = cross3(forward, right);
        let mut pose = [[0.0; 4]; 3];
        for r in 0..3 {
            pose[r] = [right[r], down[r], forward[r], eye[r]];
        }
        Camera {
            pose,
            focal,
            width,
            height,
        }
    }

    pub fn center(&self) -> [f64; 3] {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// Viewing axis in world space.
    pub fn forward(&self) -> [f64; 3] {
        [self.pose[0][2], self.pose[1][2], self.pose[2][2]]
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn ray<T: Real>(&self, px: usize, py: usize) -> Ray<T> {
        let x = (px as f64 + 0.5 - self.width as f64 / 2.0) / self.focal;
        let y = (py as f64 + 0.5 - self.height as f64 / 2.0) / self.focal;
        let cam = [x, y, 1.0];
        let d: [f64; 3] = std::array::from_fn(|r| {
            self.pose[r][0] * cam[0] + self.pose[r][1] * cam[1] + self.pose[r][2] * cam[2]
        });
        let d = normalize3(d);
        Ray {
            origin: self.center().map(T::of),
            direction: d.map(T::of),
            t_near: T::zero(),
            t_far: T::infinity(),
        }
    }

    /// Largest deviation of `R^T R` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|r| self.pose[r][i] * self.pose[r][j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - e).abs());
            }
        }
        worst
    }
}

/// `n` cameras on a Fibonacci sphere around `look_at`, all aimed at it.
/// The seed rotates the lattice about the vertical axis.
pub fn generate_cameras(
    n: usize,
    radius: f64,
    look_at: [f64; 3],
    resolution: (usize, usize),
    focal: f64,
    seed: u64,
) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one camera".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("camera radius must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    Ok((0..n)
        .map(|k| {
            let z = 1.0 - (2 * k + 1) as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = phase + golden * k as f64;
            let eye = [
                look_at[0] + radius * r * phi.cos(),
                look_at[1] + radius * r * phi.sin(),
                look_at[2] + radius * z,
            ];
            Camera::look_at(eye, look_at, focal, resolution.0, resolution.1)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box with full extents `size`.
    Box { size: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    pub color: [f64; 3],
    pub density: f64,
}

impl Primitive {
    /// Closed-boundary containment.
    pub fn contains(&self, x: [f64; 3]) -> bool {
        let d = sub3(x, self.center);
        match self.shape {
            Shape::Sphere { radius } => norm3(d) <= radius,
            Shape::Box { size } => (0..3).all(|a| d[a].abs() <= size[a] / 2.0),
        }
    }
}

/// Analytic scene: an ordered list of primitives inside a bounding box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub aabb_min: [f64; 3],
    pub aabb_max: [f64; 3],
    pub background: [f64; 3],
    pub primitives: Vec<Primitive>,
}

/// The scene bundled with the crate and used by default.
pub const TOY_SCENE_JSON: &str = include_str!("../scenes/toy.json");

impl SceneSpec {
    pub fn toy() -> Self {
        Self::from_json(TOY_SCENE_JSON).expect("bundled scene parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.background) {
            return Err(Error::InvalidArgument("background outside [0,1]".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density >= 0.0) || !in_unit(&p.color) {
                return Err(Error::InvalidArgument(format!(
                    "primitive {i}: density must be >= 0 and color in [0,1]"
                )));
            }
        }
        if (0..3).any(|a| !(self.aabb_max[a] > self.aabb_min[a])) {
            return Err(Error::InvalidArgument("empty scene bounds".into()));
        }
        Ok(())
    }

    /// Cubic-voxel grid dimensions of resolution `n` over the scene bounds.
    pub fn grid_dims(&self, n: usize) -> Result<GridDims> {
        GridDims::new([n; 3], self.aabb_min, self.aabb_max)
    }
}

/// Density and color of the first primitive containing `x`.
pub fn analytic_field(spec: &SceneSpec, x: [f64; 3]) -> (f64, [f64; 3]) {
    spec.primitives
        .iter()
        .find(|p| p.contains(x))
        .map(|p| (p.density, p.color))
        .unwrap_or((0.0, [0.0; 3]))
}

/// Training or test views of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub dims: GridDims,
    pub background: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dims: GridDims,
    background: [f64; 3],
    views: Vec<ManifestView>,
}

#[derive(Serialize, Deserialize)]
struct ManifestView {
    camera: Camera,
    image: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.cameras.iter().map(|c| c.width * c.height).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() != self.images.len() {
            return Err(Error::InvalidArgument("one image per camera required".into()));
        }
        for (c, i) in self.cameras.iter().zip(&self.images) {
            if c.width != i.width() || c.height != i.height() {
                return Err(Error::InvalidArgument("image size differs from camera".into()));
            }
        }
        Ok(())
    }

    /// Writes `cameras.json` plus one VQIM image per view into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut views = Vec::new();
        for (i, (cam, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            let name = format!("view_{i:03}.vqim");
            img.write_vqim(&dir.join(&name))?;
            views.push(ManifestView {
                camera: cam.clone(),
                image: name,
            });
        }
        let manifest = Manifest {
            dims: self.dims.clone(),
            background: self.background,
            views,
        };
        std::fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("cameras.json"))?)?;
        let mut cameras = Vec::new();
        let mut images = Vec::new();
        for v in manifest.views {
            images.push(Image::read_vqim(&dir.join(&v.image))?);
            cameras.push(v.camera);
        }
        let ds = Dataset {
            cameras,
            images,
            dims: manifest.dims,
            background: manifest.background,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Ray and ground-truth color of pixel `pixel` (row-major) in view `view`.
    pub fn sample<T: Real>(&self, view: usize, pixel: usize) -> (Ray<T>, [T; 3]) {
        let cam = &self.cameras[view];
        let (px, py) = (pixel % cam.width, pixel / cam.width);
        let rgb = self.images[view].get(px, py);
        (cam.ray(px, py), rgb.map(|v| T::of(v as f64)))
    }
}

/// Raymarches the analytic field of `spec` with a step of a quarter of
/// the fitting grid's voxel diagonal. The scene background replaces
/// `cfg.background`.
pub fn render_analytic_ray(spec: &SceneSpec, dims: &GridDims, ray: &Ray<f64>, cfg: &RenderConfig) -> [f64; 3] {
    let bg = spec.background;
    let Some((t0, t1)) = intersect_aabb(ray, dims) else {
        return bg;
    };
    let step = 0.25 * dims.voxel_diagonal();
    let mut comp = Compositor::<f64>::new(cfg.early_stop_t);
    let mut t = t0 + 0.5 * step;
    while t < t1 {
        if comp.saturated() {
            break;
        }
        let (sigma, color) = analytic_field(spec, ray.at(t));
        if sigma > 0.0 {
            comp.push(sigma, step, color);
        }
        t += step;
    }
    comp.finish(bg)
}

pub fn render_dataset(
    spec: &SceneSpec,
    cameras: &[Camera],
    dims: &GridDims,
    cfg: &RenderConfig,
) -> Result<Dataset> {
    cfg.validate()?;
    let images = cameras
        .iter()
        .map(|cam| {
            if cam.width == 0 || cam.height == 0 {
                return Err(Error::ZeroResolution);
            }
            let mut data = vec![0f32; cam.width * cam.height * 3];
            data.par_chunks_mut(cam.width * 3).enumerate().for_each(|(py, row)| {
                for px in 0..cam.width {
                    let p = render_analytic_ray(spec, dims, &cam.ray(px, py), cfg);
                    for c in 0..3 {
                        row[px * 3 + c] = p[c] as f32;
                    }
                }
            });
            Ok(Image::from_rgb(cam.width, cam.height, data))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        cameras: cameras.to_vec(),
        images,
        dims: dims.clone(),
        background: spec.background,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub lr_density: f64,
    pub lr_features: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub optimizer: OptimizerKind,
    /// Raw density every voxel starts from.
    pub init_density: f64,
    pub seed: u64,
    pub step_size: f64,
    pub early_stop_t: f64,
    /// Weight of the squared-difference smoothness term on raw density,
    /// applied to the voxels each batch touches. It is relative to the
    /// batch mean squared error, and Adam rescales per coordinate, so
    /// useful values are tiny.
    pub tv_density: f64,
    /// Same for the SH features.
    pub tv_features: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            rays_per_batch: 4096,
            lr_density: 0.1,
            lr_features: 0.02,
            lr_decay: 0.3,
            lr_decay_every: 1000,
            optimizer: OptimizerKind::Adam,
            init_density: 0.01,
            seed: 0,
            step_size: 0.5,
            early_stop_t: 1e-4,
            tv_density: 3e-8,
            tv_features: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0
            || self.rays_per_batch == 0
            || !(self.lr_density >= 0.0)
            || !(self.lr_features >= 0.0)
            || !(self.lr_decay > 0.0)
            || self.lr_decay_every == 0
            || !(self.tv_density >= 0.0)
            || !(self.tv_features >= 0.0)
        {
            return Err(Error::InvalidArgument("invalid training configuration".into()));
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

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    pub grid: DenseGrid<T>,
    /// PSNR of the mean batch loss over the last 100 iterations.
    pub train_psnr: f64,
    /// Batch MSE per iteration.
    pub losses: Vec<f64>,
}

/// Uniformly random `(view, pixel)` batch.
pub(crate) fn sample_batch<T: Real>(
    dataset: &Dataset,
    rng: &mut ChaCha8Rng,
    count: usize,
) -> Vec<(Ray<T>, [T; 3])> {
    let offsets: Vec<usize> = dataset
        .cameras
        .iter()
        .scan(0, |acc, c| {
            let start = *acc;
            *acc += c.width * c.height;
            Some(start)
        })
        .collect();
    let total = dataset.pixel_count();
    (0..count)
        .map(|_| {
            let g = rng.gen_range(0..total);
            let view = offsets.partition_point(|&o| o <= g) - 1;
            dataset.sample(view, g - offsets[view])
        })
        .collect()
}

/// Fits a grid from a uniform initialization.
pub fn fit_grid<T: Real>(
    dataset: &Dataset,
    dims: &GridDims,
    sh_degree: u8,
    cfg: &TrainConfig,
) -> Result<FitResult<T>> {
    let init = DenseGrid::filled(dims.clone(), sh_degree, T::of(cfg.init_density), T::zero())?;
    fit_grid_from(init, dataset, cfg)
}

/// Gradient of `w/2 * sum (x_v - x_u)^2` over the six axis neighbors `u`
/// of every touched voxel `v`, added to that voxel's row only.
fn add_smoothness<T: Real>(
    grid: &DenseGrid<T>,
    cfg: &TrainConfig,
    g_density: &mut SparseRows<T>,
    g_features: &mut SparseRows<T>,
) {
    let dims = &grid.dims;
    let shape = dims.shape();
    let c = grid.feature_dim();
    let (wd, wf) = (T::of(cfg.tv_density), T::of(cfg.tv_features));
    let rows: Vec<u32> = g_density.touched().to_vec();
    let mut acc = vec![T::zero(); c];
    for v in rows {
        let v = v as usize;
        let p = dims.coords(v);
        let mut dd = T::zero();
        acc.iter_mut().for_each(|a| *a = T::zero());
        for axis in 0..3 {
            for step in [-1isize, 1] {
                let q = p[axis] as isize + step;
                if q < 0 || q >= shape[axis] as isize {
                    continue;
                }
                let mut n = p;
                n[axis] = q as usize;
                let u = dims.linear_index(n[0], n[1], n[2]);
                dd += grid.density[v] - grid.density[u];
                let (fv, fu) = (grid.voxel_features(v), grid.voxel_features(u));
                for j in 0..c {
                    acc[j] += fv[j] - fu[j];
                }
            }
        }
        g_density.row_mut(v)[0] += wd * dd;
        for (r, a) in g_features.row_mut(v).iter_mut().zip(&acc) {
            *r += wf * *a;
        }
    }
}

/// Minimizes mean squared pixel error from `init` by gradient descent on
/// random ray batches.
pub fn fit_grid_from<T: Real>(
    init: DenseGrid<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut grid = init;
    grid.validate()?;
    let render_cfg = cfg.render_config(dataset.background);
    let n = grid.dims.len();
    let c = grid.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g_density = SparseRows::<T>::new(n, 1);
    let mut g_features = SparseRows::<T>::new(n, c);
    let mut opt_density = Optimizer::new(cfg.optimizer, n);
    let mut opt_features = Optimizer::new(cfg.optimizer, n * c);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = sample_batch::<T>(dataset, &mut rng, cfg.rays_per_batch);
        let bg = batch_mse_gradients(&grid, &batch, &render_cfg);
        let loss = bg.sse / (3.0 * batch.len() as f64);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged);
        }
        losses.push(loss);
        for chunk in &bg.chunks {
            for s in chunk {
                for k in 0..8 {
                    let w = s.stencil.weights[k];
                    if w == T::zero() {
                        continue;
                    }
                    let v = s.stencil.voxels[k] as usize;
                    g_density.row_mut(v)[0] += w * s.d_density;
                    for (r, d) in g_features.row_mut(v).iter_mut().zip(&s.d_coeffs[..c]) {
                        *r += w * *d;
                    }
                }
            }
        }
        if cfg.tv_density > 0.0 || cfg.tv_features > 0.0 {
            add_smoothness(&grid, cfg, &mut g_density, &mut g_features);
        }
        let decay = |lr| decayed_lr(lr, cfg.lr_decay, cfg.lr_decay_every, it);
        opt_density.apply(&mut grid.density, &g_density, decay(cfg.lr_density));
        opt_features.apply(&mut grid.features, &g_features, decay(cfg.lr_features));
        g_density.clear();
        g_features.clear();
    }
    if grid.density.iter().chain(&grid.features).any(|v| !v.is_finite()) {
        return Err(Error::TrainingDiverged);
    }
    let tail = &losses[losses.len().saturating_sub(100)..];
    let train_psnr = psnr_from_mse(tail.iter().sum::<f64>() / tail.len() as f64);
    Ok(FitResult {
        grid,
        train_psnr,
        losses,
    })
}
