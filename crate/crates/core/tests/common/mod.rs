//! Oracles shared by integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::index::sample;

/// Weighted objective under nearest-code assignment, computed naively.
pub fn wcss(points: &[f64], w: &[f64], codes: &[f64], c: usize) -> f64 {
    points
        .chunks(c)
        .zip(w)
        .map(|(p, wi)| {
            let best = codes
                .chunks(c)
                .map(|k| k.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            wi * best
        })
        .sum()
}

/// Weighted Lloyd from `k` distinct random points, run to a fixed point.
pub fn lloyd(points: &[f64], w: &[f64], c: usize, k: usize, rng: &mut ChaCha8Rng) -> f64 {
    let m = w.len();
    let codes: Vec<f64> = sample(rng, m, k)
        .iter()
        .flat_map(|i| points[i * c..(i + 1) * c].to_vec())
        .collect();
    lloyd_from(points, w, c, codes)
}

/// Weighted Lloyd iterations from the given codes until assignments settle.
pub fn lloyd_from(points: &[f64], w: &[f64], c: usize, mut codes: Vec<f64>) -> f64 {
    let m = w.len();
    let k = codes.len() / c;
    let mut prev = vec![usize::MAX; m];
    for _ in 0..1000 {
        let assign: Vec<usize> = points
            .chunks(c)
            .map(|p| {
                let mut best = (f64::INFINITY, 0);
                for (j, code) in codes.chunks(c).enumerate() {
                    let d: f64 = code.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                best.1
            })
            .collect();
        if assign == prev {
            break;
        }
        let mut sums = vec![0.0; k * c];
        let mut tot = vec![0.0; k];
        for (i, &a) in assign.iter().enumerate() {
            tot[a] += w[i];
            for d in 0..c {
                sums[a * c + d] += w[i] * points[i * c + d];
            }
        }
        for j in 0..k {
            if tot[j] > 0.0 {
                for d in 0..c {
                    codes[j * c + d] = sums[j * c + d] / tot[j];
                }
            }
        }
        prev = assign;
    }
    wcss(points, w, &codes, c)
}

pub fn best_lloyd(points: &[f64], w: &[f64], c: usize, k: usize, restarts: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..restarts)
        .map(|_| lloyd(points, w, c, k, &mut rng))
        .fold(f64::INFINITY, f64::min)
}

/// Gaussian blobs with heavy-tailed importance.
pub struct Population {
    pub points: Vec<f64>,
    pub importance: Vec<f64>,
    pub dim: usize,
    pub k: usize,
}

pub fn random_population(rng: &mut ChaCha8Rng) -> Population {
    let dim = rng.gen_range(1..=8);
    let k = rng.gen_range(2..=16);
    let m = rng.gen_range(200..=2000);
    let blobs = rng.gen_range(2..=24);
    let centers: Vec<f64> = (0..blobs * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let spread: Vec<f64> = (0..blobs).map(|_| rng.gen_range(0.05..1.0)).collect();
    let mut points = Vec::with_capacity(m * dim);
    for _ in 0..m {
        let b = rng.gen_range(0..blobs);
        for d in 0..dim {
            let g: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * 0.87;
            points.push(centers[b * dim + d] + spread[b] * g);
        }
    }
    let importance = (0..m)
        .map(|_| {
            let z: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>();
            (1.5 * z).exp()
        })
        .collect();
    Population {
        points,
        importance,
        dim,
        k,
    }
}

pub mod fd {
    use gridvq::render::{render_ray, render_ray_backward, GradChannel, Ray, RenderConfig};
    use gridvq::{DenseGrid, GridDims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(rng: &mut ChaCha8Rng) -> (DenseGrid<f64>, Ray<f64>, [f64; 3]) {
        let dims = GridDims::cube(8, -1.0, 1.0).unwrap();
        let deg = rng.gen_range(0..=2u8);
        let mut g = DenseGrid::zeros(dims, deg).unwrap();
        for v in g.density.iter_mut() {
            *v = rng.gen_range(-1.0..3.0);
        }
        for v in g.features.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let dir: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-3);
        let o = [3.0 * dir[0] / n, 3.0 * dir[1] / n, 3.0 * dir[2] / n];
        let target: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.7..0.7));
        let ray = Ray::towards(o, [target[0] - o[0], target[1] - o[1], target[2] - o[2]]);
        let up: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        (g, ray, up)
    }

    fn loss(g: &DenseGrid<f64>, ray: &Ray<f64>, cfg: &RenderConfig, up: [f64; 3]) -> f64 {
        let p = render_ray(g, ray, cfg).unwrap().pixel;
        p[0] * up[0] + p[1] * up[1] + p[2] * up[2]
    }

    pub struct Report {
        pub cases: usize,
        pub checked: usize,
        pub worst_abs: f64,
        pub failures: Vec<String>,
    }

    /// Compares every analytic gradient entry of a random linear loss on
    /// one ray against a central difference with step `h`.
    pub fn check(cases: usize, seed: u64, h: f64, rel: f64, abs: f64) -> Report {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = RenderConfig {
            background: [0.3, 0.5, 0.9],
            ..Default::default()
        };
        let mut r = Report {
            cases,
            checked: 0,
            worst_abs: 0.0,
            failures: Vec::new(),
        };
        for case in 0..cases {
            let (mut g, ray, up) = random_case(&mut rng);
            let grad = render_ray_backward(&g, &ray, &cfg, up).unwrap();
            let c = g.feature_dim();
            for e in grad.triples() {
                let idx = match e.channel {
                    GradChannel::Density => None,
                    GradChannel::Feature(j) => Some(e.voxel * c + j as usize),
                };
                let at = |g: &mut DenseGrid<f64>, d: f64| {
                    let slot = match idx {
                        None => &mut g.density[e.voxel],
                        Some(i) => &mut g.features[i],
                    };
                    let orig = *slot;
                    *slot = orig + d;
                    let l = loss(g, &ray, &cfg, up);
                    match idx {
                        None => g.density[e.voxel] = orig,
                        Some(i) => g.features[i] = orig,
                    }
                    l
                };
                let fd = (at(&mut g, h) - at(&mut g, -h)) / (2.0 * h);
                let err = (fd - e.value).abs();
                if !(err <= abs || err <= rel * fd.abs().max(e.value.abs())) {
                    r.failures.push(format!("case {case} {e:?}: analytic {} fd {fd}", e.value));
                }
                r.worst_abs = r.worst_abs.max(err);
                r.checked += 1;
            }
        }
        r
    }
}

pub mod models {
    use gridvq::{feature_dim, Codebook, GridDims, VQModel, VoxelClass, VoxelClassMask};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Random model with every label mix, codebook sizes from 1 to 600 and
    /// raw f32 codes that are not yet binary16-representable.
    pub fn random_model(rng: &mut ChaCha8Rng) -> VQModel<f32> {
        let dims = GridDims::new(
            [rng.gen_range(2..9), rng.gen_range(2..9), rng.gen_range(2..9)],
            [-1.5, -2.0, -0.5],
            [1.0, 2.0, 0.75],
        )
        .unwrap();
        let deg = rng.gen_range(0..=2u8);
        let c = feature_dim(deg);
        let k = rng.gen_range(1..600usize);
        let p: [f64; 3] = {
            let a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let s: f64 = a.iter().sum();
            a.map(|x| x / s)
        };
        let labels = (0..dims.len())
            .map(|_| {
                let u: f64 = rng.gen();
                if u < p[0] {
                    VoxelClass::Pruned
                } else if u < p[0] + p[1] {
                    VoxelClass::Vq
                } else {
                    VoxelClass::Kept
                }
            })
            .collect();
        let mask = VoxelClassMask { labels };
        let n = mask.counts();
        let spread = 10f32.powf(rng.gen_range(-2.0..2.0));
        let val = |rng: &mut ChaCha8Rng| rng.gen_range(-spread..spread);
        VQModel {
            dims,
            sh_degree: deg,
            codebook: Codebook::new(c, (0..k * c).map(|_| val(rng)).collect()).unwrap(),
            indices: (0..n.vq).map(|_| rng.gen_range(0..k as u32)).collect(),
            kept_features: (0..n.kept * c).map(|_| val(rng)).collect(),
            density: (0..n.vq + n.kept).map(|_| val(rng)).collect(),
            mask,
        }
    }
}
