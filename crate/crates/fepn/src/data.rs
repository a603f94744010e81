//! Deterministic synthetic scenes: a two-moons inlier distribution, a ring
//! outlier pool, rectangular outlier-exposure patches, and a frozen random
//! feature map standing in for a pretrained backbone.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabeledGrid;
use crate::special::softplus_raw;

/// Bumped whenever generated bytes would change.
pub const GENERATOR_VERSION: u32 = 1;

/// Two-moons noise level.
pub const MOON_NOISE: f64 = 0.1;

/// Analytic mean of the two-moons mixture (equal moon weights).
pub const INLIER_MEAN: [f64; 2] = [0.5, 0.25];

/// Outlier ring radii around [`INLIER_MEAN`].
pub const RING_RADII: (f64, f64) = (2.5, 3.5);

const STREAM_SCENE: u64 = 0;
const STREAM_INLIER: u64 = 1;
const STREAM_OUTLIER: u64 = 2;
const STREAM_BACKBONE: u64 = 3;

/// Seeded, stream-separated generator. ChaCha keeps draws identical across
/// platforms.
pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&0x5f45_504e_6461_7461u64.to_le_bytes());
    ChaCha20Rng::from_seed(key)
}

/// Uniform in [0, 1).
pub(crate) fn uniform(rng: &mut ChaCha20Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in (0, 1]; safe under a logarithm.
fn uniform_open(rng: &mut ChaCha20Rng) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal pair via Box–Muller.
pub(crate) fn normal_pair(rng: &mut ChaCha20Rng) -> (f64, f64) {
    let r = (-2.0 * uniform_open(rng).ln()).sqrt();
    let theta = std::f64::consts::TAU * uniform(rng);
    (r * theta.cos(), r * theta.sin())
}

fn fnv1a(words: &[u64]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for w in words {
        for byte in w.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

/// Standard normal keyed by (seed, unit, point bits) via hashed Box–Muller.
fn hashed_normal(seed: u64, unit: u64, point: [f64; 2]) -> f64 {
    let key = [seed, unit, point[0].to_bits(), point[1].to_bits()];
    let h1 = fnv1a(&key);
    let h2 = fnv1a(&[h1, 0x64697468]);
    let u = ((h1 >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64); // (0, 1]
    let v = (h2 >> 11) as f64 * (1.0 / (1u64 << 53) as f64); // [0, 1)
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

/// Two interleaving half-circles with Gaussian noise σ = 0.1; deterministic
/// per seed. Points alternate between the two moons.
pub fn make_inliers(n: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    if n == 0 {
        return Err(Error::domain("sample count must be positive"));
    }
    let mut rng = rng_for(seed, STREAM_INLIER);
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let t = std::f64::consts::PI * uniform(&mut rng);
        let base = if i % 2 == 0 {
            [t.cos(), t.sin()]
        } else {
            [1.0 - t.cos(), 0.5 - t.sin()]
        };
        let (nx, ny) = normal_pair(&mut rng);
        points.push([base[0] + MOON_NOISE * nx, base[1] + MOON_NOISE * ny]);
    }
    Ok(points)
}

/// Area-uniform annulus of radius [2.5, 3.5] around the inlier mixture mean;
/// disjoint from the moons by construction.
pub fn make_outliers(n: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    if n == 0 {
        return Err(Error::domain("sample count must be positive"));
    }
    let (r_lo, r_hi) = RING_RADII;
    let (lo2, hi2) = (r_lo * r_lo, r_hi * r_hi);
    let mut rng = rng_for(seed, STREAM_OUTLIER);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let r = (lo2 + (hi2 - lo2) * uniform(&mut rng)).sqrt();
        let theta = std::f64::consts::TAU * uniform(&mut rng);
        points.push([
            INLIER_MEAN[0] + r * theta.cos(),
            INLIER_MEAN[1] + r * theta.sin(),
        ]);
    }
    Ok(points)
}

/// H×W raw-feature scene: a random rectangular patch of area ≈
/// `outlier_fraction`·H·W carries ring samples (label 0), everything else
/// carries moon samples (label 1).
pub fn mix_scene(
    height: usize,
    width: usize,
    outlier_fraction: f64,
    seed: u64,
) -> Result<LabeledGrid> {
    if height == 0 || width == 0 {
        return Err(Error::domain("scene dimensions must be positive"));
    }
    if !(0.0..=1.0).contains(&outlier_fraction) {
        return Err(Error::domain(format!(
            "outlier_fraction must lie in [0,1], got {outlier_fraction}"
        )));
    }
    let side = outlier_fraction.sqrt();
    let patch_h = ((height as f64) * side).round() as usize;
    let patch_w = ((width as f64) * side).round() as usize;
    let (patch_h, patch_w) = (patch_h.min(height), patch_w.min(width));

    let mut rng = rng_for(seed, STREAM_SCENE);
    let top = if patch_h < height {
        (rng.next_u64() % (height - patch_h + 1) as u64) as usize
    } else {
        0
    };
    let left = if patch_w < width {
        (rng.next_u64() % (width - patch_w + 1) as u64) as usize
    } else {
        0
    };

    let cells = height * width;
    let n_out = patch_h * patch_w;
    let n_in = cells - n_out;
    let inliers = if n_in > 0 {
        make_inliers(n_in, seed)?
    } else {
        Vec::new()
    };
    let outliers = if n_out > 0 {
        make_outliers(n_out, seed)?
    } else {
        Vec::new()
    };

    let mut features = Vec::with_capacity(cells * 2);
    let mut labels = Vec::with_capacity(cells);
    let (mut next_in, mut next_out) = (0, 0);
    for row in 0..height {
        for col in 0..width {
            let in_patch = row >= top && row < top + patch_h && col >= left && col < left + patch_w;
            let p = if in_patch {
                next_out += 1;
                outliers[next_out - 1]
            } else {
                next_in += 1;
                inliers[next_in - 1]
            };
            features.extend_from_slice(&p);
            labels.push(if in_patch { 0 } else { 1 });
        }
    }
    LabeledGrid::new(height, width, 2, features, labels)
}

/// Pre-activation dither scale of the frozen backbone. The raw scene points
/// live on a 2-D sheet; without full-rank features a maximum-likelihood flow
/// concentrates density without bound and the downstream softplus logits
/// saturate. The dither is a pure function of (seed, unit, input bits), so
/// embedding stays bit-deterministic.
pub const BACKBONE_DITHER: f64 = 0.05;

/// Fixed random affine map raw-2D → D followed by softplus rectification.
/// Parameters are a pure function of the seed and are never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    seed: u64,
    dim: usize,
    weights: Vec<f64>, // dim × 2, row-major
    bias: Vec<f64>,
}

impl FrozenBackbone {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("backbone dimension must be positive"));
        }
        let mut rng = rng_for(seed, STREAM_BACKBONE);
        let mut weights = Vec::with_capacity(dim * 2);
        let mut bias = Vec::with_capacity(dim);
        for _ in 0..dim {
            let (a, b) = normal_pair(&mut rng);
            weights.push(a);
            weights.push(b);
            let (c, _) = normal_pair(&mut rng);
            bias.push(c);
        }
        Ok(Self {
            seed,
            dim,
            weights,
            bias,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rectified feature vector; all outputs are non-negative and a pure
    /// function of the input.
    pub fn embed_point(&self, point: [f64; 2]) -> Vec<f64> {
        (0..self.dim)
            .map(|d| {
                let pre = self.weights[d * 2] * point[0]
                    + self.weights[d * 2 + 1] * point[1]
                    + self.bias[d];
                let eps = hashed_normal(self.seed, d as u64, point);
                softplus_raw(pre + BACKBONE_DITHER * eps)
            })
            .collect()
    }

    /// FNV-1a over the parameter bits; used to assert the backbone stays
    /// frozen across training calls.
    pub fn params_checksum(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        let mut eat = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        self.weights.iter().for_each(|&v| eat(v));
        self.bias.iter().for_each(|&v| eat(v));
        hash
    }
}

/// Lift a raw 2-D grid into backbone feature space; labels and mask carry
/// over unchanged.
pub fn embed(backbone: &FrozenBackbone, grid: &LabeledGrid) -> Result<LabeledGrid> {
    if grid.feat_dim() != 2 {
        return Err(Error::shape(format!(
            "embed expects raw 2-D features, got dimension {}",
            grid.feat_dim()
        )));
    }
    let cells = grid.cell_count();
    let mut features = Vec::with_capacity(cells * backbone.dim());
    for cell in 0..cells {
        let raw = grid.feature_flat(cell);
        features.extend(backbone.embed_point([raw[0], raw[1]]));
    }
    LabeledGrid::new(
        grid.height(),
        grid.width(),
        backbone.dim(),
        features,
        grid.labels().to_vec(),
    )
}

/// Sidecar metadata written next to a serialized [`LabeledGrid`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridMeta {
    pub seed: u64,
    pub outlier_fraction: f64,
    pub feat_dim: usize,
    pub height: usize,
    pub width: usize,
    pub generator_version: u32,
}
