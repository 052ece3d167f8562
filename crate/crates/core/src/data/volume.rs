use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::grammar::{SizeToken, NUM_CLASSES};
use crate::error::{Error, Result};

pub const DEFAULT_EXTENTS: [usize; 3] = [16, 32, 32];

/// Scalar voxel grid `s × h × w` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        if extents.iter().any(|&e| e == 0) || extents.iter().product::<usize>() != voxels.len() {
            return Err(Error::Invalid(format!(
                "volume extents {extents:?} do not match {} voxels",
                voxels.len()
            )));
        }
        if let Some(bad) = voxels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Invalid(format!("voxel value {bad} outside [0, 1]")));
        }
        Ok(Self { extents, voxels })
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        Self {
            extents,
            voxels: vec![0.0; extents.iter().product()],
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        let [_, h, w] = self.extents;
        self.voxels[(z * h + y) * w + x]
    }

    /// Mean over the voxels of a box.
    pub fn box_mean(&self, zone: &Zone) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        zone.for_each(|z, y, x| {
            total += self.at(z, y, x) as f64;
            n += 1;
        });
        total / n as f64
    }
}

/// Half-open axis-aligned box `[lo, hi)` per axis (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Zone {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Zone {
    pub fn contains(&self, p: [f32; 3], margin: f32) -> bool {
        (0..3).all(|i| p[i] - margin >= self.lo[i] as f32 && p[i] + margin <= self.hi[i] as f32)
    }

    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        for z in self.lo[0]..self.hi[0] {
            for y in self.lo[1]..self.hi[1] {
                for x in self.lo[2]..self.hi[2] {
                    f(z, y, x);
                }
            }
        }
    }
}

fn split(extent: usize, parts: usize, i: usize) -> (usize, usize) {
    (extent * i / parts, extent * (i + 1) / parts)
}

/// Zone of class `k`: the volume tiled 2 (z) × 3 (y) × 3 (x).
pub fn class_zone(k: usize, extents: [usize; 3]) -> Zone {
    assert!(k < NUM_CLASSES);
    let (iz, iy, ix) = (k / 9, (k / 3) % 3, k % 3);
    let (z0, z1) = split(extents[0], 2, iz);
    let (y0, y1) = split(extents[1], 3, iy);
    let (x0, x1) = split(extents[2], 3, ix);
    Zone {
        lo: [z0, y0, x0],
        hi: [z1, y1, x1],
    }
}

/// The anatomical background shared by every case: smooth, low-frequency,
/// within `[0.15, 0.55]`.
pub fn background_template(extents: [usize; 3]) -> Vec<f32> {
    use std::f32::consts::PI;
    let [s, h, w] = extents;
    let mut out = Vec::with_capacity(s * h * w);
    for z in 0..s {
        let fz = (z as f32 + 0.5) / s as f32;
        for y in 0..h {
            let fy = (y as f32 + 0.5) / h as f32;
            for x in 0..w {
                let fx = (x as f32 + 0.5) / w as f32;
                // body ellipse plus slow oscillations
                let r2 = ((fx - 0.5) / 0.45).powi(2) + ((fy - 0.5) / 0.4).powi(2);
                let body = if r2 < 1.0 { 0.12 * (1.0 - r2) } else { 0.0 };
                let wave = 0.06 * (2.0 * PI * fx).sin() * (PI * fy).cos() + 0.04 * (2.0 * PI * fz + 0.7).cos();
                out.push(0.32 + body + wave);
            }
        }
    }
    out
}

/// One Gaussian lesion inside its class zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub class_index: usize,
    pub center: [f32; 3],
    pub radius: f32,
    pub intensity_delta: f32,
}

pub const RADIUS_RANGE: (f32, f32) = (1.5, 3.5);
pub const DELTA_RANGE: (f32, f32) = (0.25, 0.4);

impl LesionSpec {
    /// Draws a lesion whose footprint (the ball of `radius`) lies in the zone.
    pub fn sample(class_index: usize, extents: [usize; 3], rng: &mut impl Rng) -> Self {
        let zone = class_zone(class_index, extents);
        let max_r = (0..3)
            .map(|i| (zone.hi[i] - zone.lo[i]) as f32 / 2.0)
            .fold(f32::INFINITY, f32::min);
        let radius = rng.gen_range(RADIUS_RANGE.0..RADIUS_RANGE.1).min(max_r);
        let mut center = [0.0; 3];
        for i in 0..3 {
            let lo = zone.lo[i] as f32 + radius;
            let hi = zone.hi[i] as f32 - radius;
            center[i] = if hi > lo { rng.gen_range(lo..hi) } else { (lo + hi) / 2.0 };
        }
        let intensity_delta = rng.gen_range(DELTA_RANGE.0..DELTA_RANGE.1);
        Self {
            class_index,
            center,
            radius,
            intensity_delta,
        }
    }

    pub fn size(&self) -> SizeToken {
        let span = RADIUS_RANGE.1 - RADIUS_RANGE.0;
        if self.radius < RADIUS_RANGE.0 + span / 3.0 {
            SizeToken::Small
        } else if self.radius < RADIUS_RANGE.0 + 2.0 * span / 3.0 {
            SizeToken::Medium
        } else {
            SizeToken::Large
        }
    }

    /// Voxel centres within `radius` of the lesion centre.
    pub fn footprint(&self, extents: [usize; 3]) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        let zone = class_zone(self.class_index, extents);
        zone.for_each(|z, y, x| {
            if self.dist2([z, y, x]) <= self.radius * self.radius {
                out.push([z, y, x]);
            }
        });
        out
    }

    fn dist2(&self, p: [usize; 3]) -> f32 {
        (0..3)
            .map(|i| (p[i] as f32 + 0.5 - self.center[i]).powi(2))
            .sum()
    }

    /// Adds the truncated Gaussian bump (sd = 0.75 · radius) to `voxels`.
    pub fn paint(&self, extents: [usize; 3], voxels: &mut [f32]) {
        let [_, h, w] = extents;
        let sd = 0.75 * self.radius;
        for [z, y, x] in self.footprint(extents) {
            let d2 = self.dist2([z, y, x]);
            voxels[(z * h + y) * w + x] += self.intensity_delta * (-d2 / (2.0 * sd * sd)).exp();
        }
    }
}

/// Background template plus seeded noise and lesions, clamped to `[0, 1]`.
pub fn synthesize_volume(
    extents: [usize; 3],
    noise_sd: f32,
    lesions: &[LesionSpec],
    rng: &mut impl Rng,
) -> Volume {
    let mut voxels = background_template(extents);
    if noise_sd > 0.0 {
        let normal = Normal::new(0.0f32, noise_sd).expect("finite sd");
        voxels.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    for l in lesions {
        l.paint(extents, &mut voxels);
    }
    voxels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Volume { extents, voxels }
}

/// `clamp(gain·v + bias + noise)`, noise ~ N(0, noise_sd).
pub fn domain_shift_transform(v: &Volume, gain: f32, bias: f32, noise_sd: f32, rng: &mut impl Rng) -> Volume {
    let normal = (noise_sd > 0.0).then(|| Normal::new(0.0f32, noise_sd).expect("finite sd"));
    let voxels = v
        .voxels
        .iter()
        .map(|&x| {
            let n = normal.as_ref().map_or(0.0, |d| d.sample(rng));
            (gain * x + bias + n).clamp(0.0, 1.0)
        })
        .collect();
    Volume {
        extents: v.extents,
        voxels,
    }
}
