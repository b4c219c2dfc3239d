use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TripletSample;
use crate::stack::STACK_DEPTH;

/// Bounds for random geometric and brightness augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    /// Degrees, within `[-45, 45]`.
    pub rotation_range: (f64, f64),
    pub allow_hflip: bool,
    pub allow_vflip: bool,
    /// Magnitude of the additive brightness shift, within `[0, 1]`; the sign is random.
    pub brightness_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            rotation_range: (-45.0, 45.0),
            allow_hflip: true,
            allow_vflip: true,
            brightness_range: (0.0, 0.1),
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    /// Bounds clamped into their legal ranges.
    pub fn clamped(&self) -> Self {
        let rot = |v: f64| v.clamp(-45.0, 45.0);
        let unit = |v: f64| v.clamp(0.0, 1.0);
        let (r0, r1) = (rot(self.rotation_range.0), rot(self.rotation_range.1));
        let (b0, b1) = (unit(self.brightness_range.0), unit(self.brightness_range.1));
        Self {
            rotation_range: (r0.min(r1), r0.max(r1)),
            brightness_range: (b0.min(b1), b0.max(b1)),
            ..self.clone()
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> AugmentParams {
        let spec = self.clamped();
        let uniform = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let angle_deg = uniform(rng, spec.rotation_range);
        let hflip = spec.allow_hflip && rng.random_bool(0.5);
        let vflip = spec.allow_vflip && rng.random_bool(0.5);
        let magnitude = uniform(rng, spec.brightness_range);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        AugmentParams {
            angle_deg,
            hflip,
            vflip,
            brightness_delta: sign * magnitude,
        }
    }
}

/// One concrete augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Counter-clockwise in display coordinates (x right, y down), about the image centre.
    pub angle_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub brightness_delta: f64,
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Random augmentation of one triplet; the draw depends only on `spec.seed` and the sample id.
pub fn augment(t: &TripletSample, spec: &AugmentationSpec) -> TripletSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stable_hash(&t.id));
    let params = spec.draw(&mut rng);
    apply_augmentation(t, &params)
}

/// Applies flips, then rotation (bilinear, zero fill), then the brightness shift to
/// all three slices alike, clipping to `[0, 1]`. Label, task and provenance are kept.
pub fn apply_augmentation(t: &TripletSample, p: &AugmentParams) -> TripletSample {
    let size = t.stack.size();
    let mut out = t.clone();
    out.id = format!("{}+aug", t.id);
    let c = (size as f64 - 1.0) / 2.0;
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let identity_geometry = p.angle_deg == 0.0;
    for s in 0..STACK_DEPTH {
        let mut src: Vec<f32> = t.stack.slice(s).to_vec();
        if p.hflip {
            for row in src.chunks_mut(size) {
                row.reverse();
            }
        }
        if p.vflip {
            let rows: Vec<Vec<f32>> = src.chunks(size).rev().map(<[f32]>::to_vec).collect();
            src = rows.concat();
        }
        let dst = out.stack.slice_mut(s);
        for y in 0..size {
            for x in 0..size {
                let v = if identity_geometry {
                    src[y * size + x]
                } else {
                    // inverse map: rotate the output coordinate by -angle
                    let (dx, dy) = (x as f64 - c, y as f64 - c);
                    let sx = c + dx * cos + dy * sin;
                    let sy = c - dx * sin + dy * cos;
                    bilinear(&src, size, sx, sy)
                };
                dst[y * size + x] = (v as f64 + p.brightness_delta).clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

fn bilinear(img: &[f32], size: usize, x: f64, y: f64) -> f32 {
    let max = (size - 1) as f64;
    if x < 0.0 || y < 0.0 || x > max || y > max {
        return 0.0;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let a = img[y0 * size + x0] * (1.0 - fx) + img[y0 * size + x1] * fx;
    let b = img[y1 * size + x0] * (1.0 - fx) + img[y1 * size + x1] * fx;
    a * (1.0 - fy) + b * fy
}

/// The training set plus one augmented copy per sample.
pub fn augment_training_set(
    samples: &[&TripletSample],
    spec: &AugmentationSpec,
) -> Vec<TripletSample> {
    let mut out: Vec<TripletSample> = samples.iter().map(|&s| s.clone()).collect();
    out.extend(samples.iter().map(|s| augment(s, spec)));
    out
}
