//! Synthetic short-axis stacks with known geometry.
//!
//! The "ventricle" is a half-ellipsoid cut by equally spaced slices: its
//! cross-section is a small disk near the apex (slice 1) that widens towards
//! the base (slice n). Each disk is a bright blood pool inside a grey
//! myocardial wall, except at the apex where the slice only grazes the wall
//! and shows a solid grey cap hugged by a bright arc of epicardial fat. The
//! basal slice carries a crescent attached to the disk, standing in for the
//! atrium/outflow tract. Everything sits inside a dim elliptical "body" on a
//! dark background with Gaussian noise, and a few bright blobs away from the
//! heart stand in for fat and vessels elsewhere in the chest.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::VolumeStack;
use crate::error::{Error, Result};
use crate::stack::{Mask, STACK_DEPTH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// Native in-plane size (square).
    pub size: usize,
    pub noise_sigma: f64,
    /// Bright blobs placed in the body away from the heart, in every slice.
    pub distractors: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 128,
            noise_sigma: 0.02,
            distractors: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Disk {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        dx * dx + dy * dy <= self.r * self.r
    }
}

/// Ground-truth geometry of a phantom, in native pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub size: usize,
    /// Ventricle cross-section (outer wall) per slice; `ventricle[i - 1]` is slice `i`.
    pub ventricle: Vec<Disk>,
    /// Myocardial wall thickness.
    pub wall: f64,
    /// The crescent is the part of this disk outside the basal ventricle disk.
    pub crescent: Disk,
    /// Apical fat is the part of this disk outside the apical cap, on slice 1 only.
    pub apical_fat: Disk,
    pub distractors: Vec<Disk>,
}

impl PhantomTruth {
    pub fn n(&self) -> usize {
        self.ventricle.len()
    }

    /// Whether native point `(x, y)` of 1-based slice `slice` is heart (ventricle or crescent).
    pub fn is_heart(&self, slice: usize, x: f64, y: f64) -> bool {
        let v = &self.ventricle[slice - 1];
        v.contains(x, y) || (slice == self.n() && self.crescent.contains(x, y))
    }

    /// Blood-pool radius of 1-based slice `slice`; zero at the apical cap.
    pub fn cavity_radius(&self, slice: usize) -> f64 {
        if slice == 1 {
            0.0
        } else {
            (self.ventricle[slice - 1].r - self.wall).max(0.0)
        }
    }

    pub fn centroid(&self) -> (f64, f64) {
        (self.ventricle[0].cx, self.ventricle[0].cy)
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: VolumeStack,
    pub truth: PhantomTruth,
}

const INTERIOR_DEPTH: f64 = 0.9;
/// Minimum distance of a distractor from the ventricle axis, as a fraction of the size.
const DISTRACTOR_CLEARANCE: f64 = 0.33;

fn radius_fraction(i: usize, n: usize) -> f64 {
    // normalised distance from the apex tip of the slice centre
    let z = INTERIOR_DEPTH * (i as f64 - 0.5) / n as f64;
    (1.0 - (1.0 - z) * (1.0 - z)).sqrt()
}

/// Deterministic phantom volume for `seed` with `n` slices.
pub fn generate_phantom(seed: u64, n: usize, spec: &PhantomSpec) -> Result<Phantom> {
    if !(8..=10).contains(&n) {
        return Err(Error::InvalidSliceCount(n));
    }
    let s = spec.size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let big_r = s * 0.2 * rng.random_range(0.9..1.1);
    let cx = s / 2.0 + s * rng.random_range(-0.08..0.08);
    let cy = s / 2.0 + s * rng.random_range(-0.08..0.08);
    let wall = s * 0.05;
    let ventricle: Vec<Disk> = (1..=n)
        .map(|i| Disk {
            cx,
            cy,
            r: big_r * radius_fraction(i, n) + wall,
        })
        .collect();
    let rn = ventricle[n - 1].r;
    let phi = rng.random_range(0.0..2.0 * PI);
    let crescent = Disk {
        cx: cx + rn * phi.cos(),
        cy: cy + rn * phi.sin(),
        r: 0.7 * rn,
    };
    let r1 = ventricle[0].r;
    let phi_fat = rng.random_range(0.0..2.0 * PI);
    let apical_fat = Disk {
        cx: cx + r1 * phi_fat.cos(),
        cy: cy + r1 * phi_fat.sin(),
        r: 0.8 * r1,
    };
    let heart_v = rng.random_range(0.75..0.95);
    let fat_v = rng.random_range(0.85..1.0);
    let crescent_v = rng.random_range(0.85..1.0);
    let myo_v = rng.random_range(0.45..0.55);
    let body_v = rng.random_range(0.2..0.3);
    let (bx, by) = (s * 0.42, s * 0.36);

    // distractors keep well clear of the heart so that a heart-sized
    // salient region leaves them out
    let mut distractors = Vec::with_capacity(spec.distractors);
    let mut attempts = 0;
    while distractors.len() < spec.distractors && attempts < 5000 {
        attempts += 1;
        let r = s * rng.random_range(0.03..0.05);
        let x = rng.random_range(r..s - r);
        let y = rng.random_range(r..s - r);
        let gap = |d: &Disk| ((x - d.cx).powi(2) + (y - d.cy).powi(2)).sqrt() - d.r - r;
        let clear = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() >= DISTRACTOR_CLEARANCE * s + r
            && gap(&crescent) > 2.0
            && distractors.iter().all(|d| gap(d) > 2.0);
        if clear {
            distractors.push(Disk { cx: x, cy: y, r });
        }
    }

    let truth = PhantomTruth {
        size: spec.size,
        ventricle,
        wall,
        crescent,
        apical_fat,
        distractors,
    };
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let px = spec.size;
    let mut slices = Vec::with_capacity(n);
    for i in 1..=n {
        let v_disk = &truth.ventricle[i - 1];
        let cavity = Disk {
            r: truth.cavity_radius(i),
            ..v_disk.clone()
        };
        let mut img = Vec::with_capacity(px * px);
        for y in 0..px {
            for x in 0..px {
                let (fx, fy) = (x as f64, y as f64);
                let mut v = 0.05;
                if ((fx - s / 2.0) / bx).powi(2) + ((fy - s / 2.0) / by).powi(2) <= 1.0 {
                    v = body_v;
                }
                if truth.distractors.iter().any(|d| d.contains(fx, fy)) {
                    v = 0.95;
                }
                if v_disk.contains(fx, fy) {
                    v = if cavity.r > 0.0 && cavity.contains(fx, fy) {
                        heart_v
                    } else {
                        myo_v
                    };
                } else if i == n && truth.crescent.contains(fx, fy) {
                    v = crescent_v;
                } else if i == 1 && truth.apical_fat.contains(fx, fy) {
                    v = fat_v;
                }
                let noisy = v + noise.sample(&mut rng);
                img.push(noisy.clamp(0.0, 1.0) as f32);
            }
        }
        slices.push(img);
    }
    let volume = VolumeStack::new(format!("phantom{seed:05}"), px, px, slices, (1.8, 1.8), 8.0)?;
    Ok(Phantom { volume, truth })
}

/// `count` phantoms with volume seeds `seed, seed + 1, ...`; slice counts cycle through 8, 9, 10.
pub fn generate_phantoms(count: usize, seed: u64, spec: &PhantomSpec) -> Result<Vec<Phantom>> {
    (0..count as u64)
        .map(|i| generate_phantom(seed + i, 8 + ((seed + i) % 3) as usize, spec))
        .collect()
}

/// Heart region of the slices `indices` rendered at `target x target`, matching
/// the centre-crop + resize applied by triplet extraction.
pub fn heart_mask(truth: &PhantomTruth, indices: &[usize; STACK_DEPTH], target: usize) -> Mask {
    let scale = truth.size as f64 / target as f64;
    let mut bits = Vec::with_capacity(STACK_DEPTH * target * target);
    for &slice in indices {
        for y in 0..target {
            for x in 0..target {
                let nx = (x as f64 + 0.5) * scale - 0.5;
                let ny = (y as f64 + 0.5) * scale - 0.5;
                bits.push(truth.is_heart(slice, nx, ny));
            }
        }
    }
    Mask::new(target, bits).expect("sized from target")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Area of the 4-connected component of pixels above `thr` containing `(cx, cy)`.
    fn component_area(img: &[f32], size: usize, cx: usize, cy: usize, thr: f32) -> usize {
        let mut seen = vec![false; img.len()];
        let mut stack = vec![(cx, cy)];
        let mut area = 0;
        while let Some((x, y)) = stack.pop() {
            let i = y * size + x;
            if seen[i] || img[i] <= thr {
                continue;
            }
            seen[i] = true;
            area += 1;
            if x > 0 {
                stack.push((x - 1, y));
            }
            if y > 0 {
                stack.push((x, y - 1));
            }
            if x + 1 < size {
                stack.push((x + 1, y));
            }
            if y + 1 < size {
                stack.push((x, y + 1));
            }
        }
        area
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_phantom(3, 9, &PhantomSpec::default()).unwrap();
        let b = generate_phantom(3, 9, &PhantomSpec::default()).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn measured_disk_area_shrinks_towards_apex() {
        let p = generate_phantom(1, 10, &PhantomSpec::default()).unwrap();
        let (cx, cy) = p.truth.centroid();
        let heart = p.truth.ventricle[0].r; // sanity: disk exists at the apex
        assert!(heart > 2.0);
        // above body and background, below the wall; the basal crescent only adds to slice 10
        let thr = 0.38;
        let areas: Vec<usize> = (1..=10)
            .map(|i| {
                component_area(
                    p.volume.slice(i),
                    128,
                    cx.round() as usize,
                    cy.round() as usize,
                    thr,
                )
            })
            .collect();
        for w in areas.windows(2) {
            assert!(w[0] < w[1], "areas not increasing base-ward: {areas:?}");
        }
    }

    #[test]
    fn different_seeds_move_the_heart() {
        let a = generate_phantom(1, 8, &PhantomSpec::default()).unwrap();
        let b = generate_phantom(2, 8, &PhantomSpec::default()).unwrap();
        let (ax, ay) = a.truth.centroid();
        let (bx, by) = b.truth.centroid();
        assert!((ax - bx).abs() + (ay - by).abs() > 0.5);
    }

    #[test]
    fn slice_count_guard() {
        assert!(matches!(
            generate_phantom(0, 11, &PhantomSpec::default()),
            Err(Error::InvalidSliceCount(11))
        ));
    }

    #[test]
    fn distractors_stay_off_the_heart() {
        let spec = PhantomSpec {
            distractors: 3,
            ..PhantomSpec::default()
        };
        let p = generate_phantom(9, 9, &spec).unwrap();
        assert!(!p.truth.distractors.is_empty());
        for d in &p.truth.distractors {
            assert!(!p.truth.is_heart(9, d.cx, d.cy));
        }
    }

    #[test]
    fn intensities_in_unit_range() {
        let p = generate_phantom(4, 8, &PhantomSpec::default()).unwrap();
        assert!(p
            .volume
            .slices()
            .iter()
            .flatten()
            .all(|v| (0.0..=1.0).contains(v)));
    }
}
