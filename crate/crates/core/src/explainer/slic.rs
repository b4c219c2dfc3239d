//! SLIC superpixels for a single-channel image.
//!
//! Distance between a pixel and a cluster centre is
//! `(dI / compactness)^2 + (d_xy / step)^2`, where `step` is the nominal grid
//! spacing `sqrt(H W / n_segments)`. Each centre competes only for pixels
//! within one grid step. After convergence, components smaller than half a
//! nominal segment are merged into an adjacent label and ids are compacted.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlicParams {
    pub n_segments: usize,
    pub compactness: f64,
    pub max_iter: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            n_segments: 25,
            compactness: 0.3,
            max_iter: 1000,
        }
    }
}

/// One superpixel id per pixel, row-major over a `size x size` image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelMap {
    pub size: usize,
    pub labels: Vec<usize>,
    pub num_segments: usize,
    /// Set when the image had no intensity variation and was left as a single segment.
    pub degenerate: bool,
}

impl SuperpixelMap {
    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_segments];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

#[derive(Clone, Copy)]
struct Centre {
    y: f64,
    x: f64,
    v: f64,
}

/// Segment a square `size x size` image.
pub fn slic(img: &[f32], size: usize, params: &SlicParams) -> SuperpixelMap {
    assert_eq!(img.len(), size * size, "image is not {size}x{size}");
    let (lo, hi) = img
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if img.is_empty() || hi - lo <= 0.0 || params.n_segments <= 1 {
        return SuperpixelMap {
            size,
            labels: vec![0; img.len()],
            num_segments: usize::from(!img.is_empty()),
            degenerate: !img.is_empty() && hi - lo <= 0.0,
        };
    }
    let n = params.n_segments;
    let step = ((size * size) as f64 / n as f64).sqrt();
    let rows = ((n as f64).sqrt().round() as usize).max(1);
    let cols = ((n as f64 / rows as f64).round() as usize).max(1);
    let at = |y: usize, x: usize| img[y * size + x] as f64;
    let mut centres: Vec<Centre> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            // pixel centres sit at integer coordinates
            let y = (r as f64 + 0.5) * size as f64 / rows as f64 - 0.5;
            let x = (c as f64 + 0.5) * size as f64 / cols as f64 - 0.5;
            let (iy, ix) = (
                (y.round() as usize).min(size - 1),
                (x.round() as usize).min(size - 1),
            );
            centres.push(Centre {
                y,
                x,
                v: at(iy, ix),
            });
        }
    }
    let inv_c2 = 1.0 / (params.compactness * params.compactness);
    let inv_s2 = 1.0 / (step * step);
    let mut labels = vec![usize::MAX; size * size];
    for _ in 0..params.max_iter.max(1) {
        let mut changed = false;
        for y in 0..size {
            for x in 0..size {
                let v = at(y, x);
                let (fy, fx) = (y as f64, x as f64);
                let mut best = (f64::INFINITY, usize::MAX);
                let mut fallback = (f64::INFINITY, 0);
                for (k, c) in centres.iter().enumerate() {
                    let (dy, dx) = (fy - c.y, fx - c.x);
                    let d = (v - c.v).powi(2) * inv_c2 + (dy * dy + dx * dx) * inv_s2;
                    if dy.abs() <= step && dx.abs() <= step {
                        if d < best.0 {
                            best = (d, k);
                        }
                    } else if d < fallback.0 {
                        fallback = (d, k);
                    }
                }
                let k = if best.1 == usize::MAX {
                    fallback.1
                } else {
                    best.1
                };
                let i = y * size + x;
                if labels[i] != k {
                    labels[i] = k;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
        let mut acc = vec![(0.0, 0.0, 0.0, 0usize); centres.len()];
        for y in 0..size {
            for x in 0..size {
                let a = &mut acc[labels[y * size + x]];
                a.0 += y as f64;
                a.1 += x as f64;
                a.2 += at(y, x);
                a.3 += 1;
            }
        }
        for (c, a) in centres.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let m = a.3 as f64;
                *c = Centre {
                    y: a.0 / m,
                    x: a.1 / m,
                    v: a.2 / m,
                };
            }
        }
    }
    let min_size = ((size * size) as f64 / n as f64 * 0.5) as usize;
    let labels = enforce_connectivity(&labels, size, min_size);
    let num_segments = labels.iter().max().map_or(0, |m| m + 1);
    SuperpixelMap {
        size,
        labels,
        num_segments,
        degenerate: false,
    }
}

/// Relabel 4-connected components in raster order; components below
/// `min_size` take the label of the previously labelled neighbour they touch.
fn enforce_connectivity(labels: &[usize], size: usize, min_size: usize) -> Vec<usize> {
    let mut out = vec![usize::MAX; labels.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    let mut members = Vec::new();
    for start in 0..labels.len() {
        if out[start] != usize::MAX {
            continue;
        }
        let (sy, sx) = (start / size, start % size);
        let adjacent = neighbours(sy, sx, size)
            .filter_map(|(y, x)| {
                let l = out[y * size + x];
                (l != usize::MAX).then_some(l)
            })
            .next();
        let original = labels[start];
        members.clear();
        out[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            members.push(i);
            for (y, x) in neighbours(i / size, i % size, size) {
                let j = y * size + x;
                if out[j] == usize::MAX && labels[j] == original {
                    out[j] = next;
                    queue.push_back(j);
                }
            }
        }
        match adjacent {
            Some(a) if members.len() < min_size => {
                for &i in &members {
                    out[i] = a;
                }
            }
            _ => next += 1,
        }
    }
    out
}

fn neighbours(y: usize, x: usize, size: usize) -> impl Iterator<Item = (usize, usize)> {
    let up = (y > 0).then(|| (y - 1, x));
    let left = (x > 0).then(|| (y, x - 1));
    let down = (y + 1 < size).then(|| (y + 1, x));
    let right = (x + 1 < size).then(|| (y, x + 1));
    [up, left, down, right].into_iter().flatten()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_one_flagged_segment() {
        let m = slic(&[0.4; 64], 8, &SlicParams::default());
        assert_eq!(m.num_segments, 1);
        assert!(m.degenerate);
        assert!(m.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn labels_partition_the_image() {
        let size = 128;
        let img: Vec<f32> = (0..size * size)
            .map(|i| {
                (((i % size) as f32 / 9.0).sin() * ((i / size) as f32 / 13.0).cos() + 1.0) / 2.0
            })
            .collect();
        let m = slic(&img, size, &SlicParams::default());
        assert_eq!(m.labels.len(), 16384);
        assert!(m.labels.iter().all(|&l| l < m.num_segments));
        assert!(m.segment_sizes().iter().all(|&s| s > 0));
        assert!((15..=35).contains(&m.num_segments), "{}", m.num_segments);
    }

    #[test]
    fn bright_squares_get_their_own_segments() {
        // 5x5 grid of 15x15 bright squares centred in 25x25 cells
        let size = 125;
        let cell = 25.0;
        let inside = |y: usize, x: usize| -> Option<(usize, usize)> {
            let (r, c) = ((y as f64 / cell) as usize, (x as f64 / cell) as usize);
            let (oy, ox) = (y as f64 - r as f64 * cell, x as f64 - c as f64 * cell);
            (oy >= 5.0 && oy < 20.0 && ox >= 5.0 && ox < 20.0).then_some((r, c))
        };
        let img: Vec<f32> = (0..size * size)
            .map(|i| {
                if inside(i / size, i % size).is_some() {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let m = slic(&img, size, &SlicParams::default());
        let mut sums = vec![(0.0, 0.0, 0usize); m.num_segments];
        for (i, &l) in m.labels.iter().enumerate() {
            sums[l].0 += (i / size) as f64;
            sums[l].1 += (i % size) as f64;
            sums[l].2 += 1;
        }
        let mut hit = std::collections::BTreeSet::new();
        for (sy, sx, n) in sums {
            let (cy, cx) = (
                (sy / n as f64).round() as usize,
                (sx / n as f64).round() as usize,
            );
            if let Some(sq) = inside(cy, cx) {
                hit.insert(sq);
            }
        }
        assert!(
            hit.len() >= 20,
            "{} squares matched of {} segments",
            hit.len(),
            m.num_segments
        );
    }

    #[test]
    fn deterministic() {
        let img: Vec<f32> = (0..1024).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        assert_eq!(
            slic(&img, 32, &SlicParams::default()),
            slic(&img, 32, &SlicParams::default())
        );
    }
}
