//! Raw loops behind the tape ops. Shapes are validated by the caller.

use crate::float::Float;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub k: [usize; 3],
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.d * self.h * self.w
    }
    fn pad(&self) -> [usize; 3] {
        [self.k[0] / 2, self.k[1] / 2, self.k[2] / 2]
    }
}

/// Valid output range `[lo, hi)` along an axis of length `len` for kernel offset `k`
/// under same-padding `pad`, together with the matching input start.
#[inline]
fn span(len: usize, k: usize, pad: usize) -> Option<(usize, usize, usize)> {
    // input index = out + k - pad
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    if lo >= hi {
        return None;
    }
    Some((lo, hi, lo + k - pad))
}

#[inline]
fn axpy<T: Float>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Stride-1 same-padded 3D convolution (cross-correlation).
pub(crate) fn conv3d_forward<T: Float>(g: ConvGeom, x: &[T], wt: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.plane();
    let [kd, kh, kw] = g.k;
    let [pd, ph, pw] = g.pad();
    let mut out = vec![T::zero(); g.n * g.co * plane];
    for n in 0..g.n {
        for co in 0..g.co {
            let ob = (n * g.co + co) * plane;
            out[ob..ob + plane].iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..g.ci {
                let ib = (n * g.ci + ci) * plane;
                let wb = (co * g.ci + ci) * kd * kh * kw;
                for a in 0..kd {
                    let Some((d0, d1, id0)) = span(g.d, a, pd) else {
                        continue;
                    };
                    for b in 0..kh {
                        let Some((h0, h1, ih0)) = span(g.h, b, ph) else {
                            continue;
                        };
                        for c in 0..kw {
                            let Some((w0, w1, iw0)) = span(g.w, c, pw) else {
                                continue;
                            };
                            let wv = wt[wb + (a * kh + b) * kw + c];
                            let len = w1 - w0;
                            for (od, id) in (d0..d1).zip(id0..) {
                                for (oh, ih) in (h0..h1).zip(ih0..) {
                                    let o = ob + (od * g.h + oh) * g.w + w0;
                                    let i = ib + (id * g.h + ih) * g.w + iw0;
                                    axpy(&mut out[o..o + len], wv, &x[i..i + len]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub(crate) fn conv3d_backward<T: Float>(
    g: ConvGeom,
    x: &[T],
    wt: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = g.plane();
    let [kd, kh, kw] = g.k;
    let [pd, ph, pw] = g.pad();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); g.co];
    for n in 0..g.n {
        for co in 0..g.co {
            let ob = (n * g.co + co) * plane;
            gb[co] += gy[ob..ob + plane].iter().copied().sum::<T>();
            for ci in 0..g.ci {
                let ib = (n * g.ci + ci) * plane;
                let wb = (co * g.ci + ci) * kd * kh * kw;
                for a in 0..kd {
                    let Some((d0, d1, id0)) = span(g.d, a, pd) else {
                        continue;
                    };
                    for b in 0..kh {
                        let Some((h0, h1, ih0)) = span(g.h, b, ph) else {
                            continue;
                        };
                        for c in 0..kw {
                            let Some((w0, w1, iw0)) = span(g.w, c, pw) else {
                                continue;
                            };
                            let widx = wb + (a * kh + b) * kw + c;
                            let wv = wt[widx];
                            let len = w1 - w0;
                            let mut acc = T::zero();
                            for (od, id) in (d0..d1).zip(id0..) {
                                for (oh, ih) in (h0..h1).zip(ih0..) {
                                    let o = ob + (od * g.h + oh) * g.w + w0;
                                    let i = ib + (id * g.h + ih) * g.w + iw0;
                                    acc += dot(&gy[o..o + len], &x[i..i + len]);
                                    axpy(&mut gx[i..i + len], wv, &gy[o..o + len]);
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Non-overlapping max pooling; trailing remainders along an axis are dropped.
/// Returns pooled values and, per output, the flat input index of the max.
pub(crate) fn maxpool_forward<T: Float>(
    dims: [usize; 5],
    win: [usize; 3],
    x: &[T],
) -> (Vec<T>, Vec<usize>, [usize; 5]) {
    let [n, c, d, h, w] = dims;
    let (od, oh, ow) = (d / win[0], h / win[1], w / win[2]);
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut bi = 0;
                    for a in 0..win[0] {
                        for b in 0..win[1] {
                            for e in 0..win[2] {
                                let i = base
                                    + ((zd * win[0] + a) * h + zh * win[1] + b) * w
                                    + zw * win[2]
                                    + e;
                                if x[i] > best {
                                    best = x[i];
                                    bi = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(bi);
                }
            }
        }
    }
    (out, arg, [n, c, od, oh, ow])
}

/// Per-channel mean and biased variance over `(n, d, h, w)`.
pub(crate) fn channel_moments<T: Float>(dims: [usize; 5], x: &[T]) -> (Vec<T>, Vec<T>) {
    let [n, c, d, h, w] = dims;
    let plane = d * h * w;
    let m = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let o = (b * c + ch) * plane;
            s += x[o..o + plane].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for b in 0..n {
            let o = (b * c + ch) * plane;
            for &e in &x[o..o + plane] {
                let dlt = e - mu;
                v += dlt * dlt;
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Generic per-channel visitor used by batch norm: calls `f(channel, slice)`
/// for every `(sample, channel)` plane.
pub(crate) fn for_each_plane<T>(
    dims: [usize; 5],
    data: &mut [T],
    mut f: impl FnMut(usize, &mut [T]),
) {
    let [n, c, d, h, w] = dims;
    let plane = d * h * w;
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            f(ch, &mut data[o..o + plane]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution with zero padding.
    fn conv_naive(g: ConvGeom, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
        let [kd, kh, kw] = g.k;
        let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
        let mut out = vec![0.0; g.n * g.co * g.d * g.h * g.w];
        for n in 0..g.n {
            for co in 0..g.co {
                for z in 0..g.d {
                    for y in 0..g.h {
                        for xx in 0..g.w {
                            let mut s = b[co];
                            for ci in 0..g.ci {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for c in 0..kw {
                                            let iz = z as isize + a as isize - pd;
                                            let iy = y as isize + bb as isize - ph;
                                            let ix = xx as isize + c as isize - pw;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= g.d as isize
                                                || iy >= g.h as isize
                                                || ix >= g.w as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((n * g.ci + ci) * g.d + iz as usize) * g.h
                                                + iy as usize)
                                                * g.w
                                                + ix as usize;
                                            let wi =
                                                (((co * g.ci + ci) * kd + a) * kh + bb) * kw + c;
                                            s += x[xi] * wt[wi];
                                        }
                                    }
                                }
                            }
                            out[(((n * g.co + co) * g.d + z) * g.h + y) * g.w + xx] = s;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let g = ConvGeom {
            n: 2,
            ci: 2,
            co: 3,
            d: 3,
            h: 5,
            w: 4,
            k: [3, 3, 3],
        };
        let x: Vec<f64> = (0..g.n * g.ci * 60)
            .map(|i| ((i * 37 % 11) as f64) - 5.0)
            .collect();
        let wt: Vec<f64> = (0..g.co * g.ci * 27)
            .map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3)
            .collect();
        let b = vec![0.5, -1.0, 0.25];
        let fast = conv3d_forward(g, &x, &wt, &b);
        let slow = conv_naive(g, &x, &wt, &b);
        for (a, e) in fast.iter().zip(&slow) {
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let (out, arg, dims) = maxpool_forward([1, 1, 1, 4, 4], [1, 2, 2], &x);
        assert_eq!(dims, [1, 1, 1, 2, 2]);
        assert_eq!(out, vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }
}
