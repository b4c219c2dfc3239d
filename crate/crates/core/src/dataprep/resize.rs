/// Central `s x s` window of an `h x w` image, `s = min(h, w)`.
pub fn center_crop_square(h: usize, w: usize, img: &[f32]) -> (usize, Vec<f32>) {
    let s = h.min(w);
    let (y0, x0) = ((h - s) / 2, (w - s) / 2);
    let mut out = Vec::with_capacity(s * s);
    for y in y0..y0 + s {
        out.extend_from_slice(&img[y * w + x0..y * w + x0 + s]);
    }
    (s, out)
}

/// Bilinear resampling of a square image with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f32], src_size: usize, dst_size: usize) -> Vec<f32> {
    if src_size == dst_size {
        return src.to_vec();
    }
    let scale = src_size as f64 / dst_size as f64;
    let max = (src_size - 1) as f64;
    let coords: Vec<(usize, usize, f32)> = (0..dst_size)
        .map(|i| {
            let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = p.floor() as usize;
            let hi = (lo + 1).min(src_size - 1);
            (lo, hi, (p - lo as f64) as f32)
        })
        .collect();
    let mut out = Vec::with_capacity(dst_size * dst_size);
    for &(y0, y1, fy) in &coords {
        for &(x0, x1, fx) in &coords {
            let a = src[y0 * src_size + x0] * (1.0 - fx) + src[y0 * src_size + x1] * fx;
            let b = src[y1 * src_size + x0] * (1.0 - fx) + src[y1 * src_size + x1] * fx;
            out.push(a * (1.0 - fy) + b * fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_takes_the_centre() {
        // 2 x 4 image
        let img = [0., 1., 2., 3., 4., 5., 6., 7.];
        let (s, c) = center_crop_square(2, 4, &img);
        assert_eq!(s, 2);
        assert_eq!(c, vec![1., 2., 5., 6.]);
    }

    #[test]
    fn halving_averages_two_by_two_blocks() {
        let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let out = resize_bilinear(&img, 4, 2);
        // sample points land between pixels 0/1 and 2/3 on each axis
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let out = resize_bilinear(&[0.3; 25], 5, 8);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }
}
