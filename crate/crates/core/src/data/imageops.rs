//! Plane-level raster operations used by preprocessing and augmentation.
//!
//! All resampling uses half-pixel centers (`align_corners = false`), matching
//! the usual deep-learning resize conventions.

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Bilinear,
}

fn half_pixel_src(dst: usize, scale: f32, len: usize) -> (usize, usize, f32) {
    let src = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f32)
}

pub fn resize_bilinear(plane: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = plane.dim();
    if (h, w) == (out_h, out_w) {
        return plane.to_owned();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let cols: Vec<_> = (0..out_w).map(|x| half_pixel_src(x, sx, w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = half_pixel_src(y, sy, h);
        let (x0, x1, fx) = cols[x];
        let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
        let bot = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

pub fn resize_nearest<T: Copy>(plane: ArrayView2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = plane.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = ((y as f64 * sy).floor() as usize).min(h - 1);
        let sx = ((x as f64 * sx).floor() as usize).min(w - 1);
        plane[[sy, sx]]
    })
}

pub fn resize_image(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    map_planes(img, |p| resize_bilinear(p, out_h, out_w))
}

pub fn map_planes(img: &Array3<f32>, f: impl Fn(ArrayView2<f32>) -> Array2<f32>) -> Array3<f32> {
    let planes: Vec<Array2<f32>> = img.axis_iter(Axis(0)).map(&f).collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).expect("planes share a shape")
}

pub fn hflip<T: Clone>(plane: ArrayView2<T>) -> Array2<T> {
    plane.slice(s![.., ..;-1]).to_owned()
}

pub fn vflip<T: Clone>(plane: ArrayView2<T>) -> Array2<T> {
    plane.slice(s![..;-1, ..]).to_owned()
}

pub fn crop<T: Clone>(plane: ArrayView2<T>, y0: usize, x0: usize, h: usize, w: usize) -> Array2<T> {
    plane.slice(s![y0..y0 + h, x0..x0 + w]).to_owned()
}

/// Rotates counter-clockwise by `degrees` about the raster center. Pixels
/// that map outside the source are filled with `fill`.
pub fn rotate<T>(plane: ArrayView2<T>, degrees: f32, interp: Interp, fill: T) -> Array2<T>
where
    T: Copy + Into<f32> + FromF32,
{
    let (h, w) = plane.dim();
    let (sin, cos) = (degrees.to_radians() as f64).sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((h, w), |(y, x)| {
        // inverse map: rotate the destination coordinate clockwise
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = cos * dx - sin * dy + cx;
        let sy = sin * dx + cos * dy + cy;
        match interp {
            Interp::Nearest => {
                let (ix, iy) = (sx.round(), sy.round());
                if ix < 0.0 || iy < 0.0 || ix > (w - 1) as f64 || iy > (h - 1) as f64 {
                    fill
                } else {
                    plane[[iy as usize, ix as usize]]
                }
            }
            Interp::Bilinear => {
                if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                    return fill;
                }
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = (sx - x0) as f32;
                let fy = (sy - y0) as f32;
                let fetch = |yy: f64, xx: f64| -> f32 {
                    if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
                        fill.into()
                    } else {
                        plane[[yy as usize, xx as usize]].into()
                    }
                };
                let top = fetch(y0, x0) * (1.0 - fx) + fetch(y0, x0 + 1.0) * fx;
                let bot = fetch(y0 + 1.0, x0) * (1.0 - fx) + fetch(y0 + 1.0, x0 + 1.0) * fx;
                T::from_f32(top * (1.0 - fy) + bot * fy)
            }
        }
    })
}

pub trait FromF32 {
    fn from_f32(v: f32) -> Self;
}

impl FromF32 for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
}

impl FromF32 for u8 {
    fn from_f32(v: f32) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
}

fn reflect101(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= len as isize {
        i = period - i;
    }
    i as usize
}

pub fn gaussian_kernel(ksize: usize, sigma: f64) -> Vec<f32> {
    let c = (ksize as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..ksize)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| (v / sum) as f32).collect()
}

/// Separable Gaussian blur with reflect-101 borders.
pub fn gaussian_blur(plane: ArrayView2<f32>, ksize: usize, sigma: f64) -> Array2<f32> {
    let kernel = gaussian_kernel(ksize, sigma);
    let r = (ksize / 2) as isize;
    let (h, w) = plane.dim();
    let horiz: Array2<f32> = Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &kv)| kv * plane[[y, reflect101(x as isize + k as isize - r, w)]])
            .sum::<f32>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &kv)| kv * horiz[[reflect101(y as isize + k as isize - r, h), x]])
            .sum()
    })
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn adjust_brightness(img: &mut Array3<f32>, factor: f32) {
    img.mapv_inplace(|v| (v * factor).clamp(0.0, 1.0));
}

pub fn adjust_contrast(img: &mut Array3<f32>, factor: f32) {
    let (_, h, w) = img.dim();
    let mean = Zip::from(img.index_axis(Axis(0), 0))
        .and(img.index_axis(Axis(0), 1))
        .and(img.index_axis(Axis(0), 2))
        .fold(0.0f64, |acc, &r, &g, &b| acc + luma(r, g, b) as f64)
        / (h * w) as f64;
    let mean = mean as f32;
    img.mapv_inplace(|v| ((v - mean) * factor + mean).clamp(0.0, 1.0));
}

pub fn adjust_saturation(img: &mut Array3<f32>, factor: f32) {
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let g = luma(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            for c in 0..3 {
                img[[c, y, x]] = ((img[[c, y, x]] - g) * factor + g).clamp(0.0, 1.0);
            }
        }
    }
}

/// Rotates hue by `shift` turns (`shift` in `[-0.5, 0.5]`).
pub fn adjust_hue(img: &mut Array3<f32>, shift: f32) {
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let (hh, s, v) = rgb_to_hsv(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            let (r, g, b) = hsv_to_rgb((hh + shift).rem_euclid(1.0), s, v);
            img[[0, y, x]] = r;
            img[[1, y, x]] = g;
            img[[2, y, x]] = b;
        }
    }
}

pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bilinear_identity_and_constant() {
        let p = Array2::from_shape_fn((5, 7), |(y, x)| (y * 7 + x) as f32);
        assert_eq!(resize_bilinear(p.view(), 5, 7), p);
        let c = Array2::from_elem((3, 3), 0.25f32);
        let up = resize_bilinear(c.view(), 8, 8);
        assert!(up.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn nearest_upscale_replicates() {
        let p = array![[0u8, 1], [1, 0]];
        let up = resize_nearest(p.view(), 4, 4);
        assert_eq!(up[[0, 0]], 0);
        assert_eq!(up[[1, 1]], 0);
        assert_eq!(up[[0, 3]], 1);
        assert_eq!(up[[3, 0]], 1);
    }

    #[test]
    fn rotate_90_matches_transpose_flip() {
        let p = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f32);
        let r = rotate(p.view(), 90.0, Interp::Nearest, -1.0);
        // counter-clockwise: top row becomes the left column, read bottom-up
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(r[[y, x]], p[[x, 3 - y]]);
            }
        }
        let rb = rotate(p.view(), 90.0, Interp::Bilinear, -1.0);
        for (a, b) in r.iter().zip(rb.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn rotate_fills_corners() {
        let p = Array2::from_elem((9, 9), 1u8);
        let r = rotate(p.view(), 45.0, Interp::Nearest, 0u8);
        assert_eq!(r[[0, 0]], 0);
        assert_eq!(r[[4, 4]], 1);
    }

    #[test]
    fn blur_preserves_constant_and_mass() {
        let c = Array2::from_elem((6, 6), 0.5f32);
        let b = gaussian_blur(c.view(), 5, 4.0 / 7.0);
        assert!(b.iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let k = gaussian_kernel(9, 8.0 / 7.0);
        assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }
}
