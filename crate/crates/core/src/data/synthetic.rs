//! Deterministic synthetic change pairs for desk-scale runs.
//!
//! The pre image is a smooth gradient with static distractor shapes. The
//! post image copies it and recolors rectangles/ellipses; the mask marks
//! exactly the recolored pixels. Every recolored pixel differs from its
//! original by at least [`RECOLOR_THRESHOLD`] in some channel, and values are
//! quantized to 8-bit levels so the canonical PNG layout round-trips.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ChangeMask, ImagePair, Sample, Split};
use crate::error::{Error, Result};

pub const RECOLOR_THRESHOLD: f32 = 0.2;

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { y0: usize, x0: usize, h: usize, w: usize },
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: usize, area: f32) -> Self {
        let aspect: f32 = rng.random_range(0.5..2.0);
        if rng.random_bool(0.5) {
            let w = ((area * aspect).sqrt().round() as usize).clamp(1, size);
            let h = ((area / w as f32).round() as usize).clamp(1, size);
            let y0 = rng.random_range(0..=size - h);
            let x0 = rng.random_range(0..=size - w);
            Shape::Rect { y0, x0, h, w }
        } else {
            let rx = ((area * aspect / std::f32::consts::PI).sqrt()).max(0.75);
            let ry = (area / (std::f32::consts::PI * rx)).max(0.75);
            let cy = rng.random_range(0.0..size as f32);
            let cx = rng.random_range(0.0..size as f32);
            Shape::Ellipse { cy, cx, ry, rx }
        }
    }

    fn pixels(&self, size: usize) -> Vec<(usize, usize)> {
        match *self {
            Shape::Rect { y0, x0, h, w } => (y0..y0 + h)
                .flat_map(|y| (x0..x0 + w).map(move |x| (y, x)))
                .collect(),
            Shape::Ellipse { cy, cx, ry, rx } => {
                let ylo = (cy - ry).floor().max(0.0) as usize;
                let yhi = ((cy + ry).ceil() as usize).min(size - 1);
                let xlo = (cx - rx).floor().max(0.0) as usize;
                let xhi = ((cx + rx).ceil() as usize).min(size - 1);
                let mut out = Vec::new();
                for y in ylo..=yhi {
                    for x in xlo..=xhi {
                        let dy = (y as f32 + 0.5 - cy) / ry;
                        let dx = (x as f32 + 0.5 - cx) / rx;
                        if dy * dy + dx * dx <= 1.0 {
                            out.push((y, x));
                        }
                    }
                }
                out
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
    ]
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Array3<f32> {
    let base = random_color(rng);
    let gy: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
    let gx: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
    let mut img = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        let fy = y as f32 / size as f32 - 0.5;
        let fx = x as f32 / size as f32 - 0.5;
        base[c] + gy[c] * fy + gx[c] * fx
    });
    // static distractors present in both acquisitions
    let n_static = rng.random_range(2..6);
    for _ in 0..n_static {
        let area = (size * size) as f32 * rng.random_range(0.005..0.03);
        let shape = Shape::random(rng, size, area);
        let color = random_color(rng);
        for (y, x) in shape.pixels(size) {
            for c in 0..3 {
                img[[c, y, x]] = color[c];
            }
        }
    }
    img.mapv_inplace(quantize);
    img
}

fn generate_one(index: usize, change_ratio: f64, size: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let pre = background(&mut rng, size);
    let mut post = pre.clone();
    let mut mask = Array2::<u8>::zeros((size, size));

    let total = (size * size) as f64;
    let target = (change_ratio * rng.random_range(0.5..1.5) * total).round().max(1.0) as usize;
    let max_area = (total * 0.04).max(4.0) as f32;
    let mut changed = 0usize;
    let mut attempts = 0;
    while changed < target && attempts < 256 {
        attempts += 1;
        let area = ((target - changed) as f32).min(max_area).max(1.0);
        let shape = Shape::random(&mut rng, size, area);
        let color = random_color(&mut rng);
        for (y, x) in shape.pixels(size) {
            if mask[[y, x]] == 1 {
                continue;
            }
            let orig = [pre[[0, y, x]], pre[[1, y, x]], pre[[2, y, x]]];
            let mut new = color.map(quantize);
            let diff = |n: &[f32; 3]| (0..3).map(|c| (n[c] - orig[c]).abs()).fold(0.0, f32::max);
            if diff(&new) < RECOLOR_THRESHOLD {
                new[0] = quantize((orig[0] + 0.5).rem_euclid(1.0));
                if diff(&new) < RECOLOR_THRESHOLD {
                    new[0] = if orig[0] > 0.5 { 0.0 } else { 1.0 };
                }
            }
            for c in 0..3 {
                post[[c, y, x]] = new[c];
            }
            mask[[y, x]] = 1;
            changed += 1;
        }
    }
    let pair = ImagePair::new(pre, post, format!("syn_{index:05}"))?;
    Sample::new(pair, ChangeMask::new(mask)?, Split::Train)
}

/// Generates `n` samples of `size`x`size` pixels whose aggregate changed
/// fraction tracks `change_ratio`. Output depends only on the arguments.
pub fn make_synthetic_dataset(
    n: usize,
    change_ratio: f64,
    size: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if !(change_ratio > 0.0 && change_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "change_ratio must lie in (0, 1), got {change_ratio}"
        )));
    }
    if size < 32 {
        return Err(Error::InvalidArgument(format!("size must be >= 32, got {size}")));
    }
    (0..n)
        .into_par_iter()
        .map(|i| generate_one(i, change_ratio, size, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn changed_fraction(samples: &[Sample]) -> f64 {
        let changed: usize = samples.iter().map(|s| s.gt.changed_pixels()).sum();
        let total: usize = samples.iter().map(|s| s.gt.len()).sum();
        changed as f64 / total as f64
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = make_synthetic_dataset(16, 0.05, 256, 0).unwrap();
        let b = make_synthetic_dataset(16, 0.05, 256, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|s| s.pair.hw() == (256, 256)));
        let c = make_synthetic_dataset(16, 0.05, 256, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mask_is_exactly_the_recolored_pixels() {
        for s in make_synthetic_dataset(8, 0.1, 64, 3).unwrap() {
            let (h, w) = s.pair.hw();
            for y in 0..h {
                for x in 0..w {
                    let d = (0..3)
                        .map(|c| (s.pair.pre[[c, y, x]] - s.pair.post[[c, y, x]]).abs())
                        .fold(0.0, f32::max);
                    if s.gt.as_array()[[y, x]] == 1 {
                        assert!(d >= RECOLOR_THRESHOLD - 1e-6, "weak recolor {d}");
                    } else {
                        assert_eq!(d, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn aggregate_ratio_close_to_target() {
        let samples = make_synthetic_dataset(16, 0.05, 256, 0).unwrap();
        let f = changed_fraction(&samples);
        assert!((f - 0.05).abs() <= 0.02, "fraction {f}");
        let samples = make_synthetic_dataset(100, 0.03, 64, 9).unwrap();
        let f = changed_fraction(&samples);
        assert!((0.01..=0.05).contains(&f), "fraction {f}");
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(
            make_synthetic_dataset(4, 0.0, 64, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            make_synthetic_dataset(4, 1.0, 64, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(make_synthetic_dataset(4, 0.1, 16, 0).is_err());
    }
}
