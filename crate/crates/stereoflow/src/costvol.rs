//! Feature correlation cost volumes with spatial normalization.
//!
//! Per-channel standardization of the feature grids keeps the correlation
//! scores in a healthy numeric range regardless of the feature scale, so the
//! argmax displacement survives arbitrary positive rescaling of the inputs.
//! The volume is a diagnostic and an optional initializer for the coarsest
//! solver level; it is not part of the reconstruction energy.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Per-pixel real feature vectors on an image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, interleaved channels.
    pub data: Vec<f64>,
}

impl FeatureGrid {
    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Per-pixel correlation scores over integer displacements in [-r, r]^2,
/// stored row-major over displacement offsets: index
/// `(dy + r) * (2r + 1) + (dx + r)`.
#[derive(Debug, Clone)]
pub struct CostVolume {
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    pub data: Vec<f64>,
}

impl CostVolume {
    pub fn scores_per_pixel(&self) -> usize {
        let side = 2 * self.radius + 1;
        side * side
    }

    #[inline]
    pub fn score(&self, x: usize, y: usize, dx: isize, dy: isize) -> f64 {
        let side = (2 * self.radius + 1) as isize;
        let r = self.radius as isize;
        let idx = (dy + r) * side + (dx + r);
        self.data[(y * self.width + x) * self.scores_per_pixel() + idx as usize]
    }

    /// Per-pixel displacement with the highest score; ties resolve to the
    /// first offset in storage order.
    pub fn argmax(&self) -> Vec<[isize; 2]> {
        let side = 2 * self.radius as isize + 1;
        let k = self.scores_per_pixel();
        let mut out = Vec::with_capacity(self.height * self.width);
        for p in 0..self.height * self.width {
            let scores = &self.data[p * k..(p + 1) * k];
            let mut best = 0usize;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            let dy = best as isize / side - self.radius as isize;
            let dx = best as isize % side - self.radius as isize;
            out.push([dx, dy]);
        }
        out
    }
}

/// Hand-rolled stand-in for learned features at desk scale: intensity plus
/// horizontal and vertical central differences.
pub fn extract_features(img: &ImageGrid) -> Result<FeatureGrid> {
    if !img.is_single_channel() {
        return Err(Error::InvalidInput(
            "feature extraction expects a single-channel image".into(),
        ));
    }
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            data.push(img.get(x, y, 0));
            data.push(0.5 * (img.get(xp, y, 0) - img.get(xm, y, 0)));
            data.push(0.5 * (img.get(x, yp, 0) - img.get(x, ym, 0)));
        }
    }
    Ok(FeatureGrid {
        height: h,
        width: w,
        channels: 3,
        data,
    })
}

/// Standardize each channel over spatial positions: zero mean, unit standard
/// deviation (with a small guard against zero variance). Output is invariant
/// to any positive per-channel affine rescaling of the input.
pub fn normalize_features(f: &FeatureGrid) -> Result<FeatureGrid> {
    let n = f.height * f.width;
    if n < 2 {
        return Err(Error::InvalidInput(
            "feature normalization needs at least 2 pixels".into(),
        ));
    }
    let mut out = f.clone();
    for c in 0..f.channels {
        let mut mean = 0.0;
        for p in 0..n {
            mean += f.data[p * f.channels + c];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for p in 0..n {
            let d = f.data[p * f.channels + c] - mean;
            var += d * d;
        }
        let std = (var / n as f64).sqrt() + 1e-8;
        for p in 0..n {
            out.data[p * f.channels + c] = (f.data[p * f.channels + c] - mean) / std;
        }
    }
    Ok(out)
}

/// Correlation volume `cost(x, d) = <F1(x), F2(x + d)> / C` for integer
/// displacements `d` in [-r, r]^2; out-of-bounds targets contribute a zero
/// feature vector.
pub fn correlation_volume(f1: &FeatureGrid, f2: &FeatureGrid, radius: usize) -> Result<CostVolume> {
    if f1.height != f2.height || f1.width != f2.width || f1.channels != f2.channels {
        return Err(Error::DimensionMismatch(
            "feature grids differ in dimensions or channels".into(),
        ));
    }
    let (h, w, c) = (f1.height, f1.width, f1.channels);
    let side = 2 * radius + 1;
    let k = side * side;
    let r = radius as isize;
    let mut data = vec![0.0; h * w * k];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * k;
            let f1_base = (y * w + x) * c;
            let mut idx = 0usize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let tx = x as isize + dx;
                    let ty = y as isize + dy;
                    if tx >= 0 && tx < w as isize && ty >= 0 && ty < h as isize {
                        let f2_base = (ty as usize * w + tx as usize) * c;
                        let mut dot = 0.0;
                        for ch in 0..c {
                            dot += f1.data[f1_base + ch] * f2.data[f2_base + ch];
                        }
                        data[base + idx] = dot / c as f64;
                    }
                    idx += 1;
                }
            }
        }
    }
    Ok(CostVolume {
        height: h,
        width: w,
        radius,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_features_have_zero_gradients() {
        let img = ImageGrid::constant(5, 5, 1, 0.3);
        let f = extract_features(&img).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(f.get(x, y, 0), 0.3);
                assert_eq!(f.get(x, y, 1), 0.0);
                assert_eq!(f.get(x, y, 2), 0.0);
            }
        }
    }

    #[test]
    fn ramp_has_constant_horizontal_gradient_interior() {
        let w = 10usize;
        let img = ImageGrid::from_fn(6, w, |x, _| x as f64 / w as f64);
        let f = extract_features(&img).unwrap();
        for y in 0..6 {
            for x in 1..w - 1 {
                assert!((f.get(x, y, 1) - 1.0 / w as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn checkerboard_gradients_alternate_sign() {
        let img = ImageGrid::from_fn(8, 8, |x, y| ((x + y) % 2) as f64);
        let f = extract_features(&img).unwrap();
        // Central difference across one checker period is 0; half-period
        // neighbors alternate: value channel alternates instead.
        for y in 2..6 {
            for x in 2..6 {
                assert_eq!(f.get(x, y, 1), 0.0);
                let v = f.get(x, y, 0);
                let v_next = f.get(x + 1, y, 0);
                assert!((v - v_next).abs() == 1.0);
            }
        }
    }

    #[test]
    fn normalization_zeroes_constant_channels() {
        let f = FeatureGrid {
            height: 2,
            width: 3,
            channels: 1,
            data: vec![5.0; 6],
        };
        let n = normalize_features(&f).unwrap();
        assert!(n.data.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn balanced_pm_one_channel_is_unchanged() {
        let f = FeatureGrid {
            height: 1,
            width: 4,
            channels: 1,
            data: vec![-1.0, 1.0, -1.0, 1.0],
        };
        let n = normalize_features(&f).unwrap();
        for (a, b) in f.data.iter().zip(&n.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let img = ImageGrid::from_fn(8, 8, |_, _| rng.gen_range(0.0..1.0));
        let f = extract_features(&img).unwrap();
        let mut scaled = f.clone();
        for v in scaled.data.iter_mut() {
            *v *= 1000.0;
        }
        let a = normalize_features(&f).unwrap();
        let b = normalize_features(&scaled).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    fn random_unit_features(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FeatureGrid {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            let v: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
            data.extend_from_slice(&[v[0] / n, v[1] / n, v[2] / n]);
        }
        FeatureGrid {
            height: h,
            width: w,
            channels: 3,
            data,
        }
    }

    #[test]
    fn self_correlation_peaks_at_zero_displacement() {
        // Unit-norm per-pixel features: cost(x, 0) = 1/C dominates every
        // other displacement's cosine similarity.
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let f = random_unit_features(&mut rng, 10, 10);
        let vol = correlation_volume(&f, &f, 2).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                let peak = vol.score(x, y, 0, 0);
                for dy in -2isize..=2 {
                    for dx in -2isize..=2 {
                        assert!(vol.score(x, y, dx, dy) <= peak + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn shifted_features_move_the_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let f1 = random_unit_features(&mut rng, 12, 12);
        // f2(x) = f1(x - 1): content moved one pixel right, so the best
        // match for f1(x) sits at displacement (+1, 0).
        let mut f2 = f1.clone();
        for y in 0..12usize {
            for x in 0..12usize {
                let sx = x.saturating_sub(1);
                for c in 0..3 {
                    f2.data[(y * 12 + x) * 3 + c] = f1.get(sx, y, c);
                }
            }
        }
        let vol = correlation_volume(&f1, &f2, 2).unwrap();
        let am = vol.argmax();
        for y in 2..10 {
            for x in 2..10 {
                assert_eq!(am[y * 12 + x], [1, 0], "({x},{y})");
            }
        }
    }

    #[test]
    fn zero_features_give_zero_volume() {
        let f = FeatureGrid {
            height: 3,
            width: 3,
            channels: 2,
            data: vec![0.0; 18],
        };
        let vol = correlation_volume(&f, &f, 1).unwrap();
        assert!(vol.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn volume_rejects_channel_mismatch() {
        let a = FeatureGrid {
            height: 2,
            width: 2,
            channels: 1,
            data: vec![0.0; 4],
        };
        let b = FeatureGrid {
            height: 2,
            width: 2,
            channels: 2,
            data: vec![0.0; 8],
        };
        assert!(correlation_volume(&a, &b, 1).is_err());
    }

    #[test]
    fn rescaling_both_grids_leaves_normalized_volume_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let img = ImageGrid::from_fn(9, 9, |_, _| rng.gen_range(0.0..1.0));
        let f = extract_features(&img).unwrap();
        let mut big = f.clone();
        for v in big.data.iter_mut() {
            *v *= 1000.0;
        }
        let va = correlation_volume(
            &normalize_features(&f).unwrap(),
            &normalize_features(&f).unwrap(),
            2,
        )
        .unwrap();
        let vb = correlation_volume(
            &normalize_features(&big).unwrap(),
            &normalize_features(&big).unwrap(),
            2,
        )
        .unwrap();
        for (a, b) in va.data.iter().zip(&vb.data) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(va.argmax(), vb.argmax());
    }
}
