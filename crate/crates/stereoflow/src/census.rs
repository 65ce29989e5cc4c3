//! Ternary census descriptors, census distance, and the Charbonnier penalty.
//!
//! The photometric difference of the reconstruction loss is a Charbonnier of
//! the per-pixel census distance between the reference image and the warped
//! target image, which makes the data term invariant to monotonic
//! illumination changes (hard mode) or robustly near-invariant while staying
//! differentiable (soft mode).

use crate::error::{Error, Result};
use crate::grid::{warp_planes, ImageGrid, ScalarField};
use crate::occlusion::OcclusionMask;

/// Hard descriptors hold ternary values in {-1, 0, +1}; soft descriptors
/// hold smooth sign surrogates in (-1, +1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CensusMode {
    Hard,
    Soft,
}

/// Per-pixel neighborhood descriptor of length P^2 - 1 (P = odd patch size).
#[derive(Debug, Clone)]
pub struct CensusDescriptorGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub mode: CensusMode,
    /// Row-major, P^2 - 1 interleaved entries per pixel, neighbors in
    /// row-major patch order with the center skipped.
    pub data: Vec<f64>,
}

impl CensusDescriptorGrid {
    pub fn entries_per_pixel(&self) -> usize {
        self.patch * self.patch - 1
    }
}

/// Parameters of the Charbonnier penalty `rho(x) = (x^2 + epsilon^2)^gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharbonnierParams {
    pub epsilon: f64,
    pub gamma: f64,
}

impl Default for CharbonnierParams {
    fn default() -> Self {
        Self {
            epsilon: 0.001,
            gamma: 0.45,
        }
    }
}

/// Smooth, even, robust penalty: `rho(x) = (x^2 + epsilon^2)^gamma`.
#[inline]
pub fn charbonnier(x: f64, p: &CharbonnierParams) -> f64 {
    (x * x + p.epsilon * p.epsilon).powf(p.gamma)
}

/// Derivative `rho'(x) = 2 gamma x (x^2 + epsilon^2)^(gamma - 1)`.
#[inline]
pub(crate) fn charbonnier_deriv(x: f64, p: &CharbonnierParams) -> f64 {
    2.0 * p.gamma * x * (x * x + p.epsilon * p.epsilon).powf(p.gamma - 1.0)
}

/// Lagged (IRLS) weight `rho'(x) / x = 2 gamma (x^2 + epsilon^2)^(gamma - 1)`,
/// the curvature of the quadratic majorizer at the current residual.
#[inline]
pub(crate) fn charbonnier_irls_weight(x: f64, p: &CharbonnierParams) -> f64 {
    2.0 * p.gamma * (x * x + p.epsilon * p.epsilon).powf(p.gamma - 1.0)
}

/// Census and penalty configuration shared by the loss engine.
#[derive(Debug, Clone, PartialEq)]
pub struct CensusConfig {
    /// Odd patch size P >= 3.
    pub patch: usize,
    pub mode: CensusMode,
    /// Soft-sign scale sigma^2 in `(I(n)-I(c)) / sqrt(sigma^2 + (I(n)-I(c))^2)`.
    pub sigma_sq: f64,
    /// Constant of the bounded soft Hamming term `d^2 / (eps + d^2)`.
    pub soft_hamming_eps: f64,
    /// Hard-mode ternary threshold: |difference| <= tau maps to 0.
    pub tau: f64,
    pub charbonnier: CharbonnierParams,
}

impl Default for CensusConfig {
    fn default() -> Self {
        Self {
            patch: 3,
            mode: CensusMode::Soft,
            sigma_sq: 0.81,
            soft_hamming_eps: 0.1,
            tau: 0.0,
            charbonnier: CharbonnierParams::default(),
        }
    }
}

impl CensusConfig {
    pub fn hard() -> Self {
        Self {
            mode: CensusMode::Hard,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch < 3 || self.patch % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "census patch size must be odd and >= 3, got {}",
                self.patch
            )));
        }
        if self.sigma_sq <= 0.0 || self.soft_hamming_eps <= 0.0 {
            return Err(Error::InvalidInput(
                "census sigma^2 and soft-Hamming constant must be positive".into(),
            ));
        }
        if self.charbonnier.epsilon <= 0.0
            || self.charbonnier.gamma <= 0.0
            || self.charbonnier.gamma > 1.0
        {
            return Err(Error::InvalidInput(
                "Charbonnier needs epsilon > 0 and gamma in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Neighbor offsets of the patch in row-major order, center excluded.
    pub(crate) fn neighbor_offsets(&self) -> Vec<(isize, isize)> {
        let r = (self.patch / 2) as isize;
        let mut out = Vec::with_capacity(self.patch * self.patch - 1);
        for oy in -r..=r {
            for ox in -r..=r {
                if ox != 0 || oy != 0 {
                    out.push((ox, oy));
                }
            }
        }
        out
    }
}

#[inline]
pub(crate) fn soft_sign(diff: f64, sigma_sq: f64) -> f64 {
    diff / (sigma_sq + diff * diff).sqrt()
}

/// d/d(diff) of [`soft_sign`]: `sigma^2 / (sigma^2 + diff^2)^(3/2)`.
#[inline]
pub(crate) fn soft_sign_deriv(diff: f64, sigma_sq: f64) -> f64 {
    let s = sigma_sq + diff * diff;
    sigma_sq / (s * s.sqrt())
}

#[inline]
fn hard_sign(diff: f64, tau: f64) -> f64 {
    if diff.abs() <= tau {
        0.0
    } else if diff > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Ternary census transform of a single-channel image. Border pixels use
/// clamped neighborhoods (off-image neighbors read the nearest border pixel).
pub fn census_transform(img: &ImageGrid, cfg: &CensusConfig) -> Result<CensusDescriptorGrid> {
    cfg.validate()?;
    if !img.is_single_channel() {
        return Err(Error::InvalidInput(
            "census transform expects a single-channel image".into(),
        ));
    }
    let (h, w) = (img.height(), img.width());
    let offsets = cfg.neighbor_offsets();
    let k = offsets.len();
    let plane = img.data();
    let mut data = vec![0.0; h * w * k];
    for y in 0..h {
        for x in 0..w {
            let center = plane[y * w + x];
            let base = (y * w + x) * k;
            for (i, &(ox, oy)) in offsets.iter().enumerate() {
                let nx = (x as isize + ox).clamp(0, w as isize - 1) as usize;
                let ny = (y as isize + oy).clamp(0, h as isize - 1) as usize;
                let diff = plane[ny * w + nx] - center;
                data[base + i] = match cfg.mode {
                    CensusMode::Hard => hard_sign(diff, cfg.tau),
                    CensusMode::Soft => soft_sign(diff, cfg.sigma_sq),
                };
            }
        }
    }
    Ok(CensusDescriptorGrid {
        height: h,
        width: w,
        patch: cfg.patch,
        mode: cfg.mode,
        data,
    })
}

#[inline]
pub(crate) fn soft_hamming_term(diff: f64, eps: f64) -> f64 {
    let d2 = diff * diff;
    d2 / (eps + d2)
}

/// d/d(diff) of [`soft_hamming_term`]: `2 eps diff / (eps + diff^2)^2`.
#[inline]
pub(crate) fn soft_hamming_deriv(diff: f64, eps: f64) -> f64 {
    let s = eps + diff * diff;
    2.0 * eps * diff / (s * s)
}

/// Per-pixel census distance between two descriptor grids.
///
/// Hard mode counts differing ternary entries (Hamming distance); soft mode
/// sums the bounded terms `(a_k - b_k)^2 / (eps + (a_k - b_k)^2)`, each in
/// [0, 1).
pub fn census_distance(
    a: &CensusDescriptorGrid,
    b: &CensusDescriptorGrid,
    soft_hamming_eps: f64,
) -> Result<ScalarField> {
    if a.height != b.height || a.width != b.width || a.patch != b.patch || a.mode != b.mode {
        return Err(Error::DimensionMismatch(
            "census grids differ in dimensions, patch size or mode".into(),
        ));
    }
    let k = a.entries_per_pixel();
    let n = a.height * a.width;
    let mut out = ScalarField::zeros(a.height, a.width);
    for p in 0..n {
        let base = p * k;
        let mut acc = 0.0;
        match a.mode {
            CensusMode::Hard => {
                for i in 0..k {
                    if a.data[base + i] != b.data[base + i] {
                        acc += 1.0;
                    }
                }
            }
            CensusMode::Soft => {
                for i in 0..k {
                    acc += soft_hamming_term(a.data[base + i] - b.data[base + i], soft_hamming_eps);
                }
            }
        }
        out.data[p] = acc;
    }
    Ok(out)
}

/// Census-based photometric residual of one image pair under a displacement.
///
/// The target image is backward-warped by `d`, both the reference and the
/// warped image are census-transformed, and the per-pixel Charbonnier of the
/// census distance is returned. Pixels whose warp left the image domain carry
/// a residual of 0 and are reported invalid in the companion mask; the loss
/// engine penalizes them through the occlusion path instead.
pub fn photometric_residual(
    reference: &ImageGrid,
    target: &ImageGrid,
    d: &crate::geometry::DisplacementField,
    cfg: &CensusConfig,
) -> Result<(ScalarField, OcclusionMask)> {
    if !reference.same_dims(target)
        || reference.height() != d.height
        || reference.width() != d.width
    {
        return Err(Error::DimensionMismatch(
            "photometric residual needs matching image and field dimensions".into(),
        ));
    }
    let n = reference.height() * reference.width();
    let mut dx = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    for p in 0..n {
        dx.push(d.data[2 * p]);
        dy.push(d.data[2 * p + 1]);
    }
    let (warped, valid) = warp_planes(target, &dx, &dy)?;
    let ref_desc = census_transform(reference, cfg)?;
    let warp_desc = census_transform(&warped, cfg)?;
    let mut dist = census_distance(&ref_desc, &warp_desc, cfg.soft_hamming_eps)?;
    for p in 0..n {
        dist.data[p] = if valid.as_bools()[p] {
            charbonnier(dist.data[p], &cfg.charbonnier)
        } else {
            0.0
        };
    }
    Ok((dist, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{DisplacementField, ViewId};

    #[test]
    fn constant_image_has_zero_descriptors() {
        let img = ImageGrid::constant(4, 4, 1, 0.7);
        for cfg in [CensusConfig::default(), CensusConfig::hard()] {
            let desc = census_transform(&img, &cfg).unwrap();
            assert!(desc.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hard_census_invariant_under_increasing_transforms() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let img = ImageGrid::from_fn(6, 6, |_, _| rng.gen_range(0.0..1.0));
        let transformed = ImageGrid::new(
            6,
            6,
            1,
            img.data().iter().map(|&v| 0.5 * v + 0.2).collect(),
        )
        .unwrap();
        let cfg = CensusConfig::hard();
        let a = census_transform(&img, &cfg).unwrap();
        let b = census_transform(&transformed, &cfg).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn soft_entry_matches_formula() {
        // Center 0.5 with one neighbor at 0.6: entry = 0.1 / sqrt(0.81 + 0.01).
        let mut img = ImageGrid::constant(3, 3, 1, 0.5);
        img.set(2, 1, 0, 0.6); // right neighbor of the center
        let desc = census_transform(&img, &CensusConfig::default()).unwrap();
        let k = desc.entries_per_pixel();
        let base = (1 * 3 + 1) * k;
        // Offsets in row-major order; (1, 0) is index 4 for a 3x3 patch.
        let entry = desc.data[base + 4];
        let expect = 0.1 / (0.81f64 + 0.01).sqrt();
        assert!((entry - expect).abs() < 1e-12);
        assert!((expect - 0.1104).abs() < 1e-4);
    }

    #[test]
    fn census_distance_identity_is_zero() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let img = ImageGrid::from_fn(5, 5, |_, _| rng.gen_range(0.0..1.0));
        for cfg in [CensusConfig::default(), CensusConfig::hard()] {
            let a = census_transform(&img, &cfg).unwrap();
            let d = census_distance(&a, &a, cfg.soft_hamming_eps).unwrap();
            assert!(d.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hard_distance_counts_all_differing_entries() {
        // A bright center on dark surround vs the inverse: all 8 entries flip.
        let mut bright = ImageGrid::constant(3, 3, 1, 0.0);
        bright.set(1, 1, 0, 1.0);
        let mut dark = ImageGrid::constant(3, 3, 1, 1.0);
        dark.set(1, 1, 0, 0.0);
        let cfg = CensusConfig::hard();
        let a = census_transform(&bright, &cfg).unwrap();
        let b = census_transform(&dark, &cfg).unwrap();
        let d = census_distance(&a, &b, cfg.soft_hamming_eps).unwrap();
        assert_eq!(d.get(1, 1), 8.0);
    }

    #[test]
    fn soft_hamming_term_is_bounded() {
        // Entries near -1 and +1 differ by ~2: q = 4 / (0.1 + 4).
        let q = soft_hamming_term(2.0, 0.1);
        assert!((q - 4.0 / 4.1).abs() < 1e-12);
        assert!((q - 0.9756).abs() < 1e-4);
        assert!(q < 1.0);
    }

    #[test]
    fn census_distance_rejects_mode_mismatch() {
        let img = ImageGrid::constant(3, 3, 1, 0.5);
        let a = census_transform(&img, &CensusConfig::default()).unwrap();
        let b = census_transform(&img, &CensusConfig::hard()).unwrap();
        assert!(census_distance(&a, &b, 0.1).is_err());
    }

    #[test]
    fn census_rejects_multichannel() {
        let img = ImageGrid::zeros(3, 3, 3);
        assert!(census_transform(&img, &CensusConfig::default()).is_err());
    }

    #[test]
    fn charbonnier_closed_form_values() {
        let p = CharbonnierParams::default();
        let at_zero = charbonnier(0.0, &p);
        assert!((at_zero - 1e-6f64.powf(0.45)).abs() < 1e-18);
        assert!((at_zero - 1.9952623149688797e-3).abs() < 1e-12);
        let at_one = charbonnier(1.0, &p);
        assert!((at_one - (1.0 + 1e-6f64).powf(0.45)).abs() < 1e-15);
    }

    #[test]
    fn charbonnier_is_even_and_increasing() {
        let p = CharbonnierParams::default();
        for x in [0.1, 0.5, 2.0, 17.0] {
            assert_eq!(charbonnier(x, &p), charbonnier(-x, &p));
        }
        assert!(charbonnier(0.2, &p) < charbonnier(0.3, &p));
    }

    #[test]
    fn charbonnier_derivative_matches_finite_differences() {
        let p = CharbonnierParams::default();
        for x in [-2.0, -0.3, 0.05, 1.0, 8.0] {
            let h = 1e-6;
            let fd = (charbonnier(x + h, &p) - charbonnier(x - h, &p)) / (2.0 * h);
            assert!((charbonnier_deriv(x, &p) - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn residual_of_identical_aligned_images_is_rho_zero() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let img = ImageGrid::from_fn(6, 6, |_, _| rng.gen_range(0.0..1.0));
        let d = DisplacementField::zeros(6, 6, ViewId::LEFT_T, ViewId::RIGHT_T);
        let cfg = CensusConfig::default();
        let (res, valid) = photometric_residual(&img, &img, &d, &cfg).unwrap();
        let rho0 = charbonnier(0.0, &cfg.charbonnier);
        assert!(valid.as_bools().iter().all(|&v| v));
        assert!(res.data.iter().all(|&v| (v - rho0).abs() < 1e-15));
    }

    #[test]
    fn residual_of_unit_shift_realigns_in_the_interior() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let reference = ImageGrid::from_fn(8, 8, |_, _| rng.gen_range(0.0..1.0));
        // target(x) = reference(x - 1): content moved one pixel right.
        let target = ImageGrid::from_fn(8, 8, |x, y| {
            let sx = if x == 0 { 0 } else { x - 1 };
            reference.get(sx, y, 0)
        });
        let d = DisplacementField::constant(8, 8, ViewId::LEFT_T, ViewId::LEFT_T1, [1.0, 0.0]);
        let cfg = CensusConfig::default();
        let (res, _) = photometric_residual(&reference, &target, &d, &cfg).unwrap();
        let rho0 = charbonnier(0.0, &cfg.charbonnier);
        // Interior pixels whose whole census patch realigns exactly.
        for y in 1..7 {
            for x in 1..6 {
                assert!(
                    (res.get(x, y) - rho0).abs() < 1e-12,
                    "({x},{y}): {}",
                    res.get(x, y)
                );
            }
        }
    }

    #[test]
    fn hard_residual_invariant_to_gamma_brightening() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let img = ImageGrid::from_fn(7, 7, |_, _| rng.gen_range(0.01..1.0));
        let brightened =
            ImageGrid::new(7, 7, 1, img.data().iter().map(|v| v.powf(0.5)).collect()).unwrap();
        let d = DisplacementField::zeros(7, 7, ViewId::LEFT_T, ViewId::RIGHT_T);
        let cfg = CensusConfig::hard();
        let (res, _) = photometric_residual(&img, &brightened, &d, &cfg).unwrap();
        let rho0 = charbonnier(0.0, &cfg.charbonnier);
        assert!(res.data.iter().all(|&v| v == rho0));
    }
}
