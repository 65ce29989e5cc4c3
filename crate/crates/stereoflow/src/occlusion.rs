//! Forward-backward consistency occlusion estimation.
//!
//! A pixel of the reference view is visible in a target view when following
//! its forward displacement and then the target's backward displacement
//! returns (nearly) to the start. Pixels that fail the check, or whose
//! forward displacement leaves the image, are occluded and excluded from the
//! photometric data term.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{
    inverse_displacement, DisplacementField, PairKind, SceneFlowField, ViewId,
};

/// Per-pixel binary indicator; 1 (`true`) = visible in the target image.
/// Also reused wherever a binary per-pixel grid is needed (warp validity).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl OcclusionMask {
    pub fn all_visible(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn all_occluded(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_bools(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn visible(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, visible: bool) {
        self.data[y * self.width + x] = visible;
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.data.iter().copied()
    }

    pub fn as_bools(&self) -> &[bool] {
        &self.data
    }

    pub fn visible_count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn occluded_count(&self) -> usize {
        self.data.len() - self.visible_count()
    }

    /// Intersection of visibility (union of occlusions), a diagnostic fusion
    /// of per-pair masks.
    pub fn and(&self, other: &OcclusionMask) -> OcclusionMask {
        assert_eq!(self.data.len(), other.data.len());
        OcclusionMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }

    /// Mirror the mask horizontally (masks move between the original and
    /// flipped frames without loss; they are binary).
    pub fn hflip(&self) -> OcclusionMask {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.visible(self.width - 1 - x, y));
            }
        }
        out
    }
}

/// Thresholds of the forward-backward consistency inequality, in px².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyParams {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            alpha1: 0.01,
            alpha2: 0.5,
        }
    }
}

/// Forward-backward consistency check.
///
/// With `b(x) = bilinear_sample(d_bwd, x + d_fwd(x))`, pixel `x` is occluded
/// iff `|d_fwd(x) + b(x)|^2 > alpha1 * (|d_fwd(x)|^2 + |b(x)|^2) + alpha2`,
/// or the lookup `x + d_fwd(x)` leaves the image domain. `d_bwd` must be
/// expressed in the target image's pixel grid.
pub fn consistency_occlusion(
    d_fwd: &DisplacementField,
    d_bwd: &DisplacementField,
    p: &ConsistencyParams,
) -> Result<OcclusionMask> {
    if !d_fwd.same_dims(d_bwd) {
        return Err(Error::DimensionMismatch(format!(
            "forward {}x{} vs backward {}x{}",
            d_fwd.height, d_fwd.width, d_bwd.height, d_bwd.width
        )));
    }
    let (h, w) = (d_fwd.height, d_fwd.width);
    let mut mask = OcclusionMask::all_visible(h, w);
    for y in 0..h {
        for x in 0..w {
            let f = d_fwd.get(x, y);
            let (b, in_bounds) = d_bwd.sample(x as f64 + f[0], y as f64 + f[1]);
            if !in_bounds {
                mask.set(x, y, false);
                continue;
            }
            let res = (f[0] + b[0]).powi(2) + (f[1] + b[1]).powi(2);
            let fwd_sq = f[0] * f[0] + f[1] * f[1];
            let bwd_sq = b[0] * b[0] + b[1] * b[1];
            if res > p.alpha1 * (fwd_sq + bwd_sq) + p.alpha2 {
                mask.set(x, y, false);
            }
        }
    }
    Ok(mask)
}

/// Visibility limited to in-frame forward lookups only. Used when no
/// backward field is available to run the full consistency check.
pub fn bounds_only_mask(d_fwd: &DisplacementField) -> OcclusionMask {
    let (h, w) = (d_fwd.height, d_fwd.width);
    let mut mask = OcclusionMask::all_visible(h, w);
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    for y in 0..h {
        for x in 0..w {
            let f = d_fwd.get(x, y);
            let sx = x as f64 + f[0];
            let sy = y as f64 + f[1];
            if sx < 0.0 || sx > max_x || sy < 0.0 || sy > max_y {
                mask.set(x, y, false);
            }
        }
    }
    mask
}

/// Occlusion masks for the three pairs rooted at `reference`, using forward
/// and inverse displacements read from the four per-view fields.
pub fn occlusion_masks_for_reference(
    fields: &BTreeMap<ViewId, SceneFlowField>,
    reference: ViewId,
    p: &ConsistencyParams,
) -> Result<BTreeMap<ViewId, OcclusionMask>> {
    let all = inverse_displacement(fields)?;
    let mut out = BTreeMap::new();
    for kind in PairKind::ALL {
        let target = kind.target_of(reference);
        let fwd = &all[&(reference, target)];
        let bwd = &all[&(target, reference)];
        out.insert(target, consistency_occlusion(fwd, bwd, p)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_pair(h: usize, w: usize, f: [f64; 2], b: [f64; 2]) -> (DisplacementField, DisplacementField) {
        (
            DisplacementField::constant(h, w, ViewId::LEFT_T, ViewId::RIGHT_T, f),
            DisplacementField::constant(h, w, ViewId::RIGHT_T, ViewId::LEFT_T, b),
        )
    }

    #[test]
    fn exact_cancellation_is_visible_in_the_interior() {
        let (fwd, bwd) = constant_pair(8, 16, [5.0, 0.0], [-5.0, 0.0]);
        let mask = consistency_occlusion(&fwd, &bwd, &ConsistencyParams::default()).unwrap();
        // Interior: residual 0 <= 0.01 * 50 + 0.5. Columns pushed past the
        // right border are occluded by the out-of-frame rule.
        for y in 0..8 {
            for x in 0..16 {
                let expect = (x + 5) <= 15;
                assert_eq!(mask.visible(x, y), expect, "({x},{y})");
            }
        }
    }

    #[test]
    fn inconsistent_backward_field_is_occluded() {
        // 25 > 0.01 * 25 + 0.5 = 0.75 with the default thresholds.
        let (fwd, bwd) = constant_pair(4, 16, [5.0, 0.0], [0.0, 0.0]);
        let mask = consistency_occlusion(&fwd, &bwd, &ConsistencyParams::default()).unwrap();
        for y in 0..4 {
            for x in 0..16 {
                assert!(!mask.visible(x, y));
            }
        }
    }

    #[test]
    fn out_of_frame_forward_lookups_are_occluded() {
        let (fwd, bwd) = constant_pair(4, 8, [6.0, 0.0], [-6.0, 0.0]);
        let mask = consistency_occlusion(&fwd, &bwd, &ConsistencyParams::default()).unwrap();
        for y in 0..4 {
            for x in 0..8 {
                assert_eq!(mask.visible(x, y), x + 6 <= 7);
            }
        }
    }

    #[test]
    fn scaling_consistent_fields_stays_visible() {
        for scale in [0.1, 1.0, 7.0, 40.0] {
            let (fwd, bwd) = constant_pair(4, 256, [scale, 0.0], [-scale, 0.0]);
            let mask = consistency_occlusion(&fwd, &bwd, &ConsistencyParams::default()).unwrap();
            // Residual stays 0 wherever the lookup lands in frame.
            assert!(mask.visible(0, 0));
            assert!(mask.visible(1, 2));
        }
    }

    #[test]
    fn zero_thresholds_mark_any_nonzero_residual() {
        let (fwd, bwd) = constant_pair(2, 8, [1.0, 0.0], [-1.0, 0.001]);
        let p = ConsistencyParams {
            alpha1: 0.0,
            alpha2: 0.0,
        };
        let mask = consistency_occlusion(&fwd, &bwd, &p).unwrap();
        assert!(mask.as_bools().iter().all(|&v| !v));

        let (fwd, bwd) = constant_pair(2, 8, [1.0, 0.0], [-1.0, 0.0]);
        let mask = consistency_occlusion(&fwd, &bwd, &p).unwrap();
        assert!(mask.visible(0, 0));
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let fwd = DisplacementField::zeros(2, 2, ViewId::LEFT_T, ViewId::RIGHT_T);
        let bwd = DisplacementField::zeros(3, 3, ViewId::RIGHT_T, ViewId::LEFT_T);
        assert!(consistency_occlusion(&fwd, &bwd, &ConsistencyParams::default()).is_err());
    }

    #[test]
    fn static_scene_masks_are_all_visible() {
        let mut fields = BTreeMap::new();
        for v in ViewId::ALL {
            fields.insert(v, SceneFlowField::zeros(4, 4, v));
        }
        let masks =
            occlusion_masks_for_reference(&fields, ViewId::LEFT_T, &ConsistencyParams::default())
                .unwrap();
        assert_eq!(masks.len(), 3);
        for mask in masks.values() {
            assert_eq!(mask.occluded_count(), 0);
        }
    }

    #[test]
    fn random_inconsistent_fields_are_nearly_all_occluded() {
        // Independent displacements with magnitudes far above alpha2 fail
        // the consistency inequality almost everywhere.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let (h, w) = (24, 24);
        let mut fields = BTreeMap::new();
        for v in ViewId::ALL {
            let mut f = SceneFlowField::zeros(h, w, v);
            for y in 0..h {
                for x in 0..w {
                    f.set(
                        x,
                        y,
                        [
                            rng.gen_range(-10.0..10.0),
                            rng.gen_range(-10.0..10.0),
                            rng.gen_range(10.0..30.0),
                            rng.gen_range(10.0..30.0),
                        ],
                    );
                }
            }
            fields.insert(v, f);
        }
        let masks =
            occlusion_masks_for_reference(&fields, ViewId::LEFT_T, &ConsistencyParams::default())
                .unwrap();
        for (target, mask) in &masks {
            let frac = mask.occluded_count() as f64 / (h * w) as f64;
            assert!(frac > 0.9, "pair ->{target}: occluded fraction {frac}");
        }
    }

    #[test]
    fn bounds_only_mask_flags_exits() {
        let mut d = DisplacementField::zeros(4, 4, ViewId::LEFT_T, ViewId::RIGHT_T);
        d.set(3, 0, [1.0, 0.0]);
        d.set(0, 3, [0.0, 1.0]);
        let mask = bounds_only_mask(&d);
        assert!(!mask.visible(3, 0));
        assert!(!mask.visible(0, 3));
        assert!(mask.visible(1, 1));
    }
}
