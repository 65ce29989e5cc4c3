//! The reconstruction energy and its analytic gradient.
//!
//! One pair contributes `sum_x [ O(x) * rho(census_distance(x)) +
//! lambda * (1 - O(x)) ]`; a reference view sums its three pairs; the total
//! sums the pairwise losses of every active reference plus a second-order
//! smoothness term per optimized field. Occlusion masks are constants with
//! respect to differentiation, so the penalty term carries no gradient.
//!
//! Gradients flow through the soft census distance, the soft sign transform,
//! the bilinear warp (piecewise-linear positional derivative), and the
//! pairwise displacement formulas back to the four field channels. A central
//! finite-difference verifier doubles as the module's own oracle.

use std::collections::{BTreeMap, BTreeSet};

use crate::census::{
    census_transform, charbonnier, charbonnier_deriv, charbonnier_irls_weight,
    photometric_residual, soft_hamming_deriv, soft_hamming_term, soft_sign, soft_sign_deriv,
    CensusConfig, CensusDescriptorGrid, CensusMode,
};
use crate::error::{Error, Result};
use crate::geometry::{
    pair_displacement_at, stereo_sign, DisplacementField, PairKind, SceneFlowField,
    StereoQuadruplet, ViewId,
};
use crate::grid::{bilinear_tap, tap_value, tap_value_grad, ImageGrid, ScalarField};
use crate::occlusion::OcclusionMask;

/// Occlusion masks keyed by ordered pair `(reference, target)`.
pub type PairMasks = BTreeMap<(ViewId, ViewId), OcclusionMask>;

/// Weights of the non-photometric energy terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Constant penalty per occluded pixel.
    pub lambda_occ: f64,
    /// Weight of the second-order smoothness term.
    pub lambda_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_occ: 12.4,
            lambda_smooth: 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_occ < 0.0 || self.lambda_smooth < 0.0 {
            return Err(Error::InvalidInput(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Loss evaluation configuration: census/penalty parameters plus whether
/// per-pixel term maps should be collected into the breakdown.
#[derive(Debug, Clone, Default)]
pub struct LossConfig {
    pub census: CensusConfig,
    pub collect_maps: bool,
}

/// Total energy plus its parts. `total` is computed as the sum of the listed
/// components in a fixed order, so the decomposition is exact.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    /// Photometric sums per ordered pair (penalty accounted separately).
    pub per_pair: BTreeMap<(ViewId, ViewId), f64>,
    /// `lambda_occ` times the number of occluded pixels across all pairs.
    pub occlusion_penalty: f64,
    pub smoothness: f64,
    /// Number of per-pixel data terms summed (pairs x pixels), for means.
    pub data_pixels: usize,
    /// Pixels gated by their occlusion mask (the penalty divided by lambda).
    pub occluded_pixels: usize,
    /// Pixels that were visible per their mask but whose warp left the
    /// image, contributing a zero residual. The occlusion estimator marks
    /// them occluded at the next refresh.
    pub invalid_data_pixels: usize,
    pub pixel_maps: Option<BTreeMap<(ViewId, ViewId), ScalarField>>,
}

impl LossBreakdown {
    pub fn data(&self) -> f64 {
        self.per_pair.values().sum()
    }

    /// Structured `key=value` report used by the CLI.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("total={:.12e}\n", self.total));
        out.push_str(&format!("data={:.12e}\n", self.data()));
        out.push_str(&format!(
            "occlusion_penalty={:.12e}\n",
            self.occlusion_penalty
        ));
        out.push_str(&format!("smoothness={:.12e}\n", self.smoothness));
        for ((a, b), v) in &self.per_pair {
            out.push_str(&format!("pair.{a}->{b}={v:.12e}\n"));
        }
        if self.data_pixels > 0 {
            let n = self.data_pixels as f64;
            out.push_str(&format!("mean.data_per_pixel={:.12e}\n", self.data() / n));
            out.push_str(&format!("mean.total_per_pixel={:.12e}\n", self.total / n));
        }
        out
    }
}

/// Per-pixel gradient of the total energy with respect to one field's
/// channels `(u, v, disp_ref, disp_other)`.
#[derive(Debug, Clone)]
pub struct GradientField {
    pub height: usize,
    pub width: usize,
    pub reference: ViewId,
    /// Row-major, 4 interleaved channels per pixel.
    pub data: Vec<f64>,
}

impl GradientField {
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

struct PairTerm {
    photometric: f64,
    occluded: usize,
    invalid_visible: usize,
    map: Option<ScalarField>,
}

/// Fused data-term kernel for one pair: warp, soft (or hard) census distance
/// against the precomputed reference descriptors, Charbonnier, occlusion
/// gating, and optionally the chain rule back into a 4-channel gradient
/// accumulation buffer. The pure-descriptor path in [`crate::census`] is the
/// slower reference implementation this kernel is tested against.
///
/// `curv`, when given alongside `grad`, accumulates a per-pixel Gauss-Newton
/// curvature block of the data term in the field channels: the packed upper
/// triangle (10 values per pixel) of `w * u u^T`, with `w` the lagged
/// Charbonnier weight at the census distance and `u` the pixel-diagonal
/// Jacobian of the distance mapped into `(u, v, disp_ref, disp_other)`.
/// A conservative magnitude bound replaces the signed neighbor sum so the
/// block never underestimates stiffness.
#[allow(clippy::too_many_arguments)]
fn pair_data_term(
    ref_desc: &CensusDescriptorGrid,
    target_plane: &[f64],
    field: &SceneFlowField,
    kind: PairKind,
    mask: &OcclusionMask,
    census: &CensusConfig,
    lambda_occ: f64,
    collect_map: bool,
    grad: Option<&mut [f64]>,
    curv: Option<&mut [f64]>,
) -> Result<PairTerm> {
    let (h, w) = (ref_desc.height, ref_desc.width);
    if field.height != h || field.width != w {
        return Err(Error::DimensionMismatch(format!(
            "field {}x{} does not match images {h}x{w}",
            field.height, field.width
        )));
    }
    if mask.height() != h || mask.width() != w {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} does not match images {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    if grad.is_some() && census.mode == CensusMode::Hard {
        return Err(Error::InvalidInput(
            "hard census mode is not differentiable; use soft mode for gradients".into(),
        ));
    }
    let n = h * w;
    let offsets = census.neighbor_offsets();
    let k = offsets.len();
    let side = field.reference.side;
    let want_grad = grad.is_some();

    // Backward warp of the target by this pair's displacement.
    let mut warped = vec![0.0; n];
    let mut valid = vec![false; n];
    let mut gpos = if want_grad { vec![[0.0f64; 2]; n] } else { Vec::new() };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let d = pair_displacement_at(field.at(p), side, kind);
            let tap = bilinear_tap(x as f64 + d[0], y as f64 + d[1], w, h);
            valid[p] = tap.in_bounds;
            if want_grad {
                let (v, gx, gy) = tap_value_grad(target_plane, w, &tap);
                warped[p] = v;
                gpos[p] = [gx, gy];
            } else {
                warped[p] = tap_value(target_plane, w, &tap);
            }
        }
    }

    let mut photometric = 0.0;
    let mut occluded = 0usize;
    let mut invalid_visible = 0usize;
    let mut map = collect_map.then(|| ScalarField::zeros(h, w));
    let mut dldw = want_grad.then(|| vec![0.0f64; n]);
    let sign = stereo_sign(side);
    let mut curv = curv;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !mask.visible(x, y) {
                occluded += 1;
                if let Some(m) = &mut map {
                    m.data[p] = lambda_occ;
                }
                continue;
            }
            if !valid[p] {
                // Out-of-frame warp: residual 0; the occlusion estimator
                // marks such pixels occluded, routing them to the penalty.
                invalid_visible += 1;
                continue;
            }
            let center = warped[p];
            let base = p * k;
            let mut dist = 0.0;
            match census.mode {
                CensusMode::Hard => {
                    for (i, &(ox, oy)) in offsets.iter().enumerate() {
                        let nx = (x as isize + ox).clamp(0, w as isize - 1) as usize;
                        let ny = (y as isize + oy).clamp(0, h as isize - 1) as usize;
                        let diff = warped[ny * w + nx] - center;
                        let b = if diff.abs() <= census.tau {
                            0.0
                        } else if diff > 0.0 {
                            1.0
                        } else {
                            -1.0
                        };
                        if ref_desc.data[base + i] != b {
                            dist += 1.0;
                        }
                    }
                }
                CensusMode::Soft => {
                    for (i, &(ox, oy)) in offsets.iter().enumerate() {
                        let nx = (x as isize + ox).clamp(0, w as isize - 1) as usize;
                        let ny = (y as isize + oy).clamp(0, h as isize - 1) as usize;
                        let diff = warped[ny * w + nx] - center;
                        let b = soft_sign(diff, census.sigma_sq);
                        dist +=
                            soft_hamming_term(ref_desc.data[base + i] - b, census.soft_hamming_eps);
                    }
                }
            }
            let resid = charbonnier(dist, &census.charbonnier);
            photometric += resid;
            if let Some(m) = &mut map {
                m.data[p] = resid;
            }
            if let Some(dl) = &mut dldw {
                let c = charbonnier_deriv(dist, &census.charbonnier);
                let mut jabs = 0.0;
                for (i, &(ox, oy)) in offsets.iter().enumerate() {
                    let nx = (x as isize + ox).clamp(0, w as isize - 1) as usize;
                    let ny = (y as isize + oy).clamp(0, h as isize - 1) as usize;
                    let nb = ny * w + nx;
                    let diff = warped[nb] - center;
                    let b = soft_sign(diff, census.sigma_sq);
                    let e = ref_desc.data[base + i] - b;
                    let chain = soft_hamming_deriv(e, census.soft_hamming_eps)
                        * soft_sign_deriv(diff, census.sigma_sq);
                    // d resid / d warped(nb) and the opposite for the center.
                    let g = -c * chain;
                    dl[nb] += g;
                    dl[p] -= g;
                    jabs += chain.abs();
                }
                if let Some(cv) = &mut curv {
                    let wgt = charbonnier_irls_weight(dist, &census.charbonnier);
                    let h2 = wgt * jabs * jabs;
                    let [gx, gy] = gpos[p];
                    // u = M^T (gx, gy) in (u, v, disp_ref, disp_other).
                    let u = match kind {
                        PairKind::Stereo => [0.0, 0.0, sign * gx, 0.0],
                        PairKind::Flow => [gx, gy, 0.0, 0.0],
                        PairKind::Cross => [gx, gy, 0.0, sign * gx],
                    };
                    let cb = &mut cv[p * 10..(p + 1) * 10];
                    let mut idx = 0;
                    for a in 0..4 {
                        for b2 in a..4 {
                            cb[idx] += h2 * u[a] * u[b2];
                            idx += 1;
                        }
                    }
                }
            }
        }
    }

    if let (Some(dl), Some(gout)) = (dldw, grad) {
        for (p, (&gd, gp)) in dl.iter().zip(&gpos).enumerate() {
            if gd == 0.0 {
                continue;
            }
            let gx = gd * gp[0];
            let gy = gd * gp[1];
            match kind {
                PairKind::Stereo => {
                    gout[p * 4 + 2] += sign * gx;
                }
                PairKind::Flow => {
                    gout[p * 4] += gx;
                    gout[p * 4 + 1] += gy;
                }
                PairKind::Cross => {
                    gout[p * 4] += gx;
                    gout[p * 4 + 1] += gy;
                    gout[p * 4 + 3] += sign * gx;
                }
            }
        }
    }

    Ok(PairTerm {
        photometric,
        occluded,
        invalid_visible,
        map,
    })
}

fn smoothness_raw(f: &SceneFlowField, charb: &crate::census::CharbonnierParams) -> (f64, ScalarField) {
    let (h, w) = (f.height, f.width);
    let mut map = ScalarField::zeros(h, w);
    let mut sum = 0.0;
    for c in 0..4 {
        for y in 0..h {
            for x in 1..w.saturating_sub(1) {
                let a = f.data[(y * w + x - 1) * 4 + c];
                let b = f.data[(y * w + x) * 4 + c];
                let d = f.data[(y * w + x + 1) * 4 + c];
                let t = charbonnier(a - 2.0 * b + d, charb);
                sum += t;
                map.data[y * w + x] += t;
            }
        }
        for y in 1..h.saturating_sub(1) {
            for x in 0..w {
                let a = f.data[((y - 1) * w + x) * 4 + c];
                let b = f.data[(y * w + x) * 4 + c];
                let d = f.data[((y + 1) * w + x) * 4 + c];
                let t = charbonnier(a - 2.0 * b + d, charb);
                sum += t;
                map.data[y * w + x] += t;
            }
        }
    }
    (sum, map)
}

/// Second-order smoothness: Charbonnier of horizontal and vertical second
/// differences of every field channel, interior pixels only, scaled by
/// `lambda_smooth`. The kernel annihilates affine fields.
pub fn smoothness_loss(
    f: &SceneFlowField,
    weights: &LossWeights,
    cfg: &LossConfig,
) -> (f64, ScalarField) {
    let (sum, mut map) = smoothness_raw(f, &cfg.census.charbonnier);
    for v in &mut map.data {
        *v *= weights.lambda_smooth;
    }
    (weights.lambda_smooth * sum, map)
}

fn smoothness_grad(
    f: &SceneFlowField,
    lambda_smooth: f64,
    charb: &crate::census::CharbonnierParams,
    grad: &mut [f64],
) {
    let (h, w) = (f.height, f.width);
    for c in 0..4 {
        for y in 0..h {
            for x in 1..w.saturating_sub(1) {
                let a = f.data[(y * w + x - 1) * 4 + c];
                let b = f.data[(y * w + x) * 4 + c];
                let d = f.data[(y * w + x + 1) * 4 + c];
                let r = lambda_smooth * charbonnier_deriv(a - 2.0 * b + d, charb);
                grad[(y * w + x - 1) * 4 + c] += r;
                grad[(y * w + x) * 4 + c] -= 2.0 * r;
                grad[(y * w + x + 1) * 4 + c] += r;
            }
        }
        for y in 1..h.saturating_sub(1) {
            for x in 0..w {
                let a = f.data[((y - 1) * w + x) * 4 + c];
                let b = f.data[(y * w + x) * 4 + c];
                let d = f.data[((y + 1) * w + x) * 4 + c];
                let r = lambda_smooth * charbonnier_deriv(a - 2.0 * b + d, charb);
                grad[((y - 1) * w + x) * 4 + c] += r;
                grad[(y * w + x) * 4 + c] -= 2.0 * r;
                grad[((y + 1) * w + x) * 4 + c] += r;
            }
        }
    }
}

/// Cached per-quadruplet evaluation state: grayscale images and the census
/// descriptors of each view in its reference role. The descriptors do not
/// depend on the fields, so the solver reuses one context per pyramid level.
pub(crate) struct EnergyContext {
    gray: StereoQuadruplet,
    desc: Vec<CensusDescriptorGrid>,
    census: CensusConfig,
    weights: LossWeights,
}

impl EnergyContext {
    pub fn new(
        q: &StereoQuadruplet,
        census: &CensusConfig,
        weights: &LossWeights,
    ) -> Result<Self> {
        census.validate()?;
        weights.validate()?;
        let gray = q.to_grayscale();
        let desc = ViewId::ALL
            .iter()
            .map(|&v| census_transform(gray.view(v), census))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gray,
            desc,
            census: census.clone(),
            weights: *weights,
        })
    }

    fn field_for<'f>(
        &self,
        fields: &'f BTreeMap<ViewId, SceneFlowField>,
        r: ViewId,
    ) -> Result<&'f SceneFlowField> {
        let f = fields
            .get(&r)
            .ok_or_else(|| Error::InvalidInput(format!("missing scene-flow field for {r}")))?;
        if f.height != self.gray.height() || f.width != self.gray.width() {
            return Err(Error::DimensionMismatch(format!(
                "field for {r} is {}x{}, images are {}x{}",
                f.height,
                f.width,
                self.gray.height(),
                self.gray.width()
            )));
        }
        Ok(f)
    }

    fn mask_for<'m>(&self, masks: &'m PairMasks, r: ViewId, t: ViewId) -> Result<&'m OcclusionMask> {
        masks
            .get(&(r, t))
            .ok_or_else(|| Error::InvalidInput(format!("missing occlusion mask for pair {r}->{t}")))
    }

    pub fn breakdown(
        &self,
        fields: &BTreeMap<ViewId, SceneFlowField>,
        refs: &BTreeSet<ViewId>,
        masks: &PairMasks,
        collect_maps: bool,
    ) -> Result<LossBreakdown> {
        if refs.is_empty() {
            return Err(Error::InvalidInput("no reference views requested".into()));
        }
        let mut per_pair = BTreeMap::new();
        let mut maps = collect_maps.then(BTreeMap::new);
        let mut occluded = 0usize;
        let mut invalid = 0usize;
        let mut smoothness = 0.0;
        let mut data_pixels = 0usize;
        for &r in refs {
            let field = self.field_for(fields, r)?;
            for kind in PairKind::ALL {
                let target = kind.target_of(r);
                let mask = self.mask_for(masks, r, target)?;
                let term = pair_data_term(
                    &self.desc[r.index()],
                    self.gray.view(target).data(),
                    field,
                    kind,
                    mask,
                    &self.census,
                    self.weights.lambda_occ,
                    collect_maps,
                    None,
                    None,
                )?;
                per_pair.insert((r, target), term.photometric);
                occluded += term.occluded;
                invalid += term.invalid_visible;
                data_pixels += self.gray.height() * self.gray.width();
                if let Some(ms) = &mut maps {
                    ms.insert((r, target), term.map.unwrap());
                }
            }
            let (s, _) = smoothness_raw(field, &self.census.charbonnier);
            smoothness += self.weights.lambda_smooth * s;
        }
        let data: f64 = per_pair.values().sum();
        let occlusion_penalty = self.weights.lambda_occ * occluded as f64;
        Ok(LossBreakdown {
            total: data + occlusion_penalty + smoothness,
            per_pair,
            occlusion_penalty,
            smoothness,
            data_pixels,
            occluded_pixels: occluded,
            invalid_data_pixels: invalid,
            pixel_maps: maps,
        })
    }

    pub fn gradients(
        &self,
        fields: &BTreeMap<ViewId, SceneFlowField>,
        refs: &BTreeSet<ViewId>,
        masks: &PairMasks,
    ) -> Result<BTreeMap<ViewId, GradientField>> {
        Ok(self.linearization(fields, refs, masks, false)?.0)
    }

    /// Exact gradients plus, when requested, the per-pixel packed 4x4
    /// Gauss-Newton data curvature blocks used by the solver's descent
    /// direction.
    pub(crate) fn linearization(
        &self,
        fields: &BTreeMap<ViewId, SceneFlowField>,
        refs: &BTreeSet<ViewId>,
        masks: &PairMasks,
        want_curvature: bool,
    ) -> Result<(BTreeMap<ViewId, GradientField>, BTreeMap<ViewId, Vec<f64>>)> {
        if self.census.mode == CensusMode::Hard {
            return Err(Error::InvalidInput(
                "hard census mode is not differentiable; use soft mode for gradients".into(),
            ));
        }
        let mut out = BTreeMap::new();
        let mut curvs = BTreeMap::new();
        for &r in refs {
            let field = self.field_for(fields, r)?;
            let n = field.height * field.width;
            let mut buf = vec![0.0; n * 4];
            let mut curv = want_curvature.then(|| vec![0.0; n * 10]);
            for kind in PairKind::ALL {
                let target = kind.target_of(r);
                let mask = self.mask_for(masks, r, target)?;
                pair_data_term(
                    &self.desc[r.index()],
                    self.gray.view(target).data(),
                    field,
                    kind,
                    mask,
                    &self.census,
                    self.weights.lambda_occ,
                    false,
                    Some(&mut buf),
                    curv.as_deref_mut(),
                )?;
            }
            smoothness_grad(
                field,
                self.weights.lambda_smooth,
                &self.census.charbonnier,
                &mut buf,
            );
            if let Some(c) = curv {
                curvs.insert(r, c);
            }
            out.insert(
                r,
                GradientField {
                    height: field.height,
                    width: field.width,
                    reference: r,
                    data: buf,
                },
            );
        }
        Ok((out, curvs))
    }
}

/// Lagged smoothness stencil weights of one field: `lambda_smooth` times the
/// IRLS Charbonnier weight at each interior second difference, horizontal
/// then vertical, per channel. `residual_floor` caps the weight's blow-up at
/// vanishing residuals (the Charbonnier is nearly L1, so its curvature at a
/// perfectly smooth field would otherwise anchor the model); the floor only
/// shapes the descent model, never the energy or its gradient.
pub(crate) fn smoothness_stencil_weights(
    f: &SceneFlowField,
    lambda_smooth: f64,
    charb: &crate::census::CharbonnierParams,
    residual_floor: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (f.height, f.width);
    let weight = |t: f64| {
        lambda_smooth * charbonnier_irls_weight(t.abs().max(residual_floor), charb)
    };
    // Horizontal stencils exist for x in 1..w-1; addressed as [c][y][x].
    let mut wh = vec![0.0; 4 * h * w];
    let mut wv = vec![0.0; 4 * h * w];
    for c in 0..4 {
        for y in 0..h {
            for x in 1..w.saturating_sub(1) {
                let a = f.data[(y * w + x - 1) * 4 + c];
                let b = f.data[(y * w + x) * 4 + c];
                let d = f.data[(y * w + x + 1) * 4 + c];
                wh[c * h * w + y * w + x] = weight(a - 2.0 * b + d);
            }
        }
        for y in 1..h.saturating_sub(1) {
            for x in 0..w {
                let a = f.data[((y - 1) * w + x) * 4 + c];
                let b = f.data[(y * w + x) * 4 + c];
                let d = f.data[((y + 1) * w + x) * 4 + c];
                wv[c * h * w + y * w + x] = weight(a - 2.0 * b + d);
            }
        }
    }
    (wh, wv)
}

/// Loss of one image pair under an explicit displacement field and occlusion
/// mask: `sum_x [ O(x) * rho(census distance at x) + lambda * (1 - O(x)) ]`.
/// Returns the scalar and the per-pixel loss map. The occluded-pixel penalty
/// is accumulated as `lambda * count`, so an all-occluded image yields
/// exactly `lambda * N`.
pub fn pair_loss(
    reference: &ImageGrid,
    target: &ImageGrid,
    d: &DisplacementField,
    mask: &OcclusionMask,
    weights: &LossWeights,
    cfg: &LossConfig,
) -> Result<(f64, ScalarField)> {
    weights.validate()?;
    let reference = reference.to_grayscale();
    let target = target.to_grayscale();
    if mask.height() != reference.height() || mask.width() != reference.width() {
        return Err(Error::DimensionMismatch(
            "mask does not match image dimensions".into(),
        ));
    }
    let (resid, _valid) = photometric_residual(&reference, &target, d, &cfg.census)?;
    let (h, w) = (reference.height(), reference.width());
    let mut map = ScalarField::zeros(h, w);
    let mut photometric = 0.0;
    let mut occluded = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.visible(x, y) {
                let r = resid.get(x, y);
                photometric += r;
                map.set(x, y, r);
            } else {
                occluded += 1;
                map.set(x, y, weights.lambda_occ);
            }
        }
    }
    Ok((
        photometric + weights.lambda_occ * occluded as f64,
        map,
    ))
}

/// Pairwise reconstruction loss of one reference view: the sum of its three
/// pair losses (stereo, flow, cross) plus nothing else. Smoothness belongs to
/// [`total_loss`].
pub fn pairs_loss(
    q: &StereoQuadruplet,
    fields: &BTreeMap<ViewId, SceneFlowField>,
    reference: ViewId,
    masks: &PairMasks,
    weights: &LossWeights,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let ctx = EnergyContext::new(q, &cfg.census, weights)?;
    let mut refs = BTreeSet::new();
    refs.insert(reference);
    let mut b = ctx.breakdown(fields, &refs, masks, cfg.collect_maps)?;
    // Report the data-side only; callers add smoothness through total_loss.
    b.total -= b.smoothness;
    b.smoothness = 0.0;
    Ok(b)
}

/// Total energy over the requested reference views: the sum of their
/// pairwise losses plus the smoothness of each optimized field.
pub fn total_loss(
    q: &StereoQuadruplet,
    fields: &BTreeMap<ViewId, SceneFlowField>,
    refs: &BTreeSet<ViewId>,
    masks: &PairMasks,
    weights: &LossWeights,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let ctx = EnergyContext::new(q, &cfg.census, weights)?;
    ctx.breakdown(fields, refs, masks, cfg.collect_maps)
}

/// Exact gradient of [`total_loss`] with respect to every channel of every
/// optimized field. Requires soft census mode; occlusion masks are treated
/// as constants.
pub fn grad_total_loss(
    q: &StereoQuadruplet,
    fields: &BTreeMap<ViewId, SceneFlowField>,
    refs: &BTreeSet<ViewId>,
    masks: &PairMasks,
    weights: &LossWeights,
    cfg: &LossConfig,
) -> Result<BTreeMap<ViewId, GradientField>> {
    let ctx = EnergyContext::new(q, &cfg.census, weights)?;
    ctx.gradients(fields, refs, masks)
}

/// Central finite differences of an arbitrary scalar function of the fields,
/// evaluated for every channel of every requested field. This is the
/// independent oracle used to verify [`grad_total_loss`]; it also serves the
/// test hook that checks the machinery itself on closed-form functions.
pub fn finite_diff_gradient(
    fields: &BTreeMap<ViewId, SceneFlowField>,
    refs: &BTreeSet<ViewId>,
    h: f64,
    mut f: impl FnMut(&BTreeMap<ViewId, SceneFlowField>) -> f64,
) -> BTreeMap<ViewId, GradientField> {
    let mut work = fields.clone();
    let mut out = BTreeMap::new();
    for &r in refs {
        let n = fields[&r].data.len();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let orig = fields[&r].data[i];
            work.get_mut(&r).unwrap().data[i] = orig + h;
            let plus = f(&work);
            work.get_mut(&r).unwrap().data[i] = orig - h;
            let minus = f(&work);
            work.get_mut(&r).unwrap().data[i] = orig;
            grad[i] = (plus - minus) / (2.0 * h);
        }
        out.insert(
            r,
            GradientField {
                height: fields[&r].height,
                width: fields[&r].width,
                reference: r,
                data: grad,
            },
        );
    }
    out
}

/// Elementwise comparison of the analytic and finite-difference gradients.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Fraction of coordinates with `|a - n| <= atol + rtol * max(|a|, |n|)`.
    pub fraction_matching: f64,
    pub coords_checked: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Set when the finite-difference step is so small that floating-point
    /// rounding of the loss dominates the difference quotient.
    pub step_degenerate: bool,
}

impl FiniteDiffReport {
    pub fn to_text(&self) -> String {
        format!(
            "coords={}\nmax_rel_err={:.6e}\nmean_rel_err={:.6e}\nfraction_matching={:.6}\nstep_degenerate={}\n",
            self.coords_checked,
            self.max_rel_err,
            self.mean_rel_err,
            self.fraction_matching,
            self.step_degenerate
        )
    }
}

const FD_RTOL: f64 = 1e-4;
const FD_ATOL: f64 = 1e-7;

/// Verify the analytic gradient of the total loss against central finite
/// differences with step `h`.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check(
    q: &StereoQuadruplet,
    fields: &BTreeMap<ViewId, SceneFlowField>,
    refs: &BTreeSet<ViewId>,
    masks: &PairMasks,
    weights: &LossWeights,
    cfg: &LossConfig,
    h: f64,
) -> Result<FiniteDiffReport> {
    if h <= 0.0 {
        return Err(Error::InvalidInput("finite-difference step must be > 0".into()));
    }
    let ctx = EnergyContext::new(q, &cfg.census, weights)?;
    let analytic = ctx.gradients(fields, refs, masks)?;
    let loss_at = |f: &BTreeMap<ViewId, SceneFlowField>| {
        ctx.breakdown(f, refs, masks, false)
            .map(|b| b.total)
            .unwrap_or(f64::NAN)
    };
    let base_loss = loss_at(fields);
    let numeric = finite_diff_gradient(fields, refs, h, loss_at);
    compare_gradients(&analytic, &numeric, base_loss, h)
}

pub(crate) fn compare_gradients(
    analytic: &BTreeMap<ViewId, GradientField>,
    numeric: &BTreeMap<ViewId, GradientField>,
    loss_magnitude: f64,
    h: f64,
) -> Result<FiniteDiffReport> {
    let mut max_rel: f64 = 0.0;
    let mut sum_rel = 0.0;
    let mut matching = 0usize;
    let mut count = 0usize;
    let mut sum_abs_analytic = 0.0;
    for (r, a) in analytic {
        let n = numeric
            .get(r)
            .ok_or_else(|| Error::InvalidInput(format!("numeric gradient missing field {r}")))?;
        for (&av, &nv) in a.data.iter().zip(&n.data) {
            let scale = av.abs().max(nv.abs());
            let err = (av - nv).abs();
            let rel = err / scale.max(FD_ATOL);
            max_rel = max_rel.max(rel);
            sum_rel += rel;
            if err <= FD_ATOL + FD_RTOL * scale {
                matching += 1;
            }
            sum_abs_analytic += av.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no gradient coordinates to compare".into()));
    }
    // Central differences lose ~eps * |L| / h to rounding; flag steps where
    // that noise floor is comparable to the gradients being measured.
    let noise = f64::EPSILON * loss_magnitude.abs() / h;
    let mean_abs = sum_abs_analytic / count as f64;
    let step_degenerate = noise > 0.01 * (mean_abs + FD_ATOL);
    Ok(FiniteDiffReport {
        max_rel_err: max_rel,
        mean_rel_err: sum_rel / count as f64,
        fraction_matching: matching as f64 / count as f64,
        coords_checked: count,
        rtol: FD_RTOL,
        atol: FD_ATOL,
        step_degenerate,
    })
}

/// All-visible masks for every ordered pair rooted at the given references;
/// convenience for loss evaluation without occlusion reasoning.
pub fn all_visible_masks(height: usize, width: usize, refs: &BTreeSet<ViewId>) -> PairMasks {
    let mut masks = PairMasks::new();
    for &r in refs {
        for kind in PairKind::ALL {
            masks.insert((r, kind.target_of(r)), OcclusionMask::all_visible(height, width));
        }
    }
    masks
}
