//! Coarse-to-fine first-order minimization of the total reconstruction
//! energy over the scene-flow fields of the selected reference views.
//!
//! Each pyramid level runs gradient descent with a backtracking line search
//! (halve the step until the energy decreases), re-estimating occlusion
//! masks from the current fields every `mask_refresh_every` iterations.
//! Masks are constants between refreshes, so accepted iterates have
//! non-increasing energy within a mask epoch. Between levels the fields are
//! bilinearly upsampled with all channels scaled by 2 (all are in pixels).
//!
//! Only the fields of the requested references are optimized. Pairs whose
//! target view is also a reference get the full forward-backward consistency
//! mask from the flipping-derived inverse displacements; pairs pointing at a
//! view without an optimized field fall back to in-frame visibility, since
//! no backward displacement exists to check against. Additional references
//! therefore buy better occlusion reasoning, not just more loss terms.

use std::collections::{BTreeMap, BTreeSet};

use crate::census::CensusConfig;
use crate::costvol::{correlation_volume, extract_features, normalize_features};
use crate::error::{Error, Result};
use crate::geometry::{
    pair_displacement, stereo_sign, PairKind, SceneFlowField, StereoQuadruplet, ViewId,
};
use crate::grid::{bilinear_resize_plane, build_pyramid, Pyramid};
use crate::loss::{
    smoothness_stencil_weights, EnergyContext, GradientField, LossBreakdown, LossWeights,
    PairMasks,
};
use crate::occlusion::{bounds_only_mask, consistency_occlusion, ConsistencyParams};

/// Initialization of the coarsest-level fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FieldInit {
    #[default]
    Zero,
    /// Seed stereo and flow channels from the correlation-volume argmax at
    /// the coarsest level.
    CostVolumeArgmax,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub levels: usize,
    pub iters_per_level: usize,
    /// Initial line-search step size.
    pub step: f64,
    /// Re-estimate occlusion masks every this many iterations.
    pub mask_refresh_every: usize,
    pub refs: BTreeSet<ViewId>,
    pub weights: LossWeights,
    pub census: CensusConfig,
    pub consistency: ConsistencyParams,
    pub init: FieldInit,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            iters_per_level: 200,
            step: 1.0,
            mask_refresh_every: 10,
            refs: [ViewId::LEFT_T, ViewId::RIGHT_T].into_iter().collect(),
            weights: LossWeights::default(),
            census: CensusConfig::default(),
            consistency: ConsistencyParams::default(),
            init: FieldInit::Zero,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidInput("solver needs at least 1 level".into()));
        }
        if self.iters_per_level == 0 {
            return Err(Error::InvalidInput(
                "solver needs at least 1 iteration per level".into(),
            ));
        }
        if !(self.step > 0.0) {
            return Err(Error::InvalidInput("step size must be > 0".into()));
        }
        if self.mask_refresh_every == 0 {
            return Err(Error::InvalidInput(
                "mask refresh interval must be >= 1".into(),
            ));
        }
        if self.refs.is_empty() {
            return Err(Error::InvalidInput("refs must not be empty".into()));
        }
        self.census.validate()?;
        self.weights.validate()?;
        let coarsest = height.min(width) as f64 / (1u64 << (self.levels - 1)) as f64;
        if coarsest < 8.0 {
            return Err(Error::InvalidInput(format!(
                "{} pyramid levels over a {height}x{width} image leave a coarsest side of {coarsest:.1} px (< 8)",
                self.levels
            )));
        }
        Ok(())
    }
}

/// One accepted iteration: level, iteration index, accepted step size and
/// the energy components after the step.
#[derive(Debug, Clone, Copy)]
pub struct ProgressRecord {
    pub level: usize,
    pub iter: usize,
    pub total: f64,
    pub data: f64,
    pub smoothness: f64,
    pub penalty: f64,
    pub step: f64,
}

impl ProgressRecord {
    fn from_breakdown(level: usize, iter: usize, step: f64, b: &LossBreakdown) -> Self {
        Self {
            level,
            iter,
            total: b.total,
            data: b.data(),
            smoothness: b.smoothness,
            penalty: b.occlusion_penalty,
            step,
        }
    }

    /// One structured progress line.
    pub fn to_line(&self) -> String {
        format!(
            "level={} iter={} total={:.9e} data={:.9e} smooth={:.9e} penalty={:.9e} step={:.3e}",
            self.level, self.iter, self.total, self.data, self.smoothness, self.penalty, self.step
        )
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    /// Final full-resolution fields of the optimized references.
    pub fields: BTreeMap<ViewId, SceneFlowField>,
    /// Final occlusion masks per ordered pair rooted at each reference.
    pub masks: PairMasks,
    pub history: Vec<ProgressRecord>,
    pub converged: bool,
}

/// Occlusion masks for every pair rooted at the given references, using the
/// consistency check whenever the target's field is available and in-frame
/// visibility otherwise.
pub fn estimate_masks(
    fields: &BTreeMap<ViewId, SceneFlowField>,
    refs: &BTreeSet<ViewId>,
    params: &ConsistencyParams,
) -> Result<PairMasks> {
    let mut masks = PairMasks::new();
    for &r in refs {
        let field = fields
            .get(&r)
            .ok_or_else(|| Error::InvalidInput(format!("missing field for reference {r}")))?;
        for kind in PairKind::ALL {
            let target = kind.target_of(r);
            let fwd = pair_displacement(field, kind);
            let mask = match fields.get(&target) {
                // The inverse of pair (r -> target) is the same-kind pair of
                // the target's own field.
                Some(back_field) if refs.contains(&target) => {
                    let bwd = pair_displacement(back_field, kind);
                    consistency_occlusion(&fwd, &bwd, params)?
                }
                _ => bounds_only_mask(&fwd),
            };
            masks.insert((r, target), mask);
        }
    }
    Ok(masks)
}

/// Solve a 4x4 symmetric positive-definite system given as the packed upper
/// triangle, by Gaussian elimination with partial pivoting.
fn solve4(packed: &[f64; 10], rhs: [f64; 4]) -> Option<[f64; 4]> {
    let mut a = [[0.0f64; 5]; 4];
    let mut idx = 0;
    for i in 0..4 {
        for j in i..4 {
            a[i][j] = packed[idx];
            a[j][i] = packed[idx];
            idx += 1;
        }
    }
    for i in 0..4 {
        a[i][4] = rhs[i];
    }
    for col in 0..4 {
        let mut pivot = col;
        for row in col + 1..4 {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..5 {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut x = [0.0f64; 4];
    for i in (0..4).rev() {
        let mut acc = a[i][4];
        for j in i + 1..4 {
            acc -= a[i][j] * x[j];
        }
        x[i] = acc / a[i][i];
    }
    Some(x)
}

/// Descent direction from per-block coherent shifts: partition the field
/// into `block x block` tiles, solve each tile's 4-dof Gauss-Newton problem
/// of the data term (summed gradient and curvature), and bilinearly blend
/// the tile shifts into a smooth full-resolution direction.
///
/// Constant shifts cost nothing in the smoothness term and the blended field
/// stays smooth across tile seams, so these moves traverse the energy valley
/// at pixel scale even where the near-L1 smoothness anchors per-pixel
/// updates. A `block` covering the whole field is the global coherent shift;
/// smaller blocks handle progressively finer error modes.
fn block_direction(grad: &GradientField, data_curv: &[f64], block: usize) -> Vec<f64> {
    let (h, w) = (grad.height, grad.width);
    let bh = h.div_ceil(block);
    let bw = w.div_ceil(block);
    let mut g = vec![[0.0f64; 4]; bh * bw];
    let mut hh = vec![[0.0f64; 10]; bh * bw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let b = (y / block).min(bh - 1) * bw + (x / block).min(bw - 1);
            for c in 0..4 {
                g[b][c] += grad.data[p * 4 + c];
            }
            for k in 0..10 {
                hh[b][k] += data_curv[p * 10 + k];
            }
        }
    }
    let mut planes = vec![vec![0.0f64; bh * bw]; 4];
    for b in 0..bh * bw {
        let mut packed = hh[b];
        let trace = packed[0] + packed[4] + packed[7] + packed[9];
        let mu = 1e-8 * (1.0 + trace) + 1e-12;
        packed[0] += mu;
        packed[4] += mu;
        packed[7] += mu;
        packed[9] += mu;
        let gb = g[b];
        if let Some(mut d) = solve4(&packed, [-gb[0], -gb[1], -gb[2], -gb[3]]) {
            // Trust region: a channel with vanishing curvature (saturated
            // census, occluded tile) must not ride a wild Newton step.
            let max_abs = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if max_abs > 2.0 {
                let s = 2.0 / max_abs;
                for v in &mut d {
                    *v *= s;
                }
            }
            for c in 0..4 {
                planes[c][b] = d[c];
            }
        }
    }
    let mut out = vec![0.0f64; h * w * 4];
    if bh == 1 && bw == 1 {
        for p in 0..h * w {
            for c in 0..4 {
                out[p * 4 + c] = planes[c][0];
            }
        }
    } else {
        for (c, plane) in planes.iter().enumerate() {
            let full = bilinear_resize_plane(plane, bh, bw, h, w);
            for (p, v) in full.into_iter().enumerate() {
                out[p * 4 + c] = v;
            }
        }
    }
    out
}

/// Descent direction from the local quadratic model
/// `Q(delta) = g . delta + 1/2 delta^T H delta`, with the exact gradient `g`
/// and an SPD curvature `H` assembled from the per-pixel Gauss-Newton data
/// blocks plus the lagged (IRLS) smoothness stencils. A few Gauss-Seidel
/// sweeps from zero decrease `Q` monotonically, so the result is always a
/// descent direction for the true energy; the caller's line search does the
/// rest.
fn irls_direction(
    field: &SceneFlowField,
    grad: &GradientField,
    data_curv: &[f64],
    lambda_smooth: f64,
    charb: &crate::census::CharbonnierParams,
    sweeps: usize,
) -> Vec<f64> {
    let (h, w) = (field.height, field.width);
    let n = h * w;
    let (wh, wv) = smoothness_stencil_weights(field, lambda_smooth, charb, 0.05);
    let mut delta = vec![0.0f64; n * 4];

    for _ in 0..sweeps {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let mut packed: [f64; 10] = data_curv[p * 10..(p + 1) * 10]
                    .try_into()
                    .expect("packed 4x4 block");
                let mut rhs = [
                    -grad.data[p * 4],
                    -grad.data[p * 4 + 1],
                    -grad.data[p * 4 + 2],
                    -grad.data[p * 4 + 3],
                ];
                // Smoothness stencils containing this pixel, per channel:
                // coefficient a_p on the pixel, partners folded into the rhs.
                let diag_slot = [0usize, 4, 7, 9]; // packed (c,c) positions
                for c in 0..4 {
                    let plane = &wh[c * n..(c + 1) * n];
                    let dch = |q: usize| delta[q * 4 + c];
                    let mut diag = 0.0;
                    let mut r = 0.0;
                    // horizontal stencil centered at x (coeff -2)
                    if x >= 1 && x + 1 < w {
                        let wgt = plane[p];
                        diag += wgt * 4.0;
                        r += wgt * (-2.0) * (dch(p - 1) + dch(p + 1));
                    }
                    // centered at x-1 (this pixel is the right tap, coeff 1)
                    if x >= 2 {
                        let wgt = plane[p - 1];
                        diag += wgt;
                        r += wgt * (dch(p - 2) - 2.0 * dch(p - 1));
                    }
                    // centered at x+1 (left tap, coeff 1)
                    if x + 2 < w {
                        let wgt = plane[p + 1];
                        diag += wgt;
                        r += wgt * (dch(p + 2) - 2.0 * dch(p + 1));
                    }
                    let plane = &wv[c * n..(c + 1) * n];
                    if y >= 1 && y + 1 < h {
                        let wgt = plane[p];
                        diag += wgt * 4.0;
                        r += wgt * (-2.0) * (dch(p - w) + dch(p + w));
                    }
                    if y >= 2 {
                        let wgt = plane[p - w];
                        diag += wgt;
                        r += wgt * (dch(p - 2 * w) - 2.0 * dch(p - w));
                    }
                    if y + 2 < h {
                        let wgt = plane[p + w];
                        diag += wgt;
                        r += wgt * (dch(p + 2 * w) - 2.0 * dch(p + w));
                    }
                    packed[diag_slot[c]] += diag;
                    rhs[c] -= r;
                }
                // Levenberg floor keeps the block solvable everywhere.
                let trace = packed[0] + packed[4] + packed[7] + packed[9];
                let mu = 1e-8 * (1.0 + trace) + 1e-10;
                packed[0] += mu;
                packed[4] += mu;
                packed[7] += mu;
                packed[9] += mu;
                if let Some(sol) = solve4(&packed, rhs) {
                    for c in 0..4 {
                        // Per-pixel trust region, matching the coherent step.
                        delta[p * 4 + c] = sol[c].clamp(-2.0, 2.0);
                    }
                }
            }
        }
    }
    delta
}

/// Separable sweep over constant per-channel field offsets. The bilinear
/// warp blurs at fractional displacements while integer displacements copy
/// pixels exactly, so the census energy carries an integer-lattice ripple
/// that pure descent cannot cross on smooth coarse images; a half-pixel
/// sweep re-centers each channel in the right basin at every level, and the
/// iterative phases refine from there.
///
/// Candidates are ranked by the mean residual over pixels whose warp stayed
/// in frame: a raw sum would bias against correct large displacements
/// (whose border band legitimately leaves the frame, a large fraction of a
/// coarse level) and a penalty charge would bias toward zero displacement.
/// A candidate keeping less than half of the baseline's support is
/// rejected, so pushing content out of frame never looks like progress.
fn grid_sweep(
    ctx: &EnergyContext,
    fields: &mut BTreeMap<ViewId, SceneFlowField>,
    refs: &BTreeSet<ViewId>,
    masks: &PairMasks,
    joint_flow: bool,
) -> Result<()> {
    let uv_grid: Vec<f64> = (-4..=4).map(|i| 0.5 * i as f64).collect();
    let disp_grid: Vec<f64> = (-4..=5).map(|i| 0.5 * i as f64).collect();

    for &r in refs {
        let single: BTreeSet<ViewId> = [r].into_iter().collect();
        // Flow channels, then reference disparity, then the other-time
        // disparity: each stage is driven by the pair that depends on it.
        let mut stages: Vec<Vec<[f64; 4]>> = Vec::new();
        if joint_flow {
            stages.push(
                uv_grid
                    .iter()
                    .flat_map(|&du| uv_grid.iter().map(move |&dv| [du, dv, 0.0, 0.0]))
                    .collect(),
            );
        } else {
            stages.push(uv_grid.iter().map(|&d| [d, 0.0, 0.0, 0.0]).collect());
            stages.push(uv_grid.iter().map(|&d| [0.0, d, 0.0, 0.0]).collect());
        }
        stages.push(disp_grid.iter().map(|&d| [0.0, 0.0, d, 0.0]).collect());
        stages.push(disp_grid.iter().map(|&d| [0.0, 0.0, 0.0, d]).collect());
        let mean_cost = |b: &LossBreakdown| -> (f64, usize) {
            let support = b
                .data_pixels
                .saturating_sub(b.occluded_pixels + b.invalid_data_pixels);
            let mean = if support == 0 {
                f64::INFINITY
            } else {
                b.data() / support as f64
            };
            (mean, support)
        };
        for offsets in &stages {
            let stage_base = fields[&r].clone();
            let (mut best, base_support) =
                mean_cost(&ctx.breakdown(fields, &single, masks, false)?);
            let mut best_offset = [0.0; 4];
            for &off in offsets {
                let mut candidate = stage_base.clone();
                for p in 0..candidate.height * candidate.width {
                    for c in 0..4 {
                        candidate.data[p * 4 + c] += off[c];
                    }
                }
                fields.insert(r, candidate);
                let (e, support) = mean_cost(&ctx.breakdown(fields, &single, masks, false)?);
                if 2 * support >= base_support && e < best {
                    best = e;
                    best_offset = off;
                }
            }
            let mut chosen = stage_base;
            for p in 0..chosen.height * chosen.width {
                for c in 0..4 {
                    chosen.data[p * 4 + c] += best_offset[c];
                }
            }
            fields.insert(r, chosen);
        }
    }
    Ok(())
}

fn upsample_field(f: &SceneFlowField, dst_h: usize, dst_w: usize) -> SceneFlowField {
    let n = f.height * f.width;
    let mut out = SceneFlowField::zeros(dst_h, dst_w, f.reference);
    let mut plane = vec![0.0; n];
    for c in 0..4 {
        for p in 0..n {
            plane[p] = f.data[p * 4 + c];
        }
        let resized = bilinear_resize_plane(&plane, f.height, f.width, dst_h, dst_w);
        for (p, v) in resized.into_iter().enumerate() {
            // All channels are in pixels; doubling resolution doubles them.
            out.data[p * 4 + c] = 2.0 * v;
        }
    }
    out
}

/// Displacement whose mean correlation score over all pixels is highest:
/// a global-translation hypothesis. Averaging suppresses the per-pixel
/// argmax noise that dominates when the true motion is sub-pixel.
fn best_mean_displacement(vol: &crate::costvol::CostVolume) -> ([isize; 2], f64, f64) {
    let n = vol.height * vol.width;
    let k = vol.scores_per_pixel();
    let side = (2 * vol.radius + 1) as isize;
    let r = vol.radius as isize;
    let mut sums = vec![0.0f64; k];
    for p in 0..n {
        for (i, s) in sums.iter_mut().enumerate() {
            *s += vol.data[p * k + i];
        }
    }
    let mut best = 0usize;
    for i in 0..k {
        if sums[i] > sums[best] {
            best = i;
        }
    }
    let d = [best as isize % side - r, best as isize / side - r];
    let zero_idx = (r * side + r) as usize;
    (d, sums[best] / n as f64, sums[zero_idx] / n as f64)
}

fn costvol_init(
    q: &StereoQuadruplet,
    reference: ViewId,
    radius: usize,
) -> Result<SceneFlowField> {
    let (h, w) = (q.height(), q.width());
    let gray = q.to_grayscale();
    let feat = |v: ViewId| -> Result<_> { normalize_features(&extract_features(gray.view(v))?) };
    let ref_feat = feat(reference)?;
    let sign = stereo_sign(reference.side);
    let mut field = SceneFlowField::zeros(h, w, reference);

    // Seed only when the aggregated peak clearly beats the zero hypothesis.
    const MARGIN: f64 = 0.05;

    let stereo_target = PairKind::Stereo.target_of(reference);
    let vol = correlation_volume(&ref_feat, &feat(stereo_target)?, radius)?;
    let (d, best, zero) = best_mean_displacement(&vol);
    if best > zero + MARGIN {
        // dx = sign * disp, so disp = sign * dx; negative is noise.
        let disp = (sign * d[0] as f64).max(0.0);
        for p in 0..h * w {
            field.data[p * 4 + 2] = disp;
            field.data[p * 4 + 3] = disp;
        }
    }

    let flow_target = PairKind::Flow.target_of(reference);
    let vol = correlation_volume(&ref_feat, &feat(flow_target)?, radius)?;
    let (d, best, zero) = best_mean_displacement(&vol);
    if best > zero + MARGIN {
        for p in 0..h * w {
            field.data[p * 4] = d[0] as f64;
            field.data[p * 4 + 1] = d[1] as f64;
        }
    }
    Ok(field)
}

/// Minimize the total energy over the configured references' fields,
/// coarse to fine. See the module docs for the schedule.
pub fn solve(q: &StereoQuadruplet, cfg: &SolverConfig) -> Result<SolveResult> {
    solve_with_progress(q, cfg, |_| {})
}

pub fn solve_with_progress(
    q: &StereoQuadruplet,
    cfg: &SolverConfig,
    mut on_iter: impl FnMut(&ProgressRecord),
) -> Result<SolveResult> {
    cfg.validate(q.height(), q.width())?;
    let gray = q.to_grayscale();
    let pyramids: Vec<Pyramid> = ViewId::ALL
        .iter()
        .map(|&v| build_pyramid(gray.view(v), cfg.levels))
        .collect::<Result<Vec<_>>>()?;

    let level_quad = |level: usize| -> StereoQuadruplet {
        StereoQuadruplet::new(
            pyramids[0].level(level).clone(),
            pyramids[1].level(level).clone(),
            pyramids[2].level(level).clone(),
            pyramids[3].level(level).clone(),
        )
        .expect("pyramid levels share dimensions")
    };

    // Initialize at the coarsest level.
    let coarsest = cfg.levels - 1;
    let cq = level_quad(coarsest);
    let mut fields: BTreeMap<ViewId, SceneFlowField> = BTreeMap::new();
    for &r in &cfg.refs {
        let field = match cfg.init {
            FieldInit::Zero => SceneFlowField::zeros(cq.height(), cq.width(), r),
            FieldInit::CostVolumeArgmax => {
                let radius = 4.min((cq.height().min(cq.width()) - 1) / 2);
                costvol_init(&cq, r, radius)?
            }
        };
        fields.insert(r, field);
    }

    let mut history = Vec::new();
    let mut converged = true;

    for level in (0..cfg.levels).rev() {
        let lq = level_quad(level);
        if level != coarsest {
            let (h, w) = (lq.height(), lq.width());
            for f in fields.values_mut() {
                *f = upsample_field(f, h, w);
            }
        }
        let ctx = EnergyContext::new(&lq, &cfg.census, &cfg.weights)?;
        // Consistency masking engages at full resolution only, and with a
        // widened tolerance: mid-flight fields disagree transiently, and a
        // falsely occluded pixel receives no data gradient and could never
        // recover. Coarser levels gate the data term by in-frame visibility
        // alone. Final output masks use the configured tolerances.
        let level_consistency = ConsistencyParams {
            alpha1: cfg.consistency.alpha1,
            alpha2: if level == 0 {
                cfg.consistency.alpha2 * 16.0
            } else {
                f64::INFINITY
            },
        };
        let mut masks = estimate_masks(&fields, &cfg.refs, &level_consistency)?;
        grid_sweep(&ctx, &mut fields, &cfg.refs, &masks, level == coarsest)?;
        masks = estimate_masks(&fields, &cfg.refs, &level_consistency)?;
        let mut current = ctx.breakdown(&fields, &cfg.refs, &masks, false)?;

        // Annealed direction schedule: whole-field coherent shifts first
        // (they cannot fragment the field across texture pseudo-periods),
        // then progressively finer block shifts, then the per-pixel model
        // step. A phase advances when its direction stalls. All schedule
        // state is per reference: aside from consistency masks, one
        // reference's trajectory must not depend on another's convergence.
        let max_dim = lq.height().max(lq.width());
        let mut phases: Vec<Option<usize>> = vec![Some(max_dim)];
        let mut s = max_dim / 2;
        while s >= 4 {
            phases.push(Some(s));
            s /= 2;
        }
        phases.push(None); // per-pixel Gauss-Seidel model step

        struct RefState {
            phase: usize,
            stalls: usize,
            try_step: f64,
            done: bool,
        }
        let mut states: BTreeMap<ViewId, RefState> = cfg
            .refs
            .iter()
            .map(|&r| {
                (
                    r,
                    RefState {
                        phase: 0,
                        stalls: 0,
                        try_step: cfg.step,
                        done: false,
                    },
                )
            })
            .collect();

        // Singleton totals per reference: sub-steps are judged against the
        // stepped field's own share of the energy, so acceptance decisions,
        // stall detection and schedule state are bitwise independent of the
        // other references' values (the shared total is their sum).
        let singleton =
            |r: ViewId, fields: &BTreeMap<ViewId, SceneFlowField>, masks: &PairMasks| {
                let one: BTreeSet<ViewId> = [r].into_iter().collect();
                ctx.breakdown(fields, &one, masks, false).map(|b| b.total)
            };
        let mut singles: BTreeMap<ViewId, f64> = BTreeMap::new();
        for &r in &cfg.refs {
            singles.insert(r, singleton(r, &fields, &masks)?);
        }

        for iter in 0..cfg.iters_per_level {
            if states.values().all(|s| s.done) {
                break;
            }
            if iter > 0 && iter % cfg.mask_refresh_every == 0 {
                masks = estimate_masks(&fields, &cfg.refs, &level_consistency)?;
                for &r in &cfg.refs {
                    singles.insert(r, singleton(r, &fields, &masks)?);
                }
                current = ctx.breakdown(&fields, &cfg.refs, &masks, false)?;
            }
            if !current.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite energy at level {level}, iteration {iter}"
                )));
            }
            let (grads, curvs) = ctx.linearization(&fields, &cfg.refs, &masks, true)?;
            for g in grads.values() {
                if !g.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient at level {level}, iteration {iter}"
                    )));
                }
            }

            // Block-coordinate sweep over references.
            let mut recorded_step = 0.0f64;
            for &r in &cfg.refs {
                let state = states.get_mut(&r).unwrap();
                if state.done {
                    continue;
                }
                let grad_inf = grads[&r].max_abs();
                if grad_inf < 1e-12 {
                    state.done = true;
                    continue;
                }
                let primary = match phases[state.phase] {
                    Some(size) => block_direction(&grads[&r], &curvs[&r], size),
                    None => irls_direction(
                        &fields[&r],
                        &grads[&r],
                        &curvs[&r],
                        cfg.weights.lambda_smooth,
                        &cfg.census.charbonnier,
                        3,
                    ),
                };
                let negative_gradient: Vec<f64> =
                    grads[&r].data.iter().map(|g| -g).collect();

                let mut accepted = None;
                let mut primary_worked = false;
                'search: for (is_primary, direction) in
                    [(true, &primary), (false, &negative_gradient)]
                {
                    let mut step = state.try_step.min(cfg.step);
                    for _ in 0..=20 {
                        let mut candidate = fields.clone();
                        {
                            let f = candidate.get_mut(&r).unwrap();
                            for (v, dv) in f.data.iter_mut().zip(direction) {
                                *v += step * dv;
                            }
                        }
                        let trial = singleton(r, &candidate, &masks)?;
                        if trial.is_finite() && trial < singles[&r] {
                            accepted = Some((candidate, trial, step));
                            primary_worked = is_primary;
                            break 'search;
                        }
                        step *= 0.5;
                    }
                }
                let Some((new_fields, trial, used_step)) = accepted else {
                    if state.phase + 1 < phases.len() {
                        state.phase += 1;
                        state.stalls = 0;
                        state.try_step = cfg.step;
                    } else {
                        // Stationary at the minimum step in every phase.
                        if grad_inf > 1e-4 {
                            converged = false;
                        }
                        state.done = true;
                    }
                    continue;
                };
                let rel_drop = (singles[&r] - trial) / singles[&r].abs().max(1e-30);
                fields = new_fields;
                singles.insert(r, trial);
                state.try_step = (used_step * 2.0).min(cfg.step);
                recorded_step = recorded_step.max(used_step);
                // Weak or fallback progress advances the schedule; real
                // progress keeps the current phase alive.
                if rel_drop < 1e-9 || !primary_worked {
                    state.stalls += 1;
                    if state.stalls >= 2 {
                        if state.phase + 1 < phases.len() {
                            state.phase += 1;
                            state.stalls = 0;
                            state.try_step = cfg.step;
                        } else {
                            state.done = true;
                        }
                    }
                } else {
                    state.stalls = 0;
                }
            }
            if recorded_step > 0.0 {
                current = ctx.breakdown(&fields, &cfg.refs, &masks, false)?;
                let record =
                    ProgressRecord::from_breakdown(level, iter, recorded_step, &current);
                on_iter(&record);
                history.push(record);
            }
        }
    }

    let masks = estimate_masks(&fields, &cfg.refs, &cfg.consistency)?;
    Ok(SolveResult {
        fields,
        masks,
        history,
        converged,
    })
}
