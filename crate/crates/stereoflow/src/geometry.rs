//! Scene-flow parameterization over stereo quadruplets.
//!
//! A scene-flow field for a reference view stores four channels per pixel:
//! `(u, v, disp_ref, disp_other)`. `u, v` is the 2D motion toward the
//! same-side view at the other time step; `disp_ref` is the disparity at the
//! reference time; `disp_other` is the disparity at the other time step,
//! registered to the reference pixel grid. Disparities follow the KITTI
//! convention: non-negative, with left-image pixels mapping to right-image
//! pixels via `x - disp`.
//!
//! Every reference view reaches the other three views through exactly three
//! pairwise displacements (stereo, flow, cross). Right-side references are
//! handled either directly (sign-mirrored formulas) or through spatial
//! flipping: mirroring and left/right-swapping the input so the requested
//! view becomes the left reference of a valid rectified pair. Both routes
//! agree exactly; the flipping route is what makes inverse displacements
//! available for every ordered image pair.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{bilinear_tap, hflip_image, ImageGrid};

/// Camera side of a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Left,
    Right,
}

/// Time step of a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Time {
    T,
    TPlus1,
}

/// One of the four views of a stereo quadruplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ViewId {
    pub side: Side,
    pub time: Time,
}

impl ViewId {
    pub const LEFT_T: ViewId = ViewId {
        side: Side::Left,
        time: Time::T,
    };
    pub const RIGHT_T: ViewId = ViewId {
        side: Side::Right,
        time: Time::T,
    };
    pub const LEFT_T1: ViewId = ViewId {
        side: Side::Left,
        time: Time::TPlus1,
    };
    pub const RIGHT_T1: ViewId = ViewId {
        side: Side::Right,
        time: Time::TPlus1,
    };

    pub const ALL: [ViewId; 4] = [
        ViewId::LEFT_T,
        ViewId::RIGHT_T,
        ViewId::LEFT_T1,
        ViewId::RIGHT_T1,
    ];

    /// Stable storage index: Lt=0, Rt=1, Lt1=2, Rt1=3.
    pub fn index(self) -> usize {
        match (self.side, self.time) {
            (Side::Left, Time::T) => 0,
            (Side::Right, Time::T) => 1,
            (Side::Left, Time::TPlus1) => 2,
            (Side::Right, Time::TPlus1) => 3,
        }
    }

    pub fn opposite_side(self) -> ViewId {
        ViewId {
            side: match self.side {
                Side::Left => Side::Right,
                Side::Right => Side::Left,
            },
            time: self.time,
        }
    }

    pub fn other_time(self) -> ViewId {
        ViewId {
            side: self.side,
            time: match self.time {
                Time::T => Time::TPlus1,
                Time::TPlus1 => Time::T,
            },
        }
    }

    pub fn label(self) -> &'static str {
        match (self.side, self.time) {
            (Side::Left, Time::T) => "Lt",
            (Side::Right, Time::T) => "Rt",
            (Side::Left, Time::TPlus1) => "Lt1",
            (Side::Right, Time::TPlus1) => "Rt1",
        }
    }

    pub fn parse(s: &str) -> Result<ViewId> {
        match s {
            "Lt" | "lt" | "LT" => Ok(ViewId::LEFT_T),
            "Rt" | "rt" | "RT" => Ok(ViewId::RIGHT_T),
            "Lt1" | "lt1" | "LT1" => Ok(ViewId::LEFT_T1),
            "Rt1" | "rt1" | "RT1" => Ok(ViewId::RIGHT_T1),
            other => Err(Error::InvalidInput(format!(
                "unknown view '{other}' (expected Lt, Rt, Lt1 or Rt1)"
            ))),
        }
    }
}

impl std::fmt::Display for ViewId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// The three pairwise displacements rooted at a reference view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PairKind {
    /// Same time, opposite side.
    Stereo,
    /// Other time, same side.
    Flow,
    /// Other time, opposite side.
    Cross,
}

impl PairKind {
    pub const ALL: [PairKind; 3] = [PairKind::Stereo, PairKind::Flow, PairKind::Cross];

    pub fn target_of(self, reference: ViewId) -> ViewId {
        match self {
            PairKind::Stereo => reference.opposite_side(),
            PairKind::Flow => reference.other_time(),
            PairKind::Cross => reference.opposite_side().other_time(),
        }
    }

    /// Classify an ordered pair of distinct views.
    pub fn of(source: ViewId, target: ViewId) -> Result<PairKind> {
        if source == target {
            return Err(Error::InvalidInput(
                "displacement source and target must differ".into(),
            ));
        }
        Ok(match (source.side == target.side, source.time == target.time) {
            (false, true) => PairKind::Stereo,
            (true, false) => PairKind::Flow,
            (false, false) => PairKind::Cross,
            (true, true) => unreachable!(),
        })
    }
}

/// Dense per-pixel 4-vector `(u, v, disp_ref, disp_other)` for one reference
/// view. For converged physical solutions both disparity channels are
/// non-negative; this is checked as a diagnostic, never enforced during
/// optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlowField {
    pub height: usize,
    pub width: usize,
    pub reference: ViewId,
    /// Row-major, 4 interleaved channels per pixel.
    pub data: Vec<f64>,
}

impl SceneFlowField {
    pub fn zeros(height: usize, width: usize, reference: ViewId) -> Self {
        Self {
            height,
            width,
            reference,
            data: vec![0.0; height * width * 4],
        }
    }

    pub fn constant(height: usize, width: usize, reference: ViewId, s: [f64; 4]) -> Self {
        let mut data = Vec::with_capacity(height * width * 4);
        for _ in 0..height * width {
            data.extend_from_slice(&s);
        }
        Self {
            height,
            width,
            reference,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 4] {
        self.at(y * self.width + x)
    }

    #[inline]
    pub(crate) fn at(&self, p: usize) -> [f64; 4] {
        let base = p * 4;
        [
            self.data[base],
            self.data[base + 1],
            self.data[base + 2],
            self.data[base + 3],
        ]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, s: [f64; 4]) {
        let base = (y * self.width + x) * 4;
        self.data[base..base + 4].copy_from_slice(&s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Diagnostic: fraction of pixels with any negative disparity channel.
    pub fn negative_disparity_fraction(&self) -> f64 {
        let n = self.height * self.width;
        let bad = (0..n)
            .filter(|&p| self.data[p * 4 + 2] < 0.0 || self.data[p * 4 + 3] < 0.0)
            .count();
        bad as f64 / n as f64
    }
}

/// Dense per-pixel 2D displacement between one ordered image pair:
/// `d(x)` points from a pixel of `source` toward its location in `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub height: usize,
    pub width: usize,
    pub source: ViewId,
    pub target: ViewId,
    /// Row-major, interleaved `(dx, dy)`.
    pub data: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(height: usize, width: usize, source: ViewId, target: ViewId) -> Self {
        Self {
            height,
            width,
            source,
            target,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn constant(
        height: usize,
        width: usize,
        source: ViewId,
        target: ViewId,
        d: [f64; 2],
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for _ in 0..height * width {
            data.extend_from_slice(&d);
        }
        Self {
            height,
            width,
            source,
            target,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        let base = (y * self.width + x) * 2;
        [self.data[base], self.data[base + 1]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: [f64; 2]) {
        let base = (y * self.width + x) * 2;
        self.data[base] = d[0];
        self.data[base + 1] = d[1];
    }

    /// Bilinear lookup at real coordinates, clamped to the border; the flag
    /// reports whether the position was inside the domain.
    pub fn sample(&self, x: f64, y: f64) -> ([f64; 2], bool) {
        let tap = bilinear_tap(x, y, self.width, self.height);
        let w = self.width;
        let mut out = [0.0; 2];
        for (c, slot) in out.iter_mut().enumerate() {
            let v00 = self.data[(tap.y0 * w + tap.x0) * 2 + c];
            let v01 = self.data[(tap.y0 * w + tap.x1) * 2 + c];
            let v10 = self.data[(tap.y1 * w + tap.x0) * 2 + c];
            let v11 = self.data[(tap.y1 * w + tap.x1) * 2 + c];
            let top = v00 + tap.fx * (v01 - v00);
            let bot = v10 + tap.fx * (v11 - v10);
            *slot = top + tap.fy * (bot - top);
        }
        (out, tap.in_bounds)
    }

    pub fn same_dims(&self, other: &DisplacementField) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// The four input images of one scene-flow problem, all sharing dimensions.
#[derive(Debug, Clone)]
pub struct StereoQuadruplet {
    images: [ImageGrid; 4],
}

impl StereoQuadruplet {
    pub fn new(
        left_t: ImageGrid,
        right_t: ImageGrid,
        left_t1: ImageGrid,
        right_t1: ImageGrid,
    ) -> Result<Self> {
        let images = [left_t, right_t, left_t1, right_t1];
        let (h, w, c) = (
            images[0].height(),
            images[0].width(),
            images[0].channels(),
        );
        for (img, view) in images.iter().zip(ViewId::ALL) {
            if img.height() != h || img.width() != w || img.channels() != c {
                return Err(Error::DimensionMismatch(format!(
                    "view {view} is {}x{}x{}, expected {h}x{w}x{c}",
                    img.height(),
                    img.width(),
                    img.channels()
                )));
            }
        }
        Ok(Self { images })
    }

    pub fn view(&self, v: ViewId) -> &ImageGrid {
        &self.images[v.index()]
    }

    pub fn height(&self) -> usize {
        self.images[0].height()
    }

    pub fn width(&self) -> usize {
        self.images[0].width()
    }

    pub fn to_grayscale(&self) -> StereoQuadruplet {
        StereoQuadruplet {
            images: [
                self.images[0].to_grayscale(),
                self.images[1].to_grayscale(),
                self.images[2].to_grayscale(),
                self.images[3].to_grayscale(),
            ],
        }
    }
}

pub(crate) fn stereo_sign(side: Side) -> f64 {
    // Left pixels reach the right image at x - disp; mirrored for right refs.
    match side {
        Side::Left => -1.0,
        Side::Right => 1.0,
    }
}

/// Displacement of one pair kind at a single pixel, given the field value and
/// the reference side. Shared by the loss engine and its gradient.
#[inline]
pub(crate) fn pair_displacement_at(s: [f64; 4], side: Side, kind: PairKind) -> [f64; 2] {
    let sign = stereo_sign(side);
    match kind {
        PairKind::Stereo => [sign * s[2], 0.0],
        PairKind::Flow => [s[0], s[1]],
        PairKind::Cross => [s[0] + sign * s[3], s[1]],
    }
}

/// Derive one pairwise displacement field from a scene-flow field. Works for
/// any reference side; right references use the sign-mirrored formulas that
/// the flipping construction induces.
pub fn pair_displacement(f: &SceneFlowField, kind: PairKind) -> DisplacementField {
    let target = kind.target_of(f.reference);
    let mut out = DisplacementField::zeros(f.height, f.width, f.reference, target);
    for p in 0..f.height * f.width {
        let s = [
            f.data[p * 4],
            f.data[p * 4 + 1],
            f.data[p * 4 + 2],
            f.data[p * 4 + 3],
        ];
        let d = pair_displacement_at(s, f.reference.side, kind);
        out.data[p * 2] = d[0];
        out.data[p * 2 + 1] = d[1];
    }
    out
}

/// The three pairwise displacement fields for a canonically oriented (left
/// reference) scene-flow field, in the order stereo, flow, cross:
/// `d_stereo = (-disp_ref, 0)`, `d_flow = (u, v)`,
/// `d_cross = (u - disp_other, v)`.
///
/// Flipped or time-reversed references are handled by
/// [`assemble_reference_inputs`] plus [`unflip_displacement`], or directly by
/// [`pair_displacement`].
pub fn displacements_from_sceneflow(f: &SceneFlowField) -> Result<[DisplacementField; 3]> {
    if f.reference.side != Side::Left {
        return Err(Error::InvalidInput(format!(
            "reference {} is not a left view; assemble flipped inputs first",
            f.reference
        )));
    }
    Ok([
        pair_displacement(f, PairKind::Stereo),
        pair_displacement(f, PairKind::Flow),
        pair_displacement(f, PairKind::Cross),
    ])
}

/// Reorder (and, for right-side references, mirror) a quadruplet so that the
/// requested view becomes the left reference at the reference time of the
/// returned quadruplet. The flag reports whether images were mirrored.
///
/// Orderings, listed as (Lt, Rt, Lt1, Rt1) slots of the result:
/// - `Lt`:  identity, not flipped.
/// - `Lt1`: time-reversed `(Lt1, Rt1, Lt, Rt)`, not flipped.
/// - `Rt`:  `(hflip Rt, hflip Lt, hflip Rt1, hflip Lt1)`, flipped.
/// - `Rt1`: time-reversed and flipped.
pub fn assemble_reference_inputs(q: &StereoQuadruplet, reference: ViewId) -> (StereoQuadruplet, bool) {
    let pick = |v: ViewId| q.view(v).clone();
    let (images, flipped) = match reference {
        ViewId::LEFT_T => (
            [
                pick(ViewId::LEFT_T),
                pick(ViewId::RIGHT_T),
                pick(ViewId::LEFT_T1),
                pick(ViewId::RIGHT_T1),
            ],
            false,
        ),
        ViewId::LEFT_T1 => (
            [
                pick(ViewId::LEFT_T1),
                pick(ViewId::RIGHT_T1),
                pick(ViewId::LEFT_T),
                pick(ViewId::RIGHT_T),
            ],
            false,
        ),
        ViewId::RIGHT_T => (
            [
                hflip_image(q.view(ViewId::RIGHT_T)),
                hflip_image(q.view(ViewId::LEFT_T)),
                hflip_image(q.view(ViewId::RIGHT_T1)),
                hflip_image(q.view(ViewId::LEFT_T1)),
            ],
            true,
        ),
        ViewId::RIGHT_T1 => (
            [
                hflip_image(q.view(ViewId::RIGHT_T1)),
                hflip_image(q.view(ViewId::LEFT_T1)),
                hflip_image(q.view(ViewId::RIGHT_T)),
                hflip_image(q.view(ViewId::LEFT_T)),
            ],
            true,
        ),
    };
    (StereoQuadruplet { images }, flipped)
}

/// Map a displacement field computed in mirrored coordinates back to the
/// original frame: `d(x, y) = (-d'_x(W-1-x, y), d'_y(W-1-x, y))`.
/// An involution.
pub fn unflip_displacement(d: &DisplacementField) -> DisplacementField {
    let (h, w) = (d.height, d.width);
    let mut out = d.clone();
    for y in 0..h {
        for x in 0..w {
            let [dx, dy] = d.get(w - 1 - x, y);
            out.set(x, y, [-dx, dy]);
        }
    }
    out
}

/// Map a scene-flow field between a mirrored frame and the original frame:
/// the horizontal flow component changes sign and every channel is read from
/// the mirrored column. Disparities are mirror-invariant. The `reference`
/// of the result is set by the caller's bookkeeping. An involution.
pub fn mirror_sceneflow(f: &SceneFlowField, reference: ViewId) -> SceneFlowField {
    let (h, w) = (f.height, f.width);
    let mut out = SceneFlowField::zeros(h, w, reference);
    for y in 0..h {
        for x in 0..w {
            let [u, v, d_ref, d_other] = f.get(w - 1 - x, y);
            out.set(x, y, [-u, v, d_ref, d_other]);
        }
    }
    out
}

/// All twelve ordered pairwise displacement fields, derived from the four
/// per-view scene-flow fields (each already expressed in original,
/// un-flipped coordinates). The inverse of pair `(a, b)` is the entry
/// `(b, a)`; this is the flipping payoff: every inverse displacement is read
/// directly from a suitable field, never synthesized by warping.
pub fn inverse_displacement(
    fields: &BTreeMap<ViewId, SceneFlowField>,
) -> Result<BTreeMap<(ViewId, ViewId), DisplacementField>> {
    for v in ViewId::ALL {
        if !fields.contains_key(&v) {
            return Err(Error::InvalidInput(format!(
                "inverse displacements need all four fields; missing {v}"
            )));
        }
    }
    let mut out = BTreeMap::new();
    for v in ViewId::ALL {
        let f = &fields[&v];
        for kind in PairKind::ALL {
            let d = pair_displacement(f, kind);
            out.insert((v, d.target), d);
        }
    }
    Ok(out)
}
