//! Analytically constructed stereo scenes with known ground truth.
//!
//! Textures are sums of random sinusoids, so every view can be rendered by
//! exact point evaluation at real coordinates: no interpolation error enters
//! the construction. Two generators are provided: a fronto-parallel plane
//! under constant scene flow (occlusion-free away from the borders) and a
//! foreground square sliding over a static-depth background (with exact
//! occlusion geometry for every ordered view pair).

use std::collections::BTreeMap;

use rand::Rng;

use crate::geometry::{
    pair_displacement_at, PairKind, SceneFlowField, StereoQuadruplet, ViewId,
};
use crate::grid::ImageGrid;
use crate::loss::PairMasks;
use crate::occlusion::OcclusionMask;

/// Band-limited random texture callable at real coordinates, with values
/// guaranteed inside [0, 1].
#[derive(Debug, Clone)]
pub struct SinusoidTexture {
    terms: Vec<(f64, f64, f64, f64)>, // (amplitude, kx, ky, phase)
}

impl SinusoidTexture {
    /// Random texture spread over three wavelength bands: long waves keep
    /// coarse pyramid levels informative after box-filter halvings, short
    /// waves carry the sub-pixel alignment signal at full resolution.
    pub fn random(rng: &mut impl Rng, num_terms: usize) -> Self {
        let mut raw = Vec::with_capacity(num_terms);
        let mut amp_sum = 0.0;
        for i in 0..num_terms {
            // Long waves dominate so the coarsest levels keep a clean basin.
            let (wavelength, band_weight) = match i % 3 {
                0 => (rng.gen_range(32.0..64.0), 1.6),
                1 => (rng.gen_range(16.0..32.0), 1.0),
                _ => (rng.gen_range(8.0..16.0), 0.6),
            };
            let k = std::f64::consts::TAU / wavelength;
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = band_weight * rng.gen_range(0.5..1.0);
            amp_sum += amp;
            raw.push((amp, k * angle.cos(), k * angle.sin(), rng.gen_range(0.0..std::f64::consts::TAU)));
        }
        // Normalize so the sum stays within +-0.45 around the 0.5 base.
        let scale = 0.45 / amp_sum;
        let terms = raw
            .into_iter()
            .map(|(a, kx, ky, p)| (a * scale, kx, ky, p))
            .collect();
        Self { terms }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let mut v = 0.5;
        for &(a, kx, ky, p) in &self.terms {
            v += a * (kx * x + ky * y + p).sin();
        }
        v
    }
}

/// Ground-truth scene-flow channels of a view, given the left-reference
/// parameters `(u, v, d1, d2)` of a constant-motion fronto-parallel layer.
pub fn view_field_channels(s: [f64; 4], view: ViewId) -> [f64; 4] {
    let [u, v, d1, d2] = s;
    match view {
        ViewId::LEFT_T => [u, v, d1, d2],
        ViewId::RIGHT_T => [u + d1 - d2, v, d1, d2],
        ViewId::LEFT_T1 => [-u, -v, d2, d1],
        ViewId::RIGHT_T1 => [-u + d2 - d1, -v, d2, d1],
    }
}

/// Where a constant-motion layer anchored to the left reference grid appears
/// in each view: pixel `x` of the view shows the layer point at `x - offset`.
fn layer_offset(s: [f64; 4], view: ViewId) -> [f64; 2] {
    let [u, v, d1, d2] = s;
    match view {
        ViewId::LEFT_T => [0.0, 0.0],
        ViewId::RIGHT_T => [-d1, 0.0],
        ViewId::LEFT_T1 => [u, v],
        ViewId::RIGHT_T1 => [u - d2, v],
    }
}

/// A constructed scene: the rendered quadruplet plus ground-truth per-view
/// fields and, when the geometry produces them, exact per-pair visibility
/// masks.
#[derive(Debug, Clone)]
pub struct ConstructedScene {
    pub quadruplet: StereoQuadruplet,
    pub fields: BTreeMap<ViewId, SceneFlowField>,
    /// Ground-truth visibility for all 12 ordered pairs.
    pub masks: PairMasks,
}

/// Fronto-parallel plane under constant scene flow `(u, v, d1, d2)`.
/// Occlusion-free except where displacements leave the frame.
pub fn constant_motion_scene(
    height: usize,
    width: usize,
    s: [f64; 4],
    texture: &SinusoidTexture,
) -> ConstructedScene {
    let render = |view: ViewId| {
        let off = layer_offset(s, view);
        ImageGrid::from_fn(height, width, |x, y| {
            texture.eval(x as f64 - off[0], y as f64 - off[1])
        })
    };
    let quadruplet = StereoQuadruplet::new(
        render(ViewId::LEFT_T),
        render(ViewId::RIGHT_T),
        render(ViewId::LEFT_T1),
        render(ViewId::RIGHT_T1),
    )
    .expect("constructed views share dimensions");

    let mut fields = BTreeMap::new();
    for v in ViewId::ALL {
        fields.insert(
            v,
            SceneFlowField::constant(height, width, v, view_field_channels(s, v)),
        );
    }

    let mut masks = PairMasks::new();
    for a in ViewId::ALL {
        let fa = &fields[&a];
        for kind in PairKind::ALL {
            let b = kind.target_of(a);
            let mut mask = OcclusionMask::all_visible(height, width);
            for y in 0..height {
                for x in 0..width {
                    let d = pair_displacement_at(fa.get(x, y), a.side, kind);
                    let px = x as f64 + d[0];
                    let py = y as f64 + d[1];
                    if px < 0.0 || px > (width - 1) as f64 || py < 0.0 || py > (height - 1) as f64 {
                        mask.set(x, y, false);
                    }
                }
            }
            masks.insert((a, b), mask);
        }
    }

    ConstructedScene {
        quadruplet,
        fields,
        masks,
    }
}

/// Axis-aligned rectangle in left-reference coordinates, `[x0, x0+w) x [y0, y0+h)`.
#[derive(Debug, Clone, Copy)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    fn shifted(&self, off: [f64; 2]) -> Rect {
        Rect {
            x0: self.x0 + off[0],
            y0: self.y0 + off[1],
            ..*self
        }
    }
}

/// Parameters of the two-layer scene.
#[derive(Debug, Clone, Copy)]
pub struct LayeredSceneParams {
    /// Left-reference scene flow of the static-depth background.
    pub background: [f64; 4],
    /// Left-reference scene flow of the foreground square.
    pub foreground: [f64; 4],
    /// Foreground square in left-reference coordinates at time t.
    pub rect: Rect,
}

/// Foreground square moving over a background plane. The foreground is
/// opaque and in front, so background pixels whose displacement lands inside
/// the square's footprint in the target view are occluded there; foreground
/// pixels are visible wherever they stay in frame.
pub fn layered_square_scene(
    height: usize,
    width: usize,
    params: &LayeredSceneParams,
    bg_texture: &SinusoidTexture,
    fg_texture: &SinusoidTexture,
) -> ConstructedScene {
    let fg = params.foreground;
    let bg = params.background;

    let fg_rect_in = |view: ViewId| params.rect.shifted(layer_offset(fg, view));

    let render = |view: ViewId| {
        let fg_off = layer_offset(fg, view);
        let bg_off = layer_offset(bg, view);
        let rect = fg_rect_in(view);
        ImageGrid::from_fn(height, width, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            if rect.contains(xf, yf) {
                fg_texture.eval(xf - fg_off[0], yf - fg_off[1])
            } else {
                bg_texture.eval(xf - bg_off[0], yf - bg_off[1])
            }
        })
    };
    let quadruplet = StereoQuadruplet::new(
        render(ViewId::LEFT_T),
        render(ViewId::RIGHT_T),
        render(ViewId::LEFT_T1),
        render(ViewId::RIGHT_T1),
    )
    .expect("constructed views share dimensions");

    let mut fields = BTreeMap::new();
    for v in ViewId::ALL {
        let rect = fg_rect_in(v);
        let fg_channels = view_field_channels(fg, v);
        let bg_channels = view_field_channels(bg, v);
        let mut field = SceneFlowField::zeros(height, width, v);
        for y in 0..height {
            for x in 0..width {
                let inside = rect.contains(x as f64, y as f64);
                field.set(x, y, if inside { fg_channels } else { bg_channels });
            }
        }
        fields.insert(v, field);
    }

    let mut masks = PairMasks::new();
    for a in ViewId::ALL {
        let rect_a = fg_rect_in(a);
        let fa = &fields[&a];
        for kind in PairKind::ALL {
            let b = kind.target_of(a);
            let rect_b = fg_rect_in(b);
            let mut mask = OcclusionMask::all_visible(height, width);
            for y in 0..height {
                for x in 0..width {
                    let d = pair_displacement_at(fa.get(x, y), a.side, kind);
                    let px = x as f64 + d[0];
                    let py = y as f64 + d[1];
                    if px < 0.0 || px > (width - 1) as f64 || py < 0.0 || py > (height - 1) as f64 {
                        mask.set(x, y, false);
                        continue;
                    }
                    let is_fg = rect_a.contains(x as f64, y as f64);
                    if !is_fg && rect_b.contains(px, py) {
                        mask.set(x, y, false);
                    }
                }
            }
            masks.insert((a, b), mask);
        }
    }

    ConstructedScene {
        quadruplet,
        fields,
        masks,
    }
}

/// Constant-motion scene with corrupted content fixed to the right camera
/// (dirt on the lens, a specular reflection): a rectangle of both right
/// images shows the scene texture displaced by `blob_shift` instead of the
/// true content. Left-view fields are unaffected, but left pixels whose
/// stereo or cross displacement lands inside the corrupted rectangle have no
/// valid match in that pair; they do see a crisp FALSE match offset by the
/// shift. This is the constructed stand-in for optical corruption confined
/// to one camera, resolvable only by occlusion reasoning over bidirectional
/// displacements.
pub fn right_camera_blob_scene(
    height: usize,
    width: usize,
    s: [f64; 4],
    blob: Rect,
    blob_shift: [f64; 2],
    texture: &SinusoidTexture,
) -> ConstructedScene {
    let mut scene = constant_motion_scene(height, width, s, texture);
    let mut images: Vec<ImageGrid> = ViewId::ALL
        .iter()
        .map(|&v| scene.quadruplet.view(v).clone())
        .collect();
    for view in [ViewId::RIGHT_T, ViewId::RIGHT_T1] {
        let off = layer_offset(s, view);
        let img = &mut images[view.index()];
        for y in 0..height {
            for x in 0..width {
                if blob.contains(x as f64, y as f64) {
                    // Horizontally periodic corruption: a picket-fence
                    // pattern that matches the reference confidently at a
                    // comb of wrong disparities.
                    let phase = std::f64::consts::TAU
                        * ((x as f64 - off[0] + blob_shift[0]) / 4.0);
                    let wobble = 0.08
                        * (std::f64::consts::TAU * (y as f64 - off[1] + blob_shift[1]) / 9.0)
                            .sin();
                    img.set(x, y, 0, 0.5 + 0.4 * phase.sin() + wobble);
                }
            }
        }
    }
    scene.quadruplet = StereoQuadruplet::new(
        images[0].clone(),
        images[1].clone(),
        images[2].clone(),
        images[3].clone(),
    )
    .expect("dimensions unchanged");

    // Masks: a pair lookup landing inside the blob rectangle of a right
    // view is occluded on top of the base out-of-frame rule.
    for a in ViewId::ALL {
        let fa = scene.fields[&a].clone();
        for kind in PairKind::ALL {
            let b = kind.target_of(a);
            let mask = scene.masks.get_mut(&(a, b)).expect("base mask");
            if b != ViewId::RIGHT_T && b != ViewId::RIGHT_T1 {
                continue;
            }
            for y in 0..height {
                for x in 0..width {
                    let d = pair_displacement_at(fa.get(x, y), a.side, kind);
                    if blob.contains(x as f64 + d[0], y as f64 + d[1]) {
                        mask.set(x, y, false);
                    }
                }
            }
        }
    }
    scene
}

/// Mean Euclidean norm of the 4-channel field error over the pixels selected
/// by `mask` (all pixels when `None`).
pub fn field_epe(
    pred: &SceneFlowField,
    truth: &SceneFlowField,
    mask: Option<&OcclusionMask>,
) -> f64 {
    assert_eq!(pred.height, truth.height);
    assert_eq!(pred.width, truth.width);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..pred.height {
        for x in 0..pred.width {
            if let Some(m) = mask {
                if !m.visible(x, y) {
                    continue;
                }
            }
            let p = pred.get(x, y);
            let t = truth.get(x, y);
            let e: f64 = (0..4).map(|c| (p[c] - t[c]).powi(2)).sum();
            sum += e.sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean field magnitude (4-channel Euclidean norm per pixel).
pub fn field_mean_magnitude(f: &SceneFlowField) -> f64 {
    let zero = SceneFlowField::zeros(f.height, f.width, f.reference);
    field_epe(f, &zero, None)
}

/// Visibility intersection of the three pair masks rooted at `reference`.
pub fn combined_reference_mask(
    masks: &PairMasks,
    reference: ViewId,
    height: usize,
    width: usize,
) -> OcclusionMask {
    let mut out = OcclusionMask::all_visible(height, width);
    for kind in PairKind::ALL {
        if let Some(m) = masks.get(&(reference, kind.target_of(reference))) {
            out = out.and(m);
        }
    }
    out
}
