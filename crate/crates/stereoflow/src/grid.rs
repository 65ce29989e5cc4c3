//! Dense image/field containers, bilinear sampling, backward warping,
//! box-filter image pyramids, and horizontal mirroring.
//!
//! All operations are pure functions over immutable inputs; per-pixel loops
//! run in a fixed row-major order so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::occlusion::OcclusionMask;

/// Dense row-major raster with `channels` interleaved real values per pixel.
///
/// Intensities are stored as real values in [0,1] on ingestion (8-bit inputs
/// are divided by 255). Derived grids (visualizations, diagnostic maps) reuse
/// the container with a relaxed value range; only finiteness is enforced.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for a {height}x{width}x{channels} grid, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "image data contains non-finite values".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Build a single-channel grid by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn is_single_channel(&self) -> bool {
        self.channels == 1
    }

    /// Collapse an RGB grid to grayscale with the luma weights used for
    /// ingestion (0.299 R + 0.587 G + 0.114 B). Single-channel input is
    /// returned unchanged.
    pub fn to_grayscale(&self) -> ImageGrid {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.height * self.width);
        for p in 0..self.height * self.width {
            let base = p * self.channels;
            let (r, g, b) = (self.data[base], self.data[base + 1], self.data[base + 2]);
            data.push(0.299 * r + 0.587 * g + 0.114 * b);
        }
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }
}

/// Per-pixel real scalar field (loss maps, disparity maps, diagnostics).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for a {height}x{width} field, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }
}

/// Per-pixel fixed-arity real vector field (optical flow carriers, features).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub height: usize,
    pub width: usize,
    pub arity: usize,
    pub data: Vec<f64>,
}

impl VectorField {
    pub fn zeros(height: usize, width: usize, arity: usize) -> Self {
        Self {
            height,
            width,
            arity,
            data: vec![0.0; height * width * arity],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.arity + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.arity + c] = v;
    }
}

/// Coefficients of one bilinear lookup: the four corner indices into a
/// row-major plane plus their weights, and per-axis flags recording whether
/// the requested position was inside the sampling domain before clamping.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearTap {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    pub x_in: bool,
    pub y_in: bool,
    pub in_bounds: bool,
}

/// Resolve a (possibly out-of-domain) sampling position against a `w` x `h`
/// grid. Out-of-domain coordinates are clamped to the border componentwise;
/// the domain is the closed rectangle [0, w-1] x [0, h-1].
#[inline]
pub(crate) fn bilinear_tap(x: f64, y: f64, w: usize, h: usize) -> BilinearTap {
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let x_in = x >= 0.0 && x <= max_x;
    let y_in = y >= 0.0 && y <= max_y;
    let cx = x.clamp(0.0, max_x);
    let cy = y.clamp(0.0, max_y);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    BilinearTap {
        x0,
        x1,
        y0,
        y1,
        fx: cx - x0 as f64,
        fy: cy - y0 as f64,
        x_in,
        y_in,
        in_bounds: x_in && y_in,
    }
}

#[inline]
pub(crate) fn tap_value(plane: &[f64], width: usize, tap: &BilinearTap) -> f64 {
    let v00 = plane[tap.y0 * width + tap.x0];
    let v01 = plane[tap.y0 * width + tap.x1];
    let v10 = plane[tap.y1 * width + tap.x0];
    let v11 = plane[tap.y1 * width + tap.x1];
    let top = v00 + tap.fx * (v01 - v00);
    let bot = v10 + tap.fx * (v11 - v10);
    top + tap.fy * (bot - top)
}

/// Value plus positional derivative of one bilinear lookup. A clamped axis
/// carries zero positional gradient along that axis: the clamped sample does
/// not move when the displacement moves further out of frame. This is the
/// exact local derivative almost everywhere, which keeps analytic gradients
/// aligned with finite differences at partially clamped border samples.
#[inline]
pub(crate) fn tap_value_grad(plane: &[f64], width: usize, tap: &BilinearTap) -> (f64, f64, f64) {
    let v00 = plane[tap.y0 * width + tap.x0];
    let v01 = plane[tap.y0 * width + tap.x1];
    let v10 = plane[tap.y1 * width + tap.x0];
    let v11 = plane[tap.y1 * width + tap.x1];
    let top = v00 + tap.fx * (v01 - v00);
    let bot = v10 + tap.fx * (v11 - v10);
    let value = top + tap.fy * (bot - top);
    let dx = if tap.x_in {
        (1.0 - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10)
    } else {
        0.0
    };
    let dy = if tap.y_in { bot - top } else { 0.0 };
    (value, dx, dy)
}

/// Bilinear interpolation of the four nearest pixels at real coordinates
/// `(x, y)`. Coordinates outside [0, W-1] x [0, H-1] are clamped to the
/// border and flagged with `in_bounds = false`; downstream loss code treats
/// such samples as occluded.
pub fn bilinear_sample(img: &ImageGrid, x: f64, y: f64) -> (Vec<f64>, bool) {
    let tap = bilinear_tap(x, y, img.width, img.height);
    let mut value = Vec::with_capacity(img.channels);
    let w = img.width;
    let c = img.channels;
    for ch in 0..c {
        let v00 = img.data[(tap.y0 * w + tap.x0) * c + ch];
        let v01 = img.data[(tap.y0 * w + tap.x1) * c + ch];
        let v10 = img.data[(tap.y1 * w + tap.x0) * c + ch];
        let v11 = img.data[(tap.y1 * w + tap.x1) * c + ch];
        let top = v00 + tap.fx * (v01 - v00);
        let bot = v10 + tap.fx * (v11 - v10);
        value.push(top + tap.fy * (bot - top));
    }
    (value, tap.in_bounds)
}

/// Backward-warp `img` by the per-pixel displacement `(dx, dy)` planes:
/// `warped(x) = bilinear_sample(img, x + d(x))`. The returned mask records
/// which sampling positions were inside the image domain.
pub(crate) fn warp_planes(
    img: &ImageGrid,
    dx: &[f64],
    dy: &[f64],
) -> Result<(ImageGrid, OcclusionMask)> {
    let (h, w, c) = (img.height, img.width, img.channels);
    if dx.len() != h * w || dy.len() != h * w {
        return Err(Error::DimensionMismatch(
            "displacement planes do not match image dimensions".into(),
        ));
    }
    let mut out = ImageGrid::zeros(h, w, c);
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let tap = bilinear_tap(x as f64 + dx[p], y as f64 + dy[p], w, h);
            valid[p] = tap.in_bounds;
            for ch in 0..c {
                let v00 = img.data[(tap.y0 * w + tap.x0) * c + ch];
                let v01 = img.data[(tap.y0 * w + tap.x1) * c + ch];
                let v10 = img.data[(tap.y1 * w + tap.x0) * c + ch];
                let v11 = img.data[(tap.y1 * w + tap.x1) * c + ch];
                let top = v00 + tap.fx * (v01 - v00);
                let bot = v10 + tap.fx * (v11 - v10);
                out.data[p * c + ch] = top + tap.fy * (bot - top);
            }
        }
    }
    Ok((out, OcclusionMask::from_bools(h, w, valid)))
}

/// Backward-warp `img` by a dense displacement field given as a 2-vector
/// `VectorField`. See [`warp_planes`] for the sampling rule.
pub fn warp(img: &ImageGrid, d: &VectorField) -> Result<(ImageGrid, OcclusionMask)> {
    if d.height != img.height || d.width != img.width || d.arity != 2 {
        return Err(Error::DimensionMismatch(format!(
            "displacement field {}x{} (arity {}) does not match image {}x{}",
            d.height, d.width, d.arity, img.height, img.width
        )));
    }
    let n = img.height * img.width;
    let mut dx = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    for p in 0..n {
        dx.push(d.data[2 * p]);
        dy.push(d.data[2 * p + 1]);
    }
    warp_planes(img, &dx, &dy)
}

/// Image pyramid with a downsample factor of 2 per level; level 0 is the
/// full-resolution input.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<ImageGrid>,
}

impl Pyramid {
    pub fn levels(&self) -> &[ImageGrid] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &ImageGrid {
        &self.levels[k]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Box-filter 2x2, stride-2 downsampling. Blocks clipped by the image border
/// average only the pixels they cover, so constants are preserved exactly at
/// every level.
fn downsample_box2(img: &ImageGrid) -> ImageGrid {
    let (h, w, c) = (img.height, img.width, img.channels);
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = ImageGrid::zeros(oh, ow, c);
    for oy in 0..oh {
        for ox in 0..ow {
            let y1 = (2 * oy + 1).min(h - 1);
            let x1 = (2 * ox + 1).min(w - 1);
            for ch in 0..c {
                let mut acc = 0.0;
                let mut count = 0.0;
                for sy in (2 * oy)..=y1 {
                    for sx in (2 * ox)..=x1 {
                        acc += img.get(sx, sy, ch);
                        count += 1.0;
                    }
                }
                out.set(ox, oy, ch, acc / count);
            }
        }
    }
    out
}

/// Build an image pyramid with `levels` levels. The coarsest level must stay
/// at least 2 pixels on its shorter side; the solver applies the stricter
/// coarsest-side requirement it needs for optimization.
pub fn build_pyramid(img: &ImageGrid, levels: usize) -> Result<Pyramid> {
    if levels == 0 {
        return Err(Error::InvalidInput("pyramid needs at least 1 level".into()));
    }
    let min_dim = img.height.min(img.width);
    let coarsest = min_dim as f64 / (1u64 << (levels - 1)) as f64;
    if coarsest < 2.0 {
        return Err(Error::InvalidInput(format!(
            "{levels} pyramid levels are too many for a {}x{} image (coarsest side {coarsest:.1} < 2)",
            img.height, img.width
        )));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(img.clone());
    for _ in 1..levels {
        let next = downsample_box2(out.last().unwrap());
        out.push(next);
    }
    Ok(Pyramid { levels: out })
}

/// Horizontal mirror: `out(x, y) = img(W-1-x, y)`. An involution.
pub fn hflip_image(img: &ImageGrid) -> ImageGrid {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = ImageGrid::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.set(x, y, ch, img.get(w - 1 - x, y, ch));
            }
        }
    }
    out
}

/// Bilinear resize of one row-major plane to the requested dimensions, with
/// pixel-center alignment (the mapping that inverts the 2x2 box downsample).
pub(crate) fn bilinear_resize_plane(
    src: &[f64],
    h: usize,
    w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    let sx = w as f64 / dst_w as f64;
    let sy = h as f64 / dst_h as f64;
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for y in 0..dst_h {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..dst_w {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            let tap = bilinear_tap(src_x, src_y, w, h);
            out.push(tap_value(src, w, &tap));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_2x2() -> ImageGrid {
        ImageGrid::new(2, 2, 1, vec![0.0, 0.1, 0.2, 0.3]).unwrap()
    }

    #[test]
    fn bilinear_integer_position_identity() {
        let g = grid_2x2();
        let (v, inb) = bilinear_sample(&g, 0.0, 0.0);
        assert_eq!(v[0], 0.0);
        assert!(inb);
        let (v, inb) = bilinear_sample(&g, 1.0, 1.0);
        assert_eq!(v[0], 0.3);
        assert!(inb);
    }

    #[test]
    fn bilinear_center_is_mean_of_corners() {
        let g = grid_2x2();
        let (v, inb) = bilinear_sample(&g, 0.5, 0.5);
        assert!((v[0] - 0.15).abs() < 1e-15);
        assert!(inb);
    }

    #[test]
    fn bilinear_clamps_to_border_and_flags() {
        let g = grid_2x2();
        let (v, inb) = bilinear_sample(&g, -1.0, 0.0);
        assert_eq!(v[0], 0.0);
        assert!(!inb);
        let (v, inb) = bilinear_sample(&g, 5.0, 5.0);
        assert_eq!(v[0], 0.3);
        assert!(!inb);
    }

    #[test]
    fn bilinear_reproduces_linear_ramp() {
        // Sampling a ramp I(x,y) = a*x + b*y anywhere in bounds must return
        // the ramp value: bilinear interpolation is exact on linear functions.
        let (a, b) = (0.37, -0.11);
        let g = ImageGrid::from_fn(9, 7, |x, y| a * x as f64 + b * y as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let x = rng.gen_range(0.0..6.0);
            let y = rng.gen_range(0.0..8.0);
            let (v, inb) = bilinear_sample(&g, x, y);
            assert!(inb);
            assert!((v[0] - (a * x + b * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_zero_displacement_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ImageGrid::from_fn(6, 5, |_, _| rng.gen_range(0.0..1.0));
        let d = VectorField::zeros(6, 5, 2);
        let (warped, valid) = warp(&g, &d).unwrap();
        assert_eq!(warped, g);
        assert!(valid.iter().all(|v| v));
    }

    #[test]
    fn warp_unit_shift_with_clamp() {
        let g = ImageGrid::new(1, 3, 1, vec![0.2, 0.5, 0.9]).unwrap();
        let mut d = VectorField::zeros(1, 3, 2);
        for x in 0..3 {
            d.set(x, 0, 0, 1.0);
        }
        let (warped, valid) = warp(&g, &d).unwrap();
        assert_eq!(warped.data(), &[0.5, 0.9, 0.9]);
        assert_eq!(valid.as_bools(), &[true, true, false]);
    }

    #[test]
    fn warp_half_shift_matches_direct_bilinear_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = ImageGrid::from_fn(8, 8, |_, _| rng.gen_range(0.0..1.0));
        let mut d = VectorField::zeros(8, 8, 2);
        for y in 0..8 {
            for x in 0..8 {
                d.set(x, y, 0, 0.5);
            }
        }
        let (warped, _) = warp(&g, &d).unwrap();
        for y in 0..8 {
            for x in 0..7 {
                let expect = 0.5 * (g.get(x, y, 0) + g.get(x + 1, y, 0));
                assert!((warped.get(x, y, 0) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn warp_rejects_dimension_mismatch() {
        let g = grid_2x2();
        let d = VectorField::zeros(3, 3, 2);
        assert!(warp(&g, &d).is_err());
    }

    #[test]
    fn pyramid_preserves_constants() {
        let g = ImageGrid::constant(33, 65, 1, 0.42);
        let p = build_pyramid(&g, 3).unwrap();
        for level in p.levels() {
            assert!(level.data().iter().all(|&v| (v - 0.42).abs() < 1e-15));
        }
    }

    #[test]
    fn pyramid_checkerboard_averages_to_half() {
        let g = ImageGrid::from_fn(4, 4, |x, y| ((x + y) % 2) as f64);
        let p = build_pyramid(&g, 2).unwrap();
        let l1 = p.level(1);
        assert_eq!(l1.height(), 2);
        assert_eq!(l1.width(), 2);
        assert!(l1.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn pyramid_dims_halve() {
        let g = ImageGrid::zeros(64, 64, 1);
        let p = build_pyramid(&g, 4).unwrap();
        let dims: Vec<usize> = p.levels().iter().map(|l| l.width()).collect();
        assert_eq!(dims, vec![64, 32, 16, 8]);
    }

    #[test]
    fn pyramid_rejects_too_many_levels() {
        let g = ImageGrid::zeros(16, 16, 1);
        assert!(build_pyramid(&g, 5).is_err());
        assert!(build_pyramid(&g, 4).is_ok());
        assert!(build_pyramid(&g, 0).is_err());
    }

    #[test]
    fn hflip_mirrors_rows() {
        let g = ImageGrid::new(1, 3, 1, vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(hflip_image(&g).data(), &[0.3, 0.2, 0.1]);
    }

    #[test]
    fn hflip_fixes_symmetric_images() {
        let g = ImageGrid::from_fn(5, 7, |x, _| {
            let c = (x as f64 - 3.0).abs();
            c / 3.0
        });
        assert_eq!(hflip_image(&g), g);
    }

    #[test]
    fn hflip_is_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ImageGrid::from_fn(6, 9, |_, _| rng.gen_range(0.0..1.0));
        assert_eq!(hflip_image(&hflip_image(&g)), g);
    }

    #[test]
    fn grid_rejects_bad_lengths_and_nonfinite() {
        assert!(ImageGrid::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(2, 2, 1, vec![0.0, 0.0, 0.0, f64::NAN]).is_err());
    }

    #[test]
    fn grayscale_uses_luma_weights() {
        let g = ImageGrid::new(1, 1, 3, vec![1.0, 0.5, 0.25]).unwrap();
        let k = g.to_grayscale();
        assert!((k.get(0, 0, 0) - (0.299 + 0.587 * 0.5 + 0.114 * 0.25)).abs() < 1e-15);
    }
}
