//! Flow and disparity visualization.

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, ScalarField, VectorField};

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Color-wheel rendering of a 2D flow field: hue encodes direction,
/// saturation encodes magnitude (clipped at `max_mag`), zero flow is white.
pub fn flow_to_color(flow: &VectorField, max_mag: f64) -> Result<ImageGrid> {
    if flow.arity != 2 {
        return Err(Error::InvalidInput("flow field must have arity 2".into()));
    }
    if !(max_mag > 0.0) {
        return Err(Error::InvalidInput("max_mag must be > 0".into()));
    }
    let (h, w) = (flow.height, flow.width);
    let mut out = ImageGrid::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let [u, v] = [flow.get(x, y, 0), flow.get(x, y, 1)];
            let mag = (u * u + v * v).sqrt();
            let sat = (mag / max_mag).min(1.0);
            let hue = v.atan2(u).to_degrees();
            let rgb = hsv_to_rgb(hue, sat, 1.0);
            for (c, val) in rgb.into_iter().enumerate() {
                out.set(x, y, c, val);
            }
        }
    }
    Ok(out)
}

/// Largest flow magnitude; convenience for auto-scaling the wheel.
pub fn max_flow_magnitude(flow: &VectorField) -> f64 {
    let mut m = 0.0f64;
    for p in 0..flow.height * flow.width {
        let (u, v) = (flow.data[2 * p], flow.data[2 * p + 1]);
        m = m.max((u * u + v * v).sqrt());
    }
    m
}

/// Grayscale disparity rendering: 0 maps to black, `max_disp` to white.
pub fn disparity_to_gray(disp: &ScalarField, max_disp: f64) -> Result<ImageGrid> {
    if !(max_disp > 0.0) {
        return Err(Error::InvalidInput("max_disp must be > 0".into()));
    }
    let mut out = ImageGrid::zeros(disp.height, disp.width, 1);
    for p in 0..disp.data.len() {
        out.data_mut()[p] = (disp.data[p] / max_disp).clamp(0.0, 1.0);
    }
    Ok(out)
}
