//! KITTI scene-flow file formats and evaluation metrics.
//!
//! Flow maps are 16-bit 3-channel PNGs: `u = (ch1 - 2^15) / 64`,
//! `v = (ch2 - 2^15) / 64`, `valid = ch3 > 0`. Disparity maps are 16-bit
//! single-channel PNGs: `disp = value / 256`, value 0 = invalid. Round trips
//! are bit-exact for representable values.
//!
//! Metrics: the average end-point error (EPE, px) of the 4-channel scene
//! flow and the KITTI outlier rates D1/D2/Fl/SF (%), where a disparity (or
//! flow) is an outlier when its error exceeds 3 px and 5% of the
//! ground-truth magnitude, and a scene-flow outlier fails any of the three.

use std::io::Cursor;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageReader};

use crate::error::{Error, Result};
use crate::geometry::SceneFlowField;
use crate::grid::{ScalarField, VectorField};
use crate::occlusion::OcclusionMask;

const FLOW_OFFSET: f64 = 32768.0;
const FLOW_SCALE: f64 = 64.0;
const DISP_SCALE: f64 = 256.0;

fn encode_png_u16(width: u32, height: u32, channels: u32, data: &[u16]) -> Result<Vec<u8>> {
    let mut bytes: Vec<u8> = Vec::with_capacity(data.len() * 2);
    for v in data {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    let mut out = Vec::new();
    let color = match channels {
        1 => ExtendedColorType::L16,
        3 => ExtendedColorType::Rgb16,
        _ => return Err(Error::InvalidInput("unsupported channel count".into())),
    };
    PngEncoder::new(&mut out)
        .write_image(&bytes, width, height, color)
        .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    Ok(out)
}

/// Encode a flow field and validity mask as KITTI 16-bit PNG bytes.
pub fn encode_kitti_flow(flow: &VectorField, valid: &OcclusionMask) -> Result<Vec<u8>> {
    if flow.arity != 2 {
        return Err(Error::InvalidInput("flow field must have arity 2".into()));
    }
    if flow.height != valid.height() || flow.width != valid.width() {
        return Err(Error::DimensionMismatch(
            "flow and validity dimensions differ".into(),
        ));
    }
    let n = flow.height * flow.width;
    let mut data = Vec::with_capacity(n * 3);
    let quant = |v: f64| (v * FLOW_SCALE + FLOW_OFFSET).round().clamp(0.0, 65535.0) as u16;
    for p in 0..n {
        data.push(quant(flow.data[2 * p]));
        data.push(quant(flow.data[2 * p + 1]));
        data.push(u16::from(valid.as_bools()[p]));
    }
    encode_png_u16(flow.width as u32, flow.height as u32, 3, &data)
}

/// Decode KITTI 16-bit flow PNG bytes.
pub fn decode_kitti_flow(bytes: &[u8]) -> Result<(VectorField, OcclusionMask)> {
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::Format(format!("flow decode: {e}")))?
        .decode()
        .map_err(|e| Error::Format(format!("flow decode: {e}")))?;
    let DynamicImage::ImageRgb16(buf) = img else {
        return Err(Error::Format(format!(
            "flow maps must be 16-bit 3-channel PNG, got {:?}",
            img.color()
        )));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let raw = buf.into_raw();
    let mut flow = VectorField::zeros(h, w, 2);
    let mut valid = Vec::with_capacity(h * w);
    for p in 0..h * w {
        flow.data[2 * p] = (raw[3 * p] as f64 - FLOW_OFFSET) / FLOW_SCALE;
        flow.data[2 * p + 1] = (raw[3 * p + 1] as f64 - FLOW_OFFSET) / FLOW_SCALE;
        valid.push(raw[3 * p + 2] > 0);
    }
    Ok((flow, OcclusionMask::from_bools(h, w, valid)))
}

pub fn write_kitti_flow(path: &Path, flow: &VectorField, valid: &OcclusionMask) -> Result<()> {
    let bytes = encode_kitti_flow(flow, valid)?;
    std::fs::write(path, bytes).map_err(Error::Io)
}

pub fn read_kitti_flow(path: &Path) -> Result<(VectorField, OcclusionMask)> {
    let bytes = std::fs::read(path).map_err(Error::Io)?;
    decode_kitti_flow(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Encode a disparity map as KITTI 16-bit PNG bytes; invalid pixels store 0.
pub fn encode_kitti_disparity(disp: &ScalarField, valid: &OcclusionMask) -> Result<Vec<u8>> {
    if disp.height != valid.height() || disp.width != valid.width() {
        return Err(Error::DimensionMismatch(
            "disparity and validity dimensions differ".into(),
        ));
    }
    let n = disp.height * disp.width;
    let mut data = Vec::with_capacity(n);
    for p in 0..n {
        let value = if valid.as_bools()[p] {
            (disp.data[p] * DISP_SCALE).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        data.push(value);
    }
    encode_png_u16(disp.width as u32, disp.height as u32, 1, &data)
}

/// Decode KITTI 16-bit disparity PNG bytes; value 0 means invalid.
pub fn decode_kitti_disparity(bytes: &[u8]) -> Result<(ScalarField, OcclusionMask)> {
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::Format(format!("disparity decode: {e}")))?
        .decode()
        .map_err(|e| Error::Format(format!("disparity decode: {e}")))?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(Error::Format(format!(
            "disparity maps must be 16-bit single-channel PNG, got {:?}",
            img.color()
        )));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let raw = buf.into_raw();
    let mut disp = ScalarField::zeros(h, w);
    let mut valid = Vec::with_capacity(h * w);
    for p in 0..h * w {
        disp.data[p] = raw[p] as f64 / DISP_SCALE;
        valid.push(raw[p] > 0);
    }
    Ok((disp, OcclusionMask::from_bools(h, w, valid)))
}

pub fn write_kitti_disparity(path: &Path, disp: &ScalarField, valid: &OcclusionMask) -> Result<()> {
    let bytes = encode_kitti_disparity(disp, valid)?;
    std::fs::write(path, bytes).map_err(Error::Io)
}

pub fn read_kitti_disparity(path: &Path) -> Result<(ScalarField, OcclusionMask)> {
    let bytes = std::fs::read(path).map_err(Error::Io)?;
    decode_kitti_disparity(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Annotated scene flow: optical flow plus the two disparity maps, each with
/// its own validity mask.
#[derive(Debug, Clone)]
pub struct GroundTruthSceneFlow {
    pub flow: VectorField,
    pub flow_valid: OcclusionMask,
    pub disp_ref: ScalarField,
    pub disp_ref_valid: OcclusionMask,
    pub disp_other: ScalarField,
    pub disp_other_valid: OcclusionMask,
}

impl GroundTruthSceneFlow {
    pub fn load(flow_path: &Path, disp_ref_path: &Path, disp_other_path: &Path) -> Result<Self> {
        let (flow, flow_valid) = read_kitti_flow(flow_path)?;
        let (disp_ref, disp_ref_valid) = read_kitti_disparity(disp_ref_path)?;
        let (disp_other, disp_other_valid) = read_kitti_disparity(disp_other_path)?;
        let gt = Self {
            flow,
            flow_valid,
            disp_ref,
            disp_ref_valid,
            disp_other,
            disp_other_valid,
        };
        gt.check_dims()?;
        Ok(gt)
    }

    /// Treat a dense field as fully valid ground truth (constructed scenes).
    pub fn from_field(f: &SceneFlowField) -> Self {
        let n = f.height * f.width;
        let mut flow = VectorField::zeros(f.height, f.width, 2);
        let mut disp_ref = ScalarField::zeros(f.height, f.width);
        let mut disp_other = ScalarField::zeros(f.height, f.width);
        for p in 0..n {
            flow.data[2 * p] = f.data[4 * p];
            flow.data[2 * p + 1] = f.data[4 * p + 1];
            disp_ref.data[p] = f.data[4 * p + 2];
            disp_other.data[p] = f.data[4 * p + 3];
        }
        Self {
            flow,
            flow_valid: OcclusionMask::all_visible(f.height, f.width),
            disp_ref,
            disp_ref_valid: OcclusionMask::all_visible(f.height, f.width),
            disp_other,
            disp_other_valid: OcclusionMask::all_visible(f.height, f.width),
        }
    }

    fn check_dims(&self) -> Result<()> {
        let (h, w) = (self.flow.height, self.flow.width);
        if self.disp_ref.height != h
            || self.disp_ref.width != w
            || self.disp_other.height != h
            || self.disp_other.width != w
        {
            return Err(Error::DimensionMismatch(
                "ground-truth maps differ in dimensions".into(),
            ));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.flow.height
    }

    pub fn width(&self) -> usize {
        self.flow.width
    }
}

/// EPE and KITTI outlier rates. Outlier rates are percentages over pixels
/// valid in all three ground-truth maps, which guarantees
/// `sf >= max(d1, d2, fl)` structurally; `koe_all` is the scene-flow rate.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub epe_all: f64,
    pub epe_flow: f64,
    pub epe_disp_ref: f64,
    pub epe_disp_other: f64,
    pub koe_all: f64,
    pub d1: f64,
    pub d2: f64,
    pub fl: f64,
    pub sf: f64,
    /// Pixels with at least one valid ground-truth component (EPE domain).
    pub epe_pixels: usize,
    /// Pixels valid in all three maps (outlier-rate domain).
    pub joint_pixels: usize,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        format!(
            "epe_all={:.6}\nepe_flow={:.6}\nepe_disp_ref={:.6}\nepe_disp_other={:.6}\n\
             koe_all={:.4}\nd1={:.4}\nd2={:.4}\nfl={:.4}\nsf={:.4}\n\
             epe_pixels={}\njoint_pixels={}\n",
            self.epe_all,
            self.epe_flow,
            self.epe_disp_ref,
            self.epe_disp_other,
            self.koe_all,
            self.d1,
            self.d2,
            self.fl,
            self.sf,
            self.epe_pixels,
            self.joint_pixels
        )
    }

    pub fn csv_header() -> &'static str {
        "epe_all,epe_flow,epe_disp_ref,epe_disp_other,koe_all,d1,d2,fl,sf,epe_pixels,joint_pixels"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4},{:.4},{:.4},{},{}",
            self.epe_all,
            self.epe_flow,
            self.epe_disp_ref,
            self.epe_disp_other,
            self.koe_all,
            self.d1,
            self.d2,
            self.fl,
            self.sf,
            self.epe_pixels,
            self.joint_pixels
        )
    }
}

fn check_pred_dims(pred: &SceneFlowField, gt: &GroundTruthSceneFlow) -> Result<()> {
    if pred.height != gt.height() || pred.width != gt.width() {
        return Err(Error::DimensionMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height,
            pred.width,
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Average end-point error: the mean, over pixels with any valid
/// ground-truth component, of the Euclidean norm of the 4-channel error
/// restricted to the valid components.
pub fn epe(pred: &SceneFlowField, gt: &GroundTruthSceneFlow) -> Result<f64> {
    check_pred_dims(pred, gt)?;
    let (h, w) = (pred.height, pred.width);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let s = pred.get(x, y);
            let mut sq = 0.0;
            let mut any = false;
            if gt.flow_valid.as_bools()[p] {
                let du = s[0] - gt.flow.data[2 * p];
                let dv = s[1] - gt.flow.data[2 * p + 1];
                sq += du * du + dv * dv;
                any = true;
            }
            if gt.disp_ref_valid.as_bools()[p] {
                let d = s[2] - gt.disp_ref.data[p];
                sq += d * d;
                any = true;
            }
            if gt.disp_other_valid.as_bools()[p] {
                let d = s[3] - gt.disp_other.data[p];
                sq += d * d;
                any = true;
            }
            if any {
                sum += sq.sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput(
            "no valid ground-truth pixels to evaluate".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Full metric report: EPE (joint and per component) plus the KITTI outlier
/// rates.
pub fn koe(pred: &SceneFlowField, gt: &GroundTruthSceneFlow) -> Result<MetricReport> {
    check_pred_dims(pred, gt)?;
    let (h, w) = (pred.height, pred.width);
    let mut flow_err_sum = 0.0;
    let mut flow_count = 0usize;
    let mut d1_err_sum = 0.0;
    let mut d1_count = 0usize;
    let mut d2_err_sum = 0.0;
    let mut d2_count = 0usize;
    let mut joint = 0usize;
    let mut d1_out = 0usize;
    let mut d2_out = 0usize;
    let mut fl_out = 0usize;
    let mut sf_out = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let s = pred.get(x, y);
            let fv = gt.flow_valid.as_bools()[p];
            let d1v = gt.disp_ref_valid.as_bools()[p];
            let d2v = gt.disp_other_valid.as_bools()[p];
            let du = s[0] - gt.flow.data[2 * p];
            let dv = s[1] - gt.flow.data[2 * p + 1];
            let flow_err = (du * du + dv * dv).sqrt();
            let d1_err = (s[2] - gt.disp_ref.data[p]).abs();
            let d2_err = (s[3] - gt.disp_other.data[p]).abs();
            if fv {
                flow_err_sum += flow_err;
                flow_count += 1;
            }
            if d1v {
                d1_err_sum += d1_err;
                d1_count += 1;
            }
            if d2v {
                d2_err_sum += d2_err;
                d2_count += 1;
            }
            if fv && d1v && d2v {
                joint += 1;
                let gt_mag = (gt.flow.data[2 * p].powi(2) + gt.flow.data[2 * p + 1].powi(2)).sqrt();
                let is_d1 = d1_err > 3.0 && d1_err > 0.05 * gt.disp_ref.data[p];
                let is_d2 = d2_err > 3.0 && d2_err > 0.05 * gt.disp_other.data[p];
                let is_fl = flow_err > 3.0 && flow_err > 0.05 * gt_mag;
                d1_out += is_d1 as usize;
                d2_out += is_d2 as usize;
                fl_out += is_fl as usize;
                sf_out += (is_d1 || is_d2 || is_fl) as usize;
            }
        }
    }
    if joint == 0 {
        return Err(Error::InvalidInput(
            "no jointly valid ground-truth pixels to evaluate".into(),
        ));
    }
    let pct = |n: usize| 100.0 * n as f64 / joint as f64;
    let epe_all = epe(pred, gt)?;
    let epe_pixels = {
        // Count pixels with any valid component, mirroring `epe`.
        let mut c = 0usize;
        for p in 0..h * w {
            if gt.flow_valid.as_bools()[p]
                || gt.disp_ref_valid.as_bools()[p]
                || gt.disp_other_valid.as_bools()[p]
            {
                c += 1;
            }
        }
        c
    };
    Ok(MetricReport {
        epe_all,
        epe_flow: flow_err_sum / flow_count.max(1) as f64,
        epe_disp_ref: d1_err_sum / d1_count.max(1) as f64,
        epe_disp_other: d2_err_sum / d2_count.max(1) as f64,
        koe_all: pct(sf_out),
        d1: pct(d1_out),
        d2: pct(d2_out),
        fl: pct(fl_out),
        sf: pct(sf_out),
        epe_pixels,
        joint_pixels: joint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ViewId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flow_codec_matches_devkit_definitions() {
        // Encoded (32768, 32768, 1) -> (0, 0), valid.
        let mut flow = VectorField::zeros(1, 2, 2);
        flow.set(0, 0, 0, 0.0);
        flow.set(1, 0, 0, 1.0);
        let mut valid = OcclusionMask::all_visible(1, 2);
        valid.set(0, 0, true);
        let bytes = encode_kitti_flow(&flow, &valid).unwrap();
        let img = image::load_from_memory(&bytes).unwrap();
        let DynamicImage::ImageRgb16(buf) = img else {
            panic!("expected 16-bit RGB");
        };
        let raw = buf.into_raw();
        assert_eq!(&raw[0..3], &[32768, 32768, 1]);
        // u = 1.0 -> channel value 64 * 1 + 32768 = 32832.
        assert_eq!(raw[3], 32832);
    }

    #[test]
    fn flow_validity_channel_rules() {
        let flow = VectorField::zeros(1, 1, 2);
        let valid = OcclusionMask::all_occluded(1, 1);
        let bytes = encode_kitti_flow(&flow, &valid).unwrap();
        let (_, v) = decode_kitti_flow(&bytes).unwrap();
        assert!(!v.visible(0, 0));
    }

    #[test]
    fn disparity_codec_matches_devkit_definitions() {
        let mut disp = ScalarField::zeros(1, 3);
        disp.set(0, 0, 1.0); // value 256
        disp.set(1, 0, 45.75); // value 11712
        disp.set(2, 0, 7.0);
        let mut valid = OcclusionMask::all_visible(1, 3);
        valid.set(2, 0, false); // forced to value 0
        let bytes = encode_kitti_disparity(&disp, &valid).unwrap();
        let img = image::load_from_memory(&bytes).unwrap();
        let DynamicImage::ImageLuma16(buf) = img else {
            panic!("expected 16-bit gray");
        };
        let raw = buf.into_raw();
        assert_eq!(raw, vec![256, 11712, 0]);
        let (d, v) = decode_kitti_disparity(&bytes).unwrap();
        assert_eq!(d.get(0, 0), 1.0);
        assert_eq!(d.get(1, 0), 45.75);
        assert!(!v.visible(2, 0));
    }

    #[test]
    fn roundtrips_are_bit_exact_on_representable_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w) = (6, 5);
        let mut flow = VectorField::zeros(h, w, 2);
        let mut valid_bools = Vec::new();
        for p in 0..h * w {
            // Representable flow values: (k - 32768) / 64 over the full code range.
            flow.data[2 * p] = (rng.gen_range(0u16..=65535) as f64 - 32768.0) / 64.0;
            flow.data[2 * p + 1] = (rng.gen_range(0u16..=65535) as f64 - 32768.0) / 64.0;
            valid_bools.push(rng.gen_bool(0.8));
        }
        let valid = OcclusionMask::from_bools(h, w, valid_bools);
        let bytes = encode_kitti_flow(&flow, &valid).unwrap();
        let (flow2, valid2) = decode_kitti_flow(&bytes).unwrap();
        let bytes2 = encode_kitti_flow(&flow2, &valid2).unwrap();
        assert_eq!(bytes, bytes2);
        for p in 0..h * w {
            if valid.as_bools()[p] {
                assert_eq!(flow.data[2 * p], flow2.data[2 * p]);
                assert_eq!(flow.data[2 * p + 1], flow2.data[2 * p + 1]);
            }
        }

        let mut disp = ScalarField::zeros(h, w);
        for p in 0..h * w {
            disp.data[p] = rng.gen_range(1u16..=65535) as f64 / 256.0;
        }
        let valid = OcclusionMask::all_visible(h, w);
        let bytes = encode_kitti_disparity(&disp, &valid).unwrap();
        let (disp2, _) = decode_kitti_disparity(&bytes).unwrap();
        for p in 0..h * w {
            assert_eq!(disp.data[p], disp2.data[p]);
        }
    }

    #[test]
    fn file_roundtrip_and_format_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.png");
        let flow = VectorField::zeros(2, 2, 2);
        let valid = OcclusionMask::all_visible(2, 2);
        write_kitti_flow(&path, &flow, &valid).unwrap();
        let (f2, _) = read_kitti_flow(&path).unwrap();
        assert_eq!(f2.data, flow.data);

        // An 8-bit PNG must be rejected with a format diagnostic.
        let bad = dir.path().join("bad.png");
        crate::imageio::save_gray_png(&bad, &crate::grid::ImageGrid::zeros(2, 2, 1)).unwrap();
        assert!(matches!(read_kitti_flow(&bad), Err(Error::Format(_))));
        assert!(matches!(read_kitti_disparity(&bad), Err(Error::Format(_))));
    }

    fn random_pair(
        rng: &mut ChaCha8Rng,
        h: usize,
        w: usize,
    ) -> (SceneFlowField, GroundTruthSceneFlow) {
        let mut pred = SceneFlowField::zeros(h, w, ViewId::LEFT_T);
        for v in pred.data.iter_mut() {
            *v = rng.gen_range(-20.0..20.0);
        }
        let mut gt_field = SceneFlowField::zeros(h, w, ViewId::LEFT_T);
        for v in gt_field.data.iter_mut() {
            *v = rng.gen_range(-20.0..20.0);
        }
        let mut gt = GroundTruthSceneFlow::from_field(&gt_field);
        // Random validity patterns per map.
        let mut masks = Vec::new();
        for _ in 0..3 {
            let bools: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.8)).collect();
            masks.push(OcclusionMask::from_bools(h, w, bools));
        }
        gt.flow_valid = masks[0].clone();
        gt.disp_ref_valid = masks[1].clone();
        gt.disp_other_valid = masks[2].clone();
        (pred, gt)
    }

    #[test]
    fn epe_exact_prediction_is_zero_and_345_triple_works() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, gt) = random_pair(&mut rng, 4, 4);
        let mut pred = SceneFlowField::zeros(4, 4, ViewId::LEFT_T);
        for p in 0..16 {
            pred.data[4 * p] = gt.flow.data[2 * p];
            pred.data[4 * p + 1] = gt.flow.data[2 * p + 1];
            pred.data[4 * p + 2] = gt.disp_ref.data[p];
            pred.data[4 * p + 3] = gt.disp_other.data[p];
        }
        assert_eq!(epe(&pred, &gt).unwrap(), 0.0);

        // Single valid pixel with error (3, 4, 0, 0) -> EPE 5.
        let gt_field = SceneFlowField::zeros(1, 1, ViewId::LEFT_T);
        let gt = GroundTruthSceneFlow::from_field(&gt_field);
        let mut pred = SceneFlowField::zeros(1, 1, ViewId::LEFT_T);
        pred.set(0, 0, [3.0, 4.0, 0.0, 0.0]);
        assert!((epe(&pred, &gt).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn outlier_threshold_rules() {
        // Flow error 4 px on gt magnitude 100: 4 > 3 but 4 < 5 -> not Fl.
        let mut gt_field = SceneFlowField::zeros(1, 1, ViewId::LEFT_T);
        gt_field.set(0, 0, [100.0, 0.0, 10.0, 10.0]);
        let gt = GroundTruthSceneFlow::from_field(&gt_field);
        let mut pred = gt_field.clone();
        pred.set(0, 0, [104.0, 0.0, 10.0, 10.0]);
        let report = koe(&pred, &gt).unwrap();
        assert_eq!(report.fl, 0.0);
        assert_eq!(report.sf, 0.0);

        // Disparity error 3.5 px on gt disparity 10: 3.5 > 3 and > 0.5 -> D1.
        let mut pred = gt_field.clone();
        pred.set(0, 0, [100.0, 0.0, 13.5, 10.0]);
        let report = koe(&pred, &gt).unwrap();
        assert_eq!(report.d1, 100.0);
        assert_eq!(report.sf, 100.0);
        assert_eq!(report.koe_all, 100.0);
    }

    #[test]
    fn exact_prediction_has_all_zero_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (_, gt) = random_pair(&mut rng, 6, 6);
        let mut pred = SceneFlowField::zeros(6, 6, ViewId::LEFT_T);
        for p in 0..36 {
            pred.data[4 * p] = gt.flow.data[2 * p];
            pred.data[4 * p + 1] = gt.flow.data[2 * p + 1];
            pred.data[4 * p + 2] = gt.disp_ref.data[p];
            pred.data[4 * p + 3] = gt.disp_other.data[p];
        }
        let report = koe(&pred, &gt).unwrap();
        assert_eq!(report.d1, 0.0);
        assert_eq!(report.d2, 0.0);
        assert_eq!(report.fl, 0.0);
        assert_eq!(report.sf, 0.0);
    }

    #[test]
    fn sf_rate_dominates_component_rates_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (pred, gt) = random_pair(&mut rng, 8, 8);
            let report = koe(&pred, &gt).unwrap();
            assert!(report.sf >= report.d1);
            assert!(report.sf >= report.d2);
            assert!(report.sf >= report.fl);
        }
    }

    #[test]
    fn epe_is_translation_equivariant_in_the_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut gt_field = SceneFlowField::zeros(5, 5, ViewId::LEFT_T);
        for v in gt_field.data.iter_mut() {
            *v = rng.gen_range(-5.0..5.0);
        }
        let gt = GroundTruthSceneFlow::from_field(&gt_field);
        let offset = [1.0, -2.0, 2.0, 0.5];
        let mut pred = gt_field.clone();
        for p in 0..25 {
            for c in 0..4 {
                pred.data[4 * p + c] += offset[c];
            }
        }
        let norm = offset.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((epe(&pred, &gt).unwrap() - norm).abs() < 1e-12);
    }

    #[test]
    fn empty_ground_truth_is_an_explicit_signal() {
        let gt_field = SceneFlowField::zeros(2, 2, ViewId::LEFT_T);
        let mut gt = GroundTruthSceneFlow::from_field(&gt_field);
        gt.flow_valid = OcclusionMask::all_occluded(2, 2);
        gt.disp_ref_valid = OcclusionMask::all_occluded(2, 2);
        gt.disp_other_valid = OcclusionMask::all_occluded(2, 2);
        let pred = SceneFlowField::zeros(2, 2, ViewId::LEFT_T);
        assert!(epe(&pred, &gt).is_err());
        assert!(koe(&pred, &gt).is_err());
    }
}
