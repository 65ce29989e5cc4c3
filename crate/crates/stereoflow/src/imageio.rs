//! Image ingestion and export.
//!
//! Inputs are 8-bit grayscale or RGB images (PNG, or binary PPM/PGM);
//! intensities are divided by 255 on load. Exports cover 8-bit grayscale
//! and RGB PNGs plus binary occlusion masks (0 = occluded, 255 = visible).

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::occlusion::OcclusionMask;

/// Load an 8-bit grayscale or RGB image as an [`ImageGrid`] with intensities
/// in [0, 1]. An alpha channel, if present, is dropped.
pub fn load_image(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (h, w) = (img.height() as usize, img.width() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            ImageGrid::new(h, w, 1, data)
        }
        DynamicImage::ImageLumaA8(buf) => {
            let data = buf
                .into_raw()
                .chunks_exact(2)
                .map(|px| px[0] as f64 / 255.0)
                .collect();
            ImageGrid::new(h, w, 1, data)
        }
        DynamicImage::ImageRgb8(buf) => {
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            ImageGrid::new(h, w, 3, data)
        }
        DynamicImage::ImageRgba8(buf) => {
            let mut data = Vec::with_capacity(h * w * 3);
            for px in buf.into_raw().chunks_exact(4) {
                data.extend(px[..3].iter().map(|&v| v as f64 / 255.0));
            }
            ImageGrid::new(h, w, 3, data)
        }
        other => Err(Error::Format(format!(
            "{}: unsupported pixel format {:?} (expected 8-bit grayscale or RGB)",
            path.display(),
            other.color()
        ))),
    }
}

/// Load an image and collapse it to grayscale (luma weights for RGB).
pub fn load_grayscale(path: &Path) -> Result<ImageGrid> {
    Ok(load_image(path)?.to_grayscale())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a single-channel grid as an 8-bit grayscale PNG, clamping to [0, 1].
pub fn save_gray_png(path: &Path, img: &ImageGrid) -> Result<()> {
    if !img.is_single_channel() {
        return Err(Error::InvalidInput(
            "grayscale export expects a single-channel grid".into(),
        ));
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(
        img.width() as u32,
        img.height() as u32,
        |x, y| Luma([to_u8(img.get(x as usize, y as usize, 0))]),
    );
    buf.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Save a 3-channel grid as an 8-bit RGB PNG, clamping to [0, 1].
pub fn save_rgb_png(path: &Path, img: &ImageGrid) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::InvalidInput(
            "RGB export expects a 3-channel grid".into(),
        ));
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(
        img.width() as u32,
        img.height() as u32,
        |x, y| {
            Rgb([
                to_u8(img.get(x as usize, y as usize, 0)),
                to_u8(img.get(x as usize, y as usize, 1)),
                to_u8(img.get(x as usize, y as usize, 2)),
            ])
        },
    );
    buf.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Export an occlusion mask: 0 = occluded, 255 = visible.
pub fn save_mask_png(path: &Path, mask: &OcclusionMask) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(
        mask.width() as u32,
        mask.height() as u32,
        |x, y| Luma([if mask.visible(x as usize, y as usize) { 255 } else { 0 }]),
    );
    buf.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gray_png_roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ImageGrid::from_fn(9, 7, |_, _| rng.gen_range(0u8..=255) as f64 / 255.0);
        save_gray_png(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.height(), 9);
        assert_eq!(back.width(), 7);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rgb_loads_with_three_channels_and_grayscale_collapses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let mut img = ImageGrid::zeros(4, 4, 3);
        for y in 0..4 {
            for x in 0..4 {
                img.set(x, y, 0, 1.0);
                img.set(x, y, 1, 0.0);
                img.set(x, y, 2, 0.0);
            }
        }
        save_rgb_png(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.channels(), 3);
        let gray = load_grayscale(&path).unwrap();
        assert_eq!(gray.channels(), 1);
        assert!((gray.get(0, 0, 0) - 0.299).abs() < 1e-2);
    }

    #[test]
    fn pgm_and_ppm_binary_load() {
        let dir = tempfile::tempdir().unwrap();
        let pgm = dir.path().join("img.pgm");
        std::fs::write(&pgm, b"P5\n3 2\n255\n\x00\x7f\xff\x10\x20\x30").unwrap();
        let img = load_image(&pgm).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.get(2, 0, 0), 1.0);
        assert!((img.get(1, 0, 0) - 127.0 / 255.0).abs() < 1e-12);

        let ppm = dir.path().join("img.ppm");
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        std::fs::write(&ppm, bytes).unwrap();
        let img = load_image(&ppm).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(1, 0, 1), 1.0);
    }

    #[test]
    fn mask_export_uses_binary_levels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut mask = OcclusionMask::all_visible(2, 2);
        mask.set(0, 0, false);
        save_mask_png(&path, &mask).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.get(0, 0, 0), 0.0);
        assert_eq!(back.get(1, 0, 0), 1.0);
    }

    #[test]
    fn missing_file_is_a_format_error() {
        let err = load_image(Path::new("/nonexistent/nope.png")).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
