use std::path::Path;

use crate::error::{DataError, Error, Result};
use crate::image::ImageBuffer;

/// Byte for a value in `[0, 1]`, rounding halves up; out-of-range values clamp.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// sRGB transfer function inverse for a value in `[0, 1]`.
pub fn decode_srgb(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Writes an 8-bit RGB PNG, creating parent directories.
pub fn write_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    let fail = |reason: String| -> Error {
        DataError::ImageWrite {
            path: path.to_path_buf(),
            reason,
        }
        .into()
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| fail(e.to_string()))?;
    }
    let bytes = img.data.iter().map(|&v| quantize(v)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| fail("buffer does not match image size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| fail(e.to_string()))
}

/// Reads an image as linear `v / 255` RGB.
pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    read_image_with(path, false)
}

pub fn read_image_with(path: &Path, srgb: bool) -> Result<ImageBuffer> {
    let img = image::open(path).map_err(|e| DataError::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|b| {
            let v = f64::from(b) / 255.0;
            if srgb {
                decode_srgb(v)
            } else {
                v
            }
        })
        .collect();
    ImageBuffer::from_data(w as usize, h as usize, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.13), 255);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.0), 255);
    }

    #[test]
    fn round_trip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = ImageBuffer::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.137).fract();
        }
        img.data[0] = 0.5;
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.data[0], 128.0 / 255.0);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        write_image(&ImageBuffer::new(4, 4), &path).unwrap();
        assert!(read_image(&path).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unreadable_and_unwritable_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let bogus = dir.path().join("bogus.png");
        std::fs::write(&bogus, b"not a png").unwrap();
        assert!(matches!(
            read_image(&bogus),
            Err(Error::Data(DataError::UnreadableImage { .. }))
        ));
        let blocked = bogus.join("child.png");
        assert!(matches!(
            write_image(&ImageBuffer::new(1, 1), &blocked),
            Err(Error::Data(DataError::ImageWrite { .. }))
        ));
    }

    #[test]
    fn srgb_decode_endpoints() {
        assert_eq!(decode_srgb(0.0), 0.0);
        assert!((decode_srgb(1.0) - 1.0).abs() < 1e-12);
        assert!(decode_srgb(0.5) < 0.5);
    }
}
