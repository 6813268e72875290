//! PNG and binary PGM/PPM reading and writing for [`TactileImage`].

use std::path::Path;

use image::{DynamicImage, ImageFormat};
use thiserror::Error;

use crate::sensor::{SensorCalibration, SensorError, TactileImage};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
    #[error("unsupported image extension for {0}")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Sensor(#[from] SensorError),
}

fn format_for(path: &Path) -> Result<ImageFormat, ImageIoError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("pgm" | "ppm" | "pnm") => Ok(ImageFormat::Pnm),
        _ => Err(ImageIoError::UnsupportedFormat(path.display().to_string())),
    }
}

/// Reads a PNG/PGM/PPM. 8-bit grayscale stays single-channel; anything else
/// is converted to 8-bit RGB.
pub fn read_image(path: &Path, cal: SensorCalibration) -> Result<TactileImage, ImageIoError> {
    let format = format_for(path)?;
    let file = std::fs::File::open(path).map_err(image::ImageError::IoError)?;
    let decoded =
        image::ImageReader::with_format(std::io::BufReader::new(file), format).decode()?;
    let (w, h) = (decoded.width(), decoded.height());
    let img = match decoded {
        DynamicImage::ImageLuma8(g) => TactileImage::new(w, h, 1, g.into_raw(), cal)?,
        other => TactileImage::new(w, h, 3, other.into_rgb8().into_raw(), cal)?,
    };
    Ok(img)
}

pub fn write_image(img: &TactileImage, path: &Path) -> Result<(), ImageIoError> {
    let format = format_for(path)?;
    let (w, h) = (img.width(), img.height());
    let dynamic = match img.channels() {
        1 => DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(w, h, img.pixels().to_vec()).expect("validated buffer"),
        ),
        _ => DynamicImage::ImageRgb8(
            image::RgbImage::from_raw(w, h, img.pixels().to_vec()).expect("validated buffer"),
        ),
    };
    dynamic.save_with_format(path, format)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(c: u8) -> TactileImage {
        let (w, h) = (7u32, 5u32);
        let pixels = (0..w * h * c as u32)
            .map(|i| (i * 13 % 256) as u8)
            .collect();
        TactileImage::new(w, h, c, pixels, SensorCalibration::working()).unwrap()
    }

    #[test]
    fn png_and_pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (c, name) in [(3, "a.png"), (1, "b.png"), (1, "c.pgm"), (3, "d.ppm")] {
            let img = sample(c);
            let path = dir.path().join(name);
            write_image(&img, &path).unwrap();
            let back = read_image(&path, SensorCalibration::working()).unwrap();
            assert_eq!(back, img, "{name}");
        }
    }

    #[test]
    fn unknown_extension_rejected() {
        let img = sample(1);
        let err = write_image(&img, Path::new("/tmp/x.bmp")).unwrap_err();
        assert!(matches!(err, ImageIoError::UnsupportedFormat(_)));
    }
}
