use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use super::Image;
use crate::{Error, Result};

/// Loads an 8- or 16-bit single-channel PNG, dividing by the type maximum.
pub fn load_png(path: impl AsRef<Path>, spacing: f64, id: impl Into<String>) -> Result<Image> {
    let path = path.as_ref();
    let decoded = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let pixels: Vec<f32> = match decoded {
        DynamicImage::ImageLuma8(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
        other => {
            return Err(Error::InvalidArgument(format!(
                "{}: expected a single-channel image, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Image::new(w, h, spacing, pixels, id)
}

/// Writes a 16-bit grayscale PNG.
pub fn save_png16(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u16> = img
        .pixels()
        .iter()
        .map(|&v| (v as f64 * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
            .expect("buffer length matches dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
