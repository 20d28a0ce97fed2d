//! 8-bit RGB PNG storage for image tensors.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::map::{FieldMap, ImageTensor};

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("expected a 3-channel image, got {0} channels")]
    Channels(usize),
}

/// Round every value to the nearest multiple of 1/255 in [0,1], the exact
/// set of values an 8-bit raster can hold.
pub fn quantize(image: &mut ImageTensor) {
    for v in image.data.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

pub fn save_png(image: &ImageTensor, path: impl AsRef<Path>) -> Result<(), RasterError> {
    if image.channels != 3 {
        return Err(RasterError::Channels(image.channels));
    }
    let buf: RgbImage = ImageBuffer::from_fn(image.width as u32, image.height as u32, |x, y| {
        let px = |k| (image.get(k, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)?;
    Ok(())
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ImageTensor, RasterError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = FieldMap::zeros(3, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        for k in 0..3 {
            out.set(k, y as usize, x as usize, p.0[k] as f64 / 255.0);
        }
    }
    Ok(out)
}
