//! PNG input and output. Images in memory are `H × W × 3` `f32` in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::Real;

/// Reads an 8- or 16-bit PNG as RGB.
pub fn read_png(path: impl AsRef<Path>) -> Result<Array3<f32>> {
    let img = image::open(path.as_ref())?.into_rgb32f();
    let (w, h) = img.dimensions();
    let data = img.into_raw();
    Array3::from_shape_vec((h as usize, w as usize, 3), data).map_err(|e| Error::shape(e.to_string()))
}

/// Writes an 8-bit RGB PNG, clamping to `[0, 1]`.
pub fn write_png<F: Real>(path: impl AsRef<Path>, img: ArrayView3<F>) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        let px = |k: usize| (img[[y as usize, x as usize, k]].f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}

/// Rounds to the 8-bit grid, as a write followed by a read would.
pub fn quantize<F: Real>(img: ArrayView3<F>) -> Array3<f32> {
    img.mapv(|v| ((v.f64().clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Array3::from_shape_fn((5, 7, 3), |(y, x, c)| ((y * 7 + x) * 3 + c) as f32 / 104.0);
        write_png(&path, img.view()).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back, quantize(img.view()));
        assert!(read_png(dir.path().join("missing.png")).is_err());
    }
}
