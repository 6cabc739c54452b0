//! PNG/JPEG reading and 8-bit PNG writing for images and masks.

use std::path::Path;

use bgnet_tensor::Tensor;
use image::{GrayImage, ImageFormat, RgbImage};

use crate::datamodel::Plane;
use crate::error::{BgError, Result};

fn image_err(path: &Path, source: image::ImageError) -> BgError {
    BgError::Image { path: path.to_path_buf(), source }
}

/// RGB image as a (3, H, W) tensor in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Single-channel mask in [0, 1] (8-bit value / 255). Color files are
/// converted to luma first.
pub fn read_mask(path: &Path) -> Result<Plane> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    Ok(gray_to_plane(&img))
}

/// Decodes an in-memory PNG into a mask plane.
pub fn decode_mask_png(bytes: &[u8]) -> Result<Plane> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| image_err(Path::new("<memory>"), e))?
        .to_luma8();
    Ok(gray_to_plane(&img))
}

pub fn gray_to_plane(img: &GrayImage) -> Plane {
    Plane::new(img.height() as usize, img.width() as usize, img.as_raw().iter().map(|&v| v as f64 / 255.0).collect())
}

/// Quantizes [0, 1] values to 8 bits with rounding.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn plane_to_gray(p: &Plane) -> GrayImage {
    GrayImage::from_raw(p.width as u32, p.height as u32, p.data.iter().map(|&v| quantize(v)).collect())
        .expect("plane buffer matches its dimensions")
}

pub fn encode_mask_png(p: &Plane) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    plane_to_gray(p).write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding cannot fail");
    out.into_inner()
}

pub fn write_mask(path: &Path, p: &Plane) -> Result<()> {
    std::fs::write(path, encode_mask_png(p))?;
    Ok(())
}

/// Writes a (3, H, W) tensor in [0, 1] as an 8-bit RGB PNG.
pub fn write_rgb(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = match t.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(BgError::shape(format!("expected (3,H,W), got {s:?}"))),
    };
    if c != 3 {
        return Err(BgError::shape(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
    });
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let p = Plane::from_fn(5, 7, |y, x| ((y * 7 + x) % 3) as f64 / 2.0);
        let q = decode_mask_png(&encode_mask_png(&p)).unwrap();
        assert_eq!((q.height, q.width), (5, 7));
        for (a, b) in p.data.iter().zip(&q.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert!(decode_mask_png(b"not a png").is_err());
    }
}
