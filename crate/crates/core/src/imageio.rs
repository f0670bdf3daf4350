//! PNG decode/encode and bilinear resizing.
//!
//! Images are 8-bit RGB on disk and `[3, H, W]` f32 in memory; masks are
//! 8-bit grayscale with values exactly 0 or 255 on disk and `[1, H, W]`
//! {0, 1} in memory. Decoding maps to [0, 1]; the [-1, 1] network range is
//! applied by preprocessing.

use crate::error::{Error, Result};
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use std::path::Path;

pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn load_gray(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<f32>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] as f32 / 255.0;
    }
    Ok(out)
}

/// Save a `[3, H, W]` image in network range [-1, 1] as 8-bit RGB.
pub fn save_rgb_net_range(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    debug_assert_eq!(c, 3);
    let mut buf = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ch| {
                let v = (img[[ch, y, x]] + 1.0) * 127.5;
                v.round().clamp(0.0, 255.0) as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Save a `[1, H, W]` binary mask ({0,1}) as 8-bit grayscale 0/255.
pub fn save_mask(path: &Path, mask: &Array3<f32>) -> Result<()> {
    let (_, h, w) = mask.dim();
    let mut buf = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if mask[[0, y, x]] >= 0.5 { 255u8 } else { 0u8 };
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Bilinear resample with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let scale_y = h as f32 / out_h as f32;
    let scale_x = w as f32 / out_w as f32;
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    for oy in 0..out_h {
        let sy = ((oy as f32 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f32;
        for ox in 0..out_w {
            let sx = ((ox as f32 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f32;
            let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
            let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
            out[[oy, ox]] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Resize each channel of a `[C, H, W]` tensor.
pub fn resize_bilinear_chw(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, _, _) = src.dim();
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = src.index_axis(ndarray::Axis(0), ch).to_owned();
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&resize_bilinear(&plane, out_h, out_w));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_preserves_constant_images() {
        let src = Array2::from_elem((10, 7), 0.4f32);
        let out = resize_bilinear(&src, 5, 3);
        assert!(out.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn resize_halves_exactly_on_2x_grid() {
        // 2x2 blocks of constant value average to themselves
        let mut src = Array2::zeros((4, 4));
        for y in 0..4 {
            for x in 0..4 {
                src[[y, x]] = ((y / 2) * 2 + x / 2) as f32;
            }
        }
        let out = resize_bilinear(&src, 2, 2);
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[0, 1]], 1.0);
        assert_eq!(out[[1, 0]], 2.0);
        assert_eq!(out[[1, 1]], 3.0);
    }
}
