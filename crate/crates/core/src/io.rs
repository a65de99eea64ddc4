//! PNG reading and writing.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Loads an 8- or 16-bit PNG as a 3-channel map in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<FeatureMap> {
    let img = image::open(path)?;
    Ok(from_image(&img))
}

pub fn from_image(img: &DynamicImage) -> FeatureMap {
    let deep = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    if deep {
        let rgb = img.to_rgb16();
        let (w, h) = rgb.dimensions();
        FeatureMap::from_fn(3, h as usize, w as usize, |c, y, x| {
            rgb.get_pixel(x as u32, y as u32)[c] as f64 / 65535.0
        })
    } else {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        FeatureMap::from_fn(3, h as usize, w as usize, |c, y, x| {
            rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        })
    }
}

/// Writes a 1- or 3-channel map (values clamped to `[0, 1]`) as PNG.
pub fn save_png(path: &Path, m: &FeatureMap, sixteen_bit: bool) -> Result<()> {
    let (c, h, w) = m.shape();
    if c != 1 && c != 3 {
        return Err(Error::Dimension(format!("cannot write a {c}-channel image")));
    }
    let at = |ch: usize, y: u32, x: u32| m.get(if c == 1 { 0 } else { ch }, y as usize, x as usize).clamp(0.0, 1.0);
    if sixteen_bit {
        let buf = ImageBuffer::<Rgb<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
            Rgb([0, 1, 2].map(|ch| (at(ch, y, x) * 65535.0).round() as u16))
        });
        buf.save(path)?;
    } else {
        let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            Rgb([0, 1, 2].map(|ch| (at(ch, y, x) * 255.0).round() as u8))
        });
        buf.save(path)?;
    }
    Ok(())
}

/// Maps a signed map to `[0, 1]` by its largest magnitude (zero lands on 0.5).
pub fn visualize_signed(m: &FeatureMap) -> FeatureMap {
    let s = m.max_abs();
    if s == 0.0 {
        return m.map(|_| 0.5);
    }
    m.map(|v| 0.5 + 0.5 * v / s)
}
