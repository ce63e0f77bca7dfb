//! Pixel-level helpers shared by the corpus, filtering and evaluation code.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit RGB image. Every stage of the pipeline exchanges images in this form.
pub type Image = RgbImage;

/// Binary mask, one byte per pixel (0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; (width * height) as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[(y * self.width + x) as usize] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn fill_rect(&mut self, rect: Rect) {
        for y in rect.y..(rect.y + rect.h).min(self.height) {
            for x in rect.x..(rect.x + rect.w).min(self.width) {
                self.set(x, y, true);
            }
        }
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Bounding rectangle of the set pixels, if any.
    pub fn bounds(&self) -> Option<Rect> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != u32::MAX).then(|| Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    pub fn to_image(&self) -> ImageBuffer<Luma<u8>, Vec<u8>> {
        ImageBuffer::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn from_image(img: &ImageBuffer<Luma<u8>, Vec<u8>>) -> Self {
        let mut m = BinaryMask::new(img.width(), img.height());
        for (x, y, p) in img.enumerate_pixels() {
            m.set(x, y, p.0[0] >= 128);
        }
        m
    }
}

/// Axis-aligned integer rectangle `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn inside(&self, width: u32, height: u32) -> bool {
        self.right() <= width && self.bottom() <= height
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.right()
            && other.x < self.right()
            && self.y < other.bottom()
            && other.y < self.bottom()
    }

    /// Grows the rectangle by `r` on every side, clipped to the canvas.
    pub fn dilate(&self, r: u32, width: u32, height: u32) -> Rect {
        let x0 = self.x.saturating_sub(r);
        let y0 = self.y.saturating_sub(r);
        let x1 = (self.right() + r).min(width);
        let y1 = (self.bottom() + r).min(height);
        Rect::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
    }

    pub fn center_x2(&self) -> u32 {
        2 * self.x + self.w
    }

    pub fn center_y2(&self) -> u32 {
        2 * self.y + self.h
    }
}

/// Relative luminance in [0, 1] of an sRGB triple (Rec. 709 weights, no gamma).
#[inline]
pub fn luminance(c: [u8; 3]) -> f64 {
    (0.2126 * c[0] as f64 + 0.7152 * c[1] as f64 + 0.0722 * c[2] as f64) / 255.0
}

pub fn luminance_plane(img: &Image) -> Vec<f64> {
    img.pixels().map(|p| luminance(p.0)).collect()
}

pub fn solid(width: u32, height: u32, color: [u8; 3]) -> Image {
    ImageBuffer::from_pixel(width, height, Rgb(color))
}

/// Quantizes a [0, 1] intensity to 8 bits, rounding half away from zero.
#[inline]
pub fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(img.to_rgb8())
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    mask.to_image().save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(BinaryMask::from_image(&img.to_luma8()))
}
