use image::Rgb;

use super::{PosterRecord, RecordRules, ShapeKind, Subject, TextSpan};
use crate::error::Result;
use crate::font::GlyphFont;
use crate::imaging::{BinaryMask, Image};

/// Renders a record with the builtin font and default invariant thresholds.
pub fn render_poster(record: &PosterRecord) -> Result<Image> {
    render_with(record, &GlyphFont::builtin(), &RecordRules::default())
}

pub fn render_with(record: &PosterRecord, font: &GlyphFont, rules: &RecordRules) -> Result<Image> {
    record.validate(font, rules)?;
    let (w, h) = record.dims();
    let mut img = Image::new(w, h);
    for y in 0..h {
        let c = Rgb(record.background.at_row(y, h));
        for x in 0..w {
            img.put_pixel(x, y, c);
        }
    }
    if let Some(subject) = &record.subject {
        for (x, y) in subject_pixels(subject) {
            img.put_pixel(x, y, Rgb(subject.color));
        }
    }
    for span in &record.spans {
        for (x, y) in span_ink(span, font) {
            img.put_pixel(x, y, Rgb(span.fill_color));
        }
    }
    Ok(img)
}

fn inside_shape(s: &Subject, x: u32, y: u32) -> bool {
    let b = s.bbox;
    let (w, h) = (b.w as i64, b.h as i64);
    // pixel centers in doubled coordinates relative to the box origin
    let px = 2 * (x as i64 - b.x as i64) + 1;
    let py = 2 * (y as i64 - b.y as i64) + 1;
    match s.kind {
        ShapeKind::Rect => true,
        ShapeKind::Circle => {
            let dx = px - w;
            let dy = py - h;
            dx * dx * h * h + dy * dy * w * w <= w * w * h * h
        }
        ShapeKind::Triangle => (px - w).abs() * 2 * h <= w * py,
    }
}

/// Pixel coordinates covered by the subject shape, row-major.
pub fn subject_pixels(s: &Subject) -> impl Iterator<Item = (u32, u32)> + '_ {
    let b = s.bbox;
    (b.y..b.bottom())
        .flat_map(move |y| (b.x..b.right()).map(move |x| (x, y)))
        .filter(move |&(x, y)| inside_shape(s, x, y))
}

/// Ground-truth subject mask of a record.
pub fn subject_mask(record: &PosterRecord) -> BinaryMask {
    let mut m = BinaryMask::new(record.width, record.height);
    if let Some(s) = &record.subject {
        for (x, y) in subject_pixels(s) {
            m.set(x, y, true);
        }
    }
    m
}

fn span_ink<'a>(span: &'a TextSpan, font: &'a GlyphFont) -> impl Iterator<Item = (u32, u32)> + 'a {
    let s = span.scale;
    let cw = font.cell_width * s;
    span.content.chars().enumerate().flat_map(move |(i, ch)| {
        let glyph = font.glyph(ch).expect("validated charset");
        let ox = span.bbox.x + i as u32 * cw;
        let oy = span.bbox.y;
        glyph
            .ink()
            .collect::<Vec<_>>()
            .into_iter()
            .flat_map(move |(c, r)| {
                (0..s).flat_map(move |dy| (0..s).map(move |dx| (ox + c * s + dx, oy + r * s + dy)))
            })
    })
}

/// Exact ink pixel set of every span of a record.
pub fn glyph_pixels(record: &PosterRecord, font: &GlyphFont) -> BinaryMask {
    let mut m = BinaryMask::new(record.width, record.height);
    for span in &record.spans {
        for (x, y) in span_ink(span, font) {
            m.set(x, y, true);
        }
    }
    m
}
