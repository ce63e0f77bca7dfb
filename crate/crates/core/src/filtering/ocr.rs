//! Template-matching OCR over the builtin bitmap font.
//!
//! Every cell position and corpus scale is scored against every glyph by the
//! normalized cross-correlation between the cell's luminance and the glyph's
//! binary mask. An exact rendering scores 1.0 regardless of the fill and
//! background colors, and blurred or noisy glyphs degrade smoothly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::font::{GlyphFont, GlyphMask};
use crate::imaging::{luminance_plane, Image, Rect};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedSpan {
    pub text: String,
    pub bbox: Rect,
    pub confidence: f64,
}

impl DetectedSpan {
    /// Font scale implied by the box height.
    pub fn scale(&self, font: &GlyphFont) -> u32 {
        (self.bbox.h / font.cell_height).max(1)
    }
}

/// Anything that turns an image into text spans.
pub trait OcrBackend: Send + Sync {
    fn recognize(&self, image: &Image) -> Result<Vec<DetectedSpan>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateOcrConfig {
    pub scales: Vec<u32>,
    /// Minimum |NCC| for a cell to count as a glyph.
    pub min_confidence: f64,
    /// Cells whose luminance std is below this are treated as blank.
    pub min_cell_std: f64,
    /// Minimum luminance gap between ink and non-ink pixels of a match.
    pub min_ink_contrast: f64,
}

impl Default for TemplateOcrConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 2, 3],
            min_confidence: 0.8,
            min_cell_std: 0.03,
            min_ink_contrast: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TemplateOcr {
    pub font: GlyphFont,
    pub config: TemplateOcrConfig,
}

/// Stand-in for a remote OCR service. Carries the connection policy an HTTP
/// client would need; it does not perform requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpOcr {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl OcrBackend for HttpOcr {
    fn recognize(&self, _image: &Image) -> Result<Vec<DetectedSpan>> {
        Err(Error::Config(format!(
            "remote OCR backend at {} is not available in this build",
            self.endpoint
        )))
    }
}

/// Summed-area table with one extra leading row and column of zeros.
struct Integral {
    w: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Integral {
    fn new(lum: &[f64], w: usize, h: usize) -> Self {
        let stride = w + 1;
        let mut sum = vec![0.0; stride * (h + 1)];
        let mut sq = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let (mut rs, mut rq) = (0.0, 0.0);
            for x in 0..w {
                let v = lum[y * w + x];
                rs += v;
                rq += v * v;
                sum[(y + 1) * stride + x + 1] = sum[y * stride + x + 1] + rs;
                sq[(y + 1) * stride + x + 1] = sq[y * stride + x + 1] + rq;
            }
        }
        Self { w, sum, sq }
    }

    #[inline]
    fn rect(table: &[f64], stride: usize, x: usize, y: usize, w: usize, h: usize) -> f64 {
        table[(y + h) * stride + x + w] - table[y * stride + x + w] - table[(y + h) * stride + x]
            + table[y * stride + x]
    }

    fn sums(&self, x: usize, y: usize, w: usize, h: usize) -> (f64, f64) {
        let s = self.w + 1;
        (
            Self::rect(&self.sum, s, x, y, w, h),
            Self::rect(&self.sq, s, x, y, w, h),
        )
    }

    fn block(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        Self::rect(&self.sum, self.w + 1, x, y, w, h)
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    x: u32,
    y: u32,
    scale: u32,
    ch: char,
    conf: f64,
    dark_ink: bool,
}

impl Hit {
    fn cell(&self, cw: u32) -> Rect {
        Rect::new(self.x, self.y, cw * self.scale, cw * self.scale)
    }
}

impl TemplateOcr {
    pub fn new(config: TemplateOcrConfig) -> Self {
        Self {
            font: GlyphFont::builtin(),
            config,
        }
    }

    fn scan(&self, lum: &[f64], w: u32, h: u32) -> Vec<Hit> {
        let integral = Integral::new(lum, w as usize, h as usize);
        let templates: Vec<(char, GlyphMask, Vec<(u32, u32)>)> = self
            .font
            .templates()
            .into_iter()
            .map(|(c, g)| (c, g, g.ink().collect()))
            .collect();
        let cw = self.font.cell_width;
        let mut hits = Vec::new();
        for &s in &self.config.scales {
            let side = cw * s;
            if side > w || side > h {
                continue;
            }
            let n = (side * side) as f64;
            for y in 0..=(h - side) {
                for x in 0..=(w - side) {
                    let (sum, sq) = integral.sums(x as usize, y as usize, side as usize, side as usize);
                    let mean = sum / n;
                    let var = (sq / n - mean * mean).max(0.0);
                    let std = var.sqrt();
                    if std < self.config.min_cell_std {
                        continue;
                    }
                    let mut best: Option<(f64, char, bool)> = None;
                    for (ch, glyph, ink) in &templates {
                        let k = glyph.popcount() as f64 * (s * s) as f64;
                        let on_sum: f64 = if s == 1 {
                            ink.iter()
                                .map(|&(c, r)| lum[((y + r) * w + x + c) as usize])
                                .sum()
                        } else {
                            ink.iter()
                                .map(|&(c, r)| {
                                    integral.block(
                                        (x + c * s) as usize,
                                        (y + r * s) as usize,
                                        s as usize,
                                        s as usize,
                                    )
                                })
                                .sum()
                        };
                        let p = k / n;
                        let t_std = (p * (1.0 - p)).sqrt();
                        let cov = on_sum / n - p * mean;
                        let ncc = cov / (t_std * std);
                        let on_mean = on_sum / k;
                        let off_mean = (sum - on_sum) / (n - k);
                        if (on_mean - off_mean).abs() < self.config.min_ink_contrast {
                            continue;
                        }
                        let conf = ncc.abs().min(1.0);
                        if best.is_none_or(|b| conf > b.0) {
                            best = Some((conf, *ch, ncc < 0.0));
                        }
                    }
                    if let Some((conf, ch, dark_ink)) = best {
                        if conf >= self.config.min_confidence {
                            hits.push(Hit {
                                x,
                                y,
                                scale: s,
                                ch,
                                conf,
                                dark_ink,
                            });
                        }
                    }
                }
            }
        }
        hits
    }

    fn cell_blank(&self, integral: &Integral, rect: Rect, w: u32, h: u32) -> bool {
        if !rect.inside(w, h) {
            return false;
        }
        let n = rect.area() as f64;
        let (sum, sq) = integral.sums(rect.x as usize, rect.y as usize, rect.w as usize, rect.h as usize);
        let mean = sum / n;
        ((sq / n - mean * mean).max(0.0)).sqrt() < self.config.min_cell_std
    }
}

fn snap(conf: f64) -> f64 {
    if conf > 1.0 - 1e-9 {
        1.0
    } else {
        conf
    }
}

impl OcrBackend for TemplateOcr {
    fn recognize(&self, image: &Image) -> Result<Vec<DetectedSpan>> {
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 {
            return Ok(Vec::new());
        }
        let lum = luminance_plane(image);
        let mut hits = self.scan(&lum, w, h);
        let key = |c: f64| (c * 1e9).round() as i64;
        hits.sort_by(|a, b| {
            key(b.conf)
                .cmp(&key(a.conf))
                .then(b.scale.cmp(&a.scale))
                .then(a.y.cmp(&b.y))
                .then(a.x.cmp(&b.x))
        });
        let cw = self.font.cell_width;
        let mut accepted: Vec<Hit> = Vec::new();
        for hit in hits {
            let cell = hit.cell(cw);
            if accepted.iter().all(|a| !a.cell(cw).intersects(&cell)) {
                accepted.push(hit);
            }
        }

        // Chain glyphs that sit side by side on the same baseline and scale.
        accepted.sort_by_key(|a| (a.scale, a.y, a.x));
        let integral = Integral::new(&lum, w as usize, h as usize);
        let mut spans: Vec<DetectedSpan> = Vec::new();
        let mut i = 0;
        while i < accepted.len() {
            let first = accepted[i];
            let step = cw * first.scale;
            let mut text = first.ch.to_string();
            let mut conf = first.conf;
            let mut end = first.x + step;
            let mut j = i + 1;
            while j < accepted.len() {
                let next = accepted[j];
                if next.scale != first.scale || next.y != first.y || next.dark_ink != first.dark_ink {
                    break;
                }
                if next.x == end {
                    text.push(next.ch);
                } else if next.x == end + step
                    && self.cell_blank(&integral, Rect::new(end, first.y, step, step), w, h)
                {
                    text.push(' ');
                    text.push(next.ch);
                } else {
                    break;
                }
                conf = conf.min(next.conf);
                end = next.x + step;
                j += 1;
            }
            // Lone punctuation marks are indistinguishable from shape edges.
            if text.chars().any(|c| c.is_ascii_alphanumeric()) {
                spans.push(DetectedSpan {
                    text,
                    bbox: Rect::new(first.x, first.y, end - first.x, step),
                    confidence: snap(conf),
                });
            }
            i = j;
        }
        spans.sort_by_key(|s| (s.bbox.y, s.bbox.x));
        Ok(spans)
    }
}

/// Runs the default template OCR.
pub fn run_ocr(image: &Image) -> Vec<DetectedSpan> {
    TemplateOcr::default()
        .recognize(image)
        .expect("template OCR is infallible")
}
