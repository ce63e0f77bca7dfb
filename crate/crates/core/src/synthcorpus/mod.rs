//! Deterministic synthetic posters with complete ground truth.
//!
//! Every poster is described by a [`PosterRecord`]; rendering is a pure
//! function of the record, so the exact pixel set of every glyph and of the
//! subject can be recomputed downstream for bit-exact oracles.

mod generate;
mod layout;
mod render;

use serde::{Deserialize, Serialize};

use crate::color::contrast;
use crate::error::{Error, Result};
use crate::font::GlyphFont;
use crate::imaging::Rect;

pub use generate::{
    generate_corpus, read_manifest, write_corpus, CorpusConfig, CorpusItem, GenerateReport,
    DEFAULT_BUCKETS,
};
pub use layout::{layout_poster, rerender_at_ratio, PosterContent, SpanContent, SubjectContent};
pub use render::{glyph_pixels, render_poster, render_with, subject_mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanRole {
    Title,
    Subtitle,
    Body,
}

impl SpanRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            SpanRole::Title => "title",
            SpanRole::Subtitle => "subtitle",
            SpanRole::Body => "body",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "title" => Some(SpanRole::Title),
            "subtitle" => Some(SpanRole::Subtitle),
            "body" => Some(SpanRole::Body),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpan {
    pub content: String,
    pub bbox: Rect,
    pub fill_color: [u8; 3],
    pub scale: u32,
    pub role: SpanRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Background {
    Solid { color: [u8; 3] },
    /// Vertical gradient from `top` (row 0) to `bottom` (last row).
    Gradient { top: [u8; 3], bottom: [u8; 3] },
}

impl Background {
    /// Background color of row `y` on a canvas `height` pixels tall.
    pub fn at_row(&self, y: u32, height: u32) -> [u8; 3] {
        match *self {
            Background::Solid { color } => color,
            Background::Gradient { top, bottom } => {
                if height <= 1 {
                    return top;
                }
                let span = height - 1;
                let mut c = [0u8; 3];
                for i in 0..3 {
                    let v = top[i] as u32 * (span - y) + bottom[i] as u32 * y;
                    c[i] = ((v + span / 2) / span) as u8;
                }
                c
            }
        }
    }

    pub fn colors(&self) -> Vec<[u8; 3]> {
        match *self {
            Background::Solid { color } => vec![color],
            Background::Gradient { top, bottom } => vec![top, bottom],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Rect,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Rect, ShapeKind::Triangle];

    pub fn as_str(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Rect => "rectangle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub kind: ShapeKind,
    pub bbox: Rect,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutClass {
    Symmetric,
    LeftAligned,
    TopBanner,
}

impl LayoutClass {
    pub const ALL: [LayoutClass; 3] = [
        LayoutClass::Symmetric,
        LayoutClass::LeftAligned,
        LayoutClass::TopBanner,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosterRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub background: Background,
    pub subject: Option<Subject>,
    pub spans: Vec<TextSpan>,
    pub layout_class: LayoutClass,
    pub seed: u64,
}

/// Thresholds every valid record must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordRules {
    /// Minimum luminance difference between a span's fill and the background under it.
    pub min_contrast: f64,
    /// Max horizontal distance in px between a centered span's centroid and the canvas center.
    pub center_tolerance: u32,
    /// Minimum clearance in px between text spans and the subject box.
    pub subject_gap: u32,
}

impl Default for RecordRules {
    fn default() -> Self {
        Self {
            min_contrast: 0.3,
            center_tolerance: 4,
            subject_gap: 4,
        }
    }
}

impl PosterRecord {
    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Whether the title/subtitle geometry reads as horizontally centered.
    pub fn spans_centered(&self, tolerance: u32) -> bool {
        self.spans
            .iter()
            .filter(|s| s.role != SpanRole::Body)
            .all(|s| s.bbox.center_x2().abs_diff(self.width) <= 2 * tolerance)
    }

    /// Checks every structural invariant, naming the first one violated.
    pub fn validate(&self, font: &GlyphFont, rules: &RecordRules) -> Result<()> {
        let fail = |what: String| Err(Error::invalid_record(&self.id, what));
        if self.width == 0 || self.height == 0 {
            return fail("canvas must have positive dimensions".into());
        }
        if let Some(subject) = &self.subject {
            if subject.bbox.w == 0 || subject.bbox.h == 0 {
                return fail("subject bbox is empty".into());
            }
            if !subject.bbox.inside(self.width, self.height) {
                return fail("subject bbox lies outside the canvas".into());
            }
        }
        for (i, span) in self.spans.iter().enumerate() {
            if span.content.is_empty() {
                return fail(format!("span {i} has empty content"));
            }
            if let Some(c) = span.content.chars().find(|&c| !font.supports(c)) {
                return fail(format!("span {i} uses unsupported character {c:?}"));
            }
            if span.scale == 0 {
                return fail(format!("span {i} has zero scale"));
            }
            let (w, h) = font.extent(span.content.chars().count(), span.scale);
            if span.bbox.w != w || span.bbox.h != h {
                return fail(format!(
                    "span {i} bbox {}x{} does not match glyph extent {w}x{h}",
                    span.bbox.w, span.bbox.h
                ));
            }
            if !span.bbox.inside(self.width, self.height) {
                return fail(format!("span {i} bbox lies outside the canvas"));
            }
            for y in span.bbox.y..span.bbox.bottom() {
                let bg = self.background.at_row(y, self.height);
                if contrast(span.fill_color, bg) < rules.min_contrast {
                    return fail(format!(
                        "span {i} fill contrast below {} at row {y}",
                        rules.min_contrast
                    ));
                }
            }
            for (j, other) in self.spans.iter().enumerate().skip(i + 1) {
                if span.bbox.intersects(&other.bbox) {
                    return fail(format!("spans {i} and {j} overlap"));
                }
            }
            if let Some(subject) = &self.subject {
                let halo = subject
                    .bbox
                    .dilate(rules.subject_gap, self.width, self.height);
                if span.bbox.intersects(&halo) {
                    return fail(format!("span {i} is closer than {} px to the subject", rules.subject_gap));
                }
            }
        }
        let centered = self.spans_centered(rules.center_tolerance);
        let symmetric = self.layout_class == LayoutClass::Symmetric;
        if centered != symmetric && self.spans.iter().any(|s| s.role != SpanRole::Body) {
            return fail(format!(
                "layout_class {:?} inconsistent with span geometry (centered = {centered})",
                self.layout_class
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample_record() -> PosterRecord {
        PosterRecord {
            id: "t".into(),
            width: 64,
            height: 64,
            background: Background::Solid { color: [20, 20, 60] },
            subject: Some(Subject {
                kind: ShapeKind::Circle,
                bbox: Rect::new(22, 28, 20, 18),
                color: [220, 40, 40],
            }),
            spans: vec![TextSpan {
                content: "SALE".into(),
                bbox: Rect::new(16, 8, 32, 8),
                fill_color: [255, 255, 255],
                scale: 1,
                role: SpanRole::Title,
            }],
            layout_class: LayoutClass::Symmetric,
            seed: 1,
        }
    }

    #[test]
    fn valid_record_passes() {
        sample_record()
            .validate(&GlyphFont::builtin(), &RecordRules::default())
            .unwrap();
    }

    #[test]
    fn violations_are_named() {
        let font = GlyphFont::builtin();
        let rules = RecordRules::default();
        let mut r = sample_record();
        r.spans[0].bbox.w = 30;
        let err = r.validate(&font, &rules).unwrap_err().to_string();
        assert!(err.contains("glyph extent"), "{err}");

        let mut r = sample_record();
        r.spans[0].fill_color = [30, 30, 70];
        let err = r.validate(&font, &rules).unwrap_err().to_string();
        assert!(err.contains("contrast"), "{err}");

        let mut r = sample_record();
        r.layout_class = LayoutClass::LeftAligned;
        let err = r.validate(&font, &rules).unwrap_err().to_string();
        assert!(err.contains("layout_class"), "{err}");

        let mut r = sample_record();
        r.spans[0].bbox.y = 26;
        let err = r.validate(&font, &rules).unwrap_err().to_string();
        assert!(err.contains("subject"), "{err}");
    }

    #[test]
    fn gradient_endpoints_are_exact() {
        let bg = Background::Gradient {
            top: [0, 100, 200],
            bottom: [200, 100, 0],
        };
        assert_eq!(bg.at_row(0, 64), [0, 100, 200]);
        assert_eq!(bg.at_row(63, 64), [200, 100, 0]);
    }

    #[test]
    fn record_json_field_names() {
        let v = serde_json::to_value(sample_record()).unwrap();
        for key in ["id", "width", "height", "background", "subject", "spans", "layout_class", "seed"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["layout_class"], "symmetric");
        assert_eq!(v["spans"][0]["role"], "title");
        assert_eq!(v["background"]["kind"], "solid");
    }
}
