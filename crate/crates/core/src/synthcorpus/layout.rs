//! Deterministic placement of poster content onto a canvas.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    render_with, Background, LayoutClass, PosterRecord, ShapeKind, SpanRole, Subject, TextSpan,
};
use super::generate::CorpusConfig;
use crate::error::{Error, Result};
use crate::font::GlyphFont;
use crate::imaging::{Image, Rect};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanContent {
    pub content: String,
    pub role: SpanRole,
    pub scale: u32,
    pub fill_color: [u8; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubjectContent {
    pub kind: ShapeKind,
    pub color: [u8; 3],
}

/// Everything about a poster except where things sit on the canvas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosterContent {
    pub background: Background,
    pub subject: Option<SubjectContent>,
    /// Spans in reading order: title, then subtitle, then body.
    pub spans: Vec<SpanContent>,
    pub layout_class: LayoutClass,
}

impl PosterContent {
    pub fn from_record(record: &PosterRecord) -> Self {
        Self {
            background: record.background,
            subject: record.subject.map(|s| SubjectContent {
                kind: s.kind,
                color: s.color,
            }),
            spans: record
                .spans
                .iter()
                .map(|s| SpanContent {
                    content: s.content.clone(),
                    role: s.role,
                    scale: s.scale,
                    fill_color: s.fill_color,
                })
                .collect(),
            layout_class: record.layout_class,
        }
    }
}

fn align_nearest(v: u32, a: u32) -> u32 {
    (v + (a - 1) / 2) / a * a
}

/// Places `content` on a `width`×`height` canvas.
///
/// The result is a pure function of the arguments: the same content, canvas
/// and seed always give the same record. Spans wider than the usable width
/// are shrunk to the largest scale that fits.
pub fn layout_poster(
    content: &PosterContent,
    id: &str,
    width: u32,
    height: u32,
    seed: u64,
    cfg: &CorpusConfig,
) -> Result<PosterRecord> {
    let font = GlyphFont::builtin();
    let a = cfg.align.max(1);
    let m = cfg.margin;
    let gap = cfg.rules.subject_gap;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: [u64; 5] = std::array::from_fn(|_| rng.next_u64());

    let usable_w = width.saturating_sub(2 * m);
    let mut spans = Vec::with_capacity(content.spans.len());
    for sc in &content.spans {
        let len = sc.content.chars().count();
        let scale = (1..=sc.scale)
            .rev()
            .find(|&s| font.extent(len, s).0 <= usable_w)
            .ok_or_else(|| {
                Error::Layout(format!(
                    "span {:?} needs {} px at scale 1 but only {usable_w} px are usable",
                    sc.content,
                    font.extent(len, 1).0
                ))
            })?;
        let (w, h) = font.extent(len, scale);
        spans.push(TextSpan {
            content: sc.content.clone(),
            bbox: Rect::new(0, 0, w, h),
            fill_color: sc.fill_color,
            scale,
            role: sc.role,
        });
    }

    let in_top = |role: SpanRole| match content.layout_class {
        LayoutClass::Symmetric => role == SpanRole::Title,
        _ => role != SpanRole::Body,
    };
    let top_h: u32 = spans.iter().filter(|s| in_top(s.role)).map(|s| s.bbox.h).sum();
    let bottom_h: u32 = spans.iter().filter(|s| !in_top(s.role)).map(|s| s.bbox.h).sum();
    let need = if content.subject.is_some() {
        cfg.min_subject + 2 * gap
    } else {
        0
    };
    let avail = height as i64 - 2 * m as i64 - top_h as i64 - bottom_h as i64;
    if avail < need as i64 {
        return Err(Error::Layout(format!(
            "{} px of text leave {avail} px for the subject, need {need}",
            top_h + bottom_h
        )));
    }
    let mut slack = avail as u32 - need;
    let top_jitter = if slack >= a && draws[0] % 2 == 1 { a } else { 0 };
    slack -= top_jitter;
    let bottom_jitter = if slack >= a && draws[1] % 2 == 1 { a } else { 0 };

    let mut y = m + top_jitter;
    for s in spans.iter_mut().filter(|s| in_top(s.role)) {
        s.bbox.y = y;
        y += s.bbox.h;
    }
    let top_end = y;
    let bottom_start = height - m - bottom_jitter - bottom_h;
    let mut y = bottom_start;
    for s in spans.iter_mut().filter(|s| !in_top(s.role)) {
        s.bbox.y = y;
        y += s.bbox.h;
    }

    for s in spans.iter_mut() {
        let w = s.bbox.w;
        s.bbox.x = match content.layout_class {
            LayoutClass::Symmetric => align_nearest((width - w) / 2, a),
            LayoutClass::LeftAligned => m,
            LayoutClass::TopBanner if in_top(s.role) => (width - m - w) / a * a,
            LayoutClass::TopBanner => m,
        };
    }

    let subject = match content.subject {
        None => None,
        Some(sc) => {
            let side_pad = cfg.subject_pad;
            let free_y0 = top_end + gap;
            let free_y1 = bottom_start - gap;
            let max_h = free_y1 - free_y0;
            let max_w = width.saturating_sub(2 * side_pad).min(max_h * 2);
            if max_w < cfg.min_subject {
                return Err(Error::Layout("canvas too narrow for the subject".into()));
            }
            let pick = |d: u64, lo: u32, hi: u32| lo + (d % (hi - lo + 1) as u64) as u32;
            // Subjects fill at least half of the free band in each direction.
            let sh = pick(draws[2], cfg.min_subject.max(max_h / 2), max_h);
            let sw_hi = max_w.min(sh * 2).max(cfg.min_subject);
            let sw = pick(draws[3], cfg.min_subject.max(sh / 2).min(sw_hi), sw_hi);
            // Off-centre subjects shift by up to a quarter of the free room.
            let center = (width - sw) / 2;
            let room = width - 2 * side_pad - sw;
            let shift = if room >= 4 { pick(draws[4], 1, room / 4) } else { 0 };
            let x = match content.layout_class {
                LayoutClass::Symmetric => center,
                LayoutClass::LeftAligned => center + shift,
                LayoutClass::TopBanner => center - shift,
            };
            let sy = free_y0 + (max_h - sh) / 2;
            let subject = Subject {
                kind: sc.kind,
                bbox: Rect::new(x, sy, sw, sh),
                color: sc.color,
            };
            let area = super::render::subject_pixels(&subject).count() as u32;
            let max_scale = spans.iter().map(|s| s.scale).max().unwrap_or(1);
            let biggest_glyph = font
                .templates()
                .iter()
                .map(|(_, g)| g.popcount())
                .max()
                .unwrap_or(0)
                * max_scale
                * max_scale;
            if area <= biggest_glyph {
                return Err(Error::Layout(format!(
                    "subject covers {area} px, not more than the largest glyph ({biggest_glyph} px)"
                )));
            }
            Some(subject)
        }
    };

    let record = PosterRecord {
        id: id.to_string(),
        width,
        height,
        background: content.background,
        subject,
        spans,
        layout_class: content.layout_class,
        seed,
    };
    record
        .validate(&font, &cfg.rules)
        .map_err(|e| Error::Layout(e.to_string()))?;
    Ok(record)
}

/// Re-lays out a record's content on a different canvas and renders it.
pub fn rerender_at_ratio(
    record: &PosterRecord,
    bucket: (u32, u32),
    cfg: &CorpusConfig,
) -> Result<(PosterRecord, Image)> {
    if bucket == record.dims() {
        return Err(Error::InvalidArgument(format!(
            "record {} is already {}x{}",
            record.id, bucket.0, bucket.1
        )));
    }
    let content = PosterContent::from_record(record);
    let id = format!("{}@{}x{}", record.id, bucket.0, bucket.1);
    let out = layout_poster(&content, &id, bucket.0, bucket.1, record.seed, cfg)?;
    let img = render_with(&out, &GlyphFont::builtin(), &cfg.rules)?;
    Ok((out, img))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn content(class: LayoutClass, title: &str, scale: u32) -> PosterContent {
        PosterContent {
            background: Background::Solid { color: [240, 240, 230] },
            subject: Some(SubjectContent {
                kind: ShapeKind::Circle,
                color: [40, 80, 220],
            }),
            spans: vec![
                SpanContent {
                    content: title.into(),
                    role: SpanRole::Title,
                    scale,
                    fill_color: [0, 0, 0],
                },
                SpanContent {
                    content: "NOW".into(),
                    role: SpanRole::Subtitle,
                    scale: 1,
                    fill_color: [220, 40, 40],
                },
            ],
            layout_class: class,
        }
    }

    #[test]
    fn layout_is_deterministic() {
        let cfg = CorpusConfig::default();
        let c = content(LayoutClass::Symmetric, "SALE", 1);
        let a = layout_poster(&c, "x", 64, 64, 9, &cfg).unwrap();
        let b = layout_poster(&c, "x", 64, 64, 9, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn square_to_portrait_keeps_contents() {
        let cfg = CorpusConfig::default();
        let r = layout_poster(&content(LayoutClass::LeftAligned, "SALE", 1), "x", 64, 64, 3, &cfg)
            .unwrap();
        let (r2, img) = rerender_at_ratio(&r, (64, 96), &cfg).unwrap();
        assert_eq!(img.dimensions(), (64, 96));
        let texts = |r: &PosterRecord| r.spans.iter().map(|s| s.content.clone()).collect::<Vec<_>>();
        assert_eq!(texts(&r), texts(&r2));
        assert_eq!(r.subject.unwrap().kind, r2.subject.unwrap().kind);
        assert_eq!(r.layout_class, r2.layout_class);
    }

    #[test]
    fn symmetric_stays_centered() {
        let cfg = CorpusConfig::default();
        let r = layout_poster(&content(LayoutClass::Symmetric, "TOY", 2), "x", 96, 64, 5, &cfg)
            .unwrap();
        for bucket in [(64, 64), (64, 96), (48, 96)] {
            let (r2, _) = rerender_at_ratio(&r, bucket, &cfg).unwrap();
            assert!(r2.spans_centered(cfg.rules.center_tolerance));
        }
    }

    #[test]
    fn too_wide_title_fails_explicitly() {
        let cfg = CorpusConfig::default();
        let r = layout_poster(&content(LayoutClass::Symmetric, "FESTIVAL", 1), "x", 96, 64, 5, &cfg)
            .unwrap();
        // 8 chars at scale 1 need 64 px; a 48 px canvas leaves 32 usable.
        let err = rerender_at_ratio(&r, (48, 96), &cfg).unwrap_err();
        assert!(matches!(err, Error::Layout(_)), "{err}");
    }

    #[test]
    fn same_bucket_is_rejected() {
        let cfg = CorpusConfig::default();
        let r = layout_poster(&content(LayoutClass::Symmetric, "SALE", 1), "x", 64, 64, 5, &cfg)
            .unwrap();
        assert!(rerender_at_ratio(&r, (64, 64), &cfg).is_err());
    }
}
