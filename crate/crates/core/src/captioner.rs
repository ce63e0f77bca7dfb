//! Glyph- and layout-focused captions produced by a fixed grammar over the
//! record's ground truth.
//!
//! Glyph caption: one clause per span in reading order,
//!
//! ```text
//! <size> <color> <role> text '<content>' at <position>
//! ```
//!
//! joined by `, `. Size is `small` (scale 1), `medium` (scale 2) or `large`;
//! color is the nearest entry of [`NAMED_COLORS`](crate::color::NAMED_COLORS);
//! position is the 3×3 canvas cell holding the span centroid, written as
//! `top`, `bottom`, `left`, `right`, `center`, or a corner such as
//! `top left`. A record without spans is captioned `no text`.
//!
//! [`parse_caption`] inverts the glyph grammar exactly.

use serde::{Deserialize, Serialize};

use crate::color::{nearest_name, NAMED_COLORS};
use crate::error::{Error, Result};
use crate::imaging::Rect;
use crate::synthcorpus::{LayoutClass, PosterRecord, SpanRole};

pub const NO_TEXT: &str = "no text";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionBundle {
    pub glyph_caption: String,
    pub layout_caption: String,
}

/// Anything that can caption a poster record.
pub trait Captioner: Send + Sync {
    fn caption(&self, record: &PosterRecord) -> Result<CaptionBundle>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GrammarCaptioner;

impl Captioner for GrammarCaptioner {
    fn caption(&self, record: &PosterRecord) -> Result<CaptionBundle> {
        Ok(CaptionBundle {
            glyph_caption: caption_glyph(record),
            layout_caption: caption_layout(record),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeWord {
    Small,
    Medium,
    Large,
}

impl SizeWord {
    pub fn from_scale(scale: u32) -> Self {
        match scale {
            0 | 1 => SizeWord::Small,
            2 => SizeWord::Medium,
            _ => SizeWord::Large,
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            SizeWord::Small => "small",
            SizeWord::Medium => "medium",
            SizeWord::Large => "large",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "small" => Some(SizeWord::Small),
            "medium" => Some(SizeWord::Medium),
            "large" => Some(SizeWord::Large),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Row {
    Top,
    Middle,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Column {
    Left,
    Center,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub row: Row,
    pub col: Column,
}

impl Position {
    /// Grid cell of the centroid of `bbox` on a `width`×`height` canvas.
    pub fn of(bbox: Rect, width: u32, height: u32) -> Self {
        let third = |c2: u32, extent: u32| ((c2 as u64 * 3) / (2 * extent as u64)).min(2);
        let row = match third(bbox.center_y2(), height) {
            0 => Row::Top,
            1 => Row::Middle,
            _ => Row::Bottom,
        };
        let col = match third(bbox.center_x2(), width) {
            0 => Column::Left,
            1 => Column::Center,
            _ => Column::Right,
        };
        Position { row, col }
    }

    pub fn words(&self) -> String {
        let r = match self.row {
            Row::Top => Some("top"),
            Row::Middle => None,
            Row::Bottom => Some("bottom"),
        };
        let c = match self.col {
            Column::Left => Some("left"),
            Column::Center => None,
            Column::Right => Some("right"),
        };
        match (r, c) {
            (None, None) => "center".into(),
            (Some(r), None) => r.into(),
            (None, Some(c)) => c.into(),
            (Some(r), Some(c)) => format!("{r} {c}"),
        }
    }
}

/// One span's attributes at grammar resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphClause {
    pub size: SizeWord,
    pub color: String,
    pub role: SpanRole,
    pub content: String,
    pub position: Position,
}

impl GlyphClause {
    fn render(&self) -> String {
        format!(
            "{} {} {} text '{}' at {}",
            self.size.as_str(),
            self.color,
            self.role.as_str(),
            self.content,
            self.position.words()
        )
    }
}

/// Ground-truth span attributes of a record, quantized to the grammar.
pub fn quantize_spans(record: &PosterRecord) -> Vec<GlyphClause> {
    record
        .spans
        .iter()
        .map(|s| GlyphClause {
            size: SizeWord::from_scale(s.scale),
            color: nearest_name(s.fill_color).to_string(),
            role: s.role,
            content: s.content.clone(),
            position: Position::of(s.bbox, record.width, record.height),
        })
        .collect()
}

pub fn caption_glyph(record: &PosterRecord) -> String {
    let clauses = quantize_spans(record);
    if clauses.is_empty() {
        return NO_TEXT.to_string();
    }
    clauses
        .iter()
        .map(GlyphClause::render)
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn composition_word(class: LayoutClass) -> &'static str {
    match class {
        LayoutClass::Symmetric => "symmetrical",
        LayoutClass::LeftAligned => "left-aligned",
        LayoutClass::TopBanner => "top-banner",
    }
}

pub fn caption_layout(record: &PosterRecord) -> String {
    let mut out = match &record.subject {
        Some(s) => format!("A poster featuring a {} as the main subject.", s.kind.as_str()),
        None => "A poster with no main subject.".to_string(),
    };
    let first = |role| record.spans.iter().find(|s| s.role == role);
    if let Some(title) = first(SpanRole::Title) {
        out.push_str(&format!(" The main title reads '{}'", title.content));
        if let Some(sub) = first(SpanRole::Subtitle) {
            out.push_str(&format!(", and the subtitle says '{}'", sub.content));
        }
        out.push('.');
    }
    out.push_str(&format!(
        " The composition is {}.",
        composition_word(record.layout_class)
    ));
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Word(String),
    Quoted(String),
    Comma,
}

impl Token {
    fn text(&self) -> String {
        match self {
            Token::Word(w) => w.clone(),
            Token::Quoted(q) => format!("'{q}'"),
            Token::Comma => ",".into(),
        }
    }
}

fn tokenize(s: &str) -> std::result::Result<Vec<Token>, (usize, String)> {
    let mut tokens = Vec::new();
    let mut chars = s.chars().peekable();
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<Token>| {
        if !word.is_empty() {
            tokens.push(Token::Word(std::mem::take(word)));
        }
    };
    while let Some(c) = chars.next() {
        match c {
            ' ' => flush(&mut word, &mut tokens),
            ',' => {
                flush(&mut word, &mut tokens);
                tokens.push(Token::Comma);
            }
            '\'' if word.is_empty() => {
                let mut q = String::new();
                loop {
                    match chars.next() {
                        Some('\'') => break,
                        Some(c) => q.push(c),
                        None => return Err((tokens.len(), format!("'{q}"))),
                    }
                }
                tokens.push(Token::Quoted(q));
            }
            c => word.push(c),
        }
    }
    flush(&mut word, &mut tokens);
    Ok(tokens)
}

/// Inverse of [`caption_glyph`].
pub fn parse_caption(caption: &str) -> Result<Vec<GlyphClause>> {
    if caption == NO_TEXT {
        return Ok(Vec::new());
    }
    let tokens = tokenize(caption).map_err(|(index, token)| Error::CaptionParse {
        index,
        token,
        reason: "unterminated quote".into(),
    })?;
    let err = |i: usize, reason: &str| Error::CaptionParse {
        index: i,
        token: tokens.get(i).map(Token::text).unwrap_or_else(|| "<end>".into()),
        reason: reason.to_string(),
    };
    let word = |i: usize| match tokens.get(i) {
        Some(Token::Word(w)) => Some(w.as_str()),
        _ => None,
    };

    let mut clauses = Vec::new();
    let mut i = 0;
    loop {
        let size = word(i)
            .and_then(SizeWord::parse)
            .ok_or_else(|| err(i, "expected size word"))?;
        let color = word(i + 1)
            .filter(|w| NAMED_COLORS.iter().any(|(n, _)| n == w))
            .ok_or_else(|| err(i + 1, "expected color name"))?
            .to_string();
        let role = word(i + 2)
            .and_then(SpanRole::parse)
            .ok_or_else(|| err(i + 2, "expected role"))?;
        if word(i + 3) != Some("text") {
            return Err(err(i + 3, "expected 'text'"));
        }
        let content = match tokens.get(i + 4) {
            Some(Token::Quoted(q)) => q.clone(),
            _ => return Err(err(i + 4, "expected quoted content")),
        };
        if word(i + 5) != Some("at") {
            return Err(err(i + 5, "expected 'at'"));
        }
        i += 6;
        let (position, used) = match (word(i), word(i + 1)) {
            (Some(r @ ("top" | "bottom")), Some(c @ ("left" | "right"))) => (
                Position {
                    row: if r == "top" { Row::Top } else { Row::Bottom },
                    col: if c == "left" { Column::Left } else { Column::Right },
                },
                2,
            ),
            (Some(w), _) => {
                let p = match w {
                    "top" => (Row::Top, Column::Center),
                    "bottom" => (Row::Bottom, Column::Center),
                    "left" => (Row::Middle, Column::Left),
                    "right" => (Row::Middle, Column::Right),
                    "center" => (Row::Middle, Column::Center),
                    _ => return Err(err(i, "expected position")),
                };
                (Position { row: p.0, col: p.1 }, 1)
            }
            _ => return Err(err(i, "expected position")),
        };
        i += used;
        clauses.push(GlyphClause {
            size,
            color,
            role,
            content,
            position,
        });
        match tokens.get(i) {
            None => break,
            Some(Token::Comma) => i += 1,
            Some(_) => return Err(err(i, "expected ',' or end of caption")),
        }
    }
    Ok(clauses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcorpus::{Background, ShapeKind, Subject, TextSpan};
    use proptest::prelude::*;

    fn record(spans: Vec<TextSpan>, class: LayoutClass) -> PosterRecord {
        PosterRecord {
            id: "c".into(),
            width: 96,
            height: 96,
            background: Background::Solid { color: [0, 0, 0] },
            subject: Some(Subject {
                kind: ShapeKind::Circle,
                bbox: Rect::new(30, 40, 30, 30),
                color: [255, 255, 255],
            }),
            spans,
            layout_class: class,
            seed: 0,
        }
    }

    fn span(content: &str, bbox: Rect, scale: u32, color: [u8; 3], role: SpanRole) -> TextSpan {
        TextSpan {
            content: content.into(),
            bbox,
            fill_color: color,
            scale,
            role,
        }
    }

    #[test]
    fn zero_spans_is_no_text() {
        let r = record(vec![], LayoutClass::Symmetric);
        assert_eq!(caption_glyph(&r), "no text");
        assert!(parse_caption("no text").unwrap().is_empty());
    }

    #[test]
    fn large_red_title_at_top() {
        // centroid (48, 12) on 96x96: column 1 of 3, row 0 of 3
        let r = record(
            vec![span("SALE", Rect::new(0, 0, 96, 24), 3, [220, 40, 40], SpanRole::Title)],
            LayoutClass::Symmetric,
        );
        assert_eq!(caption_glyph(&r), "large red title text 'SALE' at top");
        assert_eq!(caption_glyph(&r), caption_glyph(&r));
    }

    #[test]
    fn layout_caption_shape() {
        let r = record(
            vec![span("SALE", Rect::new(32, 0, 32, 8), 1, [220, 40, 40], SpanRole::Title)],
            LayoutClass::Symmetric,
        );
        let c = caption_layout(&r);
        assert!(c.contains("The main title reads 'SALE'"), "{c}");
        assert!(c.ends_with("The composition is symmetrical."), "{c}");
        assert!(!c.contains("subtitle"));
        assert!(c.starts_with("A poster featuring a circle as the main subject."));

        let mut r2 = r.clone();
        r2.layout_class = LayoutClass::LeftAligned;
        r2.spans.push(span("NOW", Rect::new(8, 80, 24, 8), 1, [0, 0, 0], SpanRole::Subtitle));
        let c = caption_layout(&r2);
        assert!(c.contains("The composition is left-aligned."), "{c}");
        assert!(c.contains("the subtitle says 'NOW'"), "{c}");
    }

    #[test]
    fn corrupted_token_is_located() {
        let r = record(
            vec![
                span("SALE", Rect::new(32, 0, 32, 8), 1, [220, 40, 40], SpanRole::Title),
                span("BUY 1+1", Rect::new(0, 88, 56, 8), 1, [0, 0, 0], SpanRole::Subtitle),
            ],
            LayoutClass::LeftAligned,
        );
        let caption = caption_glyph(&r);
        assert_eq!(
            caption,
            "small red title text 'SALE' at top, small black subtitle text 'BUY 1+1' at bottom left"
        );
        // tokens: 0 small 1 red 2 title 3 text 4 'SALE' 5 at 6 top 7 , 8 small 9 black ...
        let bad = caption.replace("black", "teal");
        match parse_caption(&bad).unwrap_err() {
            Error::CaptionParse { index, token, .. } => {
                assert_eq!(index, 9);
                assert_eq!(token, "teal");
            }
            e => panic!("{e}"),
        }
        let bad = caption.replace(" at top", " on top");
        match parse_caption(&bad).unwrap_err() {
            Error::CaptionParse { index, .. } => assert_eq!(index, 5),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn position_words_collapse_on_center_axes() {
        let p = |row, col| Position { row, col }.words();
        assert_eq!(p(Row::Middle, Column::Center), "center");
        assert_eq!(p(Row::Top, Column::Center), "top");
        assert_eq!(p(Row::Middle, Column::Right), "right");
        assert_eq!(p(Row::Bottom, Column::Left), "bottom left");
    }

    proptest! {
        #[test]
        fn round_trip_on_random_spans(
            x in 0u32..64, y in 0u32..80, scale in 1u32..4,
            color in proptest::array::uniform3(any::<u8>()),
            text in "[A-Z0-9][A-Z0-9 !&%+.?-]{0,5}",
            role in prop_oneof![Just(SpanRole::Title), Just(SpanRole::Subtitle), Just(SpanRole::Body)],
        ) {
            let w = text.chars().count() as u32 * 8;
            let r = record(vec![span(&text, Rect::new(x, y, w, 8), scale, color, role)], LayoutClass::Symmetric);
            prop_assert_eq!(parse_caption(&caption_glyph(&r)).unwrap(), quantize_spans(&r));
        }
    }
}
