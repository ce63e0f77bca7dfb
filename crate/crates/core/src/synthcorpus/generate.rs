use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layout::{layout_poster, PosterContent, SpanContent, SubjectContent};
use super::{render_with, Background, LayoutClass, PosterRecord, RecordRules, ShapeKind, SpanRole};
use crate::color::{contrast, NAMED_COLORS};
use crate::error::{Error, Result};
use crate::font::GlyphFont;
use crate::imaging::{save_png, Image};

pub const DEFAULT_BUCKETS: [(u32, u32); 4] = [(64, 64), (64, 96), (96, 64), (48, 96)];

const TITLES: &[&str] = &[
    "SALE", "NEW", "HOT", "TOY", "BUY", "FREE", "OPEN", "JAZZ", "ART", "FUN", "TEA", "FOOD",
    "GIFT", "MEGA", "DEAL", "SHOW", "LIVE", "CLUB", "CAFE", "BOOK", "GAME", "RUN", "SKY", "SUN",
    "50%", "WIN", "GO!", "TOP", "BIG", "JOY", "POP", "ROCK", "FEST", "YOGA", "MENU", "BAKE",
    "SURF", "FILM", "TECH", "EXPO",
];

const SUBTITLES: &[&str] = &[
    "NOW", "TODAY", "LIMITED", "FOR KIDS", "ALL DAY", "10% OFF", "NEW IN", "BIG DEAL", "2 FOR 1",
    "OPEN NOW", "HURRY!", "LAST DAY", "JOIN US", "BUY 1+1", "WEEKEND", "ONLINE",
];

const BODIES: &[&str] = &[
    "FRI 8PM", "MAIN ST", "JUNE 5", "ENTRY", "SAT", "9-5", "CITY", "ROOM 4", "2026", "MAY 1",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub buckets: Vec<(u32, u32)>,
    /// Model patch size; every bucket side must be a multiple of it.
    pub patch: u32,
    /// Grid that span origins snap to.
    pub align: u32,
    pub margin: u32,
    pub min_subject: u32,
    /// Clearance between the subject and the left/right canvas edges.
    pub subject_pad: u32,
    pub max_title_scale: u32,
    /// Smallest title scale used whenever the title fits at it.
    pub min_title_scale: u32,
    /// Luminance contrast floor between the subject and the background.
    pub subject_contrast: f64,
    pub max_retries: u32,
    pub gradient_prob: f64,
    pub subtitle_prob: f64,
    pub body_prob: f64,
    pub rules: RecordRules,
    pub titles: Vec<String>,
    pub subtitles: Vec<String>,
    pub bodies: Vec<String>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            buckets: DEFAULT_BUCKETS.to_vec(),
            patch: 8,
            align: 8,
            margin: 8,
            min_subject: 16,
            subject_pad: 4,
            max_title_scale: 3,
            min_title_scale: 2,
            subject_contrast: 0.5,
            max_retries: 100,
            gradient_prob: 0.5,
            subtitle_prob: 0.8,
            body_prob: 0.5,
            rules: RecordRules::default(),
            titles: own(TITLES),
            subtitles: own(SUBTITLES),
            bodies: own(BODIES),
        }
    }
}

impl CorpusConfig {
    pub fn check(&self) -> Result<()> {
        if self.buckets.is_empty() {
            return Err(Error::InvalidArgument("no size buckets configured".into()));
        }
        for &(w, h) in &self.buckets {
            if w == 0 || h == 0 || w % self.patch != 0 || h % self.patch != 0 {
                return Err(Error::InvalidArgument(format!(
                    "bucket {w}x{h} is not divisible by patch size {}",
                    self.patch
                )));
            }
        }
        if self.align == 0 || self.margin % self.align != 0 {
            return Err(Error::InvalidArgument("margin must be a multiple of align".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub record: PosterRecord,
    pub image: Image,
}

#[derive(Debug, Clone, Default)]
pub struct GenerateReport {
    pub items: Vec<CorpusItem>,
    /// `(record index, last failure)` for records that never found a layout.
    pub skipped: Vec<(usize, String)>,
}

/// Per-record generator: stream `index` of a ChaCha8 keyed by `seed`, so
/// records can be built in any order and still come out identical.
fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn random_color(rng: &mut impl Rng) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn contrasts_everywhere(fill: [u8; 3], bg: &Background, height: u32, min: f64) -> bool {
    (0..height).all(|y| contrast(fill, bg.at_row(y, height)) >= min)
}

fn sample_content(
    rng: &mut ChaCha8Rng,
    width: u32,
    height: u32,
    cfg: &CorpusConfig,
    font: &GlyphFont,
) -> Option<PosterContent> {
    let layout_class = LayoutClass::ALL[rng.random_range(0..3)];
    let background = if rng.random_bool(cfg.gradient_prob) {
        Background::Gradient {
            top: random_color(rng),
            bottom: random_color(rng),
        }
    } else {
        Background::Solid {
            color: random_color(rng),
        }
    };
    let usable = width - 2 * cfg.margin;
    let fits = |s: &String, scale: u32| font.extent(s.chars().count(), scale).0 <= usable;
    let pick = |rng: &mut ChaCha8Rng, pool: &[String]| -> Option<String> {
        let ok: Vec<&String> = pool.iter().filter(|s| fits(s, 1)).collect();
        (!ok.is_empty()).then(|| ok[rng.random_range(0..ok.len())].clone())
    };

    let text_colors: Vec<[u8; 3]> = NAMED_COLORS
        .iter()
        .map(|(_, c)| *c)
        .filter(|&c| contrasts_everywhere(c, &background, height, cfg.rules.min_contrast))
        .collect();
    if text_colors.is_empty() {
        return None;
    }
    let span = |rng: &mut ChaCha8Rng, content: String, role: SpanRole, scale: u32| SpanContent {
        content,
        role,
        scale,
        fill_color: text_colors[rng.random_range(0..text_colors.len())],
    };

    let title = pick(rng, &cfg.titles)?;
    let mut scales: Vec<u32> = (1..=cfg.max_title_scale).filter(|&s| fits(&title, s)).collect();
    if scales.iter().any(|&s| s >= cfg.min_title_scale) {
        scales.retain(|&s| s >= cfg.min_title_scale);
    }
    let title_scale = scales[rng.random_range(0..scales.len())];
    let mut spans = vec![span(rng, title, SpanRole::Title, title_scale)];
    if rng.random_bool(cfg.subtitle_prob) {
        if let Some(sub) = pick(rng, &cfg.subtitles) {
            spans.push(span(rng, sub, SpanRole::Subtitle, 1));
        }
    }
    if rng.random_bool(cfg.body_prob) {
        if let Some(body) = pick(rng, &cfg.bodies) {
            spans.push(span(rng, body, SpanRole::Body, 1));
        }
    }

    let subject_colors: Vec<[u8; 3]> = NAMED_COLORS
        .iter()
        .map(|(_, c)| *c)
        .filter(|&c| contrasts_everywhere(c, &background, height, cfg.subject_contrast))
        .collect();
    if subject_colors.is_empty() {
        return None;
    }
    let subject = SubjectContent {
        kind: ShapeKind::ALL[rng.random_range(0..3)],
        color: subject_colors[rng.random_range(0..subject_colors.len())],
    };
    Some(PosterContent {
        background,
        subject: Some(subject),
        spans,
        layout_class,
    })
}

fn generate_one(seed: u64, index: usize, cfg: &CorpusConfig, font: &GlyphFont) -> Result<CorpusItem, String> {
    let mut rng = record_rng(seed, index);
    let (w, h) = cfg.buckets[rng.random_range(0..cfg.buckets.len())];
    let id = format!("poster-{index:05}");
    let mut last = String::from("no attempts");
    for _ in 0..cfg.max_retries.max(1) {
        let Some(content) = sample_content(&mut rng, w, h, cfg, font) else {
            last = "no colour satisfies the contrast floor".into();
            continue;
        };
        let layout_seed = rng.next_u64();
        match layout_poster(&content, &id, w, h, layout_seed, cfg) {
            Ok(record) => {
                let image = render_with(&record, font, &cfg.rules).map_err(|e| e.to_string())?;
                return Ok(CorpusItem { record, image });
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(last)
}

/// Generates `count` posters. Output order is by record index regardless of
/// how the work was scheduled.
pub fn generate_corpus(seed: u64, count: usize, cfg: &CorpusConfig) -> Result<GenerateReport> {
    cfg.check()?;
    let font = GlyphFont::builtin();
    let results: Vec<_> = (0..count)
        .into_par_iter()
        .map(|i| generate_one(seed, i, cfg, &font))
        .collect();
    let mut report = GenerateReport::default();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(item) => report.items.push(item),
            Err(reason) => {
                log::warn!("record {i} skipped: {reason}");
                report.skipped.push((i, reason));
            }
        }
    }
    Ok(report)
}

/// Writes `manifest.jsonl` and one `<id>.png` per record into `dir`.
pub fn write_corpus(dir: &Path, items: &[CorpusItem]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("manifest.jsonl");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, &item.record)?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        save_png(&item.image, &dir.join(format!("{}.png", item.record.id)))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<PosterRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_manifest() {
        let cfg = CorpusConfig::default();
        let a = generate_corpus(7, 3, &cfg).unwrap();
        let b = generate_corpus(7, 3, &cfg).unwrap();
        let recs = |r: &GenerateReport| r.items.iter().map(|i| i.record.clone()).collect::<Vec<_>>();
        assert_eq!(recs(&a), recs(&b));
        assert_eq!(a.items.len(), 3);
    }

    #[test]
    fn zero_count_is_empty() {
        let r = generate_corpus(1, 0, &CorpusConfig::default()).unwrap();
        assert!(r.items.is_empty() && r.skipped.is_empty());
    }

    #[test]
    fn indivisible_bucket_rejected() {
        let cfg = CorpusConfig {
            buckets: vec![(60, 64)],
            ..Default::default()
        };
        assert!(generate_corpus(1, 1, &cfg).is_err());
    }

    #[test]
    fn generated_records_are_valid() {
        let cfg = CorpusConfig::default();
        let font = GlyphFont::builtin();
        let r = generate_corpus(11, 200, &cfg).unwrap();
        assert!(r.skipped.is_empty(), "{:?}", r.skipped);
        for item in &r.items {
            item.record.validate(&font, &cfg.rules).unwrap();
            assert_eq!(item.image.dimensions(), item.record.dims());
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = generate_corpus(3, 4, &CorpusConfig::default()).unwrap();
        write_corpus(dir.path(), &r.items).unwrap();
        let back = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back, r.items.iter().map(|i| i.record.clone()).collect::<Vec<_>>());
        for item in &r.items {
            let img = crate::imaging::load_png(&dir.path().join(format!("{}.png", item.record.id))).unwrap();
            assert_eq!(img, item.image);
        }
    }

    #[test]
    fn bucket_frequencies_near_uniform() {
        let buckets = vec![(64, 64), (64, 96), (96, 64)];
        let cfg = CorpusConfig {
            buckets: buckets.clone(),
            ..Default::default()
        };
        let r = generate_corpus(5, 1000, &cfg).unwrap();
        let n = r.items.len() as f64;
        // binomial: mean n/3, sd sqrt(n * 1/3 * 2/3)
        let sd = (n * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for b in buckets {
            let k = r.items.iter().filter(|i| i.record.dims() == b).count() as f64;
            assert!((k - n / 3.0).abs() <= 3.0 * sd, "{b:?}: {k} of {n}");
        }
    }
}
