//! Reverse-engineers filtered posters into (source, target) training pairs.

mod inpaint;
mod prompt;
mod segment;

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use inpaint::{build_text_mask, inpaint, inpaint_field, TextMask};
pub use prompt::{extract_source_prompt, role_name, PromptTask};
pub use segment::{segment_by_color, segment_subject, SegmentSource, SubjectMask};

use crate::captioner::{Captioner, GrammarCaptioner};
use crate::color::contrast;
use crate::error::{Error, Result};
use crate::filtering::DetectedSpan;
use crate::font::GlyphFont;
use crate::imaging::{load_png, save_png, Image};
use crate::synthcorpus::{
    layout_poster, render_with, rerender_at_ratio, Background, CorpusConfig, PosterContent,
    PosterRecord, SpanRole,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TextAddition,
    TextModification,
    TextDeletion,
    MultiAspect,
    Restyle,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::TextAddition,
        TaskKind::TextModification,
        TaskKind::TextDeletion,
        TaskKind::MultiAspect,
        TaskKind::Restyle,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::TextAddition => "text_addition",
            TaskKind::TextModification => "text_modification",
            TaskKind::TextDeletion => "text_deletion",
            TaskKind::MultiAspect => "multi_aspect",
            TaskKind::Restyle => "restyle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

/// Image references are paths relative to the directory holding
/// `pairs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub pair_id: String,
    pub task: TaskKind,
    pub source_image: String,
    pub target_image: String,
    pub instruction: String,
    pub glyph_caption: String,
    pub layout_caption: String,
    pub source_dims: (u32, u32),
    pub target_dims: (u32, u32),
    /// Aesthetic score of the poster the pair was built from.
    pub aesthetic_score: f64,
}

impl TrainingPair {
    pub fn validate(&self) -> Result<()> {
        let bad = |inv: &str| Err(Error::invalid_record(&self.pair_id, inv));
        if self.instruction.is_empty() {
            return bad("instruction is empty");
        }
        let same = self.source_dims == self.target_dims;
        match (self.task, same) {
            (TaskKind::MultiAspect, true) => bad("multi_aspect pair keeps the source dims"),
            (TaskKind::MultiAspect, false) | (_, true) => Ok(()),
            (_, false) => bad("source and target dims differ"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub tasks: Vec<TaskKind>,
    pub dilation: u32,
    pub epsilon: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Attempts at finding a palette permutation that keeps the contrast floor.
    pub restyle_attempts: u32,
    pub corpus: CorpusConfig,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            tasks: TaskKind::ALL.to_vec(),
            dilation: 2,
            epsilon: 0.5 / 255.0,
            max_iters: 2000,
            seed: 0,
            restyle_attempts: 64,
            corpus: CorpusConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PairArtifact {
    pub pair: TrainingPair,
    pub source: Image,
    pub target: Image,
}

#[derive(Debug, Clone, Default)]
pub struct PairReport {
    pub pairs: Vec<PairArtifact>,
    /// `(pair id, reason)` for every task that produced no pair.
    pub skipped: Vec<(String, String)>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn task_rng(cfg: &PairConfig, record: &PosterRecord, task: TaskKind) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(&record.id));
    rng.set_stream(task as u64);
    rng
}

fn strip_text(record: &PosterRecord) -> PosterRecord {
    PosterRecord {
        spans: Vec::new(),
        ..record.clone()
    }
}

fn modify_text(
    record: &PosterRecord,
    cfg: &PairConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PosterRecord, Image, usize, String)> {
    if record.spans.is_empty() {
        return Err(Error::InvalidArgument("record has no text to modify".into()));
    }
    let index = rng.random_range(0..record.spans.len());
    let span = &record.spans[index];
    let pool = match span.role {
        SpanRole::Title => &cfg.corpus.titles,
        SpanRole::Subtitle => &cfg.corpus.subtitles,
        SpanRole::Body => &cfg.corpus.bodies,
    };
    let mut words: Vec<&String> = pool.iter().filter(|w| **w != span.content).collect();
    words.shuffle(rng);
    let mut last = Error::InvalidArgument("replacement word list is empty".into());
    for word in words {
        let mut content = PosterContent::from_record(record);
        content.spans[index].content = word.clone();
        let (w, h) = record.dims();
        match layout_poster(&content, &record.id, w, h, record.seed, &cfg.corpus) {
            Ok(out) => {
                let img = render_with(&out, &GlyphFont::builtin(), &cfg.corpus.rules)?;
                return Ok((out, img, index, word.clone()));
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn restyle(record: &PosterRecord, cfg: &PairConfig, rng: &mut ChaCha8Rng) -> Result<(PosterRecord, Image)> {
    let mut palette: Vec<[u8; 3]> = record.background.colors();
    palette.extend(record.subject.map(|s| s.color));
    palette.extend(record.spans.iter().map(|s| s.fill_color));
    palette.sort();
    palette.dedup();
    if palette.len() < 2 {
        return Err(Error::InvalidArgument("palette has a single colour".into()));
    }
    let font = GlyphFont::builtin();
    let rules = &cfg.corpus.rules;
    for _ in 0..cfg.restyle_attempts {
        let mut perm = palette.clone();
        perm.shuffle(rng);
        if perm == palette {
            continue;
        }
        let map = |c: [u8; 3]| perm[palette.binary_search(&c).expect("colour is in the palette")];
        let mut out = record.clone();
        out.background = match record.background {
            Background::Solid { color } => Background::Solid { color: map(color) },
            Background::Gradient { top, bottom } => Background::Gradient {
                top: map(top),
                bottom: map(bottom),
            },
        };
        if let Some(s) = out.subject.as_mut() {
            s.color = map(s.color);
        }
        for s in &mut out.spans {
            s.fill_color = map(s.fill_color);
        }
        let subject_visible = out.subject.is_none_or(|s| {
            (s.bbox.y..s.bbox.bottom()).all(|y| {
                contrast(s.color, out.background.at_row(y, out.height)) >= cfg.corpus.subject_contrast
            })
        });
        if subject_visible && out.validate(&font, rules).is_ok() {
            let img = render_with(&out, &font, rules)?;
            return Ok((out, img));
        }
    }
    Err(Error::InvalidArgument(format!(
        "no palette permutation in {} attempts keeps the contrast floor",
        cfg.restyle_attempts
    )))
}

fn multi_aspect(record: &PosterRecord, cfg: &PairConfig, rng: &mut ChaCha8Rng) -> Result<(PosterRecord, Image)> {
    let mut buckets: Vec<(u32, u32)> = cfg
        .corpus
        .buckets
        .iter()
        .copied()
        .filter(|&b| b != record.dims())
        .collect();
    buckets.shuffle(rng);
    let mut last = Error::InvalidArgument("no other size bucket configured".into());
    for b in buckets {
        match rerender_at_ratio(record, b, &cfg.corpus) {
            Ok(out) => return Ok(out),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Builds every configured task's pair for one filtered poster.
///
/// `ocr` is the poster's OCR output in reading order and `aesthetic` its
/// filter score. A task that cannot be built is skipped with its reason;
/// it never aborts the other tasks.
pub fn make_pairs(
    record: &PosterRecord,
    image: &Image,
    ocr: &[DetectedSpan],
    aesthetic: f64,
    cfg: &PairConfig,
) -> PairReport {
    let mut report = PairReport::default();
    if ocr.is_empty() {
        report
            .skipped
            .push((record.id.clone(), "poster has no detected text".into()));
        return report;
    }
    let captioner = GrammarCaptioner;
    let dims = record.dims();
    let mask = build_text_mask(ocr, dims, cfg.dilation);
    let background = inpaint(image, &mask.mask, cfg.epsilon, cfg.max_iters);
    let inpainted = || match &background {
        Ok(bg) => Ok(bg.clone()),
        Err(e) => Err(Error::InvalidArgument(e.to_string())),
    };

    for &task in &cfg.tasks {
        let pair_id = format!("{}-{}", record.id, task.as_str());
        let mut rng = task_rng(cfg, record, task);
        let built: Result<(Image, Image, PosterRecord, PromptTask)> = match task {
            TaskKind::TextAddition => inpainted()
                .map(|bg| (bg, image.clone(), record.clone(), PromptTask::TextAddition)),
            TaskKind::TextDeletion => inpainted()
                .map(|bg| (image.clone(), bg, strip_text(record), PromptTask::TextDeletion)),
            TaskKind::TextModification => modify_text(record, cfg, &mut rng).map(|(r, img, index, new)| {
                // Reading order of OCR matches the record's span order.
                (image.clone(), img, r, PromptTask::TextModification { index, new })
            }),
            TaskKind::MultiAspect => multi_aspect(record, cfg, &mut rng).map(|(r, img)| {
                let (width, height) = r.dims();
                (image.clone(), img, r, PromptTask::MultiAspect { width, height })
            }),
            TaskKind::Restyle => {
                restyle(record, cfg, &mut rng).map(|(r, img)| (image.clone(), img, r, PromptTask::Restyle))
            }
        };
        let (source, target, target_record, prompt) = match built {
            Ok(b) => b,
            Err(e) => {
                log::debug!("skipping {pair_id}: {e}");
                report.skipped.push((pair_id, e.to_string()));
                continue;
            }
        };
        let captions = match captioner.caption(&target_record) {
            Ok(c) => c,
            Err(e) => {
                report.skipped.push((pair_id, e.to_string()));
                continue;
            }
        };
        let pair = TrainingPair {
            source_image: format!("images/{pair_id}.source.png"),
            target_image: format!("images/{pair_id}.target.png"),
            pair_id,
            task,
            instruction: extract_source_prompt(ocr, &prompt),
            glyph_caption: captions.glyph_caption,
            layout_caption: captions.layout_caption,
            source_dims: source.dimensions(),
            target_dims: target.dimensions(),
            aesthetic_score: aesthetic,
        };
        report.pairs.push(PairArtifact { pair, source, target });
    }
    report
}

/// Writes `pairs.jsonl` plus the referenced PNGs under `dir`.
pub fn write_pairs(dir: &Path, pairs: &[PairArtifact]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("pairs.jsonl");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for a in pairs {
        serde_json::to_writer(&mut out, &a.pair)?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        save_png(&a.source, &dir.join(&a.pair.source_image))?;
        save_png(&a.target, &dir.join(&a.pair.target_image))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<TrainingPair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            pairs.push(serde_json::from_str(&line)?);
        }
    }
    Ok(pairs)
}

/// Loads a pair's images, resolving references against `root`.
pub fn load_pair_images(root: &Path, pair: &TrainingPair) -> Result<(Image, Image)> {
    Ok((
        load_png(&root.join(&pair.source_image))?,
        load_png(&root.join(&pair.target_image))?,
    ))
}
