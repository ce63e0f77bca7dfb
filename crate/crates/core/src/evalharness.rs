//! Automatic proxies for prompt following, subject preservation and design
//! sense, study-rate formulas over per-sample issue counts, and min-max
//! normalized radar data.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{run_ocr, DetectedSpan};
use crate::imaging::{BinaryMask, Image, Rect};

pub const RADAR_AXES: [&str; 5] = [
    "prompt_following",
    "subject_preservation",
    "design_sense",
    "usability_rate",
    "satisfaction_rate",
];

/// Spans closer than this to a shared edge or centre line count as aligned.
pub const ALIGN_TOLERANCE: f64 = 2.0;
pub const MARGIN_FRACTION: f64 = 0.02;
pub const DEFAULT_ISSUE_THRESHOLD: u32 = 3;

/// Mean over requested strings of the best normalized edit similarity
/// against any detected string.
pub fn prompt_following_spans(detected: &[DetectedSpan], requested: &[String]) -> f64 {
    if requested.is_empty() || detected.is_empty() {
        return 0.0;
    }
    let best = |r: &String| {
        detected
            .iter()
            .map(|d| strsim::normalized_levenshtein(r, &d.text))
            .fold(0.0, f64::max)
    };
    requested.iter().map(best).sum::<f64>() / requested.len() as f64
}

pub fn prompt_following(output: &Image, requested: &[String]) -> f64 {
    prompt_following_spans(&run_ocr(output), requested)
}

/// Best agreement between the masked subject of `cond` and `output` over
/// translations by whole multiples of `stride`. Shifts that push the
/// subject's bounding box outside `output` are not considered; if none
/// remain the score is 0.
pub fn subject_preservation(cond: &Image, output: &Image, mask: &BinaryMask, stride: u32) -> Result<f64> {
    let bounds = mask
        .bounds()
        .ok_or_else(|| Error::InvalidArgument("subject mask is empty".into()))?;
    if mask.width != cond.width() || mask.height != cond.height() {
        return Err(Error::Shape("subject mask does not match the condition image".into()));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("shift stride must be positive".into()));
    }
    let (ow, oh) = output.dimensions();
    let offsets = |start: u32, end: u32, limit: u32| -> Vec<i64> {
        let s = stride as i64;
        let lo = -(start as i64 / s);
        (lo..).take_while(|k| end as i64 + k * s <= limit as i64).map(|k| k * s).collect()
    };
    let xs = offsets(bounds.x, bounds.right(), ow);
    let ys = offsets(bounds.y, bounds.bottom(), oh);
    let pixels: Vec<(u32, u32)> = (bounds.y..bounds.bottom())
        .flat_map(|y| (bounds.x..bounds.right()).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(x, y))
        .collect();
    let denom = 255.0 * 3.0 * pixels.len() as f64;
    let mut best = 0.0f64;
    for &dy in &ys {
        for &dx in &xs {
            let diff: u64 = pixels
                .iter()
                .map(|&(x, y)| {
                    let a = cond.get_pixel(x, y).0;
                    let b = output.get_pixel((x as i64 + dx) as u32, (y as i64 + dy) as u32).0;
                    (0..3).map(|c| a[c].abs_diff(b[c]) as u64).sum::<u64>()
                })
                .sum();
            best = best.max(1.0 - diff as f64 / denom);
        }
    }
    Ok(best)
}

/// `0.5 * alignment + 0.5 * margin`; zero spans score 0.
pub fn design_sense(spans: &[Rect], width: u32, height: u32) -> f64 {
    if spans.is_empty() {
        return 0.0;
    }
    let n = spans.len() as f64;
    let lines: [fn(&Rect) -> f64; 3] = [
        |r| r.x as f64,
        |r| r.x as f64 + r.w as f64 / 2.0,
        |r| r.right() as f64,
    ];
    let alignment = lines
        .iter()
        .flat_map(|line| {
            spans.iter().map(move |anchor| {
                let a = line(anchor);
                spans.iter().filter(|s| (line(s) - a).abs() <= ALIGN_TOLERANCE).count()
            })
        })
        .max()
        .unwrap_or(0) as f64
        / n;
    let (mx, my) = (MARGIN_FRACTION * width as f64, MARGIN_FRACTION * height as f64);
    let inside = spans
        .iter()
        .filter(|r| {
            r.x as f64 >= mx
                && r.y as f64 >= my
                && (width as f64 - r.right() as f64) >= mx
                && (height as f64 - r.bottom() as f64) >= my
        })
        .count() as f64
        / n;
    0.5 * alignment + 0.5 * inside
}

fn check_counts(counts: &[u32]) -> Result<()> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("issue count list is empty".into()));
    }
    Ok(())
}

/// Fraction of results with fewer than `k` issues.
pub fn usability_rate(counts: &[u32], k: u32) -> Result<f64> {
    check_counts(counts)?;
    Ok(counts.iter().filter(|&&c| c < k).count() as f64 / counts.len() as f64)
}

/// Fraction of results with no issues at all.
pub fn satisfaction_rate(counts: &[u32]) -> Result<f64> {
    check_counts(counts)?;
    Ok(counts.iter().filter(|&&c| c == 0).count() as f64 / counts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub usability_rate: f64,
    pub satisfaction_rate: f64,
    pub issue_counts: Vec<u32>,
}

pub fn study_report(counts: Vec<u32>, k: u32) -> Result<StudyReport> {
    Ok(StudyReport {
        usability_rate: usability_rate(&counts, k)?,
        satisfaction_rate: satisfaction_rate(&counts)?,
        issue_counts: counts,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueAnnotation {
    pub id: String,
    pub issues: u32,
}

/// Reads `{"id": ..., "issues": n}` lines.
pub fn read_issue_counts(path: &Path) -> Result<Vec<IssueAnnotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub prompt_following: f64,
    pub subject_preservation: f64,
    pub design_sense: f64,
    pub detected: Vec<String>,
    /// Automatic stand-in for an annotator's issue count.
    pub issues: u32,
}

/// One generated poster to score.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub output: Image,
    pub cond: Image,
    pub subject: BinaryMask,
    pub requested: Vec<String>,
}

/// Issue proxy: one per requested string not reproduced exactly, one for a
/// subject score below 0.9 and one for a design score below 0.5.
pub fn proxy_issues(detected: &[DetectedSpan], requested: &[String], subject: f64, design: f64) -> u32 {
    let missing = requested.iter().filter(|r| !detected.iter().any(|d| &d.text == *r)).count() as u32;
    missing + u32::from(subject < 0.9) + u32::from(design < 0.5)
}

pub fn score_item(item: &EvalItem, stride: u32) -> Result<SampleScore> {
    let detected = run_ocr(&item.output);
    let pf = prompt_following_spans(&detected, &item.requested);
    let sp = subject_preservation(&item.cond, &item.output, &item.subject, stride)?;
    let rects: Vec<Rect> = detected.iter().map(|d| d.bbox).collect();
    let (w, h) = item.output.dimensions();
    let ds = design_sense(&rects, w, h);
    Ok(SampleScore {
        id: item.id.clone(),
        prompt_following: pf,
        subject_preservation: sp,
        design_sense: ds,
        issues: proxy_issues(&detected, &item.requested, sp, ds),
        detected: detected.into_iter().map(|d| d.text).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub prompt_following: f64,
    pub subject_preservation: f64,
    pub design_sense: f64,
    pub study: StudyReport,
    pub samples: Vec<SampleScore>,
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleScore>, k: u32) -> Result<Self> {
        let n = samples.len() as f64;
        let mean = |f: fn(&SampleScore) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            prompt_following: mean(|s| s.prompt_following),
            subject_preservation: mean(|s| s.subject_preservation),
            design_sense: mean(|s| s.design_sense),
            study: study_report(samples.iter().map(|s| s.issues).collect(), k)?,
            samples,
        })
    }

    pub fn axes(&self) -> [f64; 5] {
        [
            self.prompt_following,
            self.subject_preservation,
            self.design_sense,
            self.study.usability_rate,
            self.study.satisfaction_rate,
        ]
    }
}

/// Scores items in parallel; the report keeps input order.
pub fn evaluate(items: &[EvalItem], stride: u32) -> Result<MetricReport> {
    let samples = items.par_iter().map(|it| score_item(it, stride)).collect::<Result<Vec<_>>>()?;
    MetricReport::from_samples(samples, DEFAULT_ISSUE_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarData {
    pub axes: Vec<String>,
    pub models: Vec<String>,
    pub raw: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
}

/// Per-axis min-max normalization; an axis where every model agrees maps
/// to 1 for all of them.
pub fn emit_radar(reports: &[(String, [f64; 5])]) -> Result<RadarData> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument("a radar chart needs at least two models".into()));
    }
    let mut normalized = vec![vec![0.0; 5]; reports.len()];
    for a in 0..5 {
        let vals: Vec<f64> = reports.iter().map(|r| r.1[a]).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (row, v) in normalized.iter_mut().zip(vals) {
            row[a] = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
        }
    }
    Ok(RadarData {
        axes: RADAR_AXES.iter().map(|s| s.to_string()).collect(),
        models: reports.iter().map(|r| r.0.clone()).collect(),
        raw: reports.iter().map(|r| r.1.to_vec()).collect(),
        normalized,
    })
}

/// Published human-study figures, for display next to local results.
/// Never used as test expectations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub model: &'static str,
    pub usability_pct: f64,
    pub prompt_following_of5: Option<f64>,
    pub subject_preservation_of5: Option<f64>,
    pub design_sense_of5: Option<f64>,
}

pub const REFERENCE_TABLE: [ReferenceRow; 3] = [
    ReferenceRow {
        model: "reference system",
        usability_pct: 88.55,
        prompt_following_of5: Some(3.88),
        subject_preservation_of5: Some(3.38),
        design_sense_of5: Some(3.19),
    },
    ReferenceRow {
        model: "GPT-4o",
        usability_pct: 47.56,
        prompt_following_of5: None,
        subject_preservation_of5: None,
        design_sense_of5: None,
    },
    ReferenceRow {
        model: "SeedEdit3.0",
        usability_pct: 25.96,
        prompt_following_of5: None,
        subject_preservation_of5: None,
        design_sense_of5: None,
    },
];
