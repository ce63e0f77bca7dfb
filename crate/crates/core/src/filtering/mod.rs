//! Two-gate curation filter: images without recognizable text are dropped,
//! then images scoring below an aesthetic threshold.

mod aesthetic;
mod ocr;

use serde::{Deserialize, Serialize};

pub use aesthetic::{aesthetic_score, AestheticReport, AestheticWeights};
pub use ocr::{run_ocr, DetectedSpan, HttpOcr, OcrBackend, TemplateOcr, TemplateOcrConfig};

use crate::error::{Error, Result};
use crate::imaging::Image;

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Ok,
    NoText,
    LowAesthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub reason: FilterReason,
    pub report: AestheticReport,
    pub ocr: Vec<DetectedSpan>,
}

/// Applies both gates. Rejection on aesthetics is strict: a score equal to
/// `tau` is kept.
pub fn filter_record(
    image: &Image,
    tau: f64,
    ocr: &dyn OcrBackend,
    weights: &AestheticWeights,
) -> Result<FilterDecision> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    let spans = ocr.recognize(image)?;
    let report = aesthetic_score(image, &spans, weights)?;
    Ok(decide(spans, report, tau))
}

pub(crate) fn decide(ocr: Vec<DetectedSpan>, report: AestheticReport, tau: f64) -> FilterDecision {
    let reason = if ocr.is_empty() {
        FilterReason::NoText
    } else if report.score < tau {
        FilterReason::LowAesthetic
    } else {
        FilterReason::Ok
    };
    FilterDecision {
        keep: reason == FilterReason::Ok,
        reason,
        report,
        ocr,
    }
}
