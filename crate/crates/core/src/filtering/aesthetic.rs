use serde::{Deserialize, Serialize};

use super::DetectedSpan;
use crate::error::{Error, Result};
use crate::font::GlyphFont;
use crate::imaging::{luminance_plane, Image};

/// Weights and coverage band of the heuristic aesthetic score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AestheticWeights {
    pub contrast: f64,
    pub balance: f64,
    pub coverage: f64,
    pub coverage_low: f64,
    pub coverage_high: f64,
}

impl Default for AestheticWeights {
    fn default() -> Self {
        Self {
            contrast: 0.4,
            balance: 0.3,
            coverage: 0.3,
            coverage_low: 0.02,
            coverage_high: 0.40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AestheticReport {
    pub score: f64,
    pub contrast: f64,
    /// Fraction of pixels that are text ink.
    pub coverage: f64,
    pub balance: f64,
}

impl AestheticWeights {
    /// 1 inside the coverage band, falling linearly to 0 at 0 and at 1.
    pub fn coverage_term(&self, f: f64) -> f64 {
        if f < self.coverage_low {
            (f / self.coverage_low).max(0.0)
        } else if f > self.coverage_high {
            ((1.0 - f) / (1.0 - self.coverage_high)).max(0.0)
        } else {
            1.0
        }
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scores an image from its luminance statistics and the OCR result.
///
/// * contrast: RMS luminance contrast, `std / 0.5` (0.5 is the largest
///   possible std of a [0, 1] signal), capped at 1;
/// * coverage: ink pixels of the detected text over the image area;
/// * balance: `1 - |left - right| / (left + right)` where the ink mass of a
///   pixel is its absolute luminance deviation from the image median.
pub fn aesthetic_score(
    image: &Image,
    ocr: &[DetectedSpan],
    weights: &AestheticWeights,
) -> Result<AestheticReport> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("aesthetic score of a zero-area image".into()));
    }
    let lum = luminance_plane(image);
    let n = lum.len() as f64;
    // shifted by the first pixel so a constant image has exactly zero variance
    let shift = lum[0];
    let mean = lum.iter().map(|v| v - shift).sum::<f64>() / n;
    let var = lum.iter().map(|v| (v - shift - mean).powi(2)).sum::<f64>() / n;
    let contrast = (var.sqrt() / 0.5).min(1.0);

    let font = GlyphFont::builtin();
    let ink: u64 = ocr
        .iter()
        .map(|d| font.ink_pixels(&d.text, d.scale(&font)))
        .sum();
    let coverage = (ink as f64 / n).min(1.0);

    let med = median(&lum);
    let (mut left, mut right) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let m = (lum[(y * w + x) as usize] - med).abs();
            if 2 * x + 1 < w {
                left += m;
            } else if 2 * x + 1 > w {
                right += m;
            }
        }
    }
    let total = left + right;
    let balance = if total > 0.0 {
        1.0 - (left - right).abs() / total
    } else {
        1.0
    };

    let raw = weights.contrast * contrast
        + weights.balance * balance
        + weights.coverage * weights.coverage_term(coverage);
    Ok(AestheticReport {
        score: raw.clamp(0.0, 1.0),
        contrast,
        coverage,
        balance,
    })
}
