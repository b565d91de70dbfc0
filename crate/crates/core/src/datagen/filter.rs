use serde::{Deserialize, Serialize};

use super::glyphs::GlyphAlphabet;
use super::ocr::{ocr, OcrReading};
use crate::image::ImageGrid;

pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Empty,
    IllegibleSrc,
    IllegibleTgt,
    Mismatch,
    Ok,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterDecision {
    pub reason: FilterReason,
    pub src: OcrReading,
    pub tgt: OcrReading,
}

impl FilterDecision {
    pub fn accepted(&self) -> bool {
        self.reason == FilterReason::Ok
    }
}

/// Cross-view text consistency check: both views must read the same
/// non-empty string with confidence at least `min_conf`.
pub fn filter_pair(src: &ImageGrid, tgt: &ImageGrid, alphabet: &GlyphAlphabet, min_conf: f64) -> FilterDecision {
    let src_reading = ocr(src, alphabet, None);
    let tgt_reading = ocr(tgt, alphabet, None);
    let reason = if src_reading.text.is_empty() || tgt_reading.text.is_empty() {
        FilterReason::Empty
    } else if src_reading.confidence < min_conf {
        FilterReason::IllegibleSrc
    } else if tgt_reading.confidence < min_conf {
        FilterReason::IllegibleTgt
    } else if src_reading.text != tgt_reading.text {
        FilterReason::Mismatch
    } else {
        FilterReason::Ok
    };
    FilterDecision {
        reason,
        src: src_reading,
        tgt: tgt_reading,
    }
}
