//! Training-ROI labelling by IoU interval and minibatch sampling.
//!
//! A proposal's label depends only on its maximum IoU `m` with the
//! non-difficult ground truth of its image:
//!
//! | preset        | negative      | positive |
//! |---------------|---------------|----------|
//! | `default`     | `[0.1, 0.5)`  | `>= 0.5` |
//! | `gap`         | `[0.1, 0.4)`  | `>= 0.6` |
//! | `all-neg`     | `[0.0, 0.5)`  | `>= 0.5` |
//! | `gap+all-neg` | `[0.0, 0.4)`  | `>= 0.6` |
//!
//! Everything else is discarded.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_bbox, iou, Annotation, BBox, BBoxDelta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingPreset {
    #[serde(rename = "default")]
    Default,
    #[serde(rename = "gap")]
    Gap,
    #[serde(rename = "all-neg")]
    AllNeg,
    #[serde(rename = "gap+all-neg")]
    GapAllNeg,
    #[serde(rename = "custom")]
    Custom,
}

impl SamplingPreset {
    pub const NAMED: [SamplingPreset; 4] = [
        SamplingPreset::Default,
        SamplingPreset::Gap,
        SamplingPreset::AllNeg,
        SamplingPreset::GapAllNeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplingPreset::Default => "default",
            SamplingPreset::Gap => "gap",
            SamplingPreset::AllNeg => "all-neg",
            SamplingPreset::GapAllNeg => "gap+all-neg",
            SamplingPreset::Custom => "custom",
        }
    }
}

impl fmt::Display for SamplingPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSamplingConfig {
    pub name: SamplingPreset,
    pub neg_lo: f64,
    pub neg_hi: f64,
    pub pos_lo: f64,
}

impl RoiSamplingConfig {
    pub fn preset(name: SamplingPreset) -> Self {
        let (neg_lo, neg_hi, pos_lo) = match name {
            SamplingPreset::Default | SamplingPreset::Custom => (0.1, 0.5, 0.5),
            SamplingPreset::Gap => (0.1, 0.4, 0.6),
            SamplingPreset::AllNeg => (0.0, 0.5, 0.5),
            SamplingPreset::GapAllNeg => (0.0, 0.4, 0.6),
        };
        RoiSamplingConfig {
            name,
            neg_lo,
            neg_hi,
            pos_lo,
        }
    }

    pub fn custom(neg_lo: f64, neg_hi: f64, pos_lo: f64) -> Result<Self> {
        let cfg = RoiSamplingConfig {
            name: SamplingPreset::Custom,
            neg_lo,
            neg_hi,
            pos_lo,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(self.neg_lo) && in_unit(self.neg_hi) && in_unit(self.pos_lo)) {
            return Err(Error::Config(format!(
                "sampling thresholds must lie in [0, 1]: {self:?}"
            )));
        }
        if !(self.neg_lo <= self.neg_hi && self.neg_hi <= self.pos_lo) {
            return Err(Error::Config(format!(
                "sampling thresholds must satisfy neg_lo <= neg_hi <= pos_lo: {self:?}"
            )));
        }
        if self.name != SamplingPreset::Custom && *self != Self::preset(self.name) {
            return Err(Error::Config(format!(
                "preset {} does not carry its canonical intervals",
                self.name
            )));
        }
        Ok(())
    }

    /// Interval notation as printed in the configuration table, e.g. `[0.1,0.5)`.
    pub fn negative_interval(&self) -> String {
        format!("[{:.1},{:.1})", self.neg_lo, self.neg_hi)
    }

    pub fn positive_interval(&self) -> String {
        format!(">={:.1}", self.pos_lo)
    }

    pub fn label_for(&self, max_iou: f64) -> IouBand {
        if max_iou >= self.pos_lo {
            IouBand::Positive
        } else if max_iou >= self.neg_lo && max_iou < self.neg_hi {
            IouBand::Negative
        } else {
            IouBand::Discard
        }
    }
}

impl Default for RoiSamplingConfig {
    fn default() -> Self {
        Self::preset(SamplingPreset::Default)
    }
}

impl FromStr for RoiSamplingConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let preset = match s.trim() {
            "default" => SamplingPreset::Default,
            "gap" => SamplingPreset::Gap,
            "all-neg" | "allneg" | "all_neg" => SamplingPreset::AllNeg,
            "gap+all-neg" | "gap-all-neg" | "gap_all_neg" => SamplingPreset::GapAllNeg,
            other => {
                return Err(Error::Config(format!(
                    "unknown sampling preset {other:?} (expected default, gap, all-neg or gap+all-neg)"
                )))
            }
        };
        Ok(Self::preset(preset))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IouBand {
    Positive,
    Negative,
    Discard,
}

/// Training label for one proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoiClass {
    /// Index into the ground-truth list the ROI was matched to.
    Positive(usize),
    Negative,
    Discard,
}

impl RoiClass {
    pub fn is_positive(&self) -> bool {
        matches!(self, RoiClass::Positive(_))
    }
}

/// Maximum IoU against non-difficult ground truth and its argmax (0 / `None`
/// when there is none).
pub fn max_overlap(roi: &BBox, gts: &[Annotation]) -> (f64, Option<usize>) {
    let mut best = (0.0, None);
    for (i, gt) in gts.iter().enumerate() {
        if gt.difficult {
            continue;
        }
        let o = iou(roi, &gt.bbox);
        if best.1.is_none() || o > best.0 {
            best = (o, Some(i));
        }
    }
    best
}

pub fn classify_roi(roi: &BBox, gts: &[Annotation], cfg: &RoiSamplingConfig) -> RoiClass {
    let (m, arg) = max_overlap(roi, gts);
    match cfg.label_for(m) {
        IouBand::Positive => RoiClass::Positive(arg.expect("positive IoU implies a gt")),
        IouBand::Negative => RoiClass::Negative,
        IouBand::Discard => RoiClass::Discard,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelledRoi {
    pub roi: BBox,
    pub class: RoiClass,
    /// Regression target for positives, zero otherwise.
    pub target: BBoxDelta,
}

/// Labels every proposal once; sampling then draws from these.
pub fn label_proposals(
    proposals: &[BBox],
    gts: &[Annotation],
    cfg: &RoiSamplingConfig,
) -> Vec<LabelledRoi> {
    proposals
        .iter()
        .map(|roi| {
            let class = classify_roi(roi, gts, cfg);
            let target = match class {
                RoiClass::Positive(g) => encode_bbox(roi, &gts[g].bbox),
                _ => BBoxDelta::default(),
            };
            LabelledRoi {
                roi: *roi,
                class,
                target,
            }
        })
        .collect()
}

/// Draws up to `count` labelled ROIs, at most `round(ratio * count)` of them
/// positive, filling the remainder with negatives. Discarded ROIs never
/// appear. Positives come first in the returned batch.
pub fn sample_minibatch<R: Rng + ?Sized>(
    labelled: &[LabelledRoi],
    ratio: f64,
    count: usize,
    rng: &mut R,
) -> Vec<LabelledRoi> {
    let positives: Vec<&LabelledRoi> = labelled.iter().filter(|r| r.class.is_positive()).collect();
    let negatives: Vec<&LabelledRoi> = labelled
        .iter()
        .filter(|r| r.class == RoiClass::Negative)
        .collect();
    if positives.is_empty() && negatives.is_empty() {
        log::warn!("no eligible ROIs among {} proposals", labelled.len());
        return Vec::new();
    }
    let pos_cap = (ratio.clamp(0.0, 1.0) * count as f64).round() as usize;
    let n_pos = positives.len().min(pos_cap).min(count);
    let n_neg = negatives.len().min(count - n_pos);
    let mut batch: Vec<LabelledRoi> = positives
        .choose_multiple(rng, n_pos)
        .map(|r| (*r).clone())
        .collect();
    batch.extend(negatives.choose_multiple(rng, n_neg).map(|r| (*r).clone()));
    batch
}

/// Convenience wrapper: label then sample.
pub fn sample_from_proposals<R: Rng + ?Sized>(
    proposals: &[BBox],
    gts: &[Annotation],
    cfg: &RoiSamplingConfig,
    ratio: f64,
    count: usize,
    rng: &mut R,
) -> Vec<LabelledRoi> {
    sample_minibatch(&label_proposals(proposals, gts, cfg), ratio, count, rng)
}
