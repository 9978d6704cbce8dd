//! Class-agnostic region proposals: graph-based segmentation followed by
//! selective-search hierarchical grouping.

pub mod color;
pub mod segment;
pub mod selective_search;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Annotation, BBox};

pub use color::{ColorSpace, FloatImage};
pub use segment::{Region, Segmentation, SegmentationParams};
pub use selective_search::{hierarchical_grouping, selective_search, GroupedBox, SelectiveSearchParams};

/// Segments an RGB image in RGB space.
pub fn segment(image: &RgbImage, params: &SegmentationParams) -> Segmentation {
    segment::segment_float(&color::convert(image, ColorSpace::Rgb), params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    /// Hierarchy rank; lower is nearer the top of the merge tree.
    pub priority: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalSet {
    pub image_id: String,
    proposals: Vec<Proposal>,
    seen: HashSet<[u64; 4]>,
}

impl ProposalSet {
    pub fn new(image_id: impl Into<String>) -> Self {
        ProposalSet {
            image_id: image_id.into(),
            ..Default::default()
        }
    }

    pub fn from_boxes(image_id: impl Into<String>, boxes: impl IntoIterator<Item = BBox>) -> Self {
        let mut set = Self::new(image_id);
        for (i, b) in boxes.into_iter().enumerate() {
            set.push_unique(b, i + 1);
        }
        set
    }

    /// Adds a box unless an identical one is already present.
    pub fn push_unique(&mut self, bbox: BBox, priority: usize) -> bool {
        let key = bbox.key().map(f64::to_bits);
        if !self.seen.insert(key) {
            return false;
        }
        self.proposals.push(Proposal { bbox, priority });
        true
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn proposals(&self) -> &[Proposal] {
        &self.proposals
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }

    /// `x1,y1,x2,y2,priority` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x1,y1,x2,y2,priority\n");
        for p in &self.proposals {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2, p.priority
            ));
        }
        out
    }

    pub fn from_csv(image_id: &str, text: &str) -> Result<Self> {
        let mut set = Self::new(image_id);
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("proposals for {image_id}: {e}")))?;
            let bad = || Error::Data(format!("proposals for {image_id}: bad row {}", line + 2));
            if rec.len() != 5 {
                return Err(bad());
            }
            let v: Vec<f64> = rec
                .iter()
                .take(4)
                .map(|f| f.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let priority = rec[4].trim().parse::<usize>().map_err(|_| bad())?;
            let bbox = BBox::new(v[0], v[1], v[2], v[3]).map_err(|_| bad())?;
            set.push_unique(bbox, priority);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(image_id: &str, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(image_id, &text)
    }
}

/// Fraction of non-difficult ground truth covered by at least one proposal
/// with IoU >= `iou_thresh`; 1.0 when there is nothing to cover.
pub fn proposal_recall(proposals: &[BBox], gts: &[Annotation], iou_thresh: f64) -> Result<f64> {
    let (hit, total) = recall_counts(proposals, gts, iou_thresh)?;
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

/// `(covered, total)` non-difficult ground-truth counts.
pub fn recall_counts(proposals: &[BBox], gts: &[Annotation], iou_thresh: f64) -> Result<(usize, usize)> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::Config(format!(
            "recall IoU threshold must lie in (0, 1], got {iou_thresh}"
        )));
    }
    let mut hit = 0;
    let mut total = 0;
    for gt in gts.iter().filter(|g| !g.difficult) {
        total += 1;
        if proposals.iter().any(|p| iou(p, &gt.bbox) >= iou_thresh) {
            hit += 1;
        }
    }
    Ok((hit, total))
}
