//! Whole-image inference: one backbone pass, per-ROI head, box decoding,
//! clipping, score thresholding and greedy non-maximum suppression.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cmp_keys, decode_bbox, iou, BBox, BBoxDelta};
use crate::loss::person_probability;
use crate::network::Network;
use crate::proposals::ProposalSet;
use crate::roi_pool::roi_hits_map;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    /// Person probability.
    pub score: f64,
}

/// Descending score, then image id, then box coordinates.
pub fn cmp_detections(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| cmp_keys(&a.bbox, &b.bbox))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Shorter image side after resizing (aspect ratio preserved).
    pub resize_shorter: u32,
    /// Detections must score strictly above this.
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            resize_shorter: 128,
            score_threshold: 0.05,
            nms_iou: 0.3,
            max_detections: 100,
        }
    }
}

impl DetectorConfig {
    /// The full-scale setting (600 px shorter side).
    pub fn full_scale() -> Self {
        DetectorConfig {
            resize_shorter: 600,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize_shorter == 0 {
            return Err(Error::Config("resize target must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!(
                "score threshold must lie in [0, 1], got {}",
                self.score_threshold
            )));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config(format!(
                "NMS IoU threshold must lie in (0, 1), got {}",
                self.nms_iou
            )));
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max detections must be positive".into()));
        }
        Ok(())
    }
}

/// Resizes so the shorter side equals `shorter`; returns the image and the
/// applied scale factor.
pub fn resize_shorter_side(image: &RgbImage, shorter: u32) -> (RgbImage, f64) {
    let (w, h) = image.dimensions();
    let s = w.min(h);
    if s == shorter || s == 0 {
        return (image.clone(), 1.0);
    }
    let scale = shorter as f64 / s as f64;
    let nw = ((w as f64 * scale).round() as u32).max(1);
    let nh = ((h as f64 * scale).round() as u32).max(1);
    (image::imageops::resize(image, nw, nh, FilterType::Triangle), scale)
}

/// `[1, 3, H, W]` tensor with pixel values mapped to `[-1, 1]`.
pub fn image_to_tensor<T: Real>(image: &RgbImage) -> Tensor<T> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    let plane = w * h;
    let data = t.data_mut();
    for (i, p) in image.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::of(p[c] as f64 / 127.5 - 1.0);
        }
    }
    t
}

/// Runs the detector over one image.
pub fn detect(
    net: &Network<f32>,
    image_id: &str,
    image: &RgbImage,
    proposals: &ProposalSet,
    cfg: &DetectorConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let (resized, scale) = resize_shorter_side(image, cfg.resize_shorter);
    let (w, h) = (image.width() as f64, image.height() as f64);
    let input = image_to_tensor::<f32>(&resized);
    let [_, _, fh, fw] = net.feature_shape(input.shape())?;
    let spatial_scale = net.pool_config().spatial_scale;
    // proposals that quantise entirely off the feature map carry no evidence
    let rois: Vec<BBox> = proposals
        .boxes()
        .iter()
        .map(|b| b.scale(scale))
        .filter(|b| roi_hits_map(b, spatial_scale, fh, fw))
        .collect();
    if rois.is_empty() {
        return Ok(Vec::new());
    }
    let (scores, deltas) = net.infer_rois(&input, &rois)?;
    let mut dets = Vec::new();
    for (r, roi) in rois.iter().enumerate() {
        let logits = scores.item(r);
        let p = person_probability(logits[0] as f64, logits[1] as f64);
        if !p.is_finite() {
            return Err(Error::Numeric(format!("non-finite score for {image_id}")));
        }
        if p <= cfg.score_threshold {
            continue;
        }
        let d = deltas.item(r);
        let delta = BBoxDelta::from_array([d[0] as f64, d[1] as f64, d[2] as f64, d[3] as f64]);
        let decoded = decode_bbox(roi, &delta).scale(1.0 / scale);
        if let Some(bbox) = decoded.clip(w, h) {
            dets.push(Detection {
                image_id: image_id.to_string(),
                bbox,
                score: p,
            });
        }
    }
    let mut kept = nms(dets, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    Ok(kept)
}

/// Greedy suppression: repeatedly keep the highest-scoring remaining
/// detection and drop everything overlapping it with IoU above `iou_thresh`.
/// Output is in descending score order.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(cmp_detections);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept
            .iter()
            .all(|k| k.image_id != d.image_id || iou(&k.bbox, &d.bbox) <= iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

pub const DETECTIONS_HEADER: &str = "image_id,x1,y1,x2,y2,score";

/// Detections CSV: `image_id,x1,y1,x2,y2,score`, one row per detection.
pub fn detections_to_csv(dets: &[Detection]) -> String {
    let mut out = String::from(DETECTIONS_HEADER);
    out.push('\n');
    for d in dets {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            d.image_id, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.score
        );
    }
    out
}

pub fn detections_from_csv(text: &str) -> Result<Vec<Detection>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("detections: {e}")))?
        .iter()
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(",");
    if !headers.is_empty() && headers != DETECTIONS_HEADER {
        return Err(Error::Data(format!(
            "detections: expected header {DETECTIONS_HEADER:?}, got {headers:?}"
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("detections line {line}: {e}")))?;
        let bad = |what: &str| Error::Data(format!("detections line {line}: {what}"));
        if rec.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let num = |k: usize| rec[k].trim().parse::<f64>().map_err(|_| bad("not a number"));
        let bbox = BBox::new(num(1)?, num(2)?, num(3)?, num(4)?).map_err(|e| bad(&e.to_string()))?;
        let score = num(5)?;
        if !score.is_finite() {
            return Err(bad("non-finite score"));
        }
        out.push(Detection {
            image_id: rec[0].trim().to_string(),
            bbox,
            score,
        });
    }
    Ok(out)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    fs::write(path, detections_to_csv(dets)).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    detections_from_csv(&text)
}
