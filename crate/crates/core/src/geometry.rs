//! Axis-aligned boxes, IoU and proposal-relative box regression targets.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box in continuous pixel coordinates. Width is `x2 - x1`; a box covering
/// pixel columns `a..=b` is stored as `x1 = a, x2 = b + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Data(format!("box {self} has non-finite coordinates")));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::Data(format!("box {self} has non-positive extent")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn scale(&self, s: f64) -> BBox {
        BBox {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    pub fn flip_horizontal(&self, image_width: f64) -> BBox {
        BBox {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
        }
    }

    /// Clamps to `[0, width] x [0, height]`; `None` if nothing positive remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        (b.x2 > b.x1 && b.y2 > b.y1).then_some(b)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Lexicographic key used for deterministic tie-breaking.
    pub fn key(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

pub fn cmp_keys(a: &BBox, b: &BBox) -> std::cmp::Ordering {
    a.key()
        .iter()
        .zip(b.key().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Intersection over union; 0 when the boxes do not overlap.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Normalised centre shift and log size ratio of a target box relative to a
/// proposal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BBoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBoxDelta {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }
}

pub fn encode_bbox(proposal: &BBox, gt: &BBox) -> BBoxDelta {
    let (pcx, pcy) = proposal.center();
    let (gcx, gcy) = gt.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    BBoxDelta {
        tx: (gcx - pcx) / pw,
        ty: (gcy - pcy) / ph,
        tw: (gt.width() / pw).ln(),
        th: (gt.height() / ph).ln(),
    }
}

pub fn decode_bbox(proposal: &BBox, delta: &BBoxDelta) -> BBox {
    let (pcx, pcy) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = pcx + delta.tx * pw;
    let cy = pcy + delta.ty * ph;
    let w = pw * delta.tw.exp();
    let h = ph * delta.th.exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// Ground-truth person instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub bbox: BBox,
    #[serde(default)]
    pub difficult: bool,
    #[serde(default)]
    pub style: String,
}

impl Annotation {
    pub fn new(image_id: impl Into<String>, bbox: BBox) -> Self {
        Annotation {
            image_id: image_id.into(),
            bbox,
            difficult: false,
            style: String::new(),
        }
    }

    pub fn difficult(mut self, difficult: bool) -> Self {
        self.difficult = difficult;
        self
    }

    pub fn with_style(mut self, style: impl Into<String>) -> Self {
        self.style = style.into();
        self
    }
}
