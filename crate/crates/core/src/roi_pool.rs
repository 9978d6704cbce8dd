//! ROI max-pooling over a uniform `H x W` grid.
//!
//! ROI corners are scaled into feature-map coordinates and rounded half-up;
//! the rounded corners are inclusive, so the ROI spans
//! `h = y2q - y1q + 1` rows. Cell `i` covers rows
//! `[floor(i * h / H), floor((i + 1) * h / H))` of the ROI (columns alike),
//! clipped to the map. Cells left empty by rounding or clipping emit 0.
//! `H = W = 1` is the single-cell (global max over the ROI) variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiPoolConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Feature-map resolution divided by input-image resolution.
    pub spatial_scale: f64,
}

impl RoiPoolConfig {
    pub fn new(grid_h: usize, grid_w: usize, spatial_scale: f64) -> Result<Self> {
        let cfg = RoiPoolConfig {
            grid_h,
            grid_w,
            spatial_scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn single_cell(spatial_scale: f64) -> Self {
        RoiPoolConfig {
            grid_h: 1,
            grid_w: 1,
            spatial_scale,
        }
    }

    pub fn is_single_cell(&self) -> bool {
        self.grid_h == 1 && self.grid_w == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Config(format!(
                "ROI pooling grid must be at least 1x1, got {}x{}",
                self.grid_h, self.grid_w
            )));
        }
        if !(self.spatial_scale > 0.0 && self.spatial_scale.is_finite()) {
            return Err(Error::Config(format!(
                "ROI pooling spatial scale must be positive, got {}",
                self.spatial_scale
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn output_len(&self, channels: usize) -> usize {
        channels * self.cells()
    }
}

impl Default for RoiPoolConfig {
    fn default() -> Self {
        RoiPoolConfig {
            grid_h: 6,
            grid_w: 6,
            spatial_scale: 0.25,
        }
    }
}

/// Argmax bookkeeping for one pooled ROI.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiPoolState {
    /// `[1, C, fh, fw]` of the pooled feature map.
    pub feature_shape: [usize; 4],
    /// Flat index into the feature map per output value, channel-major
    /// (`c * H * W + i * W + j`); `None` for empty cells.
    pub argmax: Vec<Option<u32>>,
}

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Quantised inclusive ROI corners `(x1, y1, x2, y2)` in feature cells.
pub fn quantize_roi(roi: &BBox, spatial_scale: f64) -> (i64, i64, i64, i64) {
    (
        round_half_up(roi.x1 * spatial_scale),
        round_half_up(roi.y1 * spatial_scale),
        round_half_up(roi.x2 * spatial_scale),
        round_half_up(roi.y2 * spatial_scale),
    )
}

/// Whether the quantised ROI overlaps a `height x width` feature map at all.
pub fn roi_hits_map(roi: &BBox, spatial_scale: f64, height: usize, width: usize) -> bool {
    let (x1, y1, x2, y2) = quantize_roi(roi, spatial_scale);
    x2 >= 0 && y2 >= 0 && x1 < width as i64 && y1 < height as i64 && x2 >= x1 && y2 >= y1
}

fn pool_one<T: Real>(
    features: &Tensor<T>,
    roi: &BBox,
    index: usize,
    cfg: &RoiPoolConfig,
    out: &mut [T],
) -> Result<RoiPoolState> {
    let [_, c, fh, fw] = features.shape();
    let (x1, y1, x2, y2) = quantize_roi(roi, cfg.spatial_scale);
    if !roi_hits_map(roi, cfg.spatial_scale, fh, fw) {
        return Err(Error::RoiOutside {
            index,
            roi: roi.to_string(),
            height: fh,
            width: fw,
        });
    }
    let h = (y2 - y1 + 1).max(1);
    let w = (x2 - x1 + 1).max(1);
    let (gh, gw) = (cfg.grid_h as i64, cfg.grid_w as i64);
    let cells = cfg.cells();
    let mut argmax = vec![None; c * cells];
    let src = features.item(0);
    for i in 0..gh {
        let r0 = (y1 + (i * h) / gh).clamp(0, fh as i64) as usize;
        let r1 = (y1 + ((i + 1) * h) / gh).clamp(0, fh as i64) as usize;
        for j in 0..gw {
            let c0 = (x1 + (j * w) / gw).clamp(0, fw as i64) as usize;
            let c1 = (x1 + ((j + 1) * w) / gw).clamp(0, fw as i64) as usize;
            let cell = (i * gw + j) as usize;
            for ch in 0..c {
                let o = ch * cells + cell;
                if r0 >= r1 || c0 >= c1 {
                    out[o] = T::zero();
                    continue;
                }
                let plane = ch * fh * fw;
                let mut best = plane + r0 * fw + c0;
                for r in r0..r1 {
                    let row = plane + r * fw;
                    for col in c0..c1 {
                        if src[row + col] > src[best] {
                            best = row + col;
                        }
                    }
                }
                out[o] = src[best];
                argmax[o] = Some(best as u32);
            }
        }
    }
    Ok(RoiPoolState {
        feature_shape: features.shape(),
        argmax,
    })
}

fn check_single_image<T: Real>(features: &Tensor<T>) -> Result<()> {
    if features.batch() != 1 {
        return Err(Error::Config(format!(
            "ROI pooling expects one feature map, got batch {}",
            features.batch()
        )));
    }
    Ok(())
}

/// Pools one ROI into a `C * H * W` vector.
pub fn roi_pool_forward<T: Real>(
    features: &Tensor<T>,
    roi: &BBox,
    cfg: &RoiPoolConfig,
) -> Result<(Vec<T>, RoiPoolState)> {
    cfg.validate()?;
    check_single_image(features)?;
    let mut out = vec![T::zero(); cfg.output_len(features.channels())];
    let state = pool_one(features, roi, 0, cfg, &mut out)?;
    Ok((out, state))
}

/// Pools every ROI over one shared feature map into `[R, C, H, W]`.
pub fn roi_pool_batch<T: Real>(
    features: &Tensor<T>,
    rois: &[BBox],
    cfg: &RoiPoolConfig,
) -> Result<(Tensor<T>, Vec<RoiPoolState>)> {
    cfg.validate()?;
    check_single_image(features)?;
    let c = features.channels();
    let mut out = Tensor::zeros([rois.len(), c, cfg.grid_h, cfg.grid_w]);
    let mut states = Vec::with_capacity(rois.len());
    for (r, roi) in rois.iter().enumerate() {
        states.push(pool_one(features, roi, r, cfg, out.item_mut(r))?);
    }
    Ok((out, states))
}

/// Adds `upstream` (one value per pooled output) into `grad` at the recorded
/// argmax positions.
pub fn roi_pool_accumulate<T: Real>(
    state: &RoiPoolState,
    upstream: &[T],
    grad: &mut Tensor<T>,
) -> Result<()> {
    if upstream.len() != state.argmax.len() {
        return Err(Error::Config(format!(
            "ROI pooling backward: {} upstream values for {} pooled outputs",
            upstream.len(),
            state.argmax.len()
        )));
    }
    if grad.shape() != state.feature_shape {
        return Err(Error::Config(format!(
            "ROI pooling backward: gradient buffer {:?} does not match features {:?}",
            grad.shape(),
            state.feature_shape
        )));
    }
    let g = grad.data_mut();
    for (a, &u) in state.argmax.iter().zip(upstream) {
        if let Some(idx) = a {
            g[*idx as usize] += u;
        }
    }
    Ok(())
}

pub fn roi_pool_backward<T: Real>(state: &RoiPoolState, upstream: &[T]) -> Result<Tensor<T>> {
    let mut grad = Tensor::zeros(state.feature_shape);
    roi_pool_accumulate(state, upstream, &mut grad)?;
    Ok(grad)
}

/// Backward for a whole batch from `roi_pool_batch`.
pub fn roi_pool_batch_backward<T: Real>(
    states: &[RoiPoolState],
    upstream: &Tensor<T>,
    feature_shape: [usize; 4],
) -> Result<Tensor<T>> {
    if upstream.batch() != states.len() {
        return Err(Error::Config(format!(
            "ROI pooling backward: {} gradient rows for {} ROIs",
            upstream.batch(),
            states.len()
        )));
    }
    let mut grad = Tensor::zeros(feature_shape);
    for (r, state) in states.iter().enumerate() {
        roi_pool_accumulate(state, upstream.item(r), &mut grad)?;
    }
    Ok(grad)
}
