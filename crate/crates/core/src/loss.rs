//! Two-class log loss plus smooth-L1 box regression.
//!
//! Logit column 0 is background, column 1 is person.

use crate::error::{Error, Result};
use crate::geometry::BBoxDelta;
use crate::sampling::RoiClass;
use crate::tensor::{Real, Tensor};

pub const BACKGROUND: usize = 0;
pub const PERSON: usize = 1;

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput<T: Real> {
    pub loss: f64,
    pub cls_loss: f64,
    pub bbox_loss: f64,
    pub grad_scores: Tensor<T>,
    pub grad_bbox: Tensor<T>,
}

/// Person probability from a `{background, person}` logit pair.
pub fn person_probability(bg: f64, person: f64) -> f64 {
    let m = bg.max(person);
    let eb = (bg - m).exp();
    let ep = (person - m).exp();
    ep / (eb + ep)
}

/// `mean(log loss over all ROIs) + lambda * mean(smooth-L1 over the 4
/// coordinates of positive ROIs)`.
pub fn detection_loss<T: Real>(
    scores: &Tensor<T>,
    bbox: &Tensor<T>,
    labels: &[RoiClass],
    targets: &[BBoxDelta],
    lambda: f64,
) -> Result<LossOutput<T>> {
    let r = labels.len();
    if scores.shape() != [r, 2, 1, 1] || bbox.shape() != [r, 4, 1, 1] || targets.len() != r {
        return Err(Error::Config(format!(
            "loss inputs disagree: scores {:?}, bbox {:?}, {} labels, {} targets",
            scores.shape(),
            bbox.shape(),
            r,
            targets.len()
        )));
    }
    if r == 0 {
        return Err(Error::Usage("loss over an empty ROI batch".into()));
    }
    let mut grad_scores = Tensor::zeros([r, 2, 1, 1]);
    let mut grad_bbox = Tensor::zeros([r, 4, 1, 1]);
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    let mut cls = 0.0;
    let mut reg = 0.0;
    for (i, label) in labels.iter().enumerate() {
        let y = match label {
            RoiClass::Positive(_) => PERSON,
            RoiClass::Negative => BACKGROUND,
            RoiClass::Discard => {
                return Err(Error::Usage(format!(
                    "ROI {i} is labelled discard; loss accepts only positive or negative"
                )))
            }
        };
        let logits = scores.item(i);
        let (l0, l1) = (logits[0].as_f64(), logits[1].as_f64());
        let m = l0.max(l1);
        let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        let p = [(l0 - lse).exp(), (l1 - lse).exp()];
        cls -= [l0, l1][y] - lse;
        let g = grad_scores.item_mut(i);
        for k in 0..2 {
            let onehot = if k == y { 1.0 } else { 0.0 };
            g[k] = T::of((p[k] - onehot) / r as f64);
        }
        if y == PERSON {
            let t = targets[i].to_array();
            let pred = bbox.item(i);
            let scale = lambda / (4 * n_pos) as f64;
            let gb = grad_bbox.item_mut(i);
            for k in 0..4 {
                let d = pred[k].as_f64() - t[k];
                reg += smooth_l1(d);
                gb[k] = T::of(scale * smooth_l1_grad(d));
            }
        }
    }
    let cls_loss = cls / r as f64;
    let bbox_loss = if n_pos > 0 {
        reg / (4 * n_pos) as f64
    } else {
        0.0
    };
    Ok(LossOutput {
        loss: cls_loss + lambda * bbox_loss,
        cls_loss,
        bbox_loss,
        grad_scores,
        grad_bbox,
    })
}
