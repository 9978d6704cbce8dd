//! The training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{image_to_tensor, resize_shorter_side};
use crate::error::{Error, Result};
use crate::experiment::config::ExperimentConfig;
use crate::experiment::dataset::LoadedImage;
use crate::geometry::{Annotation, BBox};
use crate::layers::ParamGrads;
use crate::loss::detection_loss;
use crate::network::{Gradients, Network, Sgd};
use crate::roi_pool::roi_hits_map;
use crate::sampling::{label_proposals, sample_minibatch, LabelledRoi, RoiClass, RoiSamplingConfig};
use crate::tensor::Tensor;

/// One image prepared for training: network input plus labelled ROIs in
/// input coordinates.
pub struct TrainingExample {
    pub id: String,
    pub input: Tensor<f32>,
    pub rois: Vec<LabelledRoi>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiCensus {
    pub positives: usize,
    pub negatives: usize,
    pub discarded: usize,
}

impl RoiCensus {
    fn add(&mut self, rois: &[LabelledRoi]) {
        for r in rois {
            match r.class {
                RoiClass::Positive(_) => self.positives += 1,
                RoiClass::Negative => self.negatives += 1,
                RoiClass::Discard => self.discarded += 1,
            }
        }
    }
}

fn label_image(
    id: &str,
    image: &image::RgbImage,
    gts: &[Annotation],
    proposals: &[BBox],
    sampling: &RoiSamplingConfig,
    include_gt: bool,
    resize: u32,
) -> TrainingExample {
    let mut boxes = proposals.to_vec();
    if include_gt {
        boxes.extend(gts.iter().filter(|g| !g.difficult).map(|g| g.bbox));
    }
    let (resized, scale) = resize_shorter_side(image, resize);
    // regression targets are scale invariant, so labelling happens in
    // original coordinates and only the ROIs are rescaled
    let rois = label_proposals(&boxes, gts, sampling)
        .into_iter()
        .map(|mut r| {
            r.roi = r.roi.scale(scale);
            r
        })
        .collect();
    TrainingExample {
        id: id.to_string(),
        input: image_to_tensor(&resized),
        rois,
    }
}

/// Builds training examples (optionally with mirrored copies) and the
/// overall ROI census.
pub fn prepare_examples(
    images: &[LoadedImage],
    sampling: &RoiSamplingConfig,
    cfg: &ExperimentConfig,
) -> (Vec<TrainingExample>, RoiCensus) {
    let mut out = Vec::new();
    let mut census = RoiCensus::default();
    let resize = cfg.detector.resize_shorter;
    for img in images {
        let proposals = img.proposals.boxes();
        let ex = label_image(&img.id, &img.image, &img.annotations, &proposals, sampling, cfg.batch.include_gt, resize);
        census.add(&ex.rois);
        out.push(ex);
        if cfg.batch.flip {
            let w = img.image.width() as f64;
            let flipped = image::imageops::flip_horizontal(&img.image);
            let gts: Vec<Annotation> = img
                .annotations
                .iter()
                .map(|a| Annotation {
                    bbox: a.bbox.flip_horizontal(w),
                    ..a.clone()
                })
                .collect();
            let props: Vec<BBox> = proposals.iter().map(|b| b.flip_horizontal(w)).collect();
            out.push(label_image(
                &format!("{}#flip", img.id),
                &flipped,
                &gts,
                &props,
                sampling,
                cfg.batch.include_gt,
                resize,
            ));
        }
    }
    (out, census)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub cls_loss: f64,
    pub bbox_loss: f64,
    pub positives: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub elapsed_ms: u128,
}

pub struct TrainOutcome {
    pub network: Network<f32>,
    pub log: Vec<TrainRecord>,
    pub census: RoiCensus,
}

impl TrainOutcome {
    /// Mean loss over the first and last `window` iterations.
    pub fn loss_trend(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.log.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |s: &[TrainRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.log[..w]), mean(&self.log[n - w..])))
    }
}

fn add_grads(acc: &mut Gradients<f32>, g: Gradients<f32>) {
    for (a, b) in acc.iter_mut().zip(g) {
        match (a.as_mut(), b) {
            (Some(a), Some(b)) => {
                a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += *y);
                a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += *y);
            }
            (None, Some(b)) => *a = Some(b),
            _ => {}
        }
    }
}

fn scale_grads(g: &mut Gradients<f32>, s: f32) {
    for p in g.iter_mut().flatten() {
        let ParamGrads { weight, bias } = p;
        weight.iter_mut().for_each(|x| *x *= s);
        bias.iter_mut().for_each(|x| *x *= s);
    }
}

/// Trains a fresh network. Deterministic given the config seed; wall times
/// appear only in the returned log.
pub fn train(images: &[LoadedImage], cfg: &ExperimentConfig, log_path: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sampling = cfg.sampling_config()?;
    let (mut examples, census) = prepare_examples(images, &sampling, cfg);
    let mut net = Network::<f32>::new(cfg.network_spec(), cfg.seed)?;
    let spatial_scale = net.pool_config().spatial_scale;
    for ex in &mut examples {
        let [_, _, fh, fw] = net.feature_shape(ex.input.shape())?;
        ex.rois.retain(|r| roi_hits_map(&r.roi, spatial_scale, fh, fw));
    }
    let eligible: Vec<usize> = (0..examples.len())
        .filter(|&i| examples[i].rois.iter().any(|r| r.class != RoiClass::Discard))
        .collect();
    if eligible.is_empty() || (census.positives == 0 && cfg.sgd.iterations > 0) {
        return Err(Error::Data(format!(
            "no usable training ROIs under sampling {} (negatives {}, positives {}): \
             {} images, {} positive, {} negative and {} discarded ROIs",
            sampling.name,
            sampling.negative_interval(),
            sampling.positive_interval(),
            images.len(),
            census.positives,
            census.negatives,
            census.discarded
        )));
    }

    net.freeze_conv_layers(cfg.sgd.fixed_layers)?;
    let mut sgd = Sgd::new(&net);
    let mut sgd_cfg = cfg.sgd.clone();
    sgd_cfg.seed = cfg.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a5a_0f0f_1234_8765);

    let mut writer = match log_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?))
        }
        None => None,
    };

    let start = Instant::now();
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.sgd.iterations);
    let per_batch = cfg.batch.images_per_batch;
    for it in 0..cfg.sgd.iterations {
        let mut acc: Option<Gradients<f32>> = None;
        let mut rec = TrainRecord {
            iteration: it,
            loss: 0.0,
            cls_loss: 0.0,
            bbox_loss: 0.0,
            positives: 0,
            negatives: 0,
            learning_rate: sgd_cfg.learning_rate_at(it),
            elapsed_ms: 0,
        };
        for _ in 0..per_batch {
            if order.is_empty() {
                order = eligible.clone();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let ex = &examples[order.pop().expect("refilled above")];
            let batch = sample_minibatch(&ex.rois, cfg.batch.positive_fraction, cfg.batch.rois_per_image, &mut rng);
            let rois: Vec<BBox> = batch.iter().map(|r| r.roi).collect();
            let labels: Vec<RoiClass> = batch.iter().map(|r| r.class).collect();
            let targets: Vec<_> = batch.iter().map(|r| r.target).collect();
            let (scores, deltas) = net.forward_train(&ex.input, &rois)?;
            let out = detection_loss(&scores, &deltas, &labels, &targets, cfg.batch.bbox_loss_weight)?;
            if !out.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {} at iteration {it} (image {})",
                    out.loss, ex.id
                )));
            }
            let g = net.backward(&out.grad_scores, &out.grad_bbox)?;
            match acc.as_mut() {
                Some(a) => add_grads(a, g),
                None => acc = Some(g),
            }
            rec.loss += out.loss / per_batch as f64;
            rec.cls_loss += out.cls_loss / per_batch as f64;
            rec.bbox_loss += out.bbox_loss / per_batch as f64;
            rec.positives += labels.iter().filter(|l| l.is_positive()).count();
            rec.negatives += labels.iter().filter(|l| **l == RoiClass::Negative).count();
        }
        let mut grads = acc.expect("at least one image per batch");
        if per_batch > 1 {
            scale_grads(&mut grads, 1.0 / per_batch as f32);
        }
        sgd.step(&mut net, &grads, &sgd_cfg)?;
        rec.elapsed_ms = start.elapsed().as_millis();
        if let Some(w) = writer.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(log_path.expect("writer implies path"), e))?;
        }
        if it % 500 == 0 || it + 1 == cfg.sgd.iterations {
            log::info!(
                "iter {it}: loss {:.4} (cls {:.4}, box {:.4}), {} pos / {} neg, {:.1}s",
                rec.loss,
                rec.cls_loss,
                rec.bbox_loss,
                rec.positives,
                rec.negatives,
                start.elapsed().as_secs_f64()
            );
        }
        log.push(rec);
    }
    if let Some(mut w) = writer {
        w.flush().map_err(|e| Error::io(log_path.expect("writer implies path"), e))?;
    }
    Ok(TrainOutcome {
        network: net,
        log,
        census,
    })
}
