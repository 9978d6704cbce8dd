//! Two-stage detector network: convolutional backbone over the whole image,
//! ROI pooling, fully connected head and the score / box output projections.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::layers::{Init, Layer, LayerKind, LayerSpec, ParamGrads, Params};
use crate::roi_pool::{roi_pool_batch, roi_pool_batch_backward, RoiPoolConfig, RoiPoolState};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the Gaussian used for the score and box projections.
pub const OUTPUT_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Two conv layers, 6x6 pooling, two fc layers.
    Toy,
    /// Four conv layers, 6x6 pooling, two wider fc layers.
    Small,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "small" => Ok(Profile::Small),
            other => Err(Error::Config(format!("unknown network profile {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub backbone: Vec<LayerSpec>,
    pub pool: RoiPoolConfig,
    pub head: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn profile(profile: Profile) -> Self {
        let (backbone, head) = match profile {
            Profile::Toy => (
                vec![
                    LayerSpec::conv(16, 3, 1, 1),
                    LayerSpec::relu(),
                    LayerSpec::max_pool(2, 2),
                    LayerSpec::conv(32, 3, 1, 1),
                    LayerSpec::relu(),
                    LayerSpec::max_pool(2, 2),
                ],
                vec![
                    LayerSpec::fc(128),
                    LayerSpec::relu(),
                    LayerSpec::dropout(0.75),
                    LayerSpec::fc(128),
                    LayerSpec::relu(),
                    LayerSpec::dropout(0.75),
                ],
            ),
            Profile::Small => (
                vec![
                    LayerSpec::conv(16, 3, 1, 1),
                    LayerSpec::relu(),
                    LayerSpec::max_pool(2, 2),
                    LayerSpec::conv(32, 3, 1, 1),
                    LayerSpec::relu(),
                    LayerSpec::max_pool(2, 2),
                    LayerSpec::conv(48, 3, 1, 1),
                    LayerSpec::relu(),
                    LayerSpec::conv(48, 3, 1, 1),
                    LayerSpec::relu(),
                ],
                vec![
                    LayerSpec::fc(256),
                    LayerSpec::relu(),
                    LayerSpec::dropout(0.5),
                    LayerSpec::fc(256),
                    LayerSpec::relu(),
                    LayerSpec::dropout(0.5),
                ],
            ),
        };
        let mut spec = NetworkSpec {
            input_channels: 3,
            backbone,
            pool: RoiPoolConfig::default(),
            head,
        };
        spec.pool.spatial_scale = spec.natural_scale();
        spec
    }

    /// `1 / product of backbone strides`.
    pub fn natural_scale(&self) -> f64 {
        1.0 / self.backbone.iter().map(LayerSpec::stride).product::<usize>() as f64
    }

    pub fn with_grid(mut self, grid_h: usize, grid_w: usize) -> Self {
        self.pool.grid_h = grid_h;
        self.pool.grid_w = grid_w;
        self
    }

    pub fn conv_count(&self) -> usize {
        self.backbone.iter().filter(|l| l.is_conv()).count()
    }

    pub fn backbone_channels(&self) -> usize {
        self.backbone
            .iter()
            .rev()
            .find_map(|l| match l.kind {
                LayerKind::Conv { out_channels, .. } => Some(out_channels),
                _ => None,
            })
            .unwrap_or(self.input_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("network needs at least one input channel".into()));
        }
        for (i, l) in self.backbone.iter().enumerate() {
            l.validate()?;
            if !matches!(
                l.kind,
                LayerKind::Conv { .. } | LayerKind::Relu | LayerKind::MaxPool { .. }
            ) {
                return Err(Error::Config(format!(
                    "backbone layer {i} must be conv, relu or maxpool, got {:?}",
                    l.kind
                )));
            }
        }
        for (i, l) in self.head.iter().enumerate() {
            l.validate()?;
            if !matches!(
                l.kind,
                LayerKind::Fc { .. } | LayerKind::Relu | LayerKind::Dropout { .. }
            ) {
                return Err(Error::Config(format!(
                    "head layer {i} must be fc, relu or dropout, got {:?}",
                    l.kind
                )));
            }
        }
        self.pool.validate()
    }
}

struct TrainState {
    feature_shape: [usize; 4],
    pool_states: Vec<RoiPoolState>,
}

/// Parameter gradients aligned with [`Network::layers`]; `None` for layers
/// without parameters or frozen ones.
pub type Gradients<T> = Vec<Option<ParamGrads<T>>>;

pub struct Network<T: Real = f32> {
    spec: NetworkSpec,
    backbone: Vec<Layer<T>>,
    head: Vec<Layer<T>>,
    cls_score: Layer<T>,
    bbox_pred: Layer<T>,
    seed: u64,
    rng: ChaCha8Rng,
    backbone_runs: AtomicUsize,
    train_state: Option<TrainState>,
}

impl<T: Real> Clone for Network<T> {
    fn clone(&self) -> Self {
        Network {
            spec: self.spec.clone(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            cls_score: self.cls_score.clone(),
            bbox_pred: self.bbox_pred.clone(),
            seed: self.seed,
            rng: self.rng.clone(),
            backbone_runs: AtomicUsize::new(0),
            train_state: None,
        }
    }
}

impl<T: Real> std::fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("seed", &self.seed)
            .finish()
    }
}

impl<T: Real> Network<T> {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::with_capacity(spec.backbone.len());
        let mut channels = spec.input_channels;
        for (i, ls) in spec.backbone.iter().enumerate() {
            backbone.push(Layer::new(format!("backbone.{i}"), ls.clone(), channels, Init::He, &mut rng)?);
            if let LayerKind::Conv { out_channels, .. } = ls.kind {
                channels = out_channels;
            }
        }
        let mut dims = spec.pool.output_len(channels);
        let mut head = Vec::with_capacity(spec.head.len());
        for (i, ls) in spec.head.iter().enumerate() {
            head.push(Layer::new(format!("head.{i}"), ls.clone(), dims, Init::He, &mut rng)?);
            if let LayerKind::Fc { out_dims } = ls.kind {
                dims = out_dims;
            }
        }
        let out_init = Init::Gaussian(OUTPUT_INIT_STD);
        let cls_score = Layer::new("cls_score", LayerSpec::fc(2), dims, out_init, &mut rng)?;
        let bbox_pred = Layer::new("bbox_pred", LayerSpec::fc(4), dims, out_init, &mut rng)?;
        Ok(Network {
            spec,
            backbone,
            head,
            cls_score,
            bbox_pred,
            seed,
            rng,
            backbone_runs: AtomicUsize::new(0),
            train_state: None,
        })
    }

    /// Reassembles a network from stored parameters, in [`Network::layers`] order.
    pub(crate) fn from_parts(
        spec: NetworkSpec,
        seed: u64,
        rng: ChaCha8Rng,
        mut params: Vec<Option<Params<T>>>,
    ) -> Result<Self> {
        spec.validate()?;
        let expected = spec.backbone.len() + spec.head.len() + 2;
        if params.len() != expected {
            return Err(Error::Data(format!(
                "checkpoint holds {} layers, spec needs {expected}",
                params.len()
            )));
        }
        params.reverse();
        let mut take = || params.pop().expect("length checked");
        let mut backbone = Vec::new();
        let mut channels = spec.input_channels;
        for (i, ls) in spec.backbone.iter().enumerate() {
            backbone.push(Layer::with_params(format!("backbone.{i}"), ls.clone(), channels, take())?);
            if let LayerKind::Conv { out_channels, .. } = ls.kind {
                channels = out_channels;
            }
        }
        let mut dims = spec.pool.output_len(channels);
        let mut head = Vec::new();
        for (i, ls) in spec.head.iter().enumerate() {
            head.push(Layer::with_params(format!("head.{i}"), ls.clone(), dims, take())?);
            if let LayerKind::Fc { out_dims } = ls.kind {
                dims = out_dims;
            }
        }
        let cls_score = Layer::with_params("cls_score", LayerSpec::fc(2), dims, take())?;
        let bbox_pred = Layer::with_params("bbox_pred", LayerSpec::fc(4), dims, take())?;
        Ok(Network {
            spec,
            backbone,
            head,
            cls_score,
            bbox_pred,
            seed,
            rng,
            backbone_runs: AtomicUsize::new(0),
            train_state: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn pool_config(&self) -> &RoiPoolConfig {
        &self.spec.pool
    }

    /// All layers: backbone, head, score projection, box projection.
    pub fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.backbone
            .iter()
            .chain(self.head.iter())
            .chain([&self.cls_score, &self.bbox_pred])
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<T>> {
        self.backbone
            .iter_mut()
            .chain(self.head.iter_mut())
            .chain([&mut self.cls_score, &mut self.bbox_pred])
    }

    pub fn backbone_layers(&self) -> &[Layer<T>] {
        &self.backbone
    }

    /// Parameters of the backbone conv layers, in order.
    pub fn conv_params(&self) -> Vec<&Params<T>> {
        self.backbone.iter().filter_map(|l| l.params()).collect()
    }

    pub fn conv_count(&self) -> usize {
        self.spec.conv_count()
    }

    /// Freezes the first `fixed` conv layers and unfreezes the rest.
    pub fn freeze_conv_layers(&mut self, fixed: usize) -> Result<()> {
        let total = self.conv_count();
        if fixed > total {
            return Err(Error::Config(format!(
                "cannot fix {fixed} conv layers, backbone has {total}"
            )));
        }
        let mut seen = 0;
        for (layer, spec) in self.backbone.iter_mut().zip(self.spec.backbone.iter_mut()) {
            if spec.is_conv() {
                let frozen = seen < fixed;
                layer.set_frozen(frozen);
                spec.frozen = frozen;
                seen += 1;
            }
        }
        Ok(())
    }

    /// Number of whole-image backbone passes since construction.
    pub fn backbone_runs(&self) -> usize {
        self.backbone_runs.load(Ordering::Relaxed)
    }

    /// Backbone output shape for an input of the given shape.
    pub fn feature_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        self.backbone.iter().try_fold(input, |shape, l| l.output_shape(shape))
    }

    /// Backbone feature map for one `[1, C, H, W]` image, without caching.
    pub fn features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.backbone_runs.fetch_add(1, Ordering::Relaxed);
        let mut x = image.clone();
        for layer in &self.backbone {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    /// Head and output projections over pooled `[R, C, H, W]` features.
    pub fn head_infer(&self, pooled: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut x = pooled.clone();
        for layer in &self.head {
            x = layer.infer(&x)?;
        }
        Ok((self.cls_score.infer(&x)?, self.bbox_pred.infer(&x)?))
    }

    /// Inference over a set of ROIs: one backbone pass, then the head per ROI.
    /// ROIs are in the coordinates of `image`.
    pub fn infer_rois(&self, image: &Tensor<T>, rois: &[BBox]) -> Result<(Tensor<T>, Tensor<T>)> {
        let features = self.features(image)?;
        let (pooled, _) = roi_pool_batch(&features, rois, &self.spec.pool)?;
        self.head_infer(&pooled)
    }

    /// Training forward pass with dropout active; caches everything the
    /// following [`Network::backward`] needs.
    pub fn forward_train(&mut self, image: &Tensor<T>, rois: &[BBox]) -> Result<(Tensor<T>, Tensor<T>)> {
        if image.batch() != 1 || image.channels() != self.spec.input_channels {
            return Err(Error::Config(format!(
                "network expects a [1, {}, H, W] image, got {:?}",
                self.spec.input_channels,
                image.shape()
            )));
        }
        self.backbone_runs.fetch_add(1, Ordering::Relaxed);
        let mut x = image.clone();
        for layer in &mut self.backbone {
            x = layer.forward(&x, true, &mut self.rng)?;
        }
        let (pooled, pool_states) = roi_pool_batch(&x, rois, &self.spec.pool)?;
        self.train_state = Some(TrainState {
            feature_shape: x.shape(),
            pool_states,
        });
        let mut h = pooled;
        for layer in &mut self.head {
            h = layer.forward(&h, true, &mut self.rng)?;
        }
        let scores = self.cls_score.forward(&h, true, &mut self.rng)?;
        let bbox = self.bbox_pred.forward(&h, true, &mut self.rng)?;
        if !scores.all_finite() || !bbox.all_finite() {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        Ok((scores, bbox))
    }

    pub fn backward(&mut self, grad_scores: &Tensor<T>, grad_bbox: &Tensor<T>) -> Result<Gradients<T>> {
        let state = self
            .train_state
            .take()
            .ok_or_else(|| Error::Usage("network backward called before forward_train".into()))?;
        let (dh_cls, g_cls) = self.cls_score.backward(grad_scores, true)?;
        let (dh_box, g_box) = self.bbox_pred.backward(grad_bbox, true)?;
        let mut dh = dh_cls.expect("requested");
        for (a, b) in dh.data_mut().iter_mut().zip(dh_box.expect("requested").data()) {
            *a += *b;
        }
        let mut head_grads = vec![None; self.head.len()];
        for (i, layer) in self.head.iter_mut().enumerate().rev() {
            let (dx, g) = layer.backward(&dh, true)?;
            head_grads[i] = g;
            dh = dx.expect("requested");
        }
        let mut backbone_grads = vec![None; self.backbone.len()];
        // layers before the first trainable one need no input gradient
        let first_trainable = self
            .backbone
            .iter()
            .position(|l| l.spec().has_params() && !l.is_frozen());
        if let Some(first) = first_trainable {
            let mut dx = roi_pool_batch_backward(&state.pool_states, &dh, state.feature_shape)?;
            for i in (first..self.backbone.len()).rev() {
                let (din, g) = self.backbone[i].backward(&dx, i > first)?;
                backbone_grads[i] = g;
                if let Some(din) = din {
                    dx = din;
                }
            }
        }
        for layer in self.layers_mut() {
            layer.clear_cache();
        }
        let mut grads = backbone_grads;
        grads.extend(head_grads);
        grads.push(g_cls);
        grads.push(g_box);
        Ok(grads)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    /// Multiply the learning rate by `gamma` every `every` iterations.
    pub every: usize,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    /// Number of leading backbone conv layers whose weights stay fixed.
    pub fixed_layers: usize,
    pub seed: u64,
    pub lr_step: Option<LrStep>,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            iterations: 2000,
            fixed_layers: 0,
            seed: 0,
            lr_step: None,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self, conv_layers: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.fixed_layers > conv_layers {
            return Err(Error::Config(format!(
                "fixed layers F = {} exceeds the {conv_layers} conv layers of the backbone",
                self.fixed_layers
            )));
        }
        if let Some(step) = self.lr_step {
            if step.every == 0 || !(step.gamma > 0.0) {
                return Err(Error::Config(format!("invalid learning-rate step {step:?}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        match self.lr_step {
            Some(LrStep { every, gamma }) => self.learning_rate * gamma.powi((iteration / every) as i32),
            None => self.learning_rate,
        }
    }
}

/// Momentum SGD: `v <- mu * v - lr * g; w <- w + v`, skipping frozen layers.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    velocity: Vec<Option<Params<T>>>,
    iteration: usize,
}

impl<T: Real> Sgd<T> {
    pub fn new(net: &Network<T>) -> Self {
        Sgd {
            velocity: net
                .layers()
                .map(|l| {
                    l.params().map(|p| Params {
                        weight: vec![T::zero(); p.weight.len()],
                        bias: vec![T::zero(); p.bias.len()],
                    })
                })
                .collect(),
            iteration: 0,
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>, cfg: &SgdConfig) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Config(format!(
                "{} gradient entries for {} layers",
                grads.len(),
                self.velocity.len()
            )));
        }
        let lr = T::of(cfg.learning_rate_at(self.iteration));
        let mu = T::of(cfg.momentum);
        let wd = T::of(cfg.weight_decay);
        for ((layer, grad), vel) in net.layers_mut().zip(grads).zip(self.velocity.iter_mut()) {
            if layer.is_frozen() {
                continue;
            }
            let (Some(g), Some(v), Some(p)) = (grad, vel.as_mut(), layer.params_mut()) else {
                continue;
            };
            if g.weight.len() != p.weight.len() || g.bias.len() != p.bias.len() {
                return Err(Error::Config(format!(
                    "gradient shape mismatch in layer {}",
                    layer.name()
                )));
            }
            for ((w, vw), gw) in p.weight.iter_mut().zip(v.weight.iter_mut()).zip(&g.weight) {
                *vw = mu * *vw - lr * (*gw + wd * *w);
                *w += *vw;
            }
            for ((b, vb), gb) in p.bias.iter_mut().zip(v.bias.iter_mut()).zip(&g.bias) {
                *vb = mu * *vb - lr * *gb;
                *b += *vb;
            }
        }
        self.iteration += 1;
        Ok(())
    }
}
