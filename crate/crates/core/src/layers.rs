//! Network layers: convolution, ReLU, max-pooling, fully connected and
//! inverted dropout, each with a cached forward pass and an analytic backward.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Fc {
        out_dims: usize,
    },
    Dropout {
        keep_prob: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub frozen: bool,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        }
        .into()
    }

    pub fn relu() -> Self {
        LayerKind::Relu.into()
    }

    pub fn max_pool(window: usize, stride: usize) -> Self {
        LayerKind::MaxPool { window, stride }.into()
    }

    pub fn fc(out_dims: usize) -> Self {
        LayerKind::Fc { out_dims }.into()
    }

    pub fn dropout(keep_prob: f64) -> Self {
        LayerKind::Dropout { keep_prob }.into()
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::Config(format!(
                        "conv needs positive out_channels/kernel/stride, got {:?}",
                        self.kind
                    )));
                }
            }
            LayerKind::MaxPool { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(Error::Config(format!(
                        "maxpool needs positive window/stride, got {:?}",
                        self.kind
                    )));
                }
            }
            LayerKind::Fc { out_dims } => {
                if out_dims == 0 {
                    return Err(Error::Config("fc needs positive out_dims".into()));
                }
            }
            LayerKind::Dropout { keep_prob } => {
                if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                    return Err(Error::Config(format!(
                        "dropout keep probability must lie in (0, 1], got {keep_prob}"
                    )));
                }
            }
            LayerKind::Relu => {}
        }
        Ok(())
    }

    /// Spatial downsampling factor contributed by this layer.
    pub fn stride(&self) -> usize {
        match self.kind {
            LayerKind::Conv { stride, .. } | LayerKind::MaxPool { stride, .. } => stride,
            _ => 1,
        }
    }
}

impl From<LayerKind> for LayerSpec {
    fn from(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            frozen: false,
        }
    }
}

/// Weight initialisation for a parameterised layer.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Zero-mean Gaussian with `sqrt(2 / fan_in)` standard deviation.
    He,
    Gaussian(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    /// Conv: `out x in x k x k`; fc: `out x in`, both row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub type ParamGrads<T> = Params<T>;

#[derive(Clone, Debug)]
enum Cache<T> {
    Conv {
        input_shape: [usize; 4],
        out_hw: (usize, usize),
        cols: Vec<T>,
    },
    Relu {
        input: Vec<T>,
        shape: [usize; 4],
    },
    MaxPool {
        input_shape: [usize; 4],
        out_shape: [usize; 4],
        argmax: Vec<usize>,
    },
    Fc {
        input: Tensor<T>,
    },
    Dropout {
        shape: [usize; 4],
        mask: Option<Vec<T>>,
    },
}

#[derive(Clone, Debug)]
pub struct Layer<T: Real = f32> {
    name: String,
    spec: LayerSpec,
    /// Input channels (conv) or input dimensionality (fc); unused otherwise.
    fan: usize,
    params: Option<Params<T>>,
    cache: Option<Cache<T>>,
}

impl<T: Real> Layer<T> {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        spec: LayerSpec,
        fan: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let name = name.into();
        spec.validate()
            .map_err(|e| Error::Config(format!("layer {name}: {e}")))?;
        let params = match spec.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = fan * kernel * kernel;
                Some(Params {
                    weight: gaussian(out_channels * fan_in, std_for(init, fan_in), rng),
                    bias: vec![T::zero(); out_channels],
                })
            }
            LayerKind::Fc { out_dims } => Some(Params {
                weight: gaussian(out_dims * fan, std_for(init, fan), rng),
                bias: vec![T::zero(); out_dims],
            }),
            _ => None,
        };
        if spec.has_params() && fan == 0 {
            return Err(Error::Config(format!("layer {name}: zero input size")));
        }
        Ok(Layer {
            name,
            spec,
            fan,
            params,
            cache: None,
        })
    }

    /// Builds a layer around existing parameters (checkpoint loading, tests).
    pub fn with_params(
        name: impl Into<String>,
        spec: LayerSpec,
        fan: usize,
        params: Option<Params<T>>,
    ) -> Result<Self> {
        let name = name.into();
        spec.validate()
            .map_err(|e| Error::Config(format!("layer {name}: {e}")))?;
        let expected = match spec.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                ..
            } => Some((out_channels * fan * kernel * kernel, out_channels)),
            LayerKind::Fc { out_dims } => Some((out_dims * fan, out_dims)),
            _ => None,
        };
        match (&params, expected) {
            (Some(p), Some((w, b))) if p.weight.len() == w && p.bias.len() == b => {}
            (None, None) => {}
            _ => {
                return Err(Error::Config(format!(
                    "layer {name}: parameter shapes do not match {:?} with fan {fan}",
                    spec.kind
                )))
            }
        }
        Ok(Layer {
            name,
            spec,
            fan,
            params,
            cache: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn fan(&self) -> usize {
        self.fan
    }

    pub fn is_frozen(&self) -> bool {
        self.spec.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.spec.frozen = frozen;
    }

    pub fn params(&self) -> Option<&Params<T>> {
        self.params.as_ref()
    }

    pub fn params_mut(&mut self) -> Option<&mut Params<T>> {
        self.params.as_mut()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Output shape for a given input shape, or a configuration error naming
    /// this layer.
    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input;
        let mismatch = |what: String| Error::Config(format!("layer {}: {what}", self.name));
        match self.spec.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                if c != self.fan {
                    return Err(mismatch(format!(
                        "expects {} input channels, got {c}",
                        self.fan
                    )));
                }
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(mismatch(format!(
                        "{h}x{w} input is smaller than the {kernel}x{kernel} kernel"
                    )));
                }
                Ok([
                    n,
                    out_channels,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerKind::MaxPool { window, stride } => {
                if h < window || w < window {
                    return Err(mismatch(format!(
                        "{h}x{w} input is smaller than the {window}x{window} pooling window"
                    )));
                }
                Ok([n, c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerKind::Fc { out_dims } => {
                if c * h * w != self.fan {
                    return Err(mismatch(format!(
                        "expects {} input features, got {}",
                        self.fan,
                        c * h * w
                    )));
                }
                Ok([n, out_dims, 1, 1])
            }
            LayerKind::Relu | LayerKind::Dropout { .. } => Ok(input),
        }
    }

    /// Inference pass: no state retained, dropout is the identity.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, _) = self.run(input, false, None::<&mut rand::rngs::mock::StepRng>, false)?;
        Ok(out)
    }

    /// Training-capable pass that caches what `backward` needs.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        input: &Tensor<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let (out, cache) = self.run(input, training, Some(rng), true)?;
        self.cache = cache;
        Ok(out)
    }

    fn run<R: Rng + ?Sized>(
        &self,
        input: &Tensor<T>,
        training: bool,
        rng: Option<&mut R>,
        keep: bool,
    ) -> Result<(Tensor<T>, Option<Cache<T>>)> {
        let out_shape = self.output_shape(input.shape())?;
        match self.spec.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let p = self.params.as_ref().expect("conv has params");
                let [n, c, h, w] = input.shape();
                let (ho, wo) = (out_shape[2], out_shape[3]);
                let ckk = c * kernel * kernel;
                let plane = ho * wo;
                let mut out = Tensor::zeros(out_shape);
                let mut cols_all = if keep {
                    vec![T::zero(); n * ckk * plane]
                } else {
                    Vec::new()
                };
                let mut scratch = if keep {
                    Vec::new()
                } else {
                    vec![T::zero(); ckk * plane]
                };
                for b in 0..n {
                    let cols: &mut [T] = if keep {
                        &mut cols_all[b * ckk * plane..(b + 1) * ckk * plane]
                    } else {
                        &mut scratch
                    };
                    im2col(input.item(b), c, h, w, kernel, stride, pad, ho, wo, cols);
                    let dst = out.item_mut(b);
                    for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                        chunk.fill(p.bias[o]);
                    }
                    T::gemm(
                        out_channels,
                        ckk,
                        plane,
                        T::one(),
                        &p.weight,
                        false,
                        cols,
                        false,
                        T::one(),
                        dst,
                    );
                }
                let cache = keep.then(|| Cache::Conv {
                    input_shape: input.shape(),
                    out_hw: (ho, wo),
                    cols: cols_all,
                });
                Ok((out, cache))
            }
            LayerKind::Relu => {
                let out = input.map(|x| if x > T::zero() { x } else { T::zero() });
                let cache = keep.then(|| Cache::Relu {
                    input: input.data().to_vec(),
                    shape: input.shape(),
                });
                Ok((out, cache))
            }
            LayerKind::MaxPool { window, stride } => {
                let [n, c, h, w] = input.shape();
                let (ho, wo) = (out_shape[2], out_shape[3]);
                let mut out = Tensor::zeros(out_shape);
                let mut argmax = vec![0usize; out.len()];
                let src = input.data();
                let mut k = 0;
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = base + oy * stride * w + ox * stride;
                            for dy in 0..window {
                                let row = base + (oy * stride + dy) * w + ox * stride;
                                for dx in 0..window {
                                    if src[row + dx] > src[best] {
                                        best = row + dx;
                                    }
                                }
                            }
                            out.data_mut()[k] = src[best];
                            argmax[k] = best;
                            k += 1;
                        }
                    }
                }
                let cache = keep.then(|| Cache::MaxPool {
                    input_shape: input.shape(),
                    out_shape,
                    argmax,
                });
                Ok((out, cache))
            }
            LayerKind::Fc { out_dims } => {
                let p = self.params.as_ref().expect("fc has params");
                let n = input.batch();
                let mut data = Vec::with_capacity(n * out_dims);
                for _ in 0..n {
                    data.extend_from_slice(&p.bias);
                }
                T::gemm(
                    n,
                    self.fan,
                    out_dims,
                    T::one(),
                    input.data(),
                    false,
                    &p.weight,
                    true,
                    T::one(),
                    &mut data,
                );
                let out = Tensor::from_vec(out_shape, data)?;
                let cache = keep.then(|| Cache::Fc {
                    input: input.clone(),
                });
                Ok((out, cache))
            }
            LayerKind::Dropout { keep_prob } => {
                if !training || keep_prob >= 1.0 {
                    let cache = keep.then(|| Cache::Dropout {
                        shape: input.shape(),
                        mask: None,
                    });
                    return Ok((input.clone(), cache));
                }
                let rng = rng.ok_or_else(|| {
                    Error::Usage(format!("layer {}: training dropout needs an rng", self.name))
                })?;
                let scale = T::of(1.0 / keep_prob);
                let mask: Vec<T> = (0..input.len())
                    .map(|_| {
                        if rng.gen::<f64>() < keep_prob {
                            scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let mut out = input.clone();
                for (x, m) in out.data_mut().iter_mut().zip(&mask) {
                    *x *= *m;
                }
                let cache = keep.then(|| Cache::Dropout {
                    shape: input.shape(),
                    mask: Some(mask),
                });
                Ok((out, cache))
            }
        }
    }

    /// Propagates `upstream` (gradient w.r.t. this layer's output) back to the
    /// input. Parameter gradients are returned for unfrozen conv/fc layers.
    /// Pass `need_input_grad = false` for the first trainable layer to skip
    /// the input-gradient computation.
    pub fn backward(
        &mut self,
        upstream: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor<T>>, Option<ParamGrads<T>>)> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            Error::Usage(format!(
                "layer {}: backward called before forward",
                self.name
            ))
        })?;
        let shape_err = |expected: [usize; 4]| {
            Error::Config(format!(
                "layer {}: upstream gradient shape {:?} does not match output {:?}",
                self.name,
                upstream.shape(),
                expected
            ))
        };
        match (cache, &self.spec.kind) {
            (
                Cache::Conv {
                    input_shape,
                    out_hw,
                    cols,
                },
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                },
            ) => {
                let [n, c, h, w] = *input_shape;
                let (ho, wo) = *out_hw;
                let expected = [n, *out_channels, ho, wo];
                if upstream.shape() != expected {
                    return Err(shape_err(expected));
                }
                let p = self.params.as_ref().expect("conv has params");
                let ckk = c * kernel * kernel;
                let plane = ho * wo;
                let want_params = !self.spec.frozen;
                let mut grads = want_params.then(|| Params {
                    weight: vec![T::zero(); p.weight.len()],
                    bias: vec![T::zero(); p.bias.len()],
                });
                let mut dx = need_input_grad.then(|| Tensor::zeros(*input_shape));
                let mut dcols = vec![T::zero(); if need_input_grad { ckk * plane } else { 0 }];
                for b in 0..n {
                    let dout = upstream.item(b);
                    let col = &cols[b * ckk * plane..(b + 1) * ckk * plane];
                    if let Some(g) = grads.as_mut() {
                        T::gemm(
                            *out_channels,
                            plane,
                            ckk,
                            T::one(),
                            dout,
                            false,
                            col,
                            true,
                            T::one(),
                            &mut g.weight,
                        );
                        for (o, chunk) in dout.chunks(plane).enumerate() {
                            g.bias[o] += chunk.iter().copied().sum::<T>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        T::gemm(
                            ckk,
                            *out_channels,
                            plane,
                            T::one(),
                            &p.weight,
                            true,
                            dout,
                            false,
                            T::zero(),
                            &mut dcols,
                        );
                        col2im(&dcols, c, h, w, *kernel, *stride, *pad, ho, wo, dx.item_mut(b));
                    }
                }
                Ok((dx, grads))
            }
            (Cache::Relu { input, shape }, LayerKind::Relu) => {
                if upstream.shape() != *shape {
                    return Err(shape_err(*shape));
                }
                let dx = need_input_grad.then(|| {
                    let data = input
                        .iter()
                        .zip(upstream.data())
                        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    Tensor::from_vec(*shape, data).expect("shape checked")
                });
                Ok((dx, None))
            }
            (
                Cache::MaxPool {
                    input_shape,
                    out_shape,
                    argmax,
                },
                LayerKind::MaxPool { .. },
            ) => {
                if upstream.shape() != *out_shape {
                    return Err(shape_err(*out_shape));
                }
                let dx = need_input_grad.then(|| {
                    let mut dx = Tensor::zeros(*input_shape);
                    let d = dx.data_mut();
                    for (&idx, &g) in argmax.iter().zip(upstream.data()) {
                        d[idx] += g;
                    }
                    dx
                });
                Ok((dx, None))
            }
            (Cache::Fc { input }, LayerKind::Fc { out_dims }) => {
                let n = input.batch();
                let expected = [n, *out_dims, 1, 1];
                if upstream.shape() != expected {
                    return Err(shape_err(expected));
                }
                let p = self.params.as_ref().expect("fc has params");
                let grads = (!self.spec.frozen).then(|| {
                    let mut weight = vec![T::zero(); p.weight.len()];
                    T::gemm(
                        *out_dims,
                        n,
                        self.fan,
                        T::one(),
                        upstream.data(),
                        true,
                        input.data(),
                        false,
                        T::zero(),
                        &mut weight,
                    );
                    let mut bias = vec![T::zero(); *out_dims];
                    for row in upstream.data().chunks(*out_dims) {
                        for (b, &g) in bias.iter_mut().zip(row) {
                            *b += g;
                        }
                    }
                    Params { weight, bias }
                });
                let dx = need_input_grad.then(|| {
                    let mut data = vec![T::zero(); n * self.fan];
                    T::gemm(
                        n,
                        *out_dims,
                        self.fan,
                        T::one(),
                        upstream.data(),
                        false,
                        &p.weight,
                        false,
                        T::zero(),
                        &mut data,
                    );
                    Tensor::from_vec(input.shape(), data).expect("shape checked")
                });
                Ok((dx, grads))
            }
            (Cache::Dropout { shape, mask }, LayerKind::Dropout { .. }) => {
                if upstream.shape() != *shape {
                    return Err(shape_err(*shape));
                }
                let dx = need_input_grad.then(|| match mask {
                    None => upstream.clone(),
                    Some(mask) => {
                        let mut g = upstream.clone();
                        for (x, m) in g.data_mut().iter_mut().zip(mask) {
                            *x *= *m;
                        }
                        g
                    }
                });
                Ok((dx, None))
            }
            _ => unreachable!("cache kind always matches layer kind"),
        }
    }
}

fn std_for(init: Init, fan_in: usize) -> f64 {
    match init {
        Init::He => (2.0 / fan_in.max(1) as f64).sqrt(),
        Init::Gaussian(std) => std,
    }
}

fn gaussian<T: Real, R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> Vec<T> {
    let normal = Normal::new(0.0, std).expect("non-negative std");
    (0..len).map(|_| T::of(normal.sample(rng))).collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix >= 0 && ix < w as isize {
                            srow[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
