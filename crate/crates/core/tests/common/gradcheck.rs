//! Central finite-difference gradient checks (f64). Each function returns the
//! worst relative error seen over `n` random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xdepict::geometry::{BBox, BBoxDelta};
use xdepict::layers::{Init, Layer, LayerSpec};
use xdepict::loss::detection_loss;
use xdepict::network::{Network, NetworkSpec};
use xdepict::roi_pool::{roi_pool_backward, roi_pool_forward, RoiPoolConfig};
use xdepict::sampling::RoiClass;
use xdepict::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks are never crossed.
fn off_zero_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let mut t = random_tensor(rng, shape);
    for v in t.data_mut() {
        let mag = 0.05 + 0.95 * v.abs();
        *v = if rng.gen_bool(0.5) { mag } else { -mag };
    }
    t
}

/// Distinct values at least 0.01 apart, so max selections are stable under
/// the finite-difference step.
fn distinct_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 + rng.gen_range(0.0..0.002)).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_vec(shape, vals).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Objective `<upstream, layer(x)>` with a fixed dropout mask seed.
fn objective(layer: &mut Layer<f64>, x: &Tensor<f64>, upstream: &Tensor<f64>, mask_seed: u64) -> f64 {
    let y = layer.forward(x, true, &mut ChaCha8Rng::seed_from_u64(mask_seed)).unwrap();
    dot(&y, upstream)
}

fn param(layer: &mut Layer<f64>, which: usize, i: usize) -> &mut f64 {
    let p = layer.params_mut().unwrap();
    if which == 0 {
        &mut p.weight[i]
    } else {
        &mut p.bias[i]
    }
}

/// Returns the worst relative error over every input and parameter entry.
fn check_layer(mut layer: Layer<f64>, x: Tensor<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let mask_seed = rng.gen();
    let out_shape = layer.output_shape(x.shape()).unwrap();
    let upstream = random_tensor(rng, out_shape);
    layer.forward(&x, true, &mut ChaCha8Rng::seed_from_u64(mask_seed)).unwrap();
    let (dx, dp) = layer.backward(&upstream, true).unwrap();
    let dx = dx.unwrap();
    let mut worst = 0.0f64;

    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + STEP;
        let fp = objective(&mut layer, &xp, &upstream, mask_seed);
        xp.data_mut()[i] = orig - STEP;
        let fm = objective(&mut layer, &xp, &upstream, mask_seed);
        xp.data_mut()[i] = orig;
        worst = worst.max(rel_err(dx.data()[i], (fp - fm) / (2.0 * STEP)));
    }

    if let Some(dp) = dp {
        for which in 0..2 {
            let n = if which == 0 { dp.weight.len() } else { dp.bias.len() };
            for i in 0..n {
                let orig = *param(&mut layer, which, i);
                *param(&mut layer, which, i) = orig + STEP;
                let fp = objective(&mut layer, &x, &upstream, mask_seed);
                *param(&mut layer, which, i) = orig - STEP;
                let fm = objective(&mut layer, &x, &upstream, mask_seed);
                *param(&mut layer, which, i) = orig;
                let analytic = if which == 0 { dp.weight[i] } else { dp.bias[i] };
                worst = worst.max(rel_err(analytic, (fp - fm) / (2.0 * STEP)));
            }
        }
    }
    worst
}

fn run_kind(n: usize, seed: u64, mut make: impl FnMut(&mut ChaCha8Rng) -> (Layer<f64>, Tensor<f64>)) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (layer, x) = make(&mut rng);
        worst = worst.max(check_layer(layer, x, &mut rng));
    }
    worst
}

pub fn conv(n: usize) -> f64 {
    run_kind(n, 1, |rng| {
        let cin = rng.gen_range(1..=3);
        let cout = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let h = rng.gen_range(k..=6);
        let w = rng.gen_range(k..=6);
        let b = rng.gen_range(1..=2);
        let layer = Layer::new("conv", LayerSpec::conv(cout, k, stride, pad), cin, Init::Gaussian(0.5), rng).unwrap();
        (layer, random_tensor(rng, [b, cin, h, w]))
    })
}

pub fn fc(n: usize) -> f64 {
    run_kind(n, 2, |rng| {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let out = rng.gen_range(1..=5);
        let b = rng.gen_range(1..=3);
        let layer = Layer::new("fc", LayerSpec::fc(out), c * h * w, Init::Gaussian(0.5), rng).unwrap();
        (layer, random_tensor(rng, [b, c, h, w]))
    })
}

pub fn relu(n: usize) -> f64 {
    run_kind(n, 3, |rng| {
        let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5)];
        let layer = Layer::new("relu", LayerSpec::relu(), 0, Init::He, rng).unwrap();
        (layer, off_zero_tensor(rng, shape))
    })
}

pub fn max_pool(n: usize) -> f64 {
    run_kind(n, 4, |rng| {
        let window = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=3);
        let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(window..=7), rng.gen_range(window..=7)];
        let layer = Layer::new("pool", LayerSpec::max_pool(window, stride), 0, Init::He, rng).unwrap();
        (layer, distinct_tensor(rng, shape))
    })
}

pub fn dropout(n: usize) -> f64 {
    run_kind(n, 5, |rng| {
        let keep = rng.gen_range(0.2..=1.0);
        let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=3)];
        let layer = Layer::new("drop", LayerSpec::dropout(keep), 0, Init::He, rng).unwrap();
        (layer, random_tensor(rng, shape))
    })
}

pub fn roi_pool(n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (c, fh, fw) = (rng.gen_range(1..=3), rng.gen_range(1..=7), rng.gen_range(1..=7));
        let feats = distinct_tensor(&mut rng, [1, c, fh, fw]);
        let cfg = RoiPoolConfig::new(rng.gen_range(1..=4), rng.gen_range(1..=4), 1.0).unwrap();
        let x1 = rng.gen_range(0.0..fw as f64 - 0.6);
        let y1 = rng.gen_range(0.0..fh as f64 - 0.6);
        let roi = BBox::new(
            x1,
            y1,
            rng.gen_range(x1 + 0.1..fw as f64 + 0.5),
            rng.gen_range(y1 + 0.1..fh as f64 + 0.5),
        )
        .unwrap();
        let (out, state) = roi_pool_forward(&feats, &roi, &cfg).unwrap();
        let upstream: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = roi_pool_backward(&state, &upstream).unwrap();
        let f = |t: &Tensor<f64>| -> f64 {
            let (o, _) = roi_pool_forward(t, &roi, &cfg).unwrap();
            o.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let mut p = feats.clone();
        for i in 0..feats.len() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + STEP;
            let fp = f(&p);
            p.data_mut()[i] = orig - STEP;
            let fm = f(&p);
            p.data_mut()[i] = orig;
            worst = worst.max(rel_err(grad.data()[i], (fp - fm) / (2.0 * STEP)));
        }
    }
    worst
}

pub fn loss(n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let r = rng.gen_range(1..=8);
        let scores = random_tensor(&mut rng, [r, 2, 1, 1]).map(|v| 3.0 * v);
        let labels: Vec<RoiClass> = (0..r)
            .map(|_| if rng.gen_bool(0.5) { RoiClass::Positive(0) } else { RoiClass::Negative })
            .collect();
        let targets: Vec<BBoxDelta> = (0..r)
            .map(|_| BBoxDelta::from_array([0.0; 4].map(|_| rng.gen_range(-1.5..1.5))))
            .collect();
        // keep every residual away from the smooth-L1 knee at |d| = 1
        let mut bbox = Tensor::zeros([r, 4, 1, 1]);
        for i in 0..r {
            let t = targets[i].to_array();
            for j in 0..4 {
                let mag = if rng.gen_bool(0.5) { rng.gen_range(0.0..0.9) } else { rng.gen_range(1.1..2.0) };
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                bbox.set(i, j, 0, 0, t[j] + sign * mag);
            }
        }
        let lambda = rng.gen_range(0.0..2.0);
        let out = detection_loss(&scores, &bbox, &labels, &targets, lambda).unwrap();
        let loss = |s: &Tensor<f64>, b: &Tensor<f64>| detection_loss(s, b, &labels, &targets, lambda).unwrap().loss;
        for (which, analytic) in [(0, &out.grad_scores), (1, &out.grad_bbox)] {
            let base = if which == 0 { &scores } else { &bbox };
            let mut p = base.clone();
            for i in 0..p.len() {
                let orig = p.data()[i];
                p.data_mut()[i] = orig + STEP;
                let fp = if which == 0 { loss(&p, &bbox) } else { loss(&scores, &p) };
                p.data_mut()[i] = orig - STEP;
                let fm = if which == 0 { loss(&p, &bbox) } else { loss(&scores, &p) };
                p.data_mut()[i] = orig;
                worst = worst.max(rel_err(analytic.data()[i], (fp - fm) / (2.0 * STEP)));
            }
        }
    }
    worst
}

fn net_weight(net: &mut Network<f64>, layer: usize, i: usize) -> &mut f64 {
    &mut net.layers_mut().nth(layer).unwrap().params_mut().unwrap().weight[i]
}

/// Backbone and head wired together through ROI pooling, with the
/// non-linearities left out so that no kink can be crossed.
pub fn network(n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for k in 0..n as u64 {
        let spec = NetworkSpec {
            input_channels: 2,
            backbone: vec![LayerSpec::conv(3, 3, 1, 1), LayerSpec::conv(2, 3, 2, 1)],
            pool: RoiPoolConfig::new(2, 2, 0.5).unwrap(),
            head: vec![LayerSpec::fc(4)],
        };
        let mut net = Network::<f64>::new(spec, k).unwrap();
        let image = random_tensor(&mut rng, [1, 2, 8, 8]);
        let rois = vec![
            BBox::new(0.0, 0.0, 7.0, 7.0).unwrap(),
            BBox::new(1.0, 2.0, 5.0, 7.0).unwrap(),
            BBox::new(4.0, 0.0, 7.0, 3.0).unwrap(),
        ];
        let labels = [RoiClass::Positive(0), RoiClass::Negative, RoiClass::Positive(0)];
        let targets = [BBoxDelta::from_array([0.1, -0.2, 0.05, 0.3]); 3];
        let loss_of = |net: &mut Network<f64>| {
            let (s, b) = net.forward_train(&image, &rois).unwrap();
            detection_loss(&s, &b, &labels, &targets, 1.0).unwrap()
        };
        let out = loss_of(&mut net);
        let grads = net.backward(&out.grad_scores, &out.grad_bbox).unwrap();
        let n_layers = net.layers().count();
        for li in 0..n_layers {
            let Some(g) = grads[li].clone() else { continue };
            for i in 0..g.weight.len() {
                let orig = *net_weight(&mut net, li, i);
                *net_weight(&mut net, li, i) = orig + STEP;
                let fp = loss_of(&mut net).loss;
                *net_weight(&mut net, li, i) = orig - STEP;
                let fm = loss_of(&mut net).loss;
                *net_weight(&mut net, li, i) = orig;
                worst = worst.max(rel_err(g.weight[i], (fp - fm) / (2.0 * STEP)));
            }
        }
    }
    worst
}
