//! Graph-based segmentation (Felzenszwalb & Huttenlocher) on a 4-connected
//! pixel grid, plus the per-region colour and texture histograms used by
//! selective search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::proposals::color::FloatImage;

pub const COLOR_BINS: usize = 25;
pub const TEXTURE_ORIENTATIONS: usize = 8;
pub const TEXTURE_BINS: usize = 10;
pub const COLOR_HIST_LEN: usize = COLOR_BINS * 3;
pub const TEXTURE_HIST_LEN: usize = TEXTURE_ORIENTATIONS * TEXTURE_BINS * 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationParams {
    /// Merging threshold scale: larger values favour larger components.
    pub k: f64,
    pub min_size: usize,
    pub gaussian_sigma: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            k: 100.0,
            min_size: 50,
            gaussian_sigma: 0.8,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) || self.min_size == 0 || !(self.gaussian_sigma >= 0.0) {
            return Err(Error::Config(format!("invalid segmentation parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    /// Raster indices `y * width + x`, ascending.
    pub pixels: Vec<u32>,
    pub bbox: BBox,
    pub size: usize,
    /// 25 bins per channel, L1-normalised over all 75 entries.
    pub color_hist: Vec<f32>,
    /// 8 orientations x 10 bins per channel, L1-normalised over all 240 entries.
    pub texture_hist: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    /// Region index per pixel.
    pub labels: Vec<u32>,
    pub regions: Vec<Region>,
}

impl Segmentation {
    /// Unordered pairs of regions sharing a 4-neighbour boundary, sorted.
    pub fn adjacency(&self) -> Vec<(usize, usize)> {
        let mut pairs = std::collections::BTreeSet::new();
        let (w, h) = (self.width, self.height);
        for y in 0..h {
            for x in 0..w {
                let a = self.labels[y * w + x] as usize;
                if x + 1 < w {
                    let b = self.labels[y * w + x + 1] as usize;
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
                if y + 1 < h {
                    let b = self.labels[(y + 1) * w + x] as usize;
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
        pairs.into_iter().collect()
    }
}

struct DisjointSet {
    parent: Vec<u32>,
    size: Vec<u32>,
    threshold: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize, k: f64) -> Self {
        DisjointSet {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            threshold: vec![k; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        big
    }
}

pub(crate) fn gaussian_blur(img: &FloatImage, sigma: f64) -> FloatImage {
    if sigma < 0.01 {
        return img.clone();
    }
    let radius = (4.0 * sigma).ceil() as i64 + 1;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|v| (v / norm) as f32).collect();
    let (w, h) = (img.width as i64, img.height as i64);
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f32; 3];
            for (ki, kv) in kernel.iter().enumerate() {
                let xx = (x + ki as i64 - radius).clamp(0, w - 1);
                let p = img.get(xx as usize, y as usize);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            tmp.set(x as usize, y as usize, acc);
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f32; 3];
            for (ki, kv) in kernel.iter().enumerate() {
                let yy = (y + ki as i64 - radius).clamp(0, h - 1);
                let p = tmp.get(x as usize, yy as usize);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            out.set(x as usize, y as usize, acc);
        }
    }
    out
}

/// Segments a 3-channel image whose values lie in `[0, 255]`.
pub fn segment_float(img: &FloatImage, params: &SegmentationParams) -> Segmentation {
    let (w, h) = (img.width, img.height);
    let n = w * h;
    let smooth = gaussian_blur(img, params.gaussian_sigma);
    let dist = |a: usize, b: usize| -> f64 {
        let (p, q) = (smooth.data[a], smooth.data[b]);
        let d: f32 = (0..3).map(|c| (p[c] - q[c]) * (p[c] - q[c])).sum();
        (d as f64).sqrt()
    };
    let mut edges: Vec<(f64, u32, u32)> = Vec::with_capacity(2 * n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                edges.push((dist(i, i + 1), i as u32, (i + 1) as u32));
            }
            if y + 1 < h {
                edges.push((dist(i, i + w), i as u32, (i + w) as u32));
            }
        }
    }
    // stable sort keeps raster order among equal weights
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut ds = DisjointSet::new(n, params.k);
    for &(wt, a, b) in &edges {
        let ra = ds.find(a);
        let rb = ds.find(b);
        if ra != rb && wt <= ds.threshold[ra as usize] && wt <= ds.threshold[rb as usize] {
            let r = ds.union(ra, rb);
            ds.threshold[r as usize] = wt + params.k / ds.size[r as usize] as f64;
        }
    }
    for &(_, a, b) in &edges {
        let ra = ds.find(a);
        let rb = ds.find(b);
        if ra != rb
            && (ds.size[ra as usize] < params.min_size as u32
                || ds.size[rb as usize] < params.min_size as u32)
        {
            ds.union(ra, rb);
        }
    }

    // relabel in raster order of first appearance
    let mut label_of_root = vec![u32::MAX; n];
    let mut labels = vec![0u32; n];
    let mut count = 0u32;
    for i in 0..n {
        let r = ds.find(i as u32) as usize;
        if label_of_root[r] == u32::MAX {
            label_of_root[r] = count;
            count += 1;
        }
        labels[i] = label_of_root[r];
    }
    let regions = build_regions(img, &labels, count as usize);
    Segmentation {
        width: w,
        height: h,
        labels,
        regions,
    }
}

/// Per-pixel texture bin indices: for each channel and orientation, the bin of
/// the min-max normalised oriented derivative response.
fn texture_bins(img: &FloatImage) -> Vec<[u8; TEXTURE_ORIENTATIONS * 3]> {
    let (w, h) = (img.width, img.height);
    let smooth = gaussian_blur(img, 1.0);
    let mut responses = vec![[0f32; TEXTURE_ORIENTATIONS * 3]; w * h];
    let dirs: Vec<(f32, f32)> = (0..TEXTURE_ORIENTATIONS)
        .map(|k| {
            let t = k as f32 * std::f32::consts::PI * 2.0 / TEXTURE_ORIENTATIONS as f32;
            (t.cos(), t.sin())
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            let r = &mut responses[y * w + x];
            for c in 0..3 {
                let gx = 0.5 * (smooth.get(xr, y)[c] - smooth.get(xl, y)[c]);
                let gy = 0.5 * (smooth.get(x, yd)[c] - smooth.get(x, yu)[c]);
                for (o, (dc, ds)) in dirs.iter().enumerate() {
                    r[c * TEXTURE_ORIENTATIONS + o] = (gx * dc + gy * ds).max(0.0);
                }
            }
        }
    }
    let mut lo = [f32::INFINITY; TEXTURE_ORIENTATIONS * 3];
    let mut hi = [f32::NEG_INFINITY; TEXTURE_ORIENTATIONS * 3];
    for r in &responses {
        for i in 0..r.len() {
            lo[i] = lo[i].min(r[i]);
            hi[i] = hi[i].max(r[i]);
        }
    }
    responses
        .iter()
        .map(|r| {
            let mut bins = [0u8; TEXTURE_ORIENTATIONS * 3];
            for i in 0..r.len() {
                let span = hi[i] - lo[i];
                let t = if span > 0.0 { (r[i] - lo[i]) / span } else { 0.0 };
                bins[i] = ((t * TEXTURE_BINS as f32) as usize).min(TEXTURE_BINS - 1) as u8;
            }
            bins
        })
        .collect()
}

fn normalise(hist: &mut [f32]) {
    let total: f32 = hist.iter().sum();
    if total > 0.0 {
        hist.iter_mut().for_each(|v| *v /= total);
    }
}

fn build_regions(img: &FloatImage, labels: &[u32], count: usize) -> Vec<Region> {
    let w = img.width;
    let tex = texture_bins(img);
    let mut regions: Vec<Region> = (0..count)
        .map(|_| Region {
            pixels: Vec::new(),
            bbox: BBox {
                x1: f64::INFINITY,
                y1: f64::INFINITY,
                x2: f64::NEG_INFINITY,
                y2: f64::NEG_INFINITY,
            },
            size: 0,
            color_hist: vec![0.0; COLOR_HIST_LEN],
            texture_hist: vec![0.0; TEXTURE_HIST_LEN],
        })
        .collect();
    for (i, &l) in labels.iter().enumerate() {
        let r = &mut regions[l as usize];
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        r.pixels.push(i as u32);
        r.size += 1;
        r.bbox.x1 = r.bbox.x1.min(x);
        r.bbox.y1 = r.bbox.y1.min(y);
        r.bbox.x2 = r.bbox.x2.max(x + 1.0);
        r.bbox.y2 = r.bbox.y2.max(y + 1.0);
        let p = img.data[i];
        for c in 0..3 {
            let bin = ((p[c].clamp(0.0, 255.0) / 256.0 * COLOR_BINS as f32) as usize).min(COLOR_BINS - 1);
            r.color_hist[c * COLOR_BINS + bin] += 1.0;
        }
        for (j, &b) in tex[i].iter().enumerate() {
            r.texture_hist[j * TEXTURE_BINS + b as usize] += 1.0;
        }
    }
    for r in &mut regions {
        normalise(&mut r.color_hist);
        normalise(&mut r.texture_hist);
    }
    regions
}
