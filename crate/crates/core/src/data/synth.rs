//! Synthetic multi-style "blob people" dataset.
//!
//! Each person is a head disc plus capsule torso, arms and legs at random
//! angles. Styles change how people are drawn (solid, outline, stripes,
//! whole-image inversion, heavy noise). Ground-truth boxes are the tight
//! bounds of each person's visible pixels after later people and occluders
//! have been drawn on top.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{BoxRecord, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Filled,
    Outline,
    Textured,
    Inverted,
    Noisy,
}

impl Style {
    pub const ALL: [Style; 5] = [Style::Filled, Style::Outline, Style::Textured, Style::Inverted, Style::Noisy];

    pub fn name(self) -> &'static str {
        match self {
            Style::Filled => "filled",
            Style::Outline => "outline",
            Style::Textured => "textured",
            Style::Inverted => "inverted",
            Style::Noisy => "noisy",
        }
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Style::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown style {s:?}")))
    }
}

/// Tiny people (shorter than this) are flagged difficult.
pub const TINY_HEIGHT: f64 = 15.0;
/// People with less than this fraction of their silhouette visible are
/// flagged difficult.
pub const MIN_VISIBLE_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub width: u32,
    pub height: u32,
    pub people_min: usize,
    pub people_max: usize,
    /// Height range of normally sized people, in pixels.
    pub person_height_min: f64,
    pub person_height_max: f64,
    pub styles: Vec<Style>,
    /// Chance that a person is partly covered by an occluding rectangle.
    pub occlusion_prob: f64,
    /// Chance that a person is rendered as a hard instance (tiny or mostly
    /// occluded), which then earns the difficult flag.
    pub difficult_prob: f64,
    /// Upper bound on non-person clutter shapes per image.
    pub max_distractors: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train: 200,
            val: 50,
            test: 100,
            width: 128,
            height: 128,
            people_min: 1,
            people_max: 3,
            person_height_min: 40.0,
            person_height_max: 90.0,
            styles: Style::ALL.to_vec(),
            occlusion_prob: 0.15,
            difficult_prob: 0.05,
            max_distractors: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")))
            }
        };
        prob("occlusion probability", self.occlusion_prob)?;
        prob("difficult probability", self.difficult_prob)?;
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!(
                "images must be at least 16x16, got {}x{}",
                self.width, self.height
            )));
        }
        if self.people_min > self.people_max {
            return Err(Error::Config(format!(
                "people range {}..={} is empty",
                self.people_min, self.people_max
            )));
        }
        if !(self.person_height_min >= 4.0 && self.person_height_min <= self.person_height_max) {
            return Err(Error::Config(format!(
                "person height range {}..{} is invalid",
                self.person_height_min, self.person_height_max
            )));
        }
        if self.styles.is_empty() {
            return Err(Error::Config("style set is empty".into()));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
            Split::Trainval => self.train + self.val,
        }
    }
}

fn image_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut z = seed
        ^ (split as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPerson {
    pub bbox: BBox,
    pub difficult: bool,
    pub silhouette_pixels: usize,
    pub visible_pixels: usize,
}

#[derive(Clone, Debug)]
pub struct SynthImage {
    pub image: RgbImage,
    pub style: Style,
    pub people: Vec<SynthPerson>,
    /// Per pixel, the index into `people` of the person visible there.
    pub owner: Vec<Option<u16>>,
}

/// Capsule (thick segment) or disc (zero-length capsule).
#[derive(Clone, Copy)]
struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    r: f64,
}

impl Capsule {
    fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (self.a.0 + t * dx, self.a.1 + t * dy);
        (p.0 - cx).powi(2) + (p.1 - cy).powi(2) <= self.r * self.r
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.a.0.min(self.b.0) - self.r,
            self.a.1.min(self.b.1) - self.r,
            self.a.0.max(self.b.0) + self.r,
            self.a.1.max(self.b.1) + self.r,
        )
    }
}

fn body_parts(rng: &mut ChaCha8Rng, top: (f64, f64), h: f64) -> Vec<Capsule> {
    let lean: f64 = rng.gen_range(-0.15..0.15);
    let (sl, cl) = lean.sin_cos();
    // body frame: x right, y down from the top of the head
    let place = |x: f64, y: f64| (top.0 + x * cl - y * sl, top.1 + x * sl + y * cl);
    let min_r = 0.6;
    let head_r = (0.11 * h).max(min_r);
    let neck = 2.0 * head_r;
    let shoulder = neck + 0.06 * h;
    let hip = neck + 0.36 * h;
    let leg_len = (h - hip - 0.02 * h).max(1.0);
    let limb = |from: (f64, f64), angle: f64, len: f64, r: f64| Capsule {
        a: place(from.0, from.1),
        b: place(from.0 + len * angle.sin(), from.1 + len * angle.cos()),
        r: r.max(min_r),
    };
    let mut parts = vec![
        Capsule {
            a: place(0.0, head_r),
            b: place(0.0, head_r),
            r: head_r,
        },
        Capsule {
            a: place(0.0, neck + 0.04 * h),
            b: place(0.0, hip),
            r: (0.09 * h).max(min_r),
        },
    ];
    let spread_l: f64 = rng.gen_range(0.05..0.45);
    let spread_r: f64 = rng.gen_range(0.05..0.45);
    let leg_r = 0.045 * h;
    parts.push(limb((-0.03 * h, hip), -spread_l, leg_len / spread_l.cos(), leg_r));
    parts.push(limb((0.03 * h, hip), spread_r, leg_len / spread_r.cos(), leg_r));
    let arm_r = 0.035 * h;
    let arm_len = 0.33 * h;
    let arm_l: f64 = rng.gen_range(0.2..2.6);
    let arm_r_angle: f64 = rng.gen_range(0.2..2.6);
    parts.push(limb((-0.06 * h, shoulder), -arm_l, arm_len, arm_r));
    parts.push(limb((0.06 * h, shoulder), arm_r_angle, arm_len, arm_r));
    parts
}

fn random_colour(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn colour_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// A colour far from every colour in `avoid`.
fn contrasting_colour(rng: &mut ChaCha8Rng, avoid: &[[u8; 3]], min_dist: f64) -> [u8; 3] {
    let mut best = ([0u8; 3], -1.0);
    for _ in 0..64 {
        let c = random_colour(rng);
        let d = avoid.iter().map(|a| colour_distance(c, *a)).fold(f64::INFINITY, f64::min);
        if d >= min_dist {
            return c;
        }
        if d > best.1 {
            best = (c, d);
        }
    }
    best.0
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (a[c] as f64 + (b[c] as f64 - a[c] as f64) * t).round() as u8;
    }
    out
}

/// Renders one image. Deterministic in `(cfg.seed, split, index)`.
pub fn render_image(cfg: &SynthConfig, split: Split, index: usize) -> SynthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, split, index));
    let (w, h) = (cfg.width as usize, cfg.height as usize);
    let style = cfg.styles[rng.gen_range(0..cfg.styles.len())];

    // background gradient
    let c0 = random_colour(&mut rng);
    let c1 = random_colour(&mut rng);
    let vertical = rng.gen_bool(0.5);
    let background: Vec<[u8; 3]> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let t = if vertical { y as f64 / (h - 1) as f64 } else { x as f64 / (w - 1) as f64 };
            lerp(c0, c1, t)
        })
        .collect();
    let mut pixels = background.clone();

    // clutter: rectangles and ellipses
    for _ in 0..rng.gen_range(0..=cfg.max_distractors) {
        let colour = random_colour(&mut rng);
        let sw = rng.gen_range(6.0..(w as f64 * 0.35).max(7.0));
        let sh = rng.gen_range(6.0..(h as f64 * 0.25).max(7.0));
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let ellipse = rng.gen_bool(0.5);
        for (i, p) in pixels.iter_mut().enumerate() {
            let dx = ((i % w) as f64 + 0.5 - cx) / (sw / 2.0);
            let dy = ((i / w) as f64 + 0.5 - cy) / (sh / 2.0);
            let inside = if ellipse { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
            if inside {
                *p = colour;
            }
        }
    }

    let n_people = rng.gen_range(cfg.people_min..=cfg.people_max);
    let mut owner: Vec<Option<u16>> = vec![None; w * h];
    let mut silhouettes = Vec::with_capacity(n_people);
    let mut placed: Vec<BBox> = Vec::new();
    let mut heavy_occlusion = Vec::with_capacity(n_people);
    for p in 0..n_people {
        let hard = rng.gen_bool(cfg.difficult_prob);
        let tiny = hard && rng.gen_bool(0.5);
        heavy_occlusion.push(hard && !tiny);
        let ph = if tiny {
            rng.gen_range(8.0..TINY_HEIGHT)
        } else {
            rng.gen_range(cfg.person_height_min..=cfg.person_height_max).min(h as f64 - 2.0)
        };
        // keep people mostly apart; accept overlap after a few tries
        let mut top = (0.0, 0.0);
        for attempt in 0..20 {
            let x = rng.gen_range(0.15 * w as f64..0.85 * w as f64);
            let y = rng.gen_range(1.0..(h as f64 - ph - 1.0).max(1.5));
            top = (x, y);
            let nominal = BBox {
                x1: x - 0.3 * ph,
                y1: y,
                x2: x + 0.3 * ph,
                y2: y + ph,
            };
            if attempt == 19 || placed.iter().all(|b| crate::geometry::iou(b, &nominal) < 0.15) {
                placed.push(nominal);
                break;
            }
        }
        let parts = body_parts(&mut rng, top, ph);
        let (mut bx1, mut by1, mut bx2, mut by2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for c in &parts {
            let (a, b, cc, d) = c.bounds();
            bx1 = bx1.min(a);
            by1 = by1.min(b);
            bx2 = bx2.max(cc);
            by2 = by2.max(d);
        }
        let xr = (bx1.floor().max(0.0) as usize)..(bx2.ceil().min(w as f64).max(0.0) as usize);
        let yr = (by1.floor().max(0.0) as usize)..(by2.ceil().min(h as f64).max(0.0) as usize);
        let mut mask = vec![false; w * h];
        let mut count = 0;
        for y in yr.clone() {
            for x in xr.clone() {
                let c = (x as f64 + 0.5, y as f64 + 0.5);
                if parts.iter().any(|part| part.contains(c)) {
                    mask[y * w + x] = true;
                    count += 1;
                }
            }
        }

        let nearby: Vec<[u8; 3]> = yr
            .clone()
            .step_by(3)
            .flat_map(|y| xr.clone().step_by(3).map(move |x| (x, y)))
            .map(|(x, y)| pixels[y * w + x])
            .chain([c0, c1])
            .collect();
        let colour = contrasting_colour(&mut rng, &nearby, 140.0);
        let second = contrasting_colour(&mut rng, &[colour], 110.0);
        let period = rng.gen_range(3..6);
        let inside = |x: usize, y: usize| x < w && y < h && mask[y * w + x];
        for y in yr.clone() {
            for x in xr.clone() {
                let i = y * w + x;
                if !mask[i] {
                    continue;
                }
                owner[i] = Some(p as u16);
                pixels[i] = match style {
                    Style::Outline => {
                        let edge = (1..=2).any(|d| {
                            !inside(x.wrapping_sub(d), y)
                                || !inside(x + d, y)
                                || !inside(x, y.wrapping_sub(d))
                                || !inside(x, y + d)
                        });
                        if edge {
                            colour
                        } else {
                            background[i]
                        }
                    }
                    Style::Textured => {
                        if ((x + y) / period) % 2 == 0 {
                            colour
                        } else {
                            second
                        }
                    }
                    _ => colour,
                };
            }
        }
        silhouettes.push(count);
    }

    // occluders cover part of a person's nominal box
    for (p, nominal) in placed.iter().enumerate() {
        let heavy = heavy_occlusion[p];
        if !heavy && !rng.gen_bool(cfg.occlusion_prob) {
            continue;
        }
        let frac = if heavy { rng.gen_range(0.6..0.85) } else { rng.gen_range(0.2..0.45) };
        let mut r = *nominal;
        match rng.gen_range(0..3) {
            0 => r.y1 = r.y2 - frac * nominal.height(),
            1 => r.x2 = r.x1 + frac * nominal.width(),
            _ => r.x1 = r.x2 - frac * nominal.width(),
        }
        // extend past the nominal box so limbs are covered as well
        r.x1 -= 0.15 * nominal.width();
        r.x2 += 0.15 * nominal.width();
        if r.y2 >= nominal.y2 {
            r.y2 += 0.1 * nominal.height();
        }
        let colour = random_colour(&mut rng);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                if fx >= r.x1 && fx < r.x2 && fy >= r.y1 && fy < r.y2 {
                    pixels[y * w + x] = colour;
                    owner[y * w + x] = None;
                }
            }
        }
    }

    match style {
        Style::Inverted => {
            for p in pixels.iter_mut() {
                *p = [255 - p[0], 255 - p[1], 255 - p[2]];
            }
        }
        Style::Noisy => {
            let noise = Normal::new(0.0, 28.0).expect("valid sigma");
            for p in pixels.iter_mut() {
                for c in p.iter_mut() {
                    *c = (*c as f64 + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        _ => {}
    }

    let mut people = Vec::new();
    let mut remap: Vec<Option<u16>> = vec![None; n_people];
    for (p, &silhouette) in silhouettes.iter().enumerate() {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        let mut visible = 0;
        for (i, o) in owner.iter().enumerate() {
            if *o == Some(p as u16) {
                let (x, y) = (i % w, i / w);
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x);
                y2 = y2.max(y);
                visible += 1;
            }
        }
        if visible == 0 {
            continue;
        }
        let bbox = BBox {
            x1: x1 as f64,
            y1: y1 as f64,
            x2: (x2 + 1) as f64,
            y2: (y2 + 1) as f64,
        };
        let fraction = visible as f64 / silhouette.max(1) as f64;
        remap[p] = Some(people.len() as u16);
        people.push(SynthPerson {
            bbox,
            difficult: bbox.height() < TINY_HEIGHT || fraction < MIN_VISIBLE_FRACTION,
            silhouette_pixels: silhouette,
            visible_pixels: visible,
        });
    }
    for o in owner.iter_mut() {
        *o = o.and_then(|p| remap[p as usize]);
    }

    let mut image = RgbImage::new(cfg.width, cfg.height);
    for (i, p) in pixels.into_iter().enumerate() {
        image.put_pixel((i % w) as u32, (i / w) as u32, Rgb(p));
    }
    SynthImage {
        image,
        style,
        people,
        owner,
    }
}

pub fn image_rel_path(split: Split, index: usize) -> String {
    format!("images/{}/{:04}.png", split.name(), index)
}

/// Manifest entry for a rendered image.
pub fn manifest_entry(img: &SynthImage, path: String) -> ManifestEntry {
    ManifestEntry {
        path,
        width: img.image.width(),
        height: img.image.height(),
        style: Some(img.style.name().to_string()),
        boxes: img
            .people
            .iter()
            .map(|p| BoxRecord::from_bbox(&p.bbox, p.difficult, img.style.name()))
            .collect(),
    }
}

/// Builds a split's manifest in memory without writing images.
pub fn synth_manifest(cfg: &SynthConfig, split: Split, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let styles = {
        let mut s: Vec<Style> = cfg.styles.clone();
        s.sort();
        s.dedup();
        s.iter().map(|s| s.name().to_string()).collect()
    };
    let mut m = DatasetManifest::new(Some(split), styles, root);
    m.entries = (0..cfg.count(split))
        .into_par_iter()
        .map(|i| manifest_entry(&render_image(cfg, split, i), image_rel_path(split, i)))
        .collect();
    Ok(m)
}

/// Renders the train, val and test splits into `out_dir`: PNGs under
/// `images/<split>/` and one `<split>.jsonl` manifest per non-empty split.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<DatasetManifest>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let n = cfg.count(split);
        if n == 0 {
            continue;
        }
        let dir = out_dir.join("images").join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let entries: Vec<ManifestEntry> = (0..n)
            .into_par_iter()
            .map(|i| {
                let img = render_image(cfg, split, i);
                let rel = image_rel_path(split, i);
                let path = out_dir.join(&rel);
                img.image.save(&path).map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
                Ok(manifest_entry(&img, rel))
            })
            .collect::<Result<_>>()?;
        let mut styles: Vec<Style> = cfg.styles.clone();
        styles.sort();
        styles.dedup();
        let mut m = DatasetManifest::new(
            Some(split),
            styles.iter().map(|s| s.name().to_string()).collect(),
            out_dir,
        );
        m.entries = entries;
        m.save(&out_dir.join(format!("{}.jsonl", split.name())))?;
        out.push(m);
    }
    Ok(out)
}
