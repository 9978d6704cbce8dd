//! Brute-force reference implementations, written independently of the
//! library code they check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xdepict::detector::{nms, Detection};
use xdepict::evaluation::{average_precision, ApMode, Verdict};
use xdepict::geometry::{iou, BBox};
use xdepict::roi_pool::{roi_pool_forward, RoiPoolConfig};
use xdepict::sampling::{IouBand, RoiSamplingConfig, SamplingPreset};
use xdepict::tensor::Tensor;
use xdepict::Error;

#[derive(Debug, Default)]
pub struct RoiPoolTally {
    pub triples: usize,
    pub mismatches: usize,
    pub single_cell: usize,
    pub one_pixel: usize,
    pub outside: usize,
}

/// Quantised inclusive ROI bounds in feature cells.
fn snap(v: f64, scale: f64) -> i64 {
    let s = v * scale;
    let f = s.floor();
    if s - f >= 0.5 {
        f as i64 + 1
    } else {
        f as i64
    }
}

/// Loops over every cell and every map pixel. Returns the pooled values and
/// the flat argmax (first strict maximum in row-major order) per output, or
/// `None` when the ROI misses the map.
#[allow(clippy::type_complexity)]
fn roi_pool_oracle(
    map: &[Vec<Vec<f64>>],
    roi: &BBox,
    gh: usize,
    gw: usize,
    scale: f64,
) -> Option<(Vec<f64>, Vec<Option<usize>>)> {
    let (c, fh, fw) = (map.len(), map[0].len(), map[0][0].len());
    let (x1, y1, x2, y2) = (snap(roi.x1, scale), snap(roi.y1, scale), snap(roi.x2, scale), snap(roi.y2, scale));
    let rows: Vec<i64> = (y1..=y2).filter(|r| (0..fh as i64).contains(r)).collect();
    let cols: Vec<i64> = (x1..=x2).filter(|q| (0..fw as i64).contains(q)).collect();
    if rows.is_empty() || cols.is_empty() {
        return None;
    }
    let h = (y2 - y1 + 1) as f64;
    let w = (x2 - x1 + 1) as f64;
    let mut vals = Vec::new();
    let mut arg = Vec::new();
    for ch in 0..c {
        for i in 0..gh {
            for j in 0..gw {
                let r_lo = y1 + (i as f64 * h / gh as f64).floor() as i64;
                let r_hi = y1 + ((i + 1) as f64 * h / gh as f64).floor() as i64;
                let c_lo = x1 + (j as f64 * w / gw as f64).floor() as i64;
                let c_hi = x1 + ((j + 1) as f64 * w / gw as f64).floor() as i64;
                let mut best: Option<(f64, usize)> = None;
                for r in 0..fh {
                    for q in 0..fw {
                        let (ri, qi) = (r as i64, q as i64);
                        if ri < r_lo || ri >= r_hi || qi < c_lo || qi >= c_hi {
                            continue;
                        }
                        let v = map[ch][r][q];
                        if best.map_or(true, |(b, _)| v > b) {
                            best = Some((v, ch * fh * fw + r * fw + q));
                        }
                    }
                }
                vals.push(best.map_or(0.0, |b| b.0));
                arg.push(best.map(|b| b.1));
            }
        }
    }
    Some((vals, arg))
}

/// Random map / ROI / grid triples (small integer values so ties occur)
/// until `n` on-map triples have been compared. ROIs that miss the map must
/// be rejected; those are tallied separately.
pub fn roi_pool_triples(n: usize, seed: u64) -> RoiPoolTally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = RoiPoolTally::default();
    let mut k = 0;
    while t.triples < n {
        k += 1;
        let (c, fh, fw) = (rng.gen_range(1..=3), rng.gen_range(1..=9), rng.gen_range(1..=9));
        let scale = [1.0, 0.5, 0.25][rng.gen_range(0..3)];
        let map: Vec<Vec<Vec<f64>>> = (0..c)
            .map(|_| (0..fh).map(|_| (0..fw).map(|_| rng.gen_range(-4..5) as f64).collect()).collect())
            .collect();
        let (gh, gw) = if k % 5 == 0 { (1, 1) } else { (rng.gen_range(1..=7), rng.gen_range(1..=7)) };
        let (iw, ih) = (fw as f64 / scale, fh as f64 / scale);
        let one_cell = k % 7 == 0;
        let roi = if one_cell {
            // one feature cell wide and high
            let x = rng.gen_range(0..fw) as f64 / scale;
            let y = rng.gen_range(0..fh) as f64 / scale;
            BBox::new(x, y, x + 0.01, y + 0.01).unwrap()
        } else {
            let x1 = rng.gen_range(-2.0..iw + 1.0);
            let y1 = rng.gen_range(-2.0..ih + 1.0);
            BBox::new(x1, y1, x1 + rng.gen_range(0.01..iw + 2.0), y1 + rng.gen_range(0.01..ih + 2.0)).unwrap()
        };
        let flat: Vec<f64> = map.iter().flatten().flatten().copied().collect();
        let feats = Tensor::from_vec([1, c, fh, fw], flat).unwrap();
        let cfg = RoiPoolConfig::new(gh, gw, scale).unwrap();
        let expected = roi_pool_oracle(&map, &roi, gh, gw, scale);
        let got = roi_pool_forward(&feats, &roi, &cfg);
        let ok = match (expected, got) {
            (None, Err(Error::RoiOutside { .. })) => {
                t.outside += 1;
                continue;
            }
            (Some((vals, arg)), Ok((out, state))) => {
                out == vals && state.argmax.iter().map(|a| a.map(|v| v as usize)).eq(arg.into_iter())
            }
            _ => false,
        };
        t.triples += 1;
        t.single_cell += (gh == 1 && gw == 1) as usize;
        t.one_pixel += one_cell as usize;
        if !ok {
            t.mismatches += 1;
        }
    }
    t
}

/// AP straight from the definitions: precision and recall of every ranked
/// prefix recomputed by counting.
pub fn ap_reference(ranked: &[Verdict], num_gt: usize, mode: ApMode) -> f64 {
    let kept: Vec<Verdict> = ranked.iter().copied().filter(|v| *v != Verdict::Ignored).collect();
    let prefix = |k: usize| {
        let tp = kept[..k].iter().filter(|v| **v == Verdict::Cor).count();
        (tp as f64 / num_gt as f64, tp as f64 / k as f64)
    };
    let interp = |r: f64| {
        (1..=kept.len())
            .map(prefix)
            .filter(|&(rec, _)| rec >= r)
            .map(|(_, p)| p)
            .fold(0.0, f64::max)
    };
    match mode {
        ApMode::ElevenPoint => (0..=10).map(|t| interp(t as f64 / 10.0)).sum::<f64>() / 11.0,
        ApMode::Continuous => {
            // one rectangle per recall step
            let mut ap = 0.0;
            let mut prev = 0.0;
            for k in 1..=kept.len() {
                let (rec, _) = prefix(k);
                if rec > prev {
                    ap += (rec - prev) * interp(rec);
                    prev = rec;
                }
            }
            ap
        }
    }
}

/// Largest |implementation - reference| over random verdict lists, both modes.
pub fn ap_max_diff(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let len = rng.gen_range(0..=15);
        let verdicts: Vec<Verdict> = (0..len)
            .map(|_| match rng.gen_range(0..10) {
                0..=3 => Verdict::Cor,
                4..=5 => Verdict::Loc,
                6..=8 => Verdict::Bg,
                _ => Verdict::Ignored,
            })
            .collect();
        let cor = verdicts.iter().filter(|v| **v == Verdict::Cor).count();
        let num_gt = (cor + rng.gen_range(0..=3)).max(1);
        // distinct scores, handed over unsorted
        let scores: Vec<f64> = (0..len).map(|i| 1.0 - i as f64 / 32.0).collect();
        let mut shuffled: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let unsorted_v: Vec<Verdict> = shuffled.iter().map(|&i| verdicts[i]).collect();
        let unsorted_s: Vec<f64> = shuffled.iter().map(|&i| scores[i]).collect();
        for mode in [ApMode::ElevenPoint, ApMode::Continuous] {
            let got = average_precision(&unsorted_v, &unsorted_s, num_gt, mode).unwrap();
            worst = worst.max((got - ap_reference(&verdicts, num_gt, mode)).abs());
        }
    }
    worst
}

/// Classic suppression-flag formulation.
pub fn nms_reference(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut suppressed = vec![false; order.len()];
    let mut out = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        out.push(order[i].clone());
        for j in i + 1..order.len() {
            if order[j].image_id == order[i].image_id && iou(&order[i].bbox, &order[j].bbox) > thresh {
                suppressed[j] = true;
            }
        }
    }
    out
}

pub fn random_detections(rng: &mut ChaCha8Rng, max: usize, images: usize) -> Vec<Detection> {
    let n = rng.gen_range(0..=max);
    // distinct scores so the reference order is unambiguous
    let mut scores: Vec<u32> = (0..1000).collect();
    for i in (1..scores.len()).rev() {
        scores.swap(i, rng.gen_range(0..=i));
    }
    (0..n)
        .map(|i| {
            let x1 = rng.gen_range(0.0..80.0);
            let y1 = rng.gen_range(0.0..80.0);
            Detection {
                image_id: format!("img{}", rng.gen_range(0..images)),
                bbox: BBox::new(x1, y1, x1 + rng.gen_range(2.0..40.0), y1 + rng.gen_range(2.0..40.0)).unwrap(),
                score: scores[i] as f64 / 1000.0,
            }
        })
        .collect()
}

pub fn nms_mismatches(n: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .filter(|_| {
            let images = rng.gen_range(1..=3);
            let dets = random_detections(&mut rng, 50, images);
            let thresh = rng.gen_range(0.05..0.95);
            nms(dets.clone(), thresh) != nms_reference(&dets, thresh)
        })
        .count()
}

/// The four configurations of the sampling table as integer hundredths:
/// (name, negative lower bound, negative upper bound (exclusive), positive
/// lower bound (inclusive)).
pub const SAMPLING_TABLE: [(&str, u32, u32, u32); 4] = [
    ("default", 10, 50, 50),
    ("gap", 10, 40, 60),
    ("all-neg", 0, 50, 50),
    ("gap+all-neg", 0, 40, 60),
];

/// Scans IoU 0.00..=1.00 in steps of 0.01 for every preset; returns the
/// number of disagreements with the integer interval oracle.
pub fn sampling_scan_mismatches() -> usize {
    let mut bad = 0;
    for (preset, (name, neg_lo, neg_hi, pos_lo)) in SamplingPreset::NAMED.iter().zip(SAMPLING_TABLE) {
        let cfg = RoiSamplingConfig::preset(*preset);
        if preset.name() != name || name.parse::<RoiSamplingConfig>().ok() != Some(cfg) {
            bad += 1;
        }
        for k in 0..=100u32 {
            let expected = if k >= pos_lo {
                IouBand::Positive
            } else if k >= neg_lo && k < neg_hi {
                IouBand::Negative
            } else {
                IouBand::Discard
            };
            if cfg.label_for(k as f64 / 100.0) != expected {
                bad += 1;
            }
        }
    }
    bad
}
