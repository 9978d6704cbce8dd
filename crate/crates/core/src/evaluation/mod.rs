//! VOC-style matching and average precision, plus the Cor/Loc/BG
//! false-positive breakdown.

mod plot;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{cmp_detections, Detection};
use crate::error::{Error, Result};
use crate::geometry::{iou, Annotation, BBox};

pub use plot::trend_svg;

pub const MATCH_IOU: f64 = 0.5;
/// Lower IoU bound of a localisation error.
pub const LOC_IOU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    /// True positive.
    Cor,
    /// False positive overlapping a person at `[0.1, 0.5)`, or a duplicate.
    Loc,
    /// False positive with IoU below 0.1 against every person.
    Bg,
    /// Overlaps a difficult person; neither true nor false.
    Ignored,
}

impl Verdict {
    pub fn is_false_positive(self) -> bool {
        matches!(self, Verdict::Loc | Verdict::Bg)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    #[default]
    ElevenPoint,
    Continuous,
}

impl ApMode {
    pub fn name(self) -> &'static str {
        match self {
            ApMode::ElevenPoint => "eleven_point",
            ApMode::Continuous => "continuous",
        }
    }
}

impl FromStr for ApMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eleven_point" | "11point" | "eleven-point" => Ok(ApMode::ElevenPoint),
            "continuous" => Ok(ApMode::Continuous),
            _ => Err(Error::Config(format!(
                "unknown AP mode {s:?} (expected eleven_point or continuous)"
            ))),
        }
    }
}

/// Indices of `dets` in canonical rank order: descending score, ties broken
/// by image id and box coordinates.
pub fn ranked_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| cmp_detections(&dets[a], &dets[b]).then(a.cmp(&b)));
    order
}

/// Greedy matching in canonical rank order. Returns one verdict per input
/// detection, aligned with `dets`.
pub fn match_detections(dets: &[Detection], gts: &[Annotation], iou_thresh: f64) -> Vec<Verdict> {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let mut claimed = vec![false; gts.len()];
    let mut verdicts = vec![Verdict::Bg; dets.len()];
    for idx in ranked_order(dets) {
        let d = &dets[idx];
        let candidates = by_image.get(d.image_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let overlaps: Vec<(usize, f64)> = candidates.iter().map(|&g| (g, iou(&d.bbox, &gts[g].bbox))).collect();

        let mut best: Option<(usize, f64)> = None;
        for &(g, o) in &overlaps {
            if gts[g].difficult || claimed[g] || o < iou_thresh {
                continue;
            }
            if best.map_or(true, |(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        verdicts[idx] = if let Some((g, _)) = best {
            claimed[g] = true;
            Verdict::Cor
        } else if overlaps.iter().any(|&(g, o)| gts[g].difficult && o >= iou_thresh) {
            Verdict::Ignored
        } else {
            let max = overlaps
                .iter()
                .filter(|&&(g, _)| !gts[g].difficult)
                .map(|&(_, o)| o)
                .fold(0.0, f64::max);
            if max >= LOC_IOU {
                Verdict::Loc
            } else {
                Verdict::Bg
            }
        };
    }
    verdicts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Score of the detection at which this point is reached.
    pub score: f64,
}

/// Cumulative precision/recall over verdicts already in rank order. Ignored
/// detections contribute no point.
pub fn pr_curve(ranked: &[(Verdict, f64)], num_gt: usize) -> Result<Vec<PrPoint>> {
    if num_gt == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut out = Vec::with_capacity(ranked.len());
    for &(v, score) in ranked {
        match v {
            Verdict::Cor => tp += 1,
            Verdict::Loc | Verdict::Bg => fp += 1,
            Verdict::Ignored => continue,
        }
        out.push(PrPoint {
            recall: tp as f64 / num_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
            score,
        });
    }
    Ok(out)
}

/// Average precision from verdicts and scores; `num_gt` counts non-difficult
/// ground truth only. Detections are ranked by descending score (stable).
pub fn average_precision(verdicts: &[Verdict], scores: &[f64], num_gt: usize, mode: ApMode) -> Result<f64> {
    if verdicts.len() != scores.len() {
        return Err(Error::Usage(format!(
            "{} verdicts but {} scores",
            verdicts.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let ranked: Vec<(Verdict, f64)> = order.iter().map(|&i| (verdicts[i], scores[i])).collect();
    Ok(ap_from_curve(&pr_curve(&ranked, num_gt)?, mode))
}

pub fn ap_from_curve(curve: &[PrPoint], mode: ApMode) -> f64 {
    match mode {
        ApMode::ElevenPoint => {
            let mut sum = 0.0;
            for t in 0..=10 {
                let r = t as f64 / 10.0;
                sum += curve
                    .iter()
                    .filter(|p| p.recall >= r)
                    .map(|p| p.precision)
                    .fold(0.0, f64::max);
            }
            sum / 11.0
        }
        ApMode::Continuous => {
            let mut rec = Vec::with_capacity(curve.len() + 2);
            let mut prec = Vec::with_capacity(curve.len() + 2);
            rec.push(0.0);
            prec.push(0.0);
            for p in curve {
                rec.push(p.recall);
                prec.push(p.precision);
            }
            rec.push(1.0);
            prec.push(0.0);
            for i in (0..prec.len() - 1).rev() {
                prec[i] = prec[i].max(prec[i + 1]);
            }
            (1..rec.len())
                .filter(|&i| rec[i] != rec[i - 1])
                .map(|i| (rec[i] - rec[i - 1]) * prec[i])
                .sum()
        }
    }
}

pub fn count_gt(gts: &[Annotation]) -> usize {
    gts.iter().filter(|g| !g.difficult).count()
}

/// Match, rank and summarise in one go.
pub fn evaluate_ap(dets: &[Detection], gts: &[Annotation], mode: ApMode) -> Result<(f64, Vec<PrPoint>)> {
    let verdicts = match_detections(dets, gts, MATCH_IOU);
    let ranked: Vec<(Verdict, f64)> = ranked_order(dets)
        .into_iter()
        .map(|i| (verdicts[i], dets[i].score))
        .collect();
    let curve = pr_curve(&ranked, count_gt(gts))?;
    Ok((ap_from_curve(&curve, mode), curve))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub cor: usize,
    pub loc: usize,
    pub bg: usize,
    pub ignored: usize,
}

impl VerdictCounts {
    pub fn tally(verdicts: impl IntoIterator<Item = Verdict>) -> Self {
        let mut c = VerdictCounts::default();
        for v in verdicts {
            match v {
                Verdict::Cor => c.cor += 1,
                Verdict::Loc => c.loc += 1,
                Verdict::Bg => c.bg += 1,
                Verdict::Ignored => c.ignored += 1,
            }
        }
        c
    }

    /// Detections taking part in the ranking (everything but ignored).
    pub fn ranked(&self) -> usize {
        self.cor + self.loc + self.bg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub d: usize,
    /// Detections actually counted: `min(d, available)`.
    pub used: usize,
    /// Set when fewer than `d` detections were available.
    pub truncated: bool,
    pub cor: f64,
    pub loc: f64,
    pub bg: f64,
}

/// Proportions of each verdict among the top `d` ranked detections, for each
/// requested `d`. `ranked` is in rank order; ignored detections are skipped.
pub fn detection_trend(ranked: &[Verdict], d_values: &[usize]) -> Result<Vec<TrendPoint>> {
    if let Some(bad) = d_values.iter().find(|&&d| d == 0) {
        return Err(Error::Config(format!("trend threshold D must be positive, got {bad}")));
    }
    let kept: Vec<Verdict> = ranked.iter().copied().filter(|v| *v != Verdict::Ignored).collect();
    Ok(d_values
        .iter()
        .map(|&d| {
            let used = d.min(kept.len());
            let c = VerdictCounts::tally(kept[..used].iter().copied());
            let frac = |n: usize| if used == 0 { 0.0 } else { n as f64 / used as f64 };
            TrendPoint {
                d,
                used,
                truncated: used < d,
                cor: frac(c.cor),
                loc: frac(c.loc),
                bg: frac(c.bg),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleAp {
    pub style: String,
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StyleReport {
    pub styles: Vec<StyleAp>,
    /// Styles without any non-difficult ground truth.
    pub skipped: Vec<String>,
}

/// Per-style AP. Each image belongs to one style: the entry in
/// `image_styles` if present, otherwise the style of its annotations.
pub fn per_style_report(
    dets: &[Detection],
    gts: &[Annotation],
    image_styles: &BTreeMap<String, String>,
    mode: ApMode,
) -> StyleReport {
    let mut style_of: BTreeMap<&str, &str> = image_styles
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .collect();
    for g in gts {
        style_of.entry(g.image_id.as_str()).or_insert(g.style.as_str());
    }
    let styles: BTreeSet<&str> = style_of.values().copied().filter(|s| !s.is_empty()).collect();
    let results: Vec<(String, Option<StyleAp>)> = styles
        .into_par_iter()
        .map(|style| {
            let in_style = |id: &str| style_of.get(id) == Some(&style);
            let g: Vec<Annotation> = gts.iter().filter(|a| in_style(&a.image_id)).cloned().collect();
            let d: Vec<Detection> = dets.iter().filter(|x| in_style(&x.image_id)).cloned().collect();
            let entry = match evaluate_ap(&d, &g, mode) {
                Ok((ap, _)) => Some(StyleAp {
                    style: style.to_string(),
                    ap,
                    num_gt: count_gt(&g),
                    num_detections: d.len(),
                }),
                Err(_) => None,
            };
            (style.to_string(), entry)
        })
        .collect();
    let mut report = StyleReport::default();
    for (style, entry) in results {
        match entry {
            Some(s) => report.styles.push(s),
            None => {
                log::info!("style {style:?} has no non-difficult ground truth; skipped");
                report.skipped.push(style);
            }
        }
    }
    report
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedDetection {
    pub rank: usize,
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: ApMode,
    /// Extra trend thresholds; the ground-truth count is always included.
    pub trend_d: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: ApMode::ElevenPoint,
            trend_d: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_mode: ApMode,
    pub ap: f64,
    pub num_gt: usize,
    pub num_difficult: usize,
    pub num_detections: usize,
    pub counts: VerdictCounts,
    /// The `D = num_gt` operating point.
    pub threshold_d: TrendPoint,
    pub trend: Vec<TrendPoint>,
    pub pr_curve: Vec<PrPoint>,
    pub proposal_recall: Option<f64>,
    pub per_style: StyleReport,
    pub detections: Vec<RankedDetection>,
}

impl EvalReport {
    /// `recall,precision,score` rows.
    pub fn pr_csv(&self) -> String {
        let mut out = String::from("recall,precision,score\n");
        for p in &self.pr_curve {
            let _ = writeln!(out, "{},{},{}", p.recall, p.precision, p.score);
        }
        out
    }

    /// Verdict proportions after every ranked detection, for plotting.
    pub fn full_trend(&self) -> Vec<TrendPoint> {
        let ranked: Vec<Verdict> = self.detections.iter().map(|d| d.verdict).collect();
        let n = ranked.iter().filter(|v| **v != Verdict::Ignored).count();
        let ds: Vec<usize> = (1..=n).collect();
        detection_trend(&ranked, &ds).expect("positive thresholds")
    }

    pub fn trend_svg(&self) -> String {
        trend_svg(&self.full_trend(), self.num_gt)
    }
}

pub fn evaluate(
    dets: &[Detection],
    gts: &[Annotation],
    image_styles: &BTreeMap<String, String>,
    proposal_recall: Option<f64>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let num_gt = count_gt(gts);
    if num_gt == 0 {
        return Err(Error::UndefinedAp);
    }
    let verdicts = match_detections(dets, gts, MATCH_IOU);
    let order = ranked_order(dets);
    let ranked: Vec<(Verdict, f64)> = order.iter().map(|&i| (verdicts[i], dets[i].score)).collect();
    let curve = pr_curve(&ranked, num_gt)?;
    let ap = ap_from_curve(&curve, opts.mode);
    let ranked_verdicts: Vec<Verdict> = ranked.iter().map(|r| r.0).collect();

    let mut ds = opts.trend_d.clone();
    ds.push(num_gt);
    ds.sort_unstable();
    ds.dedup();
    let trend = detection_trend(&ranked_verdicts, &ds)?;
    let threshold_d = trend.iter().find(|t| t.d == num_gt).cloned().expect("num_gt is included");
    if threshold_d.truncated {
        log::warn!(
            "only {} ranked detections for {} ground-truth people",
            threshold_d.used,
            num_gt
        );
    }
    let detections = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| RankedDetection {
            rank: rank + 1,
            image_id: dets[i].image_id.clone(),
            bbox: dets[i].bbox,
            score: dets[i].score,
            verdict: verdicts[i],
        })
        .collect();
    Ok(EvalReport {
        ap_mode: opts.mode,
        ap,
        num_gt,
        num_difficult: gts.len() - num_gt,
        num_detections: dets.len(),
        counts: VerdictCounts::tally(verdicts.iter().copied()),
        threshold_d,
        trend,
        pr_curve: curve,
        proposal_recall,
        per_style: per_style_report(dets, gts, image_styles, opts.mode),
        detections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(image: &str, bbox: BBox, score: f64) -> Detection {
        Detection {
            image_id: image.into(),
            bbox,
            score,
        }
    }

    /// Box with IoU exactly `m` against (0,0,10,10).
    fn shifted(m: f64) -> BBox {
        let s = 10.0 * (1.0 - m) / (1.0 + m);
        b(s, 0.0, 10.0 + s, 10.0)
    }

    #[test]
    fn verdict_thresholds() {
        let gts = vec![Annotation::new("i", b(0.0, 0.0, 10.0, 10.0))];
        for (m, want) in [(0.6, Verdict::Cor), (0.3, Verdict::Loc), (0.05, Verdict::Bg)] {
            let v = match_detections(&[det("i", shifted(m), 0.5)], &gts, MATCH_IOU);
            assert_eq!(v, vec![want], "IoU {m}");
        }
    }

    #[test]
    fn duplicates_are_false() {
        let gts = vec![Annotation::new("i", b(0.0, 0.0, 10.0, 10.0))];
        let dets = vec![det("i", shifted(0.8), 0.4), det("i", shifted(0.7), 0.9)];
        assert_eq!(match_detections(&dets, &gts, MATCH_IOU), vec![Verdict::Loc, Verdict::Cor]);
    }

    #[test]
    fn difficult_is_ignored() {
        let gts = vec![Annotation::new("i", b(0.0, 0.0, 10.0, 10.0)).difficult(true)];
        let dets = vec![det("i", shifted(0.7), 0.9)];
        assert_eq!(match_detections(&dets, &gts, MATCH_IOU), vec![Verdict::Ignored]);
        assert!(matches!(
            average_precision(&[Verdict::Ignored], &[0.9], count_gt(&gts), ApMode::ElevenPoint),
            Err(Error::UndefinedAp)
        ));
    }

    #[test]
    fn ap_fixture() {
        let v = [Verdict::Cor, Verdict::Bg, Verdict::Cor];
        let s = [0.9, 0.8, 0.7];
        let c = average_precision(&v, &s, 2, ApMode::Continuous).unwrap();
        let e = average_precision(&v, &s, 2, ApMode::ElevenPoint).unwrap();
        assert!((c - 5.0 / 6.0).abs() < 1e-12, "{c}");
        assert!((e - 28.0 / 33.0).abs() < 1e-12, "{e}");
        assert_eq!(average_precision(&[Verdict::Cor], &[0.3], 1, ApMode::Continuous).unwrap(), 1.0);
        assert_eq!(average_precision(&[Verdict::Cor], &[0.3], 1, ApMode::ElevenPoint).unwrap(), 1.0);
        assert_eq!(average_precision(&[Verdict::Bg; 3], &[0.3, 0.2, 0.1], 2, ApMode::ElevenPoint).unwrap(), 0.0);
    }

    #[test]
    fn trend_counts() {
        let seq = [Verdict::Cor, Verdict::Cor, Verdict::Loc, Verdict::Bg];
        let t = detection_trend(&seq, &[1, 4, 9]).unwrap();
        assert_eq!((t[0].cor, t[0].loc, t[0].bg), (1.0, 0.0, 0.0));
        assert_eq!((t[1].cor, t[1].loc, t[1].bg), (0.5, 0.25, 0.25));
        assert!(!t[1].truncated && t[2].truncated && t[2].used == 4);
        assert!(detection_trend(&seq, &[0]).is_err());
    }

    #[test]
    fn per_style_examples() {
        let gts = vec![
            Annotation::new("a", b(0.0, 0.0, 10.0, 10.0)).with_style("oil"),
            Annotation::new("b", b(0.0, 0.0, 10.0, 10.0)).with_style("sketch"),
        ];
        let dets = vec![det("a", b(0.0, 0.0, 10.0, 10.0), 0.9)];
        let r = per_style_report(&dets, &gts, &BTreeMap::new(), ApMode::ElevenPoint);
        let aps: Vec<(&str, f64)> = r.styles.iter().map(|s| (s.style.as_str(), s.ap)).collect();
        assert_eq!(aps, vec![("oil", 1.0), ("sketch", 0.0)]);

        let mut styles = BTreeMap::new();
        styles.insert("c".to_string(), "cubism".to_string());
        let r = per_style_report(&dets, &gts, &styles, ApMode::ElevenPoint);
        assert_eq!(r.skipped, vec!["cubism".to_string()]);
    }

    #[test]
    fn report_shape() {
        let gts = vec![
            Annotation::new("a", b(0.0, 0.0, 10.0, 10.0)).with_style("s"),
            Annotation::new("a", b(20.0, 0.0, 30.0, 10.0)).with_style("s"),
        ];
        let dets = vec![
            det("a", b(0.0, 0.0, 10.0, 10.0), 0.9),
            det("a", b(50.0, 50.0, 60.0, 60.0), 0.8),
            det("a", b(20.0, 0.0, 30.0, 10.0), 0.7),
        ];
        let r = evaluate(&dets, &gts, &BTreeMap::new(), Some(1.0), &EvalOptions::default()).unwrap();
        assert!((r.ap - 28.0 / 33.0).abs() < 1e-12);
        assert_eq!(r.counts.ranked(), 3);
        assert_eq!(r.threshold_d.d, 2);
        assert!(r.pr_curve.windows(2).all(|w| w[0].recall <= w[1].recall));
        assert!(r.pr_csv().starts_with("recall,precision,score\n"));
        assert!(r.trend_svg().starts_with("<svg"));
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
