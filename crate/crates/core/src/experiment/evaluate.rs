//! Detection over a loaded dataset and the evaluation artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::detector::{detect, write_detections, Detection, DetectorConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions, EvalReport, StyleReport};
use crate::experiment::dataset::LoadedImage;
use crate::geometry::Annotation;
use crate::network::Network;
use crate::proposals::recall_counts;

/// Runs the detector on every image; output follows image order.
pub fn detect_all(net: &Network<f32>, images: &[LoadedImage], cfg: &DetectorConfig) -> Result<Vec<Detection>> {
    let per_image: Vec<Vec<Detection>> = images
        .par_iter()
        .map(|img| detect(net, &img.id, &img.image, &img.proposals, cfg))
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Dataset-level proposal recall at IoU 0.5 over non-difficult people.
pub fn dataset_proposal_recall(images: &[LoadedImage]) -> Result<Option<f64>> {
    let mut hit = 0;
    let mut total = 0;
    for img in images {
        let (h, t) = recall_counts(&img.proposals.boxes(), &img.annotations, 0.5)?;
        hit += h;
        total += t;
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

pub fn style_table_markdown(styles: &StyleReport) -> String {
    let mut s = String::from("| style | AP | people | detections |\n|---|---|---|---|\n");
    for st in &styles.styles {
        let _ = writeln!(s, "| {} | {:.1} | {} | {} |", st.style, 100.0 * st.ap, st.num_gt, st.num_detections);
    }
    for skipped in &styles.skipped {
        let _ = writeln!(s, "| {skipped} | n/a | 0 | - |");
    }
    s
}

pub fn style_table_csv(styles: &StyleReport) -> String {
    let mut s = String::from("style,ap,num_gt,num_detections\n");
    for st in &styles.styles {
        let _ = writeln!(s, "{},{},{},{}", st.style, st.ap, st.num_gt, st.num_detections);
    }
    s
}

pub const REPORT_FILE: &str = "report.json";
pub const PR_FILE: &str = "pr_curve.csv";
pub const TREND_FILE: &str = "detection_trend.svg";
pub const STYLE_CSV_FILE: &str = "per_style.csv";
pub const STYLE_MD_FILE: &str = "per_style.md";
pub const DETECTIONS_FILE: &str = "detections.csv";

fn write(path: PathBuf, text: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    out.push(path);
    Ok(())
}

/// Writes the report JSON, PR-curve CSV, trend SVG and per-style tables.
pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))?;
    write(out_dir.join(REPORT_FILE), &json, &mut files)?;
    write(out_dir.join(PR_FILE), &report.pr_csv(), &mut files)?;
    write(out_dir.join(TREND_FILE), &report.trend_svg(), &mut files)?;
    write(out_dir.join(STYLE_CSV_FILE), &style_table_csv(&report.per_style), &mut files)?;
    write(out_dir.join(STYLE_MD_FILE), &style_table_markdown(&report.per_style), &mut files)?;
    Ok(files)
}

/// Evaluates precomputed detections and writes every artifact.
pub fn evaluate_detections(
    dets: &[Detection],
    gts: &[Annotation],
    image_styles: &BTreeMap<String, String>,
    proposal_recall: Option<f64>,
    opts: &EvalOptions,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let report = evaluate(dets, gts, image_styles, proposal_recall, opts)?;
    if let Some(dir) = out_dir {
        write_report(&report, dir)?;
        write_detections(&dir.join(DETECTIONS_FILE), dets)?;
    }
    Ok(report)
}

/// Detect, evaluate and (optionally) write artifacts for a loaded dataset.
pub fn run_eval(
    net: &Network<f32>,
    images: &[LoadedImage],
    image_styles: &BTreeMap<String, String>,
    det_cfg: &DetectorConfig,
    opts: &EvalOptions,
    out_dir: Option<&Path>,
) -> Result<(EvalReport, Vec<Detection>)> {
    let dets = detect_all(net, images, det_cfg)?;
    let gts: Vec<Annotation> = images.iter().flat_map(|i| i.annotations.iter().cloned()).collect();
    let recall = dataset_proposal_recall(images)?;
    let report = evaluate_detections(&dets, &gts, image_styles, recall, opts, out_dir)?;
    Ok((report, dets))
}
