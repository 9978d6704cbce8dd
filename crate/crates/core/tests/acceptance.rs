//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Tolerances are pinned below.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{gradcheck, oracles};
use xdepict::data::{generate_synthetic, DatasetManifest, SynthConfig};
use xdepict::detector::Detection;
use xdepict::evaluation::{evaluate_ap, match_detections, ApMode, Verdict, MATCH_IOU};
use xdepict::experiment::evaluate::run_eval;
use xdepict::experiment::{load_dataset, run_matrix_experiment, train, ExperimentConfig, LoadedImage, MatrixAxes, Pooling};
use xdepict::geometry::{Annotation, BBox};
use xdepict::network::Network;
use xdepict::proposals::{recall_counts, selective_search};
use xdepict::evaluation::EvalOptions;

const GRAD_INSTANCES: usize = 100;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 120.0;
const ROI_TRIPLES: usize = 1000;
const AP_INSTANCES: usize = 500;
const AP_TOL: f64 = 1e-9;
const AP_FIXTURE_TOL: f64 = 1e-12;
const NMS_SETS: usize = 1000;
const RECALL_MIN: f64 = 0.90;
const PROPOSALS_MAX: usize = 2000;
const SECONDS_PER_IMAGE_MAX: f64 = 5.0;
const E2E_ITERATIONS: usize = 4000;
const E2E_AP_MIN: f64 = 0.7;
const E2E_BUDGET_S: f64 = 600.0;
const HELD_OUT: usize = 50;
const FREEZE_ITERATIONS: usize = 1000;
const MATRIX_ITERATIONS: usize = 300;

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        let line = format!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((pass, line));
    }
}

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn det(image: &str, b: BBox, score: f64) -> Detection {
    Detection {
        image_id: image.into(),
        bbox: b,
        score,
    }
}

fn gradients(r: &mut Report) {
    let start = Instant::now();
    let kinds: [(&str, fn(usize) -> f64); 7] = [
        ("conv", gradcheck::conv),
        ("fc", gradcheck::fc),
        ("relu", gradcheck::relu),
        ("max_pool", gradcheck::max_pool),
        ("dropout", gradcheck::dropout),
        ("roi_pool", gradcheck::roi_pool),
        ("loss", gradcheck::loss),
    ];
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for (name, f) in kinds {
        let e = f(GRAD_INSTANCES);
        worst = worst.max(e);
        parts.push(format!("{name} {e:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    r.record(
        "gradient correctness",
        worst < GRAD_TOL && secs < GRAD_BUDGET_S,
        format!(
            "worst relative error {worst:.2e} (< {GRAD_TOL:e}) over {GRAD_INSTANCES} instances per kind [{}], {secs:.1}s (< {GRAD_BUDGET_S}s)",
            parts.join(", ")
        ),
    );
}

fn roi_pooling(r: &mut Report) {
    let t = oracles::roi_pool_triples(ROI_TRIPLES, 21);
    r.record(
        "ROI pooling semantics",
        t.mismatches == 0 && t.single_cell > 0 && t.one_pixel > 0,
        format!(
            "{} mismatches over {} on-map triples ({} single-cell grids, {} one-cell ROIs) plus {} off-map ROIs rejected",
            t.mismatches, t.triples, t.single_cell, t.one_pixel, t.outside
        ),
    );
}

fn sampling(r: &mut Report) {
    let bad = oracles::sampling_scan_mismatches();
    r.record(
        "sampling presets",
        bad == 0,
        format!("{bad} disagreements with the interval table over IoU 0.00..=1.00 step 0.01 for 4 presets"),
    );
}

fn ap(r: &mut Report) {
    let diff = oracles::ap_max_diff(AP_INSTANCES, 22);
    let gts = vec![
        Annotation::new("a", bx(0.0, 0.0, 10.0, 10.0)),
        Annotation::new("a", bx(20.0, 0.0, 30.0, 10.0)),
    ];
    let dets = vec![
        det("a", bx(0.0, 0.0, 10.0, 10.0), 0.9),
        det("a", bx(50.0, 50.0, 60.0, 60.0), 0.8),
        det("a", bx(20.0, 0.0, 30.0, 10.0), 0.7),
    ];
    let cont = evaluate_ap(&dets, &gts, ApMode::Continuous).unwrap().0;
    let eleven = evaluate_ap(&dets, &gts, ApMode::ElevenPoint).unwrap().0;
    let fixture_ok = (cont - 5.0 / 6.0).abs() < AP_FIXTURE_TOL && (eleven - 28.0 / 33.0).abs() < AP_FIXTURE_TOL;
    r.record(
        "AP oracle equivalence",
        diff < AP_TOL && fixture_ok,
        format!(
            "max |AP - reference| {diff:.1e} (< {AP_TOL:e}) over {AP_INSTANCES} instances x 2 modes; fixture continuous {cont:.12} (5/6), eleven-point {eleven:.12} (28/33)"
        ),
    );
}

fn nms(r: &mut Report) {
    let bad = oracles::nms_mismatches(NMS_SETS, 23);
    r.record("NMS reference", bad == 0, format!("{bad} mismatches over {NMS_SETS} random sets of <= 50 boxes"));
}

fn matching(r: &mut Report) {
    let gt = |img: &str| Annotation::new(img, bx(0.0, 0.0, 10.0, 10.0));
    // IoU of (x, 0, x + 10, 10) with the gt is (10 - x) / (10 + x)
    let shift = |iou: f64| 10.0 * (1.0 - iou) / (1.0 + iou);
    let mut ok = Vec::new();
    for (iou, want) in [(0.6, Verdict::Cor), (0.3, Verdict::Loc), (0.05, Verdict::Bg)] {
        let x = shift(iou);
        let v = match_detections(&[det("t", bx(x, 0.0, x + 10.0, 10.0), 0.5)], &[gt("t")], MATCH_IOU);
        ok.push((format!("IoU {iou} -> {:?}", v[0]), v[0] == want));
    }
    let dup = match_detections(
        &[det("d", bx(0.0, 0.0, 10.0, 10.0), 0.9), det("d", bx(0.0, 0.0, 10.0, 9.0), 0.8)],
        &[gt("d")],
        MATCH_IOU,
    );
    ok.push((format!("duplicate -> {:?}", dup[1]), dup == [Verdict::Cor, Verdict::Loc]));
    let hard = vec![gt("h"), Annotation::new("h", bx(40.0, 0.0, 50.0, 10.0)).difficult(true)];
    let dets = vec![det("h", bx(0.0, 0.0, 10.0, 10.0), 0.4), det("h", bx(40.0, 0.0, 50.0, 10.0), 0.9)];
    let v = match_detections(&dets, &hard, MATCH_IOU);
    let ap_with = evaluate_ap(&dets, &hard, ApMode::Continuous).unwrap().0;
    let ap_without = evaluate_ap(&dets[..1], &hard[..1], ApMode::Continuous).unwrap().0;
    ok.push((
        format!("difficult -> {:?}, AP {ap_with} vs {ap_without}", v[1]),
        v[1] == Verdict::Ignored && ap_with == ap_without,
    ));
    r.record(
        "matching protocol",
        ok.iter().all(|(_, b)| *b),
        ok.iter().map(|(s, _)| s.as_str()).collect::<Vec<_>>().join("; "),
    );
}

fn proposals(r: &mut Report, cfg: &ExperimentConfig, test: &DatasetManifest) {
    let start = Instant::now();
    let (mut hit, mut total, mut most) = (0, 0, 0);
    for e in &test.entries {
        let image = test.load_image(e).unwrap();
        let set = selective_search(&e.path, &image, &cfg.proposals);
        let (h, t) = recall_counts(&set.boxes(), &e.annotations(), 0.5).unwrap();
        hit += h;
        total += t;
        most = most.max(set.len());
    }
    let per_image = start.elapsed().as_secs_f64() / test.len() as f64;
    let recall = hit as f64 / total as f64;
    r.record(
        "proposal pipeline",
        recall >= RECALL_MIN && most <= PROPOSALS_MAX && per_image < SECONDS_PER_IMAGE_MAX,
        format!(
            "recall@0.5 {recall:.3} ({hit}/{total}, >= {RECALL_MIN}) on {} test images, max {most} proposals/image (<= {PROPOSALS_MAX}), {per_image:.3}s/image (< {SECONDS_PER_IMAGE_MAX}s)",
            test.len()
        ),
    );
}

fn train_and_score(cfg: &ExperimentConfig, train_set: &[LoadedImage], held_out: &[LoadedImage]) -> (f64, f64) {
    let start = Instant::now();
    let outcome = train(train_set, cfg, None).unwrap();
    let opts = EvalOptions {
        mode: cfg.ap_mode,
        trend_d: Vec::new(),
    };
    let styles = Default::default();
    let (report, _) = run_eval(&outcome.network, held_out, &styles, &cfg.detector, &opts, None).unwrap();
    (report.ap, start.elapsed().as_secs_f64())
}

fn end_to_end(r: &mut Report, cfg: &ExperimentConfig, train_set: &[LoadedImage], held_out: &[LoadedImage]) {
    let mut c = cfg.clone();
    c.sgd.iterations = E2E_ITERATIONS;
    let (ap, secs) = train_and_score(&c, train_set, held_out);
    r.record(
        "end-to-end smoke",
        ap >= E2E_AP_MIN && secs <= E2E_BUDGET_S,
        format!(
            "toy profile, {} training images, {E2E_ITERATIONS} iterations: AP {ap:.3} (>= {E2E_AP_MIN}) on {} held-out images, {secs:.0}s (<= {E2E_BUDGET_S}s)",
            train_set.len(),
            held_out.len()
        ),
    );
    let mut single = c.clone();
    single.pooling = Pooling::SingleCell;
    let (ap_single, _) = train_and_score(&single, train_set, held_out);
    r.record(
        "ablation direction",
        ap > ap_single,
        format!("default 6x6 grid AP {ap:.3} > single-cell AP {ap_single:.3} (same seed, same schedule)"),
    );
}

fn freezing(r: &mut Report, cfg: &ExperimentConfig, train_set: &[LoadedImage]) {
    let mut c = cfg.clone();
    c.sgd.iterations = FREEZE_ITERATIONS;
    let initial = Network::<f32>::new(c.network_spec(), c.seed).unwrap();
    let init_params: Vec<_> = initial.conv_params().into_iter().cloned().collect();

    c.sgd.fixed_layers = initial.conv_count();
    let frozen = train(train_set, &c, None).unwrap().network;
    let identical = frozen
        .conv_params()
        .iter()
        .zip(&init_params)
        .all(|(a, b)| a.weight.iter().map(|v| v.to_bits()).eq(b.weight.iter().map(|v| v.to_bits())) && a.bias.iter().map(|v| v.to_bits()).eq(b.bias.iter().map(|v| v.to_bits())));

    c.sgd.fixed_layers = 0;
    let free = train(train_set, &c, None).unwrap().network;
    let (mut changed, mut total) = (0usize, 0usize);
    for (a, b) in free.conv_params().iter().zip(&init_params) {
        for (x, y) in a.weight.iter().chain(&a.bias).zip(b.weight.iter().chain(&b.bias)) {
            total += 1;
            changed += (x.to_bits() != y.to_bits()) as usize;
        }
    }
    r.record(
        "freezing",
        identical && changed == total,
        format!(
            "{FREEZE_ITERATIONS} iterations: F={} backbone bit-identical: {identical}; F=0 changed {changed}/{total} conv parameters",
            initial.conv_count()
        ),
    );
}

fn determinism(r: &mut Report, cfg: &ExperimentConfig, root: &Path) {
    let run = |name: &str| {
        let mut c = cfg.clone();
        c.sgd.iterations = MATRIX_ITERATIONS;
        c.output_dir = root.join(name);
        let outcome = run_matrix_experiment(&c, &MatrixAxes::default(), false).unwrap();
        let files = ["matrix.csv", "matrix.md", "pooling.md"].map(|f| std::fs::read(c.output_dir.join(f)).unwrap());
        let aps: Vec<String> = outcome
            .report
            .cells
            .iter()
            .map(|cell| format!("{} {}", cell.configuration, cell.ap.map_or("failed".into(), |a| format!("{a:.3}"))))
            .collect();
        (files, aps)
    };
    let (a, aps) = run("matrix_a");
    let (b, _) = run("matrix_b");
    r.record(
        "determinism",
        a == b,
        format!(
            "two matrix runs ({} cells, {MATRIX_ITERATIONS} iterations each) wrote byte-identical tables; APs: {}",
            MatrixAxes::default().len(),
            aps.join(", ")
        ),
    );
}

fn main() -> ExitCode {
    let mut r = Report { lines: Vec::new() };
    gradients(&mut r);
    roi_pooling(&mut r);
    sampling(&mut r);
    ap(&mut r);
    nms(&mut r);
    matching(&mut r);

    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    generate_synthetic(&SynthConfig::default(), &root.join("data")).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.data.train = Some(root.join("data/train.jsonl"));
    cfg.data.val = Some(root.join("data/val.jsonl"));
    cfg.data.test = Some(root.join("data/test.jsonl"));
    cfg.data.proposal_cache = Some(root.join("proposals"));
    let test = DatasetManifest::load(&root.join("data/test.jsonl")).unwrap();
    proposals(&mut r, &cfg, &test);

    let cache = cfg.proposal_cache_root();
    let train_manifest = DatasetManifest::load(&root.join("data/train.jsonl")).unwrap();
    let train_set = load_dataset(&train_manifest, &cfg.proposals, Some(&cache)).unwrap();
    let mut held_out_manifest = test.clone();
    held_out_manifest.entries.truncate(HELD_OUT);
    let held_out = load_dataset(&held_out_manifest, &cfg.proposals, Some(&cache)).unwrap();
    end_to_end(&mut r, &cfg, &train_set, &held_out);
    freezing(&mut r, &cfg, &train_set);
    determinism(&mut r, &cfg, root);

    let failed = r.lines.iter().filter(|(p, _)| !p).count();
    println!("{} criteria, {} passed, {failed} failed", r.lines.len(), r.lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
