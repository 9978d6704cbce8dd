use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use xdepict::data::{generate_synthetic, DatasetManifest, Style, SynthConfig};
use xdepict::detector::{read_detections, write_detections};
use xdepict::evaluation::{detection_trend, match_detections, ranked_order, trend_svg, ApMode, EvalOptions, MATCH_IOU};
use xdepict::experiment::dataset::{proposal_file_name, proposals_for};
use xdepict::experiment::evaluate::{detect_all, evaluate_detections};
use xdepict::experiment::{
    load_dataset, run_matrix_experiment, run_training, ExperimentConfig, MatrixAxes, Pooling, SamplingSpec,
};
use xdepict::network::Profile;
use xdepict::proposals::{recall_counts, ProposalSet, SelectiveSearchParams};
use xdepict::sampling::RoiSamplingConfig;
use xdepict::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "xdepict", version, about = "Person detection across depiction styles")]
struct Cli {
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-style dataset.
    Synth(SynthArgs),
    /// Compute selective-search proposals for a manifest.
    Proposals(ProposalArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Train and score every sampling x F x pooling combination.
    Matrix(MatrixArgs),
    /// Run a trained detector over a manifest.
    Detect(DetectArgs),
    /// Score detections against ground truth and write report artifacts.
    Eval(EvalArgs),
    /// Break detections down into Cor / Loc / BG at chosen cut-offs.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (images/ plus <split>.jsonl manifests).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 128)]
    width: u32,
    #[arg(long, default_value_t = 128)]
    height: u32,
    #[arg(long, default_value_t = 1)]
    people_min: usize,
    #[arg(long, default_value_t = 3)]
    people_max: usize,
    #[arg(long, default_value_t = 40.0)]
    person_height_min: f64,
    #[arg(long, default_value_t = 90.0)]
    person_height_max: f64,
    /// Comma-separated subset of filled,outline,textured,inverted,noisy.
    #[arg(long, default_value = "filled,outline,textured,inverted,noisy")]
    styles: String,
    #[arg(long, default_value_t = 0.15)]
    occlusion_prob: f64,
    #[arg(long, default_value_t = 0.05)]
    difficult_prob: f64,
    #[arg(long, default_value_t = 3)]
    max_distractors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProposalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for one `x1,y1,x2,y2,priority` CSV per image.
    #[arg(long)]
    out: PathBuf,
    /// Run every colour space x k strategy instead of the single RGB one.
    #[arg(long)]
    diversify: bool,
    #[arg(long, default_value_t = 100.0)]
    k: f64,
    #[arg(long, default_value_t = 50)]
    min_size: usize,
    #[arg(long, default_value_t = 0.8)]
    sigma: f64,
    #[arg(long, default_value_t = 20.0)]
    min_box_side: f64,
    #[arg(long, default_value_t = 2000)]
    max_proposals: usize,
    /// Accepted for uniformity; proposals are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flags overriding fields of an experiment config.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long)]
    proposal_cache: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// toy or small.
    #[arg(long)]
    profile: Option<Profile>,
    /// default, gap, all-neg or gap+all-neg.
    #[arg(long)]
    sampling: Option<String>,
    /// Number of leading conv layers kept fixed (F).
    #[arg(long)]
    fixed_layers: Option<usize>,
    /// default or single-cell.
    #[arg(long)]
    pooling: Option<Pooling>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    ap_mode: Option<ApMode>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if src.is_some() {
                dst.clone_from(src);
            }
        };
        set(&mut cfg.data.train, &self.train_manifest);
        set(&mut cfg.data.val, &self.val_manifest);
        set(&mut cfg.data.test, &self.test_manifest);
        set(&mut cfg.data.proposal_cache, &self.proposal_cache);
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(p) = self.profile {
            cfg.profile = p;
        }
        if let Some(s) = &self.sampling {
            cfg.sampling = SamplingSpec::Named(s.clone());
        }
        if let Some(f) = self.fixed_layers {
            cfg.sgd.fixed_layers = f;
        }
        if let Some(p) = self.pooling {
            cfg.pooling = p;
        }
        if let Some(g) = self.grid {
            cfg.grid = g;
        }
        if let Some(i) = self.iterations {
            cfg.sgd.iterations = i;
        }
        if let Some(lr) = self.learning_rate {
            cfg.sgd.learning_rate = lr;
        }
        if let Some(m) = self.momentum {
            cfg.sgd.momentum = m;
        }
        if let Some(m) = self.ap_mode {
            cfg.ap_mode = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Sampling presets to try.
    #[arg(long, value_delimiter = ',', default_value = "default,gap,all-neg,gap+all-neg")]
    sampling_axis: Vec<String>,
    /// Values of F to try.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    fixed_layers_axis: Vec<usize>,
    /// Pooling variants to try.
    #[arg(long, value_delimiter = ',', default_value = "default")]
    pooling_axis: Vec<Pooling>,
    /// Retrain the best cell on train + val and evaluate it on test.
    #[arg(long)]
    select_then_retrain: bool,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Detections CSV to write.
    #[arg(long = "detections")]
    detections: PathBuf,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    max_detections: Option<usize>,
    #[arg(long)]
    resize_shorter: Option<u32>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "eleven_point")]
    ap_mode: ApMode,
    /// Extra cut-offs for the detection trend (the people count is always
    /// included).
    #[arg(long, value_delimiter = ',')]
    trend_d: Vec<usize>,
    /// Directory of per-image proposal CSVs, for proposal recall.
    #[arg(long)]
    proposals: Option<PathBuf>,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Cut-offs D; defaults to the number of labelled people.
    #[arg(long, value_delimiter = ',')]
    d: Vec<usize>,
    /// Optional SVG of the full trend.
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_styles(list: &str) -> Result<Vec<Style>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        train: a.train,
        val: a.val,
        test: a.test,
        width: a.width,
        height: a.height,
        people_min: a.people_min,
        people_max: a.people_max,
        person_height_min: a.person_height_min,
        person_height_max: a.person_height_max,
        styles: parse_styles(&a.styles)?,
        occlusion_prob: a.occlusion_prob,
        difficult_prob: a.difficult_prob,
        max_distractors: a.max_distractors,
        seed: a.seed,
    };
    let manifests = generate_synthetic(&cfg, &a.out)?;
    for m in manifests {
        let people: usize = m.entries.iter().map(|e| e.boxes.len()).sum();
        println!(
            "{}: {} images, {} people -> {}",
            m.split.map_or("?", |s| s.name()),
            m.len(),
            people,
            a.out.join(format!("{}.jsonl", m.split.map_or("?", |s| s.name()))).display()
        );
    }
    Ok(())
}

fn cmd_proposals(a: ProposalArgs) -> Result<()> {
    let mut params = if a.diversify {
        SelectiveSearchParams::diversified()
    } else {
        SelectiveSearchParams::default()
    };
    params.segmentation.k = a.k;
    params.segmentation.min_size = a.min_size;
    params.segmentation.gaussian_sigma = a.sigma;
    params.min_box_side = a.min_box_side;
    params.max_proposals = a.max_proposals;
    params.segmentation.validate()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Data(format!("{}: {e}", a.out.display())))?;
    let start = Instant::now();
    let (mut hit, mut total, mut count) = (0, 0, 0);
    for entry in &manifest.entries {
        let image = manifest.load_image(entry)?;
        // always recompute: the output directory is not a cache here
        let file = a.out.join(proposal_file_name(&entry.path));
        let set = proposals_for(&entry.path, &image, &params, None)?;
        set.save(&file)?;
        let (h, t) = recall_counts(&set.boxes(), &entry.annotations(), 0.5)?;
        hit += h;
        total += t;
        count += set.len();
    }
    let n = manifest.len().max(1) as f64;
    println!(
        "{} images, {:.1} proposals/image, {:.3} s/image, recall@0.5 {}",
        manifest.len(),
        count as f64 / n,
        start.elapsed().as_secs_f64() / n,
        if total > 0 {
            format!("{:.4} ({hit}/{total})", hit as f64 / total as f64)
        } else {
            "n/a".into()
        }
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let outcome = run_training(&cfg)?;
    if let Some((first, last)) = outcome.loss_trend((outcome.log.len() / 4).clamp(1, 100)) {
        println!("loss {first:.4} -> {last:.4} over {} iterations", outcome.log.len());
    }
    println!("checkpoint: {}", cfg.output_dir.join("checkpoint.json").display());
    Ok(())
}

fn cmd_matrix(a: MatrixArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let axes = MatrixAxes {
        sampling: a
            .sampling_axis
            .iter()
            .map(|s| s.parse::<RoiSamplingConfig>())
            .collect::<Result<_>>()?,
        fixed_layers: a.fixed_layers_axis.clone(),
        pooling: a.pooling_axis.clone(),
    };
    let outcome = run_matrix_experiment(&cfg, &axes, a.select_then_retrain)?;
    print!("{}", outcome.report.configuration_markdown());
    if axes.pooling.len() > 1 {
        println!();
        print!("{}", outcome.report.pooling_markdown());
    }
    if let Some((cell, report)) = outcome.final_eval {
        println!(
            "\nretrained {} on train+val: test AP {:.1}%",
            cell.dir_name(),
            100.0 * report.ap
        );
    }
    Ok(())
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(t) = a.score_threshold {
        cfg.detector.score_threshold = t;
    }
    if let Some(t) = a.nms_iou {
        cfg.detector.nms_iou = t;
    }
    if let Some(m) = a.max_detections {
        cfg.detector.max_detections = m;
    }
    if let Some(r) = a.resize_shorter {
        cfg.detector.resize_shorter = r;
    }
    cfg.detector.validate()?;
    let net = checkpoint::load(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let images = load_dataset(&manifest, &cfg.proposals, Some(&cfg.proposal_cache_root()))?;
    let dets = detect_all(&net, &images, &cfg.detector)?;
    if let Some(dir) = a.detections.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    }
    write_detections(&a.detections, &dets)?;
    println!("{} detections on {} images -> {}", dets.len(), images.len(), a.detections.display());
    Ok(())
}

fn load_proposal_recall(dir: &Path, manifest: &DatasetManifest) -> Result<Option<f64>> {
    let (mut hit, mut total) = (0, 0);
    for e in &manifest.entries {
        let set = ProposalSet::load(&e.path, &dir.join(proposal_file_name(&e.path)))?;
        let (h, t) = recall_counts(&set.boxes(), &e.annotations(), 0.5)?;
        hit += h;
        total += t;
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let dets = read_detections(&a.detections)?;
    let recall = match &a.proposals {
        Some(dir) => load_proposal_recall(dir, &manifest)?,
        None => None,
    };
    let opts = EvalOptions {
        mode: a.ap_mode,
        trend_d: a.trend_d,
    };
    let report = evaluate_detections(
        &dets,
        &manifest.annotations(),
        &manifest.image_styles(),
        recall,
        &opts,
        Some(&a.out),
    )?;
    println!(
        "AP ({}) {:.2}% over {} people, {} detections: {} Cor, {} Loc, {} BG, {} ignored",
        report.ap_mode.name(),
        100.0 * report.ap,
        report.num_gt,
        report.num_detections,
        report.counts.cor,
        report.counts.loc,
        report.counts.bg,
        report.counts.ignored
    );
    println!("report written to {}", a.out.display());
    Ok(())
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let gts = manifest.annotations();
    let dets = read_detections(&a.detections)?;
    let verdicts = match_detections(&dets, &gts, MATCH_IOU);
    let ranked: Vec<_> = ranked_order(&dets).into_iter().map(|i| verdicts[i]).collect();
    let num_gt = gts.iter().filter(|g| !g.difficult).count();
    let ds = if a.d.is_empty() { vec![num_gt.max(1)] } else { a.d.clone() };
    println!("| D | used | Cor | Loc | BG |\n|---|---|---|---|---|");
    for t in detection_trend(&ranked, &ds)? {
        println!(
            "| {}{} | {} | {:.3} | {:.3} | {:.3} |",
            t.d,
            if t.truncated { " (all)" } else { "" },
            t.used,
            t.cor,
            t.loc,
            t.bg
        );
    }
    if let Some(path) = a.svg {
        let n = ranked.iter().filter(|v| v.is_false_positive() || **v == xdepict::Verdict::Cor).count();
        let all: Vec<usize> = (1..=n).collect();
        let svg = trend_svg(&detection_trend(&ranked, &all)?, num_gt);
        std::fs::write(&path, svg).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Proposals(a) => cmd_proposals(a),
        Command::Train(a) => cmd_train(a),
        Command::Matrix(a) => cmd_matrix(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
