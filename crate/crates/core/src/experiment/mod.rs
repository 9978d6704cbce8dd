//! End-to-end experiment driver: training, evaluation and the ablation matrix.

pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod matrix;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::evaluation::{EvalOptions, EvalReport};

pub use config::{BatchConfig, DataPaths, ExperimentConfig, Pooling, SamplingSpec};
pub use dataset::{load_dataset, LoadedImage};
pub use evaluate::{detect_all, run_eval};
pub use matrix::{run_matrix, MatrixAxes, MatrixCell, MatrixReport};
pub use train::{train, TrainOutcome, TrainRecord};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

impl ExperimentConfig {
    /// Where proposal CSVs are cached.
    pub fn proposal_cache_root(&self) -> PathBuf {
        self.data
            .proposal_cache
            .clone()
            .unwrap_or_else(|| self.output_dir.join("proposals"))
    }
}

/// Loads a manifest and its images and proposals.
pub fn load_split(path: &Path, cfg: &ExperimentConfig) -> Result<(DatasetManifest, Vec<LoadedImage>)> {
    let manifest = DatasetManifest::load(path)?;
    let images = load_dataset(&manifest, &cfg.proposals, Some(&cfg.proposal_cache_root()))?;
    Ok((manifest, images))
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))
}

/// Trains on the configured train manifest and writes the checkpoint,
/// training log and effective config into the output directory.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_files(&[("train", &cfg.data.train)])?;
    let (_, images) = load_split(cfg.data.train.as_ref().expect("checked"), cfg)?;
    write_config(cfg, &cfg.output_dir)?;
    let outcome = train(&images, cfg, Some(&cfg.output_dir.join(TRAIN_LOG_FILE)))?;
    checkpoint::save(&outcome.network, &cfg.output_dir.join(CHECKPOINT_FILE))?;
    Ok(outcome)
}

/// Evaluates a checkpoint on a manifest, writing detections and report
/// artifacts to `out_dir`.
pub fn run_evaluation(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    manifest_path: &Path,
    out_dir: &Path,
    trend_d: Vec<usize>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let net = checkpoint::load(checkpoint_path)?;
    let (manifest, images) = load_split(manifest_path, cfg)?;
    let opts = EvalOptions {
        mode: cfg.ap_mode,
        trend_d,
    };
    let (report, _) = run_eval(&net, &images, &manifest.image_styles(), &cfg.detector, &opts, Some(out_dir))?;
    Ok(report)
}

#[derive(Debug)]
pub struct MatrixOutcome {
    pub report: MatrixReport,
    /// Winning cell retrained on train + val and evaluated on test.
    pub final_eval: Option<(MatrixCell, EvalReport)>,
}

/// Runs the matrix (train split for training, val split for scoring).
/// With `select_then_retrain`, the best cell is retrained on train + val and
/// evaluated on the test split under `output_dir/final`.
pub fn run_matrix_experiment(cfg: &ExperimentConfig, axes: &MatrixAxes, select_then_retrain: bool) -> Result<MatrixOutcome> {
    cfg.validate()?;
    axes.validate()?;
    let mut need = vec![("train", &cfg.data.train), ("val", &cfg.data.val)];
    if select_then_retrain {
        need.push(("test", &cfg.data.test));
    }
    cfg.check_files(&need)?;
    let (_, train_images) = load_split(cfg.data.train.as_ref().expect("checked"), cfg)?;
    let (val_manifest, val_images) = load_split(cfg.data.val.as_ref().expect("checked"), cfg)?;
    write_config(cfg, &cfg.output_dir)?;
    let report = run_matrix(
        cfg,
        axes,
        &train_images,
        &val_images,
        &val_manifest.image_styles(),
        Some(&cfg.output_dir),
    )?;

    let mut final_eval = None;
    if select_then_retrain {
        let best = report
            .best()
            .cloned()
            .ok_or_else(|| Error::Data("every matrix cell failed; nothing to retrain".into()))?;
        log::info!("retraining best cell {} on train + val", best.dir_name());
        let final_cfg = matrix::cell_config(cfg, &best.sampling, best.fixed_layers, best.pooling);
        let dir = cfg.output_dir.join("final");
        write_config(&final_cfg, &dir)?;
        let mut trainval = train_images;
        trainval.extend(val_images);
        let outcome = train(&trainval, &final_cfg, Some(&dir.join(TRAIN_LOG_FILE)))?;
        checkpoint::save(&outcome.network, &dir.join(CHECKPOINT_FILE))?;
        let (test_manifest, test_images) = load_split(cfg.data.test.as_ref().expect("checked"), cfg)?;
        let opts = EvalOptions {
            mode: cfg.ap_mode,
            trend_d: Vec::new(),
        };
        let (eval, _) = run_eval(
            &outcome.network,
            &test_images,
            &test_manifest.image_styles(),
            &final_cfg.detector,
            &opts,
            Some(&dir.join("eval")),
        )?;
        final_eval = Some((best, eval));
    }
    Ok(MatrixOutcome { report, final_eval })
}
