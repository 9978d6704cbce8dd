//! Sampling x fixed-layers x pooling ablation matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::experiment::config::{ExperimentConfig, Pooling, SamplingSpec};
use crate::experiment::dataset::LoadedImage;
use crate::experiment::evaluate::run_eval;
use crate::experiment::train::train;
use crate::sampling::{RoiSamplingConfig, SamplingPreset};

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixAxes {
    pub sampling: Vec<RoiSamplingConfig>,
    pub fixed_layers: Vec<usize>,
    pub pooling: Vec<Pooling>,
}

impl Default for MatrixAxes {
    /// The four sampling presets, `F = 0`, default pooling.
    fn default() -> Self {
        MatrixAxes {
            sampling: SamplingPreset::NAMED.iter().map(|p| RoiSamplingConfig::preset(*p)).collect(),
            fixed_layers: vec![0],
            pooling: vec![Pooling::Default],
        }
    }
}

impl MatrixAxes {
    pub fn validate(&self) -> Result<()> {
        if self.sampling.is_empty() || self.fixed_layers.is_empty() || self.pooling.is_empty() {
            return Err(Error::Config("every matrix axis needs at least one value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sampling.len() * self.fixed_layers.len() * self.pooling.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells in row-major order: sampling, then F, then pooling.
    pub fn cells(&self) -> Vec<(RoiSamplingConfig, usize, Pooling)> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.sampling {
            for &f in &self.fixed_layers {
                for &p in &self.pooling {
                    out.push((*s, f, p));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub configuration: String,
    pub negative: String,
    pub positive: String,
    pub fixed_layers: usize,
    pub pooling: Pooling,
    pub ap: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub sampling: RoiSamplingConfig,
}

impl MatrixCell {
    pub fn dir_name(&self) -> String {
        format!(
            "{}_F{}_{}",
            self.configuration.replace('+', "-"),
            self.fixed_layers,
            self.pooling.name()
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub cells: Vec<MatrixCell>,
}

fn ap_text(ap: Option<f64>) -> String {
    ap.map_or_else(|| "failed".to_string(), |a| format!("{:.1}", 100.0 * a))
}

impl MatrixReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("configuration,negative,positive,fixed_layers,pooling,ap,error\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},\"{}\",{},{},{},{},{}",
                c.configuration,
                c.negative,
                c.positive,
                c.fixed_layers,
                c.pooling,
                c.ap.map_or_else(String::new, |a| a.to_string()),
                c.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
        }
        s
    }

    /// Best successful cell; ties go to the earliest.
    pub fn best(&self) -> Option<&MatrixCell> {
        self.cells
            .iter()
            .filter(|c| c.ap.is_some())
            .fold(None, |best: Option<&MatrixCell>, c| match best {
                Some(b) if b.ap >= c.ap => Some(b),
                _ => Some(c),
            })
    }

    /// Configuration table with AP (percent); the best row of each
    /// configuration is bold.
    pub fn configuration_markdown(&self) -> String {
        let mut best: BTreeMap<&str, f64> = BTreeMap::new();
        for c in &self.cells {
            if let Some(ap) = c.ap {
                let e = best.entry(c.configuration.as_str()).or_insert(ap);
                *e = e.max(ap);
            }
        }
        let mut s = String::from(
            "| configuration | negative | positive | fixed layers (F) | pooling | AP (%) |\n|---|---|---|---|---|---|\n",
        );
        for c in &self.cells {
            let bold = c.ap.is_some() && c.ap == best.get(c.configuration.as_str()).copied();
            let ap = ap_text(c.ap);
            let ap = if bold { format!("**{ap}**") } else { ap };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                c.configuration, c.negative, c.positive, c.fixed_layers, c.pooling, ap
            );
        }
        s
    }

    /// Default versus single-cell pooling for each (configuration, F) pair,
    /// with the better column bold.
    pub fn pooling_markdown(&self) -> String {
        let mut rows: Vec<(String, usize)> = Vec::new();
        let mut table: BTreeMap<(String, usize, Pooling), Option<f64>> = BTreeMap::new();
        for c in &self.cells {
            let key = (c.configuration.clone(), c.fixed_layers);
            if !rows.contains(&key) {
                rows.push(key);
            }
            table.insert((c.configuration.clone(), c.fixed_layers, c.pooling), c.ap);
        }
        let mut s = String::from("| configuration | F | default | single cell |\n|---|---|---|---|\n");
        for (conf, f) in rows {
            let d = table.get(&(conf.clone(), f, Pooling::Default)).copied();
            let sc = table.get(&(conf.clone(), f, Pooling::SingleCell)).copied();
            let fmt = |v: Option<Option<f64>>, other: Option<Option<f64>>| match v {
                None => "-".to_string(),
                Some(ap) => {
                    let t = ap_text(ap);
                    match (ap, other.flatten()) {
                        (Some(a), Some(b)) if a > b => format!("**{t}**"),
                        _ => t,
                    }
                }
            };
            let _ = writeln!(s, "| {conf} | {f} | {} | {} |", fmt(d, sc), fmt(sc, d));
        }
        s
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        for (name, text) in [
            ("matrix.csv", self.to_csv()),
            ("matrix.md", self.configuration_markdown()),
            ("pooling.md", self.pooling_markdown()),
        ] {
            let p = out_dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Config for one matrix cell.
pub fn cell_config(base: &ExperimentConfig, sampling: &RoiSamplingConfig, f: usize, pooling: Pooling) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.sampling = SamplingSpec::from_config(sampling);
    cfg.sgd.fixed_layers = f;
    cfg.pooling = pooling;
    cfg
}

/// Trains and evaluates every cell with the same seed. A failing cell is
/// recorded and the matrix carries on. Per-cell checkpoints, logs and
/// evaluation artifacts go under `out_dir/cells/` when `out_dir` is given.
pub fn run_matrix(
    base: &ExperimentConfig,
    axes: &MatrixAxes,
    train_images: &[LoadedImage],
    eval_images: &[LoadedImage],
    image_styles: &BTreeMap<String, String>,
    out_dir: Option<&Path>,
) -> Result<MatrixReport> {
    axes.validate()?;
    let opts = EvalOptions {
        mode: base.ap_mode,
        trend_d: Vec::new(),
    };
    let mut cells = Vec::with_capacity(axes.len());
    for (sampling, f, pooling) in axes.cells() {
        let mut cell = MatrixCell {
            configuration: sampling.name.name().to_string(),
            negative: sampling.negative_interval(),
            positive: sampling.positive_interval(),
            fixed_layers: f,
            pooling,
            ap: None,
            error: None,
            sampling,
        };
        let cfg = cell_config(base, &sampling, f, pooling);
        let dir = out_dir.map(|d| d.join("cells").join(cell.dir_name()));
        log::info!("matrix cell {}", cell.dir_name());
        let result = (|| -> Result<f64> {
            let outcome = train(train_images, &cfg, dir.as_ref().map(|d| d.join("train_log.jsonl")).as_deref())?;
            if let Some(d) = &dir {
                checkpoint::save(&outcome.network, &d.join("checkpoint.json"))?;
            }
            let eval_dir = dir.as_ref().map(|d| d.join("eval"));
            let (report, _) = run_eval(&outcome.network, eval_images, image_styles, &cfg.detector, &opts, eval_dir.as_deref())?;
            Ok(report.ap)
        })();
        match result {
            Ok(ap) => cell.ap = Some(ap),
            Err(e) => {
                log::warn!("matrix cell {} failed: {e}", cell.dir_name());
                cell.error = Some(e.to_string());
            }
        }
        cells.push(cell);
    }
    let report = MatrixReport { cells };
    if let Some(d) = out_dir {
        report.write(d)?;
    }
    Ok(report)
}
