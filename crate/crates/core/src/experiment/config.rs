use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::evaluation::ApMode;
use crate::network::{NetworkSpec, Profile, SgdConfig};
use crate::proposals::SelectiveSearchParams;
use crate::sampling::{RoiSamplingConfig, SamplingPreset};

/// Training ROI sampling as written in a config file: a preset name or
/// explicit interval bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SamplingSpec {
    Named(String),
    Custom { neg_lo: f64, neg_hi: f64, pos_lo: f64 },
}

impl SamplingSpec {
    pub fn resolve(&self) -> Result<RoiSamplingConfig> {
        match self {
            SamplingSpec::Named(name) => name.parse(),
            SamplingSpec::Custom { neg_lo, neg_hi, pos_lo } => RoiSamplingConfig::custom(*neg_lo, *neg_hi, *pos_lo),
        }
    }

    pub fn from_config(cfg: &RoiSamplingConfig) -> Self {
        match cfg.name {
            SamplingPreset::Custom => SamplingSpec::Custom {
                neg_lo: cfg.neg_lo,
                neg_hi: cfg.neg_hi,
                pos_lo: cfg.pos_lo,
            },
            named => SamplingSpec::Named(named.name().to_string()),
        }
    }
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec::Named("default".into())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// The profile's `grid x grid` ROI pooling grid.
    #[default]
    Default,
    /// One cell: a global max over each ROI.
    SingleCell,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Default => "default",
            Pooling::SingleCell => "single-cell",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Pooling::Default),
            "single-cell" | "single_cell" | "single" => Ok(Pooling::SingleCell),
            other => Err(Error::Config(format!(
                "unknown pooling {other:?} (expected default or single-cell)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Directory for cached proposal CSVs; computed on demand when absent.
    pub proposal_cache: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub rois_per_image: usize,
    pub positive_fraction: f64,
    pub images_per_batch: usize,
    /// Weight of the box-regression term.
    pub bbox_loss_weight: f64,
    /// Also train on horizontally mirrored images.
    pub flip: bool,
    /// Add ground-truth boxes to the training ROI pool.
    pub include_gt: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            rois_per_image: 64,
            positive_fraction: 0.25,
            images_per_batch: 1,
            bbox_loss_weight: 1.0,
            flip: true,
            include_gt: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub profile: Profile,
    pub sampling: SamplingSpec,
    pub pooling: Pooling,
    /// ROI pooling grid side for the default pooling.
    pub grid: usize,
    pub ap_mode: ApMode,
    pub data: DataPaths,
    pub sgd: SgdConfig,
    pub batch: BatchConfig,
    pub proposals: SelectiveSearchParams,
    pub detector: DetectorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            profile: Profile::Toy,
            sampling: SamplingSpec::default(),
            pooling: Pooling::Default,
            grid: 6,
            ap_mode: ApMode::ElevenPoint,
            data: DataPaths::default(),
            sgd: SgdConfig::default(),
            batch: BatchConfig::default(),
            proposals: SelectiveSearchParams::default(),
            detector: DetectorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Loads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.data.train,
            &mut self.data.val,
            &mut self.data.test,
            &mut self.data.proposal_cache,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn sampling_config(&self) -> Result<RoiSamplingConfig> {
        self.sampling.resolve()
    }

    pub fn network_spec(&self) -> NetworkSpec {
        let spec = NetworkSpec::profile(self.profile);
        match self.pooling {
            Pooling::Default => spec.with_grid(self.grid, self.grid),
            Pooling::SingleCell => spec.with_grid(1, 1),
        }
    }

    /// Static checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.sampling_config()?.validate()?;
        if self.grid == 0 {
            return Err(Error::Config("pooling grid must be positive".into()));
        }
        let spec = self.network_spec();
        spec.validate()?;
        self.sgd.validate(spec.conv_count())?;
        if self.batch.rois_per_image == 0 || self.batch.images_per_batch == 0 {
            return Err(Error::Config("ROI batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.batch.positive_fraction) {
            return Err(Error::Config(format!(
                "positive fraction must lie in [0, 1], got {}",
                self.batch.positive_fraction
            )));
        }
        if !(self.batch.bbox_loss_weight >= 0.0) {
            return Err(Error::Config("box loss weight must be non-negative".into()));
        }
        self.proposals.segmentation.validate()?;
        self.detector.validate()
    }

    /// Checks that every referenced dataset file exists.
    pub fn check_files(&self, need: &[(&str, &Option<PathBuf>)]) -> Result<()> {
        for (what, path) in need {
            match path {
                None => return Err(Error::Config(format!("no {what} manifest configured"))),
                Some(p) if !p.is_file() => {
                    return Err(Error::Config(format!("{what} manifest {} does not exist", p.display())))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
