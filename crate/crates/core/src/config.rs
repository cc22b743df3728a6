//! Run configuration: a sectioned TOML file, validated before any work.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stain_mask::StainConfig;
use crate::train::TrainingConfig;
use crate::wsi::Magnification;

/// The only environment variable read: overrides `paths.out`.
pub const OUT_ENV: &str = "VSTAIN_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Synth,
    Train,
    Stain,
    Qc,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out: PathBuf,
    /// Slide directory; relative paths resolve against `out`.
    pub data: PathBuf,
    pub model: PathBuf,
    /// Slides to stain; empty means every H&E slide under `data`.
    pub inputs: Vec<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out: "out".into(), data: "data".into(), model: "model".into(), inputs: Vec::new() }
    }
}

impl Paths {
    fn under_out(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.under_out(&self.data)
    }

    pub fn model_dir(&self) -> PathBuf {
        self.under_out(&self.model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub num_stains: usize,
    pub slides: usize,
    pub width: usize,
    pub height: usize,
    /// Held-out slides written for `eval`.
    pub eval_slides: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { num_stains: 3, slides: 4, width: 256, height: 256, eval_slides: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub iterations: usize,
    /// Write a JSON loss line every this many iterations.
    pub log_every: usize,
    /// Training tile side; tiles are cut from the slides with no overlap.
    pub tile_size: usize,
    pub min_tissue: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { iterations: 400, log_every: 20, tile_size: 64, min_tissue: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StitchConfig {
    pub tile_size: usize,
    pub overlap: f64,
    pub magnification: Magnification,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self { tile_size: 64, overlap: 0.6, magnification: Magnification::X40 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StainSection {
    /// Stain names to generate; empty means all.
    pub stains: Vec<String>,
    pub qc: bool,
}

impl Default for StainSection {
    fn default() -> Self {
        Self { stains: Vec::new(), qc: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcSection {
    /// Percentiles of the clean-tile std distribution bounding the normal range.
    pub lo_percentile: f64,
    pub hi_percentile: f64,
    pub heatmaps: bool,
}

impl Default for QcSection {
    fn default() -> Self {
        Self { lo_percentile: 5.0, hi_percentile: 95.0, heatmaps: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSection,
    pub train: TrainingConfig,
    pub schedule: ScheduleSection,
    /// Activation bands; empty means the synthetic defaults for `train.num_stains`.
    pub stains: Vec<StainConfig>,
    pub stitch: StitchConfig,
    pub stain: StainSection,
    pub qc: QcSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut train = TrainingConfig { num_stains: 3, batch_size: 1, base_lr: 5e-3, ..TrainingConfig::default() };
        train.init = crate::model::Init::Identity;
        train.fixed_epochs = 2;
        train.decay_epochs = 2;
        train.detailed_report = false;
        Self {
            seed: 0,
            paths: Paths::default(),
            synth: SynthSection::default(),
            train,
            schedule: ScheduleSection::default(),
            stains: Vec::new(),
            stitch: StitchConfig::default(),
            stain: StainSection::default(),
            qc: QcSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Reads `path` (defaults when `None`), applies the output override
    /// and validates.
    pub fn load(path: Option<&Path>, out_override: Option<PathBuf>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        if let Some(out) = out_override.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)) {
            cfg.paths.out = out;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let s = &self.synth;
        if s.num_stains == 0 || s.num_stains > crate::synth::MAX_STAINS {
            return Err(Error::Config(format!("synth.num_stains must be 1..={}", crate::synth::MAX_STAINS)));
        }
        if s.slides == 0 || s.width < crate::synth::MIN_SIZE || s.height < crate::synth::MIN_SIZE {
            return Err(Error::Config(format!("synth needs >= 1 slide of at least {0}x{0}", crate::synth::MIN_SIZE)));
        }
        let sc = &self.schedule;
        if sc.tile_size < 8 || sc.log_every == 0 || !(0.0..=1.0).contains(&sc.min_tissue) {
            return Err(Error::Config("schedule needs tile_size >= 8, log_every >= 1, min_tissue in [0, 1]".into()));
        }
        if self.stitch.tile_size < 8 || !(0.0..1.0).contains(&self.stitch.overlap) {
            return Err(Error::Config("stitch needs tile_size >= 8 and overlap in [0, 1)".into()));
        }
        let q = &self.qc;
        if !(0.0 <= q.lo_percentile && q.lo_percentile < q.hi_percentile && q.hi_percentile <= 100.0) {
            return Err(Error::Config("qc percentiles must satisfy 0 <= lo < hi <= 100".into()));
        }
        for (i, st) in self.stains.iter().enumerate() {
            st.validate()?;
            if st.stain_id != i + 1 {
                return Err(Error::Config(format!("stains[{i}] has id {} (ids must run 1..=S)", st.stain_id)));
            }
        }
        if !self.stains.is_empty() && self.stains.len() != self.train.num_stains {
            return Err(Error::Config(format!(
                "{} stain bands for train.num_stains = {}",
                self.stains.len(),
                self.train.num_stains
            )));
        }
        Ok(())
    }

    /// Bands for training: explicit ones, else the synthetic defaults.
    pub fn stain_configs(&self) -> Result<Vec<StainConfig>> {
        if !self.stains.is_empty() {
            return Ok(self.stains.clone());
        }
        Ok(crate::synth::default_stain_specs(self.train.num_stains)?.iter().map(|s| s.stain_config()).collect())
    }
}
