//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::atesc::{AtescConfig, Distiller};
use crate::dfkd::DfkdConfig;
use crate::domains::ToySpec;
use crate::error::{Error, Result};
use crate::ntl::{NtlConfig, TeacherVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub variant: TeacherVariant,
    /// Load this teacher instead of training one.
    pub checkpoint: Option<PathBuf>,
    pub training: NtlConfig,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            variant: TeacherVariant::NtlCls,
            checkpoint: None,
            training: NtlConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub distiller: Distiller,
    pub grid_resolution: usize,
    /// Attack lengths for robustness curves.
    pub probe_steps: Vec<usize>,
    /// Rows of the exported synthetic / grouped batches.
    pub export_batch: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            distiller: Distiller::Baseline,
            grid_resolution: 101,
            probe_steps: vec![0, 1, 2, 5, 10, 20],
            export_batch: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub domain: ToySpec,
    pub teacher: TeacherSection,
    pub dfkd: DfkdConfig,
    pub atesc: AtescConfig,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Parses `text`; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.teacher.training.validate()?;
        self.dfkd.validate()?;
        self.atesc.validate()?;
        if self.eval.grid_resolution < 2 || self.eval.export_batch < 2 {
            return Err(Error::Config {
                path: "eval".into(),
                message: "grid_resolution and export_batch must be ≥ 2".into(),
            });
        }
        Ok(())
    }

    /// One seed for everything stochastic after data generation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.teacher.training.seed = seed;
        self.dfkd.seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.dfkd.seed
    }
}
