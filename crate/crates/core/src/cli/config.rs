use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::read_model;
use crate::helmholtz::SolverOptions;
use crate::inversion::{ContinuationSchedule, InversionMode, Survey, SurveySpec};
use crate::mesh::{velocity_to_slowness_squared, ModelBounds, RegularGrid};
use crate::models::{ModelSpec, SurfaceAcquisition};

use super::bench::BenchSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n: Vec<usize>,
    pub h: Vec<f64>,
}

/// A builtin generator or a JSSM1 file holding velocities (km/s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    File { file: PathBuf },
    Builtin(ModelSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityBounds {
    pub v_min: f64,
    pub v_max: f64,
}

fn default_true() -> bool {
    true
}

fn default_layer() -> usize {
    10
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_bounds() -> VelocityBounds {
    VelocityBounds { v_min: 1.5, v_max: 4.5 }
}

/// Everything one run needs; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub grid: GridSpec,
    pub truth: Option<ModelSource>,
    pub start: Option<ModelSource>,
    pub acquisition: SurfaceAcquisition,
    /// Hz, increasing.
    pub frequencies: Vec<f64>,
    pub peak_frequency: f64,
    /// Constant attenuation added to the absorbing layer profile.
    pub attenuation: f64,
    #[serde(default = "default_layer")]
    pub layer_width: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_true")]
    pub travel_times: bool,
    #[serde(default = "default_bounds")]
    pub bounds: VelocityBounds,
    #[serde(default)]
    pub mode: Option<InversionMode>,
    #[serde(default)]
    pub schedule: ContinuationSchedule,
    #[serde(default)]
    pub solver: SolverOptions,
    /// Observed data; defaults to `data.jsdt` in the output directory.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub output: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub snapshots: bool,
    #[serde(default)]
    pub bench: Option<BenchSpec>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(&path.display().to_string()))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Relative model and data paths are taken relative to `base`.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for src in [&mut self.truth, &mut self.start].into_iter().flatten() {
            if let ModelSource::File { file } = src {
                fix(file);
            }
        }
        if let Some(d) = &mut self.data {
            fix(d);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn core_grid(&self) -> Result<RegularGrid> {
        RegularGrid::with_spacing(&self.grid.n, &self.grid.h).map_err(|e| e.context("grid"))
    }

    pub fn model_bounds(&self) -> Result<ModelBounds> {
        ModelBounds::from_velocity(self.bounds.v_min, self.bounds.v_max).map_err(|e| e.context("bounds"))
    }

    pub fn survey(&self) -> Result<Survey> {
        let grid = self.core_grid()?;
        let geometry = self.acquisition.build(&grid).map_err(|e| e.context("acquisition"))?;
        let spec = SurveySpec {
            frequencies: self.frequencies.clone(),
            peak_frequency: self.peak_frequency,
            base_gamma: self.attenuation,
            layer_width: self.layer_width,
            solver: self.solver.clone(),
        };
        Survey::new(grid, geometry, spec)
    }

    pub fn data_path(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.output.join("data.jsdt"))
    }

    /// Squared slowness of `source` on the core grid.
    pub fn load_model(&self, source: &ModelSource, what: &str) -> Result<Vec<f64>> {
        let grid = self.core_grid()?;
        let v = match source {
            ModelSource::Builtin(spec) => spec.velocity(&grid)?,
            ModelSource::File { file } => {
                let (g, v) = read_model(file).map_err(|e| e.context(&file.display().to_string()))?;
                if g.dims() != grid.dims() {
                    return Err(Error::Config(format!("{what} model {} has dims {:?}, grid is {:?}", file.display(), g.dims(), grid.dims())));
                }
                v
            }
        };
        velocity_to_slowness_squared(&v).map_err(|e| e.context(what))
    }

    pub fn truth_model(&self) -> Result<Vec<f64>> {
        let src = self.truth.as_ref().ok_or_else(|| Error::Config("no truth model configured".into()))?;
        self.load_model(src, "truth")
    }

    pub fn start_model(&self) -> Result<Vec<f64>> {
        let src = self.start.as_ref().ok_or_else(|| Error::Config("no start model configured".into()))?;
        self.load_model(src, "start")
    }

    /// Checks shared by every command that builds a survey.
    pub fn validate(&self) -> Result<Survey> {
        if self.name.is_empty() {
            return Err(Error::Config("experiment name is empty".into()));
        }
        if !(self.noise >= 0.0 && self.noise < 1.0) {
            return Err(Error::Config(format!("noise fraction {} outside [0, 1)", self.noise)));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("thread count must be positive".into()));
        }
        self.model_bounds()?;
        self.schedule.validate(self.frequencies.len())?;
        self.survey()
    }
}
