//! Run configuration read from `--config` (TOML) or from a previous run's manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thermosleep::panel_engine::{DemeanOptions, FitOptions, VcovKind};
use thermosleep::response_models::ModelSpec;
use thermosleep::sleep_ingest::{InclusionConfig, DEFAULT_BRIDGE_GAP_MIN};
use thermosleep::synth::SynthConfig;
use thermosleep::weather_link::{ExposureConfig, ExposureSource, DEFAULT_RADIUS_KM};
use thermosleep::Error;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Used when `--seed` is not given.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub inputs: Inputs,
    pub ingest: IngestConfig,
    pub filters: FilterConfig,
    pub exposure: ExposureToggles,
    pub model: ModelSpec,
    pub estimation: EstimationConfig,
    pub project: ProjectConfig,
    pub plot: PlotConfig,
}

/// Input files. Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub epochs: Option<PathBuf>,
    pub stations: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub users: Option<PathBuf>,
    pub scenarios: Option<PathBuf>,
    /// A `fit.json` containing the three spline coefficients.
    pub spline: Option<PathBuf>,
    pub countries: Option<PathBuf>,
    /// `curve.csv` or `projection.csv` for the plot command.
    pub plot: Option<PathBuf>,
}

impl Inputs {
    fn paths_mut(&mut self) -> [&mut Option<PathBuf>; 8] {
        [
            &mut self.epochs,
            &mut self.stations,
            &mut self.grid,
            &mut self.users,
            &mut self.scenarios,
            &mut self.spline,
            &mut self.countries,
            &mut self.plot,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub bridge_gap_min: u32,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            bridge_gap_min: DEFAULT_BRIDGE_GAP_MIN,
        }
    }
}

/// Record and user inclusion thresholds; timing windows keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_duration_h: f64,
    pub max_duration_h: f64,
    pub min_nights: usize,
    pub min_coverage: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let d = InclusionConfig::default();
        FilterConfig {
            min_duration_h: d.min_duration_h,
            max_duration_h: d.max_duration_h,
            min_nights: d.min_nights,
            min_coverage: d.min_coverage,
        }
    }
}

impl FilterConfig {
    pub fn inclusion(&self) -> InclusionConfig {
        InclusionConfig {
            min_duration_h: self.min_duration_h,
            max_duration_h: self.max_duration_h,
            min_nights: self.min_nights,
            min_coverage: self.min_coverage,
            ..InclusionConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExposureToggles {
    pub source: ExposureSource,
    pub radius_km: f64,
}

impl Default for ExposureToggles {
    fn default() -> Self {
        ExposureToggles {
            source: ExposureSource::Station,
            radius_km: DEFAULT_RADIUS_KM,
        }
    }
}

impl ExposureToggles {
    pub fn config(&self) -> ExposureConfig {
        ExposureConfig {
            source: self.source,
            radius_km: self.radius_km,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub vcov: VcovKind,
    pub tol: f64,
    pub max_iter: usize,
    /// Also fit the linear-spline model (linear tmin treatment only).
    pub spline: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        let d = DemeanOptions::default();
        EstimationConfig {
            vcov: VcovKind::Cr1,
            tol: d.tol,
            max_iter: d.max_iter,
            spline: false,
        }
    }
}

impl EstimationConfig {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            demean: DemeanOptions {
                tol: self.tol,
                max_iter: self.max_iter,
                ..DemeanOptions::default()
            },
            vcov: self.vcov,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub baseline_year: i32,
    /// Model name for scenario files without a `model` column.
    pub model: Option<String>,
    /// Year for scenario files without a `year` column.
    pub year: Option<i32>,
    /// Segment slopes (min/°C) used when no spline fit is supplied.
    pub slopes: Option<[f64; 3]>,
    /// Hours in an average night; when set, losses are also reported in nights.
    pub average_night_hours: Option<f64>,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            baseline_year: thermosleep::projection::BASELINE_YEAR,
            model: None,
            year: None,
            slopes: None,
            average_night_hours: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    pub title: Option<String>,
    pub y_label: String,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig {
            title: None,
            y_label: "minutes".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, source: &Path) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("{}: {e}", source.display())))
    }

    /// Make every input path absolute relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in self.inputs.paths_mut().into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.ingest.bridge_gap_min == 0 {
            return Err(Error::Validation("ingest.bridge_gap_min must be positive".into()));
        }
        self.filters.inclusion().validate()?;
        if !(self.exposure.radius_km > 0.0) {
            return Err(Error::Validation("exposure.radius_km must be positive".into()));
        }
        if !(self.estimation.tol > 0.0) || self.estimation.max_iter == 0 {
            return Err(Error::Validation("estimation.tol and estimation.max_iter must be positive".into()));
        }
        if let Some(h) = self.project.average_night_hours {
            if !(h > 0.0 && h <= 24.0) {
                return Err(Error::Validation(format!("project.average_night_hours must lie in (0, 24], got {h}")));
            }
        }
        if let Some(s) = self.project.slopes {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("project.slopes must be finite".into()));
            }
        }
        self.model.validate()
    }
}

/// Fetch a required input path or explain which key is missing.
pub fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, Error> {
    p.as_deref()
        .ok_or_else(|| Error::Validation(format!("inputs.{key} is required for this command")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c = RunConfig::from_toml("", Path::new("x.toml")).unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[model]\nbogus = 1\n", Path::new("x.toml")).is_err());
    }

    #[test]
    fn nested_enums_parse() {
        let text = r#"
seed = 7
[synth]
start_date = "2016-03-01"
[synth.truth]
family = "kinked"
knot = 10.0
below = 0.0
above = -0.45
[model]
treatment = "tmin_binned"
region_time_fe = "adm1_week"
[model.interaction.attribute]
column = "group"
[estimation]
vcov = "CR0"
[exposure]
source = "grid"
"#;
        let c = RunConfig::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.estimation.vcov, VcovKind::Cr0);
        assert_eq!(c.exposure.source, ExposureSource::Grid);
        assert!(c.validate().is_err(), "interaction with binned treatment");
    }

    #[test]
    fn relative_paths_resolve() {
        let mut c = RunConfig::default();
        c.inputs.epochs = Some("data/e.csv".into());
        c.inputs.users = Some("/abs/u.csv".into());
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.inputs.epochs.unwrap(), PathBuf::from("/cfg/data/e.csv"));
        assert_eq!(c.inputs.users.unwrap(), PathBuf::from("/abs/u.csv"));
    }
}
