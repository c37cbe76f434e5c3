//! Pipeline configuration: JSON with explicit defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use quasispec::analysis::{DEFAULT_CLUSTERS, DEFAULT_GAP_SUBSAMPLE, DEFAULT_REFERENCES};
use quasispec::calibration::{BayerPattern, DEFAULT_BRIGHT_PERCENTILE};
use quasispec::phantom::PhantomSpec;
use quasispec::reconstruction::ReconstructionParams;
use quasispec::spectral::{presets, CurveTable, GridSpec};
use quasispec::{EffectiveLight, WavelengthGrid};

use crate::errors::invalid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    /// Worker threads; `None` uses the available parallelism.
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    pub grid: GridSpec,
    pub light: LightConfig,
    pub calibration: CalibrationConfig,
    pub input: InputConfig,
    pub reconstruction: ReconstructionParams,
    pub analysis: AnalysisConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            output_dir: PathBuf::from("out"),
            grid: GridSpec::default(),
            light: LightConfig::default(),
            calibration: CalibrationConfig::default(),
            input: InputConfig::default(),
            reconstruction: ReconstructionParams::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Effective light. Without CSVs the built-in LED and RGB sensor curves are used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LightConfig {
    /// Light-source spectrum: wavelength column plus one value column.
    pub source_csv: Option<PathBuf>,
    /// Channel quantum efficiencies: wavelength column plus one column per channel.
    pub qe_csv: Option<PathBuf>,
}

/// How corrected intensities are scaled to the white level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteReference {
    /// Divide by `∫ source · QE_c dλ` in calibration units.
    Light,
    /// Divide each channel by its brightest unmasked value (empty background).
    BrightField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationLevel {
    /// Exposure stack recorded at this level.
    pub frames: Vec<PathBuf>,
    /// Measured spectrum of the level: wavelength column plus one value column.
    pub spectrum_csv: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub pattern: BayerPattern,
    pub levels: Vec<CalibrationLevel>,
    /// Grid for the level integrals; finer than the reconstruction grid.
    pub fine_grid: GridSpec,
    pub bright_percentile: f64,
    pub white_reference: WhiteReference,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            pattern: BayerPattern::Rggb,
            levels: Vec::new(),
            fine_grid: GridSpec {
                lambda_min: 380.0,
                lambda_max: 780.0,
                w: 401,
            },
            bright_percentile: DEFAULT_BRIGHT_PERCENTILE,
            white_reference: WhiteReference::Light,
        }
    }
}

/// Where the image comes from: a synthetic phantom or raw frames.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    /// Z-stack of raw frames; the sharpest corrected frame is reconstructed.
    pub frames: Vec<PathBuf>,
    /// Prebuilt calibration table; built from `calibration.levels` otherwise.
    pub table: Option<PathBuf>,
    pub phantom: Option<PhantomSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub k: usize,
    pub gap_k_min: usize,
    pub gap_k_max: usize,
    pub gap_references: usize,
    pub gap_max_points: usize,
    pub stain_components: usize,
    /// Black-body temperature of the rendering illuminant.
    pub temperature: f64,
    /// Tabulated illuminant; overrides `temperature` when set.
    pub illuminant_csv: Option<PathBuf>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_CLUSTERS,
            gap_k_min: 1,
            gap_k_max: 15,
            gap_references: DEFAULT_REFERENCES,
            gap_max_points: DEFAULT_GAP_SUBSAMPLE,
            stain_components: 3,
            temperature: 5800.0,
            illuminant_csv: None,
        }
    }
}

impl PipelineConfig {
    /// Reads a config, or the config recorded in a run manifest.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let value = match value.get("manifest_version") {
            Some(_) => value
                .get("config")
                .cloned()
                .ok_or_else(|| invalid(format!("{}: manifest has no config", path.display())))?,
            None => value,
        };
        serde_json::from_value(value).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    /// Copies the root seed into the components that draw random numbers.
    pub fn resolve(mut self) -> Self {
        self.reconstruction.cmaes.seed = self.seed;
        self
    }

    /// Parameter ranges; file existence is checked per command.
    pub fn validate(&self) -> anyhow::Result<()> {
        let check = |r: quasispec::Result<()>, what: &str| r.map_err(|e| invalid(format!("{what}: {e}")));
        check(WavelengthGrid::try_from(self.grid).map(drop), "grid")?;
        check(WavelengthGrid::try_from(self.calibration.fine_grid).map(drop), "calibration.fine_grid")?;
        check(self.reconstruction.validate(), "reconstruction")?;
        if self.threads == Some(0) {
            return Err(invalid("threads must be at least 1"));
        }
        let p = self.calibration.bright_percentile;
        if !(p > 0.0 && p < 1.0) {
            return Err(invalid(format!("calibration.bright_percentile must lie in (0, 1), got {p}")));
        }
        let a = &self.analysis;
        if a.k == 0 || a.gap_k_min == 0 || a.gap_k_min > a.gap_k_max {
            return Err(invalid("analysis needs k >= 1 and 1 <= gap_k_min <= gap_k_max"));
        }
        if a.gap_references == 0 || a.gap_max_points < 2 {
            return Err(invalid("analysis needs gap_references >= 1 and gap_max_points >= 2"));
        }
        if !(1..=3).contains(&a.stain_components) {
            return Err(invalid("analysis.stain_components must lie in 1..=3"));
        }
        if !(a.temperature > 0.0 && a.temperature.is_finite()) {
            return Err(invalid("analysis.temperature must be positive"));
        }
        if self.light.source_csv.is_some() != self.light.qe_csv.is_some() {
            return Err(invalid("light.source_csv and light.qe_csv must be given together"));
        }
        if let Some(spec) = &self.input.phantom {
            check(spec.validate(), "input.phantom")?;
        }
        Ok(())
    }

    pub fn grid(&self) -> anyhow::Result<WavelengthGrid> {
        Ok(WavelengthGrid::try_from(self.grid)?)
    }

    pub fn fine_grid(&self) -> anyhow::Result<WavelengthGrid> {
        Ok(WavelengthGrid::try_from(self.calibration.fine_grid)?)
    }

    pub fn light_paths(&self) -> Vec<&Path> {
        [&self.light.source_csv, &self.light.qe_csv]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path)
            .collect()
    }

    /// Source spectrum and channel efficiencies on `grid`.
    pub fn light_curves(&self, grid: &WavelengthGrid) -> anyhow::Result<(Vec<f64>, Vec<(String, Vec<f64>)>)> {
        match (&self.light.source_csv, &self.light.qe_csv) {
            (Some(source), Some(qe)) => {
                let source = CurveTable::load_csv(source)
                    .with_context(|| format!("light source {}", source.display()))?
                    .resample(0, grid);
                let qe = CurveTable::load_csv(qe)
                    .with_context(|| format!("quantum efficiency {}", qe.display()))?
                    .resample_all(grid);
                Ok((source, qe))
            }
            (None, None) => Ok((grid.sample(presets::white_led), presets::rgb_quantum_efficiency(grid))),
            _ => bail!(invalid("light.source_csv and light.qe_csv must be given together")),
        }
    }

    pub fn effective_light(&self, grid: &WavelengthGrid) -> anyhow::Result<EffectiveLight> {
        let (source, qe) = self.light_curves(grid)?;
        EffectiveLight::from_source(&source, &qe).map_err(|e| invalid(format!("effective light: {e}")))
    }

    /// Every file the config refers to, for existence checks.
    pub fn referenced_files(&self) -> Vec<&Path> {
        let mut files = self.light_paths();
        for level in &self.calibration.levels {
            files.extend(level.frames.iter().map(PathBuf::as_path));
            files.push(&level.spectrum_csv);
        }
        files.extend(self.input.frames.iter().map(PathBuf::as_path));
        files.extend(self.input.table.as_deref());
        files.extend(self.analysis.illuminant_csv.as_deref());
        files
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_a_json_round_trip() {
        let config = PipelineConfig::default();
        let text = serde_json::to_string(&config).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), config);
        config.validate().unwrap();
    }

    #[test]
    fn partial_config_fills_defaults() {
        let config: PipelineConfig = serde_json::from_str(r#"{"seed": 9, "analysis": {"k": 4}}"#).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.analysis.k, 4);
        assert_eq!(config.analysis.gap_references, DEFAULT_REFERENCES);
        assert_eq!(config.grid.w, 48);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"analysis": {"kk": 1}}"#).is_err());
    }

    #[test]
    fn resolve_propagates_the_seed() {
        let config = PipelineConfig {
            seed: 42,
            ..Default::default()
        }
        .resolve();
        assert_eq!(config.reconstruction.cmaes.seed, 42);
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        let mut config = PipelineConfig::default();
        config.calibration.bright_percentile = 1.0;
        assert!(config.validate().is_err());
        let mut config = PipelineConfig::default();
        config.analysis.gap_k_min = 5;
        config.analysis.gap_k_max = 4;
        assert!(config.validate().is_err());
        let mut config = PipelineConfig::default();
        config.reconstruction.schedule.it_max = 0;
        assert!(config.validate().is_err());
    }
}
