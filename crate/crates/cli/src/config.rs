use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tcmap_core::calibrate::{self, ThresholdMode};
use tcmap_core::composite::{self, Reducer, SeasonWindows};
use tcmap_core::{analytics, assess, sampler};

use crate::errors::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seed for every random draw unless `--seed` overrides it.
    pub seed: u64,
    pub composite: CompositeConfig,
    pub sample: SampleConfig,
    pub split: SplitConfig,
    pub area: AreaConfig,
    pub calibrate: CalibrateConfig,
    pub analytics: AnalyticsConfig,
    pub model: ModelSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositeConfig {
    pub max_cloud_fraction: f64,
    pub optical_reducer: Reducer,
    pub radar_reducer: Reducer,
    pub windows: SeasonWindows,
    pub mad_floor: f64,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        CompositeConfig {
            max_cloud_fraction: composite::DEFAULT_MAX_CLOUD_FRACTION,
            optical_reducer: Reducer::Median,
            radar_reducer: Reducer::Mean,
            windows: SeasonWindows::quarters(),
            mad_floor: composite::DEFAULT_MAD_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub buffer_radius_m: f64,
    pub tree_crop: u64,
    pub non_tree_crop: u64,
    pub buffer: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { buffer_radius_m: 300.0, tree_crop: 1549, non_tree_crop: 1732, buffer: 580 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub cell_km: f64,
    pub ratios: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        let (a, b, c) = sampler::DEFAULT_SPLIT_RATIOS;
        SplitConfig { cell_km: sampler::DEFAULT_CELL_KM, ratios: [a, b, c] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AreaConfig {
    pub threshold_weight: f64,
}

impl Default for AreaConfig {
    fn default() -> Self {
        AreaConfig { threshold_weight: assess::DEFAULT_THRESHOLD_WEIGHT }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub bins: usize,
    pub threshold: ThresholdMode,
    pub class: String,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig {
            bins: calibrate::DEFAULT_ECE_BINS,
            threshold: ThresholdMode::Argmax,
            class: tcmap_core::labels::TREE_CROP.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticsConfig {
    pub band_width_m: f64,
    pub max_dist_m: f64,
    pub hex_side_m: f64,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        AnalyticsConfig { band_width_m: 1_000.0, max_dist_m: 10_000.0, hex_side_m: analytics::DEFAULT_HEX_SIDE_M }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Model config JSON; the built-in default when absent. Relative paths
    /// resolve against the pipeline config's directory.
    pub config: Option<PathBuf>,
    /// Parameter directory; seeded initialization when absent.
    pub params: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            composite: CompositeConfig::default(),
            sample: SampleConfig::default(),
            split: SplitConfig::default(),
            area: AreaConfig::default(),
            calibrate: CalibrateConfig::default(),
            analytics: AnalyticsConfig::default(),
            model: ModelSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads and validates a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<PipelineConfig> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut config.model.config, &mut config.model.params].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| -> Result<()> { Err(UsageError(msg).into()) };
        if !(0.0..=1.0).contains(&self.composite.max_cloud_fraction) {
            return bad(format!("composite.max_cloud_fraction must lie in [0, 1], got {}", self.composite.max_cloud_fraction));
        }
        if !(self.composite.mad_floor > 0.0) {
            return bad("composite.mad_floor must be > 0".into());
        }
        if !(self.sample.buffer_radius_m >= 0.0) {
            return bad("sample.buffer_radius_m must be >= 0".into());
        }
        if !(self.split.cell_km > 0.0) {
            return bad("split.cell_km must be > 0".into());
        }
        if self.split.ratios.iter().any(|r| !(*r >= 0.0)) || self.split.ratios.iter().sum::<f64>() <= 0.0 {
            return bad("split.ratios must be non-negative with a positive sum".into());
        }
        if !(0.0..1.0).contains(&self.area.threshold_weight) {
            return bad("area.threshold_weight must lie in [0, 1)".into());
        }
        if self.calibrate.bins == 0 {
            return bad("calibrate.bins must be >= 1".into());
        }
        let a = &self.analytics;
        if !(a.band_width_m > 0.0) || !(a.max_dist_m >= a.band_width_m) || !(a.hex_side_m > 0.0) {
            return bad("analytics needs band_width_m > 0, max_dist_m >= band_width_m and hex_side_m > 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_match_published_settings() {
        let c = PipelineConfig::default();
        assert_eq!(c.composite.max_cloud_fraction, 0.40);
        assert_eq!(c.calibrate.bins, 12);
        assert_eq!(c.analytics.hex_side_m, 80_000.0);
        assert_eq!(c.split.ratios, [8.0, 1.0, 1.0]);
        assert_eq!(c.split.cell_km, 100.0);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"seeed": 1}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"split": {"cells": 3}}"#).is_err());
        let c: PipelineConfig = serde_json::from_str(r#"{"split": {"cell_km": 3}}"#).unwrap();
        assert_eq!(c.split.ratios, [8.0, 1.0, 1.0]);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = PipelineConfig::default();
        c.composite.max_cloud_fraction = 1.5;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.calibrate.bins = 0;
        assert!(c.validate().is_err());
    }
}
