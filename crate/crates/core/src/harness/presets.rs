//! Shipped scenario configs, embedded at build time.

use crate::harness::config::{ConfigError, RunConfig};

pub struct Preset {
    pub name: &'static str,
    pub source: &'static str,
}

macro_rules! preset {
    ($name:literal) => {
        Preset { name: $name, source: include_str!(concat!("../../presets/", $name, ".toml")) }
    };
}

pub const PRESETS: [Preset; 9] = [
    preset!("fig3"),
    preset!("fig4"),
    preset!("fig5"),
    preset!("fig6"),
    preset!("fig7"),
    preset!("fig8"),
    preset!("fig9"),
    preset!("fig10"),
    preset!("fig11"),
];

/// Catalog entry for display.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetInfo {
    pub name: &'static str,
    pub description: String,
    pub runs: Vec<String>,
}

pub fn list_presets() -> Result<Vec<PresetInfo>, ConfigError> {
    PRESETS
        .iter()
        .map(|p| {
            let cfg = RunConfig::from_toml_str(p.source)?;
            let runs = cfg.runs()?.into_iter().map(|r| r.label).collect();
            Ok(PresetInfo { name: p.name, description: cfg.description, runs })
        })
        .collect()
}

pub fn load_preset(name: &str) -> Result<RunConfig, ConfigError> {
    let preset = PRESETS
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| ConfigError::UnknownPreset { name: name.to_string() })?;
    RunConfig::from_toml_str(preset.source)
}
