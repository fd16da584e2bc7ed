//! Run configuration: one TOML document with a section per module, plus
//! dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::SamplerConfig;
use crate::dit::DitConfig;
use crate::error::{Error, Result};
use crate::eval::BenchConfig;
use crate::rae::RaeConfig;
use crate::scenegen::SceneConfig;
use crate::trainer::{Stage, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenes: usize,
    pub views: usize,
    pub motion_min_deg: f64,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 64,
            views: 16,
            motion_min_deg: 30.0,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub rae: RaeConfig,
    pub dit: DitConfig,
    pub train_rae: TrainConfig,
    pub train_dit: TrainConfig,
    pub eval: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            sampler: SamplerConfig::default(),
            rae: RaeConfig::default(),
            dit: DitConfig::default(),
            train_rae: TrainConfig::default(),
            train_dit: TrainConfig::dit(Stage::DitStage2),
            eval: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse TOML text, apply overrides in order, then validate.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is None.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        if self.data.views == 0 {
            return Err(Error::config("data.views must be positive"));
        }
        self.sampler.budget.validate()?;
        self.rae.validate()?;
        self.dit.validate()?;
        self.train_rae.validate()?;
        self.train_dit.validate()?;
        if self.train_dit.stage == Stage::DitStage1 && self.dit.classes < self.data.scene.classes {
            return Err(Error::config(format!(
                "dit.classes = {} cannot label {} scene categories",
                self.dit.classes, self.data.scene.classes
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

/// Set `a.b.c = value` in a TOML table. The value is read as a TOML literal
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {kv:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(format!("bad override key {key:?}")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.dit.cfg_scale, 2.0);
        assert_eq!(c.train_rae.schedule.peak_lr, 2e-4);
    }

    #[test]
    fn overrides_apply_in_order() {
        let o = vec![
            "dit.cfg_scale=3.5".to_string(),
            "rae.pmap_layers = [0, 2]".into(),
            "train_dit.stage = dit_stage1".into(),
            "dit.cfg_scale=1.5".into(),
        ];
        let c = RunConfig::parse("seed = 4\n[dit]\ndepth = 2\n", &o).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.dit.depth, 2);
        assert_eq!(c.dit.cfg_scale, 1.5);
        assert_eq!(c.rae.pmap_layers, vec![0, 2]);
        assert_eq!(c.train_dit.stage, Stage::DitStage1);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for o in ["nokey", "dit.nope=1", "=3", "seed.x=1"] {
            assert!(matches!(RunConfig::parse("", &[o.to_string()]), Err(Error::Config(_))), "{o}");
        }
        assert!(matches!(RunConfig::parse("[dit]\nwidth = 30\nheads = 4\n", &[]), Err(Error::Config(_))));
    }
}
