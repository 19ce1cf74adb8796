//! Experiment configuration: a sectioned TOML file plus `key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{NoiseKind, SpuriousConfig};
use crate::error::{Error, Result};
use crate::losses::{IcdaConfig, Method, RisdaConfig};
use crate::meta::MetaConfig;
use crate::model::{BackboneSpec, SgdConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Mixture,
    Spurious,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Mixture only; the spurious problem always has two classes.
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    /// Balanced draw per class before the meta split and imbalance.
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// `n_max / n_min`; 1 keeps the training set balanced.
    pub imbalance_ratio: f64,
    pub noise_kind: NoiseKind,
    pub noise_rate: f64,
    pub spurious: SpuriousConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Mixture,
            classes: 10,
            dim: 16,
            separation: 3.0,
            train_per_class: 500,
            test_per_class: 200,
            imbalance_ratio: 1.0,
            noise_kind: NoiseKind::Uniform,
            noise_rate: 0.0,
            spurious: SpuriousConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        match self.kind {
            DatasetKind::Mixture => self.classes,
            DatasetKind::Spurious => 2,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            DatasetKind::Mixture => self.dim,
            DatasetKind::Spurious => self.spurious.d_signal + self.spurious.d_spur,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden: vec![32],
            feature_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub iterations: u64,
    pub batch_size: usize,
    /// Evaluate on the test split every this many iterations (and at the end).
    pub eval_every: u64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Replaces the per-sample ICDA strength with a constant.
    pub fixed_alpha: Option<f64>,
    /// EMA decay of the confusion rates used by RISDA.
    pub confusion_decay: f64,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub sgd: SgdConfig,
    pub icda: IcdaConfig,
    pub risda: RisdaConfig,
    pub meta: MetaConfig,
    /// Sweep grid: override key to candidate values.
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Ce,
            iterations: 2000,
            batch_size: 64,
            eval_every: 500,
            seeds: vec![0],
            output_dir: "out".into(),
            fixed_alpha: None,
            confusion_decay: 0.1,
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            sgd: SgdConfig::default(),
            icda: IcdaConfig::default(),
            risda: RisdaConfig::default(),
            meta: MetaConfig::default(),
            sweep: BTreeMap::new(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses a bare TOML value, falling back to a string.
pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted key in a table, creating intermediate sections.
pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        for (k, v) in overrides {
            set_key(&mut table, k, parse_value(v))?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, overrides)
    }

    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        Self::from_toml(&self.to_toml()?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            input_dim: self.dataset.input_dim(),
            hidden: self.backbone.hidden.clone(),
            feature_dim: self.backbone.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        if self.eval_every == 0 {
            return Err(config_err("eval_every must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("at least one seed is required"));
        }
        if self.backbone.feature_dim == 0 || self.backbone.hidden.contains(&0) {
            return Err(config_err("backbone widths must be positive"));
        }
        if let Some(a) = self.fixed_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(config_err("fixed_alpha must lie in [0, 1]"));
            }
            if !matches!(self.method, Method::Icda) {
                return Err(config_err("fixed_alpha applies to method icda only"));
            }
        }
        if !(self.confusion_decay > 0.0 && self.confusion_decay <= 1.0) {
            return Err(config_err("confusion_decay must lie in (0, 1]"));
        }
        self.sgd.validate()?;
        self.icda.validate()?;
        self.meta.validate()?;
        let d = &self.dataset;
        if !(d.imbalance_ratio >= 1.0) {
            return Err(config_err("dataset.imbalance_ratio must be >= 1"));
        }
        if !(0.0..1.0).contains(&d.noise_rate) {
            return Err(config_err("dataset.noise_rate must lie in [0, 1)"));
        }
        match d.kind {
            DatasetKind::Mixture => {
                if d.classes < 2 || d.dim < 2 || !(d.separation > 0.0) {
                    return Err(config_err("mixture needs classes >= 2, dim >= 2, separation > 0"));
                }
                if d.test_per_class == 0 {
                    return Err(config_err("dataset.test_per_class must be positive"));
                }
                if d.train_per_class <= self.meta.meta_per_class {
                    return Err(config_err("dataset.train_per_class must exceed meta.meta_per_class"));
                }
            }
            DatasetKind::Spurious => {
                if d.imbalance_ratio != 1.0 || d.noise_rate != 0.0 {
                    return Err(config_err(
                        "spurious dataset takes label noise from spurious.label_flip; imbalance and noise_rate must stay at their defaults",
                    ));
                }
                if d.spurious.n_train == 0 || d.spurious.n_test == 0 {
                    return Err(config_err("spurious splits must be non-empty"));
                }
            }
        }
        Ok(())
    }

    /// Cross product of the sweep grid as override lists, in key order.
    pub fn sweep_cells(&self) -> Result<Vec<Vec<(String, String)>>> {
        let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.sweep {
            if values.is_empty() {
                return Err(config_err(format!("sweep key `{key}` has no values")));
            }
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for cell in &cells {
                for v in values {
                    let mut c = cell.clone();
                    c.push((key.clone(), v.to_string()));
                    next.push(c);
                }
            }
            cells = next;
        }
        Ok(cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_sections() {
        let text = "method = \"icda\"\niterations = 10\n[icda]\nlambda0 = 0.25\n";
        let o = vec![
            ("icda.beta".to_string(), "0.3".to_string()),
            ("dataset.kind".to_string(), "spurious".to_string()),
            ("backbone.hidden".to_string(), "[8, 8]".to_string()),
        ];
        let cfg = ExperimentConfig::from_toml(text, &o).unwrap();
        assert_eq!(cfg.method, Method::Icda);
        assert_eq!(cfg.icda.lambda0, 0.25);
        assert_eq!(cfg.icda.beta, 0.3);
        assert_eq!(cfg.dataset.kind, DatasetKind::Spurious);
        assert_eq!(cfg.backbone.hidden, vec![8, 8]);
        assert_eq!(cfg.dataset.input_dim(), 8);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::from_toml("methd = \"ce\"", &[]).is_err());
        assert!(ExperimentConfig::from_toml("method = \"mixup\"", &[]).is_err());
        assert!(ExperimentConfig::from_toml("batch_size = 0", &[]).is_err());
        let combo = "[dataset]\nkind = \"spurious\"\nimbalance_ratio = 10.0\n";
        let err = ExperimentConfig::from_toml(combo, &[]).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("spurious")));
        assert!(ExperimentConfig::from_toml("fixed_alpha = 0.5", &[]).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn sweep_cells_cross_product() {
        let text = "[sweep]\n\"icda.lambda0\" = [0.1, 0.5]\n\"icda.beta\" = [0.0, 0.1, 1.0]\n";
        let cfg = ExperimentConfig::from_toml(text, &[]).unwrap();
        let cells = cfg.sweep_cells().unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0], vec![("icda.beta".into(), "0.0".into()), ("icda.lambda0".into(), "0.1".into())]);
        let applied = cfg.with_overrides(&cells[5]).unwrap();
        assert_eq!((applied.icda.beta, applied.icda.lambda0), (1.0, 0.5));
    }
}
