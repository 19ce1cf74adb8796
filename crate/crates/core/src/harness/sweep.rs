//! Grid sweeps: the cross product of `[sweep]` values, every (cell, seed)
//! pair run as an independent task, one aggregate row per cell.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

use super::config::ExperimentConfig;
use super::metrics::{Aggregate, MetricsReport};
use super::train::run_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub overrides: Vec<(String, String)>,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub keys: Vec<String>,
    pub rows: Vec<SweepRow>,
}

/// Parses `key=v1,v2,...` into a grid axis. Values are TOML literals, falling
/// back to strings.
pub fn parse_grid(s: &str) -> Result<(String, Vec<toml::Value>)> {
    let (key, values) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid axis `{s}` is not key=v1,v2,...")))?;
    let values: Vec<toml::Value> = values.split(',').map(|v| super::config::parse_value(v.trim())).collect();
    if key.trim().is_empty() || values.is_empty() {
        return Err(Error::Config(format!("grid axis `{s}` is empty")));
    }
    Ok((key.trim().to_string(), values))
}

pub fn sweep(base: &ExperimentConfig, exec: Exec) -> Result<SweepTable> {
    if base.sweep.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let cells = base.sweep_cells()?;
    let configs = cells
        .iter()
        .map(|o| {
            let mut c = base.with_overrides(o)?;
            c.sweep.clear();
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let tasks: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|k| base.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let reports = exec.map(&tasks, |&(k, seed)| run_seed(&configs[k], seed).map(|r| r.report));
    let reports = reports.into_iter().collect::<Result<Vec<MetricsReport>>>()?;
    let per = base.seeds.len();
    let rows = cells
        .into_iter()
        .enumerate()
        .map(|(k, overrides)| SweepRow {
            cell: k,
            overrides,
            aggregate: Aggregate::of(&reports[k * per..(k + 1) * per]).expect("at least one seed"),
        })
        .collect();
    Ok(SweepTable {
        keys: base.sweep.keys().cloned().collect(),
        rows,
    })
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = vec!["cell".to_string()];
        header.extend(self.keys.iter().cloned());
        header.extend(
            [
                "method",
                "seeds",
                "test_accuracy_mean",
                "test_accuracy_std",
                "tail_accuracy_mean",
                "tail_accuracy_std",
                "worst_group_accuracy_mean",
                "worst_group_accuracy_std",
                "test_loss_mean",
                "test_loss_std",
            ]
            .map(String::from),
        );
        writeln!(out, "{}", header.join(","))?;
        for r in &self.rows {
            let a = &r.aggregate;
            let mut fields = vec![r.cell.to_string()];
            fields.extend(r.overrides.iter().map(|(_, v)| v.replace(',', ";")));
            fields.push(a.method.to_string());
            fields.push(a.seeds.len().to_string());
            for m in [a.test_accuracy, a.tail_accuracy, a.worst_group_accuracy, a.test_loss] {
                fields.push(m.mean.to_string());
                fields.push(m.std.to_string());
            }
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }

    /// `sweep.csv` and `sweep.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut csv = Vec::new();
        self.write_csv(&mut csv)?;
        fs::write(dir.join("sweep.csv"), csv)?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(dir.join("sweep.json"), json)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Method;

    fn base() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            method: Method::Icda,
            iterations: 30,
            batch_size: 16,
            eval_every: 30,
            ..ExperimentConfig::default()
        };
        cfg.dataset.classes = 3;
        cfg.dataset.dim = 4;
        cfg.dataset.train_per_class = 40;
        cfg.dataset.test_per_class = 10;
        cfg.backbone.hidden = vec![8];
        cfg.backbone.feature_dim = 4;
        cfg.meta.meta_per_class = 4;
        cfg
    }

    #[test]
    fn grid_axis_parsing() {
        let (k, v) = parse_grid("icda.lambda0=0.1,0.25, 1").unwrap();
        assert_eq!(k, "icda.lambda0");
        assert_eq!(v, vec![toml::Value::Float(0.1), toml::Value::Float(0.25), toml::Value::Integer(1)]);
        assert!(parse_grid("novalues").is_err());
    }

    #[test]
    fn empty_grid_is_rejected() {
        assert!(sweep(&base(), Exec::Sequential).is_err());
    }

    #[test]
    fn one_cell_equals_single_run() {
        let mut cfg = base();
        cfg.sweep.insert("icda.beta".into(), vec![toml::Value::Float(0.3)]);
        let table = sweep(&cfg, Exec::default()).unwrap();
        assert_eq!(table.rows.len(), 1);
        let mut single = base();
        single.icda.beta = 0.3;
        let r = run_seed(&single, 0).unwrap().report;
        assert_eq!(table.rows[0].aggregate, Aggregate::of(&[r]).unwrap());
    }

    #[test]
    fn lambda_grid_emits_one_row_per_value() {
        let mut cfg = base();
        cfg.iterations = 10;
        cfg.eval_every = 10;
        let grid = [0.1, 0.25, 0.5, 0.75, 1.0].map(toml::Value::Float).to_vec();
        cfg.sweep.insert("icda.lambda0".into(), grid);
        let table = sweep(&cfg, Exec::default()).unwrap();
        let mut csv = Vec::new();
        table.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("cell,icda.lambda0,method,"));
        assert_eq!(sweep(&cfg, Exec::Sequential).unwrap(), table);
    }

    #[test]
    fn huge_beta_completes_through_the_clamp() {
        // Stress optimizer: a large unscheduled step lets the class covariances
        // grow until the perturbation overflows the clamp.
        let stress = |mut c: ExperimentConfig| {
            c.icda.lambda0 = 1.0;
            c.sgd.learning_rate = 0.1;
            c.sgd.schedule.clear();
            c
        };
        let mut cfg = stress(base());
        cfg.sweep.insert("icda.beta".into(), vec![toml::Value::Float(10.0)]);
        let table = sweep(&cfg, Exec::Sequential).unwrap();
        let a = &table.rows[0].aggregate;
        assert!(a.test_loss.mean.is_finite());
        assert!(a.test_accuracy.mean.is_finite());
        let mut single = stress(base());
        single.icda.beta = 10.0;
        let r = run_seed(&single, 0).unwrap().report;
        assert!(r.train_clamp_fraction > 0.0 && r.diagnostics.clamp_fraction > 0.0);
    }
}
