use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use icda_core::exec::Exec;
use icda_core::harness::config::parse_override;
use icda_core::harness::sweep::{parse_grid, sweep};
use icda_core::harness::train::{diagnose_run, run};
use icda_core::harness::verify::{verify, Suite};
use icda_core::harness::ExperimentConfig;
use icda_core::losses::Method;

#[derive(Parser)]
#[command(name = "icda", version, about = "Seeded training, verification and sweeps for ICDA and its baselines")]
struct Cli {
    /// Run every task on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the config's seed list with one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss method: ce, la, isda, risda, icda or meta_icda.
    #[arg(long)]
    method: Option<Method>,
    /// Dotted `key=value` override, e.g. `icda.lambda0=0.25`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        if let Some(m) = self.method {
            overrides.push(parse_override(&format!("method={m}"))?);
        }
        for s in &self.overrides {
            overrides.push(parse_override(s)?);
        }
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p, &overrides).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default().with_overrides(&overrides)?,
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one method over the configured seeds and write run artifacts.
    Train(ConfigArgs),
    /// Run a property suite on random instances; exit status 1 on any failure.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out/verify")]
        out: PathBuf,
    },
    /// Run the cross product of a parameter grid and write a CSV table.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Grid axis `key=v1,v2,...`. Repeatable; adds to any `[sweep]` table.
        #[arg(long, value_name = "KEY=V1,V2")]
        grid: Vec<String>,
    },
    /// Recompute the diagnostics bundle of a finished single-seed run.
    Diag {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory holding checkpoint.bin, stats.json and confusion.json
        /// (defaults to the output directory).
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn execute(cli: Cli) -> Result<bool> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let summary = run(&cfg, Some(&cfg.output_dir), exec)?;
            fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
            println!("{}", serde_json::to_string(&summary.aggregate)?);
            Ok(true)
        }
        Command::Verify { suite, seed, out } => {
            let report = verify(suite, seed, exec)?;
            fs::create_dir_all(&out)?;
            write_json(&out.join("metrics.json"), &report)?;
            for c in &report.checks {
                let tag = if c.pass() { "PASS" } else { "FAIL" };
                println!(
                    "{tag} {:<48} {:>4}/{:<4} worst {:.3e} (tol {:.1e})",
                    c.name, c.passed, c.instances, c.worst_error, c.tolerance
                );
            }
            println!("{}", if report.pass { "all checks passed" } else { "some checks FAILED" });
            Ok(report.pass)
        }
        Command::Sweep { cfg, grid } => {
            let mut base = cfg.load()?;
            for g in &grid {
                let (k, v) = parse_grid(g)?;
                base.sweep.insert(k, v);
            }
            let table = sweep(&base, exec)?;
            table.write(&base.output_dir)?;
            let mut csv = Vec::new();
            table.write_csv(&mut csv)?;
            print!("{}", String::from_utf8(csv)?);
            Ok(true)
        }
        Command::Diag { cfg, run } => {
            let cfg = cfg.load()?;
            let [seed] = cfg.seeds[..] else {
                anyhow::bail!("diag needs exactly one seed (use --seed)");
            };
            let dir = run.unwrap_or_else(|| cfg.output_dir.clone());
            let bundle = diagnose_run(&cfg, seed, &dir)?;
            fs::create_dir_all(&cfg.output_dir)?;
            write_json(&cfg.output_dir.join("diagnostics.json"), &bundle)?;
            bundle.margins.write_csv(fs::File::create(cfg.output_dir.join("margins.csv"))?)?;
            println!("{}", serde_json::to_string(&bundle.regularizer)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
