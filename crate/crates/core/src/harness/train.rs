//! The training loop shared by every method, run outputs, and multi-seed runs.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::diagnostics::{
    geometry, halving_eps, margin_distribution, method_loss, method_taylor, regularizer, RegularizerInputs,
};
use crate::error::{contract, Error, Result};
use crate::exec::Exec;
use crate::losses::{ce_full, icda_loss_at, isda_loss, la_full, lambda_at, risda_loss, LossOutput, Method};
use crate::meta::{meta_iteration, MetaInputs, MetaState};
use crate::model::{sgd_step, Checkpoint, Model, SgdState};
use crate::rng::Rng;
use crate::stats::{priors_from_counts, ClassStats, ConfusionRates};
use crate::strength::{alpha_matrix, direct_strengths, write_characteristics_csv, StrengthMatrix};

use super::config::ExperimentConfig;
use super::data::{prepare, streams, Batches, PreparedData};
use super::metrics::{evaluate, predictions, tail_classes, Aggregate, DiagnosticsBundle, HistoryRecord, MetricsReport, TAIL_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    pub loss: f64,
    pub lambda: f64,
    pub lr: f64,
    pub mean_alpha: Option<f64>,
    pub meta_loss: Option<f64>,
    pub clamped: usize,
}

pub struct RunOutput {
    pub report: MetricsReport,
    pub trace: Vec<TraceRow>,
    pub model: Model,
    pub stats: ClassStats,
    pub confusion: ConfusionRates,
    pub meta: Option<MetaState>,
    /// Characteristics and α at each evaluation point (meta runs only).
    pub characteristics_csv: Vec<u8>,
}

/// Margin-histogram resolution over [−1, 1].
const MARGIN_BINS: usize = 20;

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    let data = prepare(&cfg.dataset, cfg.meta.meta_per_class, seed)?;
    run_with_data(cfg, seed, &data)
}

/// Trains on prepared splits. Every random choice comes from a stream of
/// `seed`, so the run is a pure function of `(cfg, seed, data)`.
pub fn run_with_data(cfg: &ExperimentConfig, seed: u64, data: &PreparedData) -> Result<RunOutput> {
    cfg.validate()?;
    let train = &data.train;
    let c = train.num_classes;
    let counts = train.class_counts();
    let priors = training_priors(train)?;
    let root = Rng::new(seed);
    let mut model = Model::new(&cfg.backbone_spec(), c, &mut root.stream(streams::MODEL));
    let mut sgd = SgdState::default();
    let mut stats = ClassStats::new(c, cfg.backbone.feature_dim, cfg.icda.covariance);
    let mut confusion = ConfusionRates::new(c);
    let mut batches = Batches::new(train.len(), cfg.batch_size, root.stream(streams::BATCHES));
    let (mut meta, mut meta_batches) = if cfg.method == Method::MetaIcda {
        if data.meta.is_empty() {
            return Err(contract("meta_icda needs a non-empty meta set"));
        }
        let state = MetaState::new(cfg.meta.clone(), c, &mut root.stream(streams::META_NET))?;
        let b = Batches::new(data.meta.len(), cfg.meta.meta_batch, root.stream(streams::META_BATCHES));
        (Some(state), Some(b))
    } else {
        (None, None)
    };
    let tail = tail_classes(&counts, TAIL_CLASSES);
    let noisy_tau = cfg.icda.noise_mode.then_some(cfg.icda.tau);
    let total = cfg.iterations;

    let mut trace = Vec::with_capacity(total as usize);
    let mut history = Vec::new();
    let mut chars_csv = Vec::new();
    let (mut window_loss, mut window_n) = (0.0, 0u64);
    let (mut clamped, mut entries) = (0usize, 0usize);

    for t in 0..total {
        let idx = batches.next_batch().to_vec();
        let batch = train.subset(&idx);
        let labels = &batch.labels;
        let lambda = lambda_at(t + 1, total, cfg.icda.lambda0);
        let eval_now = (t + 1) % cfg.eval_every == 0 || t + 1 == total;

        let (out, logits, mean_alpha, meta_loss): (LossOutput, _, _, _) = match (&mut meta, &mut meta_batches) {
            (Some(state), Some(mb)) => {
                let meta_batch = data.meta.subset(mb.next_batch());
                let inputs = MetaInputs {
                    x: &batch.features,
                    labels,
                    meta_x: &meta_batch.features,
                    meta_labels: &meta_batch.labels,
                    priors: &priors,
                    lambda,
                    beta: cfg.icda.beta,
                };
                let rec = meta_iteration(state, &mut model, &mut sgd, &cfg.sgd, &mut stats, &inputs, t)?;
                if eval_now {
                    write_characteristics_csv(&mut chars_csv, t + 1, labels, &rec.characteristics, &rec.alpha, history.is_empty())?;
                }
                (rec.out, rec.logits, Some(rec.mean_alpha), Some(rec.meta_loss))
            }
            _ => {
                let fwd = model.forward(&batch.features);
                stats.update(&fwd.features, labels)?;
                let h = &fwd.features;
                let (out, mean_alpha) = match cfg.method {
                    Method::Ce => (ce_full(h, labels, &model.head), None),
                    Method::La => (la_full(h, labels, &model.head, &priors)?, None),
                    Method::Isda => (isda_loss(h, labels, &model.head, &stats, lambda)?, None),
                    Method::Risda => (risda_loss(h, labels, &model.head, &stats, &confusion, &cfg.risda)?, None),
                    Method::Icda => {
                        let strengths = match cfg.fixed_alpha {
                            Some(a) => StrengthMatrix::from_parts(
                                alpha_matrix(h, &model.head, labels),
                                vec![a; labels.len()].into(),
                            ),
                            None => direct_strengths(h, &model.head, labels, noisy_tau),
                        };
                        let mean = strengths.alpha_scalar.iter().sum::<f64>() / labels.len() as f64;
                        let out = icda_loss_at(h, labels, &model.head, &stats, &strengths, &priors, lambda, cfg.icda.beta)?;
                        (out, Some(mean))
                    }
                    Method::MetaIcda => unreachable!("meta state exists for meta_icda"),
                };
                let grad = model.grad_from_parts(&fwd.cache, out.head.clone(), &out.d_features)?;
                sgd_step(&mut model, &grad, &mut sgd, &cfg.sgd, t);
                (out, fwd.logits, mean_alpha, None)
            }
        };
        if !out.loss.is_finite() {
            return Err(Error::Diverged { iteration: t + 1 });
        }
        confusion.update(&predictions(&logits), labels, cfg.confusion_decay)?;
        clamped += out.clamp_count();
        entries += labels.len() * (c - 1);
        window_loss += out.loss;
        window_n += 1;
        trace.push(TraceRow {
            iteration: t + 1,
            loss: out.loss,
            lambda,
            lr: cfg.sgd.lr_at(t),
            mean_alpha,
            meta_loss,
            clamped: out.clamp_count(),
        });
        if eval_now {
            let test = evaluate(&model, &data.test, &tail);
            history.push(HistoryRecord {
                iteration: t + 1,
                train_loss: window_loss / window_n as f64,
                test_loss: test.loss,
                test_accuracy: test.accuracy,
            });
            window_loss = 0.0;
            window_n = 0;
        }
    }

    let diagnostics = diagnose(cfg, &model, &stats, &confusion, &priors, &data.test)?;
    let report = MetricsReport {
        method: cfg.method,
        seed,
        iterations: total,
        tail_classes: tail.clone(),
        train_class_counts: counts,
        history,
        train_clamp_fraction: if entries == 0 { 0.0 } else { clamped as f64 / entries as f64 },
        train: evaluate(&model, train, &tail),
        test: evaluate(&model, &data.test, &tail),
        diagnostics,
    };
    Ok(RunOutput {
        report,
        trace,
        model,
        stats,
        confusion,
        meta,
        characteristics_csv: chars_csv,
    })
}

/// Regularizer, Taylor check, geometry, margins and clamp share on `eval`
/// with λ = λ⁰. Strengths are the direct ones for every method.
pub fn diagnose(
    cfg: &ExperimentConfig,
    model: &Model,
    stats: &ClassStats,
    confusion: &ConfusionRates,
    priors: &[f64],
    eval: &Dataset,
) -> Result<DiagnosticsBundle> {
    let fwd = model.forward(&eval.features);
    let labels = &eval.labels;
    let strengths = direct_strengths(&fwd.features, &model.head, labels, cfg.icda.noise_mode.then_some(cfg.icda.tau));
    let inputs = RegularizerInputs {
        features: &fwd.features,
        labels,
        head: &model.head,
        stats,
        priors,
        strengths: Some(&strengths),
        confusion: Some(confusion),
        lambda: cfg.icda.lambda0,
        beta: cfg.icda.beta,
        risda: cfg.risda,
    };
    let entries = labels.len() * (model.head.classes() - 1);
    // Before any class has been seen the augmented losses are undefined; nothing is clamped.
    let defined = matches!(cfg.method, Method::Ce | Method::La) || stats.counts.iter().all(|&n| n > 0);
    let clamped = if defined { method_loss(cfg.method, &inputs)?.clamp_count() } else { 0 };
    Ok(DiagnosticsBundle {
        regularizer: regularizer(cfg.method, &inputs)?,
        taylor: method_taylor(cfg.method, &inputs, &halving_eps())?,
        geometry: geometry(&model.head, stats),
        margins: margin_distribution(&fwd.logits, labels, MARGIN_BINS),
        clamp_fraction: if entries == 0 { 0.0 } else { clamped as f64 / entries as f64 },
    })
}

fn training_priors(train: &Dataset) -> Result<Vec<f64>> {
    let counts = train.class_counts();
    if counts.contains(&0) {
        return Err(Error::Config("every class needs at least one training sample".into()));
    }
    Ok(priors_from_counts(&counts.iter().map(|&n| n as f64).collect::<Vec<_>>())?.into_vec())
}

/// Recomputes the diagnostics bundle of a finished run from the artifacts in
/// `dir` (`checkpoint.bin`, `stats.json`, `confusion.json`). The data is
/// regenerated from `(cfg, seed)`.
pub fn diagnose_run(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<DiagnosticsBundle> {
    cfg.validate()?;
    let model = Checkpoint::read(BufReader::new(fs::File::open(dir.join("checkpoint.bin"))?))?.to_model()?;
    let stats: ClassStats = serde_json::from_reader(BufReader::new(fs::File::open(dir.join("stats.json"))?))?;
    let confusion: ConfusionRates = serde_json::from_reader(BufReader::new(fs::File::open(dir.join("confusion.json"))?))?;
    let data = prepare(&cfg.dataset, cfg.meta.meta_per_class, seed)?;
    if model.classes() != data.train.num_classes || model.backbone.input_dim() != data.train.features.cols() {
        return Err(Error::Config("checkpoint does not match the configured dataset".into()));
    }
    let priors = training_priors(&data.train)?;
    diagnose(cfg, &model, &stats, &confusion, &priors, &data.test)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_trace<W: Write>(mut out: W, trace: &[TraceRow]) -> Result<()> {
    writeln!(out, "iteration,loss,lambda,lr,mean_alpha,meta_loss,clamped")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration,
            r.loss,
            r.lambda,
            r.lr,
            opt(r.mean_alpha),
            opt(r.meta_loss),
            r.clamped
        )?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `metrics.json`, `trace.csv`, `diagnostics.json`, `margins.csv`,
/// `checkpoint.bin`, `stats.json`, `confusion.json`, and for meta runs `strength_net.json` and
/// `characteristics.csv`.
pub fn write_run(dir: &Path, run: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("metrics.json"), &run.report)?;
    write_json(&dir.join("diagnostics.json"), &run.report.diagnostics)?;
    write_trace(BufWriter::new(fs::File::create(dir.join("trace.csv"))?), &run.trace)?;
    run.report
        .diagnostics
        .margins
        .write_csv(BufWriter::new(fs::File::create(dir.join("margins.csv"))?))?;
    Checkpoint::from_model(&run.model).write(BufWriter::new(fs::File::create(dir.join("checkpoint.bin"))?))?;
    write_json(&dir.join("stats.json"), &run.stats)?;
    write_json(&dir.join("confusion.json"), &run.confusion)?;
    if let Some(state) = &run.meta {
        write_json(&dir.join("strength_net.json"), &state.net)?;
        fs::write(dir.join("characteristics.csv"), &run.characteristics_csv)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub reports: Vec<MetricsReport>,
    pub aggregate: Aggregate,
}

/// Runs every seed (in parallel under `exec`). With one seed the artifacts go
/// straight into `out`; otherwise into `out/seed-N/` plus `out/summary.json`.
pub fn run(cfg: &ExperimentConfig, out: Option<&Path>, exec: Exec) -> Result<RunSummary> {
    cfg.validate()?;
    let single = cfg.seeds.len() == 1;
    let results: Vec<Result<MetricsReport>> = exec.map(&cfg.seeds, |&seed| {
        let run = run_seed(cfg, seed)?;
        if let Some(dir) = out {
            let d = if single { dir.to_path_buf() } else { dir.join(format!("seed-{seed}")) };
            write_run(&d, &run)?;
        }
        Ok(run.report)
    });
    let reports = results.into_iter().collect::<Result<Vec<_>>>()?;
    let aggregate = Aggregate::of(&reports).expect("at least one seed");
    let summary = RunSummary { reports, aggregate };
    if let (Some(dir), false) = (out, single) {
        write_json(&dir.join("summary.json"), &summary.aggregate)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(method: Method) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            method,
            iterations: 60,
            batch_size: 32,
            eval_every: 20,
            ..ExperimentConfig::default()
        };
        cfg.dataset.classes = 4;
        cfg.dataset.dim = 6;
        cfg.dataset.train_per_class = 60;
        cfg.dataset.test_per_class = 30;
        cfg.dataset.imbalance_ratio = 5.0;
        cfg.backbone.hidden = vec![12];
        cfg.backbone.feature_dim = 8;
        cfg.meta.meta_batch = 8;
        cfg.meta.meta_per_class = 5;
        cfg
    }

    #[test]
    fn every_method_runs_with_a_stable_schema() {
        let mut keys = None;
        for m in Method::ALL {
            let out = run_seed(&small(m), 1).unwrap();
            let r = &out.report;
            assert_eq!(r.history.len(), 3);
            assert_eq!(out.trace.len(), 60);
            assert!(r.test.worst_group_accuracy <= r.test.accuracy);
            assert!((0.0..=1.0).contains(&r.test.accuracy));
            assert!(r.test.loss.is_finite(), "{m}");
            let v = serde_json::to_value(r).unwrap();
            let k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
            if let Some(prev) = &keys {
                assert_eq!(prev, &k);
            }
            keys = Some(k);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        for m in [Method::Risda, Method::MetaIcda] {
            let a = run_seed(&small(m), 4).unwrap();
            let b = run_seed(&small(m), 4).unwrap();
            assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
            assert_eq!(a.model, b.model);
        }
    }

    #[test]
    fn zero_iterations_keep_initial_model() {
        let mut cfg = small(Method::MetaIcda);
        cfg.iterations = 0;
        let out = run_seed(&cfg, 2).unwrap();
        let init = Model::new(&cfg.backbone_spec(), 4, &mut Rng::new(2).stream(streams::MODEL));
        assert_eq!(out.model, init);
        assert!(out.report.history.is_empty());
    }

    #[test]
    fn icda_without_lambda_beta_equals_la() {
        let mut icda = small(Method::Icda);
        icda.icda.lambda0 = 0.0;
        icda.icda.beta = 0.0;
        let la = small(Method::La);
        let a = run_seed(&icda, 6).unwrap();
        let b = run_seed(&la, 6).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.report.test, b.report.test);
    }

    #[test]
    fn frozen_meta_equals_constant_half_icda() {
        let mut meta = small(Method::MetaIcda);
        meta.meta.meta_lr = 0.0;
        let mut icda = small(Method::Icda);
        icda.fixed_alpha = Some(0.5);
        let a = run_seed(&meta, 8).unwrap();
        let b = run_seed(&icda, 8).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.stats, b.stats);
        let la: Vec<f64> = a.trace.iter().map(|r| r.loss).collect();
        let lb: Vec<f64> = b.trace.iter().map(|r| r.loss).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(Method::MetaIcda);
        cfg.seeds = vec![1, 2];
        let s = run(&cfg, Some(dir.path()), Exec::default()).unwrap();
        assert_eq!(s.reports.len(), 2);
        for f in ["metrics.json", "trace.csv", "diagnostics.json", "margins.csv", "checkpoint.bin", "stats.json", "characteristics.csv"] {
            assert!(dir.path().join("seed-1").join(f).exists(), "{f}");
        }
        assert!(dir.path().join("summary.json").exists());
        let ck = Checkpoint::read(fs::File::open(dir.path().join("seed-2/checkpoint.bin")).unwrap()).unwrap();
        assert_eq!(ck.to_model().unwrap().head.classes(), 4);
    }

    #[test]
    fn diagnostics_recompute_from_artifacts() {
        for m in [Method::Risda, Method::MetaIcda] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = small(m);
            let out = run_seed(&cfg, 5).unwrap();
            write_run(dir.path(), &out).unwrap();
            let again = diagnose_run(&cfg, 5, dir.path()).unwrap();
            assert_eq!(again, out.report.diagnostics);
            let mut other = small(m);
            other.dataset.classes = 3;
            assert!(diagnose_run(&other, 5, dir.path()).is_err());
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let mut cfg = small(Method::Icda);
        cfg.seeds = vec![3, 4, 5];
        let a = run(&cfg, None, Exec::Sequential).unwrap();
        let b = run(&cfg, None, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
