//! Property suites over freshly generated random instances.
//!
//! Each suite returns a list of [`Check`]s with instance counts and the worst
//! observed error, so reports are comparable across runs and seeds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{halving_eps, mapped_variance, method_taylor, regularizer, RegularizerInputs};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{
    ce_full, icda_loss_at, isda_loss, la_full, la_loss, risda_loss, LossOutput, Method, RisdaConfig,
};
use crate::meta::{meta_gradients, meta_loss, virtual_step, InnerProblem, MetaBatch};
use crate::model::LinearHead;
use crate::numerics::{central_difference, dot, max_abs_diff, norm, relative_error, Matrix, Vector};
use crate::oracle::BoundInstance;
use crate::rng::Rng;
use crate::stats::{batch_moments, ClassStats, ConfusionRates, CovarianceMode};
use crate::strength::{alpha_matrix, direct_strengths, StrengthMatrix, StrengthNet, NUM_CHARACTERISTICS};

use super::config::ExperimentConfig;
use super::data::prepare;
use super::train::run_with_data;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Gradients,
    Bound,
    Reductions,
    Stats,
    Taylor,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [Suite::Gradients, Suite::Bound, Suite::Reductions, Suite::Stats, Suite::Taylor];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Bound => "bound",
            Suite::Reductions => "reductions",
            Suite::Stats => "stats",
            Suite::Taylor => "taylor",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub instances: usize,
    pub passed: usize,
    pub failed: usize,
    pub worst_error: f64,
    pub tolerance: f64,
}

impl Check {
    /// Passes instances whose error is at most `tolerance`. NaN errors fail.
    pub fn from_errors(name: &str, errors: &[f64], tolerance: f64) -> Self {
        Check::from_outcomes(name, errors.iter().map(|&e| (e, e <= tolerance)), tolerance)
    }

    pub fn from_outcomes(name: &str, outcomes: impl IntoIterator<Item = (f64, bool)>, tolerance: f64) -> Self {
        let (mut instances, mut passed, mut worst) = (0, 0, 0.0f64);
        for (e, ok) in outcomes {
            instances += 1;
            passed += usize::from(ok);
            worst = if e.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(e) };
        }
        Check {
            name: name.to_string(),
            instances,
            passed,
            failed: instances - passed,
            worst_error: worst,
            tolerance,
        }
    }

    pub fn pass(&self) -> bool {
        self.failed == 0 && self.instances > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub pass: bool,
}

pub const GRADIENT_INSTANCES: usize = 100;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const META_GRADIENT_TOL: f64 = 1e-4;
pub const BOUND_INSTANCES: usize = 25;
pub const BOUND_LAMBDAS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];
pub const BOUND_SAMPLES: usize = 100_000;
pub const REDUCTION_INSTANCES: usize = 100;
pub const REDUCTION_TOL: f64 = 1e-12;
pub const TRAJECTORY_ITERATIONS: u64 = 50;
pub const STATS_TRIALS: usize = 100;
pub const STATS_TOL: f64 = 1e-10;
pub const MAPPED_VARIANCE_TOL: f64 = 1e-8;
pub const TAYLOR_INSTANCES: usize = 20;
pub const TAYLOR_METHODS: [Method; 4] = [Method::La, Method::Isda, Method::Risda, Method::Icda];
const MODES: [CovarianceMode; 2] = [CovarianceMode::Full, CovarianceMode::Diagonal];

pub fn verify(suite: Suite, seed: u64, exec: Exec) -> Result<VerifyReport> {
    let suites: Vec<Suite> = if suite == Suite::All { Suite::EACH.to_vec() } else { vec![suite] };
    let mut checks = Vec::new();
    for s in suites {
        checks.extend(match s {
            Suite::Gradients => gradient_suite(seed, exec)?,
            Suite::Bound => bound_suite(seed, exec)?,
            Suite::Reductions => reduction_suite(seed, exec)?,
            Suite::Stats => stats_suite(seed, exec)?,
            Suite::Taylor => taylor_suite(seed, exec)?,
            Suite::All => unreachable!(),
        });
    }
    let pass = checks.iter().all(Check::pass);
    Ok(VerifyReport { suite, seed, checks, pass })
}

/// Derives instance `k` of a named family from the suite seed.
fn instance_seed(seed: u64, family: u64, k: usize) -> u64 {
    Rng::new(seed).stream(family).stream(k as u64).seed()
}

/// A loss-check instance with every input any method needs.
#[derive(Clone, Debug)]
pub struct LossCase {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub head: LinearHead,
    pub stats: ClassStats,
    pub confusion: ConfusionRates,
    pub priors: Vec<f64>,
    pub strengths: StrengthMatrix,
}

impl LossCase {
    /// Fixed shape `(classes, dim, n)`; features, head, statistics, priors,
    /// confusion rates and per-sample strengths all random.
    pub fn random(seed: u64, classes: usize, dim: usize, n: usize, mode: CovarianceMode) -> Self {
        let mut rng = Rng::new(seed);
        let features = Matrix::from_fn(n, dim, |_, _| rng.normal());
        let labels: Vec<usize> = (0..n).map(|i| if i < classes { i } else { rng.below(classes) }).collect();
        let head = LinearHead {
            w: Matrix::from_fn(classes, dim, |_, _| rng.normal() * 0.5),
            b: (0..classes).map(|_| rng.normal() * 0.1).collect::<Vec<_>>().into(),
        };
        let cl: Vec<usize> = (0..10 * classes).map(|i| i % classes).collect();
        let cloud = Matrix::from_fn(cl.len(), dim, |i, d| rng.normal() + 0.3 * (cl[i] + d) as f64);
        let mut stats = ClassStats::new(classes, dim, mode);
        stats.update(&cloud, &cl).expect("cloud covers every class");
        let mut confusion = ConfusionRates::new(classes);
        let preds: Vec<usize> = cl.iter().map(|_| rng.below(classes)).collect();
        confusion.update(&preds, &cl, 1.0).expect("matching lengths");
        let raw: Vec<f64> = (0..classes).map(|_| rng.uniform_in(1.0, 10.0)).collect();
        let s: f64 = raw.iter().sum();
        let scalar: Vector = (0..n).map(|_| rng.uniform()).collect::<Vec<_>>().into();
        let strengths = StrengthMatrix::from_parts(alpha_matrix(&features, &head, &labels), scalar);
        LossCase {
            features,
            labels,
            head,
            stats,
            confusion,
            priors: raw.iter().map(|r| r / s).collect(),
            strengths,
        }
    }

    /// `C = 4, H = 6, N = 8`.
    pub fn standard(seed: u64, mode: CovarianceMode) -> Self {
        LossCase::random(seed, 4, 6, 8, mode)
    }

    pub fn loss(&self, method: Method, head: &LinearHead, features: &Matrix, lambda: f64, beta: f64) -> Result<LossOutput> {
        let y = &self.labels;
        match method {
            Method::Ce => Ok(ce_full(features, y, head)),
            Method::La => la_full(features, y, head, &self.priors),
            Method::Isda => isda_loss(features, y, head, &self.stats, lambda),
            Method::Risda => risda_loss(features, y, head, &self.stats, &self.confusion, &RisdaConfig::default()),
            Method::Icda | Method::MetaIcda => {
                icda_loss_at(features, y, head, &self.stats, &self.strengths, &self.priors, lambda, beta)
            }
        }
    }

    pub fn inputs(&self, lambda: f64, beta: f64) -> RegularizerInputs<'_> {
        RegularizerInputs {
            features: &self.features,
            labels: &self.labels,
            head: &self.head,
            stats: &self.stats,
            priors: &self.priors,
            strengths: Some(&self.strengths),
            confusion: Some(&self.confusion),
            lambda,
            beta,
            risda: RisdaConfig::default(),
        }
    }
}

fn pack(head: &LinearHead, features: &Matrix) -> Vec<f64> {
    let mut v = head.w.as_slice().to_vec();
    v.extend_from_slice(&head.b);
    v.extend_from_slice(features.as_slice());
    v
}

fn unpack(x: &[f64], c: usize, h: usize, n: usize) -> (LinearHead, Matrix) {
    let w = Matrix::from_vec(c, h, x[..c * h].to_vec()).expect("sized");
    let b: Vector = x[c * h..c * h + c].into();
    let f = Matrix::from_vec(n, h, x[c * h + c..].to_vec()).expect("sized");
    (LinearHead { w, b }, f)
}

/// Relative error between the analytic gradient in (w, b, features) and
/// central differences of the loss value.
pub fn loss_gradient_error(case: &LossCase, method: Method, lambda: f64, beta: f64) -> Result<f64> {
    let (c, h, n) = (case.head.classes(), case.head.features(), case.labels.len());
    let out = case.loss(method, &case.head, &case.features, lambda, beta)?;
    let an = pack(&LinearHead { w: out.head.w.clone(), b: out.head.b.clone() }, &out.d_features);
    let fd = central_difference(
        |p| {
            let (hd, f) = unpack(p, c, h, n);
            case.loss(method, &hd, &f, lambda, beta).map(|o| o.loss).unwrap_or(f64::NAN)
        },
        &pack(&case.head, &case.features),
        1e-5,
    );
    Ok(relative_error(&an, &fd))
}

/// A small bilevel instance for meta-gradient checks.
pub struct MetaCase {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub head: LinearHead,
    pub stats: ClassStats,
    pub priors: Vec<f64>,
    pub alpha: Matrix,
    pub zeta: Matrix,
    pub net: StrengthNet,
    pub meta_features: Matrix,
    pub meta_labels: Vec<usize>,
}

impl MetaCase {
    pub fn random(seed: u64, mode: CovarianceMode) -> Self {
        let mut rng = Rng::new(seed);
        let (c, h, n, m) = (4, 5, 6, 5);
        let features = Matrix::from_fn(n, h, |_, _| rng.normal());
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let head = LinearHead {
            w: Matrix::from_fn(c, h, |_, _| 0.5 * rng.normal()),
            b: (0..c).map(|_| 0.2 * rng.normal()).collect::<Vec<_>>().into(),
        };
        let cl: Vec<usize> = (0..48).map(|i| i % c).collect();
        let cloud = Matrix::from_fn(48, h, |i, d| 0.7 * rng.normal() + if d == cl[i] { 1.0 } else { 0.0 });
        let mut stats = ClassStats::new(c, h, mode);
        stats.update(&cloud, &cl).expect("cloud covers every class");
        let raw: Vec<f64> = (0..c).map(|_| rng.uniform_in(0.5, 2.0)).collect();
        let total: f64 = raw.iter().sum();
        let alpha = alpha_matrix(&features, &head, &labels);
        let zeta = Matrix::from_fn(n, NUM_CHARACTERISTICS, |_, _| rng.normal());
        // A non-zero output layer so the net's gradient is informative.
        let mut net = StrengthNet::init(&mut rng);
        net.w2.iter_mut().for_each(|w| *w = 0.3 * rng.normal());
        net.b2 = 0.1;
        MetaCase {
            features,
            labels,
            head,
            stats,
            priors: raw.iter().map(|r| r / total).collect(),
            alpha,
            zeta,
            net,
            meta_features: Matrix::from_fn(m, h, |_, _| rng.normal()),
            meta_labels: (0..m).map(|_| rng.below(c)).collect(),
        }
    }

    fn problem<'a>(&'a self, stats: &'a ClassStats, lambda: f64, beta: f64) -> InnerProblem<'a> {
        InnerProblem {
            features: &self.features,
            labels: &self.labels,
            stats,
            priors: &self.priors,
            alpha: &self.alpha,
            lambda,
            beta,
        }
    }

    fn outer(&self, stats: &ClassStats, scalar: &[f64], lambda: f64, beta: f64, eta: f64) -> f64 {
        let meta = MetaBatch { features: &self.meta_features, labels: &self.meta_labels };
        virtual_step(&self.head, &self.problem(stats, lambda, beta), scalar, eta)
            .and_then(|(virt, _)| meta_loss(&virt, &meta))
            .map(|o| o.loss)
            .unwrap_or(f64::NAN)
    }
}

/// Worst relative error of the meta-gradients with respect to the strength
/// net (random direction), the per-sample strengths and the class means.
pub fn meta_gradient_error(case: &MetaCase, lambda: f64, beta: f64, eta: f64) -> Result<f64> {
    let stats = &case.stats;
    let scalar = case.net.forward(&case.zeta);
    let meta = MetaBatch { features: &case.meta_features, labels: &case.meta_labels };
    let grads = meta_gradients(&case.head, &case.problem(stats, lambda, beta), &scalar, &meta, eta)?;

    let g_net = case.net.backward(&case.zeta, &grads.alpha);
    let base = case.net.to_flat();
    let mut rng = Rng::new(base.len() as u64);
    let dir: Vec<f64> = base.iter().map(|_| rng.normal()).collect();
    let shifted = |s: f64| {
        let p: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + s * d).collect();
        StrengthNet::from_flat(&p).expect("same length")
    };
    let step = relu_safe_step(&case.net, &shifted(1.0), &case.zeta, 1e-5);
    let fd = central_difference(
        |s| {
            let p: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + s[0] * d).collect();
            let net = StrengthNet::from_flat(&p).expect("same length");
            case.outer(stats, &net.forward(&case.zeta), lambda, beta, eta)
        },
        &[0.0],
        step,
    )[0];
    let an = dot(&g_net.to_flat(), &dir);
    let mut worst = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-300);

    let fd = central_difference(|a| case.outer(stats, a, lambda, beta, eta), &scalar, 1e-5);
    worst = worst.max(relative_error(&fd, &grads.alpha));

    for k in 0..stats.classes() {
        let fd = central_difference(
            |m| {
                let mut s = stats.clone();
                s.means[k] = m.to_vec().into();
                case.outer(&s, &scalar, lambda, beta, eta)
            },
            &stats.means[k],
            1e-5,
        );
        if norm(&fd) > 1e-12 {
            worst = worst.max(relative_error(&fd, &grads.means[k]));
        }
    }
    Ok(worst)
}

fn pre_activations(net: &StrengthNet, zeta: &Matrix) -> Vec<f64> {
    zeta.row_iter()
        .flat_map(|z| net.w1.mul_vec(z).into_iter().zip(net.b1.iter()).map(|(a, b)| a + b).collect::<Vec<_>>())
        .collect()
}

/// Central-difference step along the segment `net → moved` that keeps every
/// hidden pre-activation on one side of the ReLU kink.
fn relu_safe_step(net: &StrengthNet, moved: &StrengthNet, zeta: &Matrix, step: f64) -> f64 {
    let a = pre_activations(net, zeta);
    let b = pre_activations(moved, zeta);
    let kink = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| *y != *x)
        .map(|(x, y)| (x / (y - x)).abs())
        .fold(f64::INFINITY, f64::min);
    step.min(0.25 * kink)
}

fn gradient_suite(seed: u64, exec: Exec) -> Result<Vec<Check>> {
    let methods = [Method::Ce, Method::La, Method::Isda, Method::Risda, Method::Icda];
    let mut checks = Vec::new();
    for mode in MODES {
        let errs = exec.map_range(GRADIENT_INSTANCES, |k| -> Result<Vec<f64>> {
            let case = LossCase::standard(instance_seed(seed, 1, k), mode);
            methods.iter().map(|&m| loss_gradient_error(&case, m, 0.8, 0.1)).collect()
        });
        let errs = errs.into_iter().collect::<Result<Vec<_>>>()?;
        for (j, m) in methods.iter().enumerate() {
            let e: Vec<f64> = errs.iter().map(|v| v[j]).collect();
            checks.push(Check::from_errors(&format!("gradient/{m}/{}", mode_tag(mode)), &e, GRADIENT_TOL));
        }
        let meta = exec.map_range(20, |k| meta_gradient_error(&MetaCase::random(instance_seed(seed, 2, k), mode), 0.6, 0.4, 0.5));
        let meta = meta.into_iter().collect::<Result<Vec<_>>>()?;
        checks.push(Check::from_errors(&format!("meta_gradient/{}", mode_tag(mode)), &meta, META_GRADIENT_TOL));
    }
    Ok(checks)
}

fn mode_tag(mode: CovarianceMode) -> &'static str {
    match mode {
        CovarianceMode::Full => "full",
        CovarianceMode::Diagonal => "diagonal",
    }
}

fn bound_suite(seed: u64, exec: Exec) -> Result<Vec<Check>> {
    let mut positive = Vec::new();
    let mut jensen = Vec::new();
    for k in 0..BOUND_INSTANCES {
        let s = instance_seed(seed, 3, k);
        let inst = BoundInstance::random(s);
        for &lambda in &BOUND_LAMBDAS {
            let r = inst.check(s, lambda, BOUND_SAMPLES, exec)?;
            // Excess over the bound in standard errors; ≤ 3 passes.
            let excess = (r.mc_estimate - r.bound) / r.se.max(f64::MIN_POSITIVE);
            positive.push((excess.max(0.0), r.pass));
        }
        let r = inst.check(s, 0.0, BOUND_SAMPLES, exec)?;
        jensen.push((r.mc_estimate - r.bound).abs());
    }
    Ok(vec![
        Check::from_outcomes("bound/mc_within_3se", positive, 3.0),
        Check::from_errors("bound/lambda_zero_equality", &jensen, 1e-10),
    ])
}

fn per_sample_gap(a: &LossOutput, b: &[f64]) -> f64 {
    max_abs_diff(&a.per_sample, b)
}

fn reduction_suite(seed: u64, exec: Exec) -> Result<Vec<Check>> {
    let rows = exec.map_range(REDUCTION_INSTANCES, |k| -> Result<[f64; 4]> {
        let case = LossCase::standard(instance_seed(seed, 4, k), CovarianceMode::Full);
        let (f, y, hd) = (&case.features, &case.labels, &case.head);
        let c = hd.classes();
        let logits = hd.logits(f);

        let icda0 = icda_loss_at(f, y, hd, &case.stats, &case.strengths, &case.priors, 0.0, 0.0)?;
        let la = la_loss(&logits, y, &case.priors)?;
        let e_la = per_sample_gap(&icda0, &la.per_sample);

        let uniform = vec![1.0 / c as f64; c];
        let zero = StrengthMatrix::zeros(y.len(), c);
        let lambda = 0.6;
        let isda = isda_loss(f, y, hd, &case.stats, lambda)?;
        let icda_isda = icda_loss_at(f, y, hd, &case.stats, &zero, &uniform, lambda, 0.0)?;
        let e_isda = per_sample_gap(&icda_isda, &isda.per_sample);

        let ce = crate::losses::ce_loss(&logits, y);
        let e_ce = max_abs_diff(&la_loss(&logits, y, &uniform)?.per_sample, &ce.per_sample);

        let cfg = RisdaConfig { alpha: 0.0, beta: lambda / 2.0 };
        let risda = risda_loss(f, y, hd, &case.stats, &ConfusionRates::new(c), &cfg)?;
        let e_risda = per_sample_gap(&risda, &isda.per_sample);
        Ok([e_la, e_isda, e_ce, e_risda])
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let names = [
        "reduction/icda_no_aug_is_la",
        "reduction/icda_zero_alpha_uniform_is_isda",
        "reduction/la_uniform_is_ce",
        "reduction/risda_no_confusion_is_isda",
    ];
    let mut checks: Vec<Check> = names
        .iter()
        .enumerate()
        .map(|(j, n)| Check::from_errors(n, &rows.iter().map(|r| r[j]).collect::<Vec<_>>(), REDUCTION_TOL))
        .collect();
    checks.push(trajectory_check(seed)?);
    Ok(checks)
}

/// Trains ICDA with λ⁰ = β = 0 and LA from the same seed on an imbalanced toy
/// and compares every per-iteration loss and the final parameters bitwise.
pub fn trajectory_check(seed: u64) -> Result<Check> {
    let mut cfg = ExperimentConfig::default();
    cfg.iterations = TRAJECTORY_ITERATIONS;
    cfg.eval_every = 10;
    cfg.dataset.classes = 4;
    cfg.dataset.dim = 6;
    cfg.dataset.train_per_class = 80;
    cfg.dataset.test_per_class = 20;
    cfg.dataset.imbalance_ratio = 10.0;
    cfg.backbone.hidden = vec![12];
    cfg.backbone.feature_dim = 8;
    cfg.meta.meta_per_class = 5;
    let data = prepare(&cfg.dataset, cfg.meta.meta_per_class, seed)?;
    let mut icda = cfg.clone();
    icda.method = Method::Icda;
    icda.icda.lambda0 = 0.0;
    icda.icda.beta = 0.0;
    let mut la = cfg;
    la.method = Method::La;
    let a = run_with_data(&icda, seed, &data)?;
    let b = run_with_data(&la, seed, &data)?;
    let same_losses = a.trace.iter().zip(&b.trace).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits());
    let same = same_losses && a.trace.len() == b.trace.len() && a.model == b.model;
    let err = if same { 0.0 } else { f64::INFINITY };
    Ok(Check::from_outcomes("reduction/icda_la_trajectory_bitwise", [(err, same)], 0.0))
}

/// A random split of `0..n` into `parts` non-empty contiguous blocks of a
/// shuffled order.
fn random_partition(n: usize, parts: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let order = rng.permutation(n);
    let mut cuts: Vec<usize> = rng.permutation(n - 1).into_iter().take(parts - 1).map(|c| c + 1).collect();
    cuts.sort_unstable();
    cuts.insert(0, 0);
    cuts.push(n);
    cuts.windows(2).map(|w| order[w[0]..w[1]].to_vec()).collect()
}

fn rows_of(x: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), x.cols(), |i, d| x[(idx[i], d)])
}

/// Max abs gap between streamed per-class moments over a random 5-way
/// partition and the pooled direct moments.
pub fn streaming_error(seed: u64, mode: CovarianceMode) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let c = 2 + rng.below(4);
    let h = 2 + rng.below(6);
    let n = 5 * c + rng.below(150);
    let labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.below(c) }).collect();
    let scale: Vec<f64> = (0..h).map(|_| rng.uniform_in(0.5, 5.0)).collect();
    let x = Matrix::from_fn(n, h, |i, d| 3.0 * labels[i] as f64 + scale[d] * rng.normal());
    let mut s = ClassStats::new(c, h, mode);
    for part in random_partition(n, 5, &mut rng) {
        let lb: Vec<usize> = part.iter().map(|&i| labels[i]).collect();
        s.update(&rows_of(&x, &part), &lb)?;
    }
    let mut worst = 0.0f64;
    for k in 0..c {
        let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
        let (m, cov) = batch_moments(&x, &idx, mode);
        worst = worst.max(max_abs_diff(&m, &s.means[k]));
        worst = worst.max(max_abs_diff(cov.as_slice(), s.covs[k].as_slice()));
        if s.counts[k] != idx.len() as u64 {
            return Ok(f64::INFINITY);
        }
    }
    Ok(worst)
}

/// Gap between `ΔwᵀΣΔw` with Σ the empirical covariance of a random cloud
/// and the empirical variance of the projected cloud.
pub fn mapped_variance_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let h = 2 + rng.below(10);
    let n = 2 + rng.below(200);
    let c = 2 + rng.below(4);
    let a = Matrix::from_fn(h, h, |_, _| rng.normal());
    let z = Matrix::from_fn(n, h, |_, _| rng.normal());
    let shift: Vec<f64> = (0..h).map(|_| 5.0 * rng.normal()).collect();
    let cloud = Matrix::from_fn(n, h, |i, d| shift[d] + dot(z.row(i), a.row(d)));
    let head = LinearHead {
        w: Matrix::from_fn(c, h, |_, _| rng.normal()),
        b: Vector::zeros(c),
    };
    let (y, k) = (rng.below(c), (1 + rng.below(c - 1)) % c);
    let k = if k == y { (y + 1) % c } else { k };
    let (_, cov) = batch_moments(&cloud, &(0..n).collect::<Vec<_>>(), CovarianceMode::Full);
    let dw: Vec<f64> = (0..h).map(|d| head.w[(k, d)] - head.w[(y, d)]).collect();
    let proj: Vec<f64> = cloud.row_iter().map(|r| dot(r, &dw)).collect();
    let mean = proj.iter().sum::<f64>() / n as f64;
    let var = proj.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n as f64;
    (mapped_variance(&head, k, y, &cov) - var).abs() / var.max(1.0)
}

fn stats_suite(seed: u64, exec: Exec) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for mode in MODES {
        let e = exec.map_range(STATS_TRIALS, |k| streaming_error(instance_seed(seed, 5, k), mode));
        let e = e.into_iter().collect::<Result<Vec<_>>>()?;
        checks.push(Check::from_errors(&format!("stats/streamed_equals_pooled/{}", mode_tag(mode)), &e, STATS_TOL));
    }
    let e = exec.map_range(STATS_TRIALS, |k| mapped_variance_error(instance_seed(seed, 6, k)));
    checks.push(Check::from_errors("stats/mapped_variance", &e, MAPPED_VARIANCE_TOL));
    Ok(checks)
}

/// Worst `|ratio − 0.25|` of one method's Taylor table; the pass flag is the
/// table's own.
fn taylor_outcome(case: &LossCase, method: Method) -> Result<(f64, bool)> {
    let table = method_taylor(method, &case.inputs(0.7, 0.2), &halving_eps())?;
    let worst = table.rows.iter().filter_map(|r| r.ratio).map(|r| (r - 0.25).abs()).fold(0.0, f64::max);
    Ok((worst, table.pass))
}

fn taylor_suite(seed: u64, exec: Exec) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for method in TAYLOR_METHODS {
        let out = exec.map_range(TAYLOR_INSTANCES, |k| {
            let mut rng = Rng::new(instance_seed(seed, 7, k));
            let c = 2 + rng.below(4);
            let h = 2 + rng.below(6);
            let n = c + rng.below(8);
            let case = LossCase::random(rng.seed() ^ 0x5eed, c, h, n, MODES[k % 2]);
            taylor_outcome(&case, method)
        });
        let out = out.into_iter().collect::<Result<Vec<_>>>()?;
        checks.push(Check::from_outcomes(&format!("taylor/{method}"), out, 0.05));
    }
    let gaps = exec.map_range(REDUCTION_INSTANCES, |k| -> Result<f64> {
        let case = LossCase::standard(instance_seed(seed, 8, k), MODES[k % 2]);
        let mut inputs = case.inputs(0.0, 0.0);
        let strengths = direct_strengths(&case.features, &case.head, &case.labels, None);
        inputs.strengths = Some(&strengths);
        let a = regularizer(Method::Icda, &inputs)?;
        let b = regularizer(Method::La, &inputs)?;
        Ok([a.total - b.total, a.margin - b.margin, a.mapped_variance - b.mapped_variance, a.boundary - b.boundary, a.delta - b.delta]
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max))
    });
    let gaps = gaps.into_iter().collect::<Result<Vec<_>>>()?;
    checks.push(Check::from_errors("taylor/r_icda_no_aug_equals_r_la", &gaps, REDUCTION_TOL));
    Ok(checks)
}
