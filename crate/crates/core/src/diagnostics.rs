//! First-order regularizers of the perturbed losses, Taylor consistency, and
//! geometric quantities (mapped variance, boundary distance, margins).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::losses::{
    ce_full, icda_loss_at, isda_loss, la_full, mixed_covariance, risda_loss, LossOutput, Method, RisdaConfig,
};
use crate::model::LinearHead;
use crate::numerics::{dot, log_sum_exp, norm, softmax, sub, Matrix};
use crate::stats::{log_prior_ratio, projected_variance, ClassStats, ConfusionRates, Covariance};
use crate::strength::{margin, StrengthMatrix};

/// Batch state the regularizers are evaluated at. `strengths` is needed by
/// ICDA, `confusion` by RISDA.
#[derive(Clone, Copy, Debug)]
pub struct RegularizerInputs<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
    pub head: &'a LinearHead,
    pub stats: &'a ClassStats,
    pub priors: &'a [f64],
    pub strengths: Option<&'a StrengthMatrix>,
    pub confusion: Option<&'a ConfusionRates>,
    pub lambda: f64,
    pub beta: f64,
    pub risda: RisdaConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerReport {
    pub method: Method,
    pub total: f64,
    /// `−β α_i q_{i,y}` (ICDA).
    pub margin: f64,
    pub mapped_variance: f64,
    pub boundary: f64,
    /// `q_{i,c} δ_{c,i}`.
    pub delta: f64,
}

impl RegularizerReport {
    fn from_parts(method: Method, margin: f64, mapped_variance: f64, boundary: f64, delta: f64) -> Self {
        RegularizerReport {
            method,
            total: margin + mapped_variance + boundary + delta,
            margin,
            mapped_variance,
            boundary,
            delta,
        }
    }
}

fn dw(head: &LinearHead, c: usize, y: usize) -> Vec<f64> {
    sub(head.w.row(c), head.w.row(y))
}

fn need<'a, T>(x: Option<&'a T>, what: &str) -> Result<&'a T> {
    x.ok_or_else(|| contract(format!("{what} required for this method")))
}

fn check(inputs: &RegularizerInputs) -> Result<()> {
    let c = inputs.head.classes();
    if inputs.features.rows() != inputs.labels.len() || inputs.features.cols() != inputs.head.features() {
        return Err(contract("features do not match labels or head"));
    }
    if inputs.labels.iter().any(|&y| y >= c) || inputs.priors.len() != c || inputs.stats.classes() != c {
        return Err(contract("class count mismatch"));
    }
    Ok(())
}

/// Per-class RISDA pieces: `(Σ_y + Σ_j ε_{y,j} Σ_j, Σ_j ε_{y,j} μ_j)`.
fn risda_mix(stats: &ClassStats, eps: &ConfusionRates, y: usize) -> (Covariance, Vec<f64>) {
    let mut cov = stats.covs[y].clone();
    let mut mean = vec![0.0; stats.dim()];
    for j in (0..stats.classes()).filter(|&j| j != y) {
        let e = eps.off_diagonal(y, j);
        cov.add_scaled(e, &stats.covs[j]);
        crate::numerics::axpy(e, &stats.means[j], &mut mean);
    }
    (cov, mean)
}

/// The method's training loss at `inputs`. Meta-ICDA is evaluated with the
/// supplied strengths, like ICDA.
pub fn method_loss(method: Method, inputs: &RegularizerInputs) -> Result<LossOutput> {
    check(inputs)?;
    let (f, y, hd) = (inputs.features, inputs.labels, inputs.head);
    match method {
        Method::Ce => Ok(ce_full(f, y, hd)),
        Method::La => la_full(f, y, hd, inputs.priors),
        Method::Isda => isda_loss(f, y, hd, inputs.stats, inputs.lambda),
        Method::Risda => risda_loss(f, y, hd, inputs.stats, need(inputs.confusion, "confusion rates")?, &inputs.risda),
        Method::Icda | Method::MetaIcda => icda_loss_at(
            f,
            y,
            hd,
            inputs.stats,
            need(inputs.strengths, "strengths")?,
            inputs.priors,
            inputs.lambda,
            inputs.beta,
        ),
    }
}

/// The logit perturbation `Δu` per sample (N × C) whose first-order effect
/// the regularizer measures. For ICDA the label entry is `−βα_i`.
pub fn perturbation(method: Method, inputs: &RegularizerInputs) -> Result<Matrix> {
    check(inputs)?;
    let (n, c) = (inputs.labels.len(), inputs.head.classes());
    let mut du = Matrix::zeros(n, c);
    let lam = inputs.lambda;
    for (i, &y) in inputs.labels.iter().enumerate() {
        match method {
            Method::Ce => {}
            Method::La => {
                for k in (0..c).filter(|&k| k != y) {
                    du[(i, k)] = log_prior_ratio(inputs.priors, k, y);
                }
            }
            Method::Isda => {
                for k in (0..c).filter(|&k| k != y) {
                    du[(i, k)] = 0.5 * lam * inputs.stats.covs[y].quad_form(&dw(inputs.head, k, y));
                }
            }
            Method::Risda => {
                let eps = need(inputs.confusion, "confusion rates")?;
                let (cov, mean) = risda_mix(inputs.stats, eps, y);
                for k in (0..c).filter(|&k| k != y) {
                    let d = dw(inputs.head, k, y);
                    du[(i, k)] = inputs.risda.alpha * dot(&d, &mean) + inputs.risda.beta * cov.quad_form(&d);
                }
            }
            Method::Icda | Method::MetaIcda => {
                let s = need(inputs.strengths, "strengths")?;
                let a_hat = s.alpha_hat.row(i);
                let mixed = mixed_covariance(inputs.stats, y, a_hat);
                for k in (0..c).filter(|&k| k != y) {
                    let d = dw(inputs.head, k, y);
                    du[(i, k)] = log_prior_ratio(inputs.priors, k, y)
                        + 0.5 * lam * mixed.quad_form(&d)
                        + lam * a_hat[k] * dot(&d, &inputs.stats.means[k]);
                }
                du[(i, y)] = -inputs.beta * s.alpha_scalar[i];
            }
        }
    }
    Ok(du)
}

/// Closed-form regularizer with its component breakdown, summed over the batch.
pub fn regularizer(method: Method, inputs: &RegularizerInputs) -> Result<RegularizerReport> {
    check(inputs)?;
    let c = inputs.head.classes();
    let logits = inputs.head.logits(inputs.features);
    let lam = inputs.lambda;
    let (mut m, mut v, mut b, mut d) = (0.0, 0.0, 0.0, 0.0);
    for (i, &y) in inputs.labels.iter().enumerate() {
        let q = softmax(logits.row(i));
        let others = (0..c).filter(|&k| k != y);
        match method {
            Method::Ce => {}
            Method::La => {
                d += others.map(|k| q[k] * log_prior_ratio(inputs.priors, k, y)).sum::<f64>();
            }
            Method::Isda => {
                let cov = &inputs.stats.covs[y];
                v += others.map(|k| 0.5 * lam * q[k] * cov.quad_form(&dw(inputs.head, k, y))).sum::<f64>();
            }
            Method::Risda => {
                let eps = need(inputs.confusion, "confusion rates")?;
                let (cov, mean) = risda_mix(inputs.stats, eps, y);
                for k in others {
                    let dwk = dw(inputs.head, k, y);
                    b += q[k] * inputs.risda.alpha * dot(&dwk, &mean);
                    v += q[k] * inputs.risda.beta * cov.quad_form(&dwk);
                }
            }
            Method::Icda | Method::MetaIcda => {
                let s = need(inputs.strengths, "strengths")?;
                let a_hat = s.alpha_hat.row(i);
                let mixed = mixed_covariance(inputs.stats, y, a_hat);
                d += others.clone().map(|k| q[k] * log_prior_ratio(inputs.priors, k, y)).sum::<f64>();
                for k in others {
                    let dwk = dw(inputs.head, k, y);
                    v += q[k] * 0.5 * lam * mixed.quad_form(&dwk);
                    b += q[k] * lam * a_hat[k] * dot(&dwk, &inputs.stats.means[k]);
                }
                m -= inputs.beta * s.alpha_scalar[i] * q[y];
            }
        }
    }
    Ok(RegularizerReport::from_parts(method, m, v, b, d))
}

/// Regularizer by method tag; unknown tags are a contract violation.
pub fn regularizer_by_tag(tag: &str, inputs: &RegularizerInputs) -> Result<RegularizerReport> {
    let method: Method = tag.parse().map_err(|_| contract(format!("unknown method tag '{tag}'")))?;
    regularizer(method, inputs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorRow {
    pub eps: f64,
    pub err: f64,
    /// `err(ε) / err(previous ε)`, when both are above the noise floor.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorTable {
    pub rows: Vec<TaylorRow>,
    pub pass: bool,
}

/// Below this the remainder is indistinguishable from rounding.
const TAYLOR_FLOOR: f64 = 1e-13;

/// `err(ε) = |ℓ(u + εΔu) − ℓ(u) − ε·linear|`, where `linear` is the claimed
/// directional derivative. Passes when every ratio under ε-halving lies in
/// [0.2, 0.3].
pub fn taylor_check(loss: impl Fn(&[f64]) -> f64, u: &[f64], du: &[f64], linear: f64, eps: &[f64]) -> Result<TaylorTable> {
    if u.len() != du.len() {
        return Err(contract("u and du differ in length"));
    }
    if eps.iter().any(|&e| !(e > 0.0)) || eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(contract("eps values must be positive and decreasing"));
    }
    let base = loss(u);
    let mut rows: Vec<TaylorRow> = Vec::with_capacity(eps.len());
    let mut pass = true;
    for &e in eps {
        let shifted: Vec<f64> = u.iter().zip(du).map(|(a, b)| a + e * b).collect();
        let err = (loss(&shifted) - base - e * linear).abs();
        let ratio = rows
            .last()
            .filter(|prev| prev.err > TAYLOR_FLOOR && err > TAYLOR_FLOOR)
            .map(|prev| err / prev.err);
        if let Some(r) = ratio {
            pass &= (0.2..=0.3).contains(&r);
        }
        rows.push(TaylorRow { eps: e, err, ratio });
    }
    Ok(TaylorTable { rows, pass })
}

/// `ε` halving from 1e-2 down to about 1e-4.
pub fn halving_eps() -> Vec<f64> {
    (0..7).map(|k| 1e-2 / 2f64.powi(k)).collect()
}

/// Batch CE summed over samples, as a function of the flattened logits.
fn summed_ce(labels: &[usize], classes: usize) -> impl Fn(&[f64]) -> f64 + '_ {
    move |flat: &[f64]| {
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = &flat[i * classes..(i + 1) * classes];
                log_sum_exp(row) - row[y]
            })
            .sum()
    }
}

/// Taylor check of a method's perturbation against its implemented
/// regularizer. The linear term is `R` plus the dropped constant `Σ βα_i`
/// for ICDA.
pub fn method_taylor(method: Method, inputs: &RegularizerInputs, eps: &[f64]) -> Result<TaylorTable> {
    let du = perturbation(method, inputs)?;
    let report = regularizer(method, inputs)?;
    let dropped = match method {
        Method::Icda | Method::MetaIcda => {
            let s = need(inputs.strengths, "strengths")?;
            inputs.beta * s.alpha_scalar.iter().sum::<f64>()
        }
        _ => 0.0,
    };
    let logits = inputs.head.logits(inputs.features);
    let c = inputs.head.classes();
    taylor_check(
        summed_ce(inputs.labels, c),
        logits.as_slice(),
        du.as_slice(),
        report.total + dropped,
        eps,
    )
}

/// `Δw Σ_y Δwᵀ` with `Δw = w_c − w_y`.
pub fn mapped_variance(head: &LinearHead, c: usize, y: usize, cov_y: &Covariance) -> f64 {
    assert_ne!(c, y, "mapped variance needs two distinct classes");
    projected_variance(cov_y, &dw(head, c, y))
}

/// `Δw·μ_c / ‖Δw‖`, the signed distance of `μ_c` to the bias-free boundary.
pub fn boundary_distance(head: &LinearHead, c: usize, y: usize, mean_c: &[f64]) -> Result<f64> {
    assert_ne!(c, y, "boundary distance needs two distinct classes");
    let d = dw(head, c, y);
    let len = norm(&d);
    if len < 1e-12 {
        return Err(Error::DegenerateBoundary(len));
    }
    Ok(dot(&d, mean_c) / len)
}

/// Unnormalised `Δw·μ_c`, as it appears in the regularizer.
pub fn boundary_product(head: &LinearHead, c: usize, y: usize, mean_c: &[f64]) -> f64 {
    dot(&dw(head, c, y), mean_c)
}

/// Averages over ordered class pairs `(c, y)`, `c ≠ y`, of classes seen by `stats`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub mean_mapped_variance: f64,
    pub mean_boundary_distance: f64,
    pub mean_boundary_product: f64,
    /// Pairs skipped because `Δw` vanished.
    pub degenerate_pairs: usize,
}

pub fn geometry(head: &LinearHead, stats: &ClassStats) -> Geometry {
    let c = head.classes();
    let (mut mv, mut bd, mut bp) = (0.0, 0.0, 0.0);
    let (mut n, mut nd, mut degenerate) = (0usize, 0usize, 0usize);
    for y in (0..c).filter(|&y| stats.counts[y] > 0) {
        for k in (0..c).filter(|&k| k != y && stats.counts[k] > 0) {
            mv += mapped_variance(head, k, y, &stats.covs[y]);
            bp += boundary_product(head, k, y, &stats.means[k]);
            n += 1;
            match boundary_distance(head, k, y, &stats.means[k]) {
                Ok(v) => {
                    bd += v;
                    nd += 1;
                }
                Err(_) => degenerate += 1,
            }
        }
    }
    let avg = |s: f64, k: usize| if k == 0 { 0.0 } else { s / k as f64 };
    Geometry {
        mean_mapped_variance: avg(mv, n),
        mean_boundary_distance: avg(bd, nd),
        mean_boundary_product: avg(bp, n),
        degenerate_pairs: degenerate,
    }
}

pub const SMALL_MARGIN: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginDistribution {
    /// `(bin_left, count)` over [−1, 1].
    pub bins: Vec<(f64, usize)>,
    /// Share of all samples that are predicted correctly with margin < 0.2.
    pub small_margin_fraction: f64,
    pub mean_margin: f64,
}

/// Margins `q_y − max_{c≠y} q_c` binned into `bins` equal bins over [−1, 1].
pub fn margin_distribution(logits: &Matrix, labels: &[usize], bins: usize) -> MarginDistribution {
    assert_eq!(logits.rows(), labels.len(), "logits and labels differ in length");
    assert!(bins > 0, "at least one bin");
    let width = 2.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    let (mut small, mut total) = (0usize, 0.0);
    for (i, &y) in labels.iter().enumerate() {
        let m = margin(&softmax(logits.row(i)), y);
        total += m;
        let k = (((m + 1.0) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[k] += 1;
        if m > 0.0 && m < SMALL_MARGIN {
            small += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    MarginDistribution {
        bins: counts.into_iter().enumerate().map(|(k, n)| (-1.0 + k as f64 * width, n)).collect(),
        small_margin_fraction: small as f64 / n,
        mean_margin: total / n,
    }
}

impl MarginDistribution {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "bin_left,count")?;
        for (left, count) in &self.bins {
            writeln!(out, "{left},{count}")?;
        }
        Ok(())
    }
}
