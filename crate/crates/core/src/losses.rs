//! Logit-perturbation losses.
//!
//! Every loss is evaluated by one engine. For a sample with label `y` and each
//! other class `c`, the logit difference `u_c − u_y` is shifted by
//!
//! ```text
//! φ_{i,c} = ½ Δwᵀ A_i Δw + Δw·g_{i,c} + k_{i,c},   Δw = w_c − w_y
//! ```
//!
//! and the sample loss is `log(1 + Σ_c exp(u_c − u_y + φ_{i,c}))`. CE, LA,
//! ISDA, RISDA and ICDA differ only in the `(A, g, k)` they supply. Statistics,
//! strengths and priors are treated as constants when differentiating.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{HeadGrad, LinearHead};
use crate::numerics::{axpy, dot, log_sum_exp, Matrix, Vector};
use crate::stats::{log_prior_ratio, ClassStats, ConfusionRates, Covariance, CovarianceMode};
use crate::strength::StrengthMatrix;

/// Upper clamp on `φ` before exponentiation. A clamped entry passes no
/// gradient through its perturbation.
pub const PHI_CLAMP: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ce,
    La,
    Isda,
    Risda,
    Icda,
    MetaIcda,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Ce, Method::La, Method::Isda, Method::Risda, Method::Icda, Method::MetaIcda];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::La => "la",
            Method::Isda => "isda",
            Method::Risda => "risda",
            Method::Icda => "icda",
            Method::MetaIcda => "meta_icda",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected ce|la|isda|risda|icda|meta_icda)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcdaConfig {
    pub lambda0: f64,
    pub beta: f64,
    pub tau: f64,
    pub covariance: CovarianceMode,
    pub noise_mode: bool,
}

impl Default for IcdaConfig {
    fn default() -> Self {
        IcdaConfig {
            lambda0: 0.5,
            beta: 0.1,
            tau: 0.9,
            covariance: CovarianceMode::Full,
            noise_mode: false,
        }
    }
}

impl IcdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(Error::Config("icda.lambda0 must be a finite value >= 0".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("icda.beta must be a finite value >= 0".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config("icda.tau must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// RISDA weights on the confusion-mean term (`alpha`) and the covariance term (`beta`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RisdaConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RisdaConfig {
    fn default() -> Self {
        RisdaConfig { alpha: 0.5, beta: 0.5 }
    }
}

/// `λ = (t/T)·λ⁰`.
pub fn lambda_at(t: u64, total: u64, lambda0: f64) -> f64 {
    assert!(total > 0 && t <= total, "lambda schedule needs 0 <= t <= T, T > 0");
    t as f64 / total as f64 * lambda0
}

/// Perturbation data for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTerms {
    /// `A_i`; `None` means zero.
    pub quad: Option<Covariance>,
    /// Row `c` holds `g_{i,c}`; `None` means zero.
    pub linear: Option<Matrix>,
    /// `k_{i,c}`, one entry per class (the label entry is ignored).
    pub constant: Vec<f64>,
}

impl SampleTerms {
    pub fn zero(classes: usize) -> Self {
        SampleTerms {
            quad: None,
            linear: None,
            constant: vec![0.0; classes],
        }
    }
}

/// Loss value and gradients from the engine.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// Applied (possibly clamped) `φ`, zero on the label column.
    pub phi: Matrix,
    /// Softmax weights over `[1, exp z_c]`: column `y` holds the weight of the
    /// constant term, the others `p_c`.
    pub weights: Matrix,
    pub clamped: Vec<bool>,
    pub d_logits: Matrix,
    pub head: HeadGrad,
    pub d_features: Matrix,
}

impl LossOutput {
    pub fn clamp_count(&self) -> usize {
        self.clamped.iter().filter(|&&c| c).count()
    }
}

fn check_batch(features: &Matrix, labels: &[usize], head: &LinearHead) {
    assert_eq!(features.rows(), labels.len(), "features and labels differ in length");
    assert_eq!(features.cols(), head.features(), "feature width mismatch");
    assert!(!labels.is_empty(), "empty batch");
    let c = head.classes();
    assert!(labels.iter().all(|&y| y < c), "label out of range");
}

/// Batch-mean perturbed loss with gradients for logits, head and features.
pub fn perturbed_loss(features: &Matrix, labels: &[usize], head: &LinearHead, terms: &[SampleTerms]) -> LossOutput {
    check_batch(features, labels, head);
    assert_eq!(terms.len(), labels.len(), "one term set per sample");
    let (n, c, h) = (labels.len(), head.classes(), head.features());
    let inv_n = 1.0 / n as f64;
    let logits = head.logits(features);

    let mut phi = Matrix::zeros(n, c);
    let mut weights = Matrix::zeros(n, c);
    let mut clamped = vec![false; n * c];
    let mut d_logits = Matrix::zeros(n, c);
    let mut grad = HeadGrad::zeros(c, h);
    let mut per_sample = Vec::with_capacity(n);
    let mut z = vec![0.0; c];
    let mut dirs: Vec<Option<Vec<f64>>> = vec![None; c];

    for (i, (&y, t)) in labels.iter().zip(terms).enumerate() {
        assert_eq!(t.constant.len(), c, "constant term width");
        let u = logits.row(i);
        let w_y = head.w.row(y);
        for k in 0..c {
            dirs[k] = None;
            if k == y {
                z[k] = 0.0;
                continue;
            }
            let mut p = t.constant[k];
            if t.quad.is_some() || t.linear.is_some() {
                let dw: Vec<f64> = head.w.row(k).iter().zip(w_y).map(|(a, b)| a - b).collect();
                let mut dir = vec![0.0; h];
                let mut extra = 0.0;
                if let Some(a) = &t.quad {
                    dir = a.mul_vec(&dw);
                    extra += 0.5 * dot(&dw, &dir);
                }
                if let Some(g) = &t.linear {
                    extra += dot(&dw, g.row(k));
                    axpy(1.0, g.row(k), &mut dir);
                }
                p += extra;
                dirs[k] = Some(dir);
            }
            if p > PHI_CLAMP {
                p = PHI_CLAMP;
                clamped[i * c + k] = true;
                dirs[k] = None;
            }
            phi[(i, k)] = p;
            z[k] = u[k] - u[y] + p;
        }
        let lse = log_sum_exp(&z);
        per_sample.push(lse);
        let mut total = 0.0;
        for k in 0..c {
            let p = (z[k] - lse).exp();
            weights[(i, k)] = p;
            if k == y {
                continue;
            }
            total += p;
            d_logits[(i, k)] = p * inv_n;
            if let Some(dir) = &dirs[k] {
                let s = p * inv_n;
                axpy(s, dir, grad.w.row_mut(k));
                axpy(-s, dir, grad.w.row_mut(y));
            }
        }
        d_logits[(i, y)] = -total * inv_n;
    }

    grad.w.add_scaled(1.0, &d_logits.t_matmul(features));
    for row in d_logits.row_iter() {
        axpy(1.0, row, &mut grad.b);
    }
    let d_features = d_logits.matmul(&head.w);
    let loss = per_sample.iter().sum::<f64>() * inv_n;
    LossOutput {
        loss,
        per_sample,
        phi,
        weights,
        clamped,
        d_logits,
        head: grad,
        d_features,
    }
}

/// Loss and logit gradient for losses defined on logits alone.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitLoss {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub d_logits: Matrix,
}

/// Mean cross-entropy; `d_logits = (q − y)/N`.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> LogitLoss {
    shifted_ce(logits, labels, None)
}

/// Cross-entropy on logits shifted by `log π`.
pub fn la_loss(logits: &Matrix, labels: &[usize], priors: &[f64]) -> Result<LogitLoss> {
    if priors.len() != logits.cols() {
        return Err(contract("one prior per class"));
    }
    if priors.iter().any(|&p| !(p > 0.0)) {
        return Err(contract("logit adjustment needs every prior > 0"));
    }
    let shift: Vec<f64> = priors.iter().map(|p| p.ln()).collect();
    Ok(shifted_ce(logits, labels, Some(&shift)))
}

fn shifted_ce(logits: &Matrix, labels: &[usize], shift: Option<&[f64]>) -> LogitLoss {
    assert_eq!(logits.rows(), labels.len(), "logits and labels differ in length");
    assert!(!labels.is_empty(), "empty batch");
    let (n, c) = logits.shape();
    let inv_n = 1.0 / n as f64;
    let mut d_logits = Matrix::zeros(n, c);
    let mut per_sample = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        assert!(y < c, "label out of range");
        let v: Vec<f64> = match shift {
            Some(s) => logits.row(i).iter().zip(s).map(|(u, d)| u + d).collect(),
            None => logits.row(i).to_vec(),
        };
        let lse = log_sum_exp(&v);
        per_sample.push(lse - v[y]);
        for k in 0..c {
            let q = (v[k] - lse).exp();
            d_logits[(i, k)] = (q - if k == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    let loss = per_sample.iter().sum::<f64>() * inv_n;
    LogitLoss {
        loss,
        per_sample,
        d_logits,
    }
}

fn require_stats(stats: &ClassStats, labels: &[usize]) -> Result<()> {
    if let Some(&y) = labels.iter().find(|&&y| y >= stats.classes() || stats.counts[y] == 0) {
        return Err(contract(format!("no feature statistics for class {y}")));
    }
    Ok(())
}

fn check_priors(priors: &[f64], classes: usize) -> Result<()> {
    if priors.len() != classes || priors.iter().any(|&p| !(p > 0.0)) {
        return Err(contract("priors must be positive, one per class"));
    }
    Ok(())
}

/// `k_{i,c} = log(π_c/π_{y_i})`.
pub fn la_terms(labels: &[usize], priors: &[f64]) -> Vec<SampleTerms> {
    let c = priors.len();
    labels
        .iter()
        .map(|&y| SampleTerms {
            quad: None,
            linear: None,
            constant: (0..c).map(|k| if k == y { 0.0 } else { log_prior_ratio(priors, k, y) }).collect(),
        })
        .collect()
}

/// `A_i = λ Σ_{y_i}`.
pub fn isda_terms(labels: &[usize], stats: &ClassStats, lambda: f64) -> Vec<SampleTerms> {
    let c = stats.classes();
    labels
        .iter()
        .map(|&y| SampleTerms {
            quad: (lambda != 0.0).then(|| stats.covs[y].scaled(lambda)),
            linear: None,
            constant: vec![0.0; c],
        })
        .collect()
}

/// `A_i = 2β(Σ_y + Σ_j ε_{y,j} Σ_j)`, `g_{i,c} = α Σ_j ε_{y,j} μ_j` (same for every `c`).
pub fn risda_terms(labels: &[usize], stats: &ClassStats, eps: &ConfusionRates, cfg: &RisdaConfig) -> Vec<SampleTerms> {
    let c = stats.classes();
    let h = stats.dim();
    let per_class: Vec<(Covariance, Matrix)> = (0..c)
        .map(|y| {
            let mut mixed = stats.covs[y].clone();
            let mut mean = vec![0.0; h];
            for j in (0..c).filter(|&j| j != y) {
                let e = eps.off_diagonal(y, j);
                if e != 0.0 {
                    mixed.add_scaled(e, &stats.covs[j]);
                    axpy(e, &stats.means[j], &mut mean);
                }
            }
            let g: Vec<f64> = mean.iter().map(|m| cfg.alpha * m).collect();
            (mixed.scaled(2.0 * cfg.beta), Matrix::from_fn(c, h, |_, k| g[k]))
        })
        .collect();
    labels
        .iter()
        .map(|&y| SampleTerms {
            quad: Some(per_class[y].0.clone()),
            linear: Some(per_class[y].1.clone()),
            constant: vec![0.0; c],
        })
        .collect()
}

/// `S_i = Σ_{y_i} + Σ_{j≠y_i} α̂_{i,j} Σ_j`.
pub fn mixed_covariance(stats: &ClassStats, y: usize, alpha_hat_row: &[f64]) -> Covariance {
    let mut s = stats.covs[y].clone();
    for (j, &a) in alpha_hat_row.iter().enumerate() {
        if j != y && a != 0.0 {
            s.add_scaled(a, &stats.covs[j]);
        }
    }
    s
}

/// ICDA terms: `A_i = λ S_i`, `g_{i,c} = λ α̂_{i,c} μ_c`, `k_{i,c} = δ_{c,i} + β α_i`.
pub fn icda_terms(
    labels: &[usize],
    stats: &ClassStats,
    strengths: &StrengthMatrix,
    priors: &[f64],
    lambda: f64,
    beta: f64,
) -> Vec<SampleTerms> {
    let c = stats.classes();
    let h = stats.dim();
    assert_eq!(strengths.len(), labels.len(), "strengths must match the batch");
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let a_hat = strengths.alpha_hat.row(i);
            let (quad, linear) = if lambda != 0.0 {
                let s = mixed_covariance(stats, y, a_hat).scaled(lambda);
                let g = Matrix::from_fn(c, h, |k, d| {
                    if k == y {
                        0.0
                    } else {
                        lambda * a_hat[k] * stats.means[k][d]
                    }
                });
                (Some(s), Some(g))
            } else {
                (None, None)
            };
            let margin = beta * strengths.alpha_scalar[i];
            let constant = (0..c)
                .map(|k| {
                    if k == y {
                        0.0
                    } else if beta != 0.0 {
                        log_prior_ratio(priors, k, y) + margin
                    } else {
                        log_prior_ratio(priors, k, y)
                    }
                })
                .collect();
            SampleTerms { quad, linear, constant }
        })
        .collect()
}

/// CE through the engine (features and head gradients included).
pub fn ce_full(features: &Matrix, labels: &[usize], head: &LinearHead) -> LossOutput {
    let terms = vec![SampleTerms::zero(head.classes()); labels.len()];
    perturbed_loss(features, labels, head, &terms)
}

/// LA through the engine.
pub fn la_full(features: &Matrix, labels: &[usize], head: &LinearHead, priors: &[f64]) -> Result<LossOutput> {
    check_priors(priors, head.classes())?;
    Ok(perturbed_loss(features, labels, head, &la_terms(labels, priors)))
}

/// CE with the non-target logits shifted by `(λ/2) Δw Σ_y Δwᵀ`.
pub fn isda_loss(features: &Matrix, labels: &[usize], head: &LinearHead, stats: &ClassStats, lambda: f64) -> Result<LossOutput> {
    require_stats(stats, labels)?;
    Ok(perturbed_loss(features, labels, head, &isda_terms(labels, stats, lambda)))
}

pub fn risda_loss(
    features: &Matrix,
    labels: &[usize],
    head: &LinearHead,
    stats: &ClassStats,
    eps: &ConfusionRates,
    cfg: &RisdaConfig,
) -> Result<LossOutput> {
    require_stats(stats, labels)?;
    if eps.classes() != head.classes() {
        return Err(contract("confusion matrix size"));
    }
    Ok(perturbed_loss(features, labels, head, &risda_terms(labels, stats, eps, cfg)))
}

/// The pieces of `φ̂` before assembly.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationTerms {
    /// `P_{c,i} = Δw S_i Δwᵀ`.
    pub p: Matrix,
    /// `Δw·α̂_{i,c}μ_c`.
    pub q_kept: Matrix,
    /// `log(π_c/π_{y_i})`.
    pub delta: Matrix,
    /// `β α_i`.
    pub margin: Vector,
    pub labels: Vec<usize>,
}

impl PerturbationTerms {
    /// `φ̂ = (λ/2)P + λQ + δ + βα`, zero on the label column.
    pub fn assemble(&self, lambda: f64) -> Matrix {
        let (n, c) = self.p.shape();
        Matrix::from_fn(n, c, |i, k| {
            if k == self.labels[i] {
                0.0
            } else {
                0.5 * lambda * self.p[(i, k)] + lambda * self.q_kept[(i, k)] + self.delta[(i, k)] + self.margin[i]
            }
        })
    }
}

pub fn icda_perturbations(
    labels: &[usize],
    head: &LinearHead,
    stats: &ClassStats,
    strengths: &StrengthMatrix,
    priors: &[f64],
    beta: f64,
) -> Result<PerturbationTerms> {
    require_stats(stats, labels)?;
    check_priors(priors, head.classes())?;
    let (n, c) = (labels.len(), head.classes());
    let mut p = Matrix::zeros(n, c);
    let mut q = Matrix::zeros(n, c);
    let mut delta = Matrix::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        let a_hat = strengths.alpha_hat.row(i);
        let s = mixed_covariance(stats, y, a_hat);
        for k in (0..c).filter(|&k| k != y) {
            let dw: Vec<f64> = head.w.row(k).iter().zip(head.w.row(y)).map(|(a, b)| a - b).collect();
            p[(i, k)] = s.quad_form(&dw);
            q[(i, k)] = a_hat[k] * dot(&dw, &stats.means[k]);
            delta[(i, k)] = log_prior_ratio(priors, k, y);
        }
    }
    let margin: Vec<f64> = strengths.alpha_scalar.iter().map(|a| beta * a).collect();
    Ok(PerturbationTerms {
        p,
        q_kept: q,
        delta,
        margin: margin.into(),
        labels: labels.to_vec(),
    })
}

/// ICDA loss at iteration `t` of `total`, with `λ = (t/T)λ⁰`.
#[allow(clippy::too_many_arguments)]
pub fn icda_loss(
    features: &Matrix,
    labels: &[usize],
    head: &LinearHead,
    stats: &ClassStats,
    strengths: &StrengthMatrix,
    priors: &[f64],
    cfg: &IcdaConfig,
    t: u64,
    total: u64,
) -> Result<LossOutput> {
    let lambda = lambda_at(t, total, cfg.lambda0);
    icda_loss_at(features, labels, head, stats, strengths, priors, lambda, cfg.beta)
}

/// ICDA loss at an explicit `λ`.
#[allow(clippy::too_many_arguments)]
pub fn icda_loss_at(
    features: &Matrix,
    labels: &[usize],
    head: &LinearHead,
    stats: &ClassStats,
    strengths: &StrengthMatrix,
    priors: &[f64],
    lambda: f64,
    beta: f64,
) -> Result<LossOutput> {
    require_stats(stats, labels)?;
    check_priors(priors, head.classes())?;
    if strengths.len() != labels.len() || strengths.alpha.cols() != head.classes() {
        return Err(contract("strengths do not match the batch"));
    }
    Ok(perturbed_loss(
        features,
        labels,
        head,
        &icda_terms(labels, stats, strengths, priors, lambda, beta),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{central_difference, relative_error};
    use crate::rng::Rng;
    use crate::strength::direct_strengths;
    use approx::assert_abs_diff_eq;

    pub(crate) struct Instance {
        features: Matrix,
        labels: Vec<usize>,
        head: LinearHead,
        stats: ClassStats,
        eps: ConfusionRates,
        priors: Vec<f64>,
        strengths: StrengthMatrix,
    }

    fn instance(seed: u64, mode: CovarianceMode) -> Instance {
        let (n, c, h) = (8, 4, 6);
        let mut rng = Rng::new(seed);
        let features = Matrix::from_fn(n, h, |_, _| rng.normal());
        let labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.below(c) }).collect();
        let head = LinearHead {
            w: Matrix::from_fn(c, h, |_, _| rng.normal() * 0.5),
            b: (0..c).map(|_| rng.normal() * 0.1).collect::<Vec<_>>().into(),
        };
        let mut stats = ClassStats::new(c, h, mode);
        let cloud = Matrix::from_fn(40, h, |_, _| rng.normal());
        let cl: Vec<usize> = (0..40).map(|i| i % c).collect();
        stats.update(&cloud, &cl).unwrap();
        let mut eps = ConfusionRates::new(c);
        let preds: Vec<usize> = (0..40).map(|_| rng.below(c)).collect();
        eps.update(&preds, &cl, 1.0).unwrap();
        let counts: Vec<f64> = (0..c).map(|_| rng.uniform_in(1.0, 10.0)).collect();
        let s: f64 = counts.iter().sum();
        let priors = counts.iter().map(|x| x / s).collect();
        let strengths = direct_strengths(&features, &head, &labels, None);
        Instance {
            features,
            labels,
            head,
            stats,
            eps,
            priors,
            strengths,
        }
    }

    fn pack(head: &LinearHead, features: &Matrix) -> Vec<f64> {
        let mut v = head.w.as_slice().to_vec();
        v.extend_from_slice(&head.b);
        v.extend_from_slice(features.as_slice());
        v
    }

    fn unpack(x: &[f64], c: usize, h: usize, n: usize) -> (LinearHead, Matrix) {
        let w = Matrix::from_vec(c, h, x[..c * h].to_vec()).unwrap();
        let b: Vector = x[c * h..c * h + c].into();
        let f = Matrix::from_vec(n, h, x[c * h + c..].to_vec()).unwrap();
        (LinearHead { w, b }, f)
    }

    fn check_gradient(inst: &Instance, eval: impl Fn(&LinearHead, &Matrix) -> LossOutput) -> f64 {
        let (c, h, n) = (inst.head.classes(), inst.head.features(), inst.labels.len());
        let out = eval(&inst.head, &inst.features);
        let an = pack(&out.head_as_linear(), &out.d_features);
        let x = pack(&inst.head, &inst.features);
        let fd = central_difference(
            |p| {
                let (hd, f) = unpack(p, c, h, n);
                eval(&hd, &f).loss
            },
            &x,
            1e-5,
        );
        relative_error(&an, &fd)
    }

    impl LossOutput {
        fn head_as_linear(&self) -> LinearHead {
            LinearHead {
                w: self.head.w.clone(),
                b: self.head.b.clone(),
            }
        }
    }

    #[test]
    fn lambda_schedule() {
        assert_eq!(lambda_at(0, 100, 0.5), 0.0);
        assert_eq!(lambda_at(100, 100, 0.5), 0.5);
        assert_eq!(lambda_at(50, 100, 0.5), 0.25);
    }

    #[test]
    #[should_panic]
    fn lambda_rejects_overrun() {
        lambda_at(5, 4, 1.0);
    }

    #[test]
    fn ce_examples() {
        let l = ce_loss(&Matrix::zeros(1, 4), &[2]);
        assert_abs_diff_eq!(l.loss, 4f64.ln(), epsilon = 1e-15);
        let l = ce_loss(&Matrix::from_rows(&[vec![100.0, 0.0]]).unwrap(), &[0]);
        assert!(l.loss < 1e-40);
        let mut rng = Rng::new(9);
        let logits = Matrix::from_fn(5, 3, |_, _| rng.normal() * 3.0);
        let labels = [0, 2, 1, 1, 0];
        let l = ce_loss(&logits, &labels);
        let mut naive = 0.0;
        for i in 0..5 {
            let z: f64 = logits.row(i).iter().map(|u| u.exp()).sum();
            naive += -(logits[(i, labels[i])].exp() / z).ln();
            for k in 0..3 {
                let q = logits[(i, k)].exp() / z;
                let t = if k == labels[i] { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(l.d_logits[(i, k)], (q - t) / 5.0, epsilon = 1e-14);
            }
        }
        assert_abs_diff_eq!(l.loss, naive / 5.0, epsilon = 1e-12);
    }

    #[test]
    fn la_examples() {
        let mut rng = Rng::new(10);
        let logits = Matrix::from_fn(6, 4, |_, _| rng.normal());
        let labels = [0, 1, 2, 3, 0, 1];
        let bal = la_loss(&logits, &labels, &[0.25; 4]).unwrap();
        let ce = ce_loss(&logits, &labels);
        assert_abs_diff_eq!(bal.loss, ce.loss, epsilon = 1e-15);

        let two = Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
        assert!(la_loss(&two, &[1], &[0.9, 0.1]).unwrap().loss > ce_loss(&two, &[1]).loss);

        let pri = [0.4, 0.3, 0.2, 0.1];
        let la = la_loss(&logits, &labels, &pri).unwrap();
        let shifted = Matrix::from_fn(6, 4, |i, k| logits[(i, k)] + pri[k].ln());
        assert_abs_diff_eq!(la.loss, ce_loss(&shifted, &labels).loss, epsilon = 1e-12);
        assert!(la_loss(&logits, &labels, &[0.5, 0.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn engine_matches_logit_forms() {
        for seed in 0..20 {
            let inst = instance(seed, CovarianceMode::Full);
            let logits = inst.head.logits(&inst.features);
            let a = ce_full(&inst.features, &inst.labels, &inst.head);
            let b = ce_loss(&logits, &inst.labels);
            assert_abs_diff_eq!(a.loss, b.loss, epsilon = 1e-12);
            assert!(a.d_logits.max_abs_diff(&b.d_logits) < 1e-14);
            let a = la_full(&inst.features, &inst.labels, &inst.head, &inst.priors).unwrap();
            let b = la_loss(&logits, &inst.labels, &inst.priors).unwrap();
            assert_abs_diff_eq!(a.loss, b.loss, epsilon = 1e-12);
            for i in 0..8 {
                assert_abs_diff_eq!(a.per_sample[i], b.per_sample[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn isda_identity_covariance_by_hand() {
        let head = LinearHead {
            w: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap(),
            b: Vector::zeros(2),
        };
        let mut stats = ClassStats::new(2, 2, CovarianceMode::Full);
        stats.counts = vec![1, 1];
        stats.covs[0] = Covariance::Full(Matrix::identity(2));
        let f = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let out = isda_loss(&f, &[0], &head, &stats, 0.4).unwrap();
        // ‖w_1 − w_0‖² = 5, φ = 0.2 · 5 = 1
        assert_abs_diff_eq!(out.phi[(0, 1)], 1.0, epsilon = 1e-15);
        let z: f64 = 1.0 - 0.5 + 1.0;
        assert_abs_diff_eq!(out.loss, (1.0 + z.exp()).ln(), epsilon = 1e-15);
        let zero = isda_loss(&f, &[0], &head, &stats, 0.0).unwrap();
        assert_eq!(zero.loss, ce_full(&f, &[0], &head).loss);
        stats.counts = vec![0, 1];
        assert!(isda_loss(&f, &[0], &head, &stats, 0.4).is_err());
    }

    #[test]
    fn risda_single_confusing_class() {
        let head = LinearHead {
            w: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            b: Vector::zeros(3),
        };
        let mut stats = ClassStats::new(3, 2, CovarianceMode::Diagonal);
        stats.counts = vec![1, 1, 1];
        stats.means[2] = vec![3.0, -1.0].into();
        let mut eps = ConfusionRates::new(3);
        eps.rates[(0, 2)] = 1.0;
        let cfg = RisdaConfig { alpha: 0.5, beta: 0.0 };
        let f = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let out = risda_loss(&f, &[0], &head, &stats, &eps, &cfg).unwrap();
        // Δw_{1,0} = (−1, 1): 0.5·(−3 − 1) = −2; Δw_{2,0} = (0, 1): 0.5·(−1) = −0.5
        assert_abs_diff_eq!(out.phi[(0, 1)], -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.phi[(0, 2)], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn icda_perturbations_match_triple_loop() {
        for seed in 0..10 {
            let inst = instance(seed, CovarianceMode::Full);
            let (lambda, beta) = (0.7, 0.1);
            let pt = icda_perturbations(&inst.labels, &inst.head, &inst.stats, &inst.strengths, &inst.priors, beta).unwrap();
            let phi = pt.assemble(lambda);
            let out = icda_loss_at(
                &inst.features,
                &inst.labels,
                &inst.head,
                &inst.stats,
                &inst.strengths,
                &inst.priors,
                lambda,
                beta,
            )
            .unwrap();
            let (c, h) = (4, 6);
            for (i, &y) in inst.labels.iter().enumerate() {
                for k in 0..c {
                    if k == y {
                        assert_eq!(phi[(i, k)], 0.0);
                        continue;
                    }
                    let mut quad = 0.0;
                    let mut lin = 0.0;
                    for a in 0..h {
                        let da = inst.head.w[(k, a)] - inst.head.w[(y, a)];
                        lin += da * inst.strengths.alpha_hat[(i, k)] * inst.stats.means[k][a];
                        for b in 0..h {
                            let db = inst.head.w[(k, b)] - inst.head.w[(y, b)];
                            let mut s = inst.stats.covs[y].to_full()[(a, b)];
                            for j in 0..c {
                                if j != y {
                                    s += inst.strengths.alpha_hat[(i, j)] * inst.stats.covs[j].to_full()[(a, b)];
                                }
                            }
                            quad += da * s * db;
                        }
                    }
                    assert!(quad >= 0.0);
                    let expect = lambda / 2.0 * quad
                        + lambda * lin
                        + (inst.priors[k] / inst.priors[y]).ln()
                        + beta * inst.strengths.alpha_scalar[i];
                    assert_abs_diff_eq!(phi[(i, k)], expect, epsilon = 1e-12);
                    assert_abs_diff_eq!(out.phi[(i, k)], expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn reductions() {
        for seed in 0..100 {
            let inst = instance(seed, CovarianceMode::Full);
            let (f, y, hd) = (&inst.features, &inst.labels, &inst.head);
            let icda0 = icda_loss_at(f, y, hd, &inst.stats, &inst.strengths, &inst.priors, 0.0, 0.0).unwrap();
            let la = la_loss(&hd.logits(f), y, &inst.priors).unwrap();
            for i in 0..8 {
                assert_abs_diff_eq!(icda0.per_sample[i], la.per_sample[i], epsilon = 1e-12);
            }
            let uniform = [0.25; 4];
            let zero_alpha = StrengthMatrix::zeros(8, 4);
            let icda_isda = icda_loss_at(f, y, hd, &inst.stats, &zero_alpha, &uniform, 0.6, 0.0).unwrap();
            let isda = isda_loss(f, y, hd, &inst.stats, 0.6).unwrap();
            let risda = risda_loss(
                f,
                y,
                hd,
                &inst.stats,
                &ConfusionRates::new(4),
                &RisdaConfig { alpha: 0.0, beta: 0.3 },
            )
            .unwrap();
            for i in 0..8 {
                assert_abs_diff_eq!(icda_isda.per_sample[i], isda.per_sample[i], epsilon = 1e-12);
                assert_abs_diff_eq!(risda.per_sample[i], isda.per_sample[i], epsilon = 1e-12);
            }
            // ICDA(λ=β=0) and LA through the engine are bitwise equal
            let la_engine = la_full(f, y, hd, &inst.priors).unwrap();
            assert_eq!(la_engine, icda0);
        }
    }

    #[test]
    fn gradients_match_finite_differences_both_modes() {
        for mode in [CovarianceMode::Full, CovarianceMode::Diagonal] {
            for seed in 0..20 {
                let inst = instance(seed, mode);
                let errs = [
                    check_gradient(&inst, |hd, f| ce_full(f, &inst.labels, hd)),
                    check_gradient(&inst, |hd, f| la_full(f, &inst.labels, hd, &inst.priors).unwrap()),
                    check_gradient(&inst, |hd, f| isda_loss(f, &inst.labels, hd, &inst.stats, 0.8).unwrap()),
                    check_gradient(&inst, |hd, f| {
                        risda_loss(f, &inst.labels, hd, &inst.stats, &inst.eps, &RisdaConfig::default()).unwrap()
                    }),
                    check_gradient(&inst, |hd, f| {
                        icda_loss_at(f, &inst.labels, hd, &inst.stats, &inst.strengths, &inst.priors, 0.9, 0.1).unwrap()
                    }),
                ];
                for (k, e) in errs.iter().enumerate() {
                    assert!(*e < 1e-5, "mode {mode:?} seed {seed} loss {k} rel err {e}");
                }
            }
        }
    }

    #[test]
    fn clamp_blocks_perturbation_gradient() {
        let inst = instance(3, CovarianceMode::Full);
        let out = icda_loss_at(
            &inst.features,
            &inst.labels,
            &inst.head,
            &inst.stats,
            &inst.strengths,
            &inst.priors,
            0.5,
            1000.0,
        )
        .unwrap();
        assert!(out.clamp_count() > 0);
        assert!(out.loss.is_finite());
        assert!(out.phi.as_slice().iter().all(|&p| p <= PHI_CLAMP));
    }

    #[test]
    fn monotone_in_logits_and_beta() {
        let inst = instance(5, CovarianceMode::Full);
        let base = icda_loss_at(&inst.features, &inst.labels, &inst.head, &inst.stats, &inst.strengths, &inst.priors, 0.5, 0.1)
            .unwrap();
        // loss decreases in the target logit, increases in the others
        for i in 0..8 {
            let y = inst.labels[i];
            assert!(base.d_logits[(i, y)] < 0.0);
            for k in (0..4).filter(|&k| k != y) {
                assert!(base.d_logits[(i, k)] > 0.0);
            }
        }
        let higher = icda_loss_at(&inst.features, &inst.labels, &inst.head, &inst.stats, &inst.strengths, &inst.priors, 0.5, 0.2)
            .unwrap();
        assert!(higher.loss > base.loss);
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("focal".parse::<Method>().is_err());
    }
}
