//! Explicit Monte-Carlo realization of the feature augmentation, used to check
//! the closed-form upper bound.
//!
//! For sample `i` and class `c ≠ y_i`, augmented features are drawn from
//! `N(h_i + λ α_{i,c} μ_c, λ (Σ_{y_i} + α_{i,c} Σ_c))` and weighted by
//! `Ñ_{i,c} = α_{i,c} / π_{y_i}`. Both the Monte-Carlo estimate and the bound
//! are normalized by `Ñ = Σ Ñ_{i,c}`.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::exec::Exec;
use crate::model::LinearHead;
use crate::numerics::{dot, log_sum_exp, Matrix, MvnSampler, Vector};
use crate::rng::Rng;
use crate::stats::{ClassStats, Covariance, CovarianceMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    /// Draws per `(i, c)` pair.
    pub samples: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            samples: 100_000,
            seed: 0,
        }
    }
}

/// Mean and covariance of the augmentation distribution for one pair.
fn augmentation_law(h: &[f64], y: usize, c: usize, alpha: f64, lambda: f64, stats: &ClassStats) -> (Vec<f64>, Matrix) {
    let mean: Vec<f64> = h.iter().zip(stats.means[c].iter()).map(|(x, m)| x + lambda * alpha * m).collect();
    let mut cov = stats.covs[y].to_full();
    cov.add_scaled(alpha, &stats.covs[c].to_full());
    cov.scale(lambda);
    (mean, cov)
}

/// One augmented feature vector for sample `h` (label `y`) toward class `c`.
pub fn sample_augmented(
    h: &[f64],
    y: usize,
    c: usize,
    alpha: f64,
    lambda: f64,
    stats: &ClassStats,
    rng: &mut Rng,
) -> Result<Vector> {
    if c == y {
        return Err(contract("augmentation target must differ from the label"));
    }
    if lambda == 0.0 {
        return Ok(h.into());
    }
    let (mean, cov) = augmentation_law(h, y, c, alpha, lambda, stats);
    Ok(MvnSampler::new(&mean, &cov)?.sample(rng))
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub se: f64,
}

/// `(sample, class, weight)` triples.
type PairWeights = Vec<(usize, usize, f64)>;

fn pair_weights(labels: &[usize], alpha: &Matrix, priors: &[f64]) -> Result<(PairWeights, f64)> {
    let c = alpha.cols();
    let mut pairs = Vec::new();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for k in (0..c).filter(|&k| k != y) {
            let w = alpha[(i, k)] / priors[y];
            if w > 0.0 {
                pairs.push((i, k, w));
                total += w;
            }
        }
    }
    if !(total > 0.0) {
        return Err(contract("all augmentation weights are zero"));
    }
    Ok((pairs, total))
}

fn check_inputs(features: &Matrix, labels: &[usize], head: &LinearHead, alpha: &Matrix, priors: &[f64]) -> Result<()> {
    if features.rows() != labels.len() || alpha.rows() != labels.len() {
        return Err(contract("batch sizes disagree"));
    }
    if alpha.cols() != head.classes() || priors.len() != head.classes() {
        return Err(contract("class counts disagree"));
    }
    if priors.iter().any(|&p| !(p > 0.0)) {
        return Err(contract("priors must be positive"));
    }
    if alpha.as_slice().iter().any(|&a| a < 0.0) {
        return Err(contract("strengths must be non-negative"));
    }
    Ok(())
}

/// `Ñ`-weighted Monte-Carlo estimate of the expected augmented CE loss.
///
/// Pairs run in parallel under `exec`; pair `k` draws from `rng.stream(k)`,
/// so the result does not depend on the execution mode.
#[allow(clippy::too_many_arguments)]
pub fn mc_expected_loss(
    features: &Matrix,
    labels: &[usize],
    head: &LinearHead,
    stats: &ClassStats,
    alpha: &Matrix,
    priors: &[f64],
    lambda: f64,
    samples: usize,
    rng: &Rng,
    exec: Exec,
) -> Result<McEstimate> {
    check_inputs(features, labels, head, alpha, priors)?;
    if samples < 2 {
        return Err(contract("at least two draws per pair are needed for a standard error"));
    }
    let (pairs, total) = pair_weights(labels, alpha, priors)?;
    let classes = head.classes();
    let per_pair: Vec<Result<(f64, f64)>> = exec.map_range(pairs.len(), |k| {
        let (i, c, _) = pairs[k];
        let y = labels[i];
        let h = features.row(i);
        if lambda == 0.0 {
            let u = head.logits_one(h);
            return Ok((log_sum_exp(&u) - u[y], 0.0));
        }
        let (mean, cov) = augmentation_law(h, y, c, alpha[(i, c)], lambda, stats);
        let sampler = MvnSampler::new(&mean, &cov)?;
        // logits = (W m + b) + (W L) z
        let base = head.logits_one(sampler.mean());
        let wl = sampler.factor().map(|l| head.w.matmul(l));
        let mut r = rng.stream(k as u64);
        let hd = mean.len();
        let mut z = vec![0.0; hd];
        let mut u = vec![0.0; classes];
        let (mut m, mut s) = (0.0, 0.0);
        for t in 0..samples {
            u.copy_from_slice(&base);
            if let Some(wl) = &wl {
                for zi in z.iter_mut() {
                    *zi = r.normal();
                }
                for (uj, row) in u.iter_mut().zip(wl.row_iter()) {
                    *uj += dot(row, &z);
                }
            }
            let loss = log_sum_exp(&u) - u[y];
            let d = loss - m;
            m += d / (t + 1) as f64;
            s += d * (loss - m);
        }
        Ok((m, s / (samples - 1) as f64))
    });
    let mut est = 0.0;
    let mut var = 0.0;
    for ((_, _, w), r) in pairs.iter().zip(per_pair) {
        let (m, v) = r?;
        let f = w / total;
        est += f * m;
        var += f * f * v;
    }
    Ok(McEstimate {
        estimate: est,
        se: (var / samples as f64).sqrt(),
    })
}

/// Closed-form upper bound on the expected augmented loss, with the full mean
/// term and `1/π` weights. Not clamped.
pub fn surrogate_upper_bound(
    features: &Matrix,
    labels: &[usize],
    head: &LinearHead,
    stats: &ClassStats,
    alpha: &Matrix,
    priors: &[f64],
    lambda: f64,
) -> Result<f64> {
    check_inputs(features, labels, head, alpha, priors)?;
    let (pairs, total) = pair_weights(labels, alpha, priors)?;
    let classes = head.classes();
    let mut bound = 0.0;
    for &(i, c, w) in &pairs {
        let y = labels[i];
        let a = alpha[(i, c)];
        let u = head.logits_one(features.row(i));
        let mut z = Vec::with_capacity(classes);
        z.push(0.0);
        for j in (0..classes).filter(|&j| j != y) {
            let dw: Vec<f64> = head.w.row(j).iter().zip(head.w.row(y)).map(|(p, q)| p - q).collect();
            let mut t = u[j] - u[y];
            if lambda != 0.0 {
                let p = stats.covs[y].quad_form(&dw) + a * stats.covs[c].quad_form(&dw);
                let q = a * dot(&dw, &stats.means[c]);
                t += 0.5 * lambda * p + lambda * q;
            }
            z.push(t);
        }
        bound += w / total * log_sum_exp(&z);
    }
    Ok(bound)
}

/// One bound-check record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub instance_seed: u64,
    pub lambda: f64,
    pub m: usize,
    pub mc_estimate: f64,
    pub se: f64,
    pub bound: f64,
    pub pass: bool,
}

/// A random bound-check instance: `C ≤ 5`, `H ≤ 8`, PSD covariances, strengths in (0, 1].
#[derive(Clone, Debug)]
pub struct BoundInstance {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub head: LinearHead,
    pub stats: ClassStats,
    pub alpha: Matrix,
    pub priors: Vec<f64>,
}

impl BoundInstance {
    pub fn random(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let c = 2 + rng.below(4);
        let h = 2 + rng.below(7);
        let n = 2 + rng.below(3);
        let features = Matrix::from_fn(n, h, |_, _| rng.normal());
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let head = LinearHead {
            w: Matrix::from_fn(c, h, |_, _| rng.normal() * 0.6),
            b: (0..c).map(|_| rng.normal() * 0.2).collect::<Vec<_>>().into(),
        };
        let mut stats = ClassStats::new(c, h, CovarianceMode::Full);
        for k in 0..c {
            stats.means[k] = (0..h).map(|_| rng.normal()).collect::<Vec<_>>().into();
            let a = Matrix::from_fn(h, h, |_, _| rng.normal());
            stats.covs[k] = Covariance::Full(a.matmul_t(&a).scaled(0.5 / h as f64));
            stats.counts[k] = 1;
        }
        let alpha = Matrix::from_fn(n, c, |i, k| {
            if k == labels[i] {
                0.0
            } else {
                1.0 - rng.uniform()
            }
        });
        let raw: Vec<f64> = (0..c).map(|_| rng.uniform_in(0.5, 5.0)).collect();
        let s: f64 = raw.iter().sum();
        BoundInstance {
            features,
            labels,
            head,
            stats,
            alpha,
            priors: raw.iter().map(|x| x / s).collect(),
        }
    }

    pub fn check(&self, instance_seed: u64, lambda: f64, samples: usize, exec: Exec) -> Result<VerificationRecord> {
        let rng = Rng::new(instance_seed).stream(lambda.to_bits());
        let mc = mc_expected_loss(
            &self.features,
            &self.labels,
            &self.head,
            &self.stats,
            &self.alpha,
            &self.priors,
            lambda,
            samples,
            &rng,
            exec,
        )?;
        let bound = self.bound(lambda)?;
        let pass = if lambda == 0.0 {
            (mc.estimate - bound).abs() <= 1e-10
        } else {
            mc.estimate <= bound + 3.0 * mc.se
        };
        Ok(VerificationRecord {
            instance_seed,
            lambda,
            m: samples,
            mc_estimate: mc.estimate,
            se: mc.se,
            bound,
            pass,
        })
    }

    pub fn bound(&self, lambda: f64) -> Result<f64> {
        surrogate_upper_bound(
            &self.features,
            &self.labels,
            &self.head,
            &self.stats,
            &self.alpha,
            &self.priors,
            lambda,
        )
    }
}

/// Empirical `E[exp(tX)]`, `X ~ N(μ, σ²)`, with its standard error and the
/// closed form `exp(tμ + σ²t²/2)`.
pub fn mgf_check(mu: f64, sigma: f64, t: f64, samples: usize, rng: &mut Rng) -> (f64, f64, f64) {
    let (mut m, mut s) = (0.0, 0.0);
    for k in 0..samples {
        let v = (t * (mu + sigma * rng.normal())).exp();
        let d = v - m;
        m += d / (k + 1) as f64;
        s += d * (v - m);
    }
    let se = (s / (samples - 1) as f64 / samples as f64).sqrt();
    (m, se, (t * mu + 0.5 * sigma * sigma * t * t).exp())
}
