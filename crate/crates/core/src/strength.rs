//! Augmentation strengths: the per-class cosine matrix, the per-sample scalar
//! (direct and noisy-label forms), the ten training characteristics, and the
//! small network that maps characteristics to a strength.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::LinearHead;
use crate::numerics::{cosine, dot, norm, softmax, Matrix, Vector};
use crate::rng::Rng;

pub const NUM_CHARACTERISTICS: usize = 10;
pub const STRENGTH_HIDDEN: usize = 100;

/// Per-batch strengths. `alpha[(i, y_i)]` is always zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrengthMatrix {
    pub alpha: Matrix,
    pub alpha_hat: Matrix,
    pub alpha_scalar: Vector,
}

impl StrengthMatrix {
    /// All-zero strengths for a batch of `n` samples over `classes` classes.
    pub fn zeros(n: usize, classes: usize) -> Self {
        StrengthMatrix {
            alpha: Matrix::zeros(n, classes),
            alpha_hat: Matrix::zeros(n, classes),
            alpha_scalar: Vector::zeros(n),
        }
    }

    /// Builds `alpha_hat = alpha / (C−1)` from a raw matrix.
    pub fn from_parts(alpha: Matrix, alpha_scalar: Vector) -> Self {
        let c = alpha.cols();
        let alpha_hat = alpha.scaled(1.0 / (c.max(2) - 1) as f64);
        StrengthMatrix {
            alpha,
            alpha_hat,
            alpha_scalar,
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_scalar(mut self, alpha_scalar: Vector) -> Self {
        self.alpha_scalar = alpha_scalar;
        self
    }
}

fn check_shapes(features: &Matrix, head: &LinearHead, labels: &[usize]) {
    assert_eq!(features.rows(), labels.len(), "features and labels differ in length");
    assert_eq!(features.cols(), head.features(), "feature width mismatch");
    assert!(labels.iter().all(|&y| y < head.classes()), "label out of range");
}

/// `alpha[i][c] = max(cos(h_i, w_c), 0)` for `c ≠ y_i`; zero on the label.
pub fn alpha_matrix(features: &Matrix, head: &LinearHead, labels: &[usize]) -> Matrix {
    check_shapes(features, head, labels);
    let c = head.classes();
    Matrix::from_fn(features.rows(), c, |i, k| {
        if k == labels[i] {
            0.0
        } else {
            cosine(features.row(i), head.w.row(k)).max(0.0)
        }
    })
}

/// `α_i = (1 − cos(h_i, w_{y_i})) / 2`.
pub fn alpha_scalar_direct(features: &Matrix, head: &LinearHead, labels: &[usize]) -> Vector {
    check_shapes(features, head, labels);
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| (1.0 - cosine(features.row(i), head.w.row(y))) / 2.0)
        .collect::<Vec<_>>()
        .into()
}

/// Noisy-label rule: `a = (1 − cosθ)/2`, negated once it reaches `tau`.
pub fn alpha_scalar_noisy(cos_theta: f64, tau: f64) -> f64 {
    assert!(tau > 0.0 && tau <= 1.0, "tau must lie in (0, 1]");
    let a = (1.0 - cos_theta) / 2.0;
    if a < tau {
        a
    } else {
        -a
    }
}

/// Matrix plus direct (or noisy-rule) scalar strengths for a batch.
pub fn direct_strengths(features: &Matrix, head: &LinearHead, labels: &[usize], noisy_tau: Option<f64>) -> StrengthMatrix {
    let alpha = alpha_matrix(features, head, labels);
    let scalar: Vec<f64> = match noisy_tau {
        None => alpha_scalar_direct(features, head, labels).into_vec(),
        Some(tau) => labels
            .iter()
            .enumerate()
            .map(|(i, &y)| alpha_scalar_noisy(cosine(features.row(i), head.w.row(y)), tau))
            .collect(),
    };
    StrengthMatrix::from_parts(alpha, scalar.into())
}

/// Per-class exponential moving averages of loss and margin (the baselines of
/// ζ₆ and ζ₈). A class takes its first batch mean directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEma {
    pub decay: f64,
    pub loss: Vec<f64>,
    pub margin: Vec<f64>,
    pub seen: Vec<bool>,
}

impl ClassEma {
    pub fn new(classes: usize, decay: f64) -> Self {
        assert!(decay > 0.0 && decay <= 1.0, "EMA decay must lie in (0, 1]");
        ClassEma {
            decay,
            loss: vec![0.0; classes],
            margin: vec![0.0; classes],
            seen: vec![false; classes],
        }
    }

    /// Folds one batch of per-sample losses and margins into the tables.
    pub fn update(&mut self, losses: &[f64], margins: &[f64], labels: &[usize]) {
        let c = self.loss.len();
        let mut sum_l = vec![0.0; c];
        let mut sum_m = vec![0.0; c];
        let mut n = vec![0usize; c];
        for ((&l, &m), &y) in losses.iter().zip(margins).zip(labels) {
            sum_l[y] += l;
            sum_m[y] += m;
            n[y] += 1;
        }
        for k in 0..c {
            if n[k] == 0 {
                continue;
            }
            let bl = sum_l[k] / n[k] as f64;
            let bm = sum_m[k] / n[k] as f64;
            if self.seen[k] {
                self.loss[k] = (1.0 - self.decay) * self.loss[k] + self.decay * bl;
                self.margin[k] = (1.0 - self.decay) * self.margin[k] + self.decay * bm;
            } else {
                self.loss[k] = bl;
                self.margin[k] = bm;
                self.seen[k] = true;
            }
        }
    }
}

/// `q_y − max_{c≠y} q_c`.
pub fn margin(q: &[f64], y: usize) -> f64 {
    let other = q
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    q[y] - other
}

/// Sign-preserving `x / (1 + |x|)`.
pub fn squash(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

/// Raw characteristics, one row of ten per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Characteristics {
    pub raw: Matrix,
    /// Per-sample CE loss and margin, for updating [`ClassEma`].
    pub losses: Vec<f64>,
    pub margins: Vec<f64>,
}

impl Characteristics {
    /// Network input: losses (ζ₁, ζ₆, ζ₇) and the squared weight norm ζ₉ squashed.
    pub fn squashed(&self) -> Matrix {
        let mut m = self.raw.clone();
        for i in 0..m.rows() {
            for k in [0, 5, 6, 8] {
                m[(i, k)] = squash(m[(i, k)]);
            }
        }
        m
    }
}

/// Computes ζ₁..ζ₁₀ for each sample from the current batch state.
pub fn extract_characteristics(
    features: &Matrix,
    logits: &Matrix,
    labels: &[usize],
    head: &LinearHead,
    priors: &[f64],
    ema: &ClassEma,
) -> Characteristics {
    check_shapes(features, head, labels);
    assert_eq!(logits.rows(), labels.len(), "logits and labels differ in length");
    let c = head.classes();
    let log2 = 2f64.ln();
    let mut raw = Matrix::zeros(labels.len(), NUM_CHARACTERISTICS);
    let mut losses = Vec::with_capacity(labels.len());
    let mut margins = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let q = softmax(logits.row(i));
        let loss = -q[y].max(f64::MIN_POSITIVE).ln();
        let m = margin(&q, y);
        let grad_norm = (0..c)
            .map(|k| {
                let t = if k == y { 1.0 } else { 0.0 };
                (t - q[k]).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        let entropy = -q.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln() / log2).sum::<f64>();
        let w_y = head.w.row(y);
        let row = [
            loss,
            m,
            grad_norm,
            entropy.max(0.0),
            priors[y],
            ema.loss[y],
            loss - ema.loss[y],
            m - ema.margin[y],
            dot(w_y, w_y),
            cosine(features.row(i), w_y),
        ];
        raw.row_mut(i).copy_from_slice(&row);
        losses.push(loss);
        margins.push(m);
    }
    Characteristics { raw, losses, margins }
}

/// Two-layer perceptron `ζ → ReLU(W₁ζ + b₁) → σ(w₂·r + b₂)`.
///
/// Gradients are returned as a `StrengthNet` of the same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrengthNet {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Vector,
    pub b2: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl StrengthNet {
    pub fn zeros() -> Self {
        StrengthNet {
            w1: Matrix::zeros(STRENGTH_HIDDEN, NUM_CHARACTERISTICS),
            b1: Vector::zeros(STRENGTH_HIDDEN),
            w2: Vector::zeros(STRENGTH_HIDDEN),
            b2: 0.0,
        }
    }

    /// Uniform fan-in hidden layer; zero output layer, so every α starts at 0.5.
    pub fn init(rng: &mut Rng) -> Self {
        let bound = 1.0 / (NUM_CHARACTERISTICS as f64).sqrt();
        let mut net = StrengthNet::zeros();
        net.w1 = Matrix::from_fn(STRENGTH_HIDDEN, NUM_CHARACTERISTICS, |_, _| rng.uniform_in(-bound, bound));
        net
    }

    fn hidden(&self, zeta: &[f64]) -> Vec<f64> {
        assert_eq!(zeta.len(), NUM_CHARACTERISTICS, "characteristics width");
        self.w1
            .mul_vec(zeta)
            .into_iter()
            .zip(self.b1.iter())
            .map(|(a, b)| (a + b).max(0.0))
            .collect()
    }

    pub fn forward_one(&self, zeta: &[f64]) -> f64 {
        let r = self.hidden(zeta);
        sigmoid(dot(&self.w2, &r) + self.b2)
    }

    pub fn forward(&self, zeta: &Matrix) -> Vector {
        zeta.row_iter().map(|z| self.forward_one(z)).collect::<Vec<_>>().into()
    }

    /// Gradient of `Σ_i d_alpha[i] · α_i` with respect to every parameter.
    pub fn backward(&self, zeta: &Matrix, d_alpha: &[f64]) -> StrengthNet {
        assert_eq!(zeta.rows(), d_alpha.len(), "one upstream value per sample");
        let mut g = StrengthNet::zeros();
        for (z, &da) in zeta.row_iter().zip(d_alpha) {
            if da == 0.0 {
                continue;
            }
            let r = self.hidden(z);
            let a = sigmoid(dot(&self.w2, &r) + self.b2);
            let ds = da * a * (1.0 - a);
            g.b2 += ds;
            for k in 0..STRENGTH_HIDDEN {
                g.w2[k] += ds * r[k];
                if r[k] > 0.0 {
                    let dp = ds * self.w2[k];
                    g.b1[k] += dp;
                    for (gw, &zj) in g.w1.row_mut(k).iter_mut().zip(z) {
                        *gw += dp * zj;
                    }
                }
            }
        }
        g
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &StrengthNet) {
        self.w1.add_scaled(s, &other.w1);
        crate::numerics::axpy(s, &other.b1, &mut self.b1);
        crate::numerics::axpy(s, &other.w2, &mut self.w2);
        self.b2 += s * other.b2;
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.w1.as_slice().to_vec();
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let n1 = STRENGTH_HIDDEN * NUM_CHARACTERISTICS;
        if flat.len() != n1 + 2 * STRENGTH_HIDDEN + 1 {
            return Err(contract("strength net parameter count"));
        }
        let (w1, rest) = flat.split_at(n1);
        let (b1, rest) = rest.split_at(STRENGTH_HIDDEN);
        let (w2, b2) = rest.split_at(STRENGTH_HIDDEN);
        Ok(StrengthNet {
            w1: Matrix::from_vec(STRENGTH_HIDDEN, NUM_CHARACTERISTICS, w1.to_vec())?,
            b1: b1.into(),
            w2: w2.into(),
            b2: b2[0],
        })
    }

    pub fn norm(&self) -> f64 {
        norm(&self.to_flat())
    }
}

/// Writes one CSV row per sample: `epoch,sample,label,zeta1..zeta10,alpha`.
pub fn write_characteristics_csv<W: Write>(
    mut out: W,
    epoch: u64,
    labels: &[usize],
    chars: &Characteristics,
    alpha: &[f64],
    header: bool,
) -> Result<()> {
    if header {
        write!(out, "epoch,sample,label")?;
        for k in 1..=NUM_CHARACTERISTICS {
            write!(out, ",zeta{k}")?;
        }
        writeln!(out, ",alpha")?;
    }
    for (i, &y) in labels.iter().enumerate() {
        write!(out, "{epoch},{i},{y}")?;
        for v in chars.raw.row(i) {
            write!(out, ",{v}")?;
        }
        writeln!(out, ",{}", alpha[i])?;
    }
    Ok(())
}
