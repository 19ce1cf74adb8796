//! Streaming per-class feature statistics and confusion rates.
//!
//! Means and covariances are merged batch by batch with the exact pooled
//! formulas (population convention, divide by the count), so the streamed
//! result equals a direct computation over all samples seen.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{axpy, dot, Matrix, Vector};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    #[default]
    Full,
    Diagonal,
}

/// A covariance matrix, stored densely or as its diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariance {
    Full(Matrix),
    Diagonal(Vector),
}

impl Covariance {
    pub fn zeros(mode: CovarianceMode, dim: usize) -> Self {
        match mode {
            CovarianceMode::Full => Covariance::Full(Matrix::zeros(dim, dim)),
            CovarianceMode::Diagonal => Covariance::Diagonal(Vector::zeros(dim)),
        }
    }

    pub fn identity(mode: CovarianceMode, dim: usize) -> Self {
        match mode {
            CovarianceMode::Full => Covariance::Full(Matrix::identity(dim)),
            CovarianceMode::Diagonal => Covariance::Diagonal(Vector::from(vec![1.0; dim])),
        }
    }

    pub fn mode(&self) -> CovarianceMode {
        match self {
            Covariance::Full(_) => CovarianceMode::Full,
            Covariance::Diagonal(_) => CovarianceMode::Diagonal,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Full(m) => m.rows(),
            Covariance::Diagonal(d) => d.len(),
        }
    }

    /// `vᵀ Σ v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        match self {
            Covariance::Full(m) => m.quad_form(v),
            Covariance::Diagonal(d) => d.iter().zip(v).map(|(s, x)| s * x * x).sum(),
        }
    }

    /// `Σ v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Covariance::Full(m) => m.mul_vec(v),
            Covariance::Diagonal(d) => d.iter().zip(v).map(|(s, x)| s * x).collect(),
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &Covariance) {
        match (self, other) {
            (Covariance::Full(a), Covariance::Full(b)) => a.add_scaled(s, b),
            (Covariance::Diagonal(a), Covariance::Diagonal(b)) => axpy(s, b, a),
            _ => panic!("mixed covariance modes"),
        }
    }

    pub fn scaled(&self, s: f64) -> Covariance {
        match self {
            Covariance::Full(m) => Covariance::Full(m.scaled(s)),
            Covariance::Diagonal(d) => Covariance::Diagonal(d.iter().map(|x| x * s).collect::<Vec<_>>().into()),
        }
    }

    pub fn to_full(&self) -> Matrix {
        match self {
            Covariance::Full(m) => m.clone(),
            Covariance::Diagonal(d) => Matrix::diag(d),
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            Covariance::Full(m) => m.diagonal(),
            Covariance::Diagonal(d) => d.to_vec(),
        }
    }

    /// Flat parameter view: all `H²` entries in full mode, `H` in diagonal mode.
    pub fn as_slice(&self) -> &[f64] {
        match self {
            Covariance::Full(m) => m.as_slice(),
            Covariance::Diagonal(d) => d,
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            Covariance::Full(m) => m.as_mut_slice(),
            Covariance::Diagonal(d) => d,
        }
    }

    /// Symmetrize and clamp to the PSD cone (diagonal mode: entries >= 0).
    pub fn psd_repair(&mut self) {
        match self {
            Covariance::Full(m) => m.psd_repair(),
            Covariance::Diagonal(d) => d.iter_mut().for_each(|x| *x = x.max(0.0)),
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        match self {
            Covariance::Full(m) => m.min_eigenvalue(),
            Covariance::Diagonal(d) => d.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Per-class running mean, covariance and count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub means: Vec<Vector>,
    pub covs: Vec<Covariance>,
    pub counts: Vec<u64>,
}

/// Direct (population) mean and covariance of the rows `idx` of `features`.
pub fn batch_moments(features: &Matrix, idx: &[usize], mode: CovarianceMode) -> (Vector, Covariance) {
    let h = features.cols();
    let m = idx.len() as f64;
    let mut mean = vec![0.0; h];
    for &i in idx {
        axpy(1.0, features.row(i), &mut mean);
    }
    mean.iter_mut().for_each(|x| *x /= m);
    let mut cov = Covariance::zeros(mode, h);
    let mut d = vec![0.0; h];
    for &i in idx {
        for (dk, (x, mu)) in d.iter_mut().zip(features.row(i).iter().zip(&mean)) {
            *dk = x - mu;
        }
        match &mut cov {
            Covariance::Full(s) => {
                for a in 0..h {
                    for b in a..h {
                        s[(a, b)] += d[a] * d[b];
                    }
                }
            }
            Covariance::Diagonal(s) => s.iter_mut().zip(&d).for_each(|(v, x)| *v += x * x),
        }
    }
    match &mut cov {
        Covariance::Full(s) => {
            for a in 0..h {
                for b in a..h {
                    let v = s[(a, b)] / m;
                    s[(a, b)] = v;
                    s[(b, a)] = v;
                }
            }
        }
        Covariance::Diagonal(s) => s.iter_mut().for_each(|v| *v /= m),
    }
    (Vector::from(mean), cov)
}

impl ClassStats {
    pub fn new(classes: usize, dim: usize, mode: CovarianceMode) -> Self {
        ClassStats {
            means: vec![Vector::zeros(dim); classes],
            covs: vec![Covariance::zeros(mode, dim); classes],
            counts: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn mode(&self) -> CovarianceMode {
        self.covs.first().map_or(CovarianceMode::Full, Covariance::mode)
    }

    /// Merges one batch into the running statistics.
    pub fn update(&mut self, features: &Matrix, labels: &[usize]) -> Result<()> {
        if features.cols() != self.dim() {
            return Err(contract(format!(
                "feature width {} != statistics width {}",
                features.cols(),
                self.dim()
            )));
        }
        if features.rows() != labels.len() {
            return Err(contract("features and labels differ in length"));
        }
        let classes = self.classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(contract(format!("label {bad} out of range")));
        }
        let mode = self.mode();
        let h = self.dim();
        for c in 0..classes {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if idx.is_empty() {
                continue;
            }
            let (bm, bc) = batch_moments(features, &idx, mode);
            let n = self.counts[c] as f64;
            let m = idx.len() as f64;
            let tot = n + m;
            let diff: Vec<f64> = self.means[c].iter().zip(bm.iter()).map(|(a, b)| a - b).collect();
            let cross = n * m / (tot * tot);
            match (&mut self.covs[c], &bc) {
                (Covariance::Full(s), Covariance::Full(sb)) => {
                    for a in 0..h {
                        for b in a..h {
                            let v = (n * s[(a, b)] + m * sb[(a, b)]) / tot + cross * diff[a] * diff[b];
                            s[(a, b)] = v;
                            s[(b, a)] = v;
                        }
                    }
                }
                (Covariance::Diagonal(s), Covariance::Diagonal(sb)) => {
                    for a in 0..h {
                        s[a] = (n * s[a] + m * sb[a]) / tot + cross * diff[a] * diff[a];
                    }
                }
                _ => unreachable!("batch moments use the running mode"),
            }
            for (mu, b) in self.means[c].iter_mut().zip(bm.iter()) {
                *mu = (n * *mu + m * b) / tot;
            }
            self.counts[c] += idx.len() as u64;
        }
        Ok(())
    }

    pub fn priors(&self) -> Result<Vector> {
        priors_from_counts(&self.counts.iter().map(|&c| c as f64).collect::<Vec<_>>())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// `π_c = n_c / Σ n`.
pub fn priors_from_counts<T: Copy + Into<f64>>(counts: &[T]) -> Result<Vector> {
    let total: f64 = counts.iter().map(|&c| c.into()).sum();
    if !(total > 0.0) {
        return Err(contract("class priors need a positive total count"));
    }
    Ok(counts.iter().map(|&c| c.into() / total).collect::<Vec<_>>().into())
}

/// `log(π_c / π_y)`, computed one way everywhere so reductions stay bitwise exact.
pub fn log_prior_ratio(priors: &[f64], c: usize, y: usize) -> f64 {
    priors[c].ln() - priors[y].ln()
}

/// Exponential moving average of per-class confusion rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRates {
    /// `rates[(y, c)]`: fraction of class-`y` samples predicted as `c`.
    pub rates: Matrix,
}

impl ConfusionRates {
    pub fn new(classes: usize) -> Self {
        ConfusionRates {
            rates: Matrix::zeros(classes, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.rates.rows()
    }

    /// `ε_y ← (1−decay) ε_y + decay · batch_row_y` for every class present in
    /// the batch.
    pub fn update(&mut self, predictions: &[usize], labels: &[usize], decay: f64) -> Result<()> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(contract("confusion decay must lie in (0, 1]"));
        }
        if predictions.len() != labels.len() {
            return Err(contract("predictions and labels differ in length"));
        }
        let c = self.classes();
        let mut counts = Matrix::zeros(c, c);
        let mut totals = vec![0usize; c];
        for (&p, &y) in predictions.iter().zip(labels) {
            if p >= c || y >= c {
                return Err(contract("class index out of range"));
            }
            counts[(y, p)] += 1.0;
            totals[y] += 1;
        }
        for y in 0..c {
            if totals[y] == 0 {
                continue;
            }
            for k in 0..c {
                let batch = counts[(y, k)] / totals[y] as f64;
                self.rates[(y, k)] = (1.0 - decay) * self.rates[(y, k)] + decay * batch;
            }
        }
        Ok(())
    }

    /// Off-diagonal confusion `ε_{y,c}`, `c ≠ y`.
    pub fn off_diagonal(&self, y: usize, c: usize) -> f64 {
        if y == c {
            0.0
        } else {
            self.rates[(y, c)]
        }
    }
}

/// Empirical variance check helper: `vᵀ Σ v` written out as a dot product,
/// exposed for diagnostics.
pub fn projected_variance(cov: &Covariance, v: &[f64]) -> f64 {
    dot(v, &cov.mul_vec(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_features(n: usize, h: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(n, h, |_, j| rng.normal() * (1.0 + j as f64) + j as f64)
    }

    /// Direct two-pass mean and population covariance, written independently.
    fn pooled(features: &Matrix, labels: &[usize], c: usize) -> (Vec<f64>, Matrix) {
        let rows: Vec<&[f64]> = (0..labels.len()).filter(|&i| labels[i] == c).map(|i| features.row(i)).collect();
        let h = features.cols();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..h).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let cov = Matrix::from_fn(h, h, |a, b| {
            rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n
        });
        (mean, cov)
    }

    #[test]
    fn first_batch_equals_direct_moments() {
        let mut rng = Rng::new(1);
        let x = random_features(20, 3, &mut rng);
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let mut s = ClassStats::new(2, 3, CovarianceMode::Full);
        s.update(&x, &labels).unwrap();
        for c in 0..2 {
            let (m, cov) = pooled(&x, &labels, c);
            assert!(crate::numerics::max_abs_diff(&m, &s.means[c]) < 1e-12);
            assert!(s.covs[c].to_full().max_abs_diff(&cov) < 1e-12);
            assert_eq!(s.counts[c], 10);
        }
    }

    #[test]
    fn single_sample_batch_adds_only_cross_term() {
        let mut s = ClassStats::new(1, 2, CovarianceMode::Full);
        let first = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        s.update(&first, &[0, 0]).unwrap();
        let before = s.covs[0].to_full();
        let mu_old = s.means[0].to_vec();
        let x = [4.0, 3.0];
        s.update(&Matrix::from_rows(&[x.to_vec()]).unwrap(), &[0]).unwrap();
        let (n, m) = (2.0, 1.0);
        let d = crate::numerics::sub(&mu_old, &x);
        let mut expect = before.scaled(n / (n + m));
        expect.add_outer(n * m / ((n + m) * (n + m)), &d, &d);
        assert!(s.covs[0].to_full().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn streamed_equals_pooled_both_modes() {
        let mut rng = Rng::new(2);
        let x = random_features(60, 4, &mut rng);
        let labels: Vec<usize> = (0..60).map(|_| rng.below(3)).collect();
        for mode in [CovarianceMode::Full, CovarianceMode::Diagonal] {
            let mut s = ClassStats::new(3, 4, mode);
            for chunk in [0..17, 17..18, 18..45, 45..60] {
                let idx: Vec<usize> = chunk.collect();
                let xb = Matrix::from_vec(idx.len(), 4, idx.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
                let lb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                s.update(&xb, &lb).unwrap();
            }
            for c in 0..3 {
                let (m, cov) = pooled(&x, &labels, c);
                assert!(crate::numerics::max_abs_diff(&m, &s.means[c]) < 1e-10);
                match mode {
                    CovarianceMode::Full => assert!(s.covs[c].to_full().max_abs_diff(&cov) < 1e-10),
                    CovarianceMode::Diagonal => {
                        assert!(crate::numerics::max_abs_diff(&s.covs[c].diagonal(), &cov.diagonal()) < 1e-10)
                    }
                }
            }
        }
    }

    #[test]
    fn update_rejects_bad_input() {
        let mut s = ClassStats::new(2, 2, CovarianceMode::Full);
        let x = Matrix::zeros(1, 2);
        assert!(s.update(&x, &[2]).is_err());
        assert!(s.update(&Matrix::zeros(1, 3), &[0]).is_err());
    }

    #[test]
    fn prior_examples() {
        let p = priors_from_counts(&[5u32, 5, 5, 5]).unwrap();
        assert!(p.iter().all(|&x| x == 0.25));
        assert_eq!(log_prior_ratio(&p, 0, 3), 0.0);
        let p = priors_from_counts(&[90u32, 10]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15 && (p[1] - 0.1).abs() < 1e-15);
        assert!((log_prior_ratio(&p, 0, 1) - 9f64.ln()).abs() < 1e-12);
        assert!((log_prior_ratio(&p, 0, 1) - 2.1972).abs() < 1e-4);
        // 100:1 exponential profile, ten classes, summed by hand
        let counts = crate::datasets::ImbalanceProfile { ratio: 100.0 }.counts(1000, 10);
        assert_eq!(counts, vec![1000, 599, 359, 215, 129, 77, 46, 28, 17, 10]);
        let total = 1000 + 599 + 359 + 215 + 129 + 77 + 46 + 28 + 17 + 10;
        assert_eq!(total, 2480);
        let p = priors_from_counts(&counts.iter().map(|&c| c as u32).collect::<Vec<_>>()).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((p[9] - 10.0 / 2480.0).abs() < 1e-15);
        assert!(priors_from_counts(&[0u32, 0]).is_err());
    }

    #[test]
    fn confusion_examples() {
        let mut e = ConfusionRates::new(2);
        e.rates = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        e.update(&[0, 1], &[0, 1], 0.1).unwrap();
        assert!((e.rates[(0, 1)] - 0.45).abs() < 1e-15);
        assert!((e.rates[(0, 0)] - 0.55).abs() < 1e-15);

        let mut e = ConfusionRates::new(3);
        e.update(&[1, 1, 0, 2], &[0, 0, 0, 2], 1.0).unwrap();
        assert!((e.rates[(0, 1)] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(e.rates[(2, 2)], 1.0);
        assert_eq!(e.rates[(1, 1)], 0.0); // absent class untouched

        // two alternating batches against a hand-unrolled recursion
        let mut e = ConfusionRates::new(2);
        e.update(&[1, 0], &[0, 0], 0.1).unwrap();
        e.update(&[0, 0], &[0, 0], 0.1).unwrap();
        let r1 = 0.9 * 0.0 + 0.1 * 0.5;
        let r2 = 0.9 * r1 + 0.1 * 0.0;
        assert!((e.rates[(0, 1)] - r2).abs() < 1e-15);
        assert!(e.update(&[0], &[0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn confusion_rows_stay_substochastic(
            batches in proptest::collection::vec(proptest::collection::vec((0usize..3, 0usize..3), 1..10), 1..8),
            decay in 0.01f64..1.0,
        ) {
            let mut e = ConfusionRates::new(3);
            for b in batches {
                let (p, y): (Vec<usize>, Vec<usize>) = b.into_iter().unzip();
                e.update(&p, &y, decay).unwrap();
                for r in 0..3 {
                    let s: f64 = e.rates.row(r).iter().sum();
                    prop_assert!(s <= 1.0 + 1e-9);
                    prop_assert!(e.rates.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }

        #[test]
        fn diagonal_mode_matches_full_diagonal(seed in any::<u64>(), n in 2usize..30) {
            let mut rng = Rng::new(seed);
            let x = random_features(n, 3, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            let mut full = ClassStats::new(2, 3, CovarianceMode::Full);
            let mut diag = ClassStats::new(2, 3, CovarianceMode::Diagonal);
            let half = n / 2;
            for (lo, hi) in [(0, half), (half, n)] {
                let idx: Vec<usize> = (lo..hi).collect();
                let xb = Matrix::from_vec(idx.len(), 3, idx.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
                full.update(&xb, &labels[lo..hi]).unwrap();
                diag.update(&xb, &labels[lo..hi]).unwrap();
            }
            for c in 0..2 {
                prop_assert!(crate::numerics::max_abs_diff(&full.covs[c].diagonal(), &diag.covs[c].diagonal()) < 1e-12);
                prop_assert_eq!(full.covs[c].to_full().max_asymmetry(), 0.0);
                prop_assert!(full.covs[c].diagonal().iter().all(|&v| v >= -1e-10));
            }
        }
    }
}
