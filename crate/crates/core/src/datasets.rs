//! Seeded synthetic classification problems: Gaussian mixtures with optional
//! class imbalance and label noise, and a two-class problem whose spurious
//! attribute block is correlated with the label in training and anti-correlated
//! at test time.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{dot, norm, Matrix};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Meta,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Meta => "meta",
            SplitTag::Test => "test",
        }
    }
}

impl FromStr for SplitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "meta" => Ok(SplitTag::Meta),
            "test" => Ok(SplitTag::Test),
            _ => Err(Error::Format(format!("unknown split tag {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Spurious-group id per sample, when the generator defines groups.
    pub groups: Option<Vec<usize>>,
    pub num_classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        groups: Option<Vec<usize>>,
        num_classes: usize,
        split: SplitTag,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(contract("features and labels differ in length"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(contract(format!("label {bad} out of range for {num_classes} classes")));
        }
        if let Some(g) = &groups {
            if g.len() != labels.len() {
                return Err(contract("groups and labels differ in length"));
            }
        }
        Ok(Dataset {
            features,
            labels,
            groups,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        Dataset {
            features: Matrix::from_vec(idx.len(), d, data).expect("subset of finite rows"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            groups: self.groups.as_ref().map(|g| idx.iter().map(|&i| g[i]).collect()),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: SplitTag) -> Dataset {
        self.split = split;
        self
    }

    /// Writes the columnar text form: a header line
    /// `n dim classes grouped split`, then one sample per line as
    /// `label [group] x_1 ... x_dim`.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let grouped = self.groups.is_some();
        writeln!(
            w,
            "{} {} {} {} {}",
            self.len(),
            self.dim(),
            self.num_classes,
            u8::from(grouped),
            self.split.as_str()
        )?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            write!(line, "{}", self.labels[i]).unwrap();
            if let Some(g) = &self.groups {
                write!(line, " {}", g[i]).unwrap();
            }
            for x in self.features.row(i) {
                write!(line, " {x}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Dataset> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 5 {
            return Err(Error::Format(format!("bad header {header:?}")));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Format(format!("bad integer {s:?}")))
        };
        let (n, d, classes, grouped) = (parse(h[0])?, parse(h[1])?, parse(h[2])?, parse(h[3])? == 1);
        let split: SplitTag = h[4].parse()?;
        let mut labels = Vec::with_capacity(n);
        let mut groups = grouped.then(|| Vec::with_capacity(n));
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("truncated dataset file".into()))??;
            let mut it = line.split_whitespace();
            let mut next = || it.next().ok_or_else(|| Error::Format("short row".into()));
            labels.push(parse(next()?)?);
            if let Some(g) = groups.as_mut() {
                g.push(parse(next()?)?);
            }
            for _ in 0..d {
                let s = next()?;
                data.push(s.parse::<f64>().map_err(|_| Error::Format(format!("bad float {s:?}")))?);
            }
        }
        Dataset::new(Matrix::from_vec(n, d, data)?, labels, groups, classes, split)
    }
}

/// Random orthonormal columns via Gram-Schmidt on Gaussian vectors.
fn orthonormal_frame(k: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Class-conditional unit-variance Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
}

impl GaussianMixture {
    /// Means at `separation` times the vertices of a random orthonormal frame
    /// when `classes <= dim`; for `classes == dim + 1` a centred regular
    /// simplex with the same pairwise spacing; beyond that, random points on
    /// the sphere of radius `separation`.
    pub fn new(classes: usize, dim: usize, separation: f64, rng: &mut Rng) -> Result<Self> {
        if classes < 2 || dim < 2 || !(separation > 0.0) {
            return Err(contract("mixture needs classes >= 2, dim >= 2, separation > 0"));
        }
        let means = if classes <= dim {
            orthonormal_frame(classes, dim, rng)
                .into_iter()
                .map(|v| v.into_iter().map(|x| x * separation).collect())
                .collect()
        } else if classes == dim + 1 {
            // Simplex vertices e_c - centroid live in a (classes-1)-dim subspace
            // of R^classes; carry them into R^dim with an orthonormal basis of
            // that subspace.
            let c = classes as f64;
            let sub = orthonormal_frame(dim, dim, rng);
            let centred: Vec<Vec<f64>> = (0..classes)
                .map(|k| (0..classes).map(|j| f64::from(u8::from(j == k)) - 1.0 / c).collect())
                .collect();
            // basis of the sum-zero subspace of R^classes
            let mut zero_sum: Vec<Vec<f64>> = Vec::new();
            for k in 0..dim {
                let mut v = vec![0.0; classes];
                v[k] = 1.0;
                v[classes - 1] = -1.0;
                for b in &zero_sum {
                    let p = dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y): (&mut f64, &f64)| *x -= p * y);
                }
                let n = norm(&v);
                zero_sum.push(v.into_iter().map(|x| x / n).collect::<Vec<f64>>());
            }
            centred
                .iter()
                .map(|v| {
                    let coords: Vec<f64> = zero_sum.iter().map(|b| dot(v, b)).collect();
                    let mut out = vec![0.0; dim];
                    for (ck, bk) in coords.iter().zip(&sub) {
                        out.iter_mut().zip(bk).for_each(|(o, b)| *o += ck * b);
                    }
                    out.into_iter().map(|x| x * separation).collect()
                })
                .collect()
        } else {
            (0..classes)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                    let n = norm(&v);
                    v.into_iter().map(|x| x * separation / n).collect()
                })
                .collect()
        };
        Ok(GaussianMixture { means })
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Balanced sample, classes in blocks.
    pub fn sample(&self, n_per_class: usize, split: SplitTag, rng: &mut Rng) -> Dataset {
        let (c, d) = (self.classes(), self.dim());
        let mut data = Vec::with_capacity(c * n_per_class * d);
        let mut labels = Vec::with_capacity(c * n_per_class);
        for (k, mu) in self.means.iter().enumerate() {
            for _ in 0..n_per_class {
                data.extend(mu.iter().map(|m| m + rng.normal()));
                labels.push(k);
            }
        }
        Dataset {
            features: Matrix::from_vec(labels.len(), d, data).expect("finite draws"),
            labels,
            groups: None,
            num_classes: c,
            split,
        }
    }
}

pub fn make_gaussian_mixture(
    classes: usize,
    dim: usize,
    separation: f64,
    n_per_class: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    let mix = GaussianMixture::new(classes, dim, separation, rng)?;
    Ok(mix.sample(n_per_class, SplitTag::Train, rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpuriousConfig {
    pub d_signal: usize,
    pub d_spur: usize,
    /// Probability that a training sample carries its label's majority attribute.
    pub train_group_ratio: f64,
    /// Same probability at test time; below 0.5 reverses the correlation.
    pub test_group_ratio: f64,
    pub label_flip: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Distance of each class-signal mean from the origin.
    pub signal_strength: f64,
    /// Distance of each attribute mean from the origin.
    pub spur_strength: f64,
}

impl Default for SpuriousConfig {
    fn default() -> Self {
        SpuriousConfig {
            d_signal: 4,
            d_spur: 4,
            train_group_ratio: 0.8,
            test_group_ratio: 0.1,
            label_flip: 0.25,
            n_train: 4000,
            n_test: 4000,
            signal_strength: 1.5,
            spur_strength: 3.0,
        }
    }
}

impl SpuriousConfig {
    fn validate(&self) -> Result<()> {
        let in_open = |x: f64| x > 0.0 && x < 1.0;
        if !in_open(self.train_group_ratio) || !in_open(self.test_group_ratio) {
            return Err(contract("group ratios must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_flip) {
            return Err(contract("label_flip must lie in [0, 1)"));
        }
        if self.d_signal == 0 || self.d_spur == 0 {
            return Err(contract("signal and attribute blocks need at least one dimension"));
        }
        Ok(())
    }
}

fn spurious_split(cfg: &SpuriousConfig, n: usize, ratio: f64, split: SplitTag, rng: &mut Rng) -> Dataset {
    let d = cfg.d_signal + cfg.d_spur;
    let sig_scale = cfg.signal_strength / (cfg.d_signal as f64).sqrt();
    let spur_scale = cfg.spur_strength / (cfg.d_spur as f64).sqrt();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.below(2);
        // Signal is drawn from the generating class; the observed label is a
        // noisy copy of it and the attribute follows the observed label.
        let label = if rng.bernoulli(cfg.label_flip) { 1 - class } else { class };
        let majority = rng.bernoulli(ratio);
        let attr = if majority { label } else { 1 - label };
        let s = if class == 0 { -1.0 } else { 1.0 };
        let a = if attr == 0 { -1.0 } else { 1.0 };
        data.extend((0..cfg.d_signal).map(|_| s * sig_scale + rng.normal()));
        data.extend((0..cfg.d_spur).map(|_| a * spur_scale + rng.normal()));
        labels.push(label);
        groups.push(2 * label + attr);
    }
    Dataset {
        features: Matrix::from_vec(n, d, data).expect("finite draws"),
        labels,
        groups: Some(groups),
        num_classes: 2,
        split,
    }
}

/// Train/test pair with a signal block and a spurious-attribute block.
/// Group id is `2 * label + attribute`.
pub fn make_spurious(cfg: &SpuriousConfig, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut train_rng = rng.split();
    let mut test_rng = rng.split();
    Ok((
        spurious_split(cfg, cfg.n_train, cfg.train_group_ratio, SplitTag::Train, &mut train_rng),
        spurious_split(cfg, cfg.n_test, cfg.test_group_ratio, SplitTag::Test, &mut test_rng),
    ))
}

/// Exponential long-tail profile `n_c = round(n_max · ratio^(-c/(C-1)))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceProfile {
    pub ratio: f64,
}

impl ImbalanceProfile {
    pub fn counts(&self, n_max: usize, classes: usize) -> Vec<usize> {
        if classes == 1 {
            return vec![n_max];
        }
        (0..classes)
            .map(|c| {
                let e = -(c as f64) / (classes as f64 - 1.0);
                (n_max as f64 * self.ratio.powf(e)).round() as usize
            })
            .collect()
    }
}

/// Subsamples each class without replacement to the profile; class 0 is the
/// head and is kept whole. Retained rows keep their original order.
pub fn apply_imbalance(d: &Dataset, profile: ImbalanceProfile, rng: &mut Rng) -> Result<Dataset> {
    if !(profile.ratio >= 1.0) {
        return Err(contract("imbalance ratio must be >= 1"));
    }
    let have = d.class_counts();
    let targets = profile.counts(have[0], d.num_classes);
    let mut keep = Vec::new();
    for c in 0..d.num_classes {
        if targets[c] > have[c] {
            return Err(contract(format!(
                "class {c} has {} samples, profile wants {}",
                have[c], targets[c]
            )));
        }
        let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == c).collect();
        if targets[c] < idx.len() {
            rng.shuffle(&mut idx);
            idx.truncate(targets[c]);
        }
        keep.extend(idx);
    }
    keep.sort_unstable();
    Ok(d.subset(&keep))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Replace with a uniformly drawn *different* class.
    Uniform,
    /// Replace with the partner class `(c + 1) mod C`.
    PairFlip,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
}

pub fn inject_noise(labels: &[usize], classes: usize, spec: NoiseSpec, rng: &mut Rng) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(contract("noise rate must lie in [0, 1)"));
    }
    if classes < 2 {
        return Err(contract("label noise needs at least two classes"));
    }
    Ok(labels
        .iter()
        .map(|&y| {
            if !rng.bernoulli(spec.rate) {
                return y;
            }
            match spec.kind {
                NoiseKind::PairFlip => (y + 1) % classes,
                NoiseKind::Uniform => {
                    let k = rng.below(classes - 1);
                    if k >= y {
                        k + 1
                    } else {
                        k
                    }
                }
            }
        })
        .collect())
}

/// Draws exactly `per_class` samples of every class into a meta split.
pub fn split_meta(d: &Dataset, per_class: usize, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    let mut in_meta = vec![false; d.len()];
    for c in 0..d.num_classes {
        let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == c).collect();
        if idx.len() < per_class {
            return Err(contract(format!(
                "class {c} has {} samples, meta split needs {per_class}",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        for &i in &idx[..per_class] {
            in_meta[i] = true;
        }
    }
    let train: Vec<usize> = (0..d.len()).filter(|&i| !in_meta[i]).collect();
    let meta: Vec<usize> = (0..d.len()).filter(|&i| in_meta[i]).collect();
    Ok((d.subset(&train), d.subset(&meta).with_split(SplitTag::Meta)))
}
