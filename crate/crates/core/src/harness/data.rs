//! Train, meta and test splits for an experiment, a pure function of
//! (dataset config, meta size, seed).

use crate::datasets::{apply_imbalance, inject_noise, make_spurious, split_meta, Dataset, GaussianMixture, ImbalanceProfile, NoiseSpec, SplitTag};
use crate::error::Result;
use crate::rng::Rng;

use super::config::{DatasetConfig, DatasetKind};

/// RNG stream keys under the run's root seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const MODEL: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const META_BATCHES: u64 = 4;
    pub const META_NET: u64 = 5;
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub train: Dataset,
    pub meta: Dataset,
    pub test: Dataset,
}

/// Mixture: balanced draw, clean balanced meta split, then imbalance and
/// label noise on the remainder. Spurious: generator splits, meta drawn from
/// the training split.
pub fn prepare(cfg: &DatasetConfig, meta_per_class: usize, seed: u64) -> Result<PreparedData> {
    let mut rng = Rng::new(seed).stream(streams::DATA);
    match cfg.kind {
        DatasetKind::Mixture => {
            let mix = GaussianMixture::new(cfg.classes, cfg.dim, cfg.separation, &mut rng)?;
            let pool = mix.sample(cfg.train_per_class, SplitTag::Train, &mut rng);
            let test = mix.sample(cfg.test_per_class, SplitTag::Test, &mut rng);
            let (mut train, meta) = split_meta(&pool, meta_per_class, &mut rng)?;
            if cfg.imbalance_ratio > 1.0 {
                train = apply_imbalance(&train, ImbalanceProfile { ratio: cfg.imbalance_ratio }, &mut rng)?;
            }
            if cfg.noise_rate > 0.0 {
                let spec = NoiseSpec {
                    kind: cfg.noise_kind,
                    rate: cfg.noise_rate,
                };
                train.labels = inject_noise(&train.labels, train.num_classes, spec, &mut rng)?;
            }
            Ok(PreparedData { train, meta, test })
        }
        DatasetKind::Spurious => {
            let (pool, test) = make_spurious(&cfg.spurious, &mut rng)?;
            let (train, meta) = split_meta(&pool, meta_per_class, &mut rng)?;
            Ok(PreparedData { train, meta, test })
        }
    }
}

/// Shuffled passes over `0..n`, `size` indices at a time; a pass that cannot
/// fill a batch is reshuffled.
#[derive(Clone, Debug)]
pub struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: Rng,
}

impl Batches {
    pub fn new(n: usize, size: usize, rng: Rng) -> Self {
        assert!(n > 0 && size > 0, "batches need data and a positive size");
        Batches {
            order: (0..n).collect(),
            pos: n,
            size: size.min(n),
            rng,
        }
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.size > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.size;
        &self.order[start..self.pos]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_pipeline_shapes() {
        let cfg = DatasetConfig {
            classes: 4,
            dim: 6,
            train_per_class: 110,
            test_per_class: 20,
            imbalance_ratio: 10.0,
            noise_rate: 0.2,
            ..DatasetConfig::default()
        };
        let d = prepare(&cfg, 10, 3).unwrap();
        assert_eq!(d.meta.class_counts(), vec![10; 4]);
        assert_eq!(d.test.class_counts(), vec![20; 4]);
        assert_eq!(d.train.len(), [100, 46, 22, 10].iter().sum::<usize>());
        assert_eq!(d, prepare(&cfg, 10, 3).unwrap());
        assert_ne!(d.train, prepare(&cfg, 10, 4).unwrap().train);
    }

    #[test]
    fn batches_cover_each_pass() {
        let mut b = Batches::new(10, 3, Rng::new(1));
        let mut seen: Vec<usize> = (0..3).flat_map(|_| b.next_batch().to_vec()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(Batches::new(2, 5, Rng::new(1)).next_batch().len(), 2);
    }
}
