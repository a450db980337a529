//! Natural-frequency dataset sampling: the chance of drawing from a
//! dataset is proportional to its size, so the mixture reflects the pool
//! as-is.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::templates::TaskTag;

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub name: String,
    pub size: usize,
    pub seed: u64,
    pub task_tag: TaskTag,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::InvalidConfig(format!("dataset {} has size 0", self.name)));
        }
        Ok(())
    }
}

/// Infinite deterministic stream of (dataset index, sample index) draws.
pub struct NaturalFrequencySampler {
    sizes: Vec<usize>,
    total: usize,
    rng: ChaCha8Rng,
}

impl NaturalFrequencySampler {
    pub fn new(specs: &[DatasetSpec], seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidConfig("sampler needs at least one dataset".into()));
        }
        for spec in specs {
            spec.validate()?;
        }
        let sizes: Vec<usize> = specs.iter().map(|s| s.size).collect();
        let total = sizes.iter().sum();
        Ok(Self { sizes, total, rng: crate::rng::stream(seed, "natural_frequency") })
    }

    /// P(dataset i) == size_i / total.
    pub fn probabilities(&self) -> Vec<f64> {
        self.sizes.iter().map(|&s| s as f64 / self.total as f64).collect()
    }

    /// Next (dataset index, sample index within it). Drawing a flat index
    /// uniformly over the pooled samples gives exactly the size-weighted
    /// dataset distribution.
    pub fn draw(&mut self) -> (usize, usize) {
        let flat = self.rng.gen_range(0..self.total);
        let mut rest = flat;
        for (i, &size) in self.sizes.iter().enumerate() {
            if rest < size {
                return (i, rest);
            }
            rest -= size;
        }
        unreachable!("flat index within total")
    }
}

impl Iterator for NaturalFrequencySampler {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        Some(self.draw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs(sizes: &[usize]) -> Vec<DatasetSpec> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &size)| DatasetSpec {
                name: format!("d{i}"),
                size,
                seed: i as u64,
                task_tag: TaskTag::Vqa,
            })
            .collect()
    }

    #[test]
    fn probabilities_follow_sizes() {
        let s = NaturalFrequencySampler::new(&specs(&[100, 300]), 1).unwrap();
        assert_eq!(s.probabilities(), vec![0.25, 0.75]);
    }

    #[test]
    fn single_dataset_gets_every_draw() {
        let s = NaturalFrequencySampler::new(&specs(&[17]), 2).unwrap();
        for (d, idx) in s.take(200) {
            assert_eq!(d, 0);
            assert!(idx < 17);
        }
    }

    #[test]
    fn same_seed_gives_identical_stream_prefix() {
        let a: Vec<_> = NaturalFrequencySampler::new(&specs(&[5, 9, 2]), 3)
            .unwrap()
            .take(500)
            .collect();
        let b: Vec<_> = NaturalFrequencySampler::new(&specs(&[5, 9, 2]), 3)
            .unwrap()
            .take(500)
            .collect();
        assert_eq!(a, b);
        let c: Vec<_> = NaturalFrequencySampler::new(&specs(&[5, 9, 2]), 4)
            .unwrap()
            .take(500)
            .collect();
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_frequency_within_three_sigma() {
        let n = 100_000usize;
        let p = 0.25;
        let draws = NaturalFrequencySampler::new(&specs(&[100, 300]), 5).unwrap().take(n);
        let hits = draws.filter(|&(d, _)| d == 0).count() as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (hits - mean).abs() < 3.0 * sigma,
            "got {hits}, expected {mean} +- {:.1}",
            3.0 * sigma
        );
    }

    #[test]
    fn zero_size_dataset_rejected() {
        assert!(NaturalFrequencySampler::new(&specs(&[4, 0]), 1).is_err());
    }
}
