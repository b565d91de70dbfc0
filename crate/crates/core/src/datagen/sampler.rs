//! Ratio-weighted sampling over several datasets.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const RATIO_TOLERANCE: f64 = 1e-9;

/// Draws (dataset index, record index) pairs. Each draw picks a dataset by
/// an independent categorical draw over `ratios`; within a dataset, records
/// are visited in a fresh shuffled order every epoch.
#[derive(Clone, Debug)]
pub struct MixedSampler {
    cumulative: Vec<f64>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: Rng,
}

impl MixedSampler {
    pub fn new(sizes: &[usize], ratios: &[f64], seed: u64) -> Result<Self> {
        if sizes.len() != ratios.len() || sizes.is_empty() {
            return Err(Error::config(
                "train.mix",
                format!("{} ratios for {} datasets", ratios.len(), sizes.len()),
            ));
        }
        if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config("train.mix", "ratios must be nonnegative"));
        }
        let total: f64 = ratios.iter().sum();
        if (total - 1.0).abs() > RATIO_TOLERANCE {
            return Err(Error::config("train.mix", format!("ratios sum to {total}, expected 1")));
        }
        if sizes.iter().zip(ratios).any(|(&n, &r)| r > 0.0 && n == 0) {
            return Err(Error::config("train.mix", "a dataset with positive ratio is empty"));
        }
        let mut acc = 0.0;
        let cumulative = ratios
            .iter()
            .map(|r| {
                acc += r;
                acc
            })
            .collect();
        let mut rng = rng::stream(seed, 0x5a4d);
        let orders = sizes
            .iter()
            .map(|&n| {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                order
            })
            .collect();
        Ok(MixedSampler {
            cumulative,
            orders,
            cursors: vec![0; sizes.len()],
            rng,
        })
    }

    fn pick_dataset(&mut self) -> usize {
        let u: f64 = self.rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        // skip zero-ratio entries that share a cumulative value
        self.cumulative
            .iter()
            .enumerate()
            .position(|(i, &c)| u < c && (i == 0 || c > self.cumulative[i - 1]))
            .unwrap_or_else(|| {
                self.cumulative
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(i, &c)| *i == 0 || c > self.cumulative[i - 1])
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
    }

    pub fn next_index(&mut self) -> (usize, usize) {
        let d = self.pick_dataset();
        if self.cursors[d] == self.orders[d].len() {
            let order = &mut self.orders[d];
            order.shuffle(&mut self.rng);
            self.cursors[d] = 0;
        }
        let record = self.orders[d][self.cursors[d]];
        self.cursors[d] += 1;
        (d, record)
    }
}

impl Iterator for MixedSampler {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_index())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_ratio_draws_only_first() {
        let s = MixedSampler::new(&[5, 5], &[1.0, 0.0], 1).unwrap();
        assert!(s.take(1000).all(|(d, _)| d == 0));
    }

    #[test]
    fn zero_ratio_first_dataset_never_drawn() {
        let s = MixedSampler::new(&[5, 5], &[0.0, 1.0], 1).unwrap();
        assert!(s.take(1000).all(|(d, _)| d == 1));
    }

    #[test]
    fn epoch_visits_each_record_once() {
        let s = MixedSampler::new(&[7], &[1.0], 3).unwrap();
        let mut seen: Vec<usize> = s.take(7).map(|(_, r)| r).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_ratios_rejected() {
        assert!(MixedSampler::new(&[1, 1], &[1.0], 0).is_err());
        assert!(MixedSampler::new(&[1, 1], &[0.7, 0.2], 0).is_err());
        assert!(MixedSampler::new(&[1, 1], &[1.2, -0.2], 0).is_err());
    }

    #[test]
    fn same_seed_same_sequence() {
        let a: Vec<_> = MixedSampler::new(&[10, 4], &[0.8, 0.2], 9).unwrap().take(200).collect();
        let b: Vec<_> = MixedSampler::new(&[10, 4], &[0.8, 0.2], 9).unwrap().take(200).collect();
        assert_eq!(a, b);
    }
}
