//! Synthetic low-rank tensors with controlled density and noise.
//!
//! Generation is a fixed draw sequence from one seeded stream, so a spec
//! identifies its tensor exactly: ground-truth factor matrices first (user,
//! service, time order, row-major, each value uniform in (0, 1]), then the
//! kept cell set, then one Gaussian noise draw per kept entry in ascending
//! cell order.

use std::collections::BTreeSet;

use fedlft_core::{Entry, Shape, SparseTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("density {0} is outside (0, 1]")]
    BadDensity(f64),
    #[error("true rank must be at least 1")]
    ZeroRank,
    #[error("noise standard deviation {0} is not a finite nonnegative real")]
    BadNoise(f64),
    #[error("value clip ({0}, {1}) is not an ordered finite pair")]
    BadClip(f64, f64),
    #[error("tensor has {0} cells; the generator supports at most 2^48")]
    TooLarge(u128),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub shape: Shape,
    pub true_rank: usize,
    pub density: f64,
    pub noise_std: f64,
    pub value_clip: Option<(f64, f64)>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(SynthError::BadDensity(self.density));
        }
        if self.true_rank == 0 {
            return Err(SynthError::ZeroRank);
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(SynthError::BadNoise(self.noise_std));
        }
        if let Some((lo, hi)) = self.value_clip {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(SynthError::BadClip(lo, hi));
            }
        }
        if self.shape.total_cells() > 1 << 48 {
            return Err(SynthError::TooLarge(self.shape.total_cells()));
        }
        Ok(())
    }
}

/// Builds the tensor: y = sum_r d_ir * e_jr * t_kr, plus noise, clipped if
/// asked. Entry count is round(density * cells); coordinates are a uniform
/// sample without replacement, stored in ascending cell order.
pub fn generate(spec: &SynthSpec) -> Result<SparseTensor, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (i, j, k) = (
        spec.shape.num_users,
        spec.shape.num_services,
        spec.shape.num_times,
    );
    let rank = spec.true_rank;

    let unit = |rng: &mut ChaCha8Rng| 1.0 - rng.random::<f64>();
    let draw_matrix = |rng: &mut ChaCha8Rng, rows: usize| -> Vec<f64> {
        (0..rows * rank).map(|_| unit(rng)).collect()
    };
    let d = draw_matrix(&mut rng, i);
    let e = draw_matrix(&mut rng, j);
    let t = draw_matrix(&mut rng, k);

    let total = (spec.shape.total_cells() as u64) as usize;
    let count = (spec.density * total as f64).round() as usize;
    let cells = sample_without_replacement(&mut rng, total, count);

    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).expect("validated"))
    } else {
        None
    };

    let mut entries = Vec::with_capacity(cells.len());
    for cell in cells {
        let user = cell / (j * k);
        let rem = cell % (j * k);
        let service = rem / k;
        let time = rem % k;
        let mut value = fedlft_core::predict_rows(
            &d[user * rank..(user + 1) * rank],
            &e[service * rank..(service + 1) * rank],
            &t[time * rank..(time + 1) * rank],
        );
        if let Some(n) = &noise {
            value += n.sample(&mut rng);
        }
        if let Some((lo, hi)) = spec.value_clip {
            value = value.max(lo).min(hi);
        }
        entries.push(Entry { user, service, time, value });
    }
    Ok(SparseTensor::build(spec.shape, entries).expect("cells are distinct and in bounds"))
}

/// Uniform `count`-subset of 0..total, returned in ascending order. The
/// incremental trick keeps memory at O(count) whatever `total` is: for each
/// j in the top `count` slots, a uniform draw from [0, j] lands either on a
/// fresh index or on one already taken, in which case j itself joins.
fn sample_without_replacement(rng: &mut ChaCha8Rng, total: usize, count: usize) -> BTreeSet<usize> {
    debug_assert!(count <= total);
    let mut chosen = BTreeSet::new();
    for j in total - count..total {
        let pick = rng.random_range(0..=j);
        if !chosen.insert(pick) {
            chosen.insert(j);
        }
    }
    chosen
}
