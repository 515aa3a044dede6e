//! Sparse user x service x time tensor storage.
//!
//! Observations are kept in coordinate (COO) form: the tensor never
//! materializes anything proportional to the dense cell count, only to the
//! number of observed entries. Quality tensors in this domain are sparse and
//! lopsided (a few hundred users, thousands of services), so per-user
//! partitioning is the layout the trainers consume.

use alloc::vec::Vec;

use crate::seed::shuffled_indices;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape axis {axis} must be nonzero")]
    InvalidShape { axis: &'static str },
    #[error("entry {position}: coordinate ({user}, {service}, {time}) out of bounds")]
    OutOfBounds {
        position: usize,
        user: usize,
        service: usize,
        time: usize,
    },
    #[error("entry {position}: value is not finite")]
    NonFinite { position: usize },
    #[error("duplicate coordinate ({user}, {service}, {time})")]
    Duplicate {
        user: usize,
        service: usize,
        time: usize,
    },
    #[error("train fraction {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error("too few observed entries to split")]
    EmptyTensor,
}

/// Dense bounds of the tensor; every axis has at least one index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub num_users: usize,
    pub num_services: usize,
    pub num_times: usize,
}

impl Shape {
    pub fn new(num_users: usize, num_services: usize, num_times: usize) -> Result<Self, TensorError> {
        if num_users == 0 {
            return Err(TensorError::InvalidShape { axis: "users" });
        }
        if num_services == 0 {
            return Err(TensorError::InvalidShape { axis: "services" });
        }
        if num_times == 0 {
            return Err(TensorError::InvalidShape { axis: "times" });
        }
        Ok(Shape {
            num_users,
            num_services,
            num_times,
        })
    }

    pub fn contains(&self, user: usize, service: usize, time: usize) -> bool {
        user < self.num_users && service < self.num_services && time < self.num_times
    }

    /// Dense cell count, in u128 so astronomically large shapes still count.
    pub fn total_cells(&self) -> u128 {
        self.num_users as u128 * self.num_services as u128 * self.num_times as u128
    }
}

/// One observed cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub user: usize,
    pub service: usize,
    pub time: usize,
    pub value: f64,
}

/// Observed entries of one user, in tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct UserShard {
    pub user: usize,
    pub entries: Vec<Entry>,
}

impl UserShard {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// How to carve a tensor into train and test halves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// `train_fraction` must lie strictly inside (0, 1).
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self, TensorError> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(TensorError::InvalidFraction(train_fraction));
        }
        Ok(SplitSpec {
            train_fraction,
            seed,
        })
    }

    pub fn train_fraction(&self) -> f64 {
        self.train_fraction
    }
}

/// Coordinate-form sparse tensor. Construction validates every entry, so a
/// held `SparseTensor` is always in bounds, finite, and duplicate-free.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    shape: Shape,
    entries: Vec<Entry>,
}

impl SparseTensor {
    /// Validates entries against `shape`: in bounds, finite values, no
    /// coordinate observed twice. Entry order is preserved.
    pub fn build(shape: Shape, entries: Vec<Entry>) -> Result<Self, TensorError> {
        for (position, e) in entries.iter().enumerate() {
            if !shape.contains(e.user, e.service, e.time) {
                return Err(TensorError::OutOfBounds {
                    position,
                    user: e.user,
                    service: e.service,
                    time: e.time,
                });
            }
            if !e.value.is_finite() {
                return Err(TensorError::NonFinite { position });
            }
        }
        // Duplicate scan over a sorted view of positions: O(n log n) time and
        // O(n) extra space, never O(dense cells).
        let mut order: Vec<u32> = (0..entries.len() as u32).collect();
        order.sort_unstable_by_key(|&p| {
            let e = &entries[p as usize];
            (e.user, e.service, e.time)
        });
        for pair in order.windows(2) {
            let a = &entries[pair[0] as usize];
            let b = &entries[pair[1] as usize];
            if (a.user, a.service, a.time) == (b.user, b.service, b.time) {
                return Err(TensorError::Duplicate {
                    user: b.user,
                    service: b.service,
                    time: b.time,
                });
            }
        }
        Ok(SparseTensor { shape, entries })
    }

    /// Skips validation; callers guarantee the entries came from a validated
    /// tensor with the same shape.
    pub(crate) fn from_validated(shape: Shape, entries: Vec<Entry>) -> Self {
        SparseTensor { shape, entries }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Observed fraction of the dense cell count.
    pub fn density(&self) -> f64 {
        self.entries.len() as f64 / self.shape.total_cells() as f64
    }

    /// One shard per user row, ascending by user id. Users with no
    /// observations get an empty shard; shard entries keep tensor order.
    pub fn partition_by_user(&self) -> Vec<UserShard> {
        let mut shards: Vec<UserShard> = (0..self.shape.num_users)
            .map(|user| UserShard {
                user,
                entries: Vec::new(),
            })
            .collect();
        for e in &self.entries {
            shards[e.user].entries.push(*e);
        }
        shards
    }

    /// Seeded train/test split: a Fisher-Yates permutation of entry
    /// positions selects `round(fraction * len)` train entries; both sides
    /// keep original tensor order. The two sides partition the entries
    /// exactly, so the same spec always reproduces the same split. Needs at
    /// least two entries, one per side in the best case.
    pub fn split(&self, spec: &SplitSpec) -> Result<(SparseTensor, SparseTensor), TensorError> {
        let n = self.entries.len();
        if n < 2 {
            return Err(TensorError::EmptyTensor);
        }
        let train_target = crate::float::round(spec.train_fraction() * n as f64) as usize;
        let order = shuffled_indices(n, spec.seed);
        let mut in_train = alloc::vec![false; n];
        for &p in order.iter().take(train_target) {
            in_train[p] = true;
        }
        let mut train = Vec::with_capacity(train_target);
        let mut test = Vec::with_capacity(n - train_target);
        for (p, e) in self.entries.iter().enumerate() {
            if in_train[p] {
                train.push(*e);
            } else {
                test.push(*e);
            }
        }
        Ok((
            SparseTensor::from_validated(self.shape, train),
            SparseTensor::from_validated(self.shape, test),
        ))
    }
}
