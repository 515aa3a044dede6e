//! Centralized trainer over the pooled tensor, the baseline the federated
//! protocol is measured against.
//!
//! Snapshot mode freezes the service and time matrices at the start of each
//! round and computes every gradient of the round against that copy, applying
//! updates user by user in ascending order, each user's visits in the same
//! seeded-shuffle order a client of that user would walk. That makes its
//! trajectory identical, bit for bit, to federated training with every user
//! participating: the numbers never depend on where the loop runs. Fresh mode
//! is plain SGD, every visit reading the matrices as the previous visit left
//! them.

use alloc::vec::Vec;

use crate::evaluation::{EvaluationSet, RoundReport};
use crate::federation::{
    client_rng_seed, pass_shuffle_seed, round_report, ConvergenceTracker, FedError, TrainOptions,
};
use crate::lft::{apply_step_in_place, element_visit, init_factors, Hyperparams, LatentFactors};
use crate::seed::shuffled_indices;
use crate::tensor::SparseTensor;

/// Which model values the service/time gradients are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// Round-start snapshot; reproduces the federated trajectory exactly.
    Snapshot,
    /// Live matrices; every visit sees all earlier updates.
    Fresh,
}

/// Trains on the whole tensor in one place. Reports carry zero byte counts:
/// nothing is transmitted. `opts.interleaved` is ignored; `local_epochs` and
/// `sequential_user_update` mean the same as in federated training.
pub fn train_centralized(
    train: &SparseTensor,
    hp: &Hyperparams,
    mode: GradientMode,
    opts: &TrainOptions,
    test: Option<&EvaluationSet>,
) -> Result<(LatentFactors, Vec<RoundReport>), FedError> {
    hp.validate()?;
    opts.validate()?;
    if train.is_empty() {
        return Err(FedError::EmptyTensor);
    }
    let shards = train.partition_by_user();
    let mut factors = init_factors(train.shape(), hp)?;
    let mut reports = Vec::new();
    let mut tracker = ConvergenceTracker::new(opts);
    let mut wrt_service = Vec::with_capacity(hp.rank);
    let mut wrt_time = Vec::with_capacity(hp.rank);
    // Scratch rows for fresh mode, where the rows being read are the rows
    // being written.
    let mut service_scratch = alloc::vec![0.0; hp.rank];
    let mut time_scratch = alloc::vec![0.0; hp.rank];

    for round in 0..hp.max_rounds {
        let snapshot = match mode {
            GradientMode::Snapshot => Some((factors.services.clone(), factors.times.clone())),
            GradientMode::Fresh => None,
        };
        for shard in &shards {
            let rng_seed = client_rng_seed(hp.seed, shard.user);
            for pass in 0..opts.local_epochs {
                let seed = pass_shuffle_seed(rng_seed, round, pass);
                for &idx in shuffled_indices(shard.len(), seed).iter() {
                    let entry = shard.entries[idx];
                    match &snapshot {
                        Some((services, times)) => {
                            element_visit(
                                entry.value,
                                factors.users.row_mut(entry.user),
                                services.row(entry.service),
                                times.row(entry.time),
                                hp.learning_rate,
                                hp.regularization,
                                opts.sequential_user_update,
                                &mut wrt_service,
                                &mut wrt_time,
                            );
                        }
                        None => {
                            service_scratch.copy_from_slice(factors.services.row(entry.service));
                            time_scratch.copy_from_slice(factors.times.row(entry.time));
                            element_visit(
                                entry.value,
                                factors.users.row_mut(entry.user),
                                &service_scratch,
                                &time_scratch,
                                hp.learning_rate,
                                hp.regularization,
                                opts.sequential_user_update,
                                &mut wrt_service,
                                &mut wrt_time,
                            );
                        }
                    }
                    // Ascending user, visit order within: the same order the
                    // server applies surviving batches.
                    apply_step_in_place(
                        factors.services.row_mut(entry.service),
                        &wrt_service,
                        hp.learning_rate,
                    );
                    apply_step_in_place(factors.times.row_mut(entry.time), &wrt_time, hp.learning_rate);
                }
            }
        }
        let report = round_report(round, train, &shards, &factors, hp, test, 0)?;
        let train_rmse = report.train_rmse;
        reports.push(report);
        if tracker.observe(train_rmse) {
            break;
        }
    }

    Ok((factors, reports))
}
