//! Held-out metrics, per-round reports, and multi-trial experiments.

use alloc::vec::Vec;

use crate::federation::FedError;
use crate::float;
use crate::lft::{predict, Hyperparams, LatentFactors, LftError};
use crate::seed::derive_seed;
use crate::tensor::{Entry, SparseTensor, SplitSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("test entry ({user}, {service}, {time}) also appears in the training set")]
    Overlap {
        user: usize,
        service: usize,
        time: usize,
    },
    #[error("experiment needs at least one trial")]
    ZeroTrials,
    #[error(transparent)]
    Math(#[from] LftError),
}

/// Held-out entries the model is scored on.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSet {
    entries: Vec<Entry>,
}

impl EvaluationSet {
    /// At least one entry; metrics over an empty set are undefined.
    pub fn new(entries: Vec<Entry>) -> Result<Self, EvalError> {
        if entries.is_empty() {
            return Err(EvalError::EmptySet);
        }
        Ok(EvaluationSet { entries })
    }

    pub fn from_tensor(t: &SparseTensor) -> Result<Self, EvalError> {
        Self::new(t.entries().to_vec())
    }

    /// Builds the set and verifies it shares no coordinate with `train`.
    pub fn disjoint_from_train(entries: Vec<Entry>, train: &SparseTensor) -> Result<Self, EvalError> {
        let train_keys: alloc::collections::BTreeSet<(usize, usize, usize)> = train
            .entries()
            .iter()
            .map(|e| (e.user, e.service, e.time))
            .collect();
        for e in &entries {
            if train_keys.contains(&(e.user, e.service, e.time)) {
                return Err(EvalError::Overlap {
                    user: e.user,
                    service: e.service,
                    time: e.time,
                });
            }
        }
        Self::new(entries)
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

    fn sums(&self, f: &LatentFactors, clamp: Option<(f64, f64)>) -> Result<(f64, f64), EvalError> {
        error_sums(&self.entries, f, clamp).map_err(EvalError::from)
    }

    /// sqrt(Σ (y - ŷ)² / |ψ|)
    pub fn rmse(&self, f: &LatentFactors) -> Result<f64, EvalError> {
        let (sq, _) = self.sums(f, None)?;
        Ok(float::sqrt(sq / self.entries.len() as f64))
    }

    /// Σ |y - ŷ| / |ψ|
    pub fn mae(&self, f: &LatentFactors) -> Result<f64, EvalError> {
        let (_, ab) = self.sums(f, None)?;
        Ok(ab / self.entries.len() as f64)
    }

    /// Both metrics with predictions clamped to [lo, hi] first; a reporting
    /// convenience, never used in training.
    pub fn metrics_clamped(&self, f: &LatentFactors, lo: f64, hi: f64) -> Result<(f64, f64), EvalError> {
        let (sq, ab) = self.sums(f, Some((lo, hi)))?;
        let n = self.entries.len() as f64;
        Ok((float::sqrt(sq / n), ab / n))
    }
}

/// Squared and absolute residual sums in entry order.
pub(crate) fn error_sums(
    entries: &[Entry],
    f: &LatentFactors,
    clamp: Option<(f64, f64)>,
) -> Result<(f64, f64), LftError> {
    let mut sq = 0.0;
    let mut ab = 0.0;
    for e in entries {
        let mut yhat = predict(f, e.user, e.service, e.time)?;
        if let Some((lo, hi)) = clamp {
            yhat = yhat.max(lo).min(hi);
        }
        let r = e.value - yhat;
        sq += r * r;
        ab += float::abs(r);
    }
    Ok((sq, ab))
}

/// Train-set RMSE used for convergence monitoring.
pub(crate) fn rmse_over_entries(entries: &[Entry], f: &LatentFactors) -> Result<f64, LftError> {
    debug_assert!(!entries.is_empty());
    let (sq, _) = error_sums(entries, f, None)?;
    Ok(float::sqrt(sq / entries.len() as f64))
}

/// One row of a training run's progress table. Test metrics are present
/// only when a held-out set was supplied; byte counts are zero for the
/// centralized trainer, which moves nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub train_rmse: f64,
    pub test_rmse: Option<f64>,
    pub test_mae: Option<f64>,
    pub weighted_loss: f64,
    pub client_bytes_total: u64,
    pub server_bytes: u64,
}

/// One seeded split + training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: u64,
    pub final_test_rmse: f64,
    pub final_test_mae: f64,
    pub rounds: Vec<RoundReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub trials: Vec<TrialResult>,
    pub mean_test_rmse: f64,
    pub mean_test_mae: f64,
}

/// Runs `trials` independent trials: trial t splits the dataset with seed
/// `derive_seed(split.seed, t)` and trains with seed `derive_seed(hp.seed,
/// t)`, so the whole experiment replays from the two base seeds. `train_fn`
/// is the trainer under test (federated or centralized); it receives the
/// trial's train tensor, hyperparameters, and held-out set.
pub fn run_experiment<F>(
    dataset: &SparseTensor,
    hp: &Hyperparams,
    split: &SplitSpec,
    trials: u64,
    mut train_fn: F,
) -> Result<ExperimentReport, FedError>
where
    F: FnMut(&SparseTensor, &Hyperparams, Option<&EvaluationSet>) -> Result<(LatentFactors, Vec<RoundReport>), FedError>,
{
    if trials == 0 {
        return Err(EvalError::ZeroTrials.into());
    }
    let mut results = Vec::with_capacity(trials as usize);
    let mut rmse_sum = 0.0;
    let mut mae_sum = 0.0;
    for trial in 0..trials {
        let trial_split = SplitSpec::new(split.train_fraction(), derive_seed(split.seed, trial))
            .expect("fraction already validated");
        let (train, test) = dataset.split(&trial_split)?;
        let eval = EvaluationSet::from_tensor(&test)?;
        let trial_hp = Hyperparams {
            seed: derive_seed(hp.seed, trial),
            ..*hp
        };
        let (factors, rounds) = train_fn(&train, &trial_hp, Some(&eval))?;
        let final_test_rmse = eval.rmse(&factors)?;
        let final_test_mae = eval.mae(&factors)?;
        rmse_sum += final_test_rmse;
        mae_sum += final_test_mae;
        results.push(TrialResult {
            trial,
            final_test_rmse,
            final_test_mae,
            rounds,
        });
    }
    Ok(ExperimentReport {
        trials: results,
        mean_test_rmse: rmse_sum / trials as f64,
        mean_test_mae: mae_sum / trials as f64,
    })
}
