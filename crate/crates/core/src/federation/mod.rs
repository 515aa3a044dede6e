//! Round-based federated training.
//!
//! The server owns the service and time factor matrices; each client owns
//! one user's factor row and that user's observed entries, which never
//! leave the client. One round is: every client downloads the round-start
//! (service, time) snapshot, walks its shard in a seeded-shuffled order
//! stepping its own row locally while recording the service/time gradients
//! per visited element, and uploads those gradients; the server then applies
//! every surviving batch as individual SGD steps, batches in ascending user
//! order and records in upload order, and advances the round counter.
//!
//! Snapshot gradients plus the fixed application order make a round a pure
//! function of (tensor, hyperparams, options, dropout schedule), whether the
//! clients run on one thread or many.

pub mod transport;
pub mod wire;

use alloc::vec::Vec;

use crate::evaluation::{EvalError, EvaluationSet, RoundReport};
use crate::lft::{
    apply_step_in_place, element_visit, init_service_matrix, init_time_matrix, init_user_row,
    Hyperparams, LatentFactors, LftError, Matrix, STREAM_CLIENT_RNG,
};
use crate::seed::{derive_seed, shuffled_indices};
use crate::tensor::{SparseTensor, TensorError, UserShard};

#[cfg(feature = "std")]
pub use transport::InProcessTransport;
pub use transport::{MessageKind, MessageRecord, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FedError {
    #[error(transparent)]
    Math(#[from] LftError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("round mismatch: expected {expected}, got {got}")]
    RoundMismatch { expected: u64, got: u64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("invalid training options: {0}")]
    InvalidOptions(&'static str),
    #[error("no observed entries")]
    EmptyTensor,
}

/// Knobs of the training loop itself, separate from the model
/// hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    /// Passes over the shard per round. Above 1 a batch carries
    /// `local_epochs * |shard|` records, so the per-round byte formulas no
    /// longer apply verbatim.
    pub local_epochs: u32,
    /// Step the user row before computing the service/time gradients
    /// (which then see the refreshed prediction) instead of reading all
    /// three gradients at the same pre-update prediction.
    pub sequential_user_update: bool,
    /// Apply each client's batch as it arrives and let the next client
    /// download the already-updated model. Forces sequential execution.
    pub interleaved: bool,
    /// Stop once |Δ train RMSE| stays below this for `convergence_patience`
    /// consecutive rounds. Zero or negative disables early stopping.
    pub convergence_threshold: f64,
    pub convergence_patience: u32,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            local_epochs: 1,
            sequential_user_update: false,
            interleaved: false,
            convergence_threshold: 1e-5,
            convergence_patience: 3,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.local_epochs == 0 {
            return Err(FedError::InvalidOptions("local_epochs must be at least 1"));
        }
        if self.convergence_patience == 0 {
            return Err(FedError::InvalidOptions("convergence_patience must be at least 1"));
        }
        if self.convergence_threshold.is_nan() {
            return Err(FedError::InvalidOptions("convergence_threshold must be a number"));
        }
        Ok(())
    }
}

/// Early-stop rule shared by the federated and centralized loops: stop after
/// `patience` consecutive rounds whose train-RMSE change is below the
/// threshold.
pub(crate) struct ConvergenceTracker {
    threshold: f64,
    patience: u32,
    streak: u32,
    prev: Option<f64>,
}

impl ConvergenceTracker {
    pub(crate) fn new(opts: &TrainOptions) -> Self {
        ConvergenceTracker {
            threshold: opts.convergence_threshold,
            patience: opts.convergence_patience,
            streak: 0,
            prev: None,
        }
    }

    pub(crate) fn observe(&mut self, train_rmse: f64) -> bool {
        if self.threshold <= 0.0 {
            return false;
        }
        if let Some(prev) = self.prev {
            if crate::float::abs(prev - train_rmse) < self.threshold {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        self.prev = Some(train_rmse);
        self.streak >= self.patience
    }
}

/// Round-start model snapshot a client downloads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDownload {
    pub services: Matrix,
    pub times: Matrix,
    pub round: u64,
}

/// One visited element's uploadable gradients. Exactly these four fields:
/// the schema has no slot that could carry an observed value.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub service: usize,
    pub time: usize,
    pub service_grad: Vec<f64>,
    pub time_grad: Vec<f64>,
}

/// Everything one client uploads in one round, in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    pub user: usize,
    pub round: u64,
    pub items: Vec<GradientRecord>,
}

/// Per-round payload accounting, reconstructed from a transport log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommLedger {
    pub round: u64,
    pub per_client_bytes: alloc::collections::BTreeMap<usize, u64>,
    pub server_bytes: u64,
}

impl CommLedger {
    /// Sums delivered payload bytes for `round`: per client both directions
    /// it participated in, and in total for the server, which sees every
    /// message once.
    pub fn from_log(log: &[MessageRecord], round: u64) -> Self {
        let mut per_client_bytes = alloc::collections::BTreeMap::new();
        let mut server_bytes = 0u64;
        for m in log.iter().filter(|m| m.round == round) {
            *per_client_bytes.entry(m.user).or_insert(0) += m.payload_bytes;
            server_bytes += m.payload_bytes;
        }
        CommLedger {
            round,
            per_client_bytes,
            server_bytes,
        }
    }
}

/// Declared per-round cost of one client in bytes: downloading the service
/// and time matrices plus uploading one (service, time) gradient pair per
/// observed element, at 8 bytes per real.
pub fn client_bytes_per_round(rank: u64, num_services: u64, num_times: u64, shard_len: u64) -> u64 {
    8 * rank * (num_services + num_times + 2 * shard_len)
}

/// Declared per-round cost on the server side: the client formula summed
/// over all clients. `shard_sizes` must have one entry per user.
pub fn server_bytes_per_round(
    rank: u64,
    num_users: u64,
    num_services: u64,
    num_times: u64,
    shard_sizes: &[u64],
) -> Result<u64, FedError> {
    if shard_sizes.len() as u64 != num_users {
        return Err(LftError::LengthMismatch {
            left: num_users as usize,
            right: shard_sizes.len(),
        }
        .into());
    }
    Ok(shard_sizes
        .iter()
        .map(|&len| 8 * rank * (num_services + num_times) + 16 * rank * len)
        .sum())
}

pub(crate) fn client_rng_seed(base_seed: u64, user: usize) -> u64 {
    derive_seed(derive_seed(base_seed, STREAM_CLIENT_RNG), user as u64)
}

/// Shuffle seed for one pass of one round. The first pass is seeded directly
/// by (client seed, round); extra local passes derive further by pass index.
pub(crate) fn pass_shuffle_seed(rng_seed: u64, round: u64, pass: u32) -> u64 {
    let round_seed = derive_seed(rng_seed, round);
    if pass == 0 {
        round_seed
    } else {
        derive_seed(round_seed, pass as u64)
    }
}

/// Server half of the protocol: the shared service/time matrices and the
/// round counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    services: Matrix,
    times: Matrix,
    round: u64,
    hp: Hyperparams,
}

impl ServerState {
    pub fn init(shape: &crate::tensor::Shape, hp: &Hyperparams) -> Result<Self, FedError> {
        hp.validate()?;
        Ok(ServerState {
            services: init_service_matrix(shape.num_services, hp.rank, hp.seed, hp.init_scale),
            times: init_time_matrix(shape.num_times, hp.rank, hp.seed, hp.init_scale),
            round: 0,
            hp: *hp,
        })
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn services(&self) -> &Matrix {
        &self.services
    }

    pub fn times(&self) -> &Matrix {
        &self.times
    }

    /// Snapshot for clients to train against this round.
    pub fn download(&self) -> ModelDownload {
        ModelDownload {
            services: self.services.clone(),
            times: self.times.clone(),
            round: self.round,
        }
    }

    /// Applies one batch's records, in upload order, as individual SGD
    /// steps on the live matrices. Later records touching the same row see
    /// the earlier steps.
    pub fn apply_batch(&mut self, batch: &GradientBatch) -> Result<(), FedError> {
        if batch.round != self.round {
            return Err(FedError::RoundMismatch {
                expected: self.round,
                got: batch.round,
            });
        }
        let rank = self.hp.rank;
        for rec in &batch.items {
            if rec.service_grad.len() != rank || rec.time_grad.len() != rank {
                return Err(FedError::DimensionMismatch("gradient record width"));
            }
            if rec.service >= self.services.rows() {
                return Err(FedError::DimensionMismatch("service index in batch"));
            }
            if rec.time >= self.times.rows() {
                return Err(FedError::DimensionMismatch("time index in batch"));
            }
            apply_step_in_place(
                self.services.row_mut(rec.service),
                &rec.service_grad,
                self.hp.learning_rate,
            );
            apply_step_in_place(self.times.row_mut(rec.time), &rec.time_grad, self.hp.learning_rate);
        }
        Ok(())
    }

    pub fn advance_round(&mut self) {
        self.round += 1;
    }
}

/// Applies a whole round's surviving batches in ascending user order and
/// advances the round counter.
pub fn server_round(server: &mut ServerState, mut batches: Vec<GradientBatch>) -> Result<(), FedError> {
    batches.sort_by_key(|b| b.user);
    for batch in &batches {
        server.apply_batch(batch)?;
    }
    server.advance_round();
    Ok(())
}

/// Client half of the protocol: one user's factor row, shard, and RNG seed.
/// The shard never leaves this struct.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    user: usize,
    user_factor: Vec<f64>,
    shard: UserShard,
    rng_seed: u64,
    round: u64,
    max_service: usize,
    max_time: usize,
}

impl ClientState {
    pub fn init(shard: UserShard, hp: &Hyperparams) -> Result<Self, FedError> {
        hp.validate()?;
        let user = shard.user;
        let (max_service, max_time) = shard.entries.iter().fold((0, 0), |(s, t), e| {
            (s.max(e.service), t.max(e.time))
        });
        Ok(ClientState {
            user,
            user_factor: init_user_row(user, hp.rank, hp.seed, hp.init_scale),
            shard,
            rng_seed: client_rng_seed(hp.seed, user),
            round: 0,
            max_service,
            max_time,
        })
    }

    pub fn user(&self) -> usize {
        self.user
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn user_factor(&self) -> &[f64] {
        &self.user_factor
    }

    pub fn shard(&self) -> &UserShard {
        &self.shard
    }

    /// Advances the round counter without training, keeping an offline
    /// client in lockstep with the server.
    pub fn idle_round(&mut self) {
        self.round += 1;
    }

    /// One local round: walk the shard in this round's shuffled order,
    /// stepping the own row per element and recording the service/time
    /// gradients, all against the downloaded snapshot. Returns the upload;
    /// the snapshot itself is left untouched.
    pub fn run_round(
        &mut self,
        dl: &ModelDownload,
        hp: &Hyperparams,
        opts: &TrainOptions,
    ) -> Result<GradientBatch, FedError> {
        if dl.round != self.round {
            return Err(FedError::RoundMismatch {
                expected: self.round,
                got: dl.round,
            });
        }
        if dl.services.cols() != hp.rank
            || dl.times.cols() != hp.rank
            || self.user_factor.len() != hp.rank
        {
            return Err(FedError::DimensionMismatch("factor rank"));
        }
        if !self.shard.is_empty()
            && (self.max_service >= dl.services.rows() || self.max_time >= dl.times.rows())
        {
            return Err(FedError::DimensionMismatch("shard index vs downloaded model"));
        }
        let mut items = Vec::with_capacity(self.shard.len() * opts.local_epochs as usize);
        for pass in 0..opts.local_epochs {
            let seed = pass_shuffle_seed(self.rng_seed, self.round, pass);
            for &idx in shuffled_indices(self.shard.len(), seed).iter() {
                let entry = self.shard.entries[idx];
                let mut service_grad = Vec::with_capacity(hp.rank);
                let mut time_grad = Vec::with_capacity(hp.rank);
                element_visit(
                    entry.value,
                    &mut self.user_factor,
                    dl.services.row(entry.service),
                    dl.times.row(entry.time),
                    hp.learning_rate,
                    hp.regularization,
                    opts.sequential_user_update,
                    &mut service_grad,
                    &mut time_grad,
                );
                items.push(GradientRecord {
                    service: entry.service,
                    time: entry.time,
                    service_grad,
                    time_grad,
                });
            }
        }
        let batch = GradientBatch {
            user: self.user,
            round: self.round,
            items,
        };
        self.round += 1;
        Ok(batch)
    }
}

/// What happened to one client in one round.
#[derive(Debug)]
pub enum ClientOutcome {
    /// Batch reached the server.
    Delivered(GradientBatch),
    /// Client trained but the upload was lost; its local row update stands.
    UploadDropped,
    /// Download failed; the client sat the round out.
    Offline,
}

/// Runs every client's per-round job, returning outcomes in client order.
/// Implementations may parallelize; the order of the returned vector, not
/// the execution schedule, is what the server consumes.
pub trait ClientExecutor {
    fn run_round(
        &self,
        clients: &mut [ClientState],
        job: &(dyn Fn(&mut ClientState) -> Result<ClientOutcome, FedError> + Sync),
    ) -> Vec<Result<ClientOutcome, FedError>>;
}

/// Single-threaded executor; the reference schedule.
#[derive(Debug, Default, Clone, Copy)]
pub struct SequentialExecutor;

impl ClientExecutor for SequentialExecutor {
    fn run_round(
        &self,
        clients: &mut [ClientState],
        job: &(dyn Fn(&mut ClientState) -> Result<ClientOutcome, FedError> + Sync),
    ) -> Vec<Result<ClientOutcome, FedError>> {
        clients.iter_mut().map(job).collect()
    }
}

/// Gathers the user rows next to the server matrices for offline
/// evaluation. This is an export step outside the protocol: user rows never
/// travel through a [`Transport`], which the message log can prove.
pub fn assemble_factors(clients: &[ClientState], server: &ServerState) -> LatentFactors {
    let rank = server.services.cols();
    let mut users = Vec::with_capacity(clients.len() * rank);
    for c in clients {
        users.extend_from_slice(&c.user_factor);
    }
    LatentFactors {
        users: Matrix::from_vec(clients.len(), rank, users).expect("sized above"),
        services: server.services.clone(),
        times: server.times.clone(),
    }
}

pub(crate) fn round_report(
    round: u64,
    train: &SparseTensor,
    shards: &[UserShard],
    factors: &LatentFactors,
    hp: &Hyperparams,
    test: Option<&EvaluationSet>,
    bytes: u64,
) -> Result<RoundReport, FedError> {
    let train_rmse = crate::evaluation::rmse_over_entries(train.entries(), factors)?;
    let (test_rmse, test_mae) = match test {
        Some(set) => (Some(set.rmse(factors)?), Some(set.mae(factors)?)),
        None => (None, None),
    };
    let weighted_loss = crate::lft::weighted_federated_loss(shards, factors, hp.regularization)?;
    Ok(RoundReport {
        round,
        train_rmse,
        test_rmse,
        test_mae,
        weighted_loss,
        client_bytes_total: bytes,
        server_bytes: bytes,
    })
}

/// Full federated training: initializes server and clients from the seed,
/// runs rounds until `hp.max_rounds` or convergence, and returns the
/// assembled factors plus one report per completed round.
///
/// Disconnections reported by the transport are dropout, not failure: an
/// unreachable client idles (download lost) or keeps only its local update
/// (upload lost), and the round completes with the surviving batches.
pub fn run_training<T, X>(
    train: &SparseTensor,
    hp: &Hyperparams,
    opts: &TrainOptions,
    transport: &T,
    executor: &X,
    test: Option<&EvaluationSet>,
) -> Result<(LatentFactors, Vec<RoundReport>), FedError>
where
    T: Transport + Sync + ?Sized,
    X: ClientExecutor + ?Sized,
{
    hp.validate()?;
    opts.validate()?;
    if train.is_empty() {
        return Err(FedError::EmptyTensor);
    }
    let shards = train.partition_by_user();
    let mut server = ServerState::init(train.shape(), hp)?;
    let mut clients = shards
        .iter()
        .map(|s| ClientState::init(s.clone(), hp))
        .collect::<Result<Vec<_>, _>>()?;
    let mut reports = Vec::new();
    let mut tracker = ConvergenceTracker::new(opts);

    for _ in 0..hp.max_rounds {
        let round = server.round();
        if opts.interleaved {
            for client in clients.iter_mut() {
                let dl = server.download();
                match transport.send_download(client.user(), &dl) {
                    Ok(received) => {
                        let batch = client.run_round(&received, hp, opts)?;
                        match transport.send_batch(batch) {
                            Ok(received) => server.apply_batch(&received)?,
                            Err(TransportError::Disconnected { .. }) => {}
                            Err(e) => return Err(e.into()),
                        }
                    }
                    Err(TransportError::Disconnected { .. }) => client.idle_round(),
                    Err(e) => return Err(e.into()),
                }
            }
            server.advance_round();
        } else {
            let dl = server.download();
            let job = |client: &mut ClientState| -> Result<ClientOutcome, FedError> {
                let received = match transport.send_download(client.user(), &dl) {
                    Ok(received) => received,
                    Err(TransportError::Disconnected { .. }) => {
                        client.idle_round();
                        return Ok(ClientOutcome::Offline);
                    }
                    Err(e) => return Err(e.into()),
                };
                let batch = client.run_round(&received, hp, opts)?;
                match transport.send_batch(batch) {
                    Ok(received) => Ok(ClientOutcome::Delivered(received)),
                    Err(TransportError::Disconnected { .. }) => Ok(ClientOutcome::UploadDropped),
                    Err(e) => Err(e.into()),
                }
            };
            let outcomes = executor.run_round(&mut clients, &job);
            let mut batches = Vec::new();
            for outcome in outcomes {
                if let ClientOutcome::Delivered(batch) = outcome? {
                    batches.push(batch);
                }
            }
            server_round(&mut server, batches)?;
        }

        let factors = assemble_factors(&clients, &server);
        let bytes = transport.round_payload_bytes(round);
        let report = round_report(round, train, &shards, &factors, hp, test, bytes)?;
        let train_rmse = report.train_rmse;
        reports.push(report);
        if tracker.observe(train_rmse) {
            break;
        }
    }

    Ok((assemble_factors(&clients, &server), reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lft::{apply_step, element_gradients, init_factors};
    use crate::tensor::{Entry, Shape};
    use alloc::vec;

    fn hp(rank: usize, eta: f64, reg: f64, seed: u64) -> Hyperparams {
        Hyperparams {
            rank,
            learning_rate: eta,
            regularization: reg,
            seed,
            ..Hyperparams::default()
        }
    }

    fn ones_download(num_services: usize, num_times: usize, round: u64) -> ModelDownload {
        ModelDownload {
            services: Matrix::from_vec(num_services, 1, vec![1.0; num_services]).unwrap(),
            times: Matrix::from_vec(num_times, 1, vec![1.0; num_times]).unwrap(),
            round,
        }
    }

    fn one_entry_client(value: f64, hp: &Hyperparams) -> ClientState {
        let shard = UserShard {
            user: 0,
            entries: vec![Entry {
                user: 0,
                service: 0,
                time: 0,
                value,
            }],
        };
        let mut c = ClientState::init(shard, hp).unwrap();
        // Pin the row for hand-traced arithmetic.
        c.user_factor = vec![1.0];
        c
    }

    #[test]
    fn empty_shard_round_uploads_an_empty_batch() {
        let h = hp(1, 0.1, 0.0, 7);
        let mut c = ClientState::init(UserShard { user: 3, entries: vec![] }, &h).unwrap();
        let before = c.user_factor().to_vec();
        let batch = c.run_round(&ones_download(2, 2, 0), &h, &TrainOptions::default()).unwrap();
        assert_eq!(batch.user, 3);
        assert_eq!(batch.round, 0);
        assert!(batch.items.is_empty());
        assert_eq!(c.user_factor(), before.as_slice());
        assert_eq!(c.round(), 1);
    }

    #[test]
    fn zero_residual_round_records_zero_gradients() {
        let h = hp(1, 0.1, 0.0, 7);
        let mut c = one_entry_client(1.0, &h);
        let batch = c.run_round(&ones_download(1, 1, 0), &h, &TrainOptions::default()).unwrap();
        assert_eq!(c.user_factor(), [1.0]);
        assert_eq!(batch.items.len(), 1);
        assert_eq!(batch.items[0].service_grad, [0.0]);
        assert_eq!(batch.items[0].time_grad, [0.0]);
    }

    #[test]
    fn single_entry_round_matches_hand_trace() {
        // y=2 against all-ones rank-1 factors at eta=0.1: the own row steps
        // to 1.1 and both uploaded gradients are -1, read before the step.
        let h = hp(1, 0.1, 0.0, 7);
        let mut c = one_entry_client(2.0, &h);
        let batch = c.run_round(&ones_download(1, 1, 0), &h, &TrainOptions::default()).unwrap();
        assert_eq!(c.user_factor(), [1.1]);
        assert_eq!(batch.items[0].service_grad, [-1.0]);
        assert_eq!(batch.items[0].time_grad, [-1.0]);
        assert_eq!((batch.items[0].service, batch.items[0].time), (0, 0));
    }

    #[test]
    fn client_rejects_stale_or_misshapen_downloads() {
        let h = hp(1, 0.1, 0.0, 7);
        let mut c = one_entry_client(2.0, &h);
        assert!(matches!(
            c.run_round(&ones_download(1, 1, 5), &h, &TrainOptions::default()),
            Err(FedError::RoundMismatch { expected: 0, got: 5 })
        ));
        let wide = ModelDownload {
            services: Matrix::zeros(1, 2),
            times: Matrix::zeros(1, 2),
            round: 0,
        };
        assert!(matches!(
            c.run_round(&wide, &h, &TrainOptions::default()),
            Err(FedError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn batch_carries_one_record_per_entry_per_pass() {
        let h = hp(2, 0.01, 0.0, 9);
        let shard = UserShard {
            user: 0,
            entries: (0..5)
                .map(|i| Entry { user: 0, service: i, time: i % 2, value: i as f64 })
                .collect(),
        };
        let mut c = ClientState::init(shard, &h).unwrap();
        let dl = ModelDownload {
            services: init_factors(&Shape::new(1, 5, 2).unwrap(), &h).unwrap().services,
            times: init_factors(&Shape::new(1, 5, 2).unwrap(), &h).unwrap().times,
            round: 0,
        };
        let batch = c.run_round(&dl, &h, &TrainOptions::default()).unwrap();
        assert_eq!(batch.items.len(), 5);

        let mut c2 = ClientState::init(
            UserShard {
                user: 0,
                entries: (0..5)
                    .map(|i| Entry { user: 0, service: i, time: i % 2, value: i as f64 })
                    .collect(),
            },
            &h,
        )
        .unwrap();
        let two_passes = TrainOptions { local_epochs: 2, ..TrainOptions::default() };
        let batch = c2.run_round(&dl, &h, &two_passes).unwrap();
        assert_eq!(batch.items.len(), 10);
    }

    #[test]
    fn server_round_without_batches_only_advances_the_counter() {
        let h = hp(2, 0.1, 0.0, 11);
        let mut s = ServerState::init(&Shape::new(2, 3, 4).unwrap(), &h).unwrap();
        let before = s.download();
        server_round(&mut s, vec![]).unwrap();
        assert_eq!(s.round(), 1);
        assert_eq!(s.services(), &before.services);
        assert_eq!(s.times(), &before.times);
    }

    #[test]
    fn server_applies_records_as_individual_steps() {
        let h = hp(1, 0.1, 0.0, 11);
        let mut s = ServerState::init(&Shape::new(1, 1, 1).unwrap(), &h).unwrap();
        // Overwrite to unit values for hand arithmetic.
        s.services = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        s.times = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let batch = GradientBatch {
            user: 0,
            round: 0,
            items: vec![GradientRecord {
                service: 0,
                time: 0,
                service_grad: vec![-1.0],
                time_grad: vec![-1.0],
            }],
        };
        server_round(&mut s, vec![batch]).unwrap();
        assert_eq!(s.services().row(0), [1.1]);
        assert_eq!(s.times().row(0), [1.1]);
    }

    #[test]
    fn second_record_on_a_slot_sees_the_first_step() {
        let h = hp(1, 0.5, 0.0, 11);
        let mut s = ServerState::init(&Shape::new(1, 1, 1).unwrap(), &h).unwrap();
        s.services = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        s.times = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let rec = |sg: f64, tg: f64| GradientRecord {
            service: 0,
            time: 0,
            service_grad: vec![sg],
            time_grad: vec![tg],
        };
        let batch = GradientBatch {
            user: 0,
            round: 0,
            items: vec![rec(1.0, 0.0), rec(1.0, -2.0)],
        };
        server_round(&mut s, vec![batch]).unwrap();
        // service: 1.0 -> 0.5 -> 0.0; time: 2.0 -> 2.0 -> 3.0.
        assert_eq!(s.services().row(0), [0.0]);
        assert_eq!(s.times().row(0), [3.0]);
    }

    #[test]
    fn server_rejects_wrong_round_or_shape() {
        let h = hp(2, 0.1, 0.0, 11);
        let mut s = ServerState::init(&Shape::new(1, 2, 2).unwrap(), &h).unwrap();
        let batch = GradientBatch { user: 0, round: 3, items: vec![] };
        assert!(matches!(
            s.apply_batch(&batch),
            Err(FedError::RoundMismatch { expected: 0, got: 3 })
        ));
        let bad = GradientBatch {
            user: 0,
            round: 0,
            items: vec![GradientRecord {
                service: 9,
                time: 0,
                service_grad: vec![0.0; 2],
                time_grad: vec![0.0; 2],
            }],
        };
        assert!(matches!(s.apply_batch(&bad), Err(FedError::DimensionMismatch(_))));
    }

    #[test]
    fn byte_formulas_match_pinned_arithmetic() {
        assert_eq!(client_bytes_per_round(10, 5, 4, 3), 1200);
        assert_eq!(client_bytes_per_round(10, 5, 4, 0), 8 * 10 * 9);
        // Doubling the shard adds exactly 16 * R * shard bytes.
        let base = client_bytes_per_round(7, 13, 5, 21);
        assert_eq!(client_bytes_per_round(7, 13, 5, 42), base + 16 * 7 * 21);

        assert_eq!(
            server_bytes_per_round(10, 1, 5, 4, &[3]).unwrap(),
            client_bytes_per_round(10, 5, 4, 3)
        );
        assert_eq!(server_bytes_per_round(10, 2, 5, 4, &[3, 3]).unwrap(), 2400);
        assert!(server_bytes_per_round(10, 3, 5, 4, &[3, 3]).is_err());
    }

    #[test]
    fn client_round_gradients_agree_with_the_factor_level_ops() {
        // The client path must be the same arithmetic as element_gradients
        // plus apply_step on a one-entry shard.
        let h = hp(3, 0.05, 0.2, 21);
        let shape = Shape::new(1, 2, 2).unwrap();
        let f = init_factors(&shape, &h).unwrap();
        let entry = Entry { user: 0, service: 1, time: 0, value: 1.25 };
        let g = element_gradients(entry.value, &f, 0, 1, 0, h.regularization).unwrap();
        let expected_row = apply_step(f.users.row(0), &g.wrt_user, h.learning_rate).unwrap();

        let mut c = ClientState::init(UserShard { user: 0, entries: vec![entry] }, &h).unwrap();
        let dl = ModelDownload { services: f.services.clone(), times: f.times.clone(), round: 0 };
        let batch = c.run_round(&dl, &h, &TrainOptions::default()).unwrap();
        assert_eq!(c.user_factor(), expected_row.as_slice());
        assert_eq!(batch.items[0].service_grad, g.wrt_service);
        assert_eq!(batch.items[0].time_grad, g.wrt_time);

        // And the server applies them exactly as apply_step does.
        let mut s = ServerState::init(&shape, &h).unwrap();
        let expected_service =
            apply_step(s.services().row(1), &g.wrt_service, h.learning_rate).unwrap();
        server_round(&mut s, vec![batch]).unwrap();
        assert_eq!(s.services().row(1), expected_service.as_slice());
    }

    #[test]
    fn convergence_tracker_needs_a_full_quiet_streak() {
        let opts = TrainOptions {
            convergence_threshold: 1e-3,
            convergence_patience: 3,
            ..TrainOptions::default()
        };
        let mut t = ConvergenceTracker::new(&opts);
        assert!(!t.observe(1.0));
        assert!(!t.observe(1.00001));
        assert!(!t.observe(1.00001));
        // Third consecutive quiet delta fires.
        assert!(t.observe(1.00002));

        let mut t = ConvergenceTracker::new(&opts);
        assert!(!t.observe(1.0));
        assert!(!t.observe(1.00001));
        assert!(!t.observe(0.5));
        assert!(!t.observe(0.50001));
        assert!(!t.observe(0.50001));
        assert!(t.observe(0.50002));

        let disabled = TrainOptions { convergence_threshold: 0.0, ..opts };
        let mut t = ConvergenceTracker::new(&disabled);
        for _ in 0..100 {
            assert!(!t.observe(1.0));
        }
    }

    #[test]
    fn ledger_reconstruction_groups_by_round_and_user() {
        let log = vec![
            MessageRecord { kind: MessageKind::ModelDownload, user: 0, round: 0, payload_bytes: 100, overhead_bytes: 0 },
            MessageRecord { kind: MessageKind::GradientBatch, user: 0, round: 0, payload_bytes: 40, overhead_bytes: 0 },
            MessageRecord { kind: MessageKind::ModelDownload, user: 1, round: 0, payload_bytes: 100, overhead_bytes: 0 },
            MessageRecord { kind: MessageKind::ModelDownload, user: 0, round: 1, payload_bytes: 100, overhead_bytes: 0 },
        ];
        let ledger = CommLedger::from_log(&log, 0);
        assert_eq!(ledger.per_client_bytes[&0], 140);
        assert_eq!(ledger.per_client_bytes[&1], 100);
        assert_eq!(ledger.server_bytes, 240);
    }
}
