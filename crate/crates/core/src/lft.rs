//! Rank-R factor model numerics.
//!
//! A prediction for cell (i, j, k) is the triple inner product of row i of
//! the user factors, row j of the service factors, and row k of the time
//! factors. Training minimizes squared error over observed entries plus an
//! L2 penalty on the three participating rows, by per-element SGD.
//!
//! Gradients here are the gradients of the half-quadratic objective: the
//! factor two from differentiating the squared error is folded into the
//! learning rate, so a central finite difference of [`element_loss`] equals
//! exactly twice each [`element_gradients`] component. Every training path
//! (federated client, server application, both centralized modes) funnels
//! through the same kernels in the same order, which is what makes matched
//! runs bit-identical.

use alloc::vec;
use alloc::vec::Vec;

use crate::seed::{derive_seed, rng_from, unit_open_closed};
use crate::tensor::{Shape, SparseTensor, UserShard};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LftError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(&'static str),
    #[error("{axis} index {index} out of bounds for {len} rows")]
    IndexOutOfBounds {
        axis: &'static str,
        index: usize,
        len: usize,
    },
    #[error("vector lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{what}: expected {expected} rows, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no observed entries")]
    EmptyTensor,
}

/// Training knobs shared by every trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub rank: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub max_rounds: u64,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            rank: 20,
            learning_rate: 0.00038,
            regularization: 0.001,
            max_rounds: 500,
            seed: 0,
            init_scale: 0.004,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), LftError> {
        if self.rank == 0 {
            return Err(LftError::InvalidHyperparams("rank must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LftError::InvalidHyperparams("learning rate must be positive"));
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return Err(LftError::InvalidHyperparams("regularization must be non-negative"));
        }
        if self.max_rounds == 0 {
            return Err(LftError::InvalidHyperparams("max rounds must be at least 1"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(LftError::InvalidHyperparams("init scale must be positive"));
        }
        Ok(())
    }
}

/// Dense row-major matrix; rows are factor vectors of length `cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LftError> {
        if data.len() != rows * cols {
            return Err(LftError::LengthMismatch {
                left: rows * cols,
                right: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// The three factor matrices of one model: per-user, per-service, and
/// per-time rows, all of width `rank()`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFactors {
    pub users: Matrix,
    pub services: Matrix,
    pub times: Matrix,
}

impl LatentFactors {
    pub fn rank(&self) -> usize {
        self.users.cols()
    }

    fn check_bounds(&self, user: usize, service: usize, time: usize) -> Result<(), LftError> {
        if user >= self.users.rows() {
            return Err(LftError::IndexOutOfBounds {
                axis: "user",
                index: user,
                len: self.users.rows(),
            });
        }
        if service >= self.services.rows() {
            return Err(LftError::IndexOutOfBounds {
                axis: "service",
                index: service,
                len: self.services.rows(),
            });
        }
        if time >= self.times.rows() {
            return Err(LftError::IndexOutOfBounds {
                axis: "time",
                index: time,
                len: self.times.rows(),
            });
        }
        Ok(())
    }
}

/// Per-element gradients with respect to the three participating rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementGradients {
    pub wrt_user: Vec<f64>,
    pub wrt_service: Vec<f64>,
    pub wrt_time: Vec<f64>,
}

fn fill_uniform(rng: &mut rand_chacha::ChaCha8Rng, scale: f64, out: &mut Vec<f64>, count: usize) {
    for _ in 0..count {
        out.push(scale * unit_open_closed(rng));
    }
}

/// Seed streams for factor initialization. User rows get a per-row stream so
/// a federated client can reproduce its own row without seeing the others.
pub(crate) const STREAM_SERVICE_INIT: u64 = 1;
pub(crate) const STREAM_TIME_INIT: u64 = 2;
pub(crate) const STREAM_USER_INIT: u64 = 3;
pub(crate) const STREAM_CLIENT_RNG: u64 = 4;

/// Initial value for one user row, as the owning client would draw it.
pub(crate) fn init_user_row(user: usize, rank: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = rng_from(derive_seed(derive_seed(seed, STREAM_USER_INIT), user as u64));
    let mut row = Vec::with_capacity(rank);
    fill_uniform(&mut rng, scale, &mut row, rank);
    row
}

pub(crate) fn init_service_matrix(num_services: usize, rank: usize, seed: u64, scale: f64) -> Matrix {
    let mut rng = rng_from(derive_seed(seed, STREAM_SERVICE_INIT));
    let mut data = Vec::with_capacity(num_services * rank);
    fill_uniform(&mut rng, scale, &mut data, num_services * rank);
    Matrix::from_vec(num_services, rank, data).expect("sized above")
}

pub(crate) fn init_time_matrix(num_times: usize, rank: usize, seed: u64, scale: f64) -> Matrix {
    let mut rng = rng_from(derive_seed(seed, STREAM_TIME_INIT));
    let mut data = Vec::with_capacity(num_times * rank);
    fill_uniform(&mut rng, scale, &mut data, num_times * rank);
    Matrix::from_vec(num_times, rank, data).expect("sized above")
}

/// Draws every factor entry i.i.d. uniform from (0, init_scale], fully
/// determined by `hp.seed`. Service and time matrices each consume one
/// derived stream; each user row consumes its own, so the same row comes out
/// whether initialization happens here or on the row's client.
pub fn init_factors(shape: &Shape, hp: &Hyperparams) -> Result<LatentFactors, LftError> {
    hp.validate()?;
    let mut users = Vec::with_capacity(shape.num_users * hp.rank);
    for user in 0..shape.num_users {
        users.extend_from_slice(&init_user_row(user, hp.rank, hp.seed, hp.init_scale));
    }
    Ok(LatentFactors {
        users: Matrix::from_vec(shape.num_users, hp.rank, users).expect("sized above"),
        services: init_service_matrix(shape.num_services, hp.rank, hp.seed, hp.init_scale),
        times: init_time_matrix(shape.num_times, hp.rank, hp.seed, hp.init_scale),
    })
}

/// Triple inner product of three rows. Every prediction in the crate goes
/// through this one loop so accumulation order never varies.
#[inline]
pub fn predict_rows(user_row: &[f64], service_row: &[f64], time_row: &[f64]) -> f64 {
    let mut acc = 0.0;
    for r in 0..user_row.len() {
        acc += user_row[r] * service_row[r] * time_row[r];
    }
    acc
}

/// Model prediction for cell (user, service, time).
pub fn predict(f: &LatentFactors, user: usize, service: usize, time: usize) -> Result<f64, LftError> {
    f.check_bounds(user, service, time)?;
    Ok(predict_rows(
        f.users.row(user),
        f.services.row(service),
        f.times.row(time),
    ))
}

#[inline]
fn rows_l2(user_row: &[f64], service_row: &[f64], time_row: &[f64]) -> f64 {
    let mut acc = 0.0;
    for r in 0..user_row.len() {
        acc += user_row[r] * user_row[r]
            + service_row[r] * service_row[r]
            + time_row[r] * time_row[r];
    }
    acc
}

#[inline]
pub(crate) fn element_loss_rows(
    y: f64,
    user_row: &[f64],
    service_row: &[f64],
    time_row: &[f64],
    reg: f64,
) -> f64 {
    let residual = y - predict_rows(user_row, service_row, time_row);
    residual * residual + reg * rows_l2(user_row, service_row, time_row)
}

/// Squared error of one observed entry plus the L2 penalty on the three rows
/// it touches: (y - yhat)^2 + reg * (|d_i|^2 + |e_j|^2 + |t_k|^2).
pub fn element_loss(
    y: f64,
    f: &LatentFactors,
    user: usize,
    service: usize,
    time: usize,
    reg: f64,
) -> Result<f64, LftError> {
    f.check_bounds(user, service, time)?;
    Ok(element_loss_rows(
        y,
        f.users.row(user),
        f.services.row(service),
        f.times.row(time),
        reg,
    ))
}

/// Gradients of the half-quadratic element objective, all three rows read at
/// the same pre-update prediction. Componentwise:
/// `wrt_user[r] = (y - yhat) * -(e_jr * t_kr) + reg * d_ir`, and cyclically
/// for the service and time rows.
pub fn element_gradients(
    y: f64,
    f: &LatentFactors,
    user: usize,
    service: usize,
    time: usize,
    reg: f64,
) -> Result<ElementGradients, LftError> {
    f.check_bounds(user, service, time)?;
    let d = f.users.row(user);
    let e = f.services.row(service);
    let t = f.times.row(time);
    let residual = y - predict_rows(d, e, t);
    let rank = d.len();
    let mut wrt_user = Vec::with_capacity(rank);
    let mut wrt_service = Vec::with_capacity(rank);
    let mut wrt_time = Vec::with_capacity(rank);
    for r in 0..rank {
        wrt_user.push(residual * -(e[r] * t[r]) + reg * d[r]);
        wrt_service.push(residual * -(d[r] * t[r]) + reg * e[r]);
        wrt_time.push(residual * -(d[r] * e[r]) + reg * t[r]);
    }
    Ok(ElementGradients {
        wrt_user,
        wrt_service,
        wrt_time,
    })
}

/// `v - eta * g`, componentwise.
pub fn apply_step(v: &[f64], g: &[f64], eta: f64) -> Result<Vec<f64>, LftError> {
    if v.len() != g.len() {
        return Err(LftError::LengthMismatch {
            left: v.len(),
            right: g.len(),
        });
    }
    Ok(v.iter().zip(g).map(|(v, g)| v - eta * g).collect())
}

/// In-place [`apply_step`]; lengths must already match.
#[inline]
pub fn apply_step_in_place(v: &mut [f64], g: &[f64], eta: f64) {
    debug_assert_eq!(v.len(), g.len());
    for r in 0..v.len() {
        v[r] -= eta * g[r];
    }
}

/// One SGD visit of a single observed element, shared by every trainer.
///
/// Computes the service/time gradients into `wrt_service`/`wrt_time`
/// (cleared first) and steps the user row in place. In the default
/// simultaneous mode all three gradients come from the same pre-update
/// prediction. In sequential mode the user row is stepped first and the
/// service/time gradients are recomputed at the refreshed prediction.
#[inline]
pub(crate) fn element_visit(
    y: f64,
    user_row: &mut [f64],
    service_row: &[f64],
    time_row: &[f64],
    eta: f64,
    reg: f64,
    sequential_user_update: bool,
    wrt_service: &mut Vec<f64>,
    wrt_time: &mut Vec<f64>,
) {
    wrt_service.clear();
    wrt_time.clear();
    let rank = user_row.len();
    if sequential_user_update {
        let residual = y - predict_rows(user_row, service_row, time_row);
        for r in 0..rank {
            let g = residual * -(service_row[r] * time_row[r]) + reg * user_row[r];
            user_row[r] -= eta * g;
        }
        let residual = y - predict_rows(user_row, service_row, time_row);
        for r in 0..rank {
            wrt_service.push(residual * -(user_row[r] * time_row[r]) + reg * service_row[r]);
            wrt_time.push(residual * -(user_row[r] * service_row[r]) + reg * time_row[r]);
        }
    } else {
        let residual = y - predict_rows(user_row, service_row, time_row);
        for r in 0..rank {
            wrt_service.push(residual * -(user_row[r] * time_row[r]) + reg * service_row[r]);
            wrt_time.push(residual * -(user_row[r] * service_row[r]) + reg * time_row[r]);
        }
        for r in 0..rank {
            let g = residual * -(service_row[r] * time_row[r]) + reg * user_row[r];
            user_row[r] -= eta * g;
        }
    }
}

fn check_factor_shape(train: &SparseTensor, f: &LatentFactors) -> Result<(), LftError> {
    let shape = train.shape();
    if f.users.rows() != shape.num_users {
        return Err(LftError::ShapeMismatch {
            what: "user factors",
            expected: shape.num_users,
            got: f.users.rows(),
        });
    }
    if f.services.rows() != shape.num_services {
        return Err(LftError::ShapeMismatch {
            what: "service factors",
            expected: shape.num_services,
            got: f.services.rows(),
        });
    }
    if f.times.rows() != shape.num_times {
        return Err(LftError::ShapeMismatch {
            what: "time factors",
            expected: shape.num_times,
            got: f.times.rows(),
        });
    }
    Ok(())
}

/// Total objective over the observed entries: squared error plus the per
/// element row penalty, accumulated in entry order.
pub fn full_loss(train: &SparseTensor, f: &LatentFactors, reg: f64) -> Result<f64, LftError> {
    if train.is_empty() {
        return Err(LftError::EmptyTensor);
    }
    check_factor_shape(train, f)?;
    let mut acc = 0.0;
    for e in train.entries() {
        acc += element_loss_rows(
            e.value,
            f.users.row(e.user),
            f.services.row(e.service),
            f.times.row(e.time),
            reg,
        );
    }
    Ok(acc)
}

/// Shard-weighted squared error, Σ_i (|Λ_i|/|Λ|)·Σ_{y∈Λ_i}(y−ŷ)², plus the
/// same unweighted per-element penalty as [`full_loss`]. A monitoring
/// quantity only; the trainers never optimize it directly.
pub fn weighted_federated_loss(
    shards: &[UserShard],
    f: &LatentFactors,
    reg: f64,
) -> Result<f64, LftError> {
    let total: usize = shards.iter().map(UserShard::len).sum();
    if total == 0 {
        return Err(LftError::EmptyTensor);
    }
    let mut weighted_sq = 0.0;
    let mut penalty = 0.0;
    for shard in shards {
        if shard.is_empty() {
            continue;
        }
        let mut sq = 0.0;
        for e in &shard.entries {
            if e.user >= f.users.rows() || e.service >= f.services.rows() || e.time >= f.times.rows()
            {
                f.check_bounds(e.user, e.service, e.time)?;
            }
            let d = f.users.row(e.user);
            let s = f.services.row(e.service);
            let t = f.times.row(e.time);
            let residual = e.value - predict_rows(d, s, t);
            sq += residual * residual;
            penalty += rows_l2(d, s, t);
        }
        weighted_sq += (shard.len() as f64 / total as f64) * sq;
    }
    Ok(weighted_sq + reg * penalty)
}
