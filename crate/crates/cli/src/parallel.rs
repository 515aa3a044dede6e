//! Multi-threaded client execution. Clients are data-parallel within a
//! round: each owns its state exclusively, and the server consumes outcomes
//! by client index, not completion time, so the schedule cannot leak into
//! the result.

use fedlft_core::{ClientExecutor, ClientOutcome, ClientState, FedError};
use rayon::prelude::*;

pub struct ThreadedExecutor {
    pool: rayon::ThreadPool,
}

impl ThreadedExecutor {
    pub fn new(threads: usize) -> Result<Self, rayon::ThreadPoolBuildError> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        Ok(ThreadedExecutor { pool })
    }
}

impl ClientExecutor for ThreadedExecutor {
    fn run_round(
        &self,
        clients: &mut [ClientState],
        job: &(dyn Fn(&mut ClientState) -> Result<ClientOutcome, FedError> + Sync),
    ) -> Vec<Result<ClientOutcome, FedError>> {
        self.pool.install(|| clients.par_iter_mut().map(job).collect())
    }
}
