//! Thread-pool runner for per-patient work.

use rayon::prelude::*;
use theraloop_core::domain::PatientRecord;
use theraloop_core::pipeline::{PatientResult, PipelineError, Runner};

/// Runs patients on a bounded rayon pool. Results come back in input
/// order, so reports match a sequential run byte for byte.
pub struct Parallel {
    pool: rayon::ThreadPool,
}

impl Parallel {
    /// `workers == 0` means one thread per core.
    pub fn new(workers: usize) -> Parallel {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().expect("thread pool starts");
        Parallel { pool }
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Runner for Parallel {
    fn run<'a>(
        &self,
        jobs: &'a [PatientRecord],
        f: &(dyn Fn(&'a PatientRecord) -> Result<PatientResult, PipelineError> + Sync),
    ) -> Vec<Result<PatientResult, PipelineError>> {
        self.pool.install(|| jobs.par_iter().map(f).collect())
    }
}
