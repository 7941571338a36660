//! Sequential job execution: one job at a time per processor, matching a
//! volunteer contributing a single core.

use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use crate::function::{JobError, JobFunction, JobResult};

/// Owns a worker thread that applies the function to submitted jobs one
/// after another. Results go to the completion callback given at spawn,
/// tagged with the caller's job id. Dropping the processor stops the
/// thread after the current job.
pub struct Processor {
    jobs: mpsc::Sender<(u64, String)>,
}

impl Processor {
    pub fn spawn<F>(function: Arc<dyn JobFunction>, on_complete: F) -> Self
    where
        F: Fn(u64, JobResult) + Send + 'static,
    {
        let (jobs, rx) = mpsc::channel::<(u64, String)>();
        thread::Builder::new()
            .name("processor".into())
            .spawn(move || {
                for (job, input) in rx {
                    let (tx, done_rx) = mpsc::sync_channel(1);
                    function.apply(
                        &input,
                        Box::new(move |r| {
                            let _ = tx.send(r);
                        }),
                    );
                    let result = done_rx
                        .recv()
                        .unwrap_or_else(|_| Err(JobError::worker("function dropped its callback")));
                    on_complete(job, result);
                }
            })
            .expect("spawn processor thread");
        Self { jobs }
    }

    /// Queues a job. Returns false once the worker thread has gone.
    pub fn submit(&self, job: u64, input: String) -> bool {
        self.jobs.send((job, input)).is_ok()
    }
}
