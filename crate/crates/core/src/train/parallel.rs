//! Simulated synchronous data parallelism.
//!
//! Workers are threads that read one immutable parameter snapshot, compute
//! gradients on disjoint contiguous shards and hand their results to a
//! barrier. The owner waits for all of them, averages in worker order and
//! is the only party that mutates parameters.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use crate::autodiff::BatchStats;
use crate::error::{Error, Result};
use crate::layers::{BnUpdate, GradMap};
use crate::tensor::Tensor;

/// Splits a batch into `workers` contiguous, equally sized shards.
pub fn shard_batch(batch: &Tensor, workers: usize) -> Result<Vec<Tensor>> {
    let n = batch.shape().first().copied().unwrap_or(0);
    if workers == 0 || n % workers != 0 {
        return Err(Error::Config(format!("batch of {n} cannot be split over {workers} workers")));
    }
    let per = n / workers;
    (0..workers).map(|w| batch.slice_batch(w * per, (w + 1) * per)).collect()
}

/// Waits until one message per worker arrived, returning them in worker
/// order. Missing messages after `timeout` (or a vanished sender) are a
/// barrier timeout.
pub fn collect_barrier<T>(rx: &Receiver<(usize, T)>, expected: usize, timeout: Duration) -> Result<Vec<T>> {
    let deadline = Instant::now() + timeout;
    let mut slots: Vec<Option<T>> = (0..expected).map(|_| None).collect();
    let mut received = 0;
    while received < expected {
        let left = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok((w, msg)) => {
                if w >= expected || slots[w].is_some() {
                    return Err(Error::Contract(format!("unexpected message from worker {w}")));
                }
                slots[w] = Some(msg);
                received += 1;
            }
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => {
                return Err(Error::BarrierTimeout { expected, received });
            }
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
}

/// Runs `work(worker)` for every worker concurrently and collects the
/// results through the barrier. The first failing worker is reported with
/// its shard.
pub fn run_workers<T, F>(workers: usize, timeout: Duration, work: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers == 1 {
        return Ok(vec![work(0).map_err(|e| worker_error(0, e))?]);
    }
    let (tx, rx) = mpsc::channel();
    let results = std::thread::scope(|scope| {
        for w in 0..workers {
            let tx = tx.clone();
            let work = &work;
            scope.spawn(move || {
                let _ = tx.send((w, work(w)));
            });
        }
        drop(tx);
        collect_barrier(&rx, workers, timeout)
    })?;
    results
        .into_iter()
        .enumerate()
        .map(|(w, r)| r.map_err(|e| worker_error(w, e)))
        .collect()
}

fn worker_error(worker: usize, e: Error) -> Error {
    Error::Worker {
        worker,
        shard: worker,
        source: Box::new(e),
    }
}

/// Mean of gradient maps, summed in the given (worker) order.
pub fn average_gradients(maps: &[GradMap]) -> Result<GradMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Contract("no gradient maps to average".into()))?;
    let mut out = first.clone();
    for m in &maps[1..] {
        if m.ids != out.ids {
            return Err(Error::Contract("gradient maps cover different parameters".into()));
        }
        for (acc, g) in out.grads.iter_mut().zip(&m.grads) {
            acc.add_assign(g);
        }
    }
    if maps.len() > 1 {
        let inv = 1.0 / maps.len() as f64;
        out.grads.iter_mut().for_each(|g| g.scale_in_place(inv));
    }
    Ok(out)
}

/// Averages shard-local batch-norm statistics layer by layer.
pub fn average_bn_updates(per_worker: &[Vec<BnUpdate>]) -> Result<Vec<BnUpdate>> {
    let Some(first) = per_worker.first() else {
        return Ok(Vec::new());
    };
    if per_worker.len() == 1 {
        return Ok(first.clone());
    }
    let inv = 1.0 / per_worker.len() as f64;
    let mut out = first.clone();
    for updates in &per_worker[1..] {
        if updates.len() != out.len() {
            return Err(Error::Contract("workers recorded different batch-norm layers".into()));
        }
        for (acc, u) in out.iter_mut().zip(updates) {
            acc.stats.mean.add_assign(&u.stats.mean);
            acc.stats.var.add_assign(&u.stats.var);
        }
    }
    for u in &mut out {
        let BatchStats { mean, var } = &mut u.stats;
        mean.scale_in_place(inv);
        var.scale_in_place(inv);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shards_preserve_order() {
        let batch = Tensor::from_fn(&[8, 2], |i| i as f64);
        let shards = shard_batch(&batch, 4).unwrap();
        assert_eq!(shards.len(), 4);
        assert_eq!(shards[1].data(), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(Tensor::concat_batch(&shards).unwrap(), batch);
        assert_eq!(shard_batch(&batch, 1).unwrap()[0], batch);
        assert!(matches!(shard_batch(&batch, 3), Err(Error::Config(_))));
    }

    #[test]
    fn barrier_times_out_on_missing_worker() {
        let (tx, rx) = mpsc::channel();
        tx.send((0usize, 1)).unwrap();
        tx.send((2usize, 3)).unwrap();
        let r = collect_barrier(&rx, 3, Duration::from_millis(20));
        assert!(matches!(r, Err(Error::BarrierTimeout { expected: 3, received: 2 })));
    }

    #[test]
    fn workers_return_in_order_and_report_failures() {
        let out = run_workers(4, Duration::from_secs(10), |w| Ok(w * 10)).unwrap();
        assert_eq!(out, vec![0, 10, 20, 30]);
        let err = run_workers(3, Duration::from_secs(10), |w| {
            if w == 1 {
                Err(Error::NonFinite { op: "log" })
            } else {
                Ok(w)
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Worker { worker: 1, shard: 1, .. }));
        assert_eq!(err.exit_code(), 4);
    }
}
