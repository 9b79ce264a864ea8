//! Logical activation-memory accounting.
//!
//! Every tensor buffer registers itself here when created and deregisters
//! when its last owner drops it. A probe counts only buffers allocated after
//! the probe started, so long-lived parameters and inputs are excluded and
//! the reported peak is the number of concurrently-live activation bytes —
//! a measure independent of allocator behaviour.

use std::cell::Cell;
use std::time::Instant;

use crate::error::Result;

thread_local! {
    static EPOCH: Cell<u64> = const { Cell::new(0) };
    static LIVE_BYTES: Cell<u64> = const { Cell::new(0) };
    static LIVE_TENSORS: Cell<u64> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<u64> = const { Cell::new(0) };
    static PEAK_TENSORS: Cell<u64> = const { Cell::new(0) };
}

/// Registers a fresh buffer; returns the epoch the buffer belongs to.
pub(crate) fn on_alloc(bytes: usize) -> u64 {
    let epoch = EPOCH.with(|e| e.get());
    let live = LIVE_BYTES.with(|c| {
        let v = c.get() + bytes as u64;
        c.set(v);
        v
    });
    PEAK_BYTES.with(|p| p.set(p.get().max(live)));
    let tensors = LIVE_TENSORS.with(|c| {
        let v = c.get() + 1;
        c.set(v);
        v
    });
    PEAK_TENSORS.with(|p| p.set(p.get().max(tensors)));
    epoch
}

/// Deregisters a buffer allocated in `epoch`. Buffers from earlier probes
/// (or from before any probe) no longer participate in the current counts.
pub(crate) fn on_release(bytes: usize, epoch: u64) {
    if EPOCH.with(|e| e.get()) != epoch {
        return;
    }
    LIVE_BYTES.with(|c| c.set(c.get().saturating_sub(bytes as u64)));
    LIVE_TENSORS.with(|c| c.set(c.get().saturating_sub(1)));
}

fn probe_begin() {
    EPOCH.with(|e| e.set(e.get() + 1));
    LIVE_BYTES.with(|c| c.set(0));
    LIVE_TENSORS.with(|c| c.set(0));
    PEAK_BYTES.with(|p| p.set(0));
    PEAK_TENSORS.with(|p| p.set(0));
}

/// Peak concurrently-live activation footprint of one instrumented run.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub peak_activation_bytes: u64,
    pub peak_activation_tensors: u64,
    pub param_bytes: u64,
    pub nfe: usize,
    pub wall_time: f64,
}

/// Runs `run` with activation accounting scoped to it. The closure reports
/// how many dynamics evaluations it performed.
pub fn memory_probe<F>(param_bytes: u64, run: F) -> Result<MemoryReport>
where
    F: FnOnce() -> Result<usize>,
{
    probe_begin();
    let start = Instant::now();
    let nfe = run()?;
    let wall_time = start.elapsed().as_secs_f64();
    Ok(MemoryReport {
        peak_activation_bytes: PEAK_BYTES.with(|p| p.get()),
        peak_activation_tensors: PEAK_TENSORS.with(|p| p.get()),
        param_bytes,
        nfe,
        wall_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn empty_closure_has_zero_peak() {
        let report = memory_probe(0, || Ok(0)).unwrap();
        assert_eq!(report.peak_activation_bytes, 0);
        assert_eq!(report.peak_activation_tensors, 0);
    }

    #[test]
    fn peak_tracks_concurrent_liveness_not_total_traffic() {
        // Sequentially allocated-and-dropped tensors must not accumulate.
        let sequential = memory_probe(0, || {
            for _ in 0..8 {
                let t = Tensor::<f64>::zeros(&[100]);
                drop(t);
            }
            Ok(0)
        })
        .unwrap();
        assert_eq!(sequential.peak_activation_bytes, 800);
        assert_eq!(sequential.peak_activation_tensors, 1);

        let concurrent = memory_probe(0, || {
            let held: Vec<_> = (0..8).map(|_| Tensor::<f64>::zeros(&[100])).collect();
            drop(held);
            Ok(0)
        })
        .unwrap();
        assert_eq!(concurrent.peak_activation_bytes, 6400);
        assert_eq!(concurrent.peak_activation_tensors, 8);
    }

    #[test]
    fn buffers_from_before_the_probe_do_not_count() {
        let outside = Tensor::<f32>::zeros(&[32]);
        let report = memory_probe(0, || {
            drop(outside);
            Ok(3)
        })
        .unwrap();
        assert_eq!(report.peak_activation_bytes, 0);
        assert_eq!(report.nfe, 3);
    }
}
