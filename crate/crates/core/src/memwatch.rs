//! Event-driven byte ledger for live and peak memory.
//!
//! Nothing here asks the system allocator anything. Every tensor the forward
//! pass creates is announced as an [`AllocEvent`] and retired with a matching
//! free, so the peak is a deterministic function of the network, the
//! differentiability flags and the storage policy.
//!
//! Two peaks are kept: [`MemoryLedger::peak`] excludes resident parameter
//! storage (it is what the depth sweeps plot) and
//! [`MemoryLedger::peak_total`] includes it.

use std::collections::HashMap;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{self, RunOptions};
use crate::network::{Differentiability, NetworkDescription};
use crate::tape::StoragePolicy;
use crate::tensor::TensorId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Category {
    NetworkInput,
    Activation,
    TapeSaved,
    Parameter,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Alloc,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocEvent {
    pub id: TensorId,
    pub bytes: usize,
    pub category: Category,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CategoryBytes {
    pub network_input: usize,
    pub activation: usize,
    pub tape_saved: usize,
    pub parameter: usize,
    pub gradient: usize,
}

impl CategoryBytes {
    fn slot(&mut self, c: Category) -> &mut usize {
        match c {
            Category::NetworkInput => &mut self.network_input,
            Category::Activation => &mut self.activation,
            Category::TapeSaved => &mut self.tape_saved,
            Category::Parameter => &mut self.parameter,
            Category::Gradient => &mut self.gradient,
        }
    }

    pub fn get(&self, c: Category) -> usize {
        match c {
            Category::NetworkInput => self.network_input,
            Category::Activation => self.activation,
            Category::TapeSaved => self.tape_saved,
            Category::Parameter => self.parameter,
            Category::Gradient => self.gradient,
        }
    }

    pub fn total(&self) -> usize {
        self.network_input + self.activation + self.tape_saved + self.parameter + self.gradient
    }

    /// Everything except resident parameters.
    pub fn working_set(&self) -> usize {
        self.total() - self.parameter
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemoryLedger {
    events: Vec<AllocEvent>,
    live: HashMap<TensorId, (usize, Category)>,
    current: CategoryBytes,
    peak: usize,
    peak_total: usize,
    peak_breakdown: CategoryBytes,
    largest_alloc: usize,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an allocation. Allocating an id that is already live is a
    /// bookkeeping bug and is rejected.
    pub fn alloc(&mut self, id: TensorId, bytes: usize, category: Category) -> Result<()> {
        if self.live.contains_key(&id) {
            return Err(Error::DuplicateTensor(id));
        }
        self.live.insert(id, (bytes, category));
        *self.current.slot(category) += bytes;
        self.largest_alloc = self.largest_alloc.max(bytes);
        self.events.push(AllocEvent {
            id,
            bytes,
            category,
            kind: EventKind::Alloc,
        });
        self.update_peak();
        Ok(())
    }

    /// Retires a live allocation and returns its size.
    pub fn free(&mut self, id: TensorId) -> Result<usize> {
        let (bytes, category) = self.live.remove(&id).ok_or(Error::UnknownTensor(id))?;
        *self.current.slot(category) -= bytes;
        self.events.push(AllocEvent {
            id,
            bytes,
            category,
            kind: EventKind::Free,
        });
        Ok(bytes)
    }

    pub fn is_live(&self, id: TensorId) -> bool {
        self.live.contains_key(&id)
    }

    fn update_peak(&mut self) {
        let working = self.current.working_set();
        if working > self.peak {
            self.peak = working;
            self.peak_breakdown = self.current;
        }
        self.peak_total = self.peak_total.max(self.current.total());
    }

    /// Restarts peak tracking from the current live set.
    pub fn reset_peak(&mut self) {
        self.peak = self.current.working_set();
        self.peak_total = self.current.total();
        self.peak_breakdown = self.current;
    }

    /// Peak live bytes, resident parameters excluded.
    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn peak_total(&self) -> usize {
        self.peak_total
    }

    pub fn peak_breakdown(&self) -> CategoryBytes {
        self.peak_breakdown
    }

    pub fn live(&self) -> CategoryBytes {
        self.current
    }

    pub fn live_bytes(&self) -> usize {
        self.current.total()
    }

    pub fn largest_alloc(&self) -> usize {
        self.largest_alloc
    }

    pub fn events(&self) -> &[AllocEvent] {
        &self.events
    }
}

/// Measurements for one (network, scenario, policy) run.
#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub net: String,
    pub layer: String,
    pub depth: usize,
    pub scenario: String,
    pub policy: String,
    /// Deduplicated bytes held by the tape at the end of the forward pass.
    pub tape_bytes: usize,
    /// Tape bytes from full tensors that are not parameters.
    pub tape_activation_bytes: usize,
    pub tape_parameter_bytes: usize,
    /// Masks, seeds, index maps and statistics.
    pub tape_aux_bytes: usize,
    /// Forward peak, resident parameters excluded.
    pub peak_bytes: usize,
    /// Forward peak including resident parameters.
    pub peak_total_bytes: usize,
    /// Peak over forward and backward, gradients included, parameters excluded.
    pub combined_peak_bytes: usize,
    pub parameter_bytes: usize,
    pub largest_alloc_bytes: usize,
    pub peak_breakdown: CategoryBytes,
    pub forward_seconds: f64,
    pub backward_seconds: f64,
}

/// Runs forward and backward `reps` times (at least once) in fresh contexts
/// and reports memory from the first run and median timings over all runs.
pub fn track_forward(
    net: &NetworkDescription,
    diff: &Differentiability,
    scenario_label: &str,
    policy: Option<StoragePolicy>,
    reps: usize,
) -> Result<MemoryReport> {
    let net = match policy {
        Some(p) => crate::layers::convert_network(net, p, None),
        None => net.clone(),
    };
    let opts = RunOptions::default();
    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    let mut first: Option<exec::RunSummary> = None;
    for _ in 0..reps.max(1) {
        let summary = exec::run_dyn(&net, diff, &opts)?;
        fwd.push(summary.forward_seconds);
        bwd.push(summary.backward_seconds);
        match &first {
            None => first = Some(summary),
            Some(f) => {
                if f.tape_bytes != summary.tape_bytes || f.peak_bytes != summary.peak_bytes {
                    return Err(Error::OracleMismatch("repeated runs disagree on memory".into()));
                }
            }
        }
    }
    let s = first.expect("at least one run");
    Ok(MemoryReport {
        net: net.name.clone(),
        layer: policy_label(&net),
        depth: net.layers.len(),
        scenario: scenario_label.to_string(),
        policy: policy.map_or_else(|| mixed_policy_name(&net), |p| p.name().to_string()),
        tape_bytes: s.tape_bytes,
        tape_activation_bytes: s.tape_activation_bytes,
        tape_parameter_bytes: s.tape_parameter_bytes,
        tape_aux_bytes: s.tape_aux_bytes,
        peak_bytes: s.peak_bytes,
        peak_total_bytes: s.peak_total_bytes,
        combined_peak_bytes: s.combined_peak_bytes,
        parameter_bytes: s.parameter_bytes,
        largest_alloc_bytes: s.largest_alloc_bytes,
        peak_breakdown: s.peak_breakdown,
        forward_seconds: median(&mut fwd),
        backward_seconds: median(&mut bwd),
    })
}

/// Label listing which layer kinds run under MemSave, e.g. `conv2d+relu`.
pub fn policy_label(net: &NetworkDescription) -> String {
    let mut kinds: Vec<&'static str> = net
        .layers
        .iter()
        .filter(|l| l.policy == StoragePolicy::MemSave)
        .map(|l| l.kind.tag().name())
        .collect();
    kinds.sort_unstable();
    kinds.dedup();
    if kinds.is_empty() {
        "none".to_string()
    } else {
        kinds.join("+")
    }
}

fn mixed_policy_name(net: &NetworkDescription) -> String {
    let naive = net.layers.iter().any(|l| l.policy == StoragePolicy::Naive);
    let memsave = net.layers.iter().any(|l| l.policy == StoragePolicy::MemSave);
    match (naive, memsave) {
        (true, true) => "mixed".into(),
        (false, true) => StoragePolicy::MemSave.name().into(),
        _ => StoragePolicy::Naive.name().into(),
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Wall-clock seconds spent in `f`.
pub(crate) fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id() -> TensorId {
        TensorId::fresh()
    }

    #[test]
    fn peak_survives_free() {
        let mut m = MemoryLedger::new();
        let a = id();
        m.alloc(a, 100, Category::Activation).unwrap();
        m.free(a).unwrap();
        m.alloc(id(), 60, Category::Activation).unwrap();
        assert_eq!(m.peak(), 100);
    }

    #[test]
    fn reset_restarts_from_live() {
        let mut m = MemoryLedger::new();
        let a = id();
        m.alloc(a, 100, Category::Activation).unwrap();
        m.free(a).unwrap();
        m.reset_peak();
        m.alloc(id(), 60, Category::Activation).unwrap();
        assert_eq!(m.peak(), 60);
    }

    #[test]
    fn parameters_only_count_toward_total_peak() {
        let mut m = MemoryLedger::new();
        m.alloc(id(), 50, Category::Parameter).unwrap();
        m.alloc(id(), 10, Category::Activation).unwrap();
        assert_eq!(m.peak(), 10);
        assert_eq!(m.peak_total(), 60);
    }

    #[test]
    fn non_differentiable_chain_trace() {
        // input held; each layer output allocated before its input is freed
        let s = 4096;
        let mut m = MemoryLedger::new();
        let x0 = id();
        m.alloc(x0, s, Category::NetworkInput).unwrap();
        let x1 = id();
        m.alloc(x1, s, Category::Activation).unwrap();
        let x2 = id();
        m.alloc(x2, s, Category::Activation).unwrap();
        m.free(x1).unwrap();
        let x3 = id();
        m.alloc(x3, s, Category::Activation).unwrap();
        m.free(x2).unwrap();
        assert_eq!(m.peak(), 3 * s);
        assert_eq!(m.live_bytes(), 2 * s);
    }

    #[test]
    fn double_alloc_and_unknown_free_are_errors() {
        let mut m = MemoryLedger::new();
        let a = id();
        m.alloc(a, 1, Category::Activation).unwrap();
        assert!(m.alloc(a, 1, Category::Activation).is_err());
        assert!(m.free(id()).is_err());
        m.free(a).unwrap();
        assert!(m.free(a).is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
