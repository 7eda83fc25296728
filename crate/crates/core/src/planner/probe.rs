use serde::Serialize;

use super::plan;
use crate::error::{Error, Result};
use crate::exec::{run_dyn, RunOptions};
use crate::layers::convert_network;
use crate::memwatch::median;
use crate::network::{BuiltinNet, ProbeLayer, Scenario};
use crate::tape::StoragePolicy;

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub layer: ProbeLayer,
    pub max_depth: usize,
    pub scenarios: Vec<Scenario>,
    pub policies: Vec<StoragePolicy>,
    /// Executions per point; `0` plans only.
    pub reps: usize,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(layer: ProbeLayer, max_depth: usize) -> Self {
        Self {
            layer,
            max_depth,
            scenarios: Scenario::sweep_set(4).to_vec(),
            policies: vec![StoragePolicy::Naive, StoragePolicy::MemSave],
            reps: 1,
            seed: 0,
        }
    }
}

/// One point of a depth sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub net: String,
    pub layer: String,
    pub depth: usize,
    pub scenario: String,
    pub policy: String,
    pub tape_bytes: usize,
    /// Tape bytes held in full non-parameter tensors.
    pub tape_activation_bytes: usize,
    pub peak_bytes: usize,
    pub forward_ms: f64,
    pub backward_ms: f64,
}

/// Plans (and, when `reps > 0`, executes and cross-checks) homogeneous
/// chains of depth `1..=max_depth`.
pub fn probe_sweep(cfg: &ProbeConfig) -> Result<Vec<ProbeRow>> {
    if cfg.max_depth == 0 {
        return Err(Error::InvalidConfig("probe depth must be at least 1".into()));
    }
    if cfg.scenarios.is_empty() || cfg.policies.is_empty() {
        return Err(Error::InvalidConfig(
            "probe needs at least one scenario and policy".into(),
        ));
    }
    let mut rows = Vec::new();
    for depth in 1..=cfg.max_depth {
        let base = BuiltinNet::ProbeChain {
            layer: cfg.layer,
            depth,
        }
        .build()
        .with_seed(cfg.seed);
        for &scenario in &cfg.scenarios {
            for &policy in &cfg.policies {
                let net = convert_network(&base, policy, None);
                let diff = scenario.resolve(&net);
                let p = plan(&net, &diff)?;
                let mut fwd = Vec::with_capacity(cfg.reps);
                let mut bwd = Vec::with_capacity(cfg.reps);
                for _ in 0..cfg.reps {
                    let s = run_dyn(&net, &diff, &RunOptions::default())?;
                    fwd.push(s.forward_seconds * 1e3);
                    bwd.push(s.backward_seconds * 1e3);
                }
                rows.push(ProbeRow {
                    net: net.name.clone(),
                    layer: cfg.layer.name().to_string(),
                    depth,
                    scenario: scenario.name(),
                    policy: policy.name().to_string(),
                    tape_bytes: p.tape_bytes,
                    tape_activation_bytes: p.tape_activation_bytes,
                    peak_bytes: p.peak_bytes,
                    forward_ms: median(&mut fwd),
                    backward_ms: median(&mut bwd),
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_policies_coincide() {
        let mut cfg = ProbeConfig::new(ProbeLayer::Linear, 6);
        cfg.reps = 0;
        cfg.scenarios.push(Scenario::Input);
        let rows = probe_sweep(&cfg).unwrap();
        for pair in rows.chunks(2) {
            assert_eq!(pair[0].policy, "naive");
            assert_eq!(pair[1].policy, "memsave");
            assert_eq!(pair[0].tape_bytes, pair[1].tape_bytes);
            assert_eq!(pair[0].peak_bytes, pair[1].peak_bytes);
        }
    }

    #[test]
    fn zero_depth_is_rejected() {
        assert!(probe_sweep(&ProbeConfig::new(ProbeLayer::Conv2d, 0)).is_err());
    }
}
