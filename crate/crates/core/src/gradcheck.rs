//! Central-difference gradient checks in f64.
//!
//! Analytic gradients come from a full run under each storage policy;
//! numeric ones from perturbing one leaf coordinate at a time and
//! re-running the forward with nothing differentiable. A coordinate whose
//! perturbation flips a ReLU sign or a max-pool argmax sits on a kink and is
//! replaced by another draw.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{Leaf, Model, RunOptions};
use crate::layers::convert_network;
use crate::network::{Differentiability, NetworkDescription};
use crate::rng::Rng;
use crate::scalar::Dtype;
use crate::tape::StoragePolicy;

const SAMPLE_STREAM: u64 = 0x6C;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Coordinates per leaf; smaller leaves are checked exhaustively.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-6,
            tol: 1e-5,
            floor: 1e-3,
            samples: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LeafCheck {
    pub leaf: Leaf,
    pub numel: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyCheck {
    pub policy: StoragePolicy,
    pub leaves: Vec<LeafCheck>,
}

impl PolicyCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&LeafCheck> {
        self.leaves
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub net: String,
    pub tol: f64,
    pub policies: Vec<PolicyCheck>,
    /// Largest element-wise difference between the policies' gradients.
    pub policy_gap: f64,
    /// Leaves that received a gradient, in order.
    pub grad_leaves: Vec<Leaf>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.policies.iter().map(PolicyCheck::max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol && self.policy_gap <= 1e-12
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks every differentiable leaf of `net` under both policies.
pub fn gradcheck(net: &NetworkDescription, diff: &Differentiability, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !diff.any() {
        return Err(Error::InvalidConfig("nothing is differentiable".into()));
    }
    let net = net.clone().with_dtype(Dtype::F64);
    let runs = [StoragePolicy::Naive, StoragePolicy::MemSave]
        .into_iter()
        .map(|p| {
            let model = Model::<f64>::new(&convert_network(&net, p, None))?;
            Ok((p, model.run(diff, &RunOptions::default())?))
        })
        .collect::<Result<Vec<_>>>()?;
    if !runs[0].1.summary.loss_requires_grad {
        return Err(Error::InvalidConfig(
            "loss does not depend on any differentiable leaf".into(),
        ));
    }

    let mut policy_gap: f64 = 0.0;
    for (leaf, g) in &runs[0].1.grads {
        let other = runs[1]
            .1
            .grads
            .get(leaf)
            .ok_or_else(|| Error::OracleMismatch(format!("{leaf} has a gradient under one policy only")))?;
        for (a, b) in g.iter().zip(other) {
            policy_gap = policy_gap.max((a - b).abs());
        }
    }
    if runs[0].1.grads.len() != runs[1].1.grads.len() {
        return Err(Error::OracleMismatch("policies differ in gradient leaves".into()));
    }

    let mut model = Model::<f64>::new(&net)?;
    let (_, base_sig) = model.loss()?;
    let leaves: Vec<Leaf> = model
        .leaves()
        .into_iter()
        .filter(|&l| model.requires_grad(l, diff))
        .collect();
    let mut numeric: Vec<Vec<(usize, f64)>> = Vec::with_capacity(leaves.len());
    let mut skipped = Vec::with_capacity(leaves.len());
    for (li, &leaf) in leaves.iter().enumerate() {
        let numel = model.leaf(leaf).map_or(0, <[f64]>::len);
        let mut order: Vec<usize> = (0..numel).collect();
        let mut rng = Rng::with_stream(cfg.seed, SAMPLE_STREAM + li as u64);
        for i in (1..numel).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut found = Vec::new();
        let mut skips = 0;
        for idx in order {
            if found.len() >= cfg.samples {
                break;
            }
            let orig = model.leaf(leaf).expect("leaf")[idx];
            model.leaf_mut(leaf).expect("leaf")[idx] = orig + cfg.h;
            let (plus, sig_plus) = model.loss()?;
            model.leaf_mut(leaf).expect("leaf")[idx] = orig - cfg.h;
            let (minus, sig_minus) = model.loss()?;
            model.leaf_mut(leaf).expect("leaf")[idx] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                skips += 1;
                continue;
            }
            found.push((idx, (plus - minus) / (2.0 * cfg.h)));
        }
        numeric.push(found);
        skipped.push(skips);
    }

    let mut policies = Vec::new();
    for (policy, run) in &runs {
        let mut checks = Vec::new();
        for (li, &leaf) in leaves.iter().enumerate() {
            let g = run
                .grads
                .get(&leaf)
                .ok_or_else(|| Error::OracleMismatch(format!("no gradient for {leaf}")))?;
            let mut c = LeafCheck {
                leaf,
                numel: g.len(),
                checked: numeric[li].len(),
                skipped: skipped[li],
                max_rel_err: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for &(idx, n) in &numeric[li] {
                let e = rel_err(g[idx], n, cfg.floor);
                if e >= c.max_rel_err {
                    c.max_rel_err = e;
                    c.worst_index = idx;
                    c.analytic = g[idx];
                    c.numeric = n;
                }
            }
            checks.push(c);
        }
        policies.push(PolicyCheck {
            policy: *policy,
            leaves: checks,
        });
    }
    Ok(GradcheckReport {
        net: net.name.clone(),
        tol: cfg.tol,
        policies,
        policy_gap,
        grad_leaves: runs[0].1.grads.keys().copied().collect(),
    })
}
