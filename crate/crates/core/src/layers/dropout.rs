use super::{materialize, storage_rule, InputGrads, OpClass, ParentFlags};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Op, SavedData, SavedKind, StoragePolicy, Tape, TapeNode};
use crate::tensor::Tensor;

/// Stream reserved for dropout masks so they never collide with
/// initialization draws from the same seed.
const MASK_STREAM: u64 = 0xD0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutVariant {
    /// Keeps a one-byte-per-element mask.
    StoreMask,
    /// Keeps only the seed and regenerates the mask in backward.
    RngReplay,
}

impl DropoutVariant {
    pub fn for_policy(policy: StoragePolicy) -> Self {
        match policy {
            StoragePolicy::Naive => DropoutVariant::StoreMask,
            StoragePolicy::MemSave => DropoutVariant::RngReplay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutConfig {
    pub p: f64,
    pub seed: u64,
}

impl DropoutConfig {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(Self { p, seed })
    }
}

/// Keep mask for `numel` elements; element `i` survives iff its uniform draw
/// is at least `p`.
pub fn dropout_mask(seed: u64, p: f64, numel: usize) -> Vec<bool> {
    let mut rng = Rng::with_stream(seed, MASK_STREAM);
    (0..numel).map(|_| rng.uniform() >= p).collect()
}

/// Training-mode dropout; survivors are scaled by `1/(1-p)`.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    cfg: &DropoutConfig,
    policy: StoragePolicy,
    tape: &mut Tape<T>,
) -> Result<Tensor<T>> {
    let cfg = DropoutConfig::new(cfg.p, cfg.seed)?;
    let keep = dropout_mask(cfg.seed, cfg.p, x.numel());
    let scale = T::lit(1.0 / (1.0 - cfg.p));
    let y = x
        .data()
        .iter()
        .zip(&keep)
        .map(|(&v, &k)| if k { v * scale } else { T::zero() })
        .collect();
    let kinds = storage_rule(
        OpClass::Dropout,
        policy,
        ParentFlags::new(x.is_differentiable(), false, false),
    );
    tape.emit(Op::Dropout { p: cfg.p }, policy, &[x], x.shape().clone(), y, |_| {
        materialize(&kinds, |k| match k {
            SavedKind::DropoutMask => SavedData::ByteMask(keep.iter().map(|&b| b as u8).collect()),
            SavedKind::DropoutSeed => SavedData::RngSeed {
                seed: cfg.seed,
                p: cfg.p,
            },
            other => unreachable!("dropout never saves {other}"),
        })
    })
}

pub(super) fn vjp<T: Scalar>(node: &TapeNode<T>, g: &[T], p: f64) -> Result<InputGrads<T>> {
    if !node.needs_grad(0) {
        return Ok(vec![None]);
    }
    let keep: Vec<bool> = match DropoutVariant::for_policy(node.policy) {
        DropoutVariant::StoreMask => match node.fetch(SavedKind::DropoutMask)? {
            SavedData::ByteMask(m) => m.iter().map(|&b| b != 0).collect(),
            _ => unreachable!("stored dropout mask is a ByteMask"),
        },
        DropoutVariant::RngReplay => match node.fetch(SavedKind::DropoutSeed)? {
            SavedData::RngSeed { seed, p } => dropout_mask(*seed, *p, g.len()),
            _ => unreachable!("dropout seed is an RngSeed"),
        },
    };
    let scale = T::lit(1.0 / (1.0 - p));
    let dx = g
        .iter()
        .zip(&keep)
        .map(|(&gv, &k)| if k { gv * scale } else { T::zero() })
        .collect();
    Ok(vec![Some(dx)])
}
