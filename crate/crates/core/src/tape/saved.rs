use std::cell::Cell;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorId};

/// Which storage rules a layer follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoragePolicy {
    /// Emulates the default framework: linear layers keep their input as
    /// soon as the output needs a gradient, ReLU keeps its output, dropout
    /// keeps a byte mask.
    #[default]
    Naive,
    /// Keeps only what the backward products that will actually run need.
    MemSave,
}

impl StoragePolicy {
    pub fn name(self) -> &'static str {
        match self {
            StoragePolicy::Naive => "naive",
            StoragePolicy::MemSave => "memsave",
        }
    }
}

impl std::str::FromStr for StoragePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(StoragePolicy::Naive),
            "memsave" | "mem-save" => Ok(StoragePolicy::MemSave),
            other => Err(format!("unknown policy `{other}` (expected naive or memsave)")),
        }
    }
}

impl fmt::Display for StoragePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Role of a saved value inside its node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SavedKind {
    /// The layer input `X`.
    Input,
    /// The layer weight `W`.
    Weight,
    /// The layer output.
    Output,
    /// Left operand of a two-activation product.
    Lhs,
    /// Right operand of a two-activation product.
    Rhs,
    /// Bit-packed `output > 0`.
    OutputMask,
    /// One byte per element keep mask.
    DropoutMask,
    /// Seed and probability for regenerating a dropout mask.
    DropoutSeed,
    /// Flat argmax positions of a pooling window.
    ArgmaxIndices,
    /// Per-channel or per-row mean and inverse standard deviation.
    NormStats,
}

impl SavedKind {
    pub fn name(self) -> &'static str {
        match self {
            SavedKind::Input => "input",
            SavedKind::Weight => "weight",
            SavedKind::Output => "output",
            SavedKind::Lhs => "lhs",
            SavedKind::Rhs => "rhs",
            SavedKind::OutputMask => "output_mask",
            SavedKind::DropoutMask => "dropout_mask",
            SavedKind::DropoutSeed => "dropout_seed",
            SavedKind::ArgmaxIndices => "argmax_indices",
            SavedKind::NormStats => "norm_stats",
        }
    }

    /// Kinds stored as a reference to an existing tensor.
    pub fn is_full_tensor(self) -> bool {
        matches!(
            self,
            SavedKind::Input | SavedKind::Weight | SavedKind::Output | SavedKind::Lhs | SavedKind::Rhs
        )
    }
}

impl fmt::Display for SavedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bit-packed booleans, eight per byte, LSB first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    bits: Vec<u8>,
    len: usize,
}

impl BitMask {
    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut bits = vec![0u8; len.div_ceil(8)];
        for i in 0..len {
            if f(i) {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        Self { bits, len }
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn byte_len(&self) -> usize {
        self.bits.len()
    }
}

/// Bytes a dropout seed occupies on the tape: the 64-bit seed and the
/// probability as an `f64`.
pub const RNG_SEED_BYTES: usize = 16;

#[derive(Debug, Clone)]
pub enum SavedData<T> {
    Full(Tensor<T>),
    BitMask(BitMask),
    ByteMask(Vec<u8>),
    RngSeed { seed: u64, p: f64 },
    IndexMap(Vec<u32>),
    Stats(Vec<T>),
}

impl<T: Scalar> SavedData<T> {
    /// Byte cost on the tape, before full-tensor deduplication.
    pub fn cost(&self) -> usize {
        match self {
            SavedData::Full(t) => t.byte_size(),
            SavedData::BitMask(m) => m.byte_len(),
            SavedData::ByteMask(m) => m.len(),
            SavedData::RngSeed { .. } => RNG_SEED_BYTES,
            SavedData::IndexMap(ix) => ix.len() * std::mem::size_of::<u32>(),
            SavedData::Stats(v) => v.len() * T::DTYPE.width(),
        }
    }

    pub fn tensor_id(&self) -> Option<TensorId> {
        match self {
            SavedData::Full(t) => Some(t.id()),
            _ => None,
        }
    }
}

/// One value retained by a tape node, with a read counter for the
/// minimality check.
#[derive(Debug)]
pub struct Saved<T> {
    pub kind: SavedKind,
    pub data: SavedData<T>,
    pub(crate) reads: Cell<usize>,
    pub(crate) ledger_id: Option<TensorId>,
}

impl<T: Scalar> Saved<T> {
    pub fn new(kind: SavedKind, data: SavedData<T>) -> Self {
        Self {
            kind,
            data,
            reads: Cell::new(0),
            ledger_id: None,
        }
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bitmask_examples() {
        let m = BitMask::from_fn(4, |i| [false, true, false, true][i]);
        assert_eq!((0..4).map(|i| m.get(i)).collect::<Vec<_>>(), [false, true, false, true]);
        assert_eq!(BitMask::from_fn(1000, |_| true).byte_len(), 125);
        assert_eq!(BitMask::from_fn(1_000_000, |i| i % 3 == 0).byte_len(), 125_000);
    }

    #[test]
    fn seed_cost_is_constant() {
        let s: SavedData<f32> = SavedData::RngSeed { seed: 1, p: 0.5 };
        assert_eq!(s.cost(), 16);
        assert_eq!(RNG_SEED_BYTES, 16);
    }

    proptest! {
        #[test]
        fn bitmask_roundtrip(bits in proptest::collection::vec(any::<bool>(), 0..300)) {
            let m = BitMask::from_fn(bits.len(), |i| bits[i]);
            prop_assert_eq!(m.byte_len(), bits.len().div_ceil(8));
            for (i, &b) in bits.iter().enumerate() {
                prop_assert_eq!(m.get(i), b);
            }
        }
    }
}
