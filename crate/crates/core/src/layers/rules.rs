//! Which values each operation keeps for its backward pass.
//!
//! This table is the only place storage decisions are made. Layer forwards
//! materialize exactly the kinds it returns, and the planner prices the same
//! kinds from shapes alone.
//!
//! | op                   | memsave                              | naive                               |
//! |----------------------|--------------------------------------|-------------------------------------|
//! | linear               | X iff W rg; W iff X rg               | same                                |
//! | conv2d, conv_t2d     | X iff W rg; W iff X rg               | X, W iff out rg                     |
//! | batchnorm2d eval     | X iff W rg; W iff X rg               | X, W iff out rg                     |
//! | batchnorm2d train    | X, stats iff X or W rg; W iff X rg   | X, stats iff out rg; W iff X rg     |
//! | layernorm            | as batchnorm2d train                 | as batchnorm2d train                |
//! | relu                 | bit mask iff out rg                  | output iff out rg                   |
//! | dropout              | seed iff out rg                      | byte mask iff out rg                |
//! | maxpool2d            | argmax indices iff out rg            | same                                |
//! | softmax              | output iff out rg                    | same                                |
//! | mul, matmul          | lhs iff rhs rg; rhs iff lhs rg       | same                                |
//! | add, sum             | nothing                              | same                                |
//!
//! Bias gradients never need saved values.

use std::fmt;

use serde::Serialize;

use crate::tape::{Op, SavedKind, StoragePolicy};

/// Operation classes with distinct storage rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum OpClass {
    Linear,
    Conv2d,
    ConvTranspose2d,
    BatchNormEval,
    BatchNormTrain,
    LayerNorm,
    Relu,
    Dropout,
    MaxPool2d,
    Softmax,
    Add,
    Mul,
    Sum,
    Matmul,
}

impl OpClass {
    pub fn of<T>(op: &Op<T>) -> Self {
        match op {
            Op::Linear => OpClass::Linear,
            Op::Conv2d { .. } => OpClass::Conv2d,
            Op::ConvTranspose2d { .. } => OpClass::ConvTranspose2d,
            Op::BatchNormTrain => OpClass::BatchNormTrain,
            Op::BatchNormEval { .. } => OpClass::BatchNormEval,
            Op::LayerNorm => OpClass::LayerNorm,
            Op::Relu => OpClass::Relu,
            Op::Dropout { .. } => OpClass::Dropout,
            Op::MaxPool2d { .. } => OpClass::MaxPool2d,
            Op::Softmax => OpClass::Softmax,
            Op::Add => OpClass::Add,
            Op::Mul => OpClass::Mul,
            Op::Sum => OpClass::Sum,
            Op::Matmul { .. } => OpClass::Matmul,
        }
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Differentiability of an operation's parents. For two-operand products
/// `input` is the left operand and `weight` the right one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParentFlags {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

impl ParentFlags {
    pub fn new(input: bool, weight: bool, bias: bool) -> Self {
        Self { input, weight, bias }
    }

    pub fn output(&self) -> bool {
        self.input || self.weight || self.bias
    }
}

/// Saved kinds for one operation, sorted.
pub fn storage_rule(class: OpClass, policy: StoragePolicy, flags: ParentFlags) -> Vec<SavedKind> {
    use SavedKind as K;
    let ParentFlags { input, weight, .. } = flags;
    let out = flags.output();
    let mut kinds = Vec::new();
    let mut keep = |cond: bool, k: SavedKind| {
        if cond {
            kinds.push(k);
        }
    };
    match (class, policy) {
        (OpClass::Linear, _)
        | (OpClass::Conv2d | OpClass::ConvTranspose2d | OpClass::BatchNormEval, StoragePolicy::MemSave) => {
            keep(weight, K::Input);
            keep(input, K::Weight);
        }
        (OpClass::Conv2d | OpClass::ConvTranspose2d | OpClass::BatchNormEval, StoragePolicy::Naive) => {
            keep(out, K::Input);
            keep(out, K::Weight);
        }
        (OpClass::BatchNormTrain | OpClass::LayerNorm, StoragePolicy::Naive) => {
            keep(out, K::Input);
            keep(out, K::NormStats);
            keep(input, K::Weight);
        }
        (OpClass::BatchNormTrain | OpClass::LayerNorm, StoragePolicy::MemSave) => {
            keep(input || weight, K::Input);
            keep(input || weight, K::NormStats);
            keep(input, K::Weight);
        }
        (OpClass::Relu, StoragePolicy::Naive) => keep(out, K::Output),
        (OpClass::Relu, StoragePolicy::MemSave) => keep(out, K::OutputMask),
        (OpClass::Dropout, StoragePolicy::Naive) => keep(out, K::DropoutMask),
        (OpClass::Dropout, StoragePolicy::MemSave) => keep(out, K::DropoutSeed),
        (OpClass::MaxPool2d, _) => keep(out, K::ArgmaxIndices),
        (OpClass::Softmax, _) => keep(out, K::Output),
        (OpClass::Mul | OpClass::Matmul, _) => {
            keep(weight, K::Lhs);
            keep(input, K::Rhs);
        }
        (OpClass::Add | OpClass::Sum, _) => {}
    }
    kinds.sort();
    kinds
}

#[cfg(test)]
mod tests {
    use super::*;
    use SavedKind as K;

    fn rule(c: OpClass, p: StoragePolicy, x: bool, w: bool) -> Vec<SavedKind> {
        storage_rule(c, p, ParentFlags::new(x, w, w))
    }

    #[test]
    fn linear_is_identical_under_both_policies() {
        for x in [false, true] {
            for w in [false, true] {
                assert_eq!(
                    rule(OpClass::Linear, StoragePolicy::Naive, x, w),
                    rule(OpClass::Linear, StoragePolicy::MemSave, x, w)
                );
            }
        }
        assert_eq!(rule(OpClass::Linear, StoragePolicy::Naive, false, true), [K::Input]);
        assert_eq!(rule(OpClass::Linear, StoragePolicy::Naive, true, false), [K::Weight]);
    }

    #[test]
    fn conv_input_scenario() {
        assert_eq!(rule(OpClass::Conv2d, StoragePolicy::MemSave, true, false), [K::Weight]);
        assert_eq!(
            rule(OpClass::Conv2d, StoragePolicy::Naive, true, false),
            [K::Input, K::Weight]
        );
    }

    #[test]
    fn batchnorm_eval_memsave_keeps_nothing_large_for_input_grads() {
        let k = rule(OpClass::BatchNormEval, StoragePolicy::MemSave, true, false);
        assert_eq!(k, [K::Weight]);
    }

    #[test]
    fn bias_only_output() {
        let f = ParentFlags::new(false, false, true);
        assert!(storage_rule(OpClass::Conv2d, StoragePolicy::MemSave, f).is_empty());
        assert_eq!(
            storage_rule(OpClass::Conv2d, StoragePolicy::Naive, f),
            [K::Input, K::Weight]
        );
    }

    #[test]
    fn nothing_differentiable_saves_nothing() {
        let classes = [
            OpClass::Linear,
            OpClass::Conv2d,
            OpClass::ConvTranspose2d,
            OpClass::BatchNormEval,
            OpClass::BatchNormTrain,
            OpClass::LayerNorm,
            OpClass::Relu,
            OpClass::Dropout,
            OpClass::MaxPool2d,
            OpClass::Softmax,
            OpClass::Add,
            OpClass::Mul,
            OpClass::Sum,
            OpClass::Matmul,
        ];
        for c in classes {
            for p in [StoragePolicy::Naive, StoragePolicy::MemSave] {
                assert!(storage_rule(c, p, ParentFlags::default()).is_empty(), "{c:?} {p:?}");
            }
        }
    }
}
