//! Define-by-run gradient tape.
//!
//! The forward pass records each primitive operation together with the
//! inputs its backward rule needs; `backward` replays the records in exact
//! reverse order, threading the running gradient through each adjoint and
//! accumulating parameter gradients into per-slot accumulators shaped like
//! the parameters themselves. The tape is rebuilt every step, which is what
//! lets the mask change per step.
//!
//! A backward pass never mutates the tape, so the same forward recording can
//! be replayed for several upstream gradients (the dual clean/noisy backward
//! used by the gradient-error instrumentation).

use crate::error::{DcmError, Result};
use crate::heads::{kan_backward, KanGrads, KanHead};
use crate::masking::{apply_mask, MaskMatrix};
use crate::matrix::Matrix;
use crate::ops::{activation_backward, linear_backward, standardize_backward, Activation};
use crate::scalar::Scalar;

/// Parameter slots of the standard backbone + head composition.
pub const SLOT_BACKBONE_FC1: usize = 0;
pub const SLOT_BACKBONE_FC2: usize = 1;
pub const SLOT_HEAD: usize = 2;

pub enum TapeOp<F: Scalar> {
    /// `z = x W^T + b`, optionally with a connection mask folded into W.
    Linear {
        x: Matrix<F>,
        weight: Matrix<F>,
        mask: Option<MaskMatrix>,
        slot: usize,
    },
    Activation {
        x: Matrix<F>,
        kind: Activation,
    },
    Standardize {
        normalized: Matrix<F>,
        inv_std: Vec<F>,
    },
    /// Masked KAN head application.
    KanApply {
        x: Matrix<F>,
        head: KanHead<F>,
        mask: MaskMatrix,
        slot: usize,
    },
}

impl<F: Scalar> TapeOp<F> {
    pub fn name(&self) -> &'static str {
        match self {
            TapeOp::Linear { mask: None, .. } => "linear",
            TapeOp::Linear { mask: Some(_), .. } => "masked_linear",
            TapeOp::Activation { .. } => "activation",
            TapeOp::Standardize { .. } => "standardize",
            TapeOp::KanApply { .. } => "kan_apply",
        }
    }
}

/// Gradient accumulator for one parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotGrad<F: Scalar> {
    Linear { weight: Matrix<F>, bias: Vec<F> },
    Kan(KanGrads<F>),
}

impl<F: Scalar> SlotGrad<F> {
    fn accumulate(&mut self, other: SlotGrad<F>) {
        match (self, other) {
            (
                SlotGrad::Linear { weight, bias },
                SlotGrad::Linear {
                    weight: w2,
                    bias: b2,
                },
            ) => {
                weight.add_assign(&w2);
                for (a, b) in bias.iter_mut().zip(b2) {
                    *a += b;
                }
            }
            (SlotGrad::Kan(a), SlotGrad::Kan(b)) => a.add_assign(&b),
            _ => panic!("slot reused with a different parameter kind"),
        }
    }
}

/// Per-slot parameter gradients produced by one backward replay.
#[derive(Debug, Clone)]
pub struct TapeGrads<F: Scalar> {
    slots: Vec<Option<SlotGrad<F>>>,
}

impl<F: Scalar> Default for TapeGrads<F> {
    fn default() -> Self {
        TapeGrads { slots: Vec::new() }
    }
}

impl<F: Scalar> TapeGrads<F> {
    pub fn slot(&self, id: usize) -> Option<&SlotGrad<F>> {
        self.slots.get(id).and_then(|s| s.as_ref())
    }

    fn add(&mut self, id: usize, grad: SlotGrad<F>) {
        if self.slots.len() <= id {
            self.slots.resize_with(id + 1, || None);
        }
        match &mut self.slots[id] {
            Some(existing) => existing.accumulate(grad),
            empty => *empty = Some(grad),
        }
    }
}

#[derive(Default)]
pub struct GradTape<F: Scalar> {
    ops: Vec<TapeOp<F>>,
}

impl<F: Scalar> GradTape<F> {
    pub fn new() -> Self {
        GradTape { ops: Vec::new() }
    }

    pub fn record(&mut self, op: TapeOp<F>) {
        self.ops.push(op);
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Names of the recorded operations, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.ops.iter().map(TapeOp::name).collect()
    }

    /// Replay the tape backward from the seed gradient (the gradient of the
    /// loss with respect to the last recorded operation's output). Returns
    /// the accumulated parameter gradients and the gradient with respect to
    /// the first recorded operation's input.
    pub fn backward(&self, seed: Matrix<F>) -> Result<(TapeGrads<F>, Matrix<F>)> {
        let mut grads = TapeGrads::default();
        let mut upstream = seed;
        for op in self.ops.iter().rev() {
            upstream = match op {
                TapeOp::Linear {
                    x,
                    weight,
                    mask,
                    slot,
                } => {
                    let effective = match mask {
                        Some(m) => apply_mask(weight, m)?,
                        None => weight.clone(),
                    };
                    let (dx, dw_raw, db) = linear_backward(&upstream, x, &effective)?;
                    let dw = match mask {
                        Some(m) => apply_mask(&dw_raw, m)?,
                        None => dw_raw,
                    };
                    grads.add(
                        *slot,
                        SlotGrad::Linear {
                            weight: dw,
                            bias: db,
                        },
                    );
                    dx
                }
                TapeOp::Activation { x, kind } => activation_backward(&upstream, x, *kind),
                TapeOp::Standardize {
                    normalized,
                    inv_std,
                } => standardize_backward(&upstream, normalized, inv_std),
                TapeOp::KanApply {
                    x,
                    head,
                    mask,
                    slot,
                } => {
                    let (kan_grads, dx) = kan_backward(&upstream, x, head, mask)?;
                    grads.add(*slot, SlotGrad::Kan(kan_grads));
                    dx
                }
            };
        }
        Ok((grads, upstream))
    }
}

impl<F: Scalar> TapeGrads<F> {
    /// Convenience accessor for a linear slot.
    pub fn linear(&self, id: usize) -> Result<(&Matrix<F>, &[F])> {
        match self.slot(id) {
            Some(SlotGrad::Linear { weight, bias }) => Ok((weight, bias)),
            _ => Err(DcmError::InvalidParameter(format!(
                "slot {id} holds no linear gradient"
            ))),
        }
    }

    pub fn kan(&self, id: usize) -> Result<&KanGrads<F>> {
        match self.slot(id) {
            Some(SlotGrad::Kan(g)) => Ok(g),
            _ => Err(DcmError::InvalidParameter(format!(
                "slot {id} holds no KAN gradient"
            ))),
        }
    }
}
