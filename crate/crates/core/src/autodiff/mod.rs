//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends one record to a [`Tape`]. Records only refer to
//! earlier records, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep that visits each record once.

pub mod kernels;
mod ops;

pub use ops::{pixel_shuffle, pixel_unshuffle, BatchStats};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a record's backward function.
pub(crate) struct BackwardArgs<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Whether each input needs a gradient; skipped inputs may return `None`.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>> + Send>;

struct Record {
    op: &'static str,
    value: Tensor,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    records: Vec<Record>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            records: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; no backward closures are kept.
    pub fn inference() -> Self {
        Tape {
            records: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.records.push(Record {
            op: "leaf",
            value,
            inputs: Vec::new(),
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var(self.records.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.records[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.records[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.records[v.0].op
    }

    /// Appends an op record. The backward closure is dropped when no input
    /// requires a gradient.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var],
        backward: BackwardFn,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.records[v.0].requires_grad);
        self.records.push(Record {
            op,
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Ok(Var(self.records.len() - 1))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// when a value feeds several records.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.records[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if !self.records[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for idx in (0..=loss.0).rev() {
            let record = &self.records[idx];
            // Leaves have no backward and keep their accumulated gradient.
            let Some(backward) = &record.backward else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                inputs: record.inputs.iter().map(|&i| &self.records[i].value).collect(),
                output: &record.value,
                needs: record
                    .inputs
                    .iter()
                    .map(|&i| self.records[i].requires_grad)
                    .collect(),
            };
            let input_grads = backward(&args);
            debug_assert_eq!(input_grads.len(), record.inputs.len(), "{}", record.op);
            for (&input, g) in record.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.records[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    self.records[input].value.shape(),
                    "gradient shape from {}",
                    record.op
                );
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
