//! Dense row-major `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every op that sees at least one operand with `requires_grad` stores its
//! inputs and a backward rule on the output node. The nodes reachable from a
//! scalar root form the computation record; [`Tensor::backward`] replays the
//! rules in reverse topological order and accumulates into leaf grad buffers.
//!
//! Data buffers are immutable once created. Only leaf grad buffers mutate,
//! and they accumulate until [`Tensor::zero_grad`] is called.

mod conv;
mod gradcheck;
mod kernels;
mod ops;

pub use conv::Conv2dSpec;
pub use gradcheck::{finite_difference_check, finite_difference_check_many};
pub use kernels::{gemm_nn, gemm_nt, gemm_tn};
pub(crate) use kernels::dot as dot_product;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule of a recorded op: maps the upstream gradient to one optional
/// gradient per input (same order as the recorded inputs).
pub type BackwardFn =
    Box<dyn Fn(&BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> + Send + Sync>;

/// What a backward rule gets to see about the output it produced.
pub struct BackwardCtx<'a> {
    pub output: &'a [f64],
    pub grad: &'a [f64],
}

struct OpRecord {
    name: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    record: Option<OpRecord>,
}

#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

/// One executed op as seen by [`Tensor::record`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordEntry {
    pub op: &'static str,
    pub inputs: Vec<u64>,
    pub output: u64,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data[..8]", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFault { op })
    }
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        check_finite("new", &data)?;
        Ok(Tensor {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data: Arc::new(data),
                requires_grad,
                grad: Mutex::new(None),
                record: None,
            }),
        })
    }

    /// Constant tensor; never receives a gradient.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![0.0; numel(shape)], false).expect("zeros are finite")
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(&[], vec![value])
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        Self::new(shape, (0..numel(shape)).map(f).collect())
    }

    /// Builds the output of a custom differentiable op.
    ///
    /// The op is recorded only when some input requires a gradient; the
    /// backward rule must return one entry per input.
    pub fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[&Tensor],
        backward: BackwardFn,
    ) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: name,
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        check_finite(name, &data)?;
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let record = requires_grad.then(|| OpRecord {
            name,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward,
        });
        Ok(Tensor {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data: Arc::new(data),
                requires_grad,
                grad: Mutex::new(None),
                record,
            }),
        })
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.record.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Shape {
                op: "item",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(self.node.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            node: Arc::new(Node {
                id: next_id(),
                shape: self.node.shape.clone(),
                data: Arc::clone(&self.node.data),
                requires_grad: false,
                grad: Mutex::new(None),
                record: None,
            }),
        }
    }

    /// Same values as a fresh trainable leaf.
    pub fn to_param(&self) -> Tensor {
        Tensor {
            node: Arc::new(Node {
                id: next_id(),
                shape: self.node.shape.clone(),
                data: Arc::clone(&self.node.data),
                requires_grad: true,
                grad: Mutex::new(None),
                record: None,
            }),
        }
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.node.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Nodes reachable from `self` through recorded ops, inputs before outputs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(rec) = &t.node.record {
                for inp in rec.inputs.iter().rev() {
                    if inp.requires_grad() && !visited.contains(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// The computation record reaching this tensor, in topological order.
    pub fn record(&self) -> Vec<RecordEntry> {
        self.topo_order()
            .into_iter()
            .filter_map(|t| {
                t.node.record.as_ref().map(|rec| RecordEntry {
                    op: rec.name,
                    inputs: rec.inputs.iter().map(Tensor::id).collect(),
                    output: t.id(),
                })
            })
            .collect()
    }

    /// Fills grad buffers of every trainable leaf with d(self)/d(leaf).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Backward(
                "root is detached from every trainable leaf".into(),
            ));
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let Some(rec) = &t.node.record else {
                if t.requires_grad() {
                    t.accumulate_grad(&g);
                }
                continue;
            };
            let ctx = BackwardCtx {
                output: t.data(),
                grad: &g,
            };
            let input_grads = (rec.backward)(&ctx)?;
            debug_assert_eq!(input_grads.len(), rec.inputs.len(), "{}", rec.name);
            for (inp, gi) in rec.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !inp.requires_grad() {
                    continue;
                }
                debug_assert_eq!(gi.len(), inp.numel(), "{}", rec.name);
                check_finite(rec.name, &gi)?;
                match grads.get_mut(&inp.id()) {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(inp.id(), gi);
                    }
                }
            }
        }
        Ok(())
    }
}
