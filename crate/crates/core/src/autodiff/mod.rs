//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape of primitive applications. Every tensor is a
//! two-dimensional row-major matrix (scalars are `1 x 1`); there is no
//! broadcasting beyond scalar ops, only explicit concatenation, gathers, and
//! matmuls against constant tile matrices. Forward values are checked for
//! finiteness after every primitive, and [`Graph::backward`] visits nodes in
//! exact reverse recording order, accumulating analytic vector-Jacobian
//! products. [`gradcheck`] provides the central-finite-difference harness
//! used to verify every primitive and every composite loss in the crate.
//!
//! Everything is 64-bit and sequential: identical graphs and inputs produce
//! bit-identical values and gradients.

mod gradcheck;
mod ops;
mod params;

pub use gradcheck::{grad_check, primitive_suite, GradReport};
pub use ops::Op;
pub use params::{Adam, ParamStore};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar (1 x 1) loss")]
    NotScalar,
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("bad argument: {0}")]
    BadArg(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// A detached dense matrix value: the storage behind parameters, constants,
/// and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len(), "tensor size mismatch");
        Tensor { rows, cols, values }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            values: vec![v],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Tensor { rows, cols, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Id(pub(crate) u32);

impl Id {
    pub(crate) fn idx(self) -> usize {
        self.0 as usize
    }
}

pub(crate) struct Node {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// The tape. Single-threaded by contract; independent graphs may run in
/// parallel.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// Insert a differentiable leaf (a parameter).
    pub fn leaf(&mut self, t: &Tensor) -> Id {
        self.push_unchecked(t.rows, t.cols, t.values.clone(), Op::Leaf, true)
    }

    /// Insert a non-differentiable value (data, geometry, tile matrices).
    pub fn constant(&mut self, t: &Tensor) -> Id {
        self.push_unchecked(t.rows, t.cols, t.values.clone(), Op::Constant, false)
    }

    pub fn constant_from(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Id {
        assert_eq!(rows * cols, values.len());
        self.push_unchecked(rows, cols, values, Op::Constant, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Id {
        self.constant_from(1, 1, vec![v])
    }

    /// Copy a node's current values into a fresh constant, cutting the
    /// gradient path.
    pub fn detach(&mut self, x: Id) -> Id {
        let n = &self.nodes[x.idx()];
        let (rows, cols, values) = (n.rows, n.cols, n.values.clone());
        self.push_unchecked(rows, cols, values, Op::Constant, false)
    }

    pub fn rows(&self, id: Id) -> usize {
        self.nodes[id.idx()].rows
    }

    pub fn cols(&self, id: Id) -> usize {
        self.nodes[id.idx()].cols
    }

    pub fn values(&self, id: Id) -> &[f64] {
        &self.nodes[id.idx()].values
    }

    pub fn value_scalar(&self, id: Id) -> f64 {
        debug_assert_eq!(self.nodes[id.idx()].values.len(), 1);
        self.nodes[id.idx()].values[0]
    }

    pub fn to_tensor(&self, id: Id) -> Tensor {
        let n = &self.nodes[id.idx()];
        Tensor::new(n.rows, n.cols, n.values.clone())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push_unchecked(
        &mut self,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Id {
        debug_assert_eq!(rows * cols, values.len());
        self.nodes.push(Node {
            rows,
            cols,
            values,
            op,
            requires_grad,
        });
        Id((self.nodes.len() - 1) as u32)
    }

    /// Push a computed node, verifying finiteness of the forward values.
    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Id, DiffError> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(DiffError::NonFinite { op: op_name });
        }
        Ok(self.push_unchecked(rows, cols, values, op, requires_grad))
    }

    pub(crate) fn requires(&self, id: Id) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    /// Populate gradients of `loss` with respect to every differentiable
    /// node. Errors if the loss is not scalar or the tape was already
    /// consumed.
    pub fn backward(&mut self, loss: Id) -> Result<(), DiffError> {
        if self.consumed {
            return Err(DiffError::TapeConsumed);
        }
        let l = loss.idx();
        {
            let n = &self.nodes[l];
            if n.rows * n.cols != 1 {
                return Err(DiffError::NotScalar);
            }
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=l).map(|_| None).collect();
        if self.nodes[l].requires_grad {
            grads[l] = Some(vec![1.0]);
        }
        for nid in (0..=l).rev() {
            let Some(g) = grads[nid].take() else {
                continue;
            };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(DiffError::NonFinite { op: "backward" });
            }
            ops::accumulate_vjp(&self.nodes, nid, &g, &mut grads);
            grads[nid] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient buffer of a node after [`Graph::backward`]; `None` when the
    /// node did not participate or does not require gradients.
    pub fn grad(&self, id: Id) -> Option<&[f64]> {
        self.grads
            .get(id.idx())
            .and_then(|g| g.as_deref())
    }
}
