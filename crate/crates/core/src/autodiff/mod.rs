//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A computation is a DAG of [`Var`] nodes built by calling op methods;
//! `backward()` on a scalar node walks the graph in reverse creation order
//! and accumulates gradients into every node that needs them. Graphs are
//! rebuilt per step (define-by-run); parameters live outside the graph and
//! are bound as leaf nodes each forward pass.
//!
//! The op set is exactly what the UV generator, discriminators, embedding
//! networks and losses require. Every op's backward is covered by a central
//! finite-difference check in the test module.

mod ops;

pub use ops::{
    add_bias, bilinear_resize, concat_channels, conv2d, conv2d_transpose, global_avg_pool,
    matmul, matmul_nt, mul_channel_mask, softmax_rows, sparse_affine, SparseLinear,
};

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Maps the gradient of a node's output to gradients of its parents.
type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[Var]) -> Vec<Option<ArrayD<f64>>>>;

pub struct Node {
    id: u64,
    value: ArrayD<f64>,
    grad: RefCell<Option<ArrayD<f64>>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// A node in the computation graph. Cheap to clone (shared reference).
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    fn leaf(value: ArrayD<f64>, needs_grad: bool) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            needs_grad,
        }))
    }

    /// A leaf that does not receive gradients.
    pub fn constant(value: ArrayD<f64>) -> Var {
        Var::leaf(value, false)
    }

    /// A leaf that accumulates gradients (a parameter or attacked input).
    pub fn param(value: ArrayD<f64>) -> Var {
        Var::leaf(value, true)
    }

    pub fn scalar(x: f64) -> Var {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub(crate) fn from_op(value: ArrayD<f64>, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let needs_grad = parents.iter().any(|p| p.needs_grad());
        Var(Rc::new(Node {
            id: next_id(),
            value,
            grad: RefCell::new(None),
            parents,
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
        }))
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    /// Value of a 0-dim (scalar) node.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.0.value.len(), 1);
        self.0.value.iter().copied().next().unwrap()
    }

    /// Accumulated gradient, if `backward` has reached this node.
    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.0.grad.borrow().clone()
    }

    fn accumulate_grad(&self, g: ArrayD<f64>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => *existing += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar node. Call once per graph.
    pub fn backward(&self) {
        assert_eq!(
            self.0.value.len(),
            1,
            "backward() requires a scalar output, got shape {:?}",
            self.shape()
        );
        let mut reachable: Vec<Var> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !v.needs_grad() || !seen.insert(v.0.id) {
                continue;
            }
            for p in &v.0.parents {
                stack.push(p.clone());
            }
            reachable.push(v);
        }
        // Parents are always created before children, so descending id order
        // is a reverse topological order.
        reachable.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        self.accumulate_grad(ArrayD::from_elem(self.0.value.raw_dim(), 1.0));
        for node in &reachable {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let grad = node.0.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            let parent_grads = backward(&grad, &node.0.parents);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                if let (true, Some(pg)) = (parent.needs_grad(), pg) {
                    debug_assert_eq!(pg.shape(), parent.shape());
                    parent.accumulate_grad(pg);
                }
            }
        }
    }

    // ---- elementwise and reduction ops ----

    pub fn add(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let value = &self.0.value + &rhs.0.value;
        Var::from_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let value = &self.0.value - &rhs.0.value;
        Var::from_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(-g.clone())]),
        )
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let value = &self.0.value * &rhs.0.value;
        Var::from_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents| {
                vec![
                    Some(g * parents[1].value()),
                    Some(g * parents[0].value()),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Var {
        Var::from_op(
            -self.0.value.clone(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(-g.clone())]),
        )
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::from_op(
            &self.0.value * c,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g * c)]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Var::from_op(
            &self.0.value + c,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }

    pub fn recip(&self) -> Var {
        let value = self.0.value.mapv(f64::recip);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, parents| {
                let x = parents[0].value();
                vec![Some(g * &x.mapv(|v| -1.0 / (v * v)))]
            }),
        )
    }

    /// `sqrt(x + eps)`; the offset keeps the derivative finite at zero.
    pub fn sqrt_eps(&self, eps: f64) -> Var {
        let value = self.0.value.mapv(|v| (v + eps).sqrt());
        let cached = value.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g * &cached.mapv(|y| 0.5 / y))]),
        )
    }

    pub fn exp(&self) -> Var {
        let value = self.0.value.mapv(f64::exp);
        let cached = value.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g * &cached)]),
        )
    }

    /// Natural log; inputs must be positive (clamp first for probabilities).
    pub fn ln(&self) -> Var {
        let value = self.0.value.mapv(f64::ln);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, parents| vec![Some(g / parents[0].value())]),
        )
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.0.value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let cached = value.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g * &cached.mapv(|y| y * (1.0 - y)))]),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.0.value.mapv(|v| if v > 0.0 { v } else { slope * v });
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].value();
                vec![Some(g * &x.mapv(|v| if v > 0.0 { 1.0 } else { slope }))]
            }),
        )
    }

    /// Clamp with pass-through gradient strictly inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let value = self.0.value.mapv(|v| v.clamp(lo, hi));
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].value();
                let mask = x.mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
                vec![Some(g * &mask)]
            }),
        )
    }

    pub fn clamp_min(&self, lo: f64) -> Var {
        self.clamp(lo, f64::INFINITY)
    }

    pub fn sum_all(&self) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.0.value.sum());
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, parents| {
                let gv = g.iter().copied().next().unwrap();
                vec![Some(ArrayD::from_elem(parents[0].value().raw_dim(), gv))]
            }),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.0.value.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Multiply a tensor by a scalar (0-dim) node.
    pub fn mul_scalar_var(&self, s: &Var) -> Var {
        assert_eq!(s.value().len(), 1, "mul_scalar_var: rhs must be scalar");
        let sv = s.scalar_value();
        Var::from_op(
            &self.0.value * sv,
            vec![self.clone(), s.clone()],
            Box::new(|g, parents| {
                let s = parents[1].scalar_value();
                let ds = (g * parents[0].value()).sum();
                vec![
                    Some(g * s),
                    Some(ArrayD::from_elem(IxDyn(&[]), ds)),
                ]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let value = self
            .0
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shape");
        let orig: Vec<usize> = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(
                    g.clone()
                        .into_shape_with_order(IxDyn(&orig))
                        .expect("reshape backward"),
                )]
            }),
        )
    }

    /// Reverse axis 1 (the `v` / column axis of UV-space tensors).
    pub fn flip_cols(&self) -> Var {
        let value = flip_axis1(&self.0.value);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(flip_axis1(g))]),
        )
    }

    /// Cut the graph: same value, no gradient flow.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }
}

pub(crate) fn flip_axis1(a: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = a.clone();
    out.invert_axis(ndarray::Axis(1));
    // Re-standardize memory layout so later reshapes see contiguous data.
    ArrayD::from_shape_vec(a.raw_dim(), out.iter().copied().collect()).unwrap()
}

#[cfg(test)]
mod tests;
