//! Dense row-major `f64` tensors with a dynamic reverse-mode tape.
//!
//! Every op result keeps a handle to its parents and a closure that maps the
//! output gradient to parent gradients. `backward` walks the graph in reverse
//! topological order. Intermediate gradients live only for the duration of a
//! single `backward` call; leaves that require grad accumulate into their
//! persistent `grad` buffer, so two calls without `zero_grad` double it.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor]) -> Vec<Option<Vec<f64>>>>;

struct Op {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph edges.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("zero-sized dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::leaf(t.0.shape.clone(), t.0.data.take(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Builds a `rows x cols` matrix from nested rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged matrix rows".into()));
        }
        Self::new(&[r, c], rows.concat())
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op: None,
        }))
    }

    /// Creates an op result. The graph edge is dropped when no parent needs
    /// a gradient or recording is disabled.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: tracked,
            op: tracked.then_some(Op { parents, backward }),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    /// Overwrites leaf values in place (optimiser updates, perturbation).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape("set_data", self.shape(), &[data.len()]));
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A copy of the values with no graph history.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.to_vec(), false)
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Backpropagates from a single-element tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        self.backward_with(vec![1.0])
    }

    /// Backpropagates an explicit output gradient.
    pub fn backward_with(&self, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(Error::shape("backward", self.shape(), &[seed.len()]));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), seed);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let parent_grads = (op.backward)(&g, &op.parents);
                    debug_assert_eq!(parent_grads.len(), op.parents.len());
                    for (parent, pg) in op.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match grads.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.key()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.0.op {
                for p in &op.parents {
                    if p.requires_grad() && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}
