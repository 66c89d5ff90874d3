//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records vector-level operations in evaluation order. Values
//! are computed eagerly; [`Graph::backward`] walks the tape once in reverse
//! and returns gradients for every parameter that was read.

use super::{
    axpy, check_affine_shapes, matvec_add, matvec_t_add, outer_add, Activation, NumericsError,
    ParamId, ParameterStore, Real, Result, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleElem { x: NodeId, s: NodeId, index: usize },
    Act { x: NodeId, kind: Activation },
    Concat(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Scalar computed outside the tape, with its local partials.
    ScalarFn { inputs: Vec<NodeId>, partials: Vec<Vec<T>> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    /// Empty for parameter nodes; their values live in the store.
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s, T> {
    store: &'s ParameterStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Per-parameter gradients, indexed like the store. `None` means the
/// parameter was not reached.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T>(Vec<Option<Vec<T>>>);

impl<T: Real> Gradients<T> {
    pub fn iter(&self) -> impl Iterator<Item = Option<&Vec<T>>> {
        self.0.iter().map(|g| g.as_ref())
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn zeros_like(store: &ParameterStore<T>) -> Self {
        Gradients(store.iter().map(|p| Some(vec![T::zero(); p.value.numel()])).collect())
    }

    /// `self += other`, visiting parameters in index order.
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => axpy(T::one(), t, m),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }
}

/// Result of a reverse sweep.
pub struct Backward<T> {
    grads: Vec<Option<Vec<T>>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<T: Real> Backward<T> {
    /// Gradient of the seeded output with respect to a node.
    pub fn node_grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn into_gradients(mut self) -> Gradients<T> {
        let grads = self
            .param_nodes
            .iter()
            .map(|n| n.and_then(|n| self.grads[n.0].take()))
            .collect();
        Gradients(grads)
    }
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParameterStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParameterStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(p) => self.store.value(p).data(),
            _ => &node.value,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    pub fn constant_vector(&mut self, v: Vec<T>) -> NodeId {
        self.constant(Tensor::vector(v))
    }

    /// Leaf whose gradient is reported by [`Backward::node_grad`].
    pub fn variable(&mut self, t: Tensor<T>) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), true, Op::Leaf)
    }

    /// Node reading a stored parameter. Repeated calls reuse one node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let shape = self.store.value(id).shape().to_vec();
        let n = self.push(shape, Vec::new(), true, Op::Param(id));
        self.param_nodes[id.0] = Some(n);
        n
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        check_affine_shapes(self.shape(x), self.shape(w), self.shape(b))?;
        let mut out = self.value(b).to_vec();
        matvec_add(self.value(w), self.value(x), &mut out);
        let rg = self.rg(&[x, w, b]);
        let shape = vec![out.len()];
        Ok(self.push(shape, out, rg, Op::Affine { x, w, b }))
    }

    /// Affine map with stored weight and bias.
    pub fn affine_params(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let w = self.param(w);
        let b = self.param(b);
        self.affine(x, w, b)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Dimension {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> NodeId {
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// `x · s[index]` for a vector node `s`.
    pub fn scale_elem(&mut self, x: NodeId, s: NodeId, index: usize) -> Result<NodeId> {
        let Some(&k) = self.value(s).get(index) else {
            return Err(NumericsError::Dimension {
                op: "scale_elem",
                left: self.shape(s).to_vec(),
                right: vec![index],
            });
        };
        let out: Vec<T> = self.value(x).iter().map(|&v| v * k).collect();
        let rg = self.rg(&[x, s]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, rg, Op::ScaleElem { x, s, index }))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let out: Vec<T> = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Tanh)
    }

    /// Joins two vectors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a).len() != 1 || self.shape(b).len() != 1 {
            return Err(NumericsError::Dimension {
                op: "concat",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let rg = self.rg(&[a, b]);
        let shape = vec![out.len()];
        Ok(self.push(shape, out, rg, Op::Concat(a, b)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![m], rg, Op::Mean(x))
    }

    /// Records a scalar whose value and partial derivatives with respect to
    /// `inputs` were computed outside the tape.
    pub fn scalar_fn(&mut self, inputs: Vec<NodeId>, value: T, partials: Vec<Vec<T>>) -> Result<NodeId> {
        if inputs.len() != partials.len() {
            return Err(NumericsError::Dimension {
                op: "scalar_fn",
                left: vec![inputs.len()],
                right: vec![partials.len()],
            });
        }
        for (&i, p) in inputs.iter().zip(&partials) {
            if self.value(i).len() != p.len() {
                return Err(NumericsError::Dimension {
                    op: "scalar_fn",
                    left: self.shape(i).to_vec(),
                    right: vec![p.len()],
                });
            }
        }
        let rg = self.rg(&inputs);
        Ok(self.push(vec![1], vec![value], rg, Op::ScalarFn { inputs, partials }))
    }

    /// Gradient of a scalar `loss` with respect to everything it reached.
    pub fn backward(&self, loss: NodeId) -> Result<Backward<T>> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_from(loss, &[T::one()], true)
    }

    /// Vector-Jacobian product seeded at `output`. With `params = false`
    /// parameter gradients are skipped.
    pub fn backward_from(&self, output: NodeId, seed: &[T], params: bool) -> Result<Backward<T>> {
        if seed.len() != self.value(output).len() {
            return Err(NumericsError::Dimension {
                op: "backward seed",
                left: self.shape(output).to_vec(),
                right: vec![seed.len()],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.to_vec());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    if self.wants(*x, params) {
                        let gx = slot(&mut grads, *x, self.value(*x).len());
                        matvec_t_add(self.value(*w), &g, gx);
                    }
                    if self.wants(*w, params) {
                        let xv = self.value(*x);
                        let gw = slot(&mut grads, *w, self.value(*w).len());
                        outer_add(&g, xv, gw);
                    }
                    if self.wants(*b, params) {
                        axpy(T::one(), &g, slot(&mut grads, *b, g.len()));
                    }
                }
                Op::Add(a, b) => {
                    for &n in [a, b] {
                        if self.wants(n, params) {
                            axpy(T::one(), &g, slot(&mut grads, n, g.len()));
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.wants(*a, params) {
                        axpy(T::one(), &g, slot(&mut grads, *a, g.len()));
                    }
                    if self.wants(*b, params) {
                        axpy(-T::one(), &g, slot(&mut grads, *b, g.len()));
                    }
                }
                Op::Mul(a, b) => {
                    if self.wants(*a, params) {
                        let bv = self.value(*b);
                        let ga = slot(&mut grads, *a, g.len());
                        for ((o, &gi), &bi) in ga.iter_mut().zip(&g).zip(bv) {
                            *o = *o + gi * bi;
                        }
                    }
                    if self.wants(*b, params) {
                        let av = self.value(*a);
                        let gb = slot(&mut grads, *b, g.len());
                        for ((o, &gi), &ai) in gb.iter_mut().zip(&g).zip(av) {
                            *o = *o + gi * ai;
                        }
                    }
                }
                Op::ScaleElem { x, s, index } => {
                    let k = self.value(*s)[*index];
                    if self.wants(*x, params) {
                        axpy(k, &g, slot(&mut grads, *x, g.len()));
                    }
                    if self.wants(*s, params) {
                        let d = super::dot(&g, self.value(*x));
                        let gs = slot(&mut grads, *s, self.value(*s).len());
                        gs[*index] = gs[*index] + d;
                    }
                }
                Op::Act { x, kind } => {
                    if self.wants(*x, params) {
                        let y = &node.value;
                        let gx = slot(&mut grads, *x, g.len());
                        for ((o, &gi), &yi) in gx.iter_mut().zip(&g).zip(y) {
                            *o = *o + gi * kind.derivative_from_output(yi);
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    if self.wants(*a, params) {
                        axpy(T::one(), &g[..na], slot(&mut grads, *a, na));
                    }
                    if self.wants(*b, params) {
                        let nb = g.len() - na;
                        axpy(T::one(), &g[na..], slot(&mut grads, *b, nb));
                    }
                }
                Op::Sum(x) | Op::Mean(x) => {
                    if self.wants(*x, params) {
                        let n = self.value(*x).len();
                        let k = if matches!(node.op, Op::Mean(_)) {
                            g[0] / T::of(n as f64)
                        } else {
                            g[0]
                        };
                        for o in slot(&mut grads, *x, n).iter_mut() {
                            *o = *o + k;
                        }
                    }
                }
                Op::ScalarFn { inputs, partials } => {
                    for (&i, p) in inputs.iter().zip(partials) {
                        if self.wants(i, params) {
                            axpy(g[0], p, slot(&mut grads, i, p.len()));
                        }
                    }
                }
            }
        }

        Ok(Backward {
            grads,
            param_nodes: self.param_nodes.clone(),
        })
    }

    fn wants(&self, id: NodeId, params: bool) -> bool {
        let node = &self.nodes[id.0];
        node.requires_grad && (params || !matches!(node.op, Op::Param(_)))
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut Vec<T> {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}
