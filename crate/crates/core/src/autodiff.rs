//! Reverse-mode automatic differentiation over [`Tensor`] operations.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the indices of its inputs. Inputs always precede their
//! consumers, so walking the tape backwards is a reverse topological order.
//! [`Graph::backward`] seeds the scalar loss with gradient one and pushes
//! vector-Jacobian products down the tape.
//!
//! Graphs are throwaway: build one per forward pass, differentiate, drop it.

use crate::error::{Error, Result};
use crate::parallel::try_map_indexed;
use crate::scalar::Scalar;
use crate::tensor::{
    add_assign, broadcast_kind, channelwise_pool_backward, conv2d_grad_bias,
    conv2d_grad_input, conv2d_grad_weight, global_pool_backward, reduce_channels,
    reduce_spatial, BinaryOp, Broadcast, PoolMode, Shape, Tensor, UnaryOp,
};

/// Handle to a node in the [`Graph`] that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    GlobalPool { x: NodeId, mode: PoolMode },
    ChannelPool { x: NodeId, mode: PoolMode },
    Concat { a: NodeId, b: NodeId },
    SliceChannels { x: NodeId, start: usize },
    Permute { x: NodeId, perm: Vec<usize>, inverse: bool },
    Unary { x: NodeId, op: UnaryOp },
    Binary { a: NodeId, b: NodeId, op: BinaryOp, bc: Broadcast },
    ScaleAdd { x: NodeId, mul: T },
    SumPerSample { x: NodeId },
    MeanBatch { x: NodeId },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients of a scalar loss with respect to the tape's leaf nodes.
///
/// Interior gradients are consumed by the backward sweep as it passes them.
/// Leaves that do not feed the loss have no entry; callers that need a
/// dense gradient substitute zeros of the parameter's shape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }

    pub fn take_or_zeros(&mut self, id: NodeId, shape: Shape) -> Tensor<T> {
        self.grads[id.0].take().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Dynamic computation tape.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Graph<T> {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts an input node. Leaves carry constants and parameters alike;
    /// gradients are computed for any leaf the loss depends on.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let kernel = crate::tensor::ConvKernel::new(
            self.value(w).clone(),
            self.value(b).clone(),
        )?;
        let value = self.value(x).conv2d(&kernel)?;
        Ok(self.push(value, Op::Conv2d { x, w, b }))
    }

    pub fn global_pool(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let value = self.value(x).global_pool(mode)?;
        Ok(self.push(value, Op::GlobalPool { x, mode }))
    }

    pub fn channelwise_pool(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let value = self.value(x).channelwise_pool(mode)?;
        Ok(self.push(value, Op::ChannelPool { x, mode }))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).concat_channels(self.value(b))?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let value = self.value(x).slice_channels(start, end)?;
        Ok(self.push(value, Op::SliceChannels { x, start }))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let value = self.value(x).permute_channels(perm)?;
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec(), inverse: false }))
    }

    pub fn unpermute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let value = self.value(x).unpermute_channels(perm)?;
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec(), inverse: true }))
    }

    pub fn unary(&mut self, x: NodeId, op: UnaryOp) -> NodeId {
        let value = self.value(x).map_unary(op);
        self.push(value, Op::Unary { x, op })
    }

    pub fn binary(&mut self, a: NodeId, b: NodeId, op: BinaryOp) -> Result<NodeId> {
        let bc = broadcast_kind(self.shape(a), self.shape(b))?;
        let value = self.value(a).elementwise(self.value(b), op)?;
        Ok(self.push(value, Op::Binary { a, b, op, bc }))
    }

    pub fn scale_add(&mut self, x: NodeId, mul: T, add: T) -> NodeId {
        let value = self.value(x).scale_add(mul, add);
        self.push(value, Op::ScaleAdd { x, mul })
    }

    pub fn sum_per_sample(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).sum_per_sample();
        self.push(value, Op::SumPerSample { x })
    }

    pub fn mean_batch(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).mean_batch()?;
        Ok(self.push(value, Op::MeanBatch { x }))
    }

    /// Gradients of the scalar node `loss` with respect to every node that
    /// feeds it. `loss` must have shape `(1, 1, 1, 1)`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.count() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss node has shape {ls}, expected a scalar (1, 1, 1, 1)"),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(ls, T::one()));

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(dy);
                }
                Op::Conv2d { x, w, b } => {
                    let ws = self.shape(*w);
                    let dx = conv2d_grad_input(&dy, &self.nodes[w.0].value, self.shape(*x));
                    let dw = conv2d_grad_weight(&dy, &self.nodes[x.0].value, ws.n, ws.c, ws.h);
                    let db = conv2d_grad_bias(&dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::GlobalPool { x, mode } => {
                    let dx = global_pool_backward(&dy, &self.nodes[x.0].value, *mode);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ChannelPool { x, mode } => {
                    let dx = channelwise_pool_backward(&dy, &self.nodes[x.0].value, *mode);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { a, b } => {
                    let ca = self.shape(*a).c;
                    let cb = self.shape(*b).c;
                    accumulate(&mut grads, *a, dy.slice_channels(0, ca)?);
                    accumulate(&mut grads, *b, dy.slice_channels(ca, ca + cb)?);
                }
                Op::SliceChannels { x, start } => {
                    let xs = self.shape(*x);
                    let mut dx = Tensor::zeros(xs);
                    let ys = dy.shape();
                    for n in 0..xs.n {
                        let to = (n * xs.c + start) * xs.spatial();
                        let from = n * ys.c * ys.spatial();
                        let len = ys.c * ys.spatial();
                        dx.data_mut()[to..to + len]
                            .copy_from_slice(&dy.data()[from..from + len]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Permute { x, perm, inverse } => {
                    let dx = if *inverse {
                        dy.permute_channels(perm)?
                    } else {
                        dy.unpermute_channels(perm)?
                    };
                    accumulate(&mut grads, *x, dx);
                }
                Op::Unary { x, op } => {
                    let y = &self.nodes[id].value;
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(y.shape());
                    for i in 0..dx.shape().count() {
                        let d = match op {
                            UnaryOp::Exp => y.data()[i],
                            UnaryOp::Tanh => T::one() - y.data()[i] * y.data()[i],
                            // subgradient 0 at the kink
                            UnaryOp::Relu => {
                                if xv.data()[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Sigmoid => y.data()[i] * (T::one() - y.data()[i]),
                        };
                        dx.data_mut()[i] = dy.data()[i] * d;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Binary { a, b, op, bc } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    match op {
                        BinaryOp::Add => {
                            accumulate(&mut grads, *b, reduce_like(&dy, *bc));
                            accumulate(&mut grads, *a, dy);
                        }
                        BinaryOp::Mul => {
                            let da = dy.elementwise(bv, BinaryOp::Mul)?;
                            let full = dy.elementwise(av, BinaryOp::Mul)?;
                            accumulate(&mut grads, *a, da);
                            accumulate(&mut grads, *b, reduce_like(&full, *bc));
                        }
                    }
                }
                Op::ScaleAdd { x, mul } => {
                    accumulate(&mut grads, *x, dy.scale_add(*mul, T::zero()));
                }
                Op::SumPerSample { x } => {
                    let xs = self.shape(*x);
                    let mut dx = Tensor::zeros(xs);
                    let per = xs.c * xs.spatial();
                    for n in 0..xs.n {
                        let g = dy.data()[n];
                        for v in &mut dx.data_mut()[n * per..(n + 1) * per] {
                            *v = g;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanBatch { x } => {
                    let xs = self.shape(*x);
                    let g = dy.data()[0] / T::from_f64(xs.n as f64);
                    accumulate(&mut grads, *x, Tensor::filled(xs, g));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
    match &mut grads[id.0] {
        Some(g) => add_assign(g, &delta),
        slot => *slot = Some(delta),
    }
}

/// Collapses a full-shaped gradient back onto a broadcast operand.
fn reduce_like<T: Scalar>(full: &Tensor<T>, bc: Broadcast) -> Tensor<T> {
    match bc {
        Broadcast::None => full.clone(),
        Broadcast::PerChannel => reduce_spatial(full),
        Broadcast::PerSite => reduce_channels(full),
    }
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` builds a scalar loss from the leaf it is handed; it runs repeatedly
/// on perturbed copies of `point`, so it must be deterministic. Returns the
/// largest elementwise error `|g_ad - g_fd| / max(1, |g_fd|)`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId> + Sync,
{
    if !(eps > 0.0) {
        return Err(Error::contract("grad_check", format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let loss = f(&mut g, x)?;
    if g.shape(loss).count() != 1 {
        return Err(Error::contract(
            "grad_check",
            format!("f produced shape {}, expected a scalar", g.shape(loss)),
        ));
    }
    let mut grads = g.backward(loss)?;
    let g_ad = grads.take_or_zeros(x, point.shape());

    let eval = |data: Vec<T>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(point.shape(), data)?);
        let loss = f(&mut g, x)?;
        Ok(g.value(loss).scalar_value()?.as_f64())
    };
    let n = point.shape().count();
    let g_fd = try_map_indexed(n, |i| -> Result<f64> {
        let mut plus = point.data().to_vec();
        let mut minus = plus.clone();
        let h = T::from_f64(eps);
        plus[i] += h;
        minus[i] -= h;
        Ok((eval(plus)? - eval(minus)?) / (2.0 * eps))
    })?;

    let mut worst = 0.0f64;
    for i in 0..n {
        let err = (g_ad.data()[i].as_f64() - g_fd[i]).abs() / g_fd[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
