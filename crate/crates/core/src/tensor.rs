//! Dense 4-D tensors (batch, channels, height, width) and the few neural
//! primitives everything else is built from: same-padded convolution,
//! global and channelwise pooling, channel concat/slice/permute, pointwise
//! maps, and restricted-broadcast elementwise arithmetic.
//!
//! All operations are pure: inputs are borrowed, outputs are fresh tensors.
//! Convolution is cross-correlation (no kernel flip) with zero "same"
//! padding of `(k-1)/2`, so spatial extent is always preserved.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::scalar::Scalar;

/// Extents of a 4-D tensor in `(batch, channels, height, width)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    /// Row-major element offset, batch outermost.
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array of scalars in row-major batch→channel→row→column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

/// Pooling reduction used by both pooling primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Pointwise map applied by [`Tensor::map_unary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Tanh,
    Relu,
    Sigmoid,
}

/// Elementwise combination applied by [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

/// How the right operand of an elementwise op lines up with the left.
///
/// Broadcasting is deliberately restricted to the two attention-map shapes;
/// anything else is a loud shape error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    /// Identical shapes.
    None,
    /// Right operand is `(N, C, 1, 1)`: one value per channel.
    PerChannel,
    /// Right operand is `(N, 1, H, W)`: one value per spatial site.
    PerSite,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Tensor<T>> {
        if data.len() != shape.count() {
            return Err(Error::shape(
                "tensor",
                format!("data length {} != shape {} = {}", data.len(), shape, shape.count()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Tensor<T> {
        Tensor { shape, data: vec![T::zero(); shape.count()] }
    }

    pub fn filled(shape: Shape, value: T) -> Tensor<T> {
        Tensor { shape, data: vec![value; shape.count()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference, in f64. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Same-padded cross-correlation with `kernel`, bias added per output
    /// channel. Output shape is `(N, C_out, H, W)`.
    pub fn conv2d(&self, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
        let x = self.shape;
        let (c_out, c_in, k) = kernel.dims();
        if x.c != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", x.c, c_in),
            ));
        }
        let pad = (k - 1) / 2;
        let out_shape = Shape::new(x.n, c_out, x.h, x.w);
        let mut out = Tensor::zeros(out_shape);
        let xd = &self.data;
        let wd = kernel.weight.data();
        let bd = kernel.bias.data();
        // One chunk per (sample, output channel) plane; the site sum runs in
        // a fixed ci→p→q order so results are identical at any thread count.
        for_each_chunk(&mut out.data, x.h * x.w, |plane, chunk| {
            let n = plane / c_out;
            let co = plane % c_out;
            for i in 0..x.h {
                for j in 0..x.w {
                    let mut acc = T::zero();
                    for ci in 0..c_in {
                        for p in 0..k {
                            let si = i + p;
                            if si < pad || si - pad >= x.h {
                                continue;
                            }
                            let row = ((n * x.c + ci) * x.h + (si - pad)) * x.w;
                            let wrow = ((co * c_in + ci) * k + p) * k;
                            for q in 0..k {
                                let sj = j + q;
                                if sj < pad || sj - pad >= x.w {
                                    continue;
                                }
                                acc += xd[row + sj - pad] * wd[wrow + q];
                            }
                        }
                    }
                    chunk[i * x.w + j] = acc + bd[co];
                }
            }
        });
        Ok(out)
    }

    /// Per-channel mean or max over all spatial sites; output `(N, C, 1, 1)`.
    pub fn global_pool(&self, mode: PoolMode) -> Result<Tensor<T>> {
        let s = self.shape;
        if s.spatial() == 0 {
            return Err(Error::shape("global_pool", format!("empty spatial extent in {s}")));
        }
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * s.spatial();
                let plane = &self.data[base..base + s.spatial()];
                out.data[n * s.c + c] = match mode {
                    PoolMode::Avg => {
                        let mut acc = T::zero();
                        for &v in plane {
                            acc += v;
                        }
                        acc / T::from_f64(s.spatial() as f64)
                    }
                    PoolMode::Max => plane.iter().copied().fold(plane[0], T::max),
                };
            }
        }
        Ok(out)
    }

    /// Per-site mean or max across channels; output `(N, 1, H, W)`.
    pub fn channelwise_pool(&self, mode: PoolMode) -> Result<Tensor<T>> {
        let s = self.shape;
        if s.c == 0 {
            return Err(Error::shape("channelwise_pool", format!("no channels in {s}")));
        }
        let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
        for n in 0..s.n {
            for hw in 0..s.spatial() {
                let mut acc = self.data[(n * s.c) * s.spatial() + hw];
                for c in 1..s.c {
                    let v = self.data[(n * s.c + c) * s.spatial() + hw];
                    acc = match mode {
                        PoolMode::Avg => acc + v,
                        PoolMode::Max => acc.max(v),
                    };
                }
                out.data[n * s.spatial() + hw] = match mode {
                    PoolMode::Avg => acc / T::from_f64(s.c as f64),
                    PoolMode::Max => acc,
                };
            }
        }
        Ok(out)
    }

    /// Stacks `other`'s channels after `self`'s. Batch and spatial extents
    /// must agree.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape, other.shape);
        if a.n != b.n || a.h != b.h || a.w != b.w {
            return Err(Error::shape(
                "concat_channels",
                format!("incompatible extents {a} vs {b}"),
            ));
        }
        let out_shape = Shape::new(a.n, a.c + b.c, a.h, a.w);
        let mut data = Vec::with_capacity(out_shape.count());
        let (sa, sb) = (a.c * a.spatial(), b.c * b.spatial());
        for n in 0..a.n {
            data.extend_from_slice(&self.data[n * sa..(n + 1) * sa]);
            data.extend_from_slice(&other.data[n * sb..(n + 1) * sb]);
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Concatenates along the batch axis. All items must share (C, H, W).
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("stack", "no tensors to stack"))?;
        let s = first.shape;
        let mut n_total = 0;
        for t in items {
            let ts = t.shape;
            if (ts.c, ts.h, ts.w) != (s.c, s.h, s.w) {
                return Err(Error::shape(
                    "stack",
                    format!("mixed extents {ts} vs {s}"),
                ));
            }
            n_total += ts.n;
        }
        let mut data = Vec::with_capacity(n_total * s.c * s.spatial());
        for t in items {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: Shape::new(n_total, s.c, s.h, s.w), data })
    }

    /// Copies sample `n` into a new single-sample tensor.
    pub fn sample(&self, n: usize) -> Result<Tensor<T>> {
        let s = self.shape;
        if n >= s.n {
            return Err(Error::contract(
                "sample",
                format!("index {n} out of {} samples", s.n),
            ));
        }
        let per = s.c * s.spatial();
        Tensor::new(Shape::new(1, s.c, s.h, s.w), self.data[n * per..(n + 1) * per].to_vec())
    }

    /// Copies channels `start..end` into a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let s = self.shape;
        if start >= end || end > s.c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{end} out of {} channels", s.c),
            ));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(s.n * width * s.spatial());
        for n in 0..s.n {
            let base = (n * s.c + start) * s.spatial();
            data.extend_from_slice(&self.data[base..base + width * s.spatial()]);
        }
        Tensor::new(Shape::new(s.n, width, s.h, s.w), data)
    }

    /// Reorders channels: output channel `i` is input channel `perm[i]`.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Tensor<T>> {
        validate_perm(perm, self.shape.c)?;
        let s = self.shape;
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for (i, &src) in perm.iter().enumerate() {
                let to = (n * s.c + i) * s.spatial();
                let from = (n * s.c + src) * s.spatial();
                out.data[to..to + s.spatial()]
                    .copy_from_slice(&self.data[from..from + s.spatial()]);
            }
        }
        Ok(out)
    }

    /// Exact inverse of [`Tensor::permute_channels`] with the same `perm`.
    pub fn unpermute_channels(&self, perm: &[usize]) -> Result<Tensor<T>> {
        validate_perm(perm, self.shape.c)?;
        let s = self.shape;
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for (i, &src) in perm.iter().enumerate() {
                let to = (n * s.c + src) * s.spatial();
                let from = (n * s.c + i) * s.spatial();
                out.data[to..to + s.spatial()]
                    .copy_from_slice(&self.data[from..from + s.spatial()]);
            }
        }
        Ok(out)
    }

    pub fn map_unary(&self, op: UnaryOp) -> Tensor<T> {
        let data = self.data.iter().map(|&v| apply_unary(v, op)).collect();
        Tensor { shape: self.shape, data }
    }

    /// Elementwise `self op other`. `other` must match `self`'s shape or be
    /// one of the two broadcastable attention shapes, `(N, C, 1, 1)` or
    /// `(N, 1, H, W)`.
    pub fn elementwise(&self, other: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
        let bc = broadcast_kind(self.shape, other.shape)?;
        let s = self.shape;
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let i = s.index(n, c, h, w);
                        let b = match bc {
                            Broadcast::None => other.data[i],
                            Broadcast::PerChannel => other.data[n * s.c + c],
                            Broadcast::PerSite => other.data[(n * s.h + h) * s.w + w],
                        };
                        out.data[i] = apply_binary(self.data[i], b, op);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Pointwise affine map `mul * x + add` with scalar constants.
    pub fn scale_add(&self, mul: T, add: T) -> Tensor<T> {
        let data = self.data.iter().map(|&v| mul * v + add).collect();
        Tensor { shape: self.shape, data }
    }

    /// Sums every element of each sample; output `(N, 1, 1, 1)`.
    pub fn sum_per_sample(&self) -> Tensor<T> {
        let s = self.shape;
        let per = s.c * s.spatial();
        let data = (0..s.n)
            .map(|n| {
                let mut acc = T::zero();
                for &v in &self.data[n * per..(n + 1) * per] {
                    acc += v;
                }
                acc
            })
            .collect();
        Tensor { shape: Shape::new(s.n, 1, 1, 1), data }
    }

    /// Mean over the batch of a `(N, 1, 1, 1)` tensor; output `(1, 1, 1, 1)`.
    pub fn mean_batch(&self) -> Result<Tensor<T>> {
        let s = self.shape;
        if s.c != 1 || s.h != 1 || s.w != 1 {
            return Err(Error::shape(
                "mean_batch",
                format!("expected (N, 1, 1, 1), got {s}"),
            ));
        }
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        let mean = acc / T::from_f64(s.n as f64);
        Ok(Tensor { shape: Shape::new(1, 1, 1, 1), data: vec![mean] })
    }

    /// The single element of a `(1, 1, 1, 1)` tensor.
    pub fn scalar_value(&self) -> Result<T> {
        if self.shape.count() != 1 {
            return Err(Error::contract(
                "scalar_value",
                format!("tensor {} is not scalar-shaped", self.shape),
            ));
        }
        Ok(self.data[0])
    }
}

#[inline]
fn apply_unary<T: Scalar>(v: T, op: UnaryOp) -> T {
    match op {
        UnaryOp::Exp => v.exp(),
        UnaryOp::Tanh => v.tanh(),
        UnaryOp::Relu => {
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        }
        UnaryOp::Sigmoid => sigmoid(v),
    }
}

/// Numerically stable logistic function.
#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn apply_binary<T: Scalar>(a: T, b: T, op: BinaryOp) -> T {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Mul => a * b,
    }
}

pub(crate) fn broadcast_kind(a: Shape, b: Shape) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::None)
    } else if b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1 {
        Ok(Broadcast::PerChannel)
    } else if b.n == a.n && b.c == 1 && b.h == a.h && b.w == a.w {
        Ok(Broadcast::PerSite)
    } else {
        Err(Error::shape(
            "elementwise",
            format!("{b} does not broadcast against {a}"),
        ))
    }
}

fn validate_perm(perm: &[usize], channels: usize) -> Result<()> {
    if perm.len() != channels {
        return Err(Error::contract(
            "permute_channels",
            format!("permutation length {} != {} channels", perm.len(), channels),
        ));
    }
    let mut seen = vec![false; channels];
    for &p in perm {
        if p >= channels || seen[p] {
            return Err(Error::contract(
                "permute_channels",
                format!("not a bijection on 0..{channels}: {perm:?}"),
            ));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Convolution weights `(C_out, C_in, k, k)` plus a per-output-channel bias
/// stored as `(1, C_out, 1, 1)`. Odd `k` keeps same padding exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<ConvKernel<T>> {
        let w = weight.shape();
        if w.h != w.w || !matches!(w.h, 1 | 3 | 7) {
            return Err(Error::contract(
                "conv_kernel",
                format!("kernel size must be 1, 3 or 7, got {}x{}", w.h, w.w),
            ));
        }
        let b = bias.shape();
        if b != Shape::new(1, w.n, 1, 1) {
            return Err(Error::shape(
                "conv_kernel",
                format!("bias {} does not match {} output channels", b, w.n),
            ));
        }
        Ok(ConvKernel { weight, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Result<ConvKernel<T>> {
        ConvKernel::new(
            Tensor::zeros(Shape::new(c_out, c_in, k, k)),
            Tensor::zeros(Shape::new(1, c_out, 1, 1)),
        )
    }

    /// `(C_out, C_in, k)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s.n, s.c, s.h)
    }
}

// ── Backward kernels ────────────────────────────────────────────────────
//
// Vector-Jacobian products for the primitives above. These live next to the
// forward code because they share its indexing; the tape in `autodiff`
// dispatches to them.

pub(crate) fn conv2d_grad_input<T: Scalar>(
    dy: &Tensor<T>,
    weight: &Tensor<T>,
    input_shape: Shape,
) -> Tensor<T> {
    let ws = weight.shape();
    let (c_out, c_in, k) = (ws.n, ws.c, ws.h);
    let pad = (k - 1) / 2;
    let s = input_shape;
    let dyd = dy.data();
    let wd = weight.data();
    let mut dx = Tensor::zeros(s);
    for_each_chunk(&mut dx.data, s.spatial(), |plane, chunk| {
        let n = plane / c_in;
        let ci = plane % c_in;
        for a in 0..s.h {
            for b in 0..s.w {
                let mut acc = T::zero();
                for co in 0..c_out {
                    for p in 0..k {
                        let oi = a + pad;
                        if oi < p || oi - p >= s.h {
                            continue;
                        }
                        let dyrow = ((n * c_out + co) * s.h + (oi - p)) * s.w;
                        let wrow = ((co * c_in + ci) * k + p) * k;
                        for q in 0..k {
                            let oj = b + pad;
                            if oj < q || oj - q >= s.w {
                                continue;
                            }
                            acc += dyd[dyrow + oj - q] * wd[wrow + q];
                        }
                    }
                }
                chunk[a * s.w + b] = acc;
            }
        }
    });
    dx
}

pub(crate) fn conv2d_grad_weight<T: Scalar>(
    dy: &Tensor<T>,
    input: &Tensor<T>,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Tensor<T> {
    let pad = (k - 1) / 2;
    let s = input.shape();
    let ys = dy.shape();
    let dyd = dy.data();
    let xd = input.data();
    let mut dw = Tensor::zeros(Shape::new(c_out, c_in, k, k));
    for_each_chunk(&mut dw.data, c_in * k * k, |co, chunk| {
        for ci in 0..c_in {
            for p in 0..k {
                for q in 0..k {
                    let mut acc = T::zero();
                    for n in 0..s.n {
                        for i in 0..s.h {
                            let si = i + p;
                            if si < pad || si - pad >= s.h {
                                continue;
                            }
                            let xrow = ((n * s.c + ci) * s.h + (si - pad)) * s.w;
                            let dyrow = ((n * ys.c + co) * s.h + i) * s.w;
                            for j in 0..s.w {
                                let sj = j + q;
                                if sj < pad || sj - pad >= s.w {
                                    continue;
                                }
                                acc += dyd[dyrow + j] * xd[xrow + sj - pad];
                            }
                        }
                    }
                    chunk[(ci * k + p) * k + q] = acc;
                }
            }
        }
    });
    dw
}

pub(crate) fn conv2d_grad_bias<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let mut db = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.spatial();
            let mut acc = db.data[c];
            for &v in &dy.data()[base..base + s.spatial()] {
                acc += v;
            }
            db.data[c] = acc;
        }
    }
    db
}

pub(crate) fn global_pool_backward<T: Scalar>(
    dy: &Tensor<T>,
    input: &Tensor<T>,
    mode: PoolMode,
) -> Tensor<T> {
    let s = input.shape();
    let mut dx = Tensor::zeros(s);
    let inv = T::one() / T::from_f64(s.spatial() as f64);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = dy.data()[n * s.c + c];
            let base = (n * s.c + c) * s.spatial();
            match mode {
                PoolMode::Avg => {
                    for i in 0..s.spatial() {
                        dx.data[base + i] = g * inv;
                    }
                }
                PoolMode::Max => {
                    // Ties route to the first maximum in scan order.
                    let plane = &input.data()[base..base + s.spatial()];
                    let mut arg = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[arg] {
                            arg = i;
                        }
                    }
                    dx.data[base + arg] = g;
                }
            }
        }
    }
    dx
}

pub(crate) fn channelwise_pool_backward<T: Scalar>(
    dy: &Tensor<T>,
    input: &Tensor<T>,
    mode: PoolMode,
) -> Tensor<T> {
    let s = input.shape();
    let mut dx = Tensor::zeros(s);
    let inv = T::one() / T::from_f64(s.c as f64);
    for n in 0..s.n {
        for hw in 0..s.spatial() {
            let g = dy.data()[n * s.spatial() + hw];
            match mode {
                PoolMode::Avg => {
                    for c in 0..s.c {
                        dx.data[(n * s.c + c) * s.spatial() + hw] = g * inv;
                    }
                }
                PoolMode::Max => {
                    let mut arg = 0;
                    let mut best = input.data()[(n * s.c) * s.spatial() + hw];
                    for c in 1..s.c {
                        let v = input.data()[(n * s.c + c) * s.spatial() + hw];
                        if v > best {
                            best = v;
                            arg = c;
                        }
                    }
                    dx.data[(n * s.c + arg) * s.spatial() + hw] = g;
                }
            }
        }
    }
    dx
}

/// Sums over the spatial axes; output `(N, C, 1, 1)`. Backward of a
/// per-channel broadcast.
pub(crate) fn reduce_spatial<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.spatial();
            let mut acc = T::zero();
            for &v in &t.data()[base..base + s.spatial()] {
                acc += v;
            }
            out.data[n * s.c + c] = acc;
        }
    }
    out
}

/// Sums over the channel axis; output `(N, 1, H, W)`. Backward of a
/// per-site broadcast.
pub(crate) fn reduce_channels<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.spatial();
            for hw in 0..s.spatial() {
                out.data[n * s.spatial() + hw] += t.data()[base + hw];
            }
        }
    }
    out
}

pub(crate) fn add_assign<T: Scalar>(into: &mut Tensor<T>, from: &Tensor<T>) {
    debug_assert_eq!(into.shape(), from.shape());
    for (a, b) in into.data.iter_mut().zip(from.data()) {
        *a += *b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: &[f64]) -> Tensor<f64> {
        Tensor::new(Shape::new(shape.0, shape.1, shape.2, shape.3), data.to_vec()).unwrap()
    }

    /// 3x3 kernel that is the identity map on `c` channels.
    fn identity_kernel(c: usize) -> ConvKernel<f64> {
        let mut k = ConvKernel::zeros(c, c, 3).unwrap();
        let s = k.weight.shape();
        for i in 0..c {
            let idx = s.index(i, i, 1, 1);
            k.weight.data_mut()[idx] = 1.0;
        }
        k
    }

    #[test]
    fn conv2d_center_kernel_is_identity() {
        let x = t((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let y = x.conv2d(&identity_kernel(1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_all_ones_kernel_sums_padded_windows() {
        let x = t((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let k = ConvKernel::new(
            Tensor::filled(Shape::new(1, 1, 3, 3), 1.0),
            Tensor::zeros(Shape::new(1, 1, 1, 1)),
        )
        .unwrap();
        let y = x.conv2d(&k).unwrap();
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv2d_zero_kernel_outputs_bias() {
        let x = t((1, 2, 2, 2), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let mut k = ConvKernel::zeros(3, 2, 3).unwrap();
        k.bias.data_mut().copy_from_slice(&[-1.0, 0.5, 2.0]);
        let y = x.conv2d(&k).unwrap();
        for co in 0..3 {
            for hw in 0..4 {
                assert_eq!(y.data()[co * 4 + hw], k.bias.data()[co]);
            }
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = t((1, 2, 2, 2), &[0.0; 8]);
        let k = ConvKernel::zeros(1, 3, 3).unwrap();
        let err = x.conv2d(&k).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn global_pool_avg_and_max() {
        let x = t((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.global_pool(PoolMode::Avg).unwrap().data(), &[2.5]);
        assert_eq!(x.global_pool(PoolMode::Max).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::filled(Shape::new(2, 3, 2, 2), 0.75);
        assert!(c.global_pool(PoolMode::Avg).unwrap().data().iter().all(|&v| v == 0.75));
        assert!(c.global_pool(PoolMode::Max).unwrap().data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn channelwise_pool_avg_and_max() {
        let x = t((1, 2, 1, 1), &[1.0, 3.0]);
        assert_eq!(x.channelwise_pool(PoolMode::Avg).unwrap().data(), &[2.0]);
        assert_eq!(x.channelwise_pool(PoolMode::Max).unwrap().data(), &[3.0]);
        let single = t((1, 1, 2, 2), &[1.0, -2.0, 3.0, 0.0]);
        assert_eq!(single.channelwise_pool(PoolMode::Avg).unwrap(), single);
        assert_eq!(single.channelwise_pool(PoolMode::Max).unwrap(), single);
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = t((1, 2, 2, 2), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let b = t((1, 3, 2, 2), &(0..12).map(|v| v as f64).collect::<Vec<_>>());
        let cat = a.concat_channels(&b).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 5, 2, 2));
        assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cat.slice_channels(2, 5).unwrap(), b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 2));
        assert!(a.concat_channels(&b).is_err());
    }

    #[test]
    fn permute_examples() {
        let x = t((1, 3, 1, 1), &[10.0, 20.0, 30.0]);
        let id = x.permute_channels(&[0, 1, 2]).unwrap();
        assert_eq!(id, x);
        // perm [2,0,1] on channels (a,b,c) -> (c,a,b)
        let y = x.permute_channels(&[2, 0, 1]).unwrap();
        assert_eq!(y.data(), &[30.0, 10.0, 20.0]);
        assert_eq!(y.unpermute_channels(&[2, 0, 1]).unwrap(), x);
        assert!(x.permute_channels(&[0, 0, 1]).is_err());
    }

    #[test]
    fn unary_values() {
        let x = t((1, 1, 1, 3), &[0.0, -3.0, 3.0]);
        assert_eq!(x.map_unary(UnaryOp::Sigmoid).data()[0], 0.5);
        assert_eq!(x.map_unary(UnaryOp::Relu).data(), &[0.0, 0.0, 3.0]);
        assert_eq!(x.map_unary(UnaryOp::Exp).data()[0], 1.0);
    }

    #[test]
    fn elementwise_identities_and_broadcast() {
        let x = t((1, 2, 2, 2), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let ones = Tensor::filled(x.shape(), 1.0);
        assert_eq!(x.elementwise(&ones, BinaryOp::Mul).unwrap(), x);
        let zeros = Tensor::zeros(x.shape());
        assert_eq!(x.elementwise(&zeros, BinaryOp::Add).unwrap(), x);

        // channel map halves only channel 0
        let gate = t((1, 2, 1, 1), &[0.5, 1.0]);
        let y = x.elementwise(&gate, BinaryOp::Mul).unwrap();
        assert_eq!(y.data(), &[0.5, 1.0, 1.5, 2.0, 5.0, 6.0, 7.0, 8.0]);

        // site map adds per-site values across both channels
        let site = t((1, 1, 2, 2), &[1.0, 0.0, 0.0, -1.0]);
        let z = x.elementwise(&site, BinaryOp::Add).unwrap();
        assert_eq!(z.data(), &[2.0, 2.0, 3.0, 3.0, 6.0, 6.0, 7.0, 7.0]);

        let bad = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 1));
        assert!(x.elementwise(&bad, BinaryOp::Add).is_err());
    }

    #[test]
    fn reductions() {
        let x = t((2, 1, 1, 2), &[1.0, 2.0, 3.0, 4.0]);
        let per = x.sum_per_sample();
        assert_eq!(per.shape(), Shape::new(2, 1, 1, 1));
        assert_eq!(per.data(), &[3.0, 7.0]);
        assert_eq!(per.mean_batch().unwrap().data(), &[5.0]);
        assert!(x.mean_batch().is_err());
    }

    #[test]
    fn stack_and_sample_round_trip() {
        let a = t((1, 2, 1, 1), &[1.0, 2.0]);
        let b = t((2, 2, 1, 1), &[3.0, 4.0, 5.0, 6.0]);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), Shape::new(3, 2, 1, 1));
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(s.sample(0).unwrap(), a);
        assert_eq!(s.sample(2).unwrap().data(), &[5.0, 6.0]);
        assert!(s.sample(3).is_err());
        assert!(Tensor::<f64>::stack(&[]).is_err());
        let odd = t((1, 1, 1, 1), &[0.0]);
        assert!(Tensor::stack(&[a, odd]).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn tensor_strategy() -> impl Strategy<Value = Tensor<f64>> {
            (1usize..3, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(n, c, h, w)| {
                proptest::collection::vec(-10.0..10.0f64, n * c * h * w)
                    .prop_map(move |data| Tensor::new(Shape::new(n, c, h, w), data).unwrap())
            })
        }

        proptest! {
            #[test]
            fn center_kernel_identity(x in tensor_strategy()) {
                let y = x.conv2d(&identity_kernel(x.shape().c)).unwrap();
                prop_assert_eq!(y, x);
            }

            #[test]
            fn conv_is_linear(x in tensor_strategy(), alpha in -2.0..2.0f64, beta in -2.0..2.0f64) {
                let s = x.shape();
                let mut k = ConvKernel::zeros(2, s.c, 3).unwrap();
                for (i, v) in k.weight.data_mut().iter_mut().enumerate() {
                    *v = ((i * 37 + 11) % 17) as f64 / 17.0 - 0.5;
                }
                let y = x.scale_add(2.0, 0.0); // a second input correlated with x
                let combo = x.scale_add(alpha, 0.0)
                    .elementwise(&y.scale_add(beta, 0.0), BinaryOp::Add).unwrap();
                let lhs = combo.conv2d(&k).unwrap();
                let rhs = x.conv2d(&k).unwrap().scale_add(alpha, 0.0)
                    .elementwise(&y.conv2d(&k).unwrap().scale_add(beta, 0.0), BinaryOp::Add)
                    .unwrap();
                prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            }

            #[test]
            fn pool_ordering_and_constancy(x in tensor_strategy()) {
                let avg = x.global_pool(PoolMode::Avg).unwrap();
                let max = x.global_pool(PoolMode::Max).unwrap();
                for (a, m) in avg.data().iter().zip(max.data()) {
                    prop_assert!(m >= a);
                }
            }

            #[test]
            fn concat_split_identity(x in tensor_strategy(), y in tensor_strategy()) {
                let s = x.shape();
                // reshape y's data into x's spatial extents for a valid concat
                let y = Tensor::new(
                    Shape::new(s.n, 1, s.h, s.w),
                    y.data().iter().cycle().take(s.n * s.spatial()).copied().collect(),
                ).unwrap();
                let cat = x.concat_channels(&y).unwrap();
                prop_assert_eq!(cat.slice_channels(0, s.c).unwrap(), x);
                prop_assert_eq!(cat.slice_channels(s.c, s.c + 1).unwrap(), y);
            }
        }
    }
}
