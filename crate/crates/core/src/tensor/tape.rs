//! Reverse-mode autodiff on an arena tape.
//!
//! Every operation appends its output as a node and, when any input
//! requires a gradient, a record naming the backward rule. `backward`
//! replays the records in reverse, accumulating gradients additively.
//! All loops run in ascending index order, so gradients are bitwise
//! reproducible for a given record sequence. Every forward value and
//! every accumulated gradient is checked for non-finite entries; a NaN
//! or infinity is an error, never a silent value.

use super::kernels::{self, Conv2dSpec};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

struct Node<T: Scalar> {
    tensor: Tensor<T>,
    requires_grad: bool,
}

/// Backward rule for one recorded operation. Rules name their inputs by id;
/// forward values are read back from the tape, so nothing is stored twice.
enum Rule<T: Scalar> {
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Neg { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Sqrt { x: NodeId },
    Square { x: NodeId },
    Abs { x: NodeId },
    Sigmoid { x: NodeId },
    Relu { x: NodeId },
    Scale { x: NodeId, c: T },
    AddScalar { x: NodeId },
    ClampMin { x: NodeId, c: T },
    Matmul { a: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, bias: Option<NodeId>, spec: Conv2dSpec },
    UpsampleNearest2 { x: NodeId },
    AvgPool2d { x: NodeId, k: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Reshape { x: NodeId },
    Permute { x: NodeId, axes: Vec<usize> },
    Softmax { x: NodeId, axis: usize },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    GridSample { src: NodeId, grid_x: Vec<T>, grid_y: Vec<T> },
}

struct Record<T: Scalar> {
    out: NodeId,
    rule: Rule<T>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by node id.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to the node, if any was accumulated.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    records: Vec<Record<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    /// Trainable input: gradients will be accumulated for it.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, true)
    }

    /// Frozen input: participates in the forward pass, receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].tensor
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, t: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { tensor: t, requires_grad });
        id
    }

    fn emit(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        rule: Rule<T>,
    ) -> Result<NodeId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let t = Tensor::new(shape, data)?;
        let out = self.push(t, requires_grad);
        if requires_grad {
            self.records.push(Record { out, rule });
        }
        Ok(out)
    }

    fn pair(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(Vec<usize>, bool)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let shape = kernels::broadcast_shape(op, sa, sb)?;
        Ok((shape, self.requires_grad(a) || self.requires_grad(b)))
    }

    // ---- elementwise binary -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, rg) = self.pair("add", a, b)?;
        let data = kernels::binary_broadcast(
            self.value(a).data(),
            self.shape(a),
            self.value(b).data(),
            self.shape(b),
            &shape,
            |x, y| x + y,
        );
        self.emit("add", shape, data, rg, Rule::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, rg) = self.pair("sub", a, b)?;
        let data = kernels::binary_broadcast(
            self.value(a).data(),
            self.shape(a),
            self.value(b).data(),
            self.shape(b),
            &shape,
            |x, y| x - y,
        );
        self.emit("sub", shape, data, rg, Rule::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, rg) = self.pair("mul", a, b)?;
        let data = kernels::binary_broadcast(
            self.value(a).data(),
            self.shape(a),
            self.value(b).data(),
            self.shape(b),
            &shape,
            |x, y| x * y,
        );
        self.emit("mul", shape, data, rg, Rule::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, rg) = self.pair("div", a, b)?;
        let data = kernels::binary_broadcast(
            self.value(a).data(),
            self.shape(a),
            self.value(b).data(),
            self.shape(b),
            &shape,
            |x, y| x / y,
        );
        self.emit("div", shape, data, rg, Rule::Div { a, b })
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(
        &mut self,
        op: &'static str,
        x: NodeId,
        f: impl Fn(T) -> T,
        rule: Rule<T>,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let data: Vec<T> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let rg = self.requires_grad(x);
        self.emit(op, shape, data, rg, rule)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("neg", x, |v| -v, Rule::Neg { x })
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("exp", x, |v| v.exp(), Rule::Exp { x })
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("log", x, |v| v.ln(), Rule::Log { x })
    }

    /// Backward is guarded at x == 0: the true derivative diverges there, and
    /// the guarded rule contributes an exact zero instead. A loss that is
    /// identically sqrt(0) therefore produces exactly zero gradients.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("sqrt", x, |v| v.sqrt(), Rule::Sqrt { x })
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("square", x, |v| v * v, Rule::Square { x })
    }

    /// Subgradient 0 at x == 0.
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("abs", x, |v| v.abs(), Rule::Abs { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(
            "sigmoid",
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            Rule::Sigmoid { x },
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(
            "relu",
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            Rule::Relu { x },
        )
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.unary("scale", x, |v| v * c, Rule::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.unary("add_scalar", x, |v| v + c, Rule::AddScalar { x })
    }

    /// max(x, c) elementwise; subgradient 0 where x <= c.
    pub fn clamp_min(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.unary(
            "clamp_min",
            x,
            |v| if v > c { v } else { c },
            Rule::ClampMin { x, c },
        )
    }

    // ---- linear algebra -----------------------------------------------------

    /// 2-D matrix product: [m, k] x [k, n] -> [m, n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.emit("matmul", vec![m, n], data, rg, Rule::Matmul { a, b })
    }

    /// x: [n, c_in, h, w], w: [c_out, c_in, kh, kw], bias: [c_out].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let spec = Conv2dSpec::resolve(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [spec.c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![spec.c_out],
                });
            }
        }
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &spec,
        );
        let rg = self.requires_grad(x)
            || self.requires_grad(w)
            || bias.map(|b| self.requires_grad(b)).unwrap_or(false);
        self.emit(
            "conv2d",
            vec![spec.batch, spec.c_out, spec.h_out, spec.w_out],
            data,
            rg,
            Rule::Conv2d { x, w, bias, spec },
        )
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_nearest2",
                msg: format!("expected rank 4, got shape {s:?}"),
            });
        }
        let data =
            kernels::upsample_nearest2_forward(self.value(x).data(), s[0], s[1], s[2], s[3]);
        let rg = self.requires_grad(x);
        self.emit(
            "upsample_nearest2",
            vec![s[0], s[1], s[2] * 2, s[3] * 2],
            data,
            rg,
            Rule::UpsampleNearest2 { x },
        )
    }

    /// Non-overlapping k x k average pool; h and w must divide by k.
    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 {
            return Err(TensorError::InvalidArgument {
                op: "avg_pool2d",
                msg: format!("expected rank 4 and k >= 1, got shape {s:?}, k {k}"),
            });
        }
        if s[2] % k != 0 || s[3] % k != 0 {
            return Err(TensorError::InvalidArgument {
                op: "avg_pool2d",
                msg: format!("extents {}x{} not divisible by k {k}", s[2], s[3]),
            });
        }
        let data = kernels::avg_pool2d_forward(self.value(x).data(), s[0], s[1], s[2], s[3], k);
        let rg = self.requires_grad(x);
        self.emit(
            "avg_pool2d",
            vec![s[0], s[1], s[2] / k, s[3] / k],
            data,
            rg,
            Rule::AvgPool2d { x, k },
        )
    }

    // ---- shape manipulation -------------------------------------------------

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: "no parts".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pa = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * pa * inner..(o + 1) * pa * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.emit("concat", shape, data, rg, Rule::Concat { parts: parts.to_vec(), axis })
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("slice [{start}, {start}+{len}) on axis {axis} of shape {s:?}"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.clone();
        shape[axis] = len;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let rg = self.requires_grad(x);
        self.emit("slice", shape, data, rg, Rule::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(x).data().to_vec();
        let rg = self.requires_grad(x);
        self.emit("reshape", shape.to_vec(), data, rg, Rule::Reshape { x })
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("axes {axes:?} is not a permutation of 0..{}", s.len()),
            });
        }
        let shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let data = permute_data(self.value(x).data(), &s, axes);
        let rg = self.requires_grad(x);
        self.emit("permute", shape, data, rg, Rule::Permute { x, axes: axes.to_vec() })
    }

    // ---- nonlinearities over an axis, reductions ----------------------------

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        let data = kernels::softmax_forward(self.value(x).data(), &s, axis);
        let rg = self.requires_grad(x);
        self.emit("softmax", s, data, rg, Rule::Softmax { x, axis })
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let rg = self.requires_grad(x);
        self.emit("sum_all", vec![1], vec![acc], rg, Rule::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let mean = acc / T::from_f64(n as f64);
        let rg = self.requires_grad(x);
        self.emit("mean_all", vec![1], vec![mean], rg, Rule::MeanAll { x })
    }

    // ---- sampling -----------------------------------------------------------

    /// Bilinear sample of `src` ([c, h, w]) at absolute pixel coordinates.
    /// `grid_x`/`grid_y` give, per target pixel, the source column and row to
    /// read; both are [h, w] constants, sampled with border clamp. Returns the
    /// sampled [c, h, w] node and a per-pixel validity mask that is true when
    /// the sample point lies inside [0, w-1] x [0, h-1]. Differentiable with
    /// respect to `src` only.
    pub fn grid_sample(
        &mut self,
        src: NodeId,
        grid_x: &Tensor<T>,
        grid_y: &Tensor<T>,
    ) -> Result<(NodeId, Vec<bool>)> {
        let s = self.shape(src).to_vec();
        if s.len() != 3 {
            return Err(TensorError::InvalidArgument {
                op: "grid_sample",
                msg: format!("expected src rank 3, got shape {s:?}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if grid_x.shape() != [h, w] || grid_y.shape() != [h, w] {
            return Err(TensorError::ShapeMismatch {
                op: "grid_sample",
                lhs: grid_x.shape().to_vec(),
                rhs: vec![h, w],
            });
        }
        if grid_x.data().iter().chain(grid_y.data()).any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "grid_sample" });
        }
        let (data, valid) = kernels::grid_sample_forward(
            self.value(src).data(),
            c,
            h,
            w,
            grid_x.data(),
            grid_y.data(),
        );
        let rg = self.requires_grad(src);
        let out = self.emit(
            "grid_sample",
            vec![c, h, w],
            data,
            rg,
            Rule::GridSample {
                src,
                grid_x: grid_x.data().to_vec(),
                grid_y: grid_y.data().to_vec(),
            },
        )?;
        Ok((out, valid))
    }

    // ---- backward -----------------------------------------------------------

    /// Accumulates d(root)/d(node) for every node that requires a gradient.
    /// `root` must be a scalar (one element).
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let root_t = self.value(root);
        if root_t.numel() != 1 {
            return Err(TensorError::NonScalarRoot { shape: root_t.shape().to_vec() });
        }
        let mut bufs: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        bufs[root.0] = Some(vec![T::one()]);
        for rec in self.records.iter().rev() {
            if rec.out.0 > root.0 {
                continue;
            }
            let g = match bufs[rec.out.0].as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            self.apply_rule(&rec.rule, rec.out, &g, &mut bufs)?;
        }
        let mut grads = Vec::with_capacity(self.nodes.len());
        for (i, buf) in bufs.into_iter().enumerate() {
            match buf {
                Some(data) => {
                    if data.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                    grads.push(Some(Tensor::new(self.shape(NodeId(i)).to_vec(), data)?));
                }
                None => grads.push(None),
            }
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'a>(
        &self,
        bufs: &'a mut [Option<Vec<T>>],
        id: NodeId,
    ) -> Option<&'a mut Vec<T>> {
        if !self.requires_grad(id) {
            return None;
        }
        let n = self.value(id).numel();
        Some(bufs[id.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn apply_rule(
        &self,
        rule: &Rule<T>,
        out: NodeId,
        g: &[T],
        bufs: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let out_shape = self.shape(out).to_vec();
        match rule {
            Rule::Add { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                if let Some(ga) = self.grad_buf(bufs, *a) {
                    kernels::reduce_to_shape(g, &out_shape, &sa, |_| T::one(), ga);
                }
                if let Some(gb) = self.grad_buf(bufs, *b) {
                    kernels::reduce_to_shape(g, &out_shape, &sb, |_| T::one(), gb);
                }
            }
            Rule::Sub { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                if let Some(ga) = self.grad_buf(bufs, *a) {
                    kernels::reduce_to_shape(g, &out_shape, &sa, |_| T::one(), ga);
                }
                if let Some(gb) = self.grad_buf(bufs, *b) {
                    kernels::reduce_to_shape(g, &out_shape, &sb, |_| -T::one(), gb);
                }
            }
            Rule::Mul { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let os = out_shape.clone();
                if let Some(ga) = self.grad_buf(bufs, *a) {
                    let sb2 = sb.clone();
                    kernels::reduce_to_shape(
                        g,
                        &os,
                        &sa,
                        |i| bv[kernels::broadcast_src_index(i, &os, &sb2)],
                        ga,
                    );
                }
                if let Some(gb) = self.grad_buf(bufs, *b) {
                    let sa2 = sa.clone();
                    kernels::reduce_to_shape(
                        g,
                        &os,
                        &sb,
                        |i| av[kernels::broadcast_src_index(i, &os, &sa2)],
                        gb,
                    );
                }
            }
            Rule::Div { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let os = out_shape.clone();
                if let Some(ga) = self.grad_buf(bufs, *a) {
                    let sb2 = sb.clone();
                    kernels::reduce_to_shape(
                        g,
                        &os,
                        &sa,
                        |i| T::one() / bv[kernels::broadcast_src_index(i, &os, &sb2)],
                        ga,
                    );
                }
                if let Some(gb) = self.grad_buf(bufs, *b) {
                    let (sa2, sb2) = (sa.clone(), sb.clone());
                    kernels::reduce_to_shape(
                        g,
                        &os,
                        &sb,
                        |i| {
                            let x = av[kernels::broadcast_src_index(i, &os, &sa2)];
                            let y = bv[kernels::broadcast_src_index(i, &os, &sb2)];
                            -x / (y * y)
                        },
                        gb,
                    );
                }
            }
            Rule::Neg { x } => {
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for (gi, &go) in gx.iter_mut().zip(g) {
                        *gi = *gi - go;
                    }
                }
            }
            Rule::Exp { x } => {
                let y = self.value(out).data().to_vec();
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + g[i] * y[i];
                    }
                }
            }
            Rule::Log { x } => {
                let xv = self.value(*x).data().to_vec();
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + g[i] / xv[i];
                    }
                }
            }
            Rule::Sqrt { x } => {
                let xv = self.value(*x).data().to_vec();
                let y = self.value(out).data().to_vec();
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    let half = T::from_f64(0.5);
                    for i in 0..gx.len() {
                        if xv[i] != T::zero() {
                            gx[i] = gx[i] + g[i] * half / y[i];
                        }
                    }
                }
            }
            Rule::Square { x } => {
                let xv = self.value(*x).data().to_vec();
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    let two = T::from_f64(2.0);
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + g[i] * two * xv[i];
                    }
                }
            }
            Rule::Abs { x } => {
                let xv = self.value(*x).data().to_vec();
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for i in 0..gx.len() {
                        let s = if xv[i] > T::zero() {
                            T::one()
                        } else if xv[i] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        gx[i] = gx[i] + g[i] * s;
                    }
                }
            }
            Rule::Sigmoid { x } => {
                let y = self.value(out).data().to_vec();
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Rule::Relu { x } => {
                let xv = self.value(*x).data().to_vec();
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for i in 0..gx.len() {
                        if xv[i] > T::zero() {
                            gx[i] = gx[i] + g[i];
                        }
                    }
                }
            }
            Rule::Scale { x, c } => {
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + g[i] * *c;
                    }
                }
            }
            Rule::AddScalar { x } => {
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
            Rule::ClampMin { x, c } => {
                let xv = self.value(*x).data().to_vec();
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for i in 0..gx.len() {
                        if xv[i] > *c {
                            gx[i] = gx[i] + g[i];
                        }
                    }
                }
            }
            Rule::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                if let Some(ga) = self.grad_buf(bufs, *a) {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] = ga[i * k + p] + s;
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(bufs, *b) {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = T::zero();
                            for i in 0..m {
                                s = s + av[i * k + p] * g[i * n + j];
                            }
                            gb[p * n + j] = gb[p * n + j] + s;
                        }
                    }
                }
            }
            Rule::Conv2d { x, w, bias, spec } => {
                let xv = self.value(*x).data().to_vec();
                let wv = self.value(*w).data().to_vec();
                let want_x = self.requires_grad(*x);
                let want_w = self.requires_grad(*w);
                let want_b = bias.map(|b| self.requires_grad(b)).unwrap_or(false);
                let mut gx = if want_x { Some(vec![T::zero(); xv.len()]) } else { None };
                let mut gw = if want_w { Some(vec![T::zero(); wv.len()]) } else { None };
                let mut gb = if want_b { Some(vec![T::zero(); spec.c_out]) } else { None };
                kernels::conv2d_backward(
                    &xv,
                    &wv,
                    g,
                    spec,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let (Some(gx), Some(buf)) = (gx, self.grad_buf(bufs, *x)) {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + gx[i];
                    }
                }
                if let (Some(gw), Some(buf)) = (gw, self.grad_buf(bufs, *w)) {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + gw[i];
                    }
                }
                if let (Some(gb), Some(b)) = (gb, *bias) {
                    if let Some(buf) = self.grad_buf(bufs, b) {
                        for i in 0..buf.len() {
                            buf[i] = buf[i] + gb[i];
                        }
                    }
                }
            }
            Rule::UpsampleNearest2 { x } => {
                let s = self.shape(*x).to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for ni in 0..n {
                        for ci in 0..c {
                            for y in 0..h * 2 {
                                for xx in 0..w * 2 {
                                    let src = ((ni * c + ci) * h + y / 2) * w + xx / 2;
                                    let dst = ((ni * c + ci) * h * 2 + y) * w * 2 + xx;
                                    gx[src] = gx[src] + g[dst];
                                }
                            }
                        }
                    }
                }
            }
            Rule::AvgPool2d { x, k } => {
                let s = self.shape(*x).to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let norm = T::from_f64(1.0 / (k * k) as f64);
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for ni in 0..n {
                        for ci in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    let dst = ((ni * c + ci) * ho + y / k) * wo + xx / k;
                                    let src = ((ni * c + ci) * h + y) * w + xx;
                                    gx[src] = gx[src] + g[dst] * norm;
                                }
                            }
                        }
                    }
                }
            }
            Rule::Concat { parts, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_axis = out_shape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let pa = self.shape(p)[*axis];
                    if let Some(gp) = self.grad_buf(bufs, p) {
                        for o in 0..outer {
                            let src = (o * out_axis + offset) * inner;
                            let dst = o * pa * inner;
                            for i in 0..pa * inner {
                                gp[dst + i] = gp[dst + i] + g[src + i];
                            }
                        }
                    }
                    offset += pa;
                }
            }
            Rule::Slice { x, axis, start } => {
                let s = self.shape(*x).to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let len = out_shape[*axis];
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for o in 0..outer {
                        let dst = (o * s[*axis] + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            gx[dst + i] = gx[dst + i] + g[src + i];
                        }
                    }
                }
            }
            Rule::Reshape { x } => {
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
            Rule::Permute { x, axes } => {
                let s = self.shape(*x).to_vec();
                // inverse permutation maps output coordinates back to input
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let gx_data = permute_data(g, &out_shape, &inv);
                debug_assert_eq!(gx_data.len(), s.iter().product::<usize>());
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + gx_data[i];
                    }
                }
            }
            Rule::Softmax { x, axis } => {
                let y = self.value(out).data().to_vec();
                let os = out_shape.clone();
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    kernels::softmax_backward(&y, g, &os, *axis, gx);
                }
            }
            Rule::SumAll { x } => {
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for v in gx.iter_mut() {
                        *v = *v + g[0];
                    }
                }
            }
            Rule::MeanAll { x } => {
                let n = self.value(*x).numel();
                let w = g[0] / T::from_f64(n as f64);
                if let Some(gx) = self.grad_buf(bufs, *x) {
                    for v in gx.iter_mut() {
                        *v = *v + w;
                    }
                }
            }
            Rule::GridSample { src, grid_x, grid_y } => {
                let s = self.shape(*src).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                if let Some(gs) = self.grad_buf(bufs, *src) {
                    kernels::grid_sample_backward(g, c, h, w, grid_x, grid_y, gs);
                }
            }
        }
        Ok(())
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let numel: usize = shape.iter().product();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    for idx in 0..numel {
        let mut rem = idx;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0usize;
        for d in 0..rank {
            src += coords[d] * in_strides[axes[d]];
        }
        out.push(data[src]);
    }
    out
}
