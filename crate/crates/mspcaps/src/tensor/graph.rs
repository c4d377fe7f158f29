//! Reverse-mode gradient graph over [`Tensor`] values.
//!
//! Operations are recorded in creation order and evaluated eagerly; `backward`
//! replays them in reverse exactly once. Gradients accumulate into leaf nodes
//! and persist across calls until `zero_grads`. Intermediate gradients live in
//! per-call scratch buffers. Reductions accumulate in a fixed sequential order
//! so repeated runs are bit-identical.

use super::kernels;
use super::{broadcast_shapes, broadcast_strides, reduce_to_shape, strides_of, Scalar, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Relu,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
    Max,
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    PowScalar {
        a: Var,
        e: T,
    },
    ScalarMul {
        a: Var,
        c: T,
    },
    ScalarAdd {
        a: Var,
    },
    MaxScalar {
        a: Var,
        c: T,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Reduce {
        kind: ReduceKind,
        a: Var,
        axis: Option<usize>,
        /// Flat input index of the (first) maximum per output element.
        max_arg: Vec<usize>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    IndexSelect {
        a: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    AvgPool2d {
        x: Var,
        k: usize,
        s: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Persistent accumulated gradient; populated for leaves only.
    grad: Option<Vec<T>>,
}

/// Per-channel statistics of a training-mode batch norm, for running-stat updates.
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var_biased: Vec<T>,
    pub var_unbiased: Vec<T>,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shaped like value"))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = &mut node.grad {
                g.fill(T::zero());
            }
        }
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary(&mut self, kind: BinaryKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shapes(name, ta.shape(), tb.shape())?;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(out_shape, data)?
        } else {
            let sa = broadcast_strides(ta.shape(), out_shape.len());
            let sb = broadcast_strides(tb.shape(), out_shape.len());
            let numel: usize = out_shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut idx = vec![0usize; out_shape.len()];
            let (da, db) = (ta.data(), tb.data());
            for _ in 0..numel {
                let mut oa = 0;
                let mut ob = 0;
                for d in 0..out_shape.len() {
                    oa += idx[d] * sa[d];
                    ob += idx[d] * sb[d];
                }
                data.push(f(da[oa], db[ob]));
                for d in (0..out_shape.len()).rev() {
                    idx[d] += 1;
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            Tensor::new(out_shape, data)?
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Binary { kind, a, b }, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, "div", a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        match kind {
            UnaryKind::Log => {
                if ta.data().iter().any(|v| *v < T::zero()) {
                    return Err(Error::Domain {
                        op: "log",
                        msg: "negative input".into(),
                    });
                }
            }
            UnaryKind::Sqrt => {
                if ta.data().iter().any(|v| *v < T::zero()) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        msg: "negative input".into(),
                    });
                }
            }
            _ => {}
        }
        let value = ta.map(|x| match kind {
            UnaryKind::Neg => -x,
            UnaryKind::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sqrt => x.sqrt(),
        });
        let req = self.requires(a);
        Ok(self.push(value, Op::Unary { kind, a }, req))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    /// Elementwise x^e for a fixed exponent.
    pub fn powf(&mut self, a: Var, e: T) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if e.fract() != T::zero() && ta.data().iter().any(|v| *v < T::zero()) {
            return Err(Error::Domain {
                op: "power",
                msg: "negative base with non-integer exponent".into(),
            });
        }
        let value = ta.map(|x| x.powf(e));
        let req = self.requires(a);
        Ok(self.push(value, Op::PowScalar { a, e }, req))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        let req = self.requires(a);
        self.push(value, Op::ScalarMul { a, c }, req)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        let req = self.requires(a);
        self.push(value, Op::ScalarAdd { a }, req)
    }

    /// Elementwise max with a constant floor.
    pub fn max_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| if x > c { x } else { c });
        let req = self.requires(a);
        self.push(value, Op::MaxScalar { a, c }, req)
    }

    // ── matmul ─────────────────────────────────────────────────────────

    /// Matrix product contracting the trailing two dims; leading dims broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape_msg("matmul", sa, sb, "rank must be >= 2"));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(Error::shape_msg("matmul", sa, sb, "inner dimensions differ"));
        }
        let lead = broadcast_shapes("matmul", &sa[..sa.len() - 2], &sb[..sb.len() - 2])?;
        let mut out_shape = lead.clone();
        out_shape.push(m);
        out_shape.push(n);

        let batch: usize = lead.iter().product();
        let a_lead = broadcast_strides(&sa[..sa.len() - 2], lead.len());
        let b_lead = broadcast_strides(&sb[..sb.len() - 2], lead.len());
        let a_offsets = batch_offsets(&lead, &a_lead, m * ka);
        let b_offsets = batch_offsets(&lead, &b_lead, kb * n);

        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (ta.data(), tb.data());
        let work = batch * m * ka * n;
        if work >= 1 << 16 && batch > 1 {
            let per = batch.div_ceil(kernels::PAR_CHUNKS.min(batch));
            out.par_chunks_mut(per * m * n).enumerate().for_each(|(ci, chunk)| {
                for (i, c_slice) in chunk.chunks_mut(m * n).enumerate() {
                    let bi = ci * per + i;
                    kernels::gemm(
                        m,
                        ka,
                        n,
                        &da[a_offsets[bi]..a_offsets[bi] + m * ka],
                        &db[b_offsets[bi]..b_offsets[bi] + kb * n],
                        T::zero(),
                        c_slice,
                    );
                }
            });
        } else {
            for bi in 0..batch {
                kernels::gemm(
                    m,
                    ka,
                    n,
                    &da[a_offsets[bi]..a_offsets[bi] + m * ka],
                    &db[b_offsets[bi]..b_offsets[bi] + kb * n],
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b }, req))
    }

    // ── reductions ─────────────────────────────────────────────────────

    fn reduce(
        &mut self,
        kind: ReduceKind,
        name: &'static str,
        a: Var,
        axis: Option<usize>,
        keepdims: bool,
    ) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape().to_vec();
        let data = ta.data();
        let (out_shape, outer, len, inner) = match axis {
            None => (vec![1usize], 1usize, data.len(), 1usize),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::Axis {
                        op: name,
                        axis: ax,
                        rank: shape.len(),
                    });
                }
                let outer: usize = shape[..ax].iter().product();
                let inner: usize = shape[ax + 1..].iter().product();
                let mut out_shape = shape.clone();
                if keepdims {
                    out_shape[ax] = 1;
                } else {
                    out_shape.remove(ax);
                    if out_shape.is_empty() {
                        out_shape.push(1);
                    }
                }
                (out_shape, outer, shape[ax], inner)
            }
        };
        let mut out = Vec::with_capacity(outer * inner);
        let mut max_arg = Vec::new();
        if kind == ReduceKind::Max {
            max_arg.reserve(outer * inner);
        }
        let inv_len = T::one() / T::from_f64(len as f64);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut acc = T::zero();
                        for j in 0..len {
                            acc += data[base + j * inner];
                        }
                        out.push(if kind == ReduceKind::Mean { acc * inv_len } else { acc });
                    }
                    ReduceKind::Max => {
                        let mut best = data[base];
                        let mut arg = base;
                        for j in 1..len {
                            let v = data[base + j * inner];
                            if v > best {
                                best = v;
                                arg = base + j * inner;
                            }
                        }
                        out.push(best);
                        max_arg.push(arg);
                    }
                }
            }
        }
        let req = self.requires(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Reduce {
                kind,
                a,
                axis,
                max_arg,
            },
            req,
        ))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>, keepdims: bool) -> Result<Var> {
        self.reduce(ReduceKind::Sum, "sum", a, axis, keepdims)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>, keepdims: bool) -> Result<Var> {
        self.reduce(ReduceKind::Mean, "mean", a, axis, keepdims)
    }

    /// Max-reduce; ties route the gradient to the lowest flat index.
    pub fn max_reduce(&mut self, a: Var, axis: Option<usize>, keepdims: bool) -> Result<Var> {
        self.reduce(ReduceKind::Max, "max", a, axis, keepdims)
    }

    // ── softmax ────────────────────────────────────────────────────────

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        if !ta.all_finite() {
            return Err(Error::Numeric("softmax input must be finite".into()));
        }
        let data = ta.data();
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = data[base];
                for j in 1..len {
                    let v = data[base + j * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = T::zero();
                for j in 0..len {
                    let e = (data[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    denom += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= denom;
                }
            }
        }
        let req = self.requires(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a, axis }, req))
    }

    // ── shape ops ──────────────────────────────────────────────────────

    /// Copying reshape (no views by design).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        if n != ta.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape_msg("reshape", ta.shape(), shape, "element count differs"));
        }
        let value = Tensor::new(shape.to_vec(), ta.data().to_vec())?;
        let req = self.requires(a);
        Ok(self.push(value, Op::Reshape { a }, req))
    }

    /// Axis permutation, materialized as a copy.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let rank = ta.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!(
                "permute: {perm:?} is not a permutation of 0..{rank}"
            )));
        }
        let value = permute_copy(ta, perm);
        let req = self.requires(a);
        Ok(self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            req,
        ))
    }

    /// Gathers `indices` along `axis`; backward scatter-adds.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "index_select",
                axis,
                rank: shape.len(),
            });
        }
        if indices.is_empty() {
            return Err(Error::Contract("index_select: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::Contract(format!(
                "index_select: index {bad} out of range for axis extent {}",
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = indices.len();
        let data = ta.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &ix in indices {
                let base = (o * len + ix) * inner;
                out.extend_from_slice(&data[base..base + inner]);
            }
        }
        let req = self.requires(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::IndexSelect {
                a,
                axis,
                indices: indices.to_vec(),
            },
            req,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat: no inputs".into()));
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut axis_total = 0usize;
        for &v in inputs {
            let s = self.nodes[v.0].value.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::shape_msg("concat", &first, s, "non-axis extents must match"));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        for o in 0..outer {
            for &v in inputs {
                let t = &self.nodes[v.0].value;
                let len = t.shape()[axis];
                let base = o * len * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
        }
        let req = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            req,
        ))
    }

    // ── structured layers ──────────────────────────────────────────────

    /// 2-D cross-correlation of x(B,C,H,W) with w(OC,C,K,K), square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::shape_msg("conv2d", sx, sw, "expect x(B,C,H,W), w(OC,C,K,K)"));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape_msg("conv2d", sx, sw, "channel mismatch"));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d: stride must be >= 1".into()));
        }
        let (batch, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (oc, k) = (sw[0], sw[2]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::shape_msg("conv2d", sx, sw, "kernel larger than padded input"));
        }
        if let Some(b) = bias {
            let sb = self.nodes[b.0].value.shape();
            if sb != [oc] {
                return Err(Error::shape_msg("conv2d", sb, sw, "bias must be (OC)"));
            }
        }
        let oh = kernels::conv_out_dim(h, k, stride, padding);
        let ow = kernels::conv_out_dim(wd, k, stride, padding);
        let bias_data = bias.map(|b| self.nodes[b.0].value.data());
        let y = kernels::conv2d_forward(
            tx.data(),
            batch,
            c_in,
            h,
            wd,
            tw.data(),
            oc,
            k,
            stride,
            padding,
            bias_data,
        );
        let req = self.requires(x) || self.requires(w) || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(vec![batch, oc, oh, ow], y)?,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
            },
            req,
        ))
    }

    /// Average pooling with window k, stride s. When k == s the extents must divide.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let sx = tx.shape();
        if sx.len() != 4 {
            return Err(Error::shape_msg("avgpool2d", sx, &[], "expect (B,C,H,W)"));
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if k == 0 || s == 0 || h < k || w < k {
            return Err(Error::Contract(format!("avgpool2d: bad window k={k} s={s} for {h}x{w}")));
        }
        if k == s && (h % k != 0 || w % k != 0) {
            return Err(Error::shape_msg(
                "avgpool2d",
                sx,
                &[k, s],
                format!("H={h}, W={w} not divisible by patch size p={k}"),
            ));
        }
        let y = kernels::avgpool2d_forward(tx.data(), batch, c, h, w, k, s);
        let oh = (h - k) / s + 1;
        let ow = (w - k) / s + 1;
        let req = self.requires(x);
        Ok(self.push(Tensor::new(vec![batch, c, oh, ow], y)?, Op::AvgPool2d { x, k, s }, req))
    }

    /// Training-mode batch norm over (B,H,W) per channel. Returns the
    /// normalized output plus the batch statistics for running-average updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BnBatchStats<T>)> {
        let tx = &self.nodes[x.0].value;
        let sx = tx.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::shape_msg("batchnorm2d", &sx, &[], "expect (B,C,H,W)"));
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if batch < 2 {
            return Err(Error::Contract("batchnorm2d: train mode needs batch size >= 2".into()));
        }
        let sg = self.nodes[gamma.0].value.shape();
        if sg != [c] || self.nodes[beta.0].value.shape() != [c] {
            return Err(Error::shape_msg("batchnorm2d", &sx, sg, "gamma/beta must be (C)"));
        }
        let n = batch * h * w;
        let inv_n = T::one() / T::from_f64(n as f64);
        let plane = h * w;
        let data = tx.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut acc = T::zero();
            for b in 0..batch {
                let base = (b * c + ci) * plane;
                for v in &data[base..base + plane] {
                    acc += *v;
                }
            }
            let m = acc * inv_n;
            mean[ci] = m;
            let mut acc2 = T::zero();
            for b in 0..batch {
                let base = (b * c + ci) * plane;
                for v in &data[base..base + plane] {
                    let d = *v - m;
                    acc2 += d * d;
                }
            }
            var[ci] = acc2 * inv_n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data();
        let be = self.nodes[beta.0].value.data();
        let mut out = vec![T::zero(); data.len()];
        for b in 0..batch {
            for ci in 0..c {
                let base = (b * c + ci) * plane;
                let (m, is, gv, bv) = (mean[ci], inv_std[ci], g[ci], be[ci]);
                for i in 0..plane {
                    out[base + i] = (data[base + i] - m) * is * gv + bv;
                }
            }
        }
        let corr = T::from_f64(n as f64 / (n as f64 - 1.0));
        let stats = BnBatchStats {
            mean: mean.clone(),
            var_biased: var.clone(),
            var_unbiased: var.iter().map(|&v| v * corr).collect(),
        };
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let v = self.push(
            Tensor::new(sx, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            req,
        );
        Ok((v, stats))
    }

    /// Layer norm over the trailing dimension, then affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let sx = tx.shape().to_vec();
        let d = *sx.last().ok_or_else(|| Error::Contract("layer_norm on rank-0".into()))?;
        let sg = self.nodes[gamma.0].value.shape();
        if sg != [d] || self.nodes[beta.0].value.shape() != [d] {
            return Err(Error::shape_msg("layernorm", &sx, sg, "gamma/beta must match trailing dim"));
        }
        let rows = tx.numel() / d;
        let inv_d = T::one() / T::from_f64(d as f64);
        let data = tx.data();
        let g = self.nodes[gamma.0].value.data();
        let be = self.nodes[beta.0].value.data();
        let mut mean = vec![T::zero(); rows];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); data.len()];
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let mut acc = T::zero();
            for &v in row {
                acc += v;
            }
            let m = acc * inv_d;
            let mut acc2 = T::zero();
            for &v in row {
                let dv = v - m;
                acc2 += dv * dv;
            }
            let is = T::one() / (acc2 * inv_d + eps).sqrt();
            mean[r] = m;
            inv_std[r] = is;
            for i in 0..d {
                out[r * d + i] = (row[i] - m) * is * g[i] + be[i];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            req,
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Accumulates gradients of a scalar root into every reachable
    /// `requires_grad` leaf. Repeated calls keep accumulating until
    /// [`Graph::zero_grads`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<T>>> = Vec::with_capacity(root.0 + 1);
        scratch.resize_with(root.0 + 1, || None);
        scratch[root.0] = Some(vec![T::one()]);

        for id in (0..=root.0).rev() {
            let Some(g) = scratch[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                let slot = node
                    .grad
                    .get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
                for (acc, v) in slot.iter_mut().zip(&g) {
                    *acc += *v;
                }
                continue;
            }
            self.propagate(id, &g, &mut scratch);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], scratch: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out_shape = nodes[id].value.shape();
        let acc = |scratch: &mut [Option<Vec<T>>], target: Var, delta: &[T]| {
            if !nodes[target.0].requires_grad {
                return;
            }
            let slot = scratch[target.0].get_or_insert_with(|| vec![T::zero(); nodes[target.0].value.numel()]);
            debug_assert_eq!(slot.len(), delta.len());
            for (a, d) in slot.iter_mut().zip(delta) {
                *a += *d;
            }
        };
        match &nodes[id].op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let broad = ta.shape() != tb.shape();
                let rank = out_shape.len();
                let sa = broadcast_strides(ta.shape(), rank);
                let sb = broadcast_strides(tb.shape(), rank);
                let (da, db) = (ta.data(), tb.data());
                let mut ga = if nodes[a.0].requires_grad {
                    Some(vec![T::zero(); g.len()])
                } else {
                    None
                };
                let mut gb = if nodes[b.0].requires_grad {
                    Some(vec![T::zero(); g.len()])
                } else {
                    None
                };
                let mut idx = vec![0usize; rank];
                for (pos, &gv) in g.iter().enumerate() {
                    let (mut oa, mut ob) = (0usize, 0usize);
                    if broad {
                        for d in 0..rank {
                            oa += idx[d] * sa[d];
                            ob += idx[d] * sb[d];
                        }
                        for d in (0..rank).rev() {
                            idx[d] += 1;
                            if idx[d] < out_shape[d] {
                                break;
                            }
                            idx[d] = 0;
                        }
                    } else {
                        oa = pos;
                        ob = pos;
                    }
                    match kind {
                        BinaryKind::Add => {
                            if let Some(ga) = &mut ga {
                                ga[pos] = gv;
                            }
                            if let Some(gb) = &mut gb {
                                gb[pos] = gv;
                            }
                        }
                        BinaryKind::Sub => {
                            if let Some(ga) = &mut ga {
                                ga[pos] = gv;
                            }
                            if let Some(gb) = &mut gb {
                                gb[pos] = -gv;
                            }
                        }
                        BinaryKind::Mul => {
                            if let Some(ga) = &mut ga {
                                ga[pos] = gv * db[ob];
                            }
                            if let Some(gb) = &mut gb {
                                gb[pos] = gv * da[oa];
                            }
                        }
                        BinaryKind::Div => {
                            let bb = db[ob];
                            if let Some(ga) = &mut ga {
                                ga[pos] = gv / bb;
                            }
                            if let Some(gb) = &mut gb {
                                gb[pos] = -gv * da[oa] / (bb * bb);
                            }
                        }
                    }
                }
                if let Some(ga) = ga {
                    let reduced = reduce_to_shape(&ga, out_shape, ta.shape());
                    acc(scratch, *a, &reduced);
                }
                if let Some(gb) = gb {
                    let reduced = reduce_to_shape(&gb, out_shape, tb.shape());
                    acc(scratch, *b, &reduced);
                }
            }
            Op::Unary { kind, a } => {
                let xv = nodes[a.0].value.data();
                let yv = nodes[id].value.data();
                let delta: Vec<T> = match kind {
                    UnaryKind::Neg => g.iter().map(|&gv| -gv).collect(),
                    UnaryKind::Relu => g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                        .collect(),
                    UnaryKind::Exp => g.iter().zip(yv).map(|(&gv, &y)| gv * y).collect(),
                    UnaryKind::Log => g.iter().zip(xv).map(|(&gv, &x)| gv / x).collect(),
                    UnaryKind::Sqrt => {
                        let half = T::from_f64(0.5);
                        g.iter().zip(yv).map(|(&gv, &y)| gv * half / y).collect()
                    }
                };
                acc(scratch, *a, &delta);
            }
            Op::PowScalar { a, e } => {
                let xv = nodes[a.0].value.data();
                let em1 = *e - T::one();
                let delta: Vec<T> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &x)| gv * *e * x.powf(em1))
                    .collect();
                acc(scratch, *a, &delta);
            }
            Op::ScalarMul { a, c } => {
                let delta: Vec<T> = g.iter().map(|&gv| gv * *c).collect();
                acc(scratch, *a, &delta);
            }
            Op::ScalarAdd { a } => {
                acc(scratch, *a, g);
            }
            Op::MaxScalar { a, c } => {
                let xv = nodes[a.0].value.data();
                let delta: Vec<T> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &x)| if x > *c { gv } else { T::zero() })
                    .collect();
                acc(scratch, *a, &delta);
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (sa, sb) = (ta.shape(), tb.shape());
                let m = sa[sa.len() - 2];
                let kk = sa[sa.len() - 1];
                let n = sb[sb.len() - 1];
                let lead = &out_shape[..out_shape.len() - 2];
                let batch: usize = lead.iter().product();
                let a_lead = broadcast_strides(&sa[..sa.len() - 2], lead.len());
                let b_lead = broadcast_strides(&sb[..sb.len() - 2], lead.len());
                let a_offsets = batch_offsets(lead, &a_lead, m * kk);
                let b_offsets = batch_offsets(lead, &b_lead, kk * n);
                let (da, db) = (ta.data(), tb.data());
                let mut ga = if nodes[a.0].requires_grad {
                    Some(vec![T::zero(); da.len()])
                } else {
                    None
                };
                let mut gb = if nodes[b.0].requires_grad {
                    Some(vec![T::zero(); db.len()])
                } else {
                    None
                };
                for bi in 0..batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    if let Some(ga) = &mut ga {
                        // dA = dC @ B^T, accumulated
                        kernels::gemm_bt(
                            m,
                            n,
                            kk,
                            gc,
                            &db[b_offsets[bi]..b_offsets[bi] + kk * n],
                            T::one(),
                            &mut ga[a_offsets[bi]..a_offsets[bi] + m * kk],
                        );
                    }
                    if let Some(gb) = &mut gb {
                        // dB = A^T @ dC, accumulated
                        kernels::gemm_at(
                            kk,
                            m,
                            n,
                            &da[a_offsets[bi]..a_offsets[bi] + m * kk],
                            gc,
                            T::one(),
                            &mut gb[b_offsets[bi]..b_offsets[bi] + kk * n],
                        );
                    }
                }
                if let Some(ga) = ga {
                    acc(scratch, *a, &ga);
                }
                if let Some(gb) = gb {
                    acc(scratch, *b, &gb);
                }
            }
            Op::Reduce {
                kind,
                a,
                axis,
                max_arg,
            } => {
                let ta = &nodes[a.0].value;
                let in_shape = ta.shape();
                let mut delta = vec![T::zero(); ta.numel()];
                match kind {
                    ReduceKind::Max => {
                        for (j, &arg) in max_arg.iter().enumerate() {
                            delta[arg] += g[j];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let (outer, len, inner) = match axis {
                            None => (1usize, ta.numel(), 1usize),
                            Some(ax) => (
                                in_shape[..*ax].iter().product(),
                                in_shape[*ax],
                                in_shape[*ax + 1..].iter().product(),
                            ),
                        };
                        let factor = if *kind == ReduceKind::Mean {
                            T::one() / T::from_f64(len as f64)
                        } else {
                            T::one()
                        };
                        for o in 0..outer {
                            for i in 0..inner {
                                let gv = g[o * inner + i] * factor;
                                let base = o * len * inner + i;
                                for j in 0..len {
                                    delta[base + j * inner] = gv;
                                }
                            }
                        }
                    }
                }
                acc(scratch, *a, &delta);
            }
            Op::Softmax { a, axis } => {
                let y = nodes[id].value.data();
                let shape = nodes[id].value.shape();
                let len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut delta = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let p = base + j * inner;
                            dot += g[p] * y[p];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            delta[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                acc(scratch, *a, &delta);
            }
            Op::Reshape { a } => {
                acc(scratch, *a, g);
            }
            Op::Permute { a, perm } => {
                // gradient flows through the inverse permutation
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(out_shape.to_vec(), g.to_vec()).expect("grad shaped like output");
                let back = permute_copy(&gt, &inv);
                acc(scratch, *a, back.data());
            }
            Op::IndexSelect { a, axis, indices } => {
                let ta = &nodes[a.0].value;
                let in_shape = ta.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let len = in_shape[*axis];
                let mut delta = vec![T::zero(); ta.numel()];
                let mut src = 0usize;
                for o in 0..outer {
                    for &ix in indices {
                        let dst = (o * len + ix) * inner;
                        for i in 0..inner {
                            delta[dst + i] += g[src + i];
                        }
                        src += inner;
                    }
                }
                acc(scratch, *a, &delta);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut start = 0usize;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if nodes[v.0].requires_grad {
                        let mut delta = vec![T::zero(); nodes[v.0].value.numel()];
                        for o in 0..outer {
                            let src = (o * total + start) * inner;
                            let dst = o * len * inner;
                            delta[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                        }
                        acc(scratch, v, &delta);
                    }
                    start += len;
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
            } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let sx = tx.shape();
                let sw = tw.shape();
                let grads = kernels::conv2d_backward(
                    tx.data(),
                    sx[0],
                    sx[1],
                    sx[2],
                    sx[3],
                    tw.data(),
                    sw[0],
                    sw[2],
                    *stride,
                    *padding,
                    nodes[x.0].requires_grad,
                    nodes[w.0].requires_grad,
                    bias.map(|b| nodes[b.0].requires_grad).unwrap_or(false),
                    g,
                );
                acc(scratch, *x, &grads.dx);
                acc(scratch, *w, &grads.dw);
                if let (Some(b), Some(db)) = (bias, grads.db) {
                    acc(scratch, *b, &db);
                }
            }
            Op::AvgPool2d { x, k, s } => {
                let sx = nodes[x.0].value.shape();
                let dx = kernels::avgpool2d_backward(g, sx[0], sx[1], sx[2], sx[3], *k, *s);
                acc(scratch, *x, &dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let tx = &nodes[x.0].value;
                let sx = tx.shape();
                let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let plane = h * w;
                let n = batch * plane;
                let inv_n = T::one() / T::from_f64(n as f64);
                let data = tx.data();
                let gam = nodes[gamma.0].value.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ci in 0..c {
                    let (m, is) = (mean[ci], inv_std[ci]);
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for b in 0..batch {
                        let base = (b * c + ci) * plane;
                        for i in 0..plane {
                            let gv = g[base + i];
                            sg += gv;
                            sgx += gv * (data[base + i] - m) * is;
                        }
                    }
                    dbeta[ci] = sg;
                    dgamma[ci] = sgx;
                }
                if nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); data.len()];
                    for ci in 0..c {
                        let (m, is, gv) = (mean[ci], inv_std[ci], gam[ci]);
                        let k1 = dbeta[ci] * inv_n;
                        let k2 = dgamma[ci] * inv_n;
                        for b in 0..batch {
                            let base = (b * c + ci) * plane;
                            for i in 0..plane {
                                let xh = (data[base + i] - m) * is;
                                dx[base + i] = gv * is * (g[base + i] - k1 - xh * k2);
                            }
                        }
                    }
                    acc(scratch, *x, &dx);
                }
                acc(scratch, *gamma, &dgamma);
                acc(scratch, *beta, &dbeta);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let tx = &nodes[x.0].value;
                let d = *tx.shape().last().unwrap();
                let rows = tx.numel() / d;
                let inv_d = T::one() / T::from_f64(d as f64);
                let data = tx.data();
                let gam = nodes[gamma.0].value.data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = if nodes[x.0].requires_grad {
                    Some(vec![T::zero(); data.len()])
                } else {
                    None
                };
                for r in 0..rows {
                    let (m, is) = (mean[r], inv_std[r]);
                    let base = r * d;
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for i in 0..d {
                        let xh = (data[base + i] - m) * is;
                        let gy = g[base + i] * gam[i];
                        dgamma[i] += g[base + i] * xh;
                        dbeta[i] += g[base + i];
                        sg += gy;
                        sgx += gy * xh;
                    }
                    if let Some(dx) = &mut dx {
                        for i in 0..d {
                            let xh = (data[base + i] - m) * is;
                            let gy = g[base + i] * gam[i];
                            dx[base + i] = is * (gy - sg * inv_d - xh * sgx * inv_d);
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(scratch, *x, &dx);
                }
                acc(scratch, *gamma, &dgamma);
                acc(scratch, *beta, &dbeta);
            }
        }
    }
}

/// Flat base offsets of each broadcast batch slice.
fn batch_offsets(lead: &[usize], lead_strides: &[usize], slice_len: usize) -> Vec<usize> {
    let batch: usize = lead.iter().product();
    let mut offsets = Vec::with_capacity(batch);
    let mut idx = vec![0usize; lead.len()];
    for _ in 0..batch {
        let mut off = 0;
        for d in 0..lead.len() {
            off += idx[d] * lead_strides[d] * slice_len;
        }
        offsets.push(off);
        for d in (0..lead.len()).rev() {
            idx[d] += 1;
            if idx[d] < lead[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    offsets
}

fn permute_copy<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_of(in_shape);
    let out_strides_in: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::zero(); t.numel()];
    let data = t.data();
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut off = 0;
        for d in 0..rank {
            off += idx[d] * out_strides_in[d];
        }
        *slot = data[off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves element count")
}
