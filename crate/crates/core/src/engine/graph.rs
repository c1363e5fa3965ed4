//! Tape-based reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value, an optional gradient buffer and the operation that produced it.
//! Nodes are appended in evaluation order, so walking the tape backwards from
//! a scalar root visits every node after all of its consumers.
//!
//! Gradients accumulate: calling [`Graph::backward`] twice without building a
//! new graph adds the second pass on top of the first. Parameter gradients are
//! copied out with [`Graph::accumulate_param_grads`] and zeroed by the
//! optimizer step.

use super::param::{ParamId, ParamStore};
use super::tensor::{gemm_into, Layout, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`] (the differentiable array of the engine).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MatMulKind {
    /// `a` is `[batch.., p, q]`, `b` is a plain `q×r` matrix.
    SharedRight,
    /// `a` is a plain `p×q` matrix, `b` is `[batch.., q, r]`.
    SharedLeft,
    /// Both operands carry the same batch extents.
    Batched,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        kind: MatMulKind,
        batch: usize,
        p: usize,
        q: usize,
        r: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        p: usize,
        q: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Mean {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        widths: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Pad {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        before: usize,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    len_in: usize,
    len_out: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    pad_left: usize,
    stride: usize,
    groups: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Layer-norm epsilon used everywhere in the engine.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Recording tape for one forward/backward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Broadcast compatibility: the smaller operand's shape, with leading unit
/// extents removed, must be a suffix of the larger one's.
fn suffix_broadcast(big: &[usize], small: &[usize]) -> bool {
    let first = small.iter().position(|&d| d != 1).unwrap_or(small.len());
    let small = &small[first..];
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulates performed by matmul and conv1d forwards so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass; `None` if the node was unreachable.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; gradients are not tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf whose gradient is tracked (used by tests and gradient checks).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a registered parameter into the graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// Matrix product over the trailing two axes with batch broadcasting.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (kind, batch_shape) = if bb.is_empty() {
            (MatMulKind::SharedRight, ba.to_vec())
        } else if ba.is_empty() {
            (MatMulKind::SharedLeft, bb.to_vec())
        } else if ba == bb {
            (MatMulKind::Batched, ba.to_vec())
        } else {
            return Err(Error::dim("matmul", &sa, &sb));
        };
        let batch: usize = batch_shape.iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * p * r];
        match kind {
            MatMulKind::SharedRight => {
                gemm_into(batch * p, q, r, av, Layout::Normal, bv, Layout::Normal, &mut out, false)
            }
            MatMulKind::SharedLeft => {
                for i in 0..batch {
                    gemm_into(
                        p,
                        q,
                        r,
                        av,
                        Layout::Normal,
                        &bv[i * q * r..(i + 1) * q * r],
                        Layout::Normal,
                        &mut out[i * p * r..(i + 1) * p * r],
                        false,
                    );
                }
            }
            MatMulKind::Batched => {
                for i in 0..batch {
                    gemm_into(
                        p,
                        q,
                        r,
                        &av[i * p * q..(i + 1) * p * q],
                        Layout::Normal,
                        &bv[i * q * r..(i + 1) * q * r],
                        Layout::Normal,
                        &mut out[i * p * r..(i + 1) * p * r],
                        false,
                    );
                }
            }
        }
        self.macs += (batch * p * q * r) as u64;
        let mut shape = batch_shape;
        shape.extend([p, r]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                kind,
                batch,
                p,
                q,
                r,
            },
            rg,
        ))
    }

    /// Swaps the trailing two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("transpose", &s, &[]));
        }
        let (p, q) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..batch {
            let src = &xv[bi * p * q..(bi + 1) * p * q];
            let dst = &mut out[bi * p * q..(bi + 1) * p * q];
            for i in 0..p {
                for j in 0..q {
                    dst[j * p + i] = src[i * q + j];
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([q, p]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose { x, batch, p, q }, rg))
    }

    fn broadcast_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let a_big = sa.iter().product::<usize>() >= sb.iter().product::<usize>();
        let (big, small) = if a_big { (sa, sb) } else { (sb, sa) };
        if !suffix_broadcast(big, small) {
            return Err(Error::dim(op, sa, sb));
        }
        let shape = big.to_vec();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<T> = if a_big {
            let period = bv.len();
            av.iter().enumerate().map(|(i, &x)| f(x, bv[i % period])).collect()
        } else {
            let period = av.len();
            bv.iter().enumerate().map(|(i, &y)| f(av[i % period], y)).collect()
        };
        Ok((Tensor::new(shape, out)?, self.rg(a) || self.rg(b)))
    }

    /// Elementwise sum; the smaller operand broadcasts over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::of(factor);
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| e * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| gelu(e)).collect();
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Gelu { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| e.max(T::zero())).collect();
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Mean over `axis`, which is removed from the shape (a rank-1 input
    /// reduces to shape `[1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("mean", &s, &[axis]));
        }
        let (outer, n, inner) = split3(&s, axis);
        let xv = self.value(x).data();
        let inv = T::of(1.0 / n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &e) in dst.iter_mut().zip(row) {
                    *d = *d + e;
                }
            }
        }
        out.iter_mut().for_each(|e| *e = *e * inv);
        let mut shape = s.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mean { x, outer, n, inner }, rg))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::config("concat of zero arrays"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for row in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[row * w..(row + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                widths,
            },
            rg,
        ))
    }

    /// The sub-range `start..start+len` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim("narrow", &s, &[axis, start, len]));
        }
        let (outer, n, inner) = split3(&s, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Narrow {
                x,
                outer,
                n,
                inner,
                start,
                len,
            },
            rg,
        ))
    }

    /// Zero padding of `axis` with `before`/`after` entries.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("pad", &s, &[axis]));
        }
        if before == 0 && after == 0 {
            return Ok(x);
        }
        let (outer, n, inner) = split3(&s, axis);
        let m = n + before + after;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * m * inner];
        for o in 0..outer {
            let dst = (o * m + before) * inner;
            out[dst..dst + n * inner].copy_from_slice(&xv[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = s;
        shape[axis] = m;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Pad {
                x,
                outer,
                n,
                inner,
                before,
            },
            rg,
        ))
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|e| !e.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax",
                msg: "non-finite input".into(),
            });
        }
        let c = *v.shape().last().expect("rank >= 1");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().expect("rank >= 1");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("layer_norm", &s, self.shape(gamma)));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_c = T::of(1.0 / c as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / c;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<T>() * inv_c;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// 1-D cross-correlation over the time axis of `x` (`[batch, l, c_in]`
    /// or `[l, c_in]`) with kernel `w` of shape `[c_out, c_in/groups, k]`.
    /// Out-of-range positions read as zero.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        pad_left: usize,
        pad_right: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batch, len_in, c_in) = match sx.len() {
            2 => (1, sx[0], sx[1]),
            3 => (sx[0], sx[1], sx[2]),
            _ => return Err(Error::dim("conv1d", &sx, &sw)),
        };
        if sw.len() != 3 || stride == 0 || groups == 0 {
            return Err(Error::dim("conv1d", &sx, &sw));
        }
        let (c_out, cig, k) = (sw[0], sw[1], sw[2]);
        if c_in % groups != 0 || c_out % groups != 0 || cig != c_in / groups {
            return Err(Error::dim("conv1d", &sx, &sw));
        }
        let padded = len_in + pad_left + pad_right;
        if padded < k {
            return Err(Error::config(format!(
                "conv1d output length < 1 (length {len_in}, padding {pad_left}/{pad_right}, kernel {k})"
            )));
        }
        let len_out = (padded - k) / stride + 1;
        let geom = ConvGeom {
            batch,
            len_in,
            len_out,
            c_in,
            c_out,
            k,
            pad_left,
            stride,
            groups,
        };
        let out = conv1d_forward(self.value(x).data(), self.value(w).data(), &geom);
        self.macs += (batch * len_out * c_out * cig * k) as u64;
        let shape = if sx.len() == 2 {
            vec![len_out, c_out]
        } else {
            vec![batch, len_out, c_out]
        };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, w, geom }, rg))
    }

    /// Mean negative log-likelihood of `labels` under softmax of `logits` (`[B, K]`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("cross_entropy", &s, &[labels.len()]));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(i) = labels.iter().position(|&y| y >= k) {
            return Err(Error::data(format!(
                "label {} of sample {i} out of range for {k} classes",
                labels[i]
            )));
        }
        let lv = self.value(logits).data();
        if lv.iter().any(|e| !e.is_finite()) {
            return Err(Error::Numeric {
                op: "cross_entropy",
                msg: "non-finite logits".into(),
            });
        }
        let mut probs = lv.to_vec();
        let mut total = 0.0f64;
        for (i, row) in lv.chunks(k).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&e| (e - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[labels[i]]).as_f64();
            softmax_in_place(&mut probs[i * k..(i + 1) * k]);
        }
        let loss = T::of(total / b as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), node.value.len());
        match &mut node.grad {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, d)| *e = *e + d),
            None => node.grad = Some(g),
        }
    }

    /// Reverse pass from a scalar root. Gradients add onto any existing ones.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        // Leaf gradients accumulate across passes; interior ones are per pass.
        let mut stashed = Vec::new();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if let Some(g) = node.grad.take() {
                if matches!(node.op, Op::Leaf | Op::Param(_)) {
                    stashed.push((Var(i), g));
                }
            }
        }
        self.accumulate(root, vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let contributions = self.local_grads(i, &op, &grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        for (v, g) in stashed {
            self.accumulate(v, g);
        }
        Ok(())
    }

    /// Adds the gradients of parameter leaves into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                let p = store.get_mut(*id);
                p.grad.iter_mut().zip(g).for_each(|(e, &d)| *e = *e + d);
            }
        }
    }

    fn local_grads(&self, i: usize, op: &Op<T>, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        match op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul {
                a,
                b,
                kind,
                batch,
                p,
                q,
                r,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.rg(a) {
                    let mut da = vec![T::zero(); av.len()];
                    match kind {
                        MatMulKind::SharedRight => gemm_into(
                            batch * p,
                            r,
                            q,
                            dy,
                            Layout::Normal,
                            bv,
                            Layout::Transposed,
                            &mut da,
                            false,
                        ),
                        MatMulKind::SharedLeft => {
                            for n in 0..batch {
                                gemm_into(
                                    p,
                                    r,
                                    q,
                                    &dy[n * p * r..(n + 1) * p * r],
                                    Layout::Normal,
                                    &bv[n * q * r..(n + 1) * q * r],
                                    Layout::Transposed,
                                    &mut da,
                                    true,
                                );
                            }
                        }
                        MatMulKind::Batched => {
                            for n in 0..batch {
                                gemm_into(
                                    p,
                                    r,
                                    q,
                                    &dy[n * p * r..(n + 1) * p * r],
                                    Layout::Normal,
                                    &bv[n * q * r..(n + 1) * q * r],
                                    Layout::Transposed,
                                    &mut da[n * p * q..(n + 1) * p * q],
                                    false,
                                );
                            }
                        }
                    }
                    out.push((a, da));
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    match kind {
                        MatMulKind::SharedRight => gemm_into(
                            q,
                            batch * p,
                            r,
                            av,
                            Layout::Transposed,
                            dy,
                            Layout::Normal,
                            &mut db,
                            false,
                        ),
                        MatMulKind::SharedLeft => {
                            for n in 0..batch {
                                gemm_into(
                                    q,
                                    p,
                                    r,
                                    av,
                                    Layout::Transposed,
                                    &dy[n * p * r..(n + 1) * p * r],
                                    Layout::Normal,
                                    &mut db[n * q * r..(n + 1) * q * r],
                                    false,
                                );
                            }
                        }
                        MatMulKind::Batched => {
                            for n in 0..batch {
                                gemm_into(
                                    q,
                                    p,
                                    r,
                                    &av[n * p * q..(n + 1) * p * q],
                                    Layout::Transposed,
                                    &dy[n * p * r..(n + 1) * p * r],
                                    Layout::Normal,
                                    &mut db[n * q * r..(n + 1) * q * r],
                                    false,
                                );
                            }
                        }
                    }
                    out.push((b, db));
                }
            }
            &Op::Transpose { x, batch, p, q } => {
                // dy has shape [batch, q, p]
                let mut dx = vec![T::zero(); dy.len()];
                for bi in 0..batch {
                    let src = &dy[bi * p * q..(bi + 1) * p * q];
                    let dst = &mut dx[bi * p * q..(bi + 1) * p * q];
                    for j in 0..q {
                        for i in 0..p {
                            dst[i * q + j] = src[j * p + i];
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if self.rg(v) {
                        out.push((v, reduce_broadcast(dy, self.value(v).len())));
                    }
                }
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.rg(a) {
                    let full: Vec<T> = dy.iter().enumerate().map(|(j, &d)| d * bv[j % bv.len()]).collect();
                    out.push((a, reduce_broadcast(&full, av.len())));
                }
                if self.rg(b) {
                    let full: Vec<T> = dy.iter().enumerate().map(|(j, &d)| d * av[j % av.len()]).collect();
                    out.push((b, reduce_broadcast(&full, bv.len())));
                }
            }
            &Op::Scale { x, factor } => {
                out.push((x, dy.iter().map(|&d| d * factor).collect()));
            }
            &Op::Gelu { x } => {
                let xv = self.value(x).data();
                out.push((x, dy.iter().zip(xv).map(|(&d, &e)| d * gelu_grad(e)).collect()));
            }
            &Op::Relu { x } => {
                let xv = self.value(x).data();
                out.push((
                    x,
                    dy.iter()
                        .zip(xv)
                        .map(|(&d, &e)| if e > T::zero() { d } else { T::zero() })
                        .collect(),
                ));
            }
            &Op::Mean { x, outer, n, inner } => {
                let inv = T::of(1.0 / n as f64);
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for c in 0..inner {
                            dx[(o * n + j) * inner + c] = dy[o * inner + c] * inv;
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::Sum { x } => {
                out.push((x, vec![dy[0]; self.value(x).len()]));
            }
            &Op::Reshape { x } => out.push((x, dy.to_vec())),
            Op::Concat { xs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = dy.len() / total;
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(widths) {
                    if self.rg(x) {
                        let mut dx = Vec::with_capacity(rows * w);
                        for row in 0..rows {
                            let base = row * total + offset;
                            dx.extend_from_slice(&dy[base..base + w]);
                        }
                        out.push((x, dx));
                    }
                    offset += w;
                }
            }
            &Op::Narrow {
                x,
                outer,
                n,
                inner,
                start,
                len,
            } => {
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&dy[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((x, dx));
            }
            &Op::Pad {
                x,
                outer,
                n,
                inner,
                before,
            } => {
                let m = dy.len() / (outer * inner);
                let mut dx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let base = (o * m + before) * inner;
                    dx.extend_from_slice(&dy[base..base + n * inner]);
                }
                out.push((x, dx));
            }
            &Op::Softmax { x } => {
                let y = self.nodes[i].value.data();
                let c = *self.shape(x).last().expect("rank >= 1");
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, dr), xr) in y.chunks(c).zip(dy.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..c {
                        xr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                out.push((x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                let inv_c = T::of(1.0 / c as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); dy.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let dr = &dy[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut mean_g = T::zero();
                    let mut mean_gh = T::zero();
                    for j in 0..c {
                        let g = dr[j] * gv[j];
                        mean_g = mean_g + g;
                        mean_gh = mean_gh + g * hr[j];
                        dgamma[j] = dgamma[j] + dr[j] * hr[j];
                        dbeta[j] = dbeta[j] + dr[j];
                    }
                    mean_g = mean_g * inv_c;
                    mean_gh = mean_gh * inv_c;
                    for j in 0..c {
                        let g = dr[j] * gv[j];
                        dx[r * c + j] = rs * (g - mean_g - hr[j] * mean_gh);
                    }
                }
                if self.rg(*x) {
                    out.push((*x, dx));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.rg(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            &Op::Conv1d { x, w, geom } => {
                let (dx, dw) = conv1d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    dy,
                    &geom,
                    self.rg(x),
                    self.rg(w),
                );
                if let Some(dx) = dx {
                    out.push((x, dx));
                }
                if let Some(dw) = dw {
                    out.push((w, dw));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = dy[0] / T::of(b as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (n, &y) in labels.iter().enumerate() {
                    dl[n * k + y] = dl[n * k + y] - scale;
                }
                out.push((*logits, dl));
            }
        }
        out
    }
}

/// Sums `full` down to `len` entries by folding over its repetitions.
fn reduce_broadcast<T: Scalar>(full: &[T], len: usize) -> Vec<T> {
    if full.len() == len {
        return full.to_vec();
    }
    let mut out = vec![T::zero(); len];
    for chunk in full.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, &c)| *o = *o + c);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for e in row.iter_mut() {
        *e = (*e - max).exp();
        total = total + *e;
    }
    row.iter_mut().for_each(|e| *e = *e / total);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn conv1d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let cig = g.c_in / g.groups;
    let cog = g.c_out / g.groups;
    let mut out = vec![T::zero(); g.batch * g.len_out * g.c_out];
    for b in 0..g.batch {
        for t in 0..g.len_out {
            let dst = &mut out[(b * g.len_out + t) * g.c_out..(b * g.len_out + t + 1) * g.c_out];
            for j in 0..g.k {
                let pos = (t * g.stride + j) as isize - g.pad_left as isize;
                if pos < 0 || pos as usize >= g.len_in {
                    continue;
                }
                let xrow = &x[(b * g.len_in + pos as usize) * g.c_in..][..g.c_in];
                for (o, d) in dst.iter_mut().enumerate() {
                    let grp = o / cog;
                    let xs = &xrow[grp * cig..(grp + 1) * cig];
                    let wbase = o * cig * g.k + j;
                    let mut acc = T::zero();
                    for (ci, &xv) in xs.iter().enumerate() {
                        acc = acc + xv * w[wbase + ci * g.k];
                    }
                    *d = *d + acc;
                }
            }
        }
    }
    out
}

fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let cig = g.c_in / g.groups;
    let cog = g.c_out / g.groups;
    let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_w.then(|| vec![T::zero(); w.len()]);
    for b in 0..g.batch {
        for t in 0..g.len_out {
            let drow = &dy[(b * g.len_out + t) * g.c_out..][..g.c_out];
            for j in 0..g.k {
                let pos = (t * g.stride + j) as isize - g.pad_left as isize;
                if pos < 0 || pos as usize >= g.len_in {
                    continue;
                }
                let xoff = (b * g.len_in + pos as usize) * g.c_in;
                for (o, &d) in drow.iter().enumerate() {
                    let grp = o / cog;
                    let wbase = o * cig * g.k + j;
                    for ci in 0..cig {
                        let xi = xoff + grp * cig + ci;
                        if let Some(dx) = dx.as_mut() {
                            dx[xi] = dx[xi] + d * w[wbase + ci * g.k];
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[wbase + ci * g.k] = dw[wbase + ci * g.k] + d * x[xi];
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
