//! Tape-style compute graph. Every builder method evaluates its operation
//! eagerly and records it; `backward` walks the record in reverse.

use crate::error::{AutodiffError, Result};
use crate::float::{gemm, Float};
use crate::kernels;
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        a: Var,
        axis: usize,
    },
    MeanAxis {
        a: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    L2Normalize {
        a: Var,
        eps: T,
        norms: Vec<T>,
    },
    MaskedLogSumExp {
        a: Var,
        mask: Vec<bool>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    Mse(Var, Var),
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// A single forward construction. Consumed by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph<T: Float> {
    pub(crate) nodes: Vec<Node<T>>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients flow into it when the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf that never receives gradients.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(AutodiffError::Shape {
                shape,
                len: data.len(),
            });
        }
        self.nodes.push(Node {
            shape,
            value: data,
            op: Op::Leaf,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn is_finite(&self, v: Var) -> bool {
        self.nodes[v.0].value.iter().all(|x| x.is_finite())
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || last_dim(sa) != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(sa) / k.max(1);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, T::zero(), &mut out);
        Ok(self.push(shape, out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product of `[B, ·, ·]` tensors; `ta`/`tb` transpose the
    /// trailing two axes of the respective operand.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err("bmm", sa, sb));
        }
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(dim_err("bmm", sa, sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    ta,
                    &vb[i * k * n..(i + 1) * k * n],
                    tb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push(vec![batch, m, n], out, Op::Bmm { a, b, ta, tb }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a` (bias, positional table).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err("add_broadcast", sa, sb));
        }
        let inner = numel(sb).max(1);
        let vb = self.value(b);
        let out: Vec<T> = self
            .value(a)
            .chunks(inner)
            .flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(sa.to_vec(), out, Op::AddBroadcast { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, s }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let d = last_dim(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(d.max(1)) {
            kernels::softmax_in_place(row);
        }
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= T::zero() {
            return Err(AutodiffError::Config("layer_norm eps must be positive".into()));
        }
        let rows = numel(self.shape(x)) / d;
        let mut out = Vec::with_capacity(rows * d);
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let inv_d = T::one() / T::from_f64(d as f64);
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        for row in vx.chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(
                row.iter()
                    .zip(vg.iter().zip(vb))
                    .map(|(&v, (&g, &b))| (v - mean) * rstd * g + b),
            );
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            &[x, gain, bias],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != numel(self.shape(a)) {
            return Err(dim_err("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape, out, Op::Reshape(a), &[a]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err("permute", sa, perm));
        }
        let (out, shape) = kernels::permute(self.value(a), sa, perm);
        Ok(self.push(
            shape,
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(dim_err("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| AutodiffError::Contract("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(dim_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(dim_err("narrow", &sa, &[axis, start, len]));
        }
        let (outer, extent, inner) = split_axis(&sa, axis);
        let va = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&va[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Narrow { a, axis, start }, &[a]))
    }

    /// Selects rows along axis 0 (embedding lookup, token selection).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || idx.iter().any(|&i| i >= sa[0]) {
            return Err(dim_err("gather_rows", &sa, idx));
        }
        let row = numel(&sa[1..]);
        let va = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&va[i * row..(i + 1) * row]);
        }
        let mut shape = sa;
        shape[0] = idx.len();
        Ok(self.push(
            shape,
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        self.push(vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).len().max(1) as f64);
        let s = self.value(a).iter().copied().sum::<T>() / n;
        self.push(vec![], vec![s], Op::Mean(a), &[a])
    }

    fn reduce_axis(&mut self, a: Var, axis: usize) -> Result<(Vec<usize>, Vec<T>)> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(dim_err("reduce_axis", &sa, &[axis]));
        }
        let (outer, extent, inner) = split_axis(&sa, axis);
        let va = self.value(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &va[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        Ok((shape, out))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis(a, axis)?;
        Ok(self.push(shape, out, Op::SumAxis { a, axis }, &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, mut out) = self.reduce_axis(a, axis)?;
        let n = T::from_f64(self.shape(a)[axis].max(1) as f64);
        out.iter_mut().for_each(|v| *v /= n);
        Ok(self.push(shape, out, Op::MeanAxis { a, axis }, &[a]))
    }

    /// Cross-correlation of `x[N, C, H, W]` with `w[O, C, kh, kw]`, optional bias `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(dim_err("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(dim_err("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = kernels::ConvGeom::new(&sx, &sw, stride, pad)?;
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
        );
        let shape = vec![geom.n, geom.o, geom.ho, geom.wo];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    /// Divides each row (last axis) by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: T) -> Var {
        let d = last_dim(self.shape(a)).max(1);
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = if norm > eps { norm } else { eps };
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(norm);
        }
        self.push(
            self.shape(a).to_vec(),
            out,
            Op::L2Normalize { a, eps, norms },
            &[a],
        )
    }

    /// Row-wise cosine similarity of two `[R, D]` tensors -> `[R]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let na = self.l2_normalize(a, eps);
        let nb = self.l2_normalize(b, eps);
        let prod = self.mul(na, nb)?;
        let last = self.shape(prod).len() - 1;
        self.sum_axis(prod, last)
    }

    /// `log Σ_{j: mask[r][j]} exp(a[r][j])` for every row of a `[R, C]` tensor.
    /// Rows with an empty mask evaluate to `-inf` and pass no gradient.
    pub fn masked_logsumexp(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || mask.len() != numel(&sa) {
            return Err(dim_err("masked_logsumexp", &sa, &[mask.len()]));
        }
        let c = sa[1];
        let va = self.value(a);
        let out = va
            .chunks(c.max(1))
            .zip(mask.chunks(c.max(1)))
            .map(|(row, m)| kernels::masked_lse(row, m))
            .collect();
        Ok(self.push(vec![sa[0]], out, Op::MaskedLogSumExp { a, mask }, &[a]))
    }

    /// Mean binary cross-entropy of `logits` against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        if numel(self.shape(logits)) != targets.len() {
            return Err(dim_err("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let n = T::from_f64(targets.len().max(1) as f64);
        let loss = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .sum::<T>()
            / n;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&t| t >= s[1]) {
            return Err(dim_err("cross_entropy", &s, &[targets.len()]));
        }
        let all = vec![true; s[1]];
        let n = T::from_f64(targets.len().max(1) as f64);
        let loss = self
            .value(logits)
            .chunks(s[1])
            .zip(targets)
            .map(|(row, &t)| kernels::masked_lse(row, &all) - row[t])
            .sum::<T>()
            / n;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = T::from_f64(self.value(a).len().max(1) as f64);
        let loss = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        Ok(self.push(vec![], vec![loss], Op::Mse(a, b), &[a, b]))
    }
}
