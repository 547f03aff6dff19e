use crate::error::{AutodiffError, Result};
use crate::float::{gemm, Float};
use crate::graph::{split_axis, Graph, Op, Var};
use crate::kernels;
use crate::tensor::{numel, Tensor};

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    /// `None` when `v` was not reached from the loss (or does not require grad).
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.get(v)
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("grad shape"))
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

struct Accum<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    nodes: &'a [crate::graph::Node<T>],
}

impl<T: Float> Accum<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer of `v`, allocated on first touch.
    fn buf(&mut self, v: Var) -> &mut [T] {
        let len = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn add_from(&mut self, v: Var, src: impl IntoIterator<Item = T>) {
        if !self.wants(v) {
            return;
        }
        for (d, s) in self.buf(v).iter_mut().zip(src) {
            *d += s;
        }
    }
}

impl<T: Float> Graph<T> {
    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(AutodiffError::Contract(format!("unknown variable {}", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            {
                let mut acc = Accum {
                    grads: &mut grads,
                    nodes: &self.nodes,
                };
                propagate(&mut acc, i, &op, &dy);
            }
            self.nodes[i].op = op;
            grads[i] = Some(dy);
        }
        let shapes = self.nodes.into_iter().map(|node| node.shape).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn propagate<T: Float>(acc: &mut Accum<'_, T>, i: usize, op: &Op<T>, dy: &[T]) {
    let nodes = acc.nodes;
    let y = &nodes[i].value;
    let val = |v: Var| -> &[T] { &nodes[v.0].value };
    let shp = |v: Var| -> &[usize] { &nodes[v.0].shape };
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (a, b) = (*a, *b);
            let k = shp(b)[0];
            let nn = shp(b)[1];
            let m = numel(shp(a)) / k.max(1);
            if acc.wants(a) {
                let bv = val(b);
                gemm(m, nn, k, dy, false, bv, true, T::one(), acc.buf(a));
            }
            if acc.wants(b) {
                let av = val(a);
                gemm(k, m, nn, av, true, dy, false, T::one(), acc.buf(b));
            }
        }
        Op::Bmm { a, b, ta, tb } => {
            let (a, b, ta, tb) = (*a, *b, *ta, *tb);
            let (sa, sb) = (shp(a), shp(b));
            let batch = sa[0];
            let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
            let nn = if tb { sb[1] } else { sb[2] };
            let (av, bv) = (val(a), val(b));
            if acc.wants(a) {
                let ga = acc.buf(a);
                for p in 0..batch {
                    let dyp = &dy[p * m * nn..(p + 1) * m * nn];
                    let bp = &bv[p * k * nn..(p + 1) * k * nn];
                    let gp = &mut ga[p * m * k..(p + 1) * m * k];
                    if ta {
                        // stored k×m: opB(B) · dYᵀ
                        gemm(k, nn, m, bp, tb, dyp, true, T::one(), gp);
                    } else {
                        gemm(m, nn, k, dyp, false, bp, !tb, T::one(), gp);
                    }
                }
            }
            if acc.wants(b) {
                let gb = acc.buf(b);
                for p in 0..batch {
                    let dyp = &dy[p * m * nn..(p + 1) * m * nn];
                    let ap = &av[p * m * k..(p + 1) * m * k];
                    let gp = &mut gb[p * k * nn..(p + 1) * k * nn];
                    if tb {
                        // stored n×k: dYᵀ · opA(A)
                        gemm(nn, m, k, dyp, true, ap, ta, T::one(), gp);
                    } else {
                        gemm(k, m, nn, ap, !ta, dyp, false, T::one(), gp);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            acc.add_from(*a, dy.iter().copied());
            acc.add_from(*b, dy.iter().copied());
        }
        Op::Sub(a, b) => {
            acc.add_from(*a, dy.iter().copied());
            acc.add_from(*b, dy.iter().map(|&g| -g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc.add_from(*a, dy.iter().zip(bv).map(|(&g, &x)| g * x));
            acc.add_from(*b, dy.iter().zip(av).map(|(&g, &x)| g * x));
        }
        Op::AddBroadcast { a, b } => {
            acc.add_from(*a, dy.iter().copied());
            if acc.wants(*b) {
                let inner = numel(shp(*b)).max(1);
                let gb = acc.buf(*b);
                for row in dy.chunks(inner) {
                    for (d, &s) in gb.iter_mut().zip(row) {
                        *d += s;
                    }
                }
            }
        }
        Op::Scale { a, s } => acc.add_from(*a, dy.iter().map(|&g| g * *s)),
        Op::Relu(a) => {
            let av = val(*a);
            acc.add_from(
                *a,
                dy.iter()
                    .zip(av)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }),
            );
        }
        Op::Gelu(a) => {
            let av = val(*a);
            acc.add_from(*a, dy.iter().zip(av).map(|(&g, &x)| g * kernels::gelu_grad(x)));
        }
        Op::Softmax(a) => {
            if acc.wants(*a) {
                let d = shp(*a).last().copied().unwrap_or(1).max(1);
                let ga = acc.buf(*a);
                for ((grow, yrow), dyrow) in ga.chunks_mut(d).zip(y.chunks(d)).zip(dy.chunks(d)) {
                    let dot = yrow.iter().zip(dyrow).map(|(&p, &g)| p * g).sum::<T>();
                    for ((gd, &p), &g) in grow.iter_mut().zip(yrow).zip(dyrow) {
                        *gd += p * (g - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let d = shp(*x).last().copied().unwrap_or(1).max(1);
            let (xv, gv) = (val(*x), val(*gain));
            let inv_d = T::one() / T::from_f64(d as f64);
            let xhat = |r: usize, j: usize| (xv[r * d + j] - mean[r]) * rstd[r];
            let rows = mean.len();
            if acc.wants(*gain) {
                let gg = acc.buf(*gain);
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += dy[r * d + j] * xhat(r, j);
                    }
                }
            }
            if acc.wants(*bias) {
                let gb = acc.buf(*bias);
                for row in dy.chunks(d) {
                    for (b, &g) in gb.iter_mut().zip(row) {
                        *b += g;
                    }
                }
            }
            if acc.wants(*x) {
                let gx = acc.buf(*x);
                for r in 0..rows {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dxh = dy[r * d + j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xhat(r, j);
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        let dxh = dy[r * d + j] * gv[j];
                        gx[r * d + j] += rstd[r] * (dxh - m1 - xhat(r, j) * m2);
                    }
                }
            }
        }
        Op::Reshape(a) => acc.add_from(*a, dy.iter().copied()),
        Op::Permute { a, perm } => {
            if acc.wants(*a) {
                let inv = kernels::inverse_permutation(perm);
                let (back, _) = kernels::permute(dy, &nodes[i].shape, &inv);
                acc.add_from(*a, back);
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(&nodes[i].shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let len = shp(v)[*axis];
                if acc.wants(v) {
                    let gv = acc.buf(v);
                    for o in 0..outer {
                        let src = &dy[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (d, &s) in gv[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { a, axis, start } => {
            if acc.wants(*a) {
                let (outer, extent, inner) = split_axis(shp(*a), *axis);
                let len = nodes[i].shape[*axis];
                let ga = acc.buf(*a);
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    for (d, &s) in ga[base..base + len * inner]
                        .iter_mut()
                        .zip(&dy[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += s;
                    }
                }
            }
        }
        Op::GatherRows { a, idx } => {
            if acc.wants(*a) {
                let row = numel(&shp(*a)[1..]);
                let ga = acc.buf(*a);
                for (k, &r) in idx.iter().enumerate() {
                    for (d, &s) in ga[r * row..(r + 1) * row]
                        .iter_mut()
                        .zip(&dy[k * row..(k + 1) * row])
                    {
                        *d += s;
                    }
                }
            }
        }
        Op::Sum(a) => {
            let g = dy[0];
            let n = val(*a).len();
            acc.add_from(*a, std::iter::repeat(g).take(n));
        }
        Op::Mean(a) => {
            let n = val(*a).len();
            let g = dy[0] / T::from_f64(n.max(1) as f64);
            acc.add_from(*a, std::iter::repeat(g).take(n));
        }
        Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
            if acc.wants(*a) {
                let (outer, extent, inner) = split_axis(shp(*a), *axis);
                let scale = match op {
                    Op::MeanAxis { .. } => T::one() / T::from_f64(extent.max(1) as f64),
                    _ => T::one(),
                };
                let ga = acc.buf(*a);
                for o in 0..outer {
                    let src = &dy[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        for (d, &s) in ga[base..base + inner].iter_mut().zip(src) {
                            *d += s * scale;
                        }
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let geom = kernels::ConvGeom::new(shp(*x), shp(*w), *stride, *pad)
                .expect("geometry validated in forward");
            let (xv, wv) = (val(*x), val(*w));
            let mut dx = acc.wants(*x).then(|| vec![T::zero(); xv.len()]);
            let mut dw = acc.wants(*w).then(|| vec![T::zero(); wv.len()]);
            let mut db = b
                .filter(|b| acc.wants(*b))
                .map(|b| vec![T::zero(); val(b).len()]);
            kernels::conv2d_backward(
                &geom,
                xv,
                wv,
                dy,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(dx) = dx {
                acc.add_from(*x, dx);
            }
            if let Some(dw) = dw {
                acc.add_from(*w, dw);
            }
            if let (Some(b), Some(db)) = (b, db) {
                acc.add_from(*b, db);
            }
        }
        Op::L2Normalize { a, eps, norms } => {
            if acc.wants(*a) {
                let d = shp(*a).last().copied().unwrap_or(1).max(1);
                let ga = acc.buf(*a);
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &dy[r * d..(r + 1) * d];
                    let dst = &mut ga[r * d..(r + 1) * d];
                    if norm > *eps {
                        let dot = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum::<T>();
                        for ((dd, &p), &g) in dst.iter_mut().zip(yr).zip(gr) {
                            *dd += (g - p * dot) / norm;
                        }
                    } else {
                        for (dd, &g) in dst.iter_mut().zip(gr) {
                            *dd += g / *eps;
                        }
                    }
                }
            }
        }
        Op::MaskedLogSumExp { a, mask } => {
            if acc.wants(*a) {
                let c = shp(*a)[1].max(1);
                let av = val(*a);
                let ga = acc.buf(*a);
                for (r, (&lse, &g)) in y.iter().zip(dy).enumerate() {
                    if lse == T::neg_infinity() {
                        continue;
                    }
                    for j in 0..c {
                        if mask[r * c + j] {
                            ga[r * c + j] += g * (av[r * c + j] - lse).exp();
                        }
                    }
                }
            }
        }
        Op::BceWithLogits { logits, targets } => {
            let n = T::from_f64(targets.len().max(1) as f64);
            let g = dy[0] / n;
            let lv = val(*logits);
            acc.add_from(
                *logits,
                lv.iter()
                    .zip(targets)
                    .map(|(&x, &t)| g * (T::one() / (T::one() + (-x).exp()) - t)),
            );
        }
        Op::CrossEntropy { logits, targets } => {
            if acc.wants(*logits) {
                let c = shp(*logits)[1];
                let lv = val(*logits);
                let g = dy[0] / T::from_f64(targets.len().max(1) as f64);
                let ga = acc.buf(*logits);
                for (r, &t) in targets.iter().enumerate() {
                    let mut p = lv[r * c..(r + 1) * c].to_vec();
                    kernels::softmax_in_place(&mut p);
                    p[t] -= T::one();
                    for (d, &q) in ga[r * c..(r + 1) * c].iter_mut().zip(&p) {
                        *d += g * q;
                    }
                }
            }
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let scale = dy[0] * T::from_f64(2.0) / T::from_f64(av.len().max(1) as f64);
            acc.add_from(*a, av.iter().zip(bv).map(|(&x, &t)| scale * (x - t)));
            acc.add_from(*b, av.iter().zip(bv).map(|(&x, &t)| -scale * (x - t)));
        }
    }
}
