//! Reverse sweep over a recorded [`Graph`].

use crate::autodiff::graph::{band_range, permute_data, Graph, Op, Var};
use crate::autodiff::tensor::{broadcast_strides, for_each_broadcast, Tensor};
use crate::error::{Error, Result};
use crate::lorentz;
use crate::real::Real;

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient buffer for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn slot<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Real> Graph<F> {
    /// Back-propagates from the scalar `loss`. Nodes are visited in exact
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b].iter().copied() {
                    if self.wants(v) {
                        let s = slot(grads, v, g.len());
                        s.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let s = slot(grads, *a, g.len());
                    s.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if self.wants(*b) {
                    let s = slot(grads, *b, g.len());
                    s.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let s = slot(grads, *a, g.len());
                    for k in 0..g.len() {
                        s[k] += g[k] * bv[k];
                    }
                }
                if self.wants(*b) {
                    let s = slot(grads, *b, g.len());
                    for k in 0..g.len() {
                        s[k] += g[k] * av[k];
                    }
                }
            }
            Op::AddB(x, y) => {
                if self.wants(*x) {
                    let s = slot(grads, *x, g.len());
                    s.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                if self.wants(*y) {
                    let bst = broadcast_strides("add_broadcast", self.shape(*x), self.shape(*y))?;
                    let s = slot(grads, *y, self.numel(*y));
                    for_each_broadcast(self.shape(*x), &bst, |i, j| s[j] += g[i]);
                }
            }
            Op::MulB(x, y) => {
                let bst = broadcast_strides("mul_broadcast", self.shape(*x), self.shape(*y))?;
                let xv = self.value(*x).data();
                let yv = self.value(*y).data();
                if self.wants(*x) {
                    let s = slot(grads, *x, g.len());
                    for_each_broadcast(self.shape(*x), &bst, |i, j| s[i] += g[i] * yv[j]);
                }
                if self.wants(*y) {
                    let s = slot(grads, *y, self.numel(*y));
                    for_each_broadcast(self.shape(*x), &bst, |i, j| s[j] += g[i] * xv[i]);
                }
            }
            Op::Scale(x, c) => {
                let s = slot(grads, *x, g.len());
                s.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *c);
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                let s = slot(grads, *x, g.len());
                s.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            Op::Unary(x, u) => {
                let xv = self.value(*x).data();
                let yv = out.data();
                let s = slot(grads, *x, g.len());
                for k in 0..g.len() {
                    s[k] += g[k] * u.derivative(xv[k], yv[k]);
                }
            }
            Op::SumAll(x) => {
                let n = self.numel(*x);
                let s = slot(grads, *x, n);
                s.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::MeanAll(x) => {
                let n = self.numel(*x);
                let gi = g[0] / F::c(n as f64);
                let s = slot(grads, *x, n);
                s.iter_mut().for_each(|a| *a += gi);
            }
            Op::SumLast(x) => {
                let n = self.numel(*x);
                let d = n / g.len();
                let s = slot(grads, *x, n);
                for (row, &gr) in s.chunks_exact_mut(d).zip(g) {
                    row.iter_mut().for_each(|a| *a += gr);
                }
            }
            Op::NormLast(x) => {
                let n = self.numel(*x);
                let d = n / g.len();
                let xv = self.value(*x).data();
                let yv = out.data();
                let s = slot(grads, *x, n);
                for r in 0..g.len() {
                    if yv[r] > F::zero() {
                        let c = g[r] / yv[r];
                        for k in 0..d {
                            s[r * d + k] += c * xv[r * d + k];
                        }
                    }
                }
            }
            Op::MatMul { a, b, batch, m, k, n, trans_b } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    // dA = dC Bᵀ (or dC B when B was used transposed)
                    let s = slot(grads, *a, batch * m * k);
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for bi in 0..batch {
                        unsafe {
                            F::gemm(
                                m, n, k, F::one(),
                                g.as_ptr().add(bi * m * n), n as isize, 1,
                                bv.as_ptr().add(bi * k * n), rsb, csb,
                                F::one(),
                                s.as_mut_ptr().add(bi * m * k), k as isize, 1,
                            );
                        }
                    }
                }
                if self.wants(*b) {
                    let s = slot(grads, *b, batch * k * n);
                    for bi in 0..batch {
                        unsafe {
                            if *trans_b {
                                // dB[n,k] = dCᵀ A
                                F::gemm(
                                    n, m, k, F::one(),
                                    g.as_ptr().add(bi * m * n), 1, n as isize,
                                    av.as_ptr().add(bi * m * k), k as isize, 1,
                                    F::one(),
                                    s.as_mut_ptr().add(bi * k * n), k as isize, 1,
                                );
                            } else {
                                // dB[k,n] = Aᵀ dC
                                F::gemm(
                                    k, m, n, F::one(),
                                    av.as_ptr().add(bi * m * k), 1, k as isize,
                                    g.as_ptr().add(bi * m * n), n as isize, 1,
                                    F::one(),
                                    s.as_mut_ptr().add(bi * k * n), n as isize, 1,
                                );
                            }
                        }
                    }
                }
            }
            Op::Permute(x, perm) => {
                let back = permute_data(g, self.shape(*x), perm, true);
                let s = slot(grads, *x, g.len());
                s.iter_mut().zip(back).for_each(|(a, b)| *a += b);
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let dim = shape[*axis];
                let len = out.shape()[*axis];
                let s = slot(grads, *x, self.numel(*x));
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    s[base..base + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a += b);
                }
            }
            Op::Concat { xs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in xs {
                    let d = self.shape(v)[*axis];
                    if self.wants(v) {
                        let s = slot(grads, v, self.numel(v));
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            s[o * d * inner..(o + 1) * d * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &b)| *a += b);
                        }
                    }
                    offset += d;
                }
            }
            Op::IndexSelect { x, axis, idx } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let dim = shape[*axis];
                let s = slot(grads, *x, self.numel(*x));
                for o in 0..outer {
                    for (p, &ix) in idx.iter().enumerate() {
                        let src = &g[(o * idx.len() + p) * inner..(o * idx.len() + p + 1) * inner];
                        let base = (o * dim + ix) * inner;
                        s[base..base + inner].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Softmax(x) => {
                let d = *out.shape().last().expect("rank");
                let yv = out.data();
                let s = slot(grads, *x, g.len());
                for r in 0..g.len() / d {
                    let row = r * d..(r + 1) * d;
                    let dot: F = g[row.clone()].iter().zip(&yv[row.clone()]).map(|(&a, &b)| a * b).sum();
                    for k in row {
                        s[k] += yv[k] * (g[k] - dot);
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let d = *out.shape().last().expect("rank");
                let yv = out.data();
                let df = F::c(d as f64);
                let s = slot(grads, *x, g.len());
                for (r, &is) in inv_std.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let mg = g[row.clone()].iter().copied().sum::<F>() / df;
                    let mgy = g[row.clone()].iter().zip(&yv[row.clone()]).map(|(&a, &b)| a * b).sum::<F>() / df;
                    for k in row {
                        s[k] += is * (g[k] - mg - yv[k] * mgy);
                    }
                }
            }
            Op::ClipNorm { x, r } => {
                let d = *out.shape().last().expect("rank");
                let xv = self.value(*x).data();
                let s = slot(grads, *x, g.len());
                for row in 0..g.len() / d {
                    let span = row * d..(row + 1) * d;
                    let nrm = lorentz::norm(&xv[span.clone()]);
                    if nrm <= *r {
                        for k in span {
                            s[k] += g[k];
                        }
                    } else {
                        let c = *r / nrm;
                        let ug: F = span.clone().map(|k| xv[k] * g[k]).sum::<F>() / nrm;
                        for k in span {
                            s[k] += c * (g[k] - xv[k] / nrm * ug);
                        }
                    }
                }
            }
            Op::ExpOrigin(x) => {
                let d = self.shape(*x).last().copied().expect("rank");
                let xv = self.value(*x).data();
                let s = slot(grads, *x, xv.len());
                for r in 0..xv.len() / d {
                    let v = &xv[r * d..(r + 1) * d];
                    let go = &g[r * (d + 1)..(r + 1) * (d + 1)];
                    let nrm = lorentz::norm(v);
                    let sc = lorentz::sinhc(nrm);
                    let vg: F = v.iter().zip(&go[1..]).map(|(&a, &b)| a * b).sum();
                    let coef = go[0] * sc + sinhc_slope(nrm) * vg;
                    for k in 0..d {
                        s[r * d + k] += coef * v[k] + sc * go[1 + k];
                    }
                }
            }
            Op::LogOrigin(x) => {
                let w = self.shape(*x).last().copied().expect("rank");
                let d = w - 1;
                let yv = self.value(*x).data();
                let s = slot(grads, *x, yv.len());
                for r in 0..yv.len() / w {
                    let y = &yv[r * w..(r + 1) * w];
                    let go = &g[r * d..(r + 1) * d];
                    let ys = &y[1..];
                    let nrm = lorentz::norm(ys);
                    let base = r * w;
                    if nrm < F::c(lorentz::TAYLOR_CUTOFF) {
                        for k in 0..d {
                            s[base + 1 + k] += go[k];
                        }
                        continue;
                    }
                    let theta = lorentz::origin_distance(y[0], nrm);
                    let inv_sum = (y[0] + nrm).recip();
                    let a: F = ys.iter().zip(go).map(|(&u, &gk)| u * gk).sum::<F>() / nrm;
                    s[base] += a * inv_sum;
                    let ratio = theta / nrm;
                    for k in 0..d {
                        let u = ys[k] / nrm;
                        s[base + 1 + k] += u * a * inv_sum + ratio * (go[k] - u * a);
                    }
                }
            }
            Op::Project(x) => {
                let d = self.shape(*x).last().copied().expect("rank");
                let xv = self.value(*x).data();
                let yv = out.data();
                let s = slot(grads, *x, xv.len());
                for r in 0..xv.len() / d {
                    let go = &g[r * (d + 1)..(r + 1) * (d + 1)];
                    let y0 = yv[r * (d + 1)];
                    for k in 0..d {
                        s[r * d + k] += go[1 + k] + go[0] * xv[r * d + k] / y0;
                    }
                }
            }
            Op::PairwiseSqDist { a, b, batch, n, m, d } => {
                let (batch, n, m, d) = (*batch, *n, *m, *d);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let two = F::c(2.0);
                if self.wants(*a) {
                    let s = slot(grads, *a, batch * n * d);
                    for bi in 0..batch {
                        for i in 0..n {
                            let grow = &g[(bi * n + i) * m..(bi * n + i + 1) * m];
                            let rs: F = grow.iter().copied().sum();
                            for k in 0..d {
                                let mut acc = rs * av[(bi * n + i) * d + k];
                                for (j, &gij) in grow.iter().enumerate() {
                                    acc -= gij * bv[(bi * m + j) * d + k];
                                }
                                s[(bi * n + i) * d + k] += two * acc;
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    let s = slot(grads, *b, batch * m * d);
                    for bi in 0..batch {
                        for j in 0..m {
                            let cs: F = (0..n).map(|i| g[(bi * n + i) * m + j]).sum();
                            for k in 0..d {
                                let mut acc = cs * bv[(bi * m + j) * d + k];
                                for i in 0..n {
                                    acc -= g[(bi * n + i) * m + j] * av[(bi * n + i) * d + k];
                                }
                                s[(bi * m + j) * d + k] += two * acc;
                            }
                        }
                    }
                }
            }
            Op::BandScores { q, k, w } => {
                let shape = self.shape(*q);
                let (batch, t_len, d) = (shape[0], shape[1], shape[2]);
                let width = 2 * w + 1;
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                if self.wants(*q) {
                    let s = slot(grads, *q, qv.len());
                    for b in 0..batch {
                        for t in 0..t_len {
                            let (lo, hi) = band_range(t, *w, t_len);
                            for src in lo..hi {
                                let gv = g[(b * t_len + t) * width + (src + w - t)];
                                for c in 0..d {
                                    s[(b * t_len + t) * d + c] += gv * kv[(b * t_len + src) * d + c];
                                }
                            }
                        }
                    }
                }
                if self.wants(*k) {
                    let s = slot(grads, *k, kv.len());
                    for b in 0..batch {
                        for t in 0..t_len {
                            let (lo, hi) = band_range(t, *w, t_len);
                            for src in lo..hi {
                                let gv = g[(b * t_len + t) * width + (src + w - t)];
                                for c in 0..d {
                                    s[(b * t_len + src) * d + c] += gv * qv[(b * t_len + t) * d + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::BandApply { p, v, w } => {
                let shape = self.shape(*v);
                let (batch, t_len, d) = (shape[0], shape[1], shape[2]);
                let width = 2 * w + 1;
                let pv = self.value(*p).data();
                let vv = self.value(*v).data();
                if self.wants(*p) {
                    let s = slot(grads, *p, pv.len());
                    for b in 0..batch {
                        for t in 0..t_len {
                            let (lo, hi) = band_range(t, *w, t_len);
                            let grow = &g[(b * t_len + t) * d..(b * t_len + t + 1) * d];
                            for src in lo..hi {
                                let vrow = &vv[(b * t_len + src) * d..(b * t_len + src + 1) * d];
                                s[(b * t_len + t) * width + (src + w - t)] +=
                                    grow.iter().zip(vrow).map(|(&a, &c)| a * c).sum();
                            }
                        }
                    }
                }
                if self.wants(*v) {
                    let s = slot(grads, *v, vv.len());
                    for b in 0..batch {
                        for t in 0..t_len {
                            let (lo, hi) = band_range(t, *w, t_len);
                            let grow = &g[(b * t_len + t) * d..(b * t_len + t + 1) * d];
                            for src in lo..hi {
                                let a = pv[(b * t_len + t) * width + (src + w - t)];
                                let srow = &mut s[(b * t_len + src) * d..(b * t_len + src + 1) * d];
                                srow.iter_mut().zip(grow).for_each(|(o, &x)| *o += a * x);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// (n cosh n − sinh n)/n³, the radial slope of sinh(n)/n divided by n.
fn sinhc_slope<F: Real>(n: F) -> F {
    if n < F::c(0.1) {
        let n2 = n * n;
        F::one() / F::c(3.0)
            + n2 * (F::one() / F::c(30.0) + n2 * (F::one() / F::c(840.0) + n2 / F::c(45360.0)))
    } else {
        (n * n.cosh() - n.sinh()) / (n * n * n)
    }
}
