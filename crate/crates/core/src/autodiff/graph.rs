//! The recording side of the tape: nodes, the op enum and every forward op.

use crate::autodiff::tensor::{broadcast_strides, for_each_broadcast, strides, Tensor};
use crate::error::{Error, Result};
use crate::instrument::{self, Site};
use crate::lorentz;
use crate::real::Real;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Unary<F> {
    Neg,
    Tanh,
    Cosh,
    Sinh,
    Sqrt,
    Exp,
    Log,
    Softplus,
    Gelu,
    Recip,
    Abs,
    Square,
    /// arccosh with the derivative evaluated at max(z, 1 + eps).
    Acosh(F),
}

impl<F: Real> Unary<F> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Tanh => "tanh",
            Unary::Cosh => "cosh",
            Unary::Sinh => "sinh",
            Unary::Sqrt => "sqrt",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Softplus => "softplus",
            Unary::Gelu => "gelu",
            Unary::Recip => "recip",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Acosh(_) => "arccosh",
        }
    }

    fn apply(&self, x: F) -> F {
        match *self {
            Unary::Neg => -x,
            Unary::Tanh => x.tanh(),
            Unary::Cosh => x.cosh(),
            Unary::Sinh => x.sinh(),
            Unary::Sqrt => x.sqrt(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Gelu => gelu(x),
            Unary::Recip => x.recip(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Acosh(_) => lorentz::arccosh_clamped(x),
        }
    }

    /// dy/dx given input `x` and output `y`.
    pub(crate) fn derivative(&self, x: F, y: F) -> F {
        match *self {
            Unary::Neg => -F::one(),
            Unary::Tanh => F::one() - y * y,
            Unary::Cosh => x.sinh(),
            Unary::Sinh => x.cosh(),
            Unary::Sqrt => F::c(0.5) / y,
            Unary::Exp => y,
            Unary::Log => x.recip(),
            Unary::Softplus => sigmoid(x),
            Unary::Gelu => gelu_derivative(x),
            Unary::Recip => -(y * y),
            Unary::Abs => {
                if x > F::zero() {
                    F::one()
                } else if x < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            }
            Unary::Square => F::c(2.0) * x,
            Unary::Acosh(eps) => {
                let z = x.max(F::one() + eps);
                (z * z - F::one()).sqrt().recip()
            }
        }
    }
}

pub(crate) fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub(crate) fn gelu<F: Real>(x: F) -> F {
    let k = F::c((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + F::c(GELU_C) * x * x * x);
    F::c(0.5) * x * (F::one() + u.tanh())
}

pub(crate) fn gelu_derivative<F: Real>(x: F) -> F {
    let k = F::c((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + F::c(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = k * (F::one() + F::c(3.0 * GELU_C) * x * x);
    F::c(0.5) * (F::one() + t) + F::c(0.5) * x * (F::one() - t * t) * du
}

#[derive(Debug, Clone)]
pub(crate) enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddB(Var, Var),
    MulB(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    Unary(Var, Unary<F>),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    NormLast(Var),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    IndexSelect { x: Var, axis: usize, idx: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<F> },
    ClipNorm { x: Var, r: F },
    ExpOrigin(Var),
    LogOrigin(Var),
    Project(Var),
    PairwiseSqDist { a: Var, b: Var, batch: usize, n: usize, m: usize, d: usize },
    BandScores { q: Var, k: Var, w: usize },
    BandApply { p: Var, v: Var, w: usize },
}

impl<F: Real> Op<F> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddB(..) => "add_broadcast",
            Op::MulB(..) => "mul_broadcast",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Unary(_, u) => u.name(),
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::NormLast(_) => "norm_last",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ClipNorm { .. } => "clip_norm",
            Op::ExpOrigin(_) => "exp_origin",
            Op::LogOrigin(_) => "log_origin",
            Op::Project(_) => "project_hyperboloid",
            Op::PairwiseSqDist { .. } => "pairwise_sqdist",
            Op::BandScores { .. } => "band_scores",
            Op::BandApply { .. } => "band_apply",
        }
    }
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) needs_grad: bool,
}

/// A single-use tape. Build it during the forward pass, call
/// [`Graph::backward`] once, then drop it.
pub struct Graph<F> {
    pub(crate) nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by `backward`.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First node holding a non-finite value, with the name of its op.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    // ---- elementwise -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push_op(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push_op(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push_op(t, Op::Mul(a, b), &[a, b]))
    }

    fn broadcast_binary(&mut self, op: &'static str, x: Var, y: Var, mul: bool) -> Result<Var> {
        let bst = broadcast_strides(op, self.shape(x), self.shape(y))?;
        let xv = self.value(x);
        let yv = self.value(y).data();
        let mut out = xv.clone();
        {
            let od = out.data_mut();
            if mul {
                for_each_broadcast(xv.shape(), &bst, |i, j| od[i] *= yv[j]);
            } else {
                for_each_broadcast(xv.shape(), &bst, |i, j| od[i] += yv[j]);
            }
        }
        let node = if mul { Op::MulB(x, y) } else { Op::AddB(x, y) };
        Ok(self.push_op(out, node, &[x, y]))
    }

    /// x + y where `y` has the same rank and each extent is 1 or equal.
    pub fn add_b(&mut self, x: Var, y: Var) -> Result<Var> {
        self.broadcast_binary("add_broadcast", x, y, false)
    }

    /// x ⊙ y where `y` has the same rank and each extent is 1 or equal.
    pub fn mul_b(&mut self, x: Var, y: Var) -> Result<Var> {
        self.broadcast_binary("mul_broadcast", x, y, true)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let t = self.map(x, |v| v * c);
        self.push_op(t, Op::Scale(x, c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: F) -> Var {
        let t = self.map(x, |v| v + c);
        self.push_op(t, Op::AddConst(x), &[x])
    }

    fn unary(&mut self, x: Var, u: Unary<F>) -> Var {
        let t = self.map(x, |v| u.apply(v));
        self.push_op(t, Op::Unary(x, u), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn cosh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cosh)
    }
    pub fn sinh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sinh)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }
    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Recip)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// arccosh(max(z, 1)); the derivative is taken at max(z, 1 + eps).
    pub fn arccosh(&mut self, x: Var, eps: F) -> Var {
        self.unary(x, Unary::Acosh(eps))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push_op(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: F = v.data().iter().copied().sum::<F>() / F::c(v.numel() as f64);
        self.push_op(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    fn last_dim_split(&self, x: Var) -> (Vec<usize>, usize) {
        let shape = self.shape(x);
        let d = *shape.last().unwrap_or(&1);
        let mut lead = shape[..shape.len().saturating_sub(1)].to_vec();
        if lead.is_empty() {
            lead.push(1);
        }
        (lead, d)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let (lead, d) = self.last_dim_split(x);
        let data = self
            .value(x)
            .data()
            .chunks_exact(d)
            .map(|r| r.iter().copied().sum())
            .collect();
        let t = Tensor::new(lead, data).expect("lead shape");
        self.push_op(t, Op::SumLast(x), &[x])
    }

    /// Euclidean norm over the last axis; the gradient at a zero row is 0.
    pub fn norm_last(&mut self, x: Var) -> Var {
        let (lead, d) = self.last_dim_split(x);
        let data = self.value(x).data().chunks_exact(d).map(lorentz::norm).collect();
        let t = Tensor::new(lead, data).expect("lead shape");
        self.push_op(t, Op::NormLast(x), &[x])
    }

    // ---- linear algebra ----------------------------------------------

    /// `a [M,K] @ b [K,N]`, or batched `a [B,M,K] @ b [B,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` with `b [N,K]` (or `[B,N,K]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, bk, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                (1, sa[0], sa[1], bk, n)
            }
            (3, 3) if sa[0] == sb[0] => {
                let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                (sa[0], sa[1], sa[2], bk, n)
            }
            _ => {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
        };
        if k != bk {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![F::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            for bi in 0..batch {
                unsafe {
                    F::gemm(
                        m,
                        k,
                        n,
                        F::one(),
                        ad.as_ptr().add(bi * m * k),
                        k as isize,
                        1,
                        bd.as_ptr().add(bi * k * n),
                        rsb,
                        csb,
                        F::zero(),
                        out.as_mut_ptr().add(bi * m * n),
                        n as isize,
                        1,
                    );
                }
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(t, Op::MatMul { a, b, batch, m, k, n, trans_b }, &[a, b]))
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("bad permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(x).data(), &shape, perm, false);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push_op(t, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push_op(t, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Argument("concat of nothing".into()))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base_shape:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {base_shape:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push_op(t, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Gathers `idx` along `axis` (indices may repeat).
    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || idx.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::shape("index_select", format!("axis {axis}, {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = (o * dim + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = idx.len();
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push_op(t, Op::IndexSelect { x, axis, idx: idx.to_vec() }, &[x]))
    }

    // ---- normalisation -----------------------------------------------

    /// Max-subtracted softmax over the last axis. The optional additive mask
    /// must have the same last extent and is applied cyclically over rows.
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor<F>>) -> Result<Var> {
        let (_, d) = self.last_dim_split(x);
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.shape().last() != Some(&d) || xv.numel() % m.numel() != 0 {
                return Err(Error::shape(
                    "softmax",
                    format!("mask {:?} vs input {:?}", m.shape(), xv.shape()),
                ));
            }
        }
        let mut out = xv.data().to_vec();
        if let Some(m) = mask {
            let md = m.data();
            for (i, v) in out.iter_mut().enumerate() {
                *v += md[i % md.len()];
            }
        }
        for row in out.chunks_exact_mut(d) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_op(t, Op::Softmax(x), &[x]))
    }

    /// (x − mean)/√(var + eps) over the last axis, without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: F) -> Var {
        let (_, d) = self.last_dim_split(x);
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d);
        let df = F::c(d as f64);
        for row in out.chunks_exact_mut(d) {
            let mu = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / df;
            let is = (var + eps).sqrt().recip();
            for v in row.iter_mut() {
                *v = (*v - mu) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push_op(t, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Row-wise norm clip to `r` (the differentiable form of
    /// [`lorentz::clip_tangent_norm`]).
    pub fn clip_norm(&mut self, x: Var, r: F) -> Var {
        let (_, d) = self.last_dim_split(x);
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_exact_mut(d) {
            lorentz::clip_norm_in_place(row, r);
        }
        self.push_op(t, Op::ClipNorm { x, r }, &[x])
    }

    // ---- Lorentz maps ------------------------------------------------

    /// exp_o applied to every row `[.., d] -> [.., d+1]`, tagged with `site`.
    pub fn exp_origin(&mut self, x: Var, site: Site) -> Var {
        let _guard = instrument::enter(site);
        let (lead, d) = self.last_dim_split(x);
        let rows = lead.iter().product::<usize>();
        let mut out = vec![F::zero(); rows * (d + 1)];
        for (src, dst) in self.value(x).data().chunks_exact(d).zip(out.chunks_exact_mut(d + 1)) {
            lorentz::exp_origin_into(src, dst);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("rank >= 1") += 1;
        let t = Tensor::new(shape, out).expect("shape");
        self.push_op(t, Op::ExpOrigin(x), &[x])
    }

    /// log_o applied to every row `[.., d+1] -> [.., d]`, tagged with `site`.
    pub fn log_origin(&mut self, x: Var, site: Site) -> Result<Var> {
        let _guard = instrument::enter(site);
        let (lead, w) = self.last_dim_split(x);
        if w < 2 {
            return Err(Error::shape("log_origin", "rows need at least 2 coordinates"));
        }
        let rows = lead.iter().product::<usize>();
        let mut out = vec![F::zero(); rows * (w - 1)];
        for (src, dst) in self.value(x).data().chunks_exact(w).zip(out.chunks_exact_mut(w - 1)) {
            lorentz::log_origin_into(src, dst);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("rank >= 1") -= 1;
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(t, Op::LogOrigin(x), &[x]))
    }

    /// π applied to every row `[.., d] -> [.., d+1]`.
    pub fn project_hyperboloid(&mut self, x: Var) -> Var {
        let (lead, d) = self.last_dim_split(x);
        let rows = lead.iter().product::<usize>();
        let mut out = vec![F::zero(); rows * (d + 1)];
        for (src, dst) in self.value(x).data().chunks_exact(d).zip(out.chunks_exact_mut(d + 1)) {
            lorentz::project_into(src, dst);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("rank >= 1") += 1;
        let t = Tensor::new(shape, out).expect("shape");
        self.push_op(t, Op::Project(x), &[x])
    }

    /// Row-wise Lorentz inner products ⟨aᵢ, bᵢ⟩_L over the last axis.
    pub fn lorentz_inner_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        let shape = self.shape(prod).to_vec();
        let w = *shape.last().unwrap_or(&0);
        if w < 2 {
            return Err(Error::shape("lorentz_inner_rows", "rows need at least 2 coordinates"));
        }
        let mut sshape = vec![1; shape.len()];
        sshape[shape.len() - 1] = w;
        let mut sign = vec![F::one(); w];
        sign[0] = -F::one();
        let sign = self.constant(Tensor::new(sshape, sign)?);
        let signed = self.mul_b(prod, sign)?;
        Ok(self.sum_last(signed))
    }

    /// Row-wise geodesic distance arccosh(−⟨aᵢ,bᵢ⟩_L).
    pub fn geodesic_distance_rows(&mut self, a: Var, b: Var, eps: F) -> Result<Var> {
        let ip = self.lorentz_inner_rows(a, b)?;
        let z = self.neg(ip);
        Ok(self.arccosh(z, eps))
    }

    // ---- attention kernels -------------------------------------------

    /// Expanded pairwise squared distances `[B,N,D] x [B,M,D] -> [B,N,M]`.
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::shape("pairwise_sqdist", format!("{sa:?} vs {sb:?}")));
        }
        let (batch, n, m, d) = (sa[0], sa[1], sb[1], sa[2]);
        let mut out = vec![F::zero(); batch * n * m];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                lorentz::pairwise_sqdist_into(
                    &ad[bi * n * d..(bi + 1) * n * d],
                    &bd[bi * m * d..(bi + 1) * m * d],
                    n,
                    m,
                    d,
                    &mut out[bi * n * m..(bi + 1) * n * m],
                );
            }
        }
        let t = Tensor::new(vec![batch, n, m], out)?;
        Ok(self.push_op(t, Op::PairwiseSqDist { a, b, batch, n, m, d }, &[a, b]))
    }

    /// Banded dot products `[B,T,D] x [B,T,D] -> [B,T,2W+1]`; entry
    /// `(t, w+W)` holds q_t·k_{t+w} and is 0 where t+w falls outside [0,T).
    pub fn band_scores(&mut self, q: Var, k: Var, w: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 || self.shape(k) != sq.as_slice() {
            return Err(Error::shape("band_scores", format!("{sq:?} vs {:?}", self.shape(k))));
        }
        let (batch, t_len, d) = (sq[0], sq[1], sq[2]);
        let width = 2 * w + 1;
        let mut out = vec![F::zero(); batch * t_len * width];
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let mut macs = 0u64;
        for b in 0..batch {
            for t in 0..t_len {
                let qrow = &qd[(b * t_len + t) * d..(b * t_len + t + 1) * d];
                let (lo, hi) = band_range(t, w, t_len);
                for s in lo..hi {
                    let krow = &kd[(b * t_len + s) * d..(b * t_len + s + 1) * d];
                    out[(b * t_len + t) * width + (s + w - t)] =
                        qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum();
                }
                macs += ((hi - lo) * d) as u64;
            }
        }
        instrument::add_band_macs(macs);
        let t = Tensor::new(vec![batch, t_len, width], out)?;
        Ok(self.push_op(t, Op::BandScores { q, k, w }, &[q, k]))
    }

    /// Band-weighted sum `[B,T,2W+1] x [B,T,D] -> [B,T,D]`:
    /// out_t = Σ_w p[t, w+W] · v_{t+w} over valid frames.
    pub fn band_apply(&mut self, p: Var, v: Var, w: usize) -> Result<Var> {
        let sp = self.shape(p).to_vec();
        let sv = self.shape(v).to_vec();
        let width = 2 * w + 1;
        if sp.len() != 3 || sv.len() != 3 || sp[0] != sv[0] || sp[1] != sv[1] || sp[2] != width {
            return Err(Error::shape("band_apply", format!("{sp:?} vs {sv:?}, W={w}")));
        }
        let (batch, t_len, d) = (sv[0], sv[1], sv[2]);
        let mut out = vec![F::zero(); batch * t_len * d];
        let pd = self.value(p).data();
        let vd = self.value(v).data();
        let mut macs = 0u64;
        for b in 0..batch {
            for t in 0..t_len {
                let (lo, hi) = band_range(t, w, t_len);
                let orow = &mut out[(b * t_len + t) * d..(b * t_len + t + 1) * d];
                for s in lo..hi {
                    let a = pd[(b * t_len + t) * width + (s + w - t)];
                    let vrow = &vd[(b * t_len + s) * d..(b * t_len + s + 1) * d];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += a * x;
                    }
                }
                macs += ((hi - lo) * d) as u64;
            }
        }
        instrument::add_band_macs(macs);
        let t = Tensor::new(vec![batch, t_len, d], out)?;
        Ok(self.push_op(t, Op::BandApply { p, v, w }, &[p, v]))
    }
}

/// Valid key frames [lo, hi) for query frame `t` with half-width `w`.
#[inline]
pub(crate) fn band_range(t: usize, w: usize, t_len: usize) -> (usize, usize) {
    (t.saturating_sub(w), (t + w + 1).min(t_len))
}

/// Additive band mask `[T, 2W+1]`: 0 on valid offsets, −∞ elsewhere.
pub fn band_mask<F: Real>(t_len: usize, w: usize) -> Tensor<F> {
    let width = 2 * w + 1;
    let mut data = vec![F::neg_infinity(); t_len * width];
    for t in 0..t_len {
        let (lo, hi) = band_range(t, w, t_len);
        for s in lo..hi {
            data[t * width + (s + w - t)] = F::zero();
        }
    }
    Tensor::new(vec![t_len, width], data).expect("mask shape")
}

/// Permutes `src` (shape `shape`) by `perm`; with `inverse` it scatters a
/// permuted buffer back into the original layout.
pub(crate) fn permute_data<F: Real>(src: &[F], shape: &[usize], perm: &[usize], inverse: bool) -> Vec<F> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![F::zero(); src.len()];
    if src.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..src.len() {
        if inverse {
            out[off] = src[i];
        } else {
            out[i] = src[off];
        }
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= walk[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
