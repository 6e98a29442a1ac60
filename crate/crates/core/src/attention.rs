//! Spatial attention over joints on the hyperboloid (HKPSA) and banded
//! temporal attention over frames.
//!
//! Both blocks consume and return origin-tangent hidden states `[T, J, d]`.
//! Only the spatial block leaves the tangent space, and only for its query
//! and key vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{band_mask, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::instrument::{self, Site};
use crate::layers::{merge_heads, split_heads, Dropout, Linear, SOFTPLUS_INV_ONE};
use crate::lorentz::{lorentz_inner_unchecked, manifold_drift_rows, LorentzPoint};
use crate::real::Real;
use crate::skeleton::{Skeleton, HOPS};

/// Values captured during a forward pass for diagnostics. Nothing recorded
/// here feeds back into the computation.
#[derive(Debug, Clone, Default)]
pub struct Trace<F> {
    /// Spatial attention weights per block, `[T·H, J, J]`.
    pub spatial_weights: Vec<Tensor<F>>,
    /// Temporal attention weights per block, `[J·H, T, 2W+1]`.
    pub temporal_weights: Vec<Tensor<F>>,
    /// Largest |⟨x,x⟩_L + 1| over the lifted queries and keys, per block.
    pub lift_drift: Vec<f64>,
    /// Lifted queries of each spatial block, `[T·H, J, d_h+1]`.
    pub lifted_queries: Vec<Tensor<F>>,
    /// Hidden state entering the output head, `[T, J, d]`.
    pub final_hidden: Option<Tensor<F>>,
}

/// (1 + ⟨q,k⟩_L)/τ; non-positive on the hyperboloid and 0 iff q = k.
pub fn lorentz_proximity_logit<F: Real>(q: &LorentzPoint<F>, k: &LorentzPoint<F>, tau: F) -> F {
    (F::one() + lorentz_inner_unchecked(q.coords(), k.coords())) / tau
}

/// Mean natural-log Shannon entropy over rows of length `row_len`.
pub fn attention_entropy<F: Real>(weights: &[F], row_len: usize) -> Result<f64> {
    if row_len == 0 || weights.is_empty() || weights.len() % row_len != 0 {
        return Err(Error::Diagnostic(format!(
            "{} weights do not split into rows of {row_len}",
            weights.len()
        )));
    }
    let rows = weights.len() / row_len;
    let mut total = 0.0;
    for (r, row) in weights.chunks_exact(row_len).enumerate() {
        let mut s = 0.0;
        let mut h = 0.0;
        for &p in row {
            let p = p.as_f64();
            if !(p >= 0.0) {
                return Err(Error::Diagnostic(format!("row {r} has weight {p}")));
            }
            s += p;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::Diagnostic(format!("row {r} sums to {s}")));
        }
        total += h;
    }
    Ok(total / rows as f64)
}

/// Per-head λ: independent or one shared scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    #[default]
    PerHead,
    Shared,
}

/// Parameter handles of one HKPSA block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hkpsa {
    /// Fused `[d, 3d]` projection; its Q/K columns also act on velocities.
    pub qkv: ParamId,
    pub out: Linear,
    pub tau_raw: ParamId,
    pub lambda_raw: ParamId,
    /// `[H, 3]` hop-bias weights γ.
    pub gamma: ParamId,
    pub heads: usize,
    pub dim: usize,
    pub lambda_mode: LambdaMode,
    /// Norm bound applied to Q/K tangents before the lift.
    pub r_q: f64,
}

impl Hkpsa {
    pub fn init<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        lambda_mode: LambdaMode,
        r_q: f64,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("d = {dim} is not divisible by H = {heads}")));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let qkv = store.add(format!("{name}.qkv"), Tensor::uniform(&[dim, 3 * dim], bound, rng), true);
        let out = Linear::init(store, rng, &format!("{name}.out"), dim, dim, true);
        let raw = F::c(SOFTPLUS_INV_ONE);
        let tau_raw = store.add(format!("{name}.tau"), Tensor::full(&[heads], raw), false);
        let n_lambda = match lambda_mode {
            LambdaMode::PerHead => heads,
            LambdaMode::Shared => 1,
        };
        let lambda_raw = store.add(format!("{name}.lambda"), Tensor::full(&[n_lambda], raw), false);
        let gamma = store.add(format!("{name}.gamma"), crate::skeleton::init_hop_gamma(heads), false);
        Ok(Self {
            qkv,
            out,
            tau_raw,
            lambda_raw,
            gamma,
            heads,
            dim,
            lambda_mode,
            r_q,
        })
    }

    pub fn param_count(dim: usize, heads: usize, lambda_mode: LambdaMode) -> usize {
        let lambdas = match lambda_mode {
            LambdaMode::PerHead => heads,
            LambdaMode::Shared => 1,
        };
        3 * dim * dim + Linear::param_count(dim, dim, true) + heads + lambdas + HOPS * heads
    }

    /// Attention over joints within each frame.
    ///
    /// `h` is the normalised position stream and `hv` the velocity stream,
    /// both `[T, J, d]`; `topo` is the `[3, J·J]` hop-matrix stack.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        h: Var,
        hv: Var,
        topo: &Tensor<F>,
        drop: &mut Dropout,
        trace: Option<&mut Trace<F>>,
    ) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.dim || g.shape(hv) != shape.as_slice() {
            return Err(Error::shape(
                "hkpsa",
                format!("h {shape:?}, hv {:?}, d = {}", g.shape(hv), self.dim),
            ));
        }
        let (t_len, j, d) = (shape[0], shape[1], self.dim);
        if topo.shape() != [HOPS, j * j] {
            return Err(Error::shape("hkpsa", format!("topology stack {:?} for J = {j}", topo.shape())));
        }
        let heads = self.heads;
        let dh = d / heads;
        let w = b.var(self.qkv);

        let x = g.reshape(h, &[t_len * j, d])?;
        let qkv = g.matmul(x, w)?;
        let q = g.narrow(qkv, 1, 0, d)?;
        let k = g.narrow(qkv, 1, d, d)?;
        let v = g.narrow(qkv, 1, 2 * d, d)?;

        let xv = g.reshape(hv, &[t_len * j, d])?;
        let w_qk = g.narrow(w, 1, 0, 2 * d)?;
        let qk_v = g.matmul(xv, w_qk)?;
        let q_vel = g.narrow(qk_v, 1, 0, d)?;
        let k_vel = g.narrow(qk_v, 1, d, d)?;

        let heads_of = |g: &mut Graph<F>, y: Var| -> Result<Var> {
            let y = g.reshape(y, &[t_len, j, d])?;
            split_heads(g, y, heads)
        };
        let (q, k, v) = (heads_of(g, q)?, heads_of(g, k)?, heads_of(g, v)?);
        let (q_vel, k_vel) = (heads_of(g, q_vel)?, heads_of(g, k_vel)?);

        // lift Q/K to ℍ^{d_h}
        let r_q = F::c(self.r_q);
        let qc = g.clip_norm(q, r_q);
        let kc = g.clip_norm(k, r_q);
        let q_lift = g.exp_origin(qc, Site::HkpsaQuery);
        let k_lift = g.exp_origin(kc, Site::HkpsaKey);
        let mut sign = vec![F::one(); dh + 1];
        sign[0] = -F::one();
        let sign = g.constant(Tensor::new(vec![1, 1, dh + 1], sign)?);
        let k_signed = g.mul_b(k_lift, sign)?;
        let inner = g.matmul_nt(q_lift, k_signed)?;

        let inner = g.reshape(inner, &[t_len, heads, j * j])?;
        let shifted = g.add_const(inner, F::one());
        let tau = g.softplus(b.var(self.tau_raw));
        let inv_tau = g.recip(tau);
        let inv_tau = g.reshape(inv_tau, &[1, heads, 1])?;
        let s_prox = g.mul_b(shifted, inv_tau)?;

        let sq = g.pairwise_sqdist(q_vel, k_vel)?;
        let sq = g.reshape(sq, &[t_len, heads, j * j])?;
        let lambda = g.softplus(b.var(self.lambda_raw));
        let neg_lambda = g.neg(lambda);
        let lshape = match self.lambda_mode {
            LambdaMode::PerHead => [1, heads, 1],
            LambdaMode::Shared => [1, 1, 1],
        };
        let neg_lambda = g.reshape(neg_lambda, &lshape)?;
        let s_kin = g.mul_b(sq, neg_lambda)?;

        let stack = g.constant(topo.clone());
        let s_topo = g.matmul(b.var(self.gamma), stack)?;
        let s_topo = g.reshape(s_topo, &[1, heads, j * j])?;

        let logits = g.add(s_prox, s_kin)?;
        let logits = g.add_b(logits, s_topo)?;
        let logits = g.reshape(logits, &[t_len * heads, j, j])?;
        let alpha = g.softmax(logits, None)?;
        if let Some(tr) = trace {
            tr.spatial_weights.push(g.value(alpha).clone());
            let dq = manifold_drift_rows(g.value(q_lift).data(), dh + 1);
            let dk = manifold_drift_rows(g.value(k_lift).data(), dh + 1);
            tr.lift_drift.push(dq.max(dk).as_f64());
            tr.lifted_queries.push(g.value(q_lift).clone());
        }
        let alpha = drop.apply(g, alpha)?;
        let mixed = g.matmul(alpha, v)?;
        let merged = merge_heads(g, mixed, heads)?;
        self.out.forward(g, b, merged)
    }

    /// Frozen evaluation of [`Self::forward`] on plain tensors.
    pub fn evaluate<F: Real>(
        &self,
        store: &ParamStore<F>,
        h: &Tensor<F>,
        hv: &Tensor<F>,
        skeleton: &Skeleton,
    ) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let hx = g.constant(h.clone());
        let vx = g.constant(hv.clone());
        let y = self.forward(&mut g, &b, hx, vx, &skeleton.power_stack(), &mut Dropout::off(), None)?;
        Ok(g.value(y).clone())
    }
}

/// Parameter handles of one banded temporal attention block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub tau_raw: ParamId,
    pub window: usize,
    pub heads: usize,
    pub dim: usize,
}

impl TemporalAttention {
    pub fn init<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("d = {dim} is not divisible by H = {heads}")));
        }
        if window == 0 {
            return Err(Error::Config("temporal window must be at least 1".into()));
        }
        let qkv = Linear::init(store, rng, &format!("{name}.qkv"), dim, 3 * dim, false);
        let out = Linear::init(store, rng, &format!("{name}.out"), dim, dim, true);
        let tau_raw = store.add(
            format!("{name}.tau"),
            Tensor::full(&[heads], F::c(SOFTPLUS_INV_ONE)),
            false,
        );
        Ok(Self {
            qkv,
            out,
            tau_raw,
            window,
            heads,
            dim,
        })
    }

    pub fn param_count(dim: usize, heads: usize) -> usize {
        Linear::param_count(dim, 3 * dim, false) + Linear::param_count(dim, dim, true) + heads
    }

    /// Half-width actually used for `t_len` frames.
    pub fn effective_window(&self, t_len: usize) -> usize {
        self.window.min(t_len.saturating_sub(1))
    }

    fn project<F: Real>(&self, g: &mut Graph<F>, b: &Bound, h: Var) -> Result<(Var, Var, Var, usize, usize)> {
        let shape = g.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::shape("temporal", format!("h {shape:?}, d = {}", self.dim)));
        }
        let (t_len, j, d) = (shape[0], shape[1], self.dim);
        let x = g.permute(h, &[1, 0, 2])?;
        let qkv = self.qkv.forward(g, b, x)?;
        let mut parts = [qkv; 3];
        for (i, p) in parts.iter_mut().enumerate() {
            let y = g.narrow(qkv, 2, i * d, d)?;
            *p = split_heads(g, y, self.heads)?;
        }
        Ok((parts[0], parts[1], parts[2], t_len, j))
    }

    /// Per-head logit scale 1/(√d_h·τ′_h) shaped `[1, H, 1]`.
    fn logit_scale<F: Real>(&self, g: &mut Graph<F>, b: &Bound) -> Result<Var> {
        let dh = (self.dim / self.heads) as f64;
        let tau = g.softplus(b.var(self.tau_raw));
        let inv = g.recip(tau);
        let inv = g.scale(inv, F::c(1.0 / dh.sqrt()));
        g.reshape(inv, &[1, self.heads, 1])
    }

    fn finish<F: Real>(&self, g: &mut Graph<F>, b: &Bound, mixed: Var) -> Result<Var> {
        let merged = merge_heads(g, mixed, self.heads)?;
        let y = self.out.forward(g, b, merged)?;
        g.permute(y, &[1, 0, 2])
    }

    /// Banded attention over frames, independently per joint.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        h: Var,
        drop: &mut Dropout,
        trace: Option<&mut Trace<F>>,
    ) -> Result<Var> {
        let (q, k, v, t_len, j) = self.project(g, b, h)?;
        let w = self.effective_window(t_len);
        let width = 2 * w + 1;
        let scores = g.band_scores(q, k, w)?;
        let scores = g.reshape(scores, &[j, self.heads, t_len * width])?;
        let scale = self.logit_scale(g, b)?;
        let scores = g.mul_b(scores, scale)?;
        let scores = g.reshape(scores, &[j * self.heads, t_len, width])?;
        let p = g.softmax(scores, Some(&band_mask(t_len, w)))?;
        if let Some(tr) = trace {
            tr.temporal_weights.push(g.value(p).clone());
        }
        let p = drop.apply(g, p)?;
        let mixed = g.band_apply(p, v, w)?;
        self.finish(g, b, mixed)
    }

    /// Reference full softmax attention over all frames (no band), with
    /// its multiply-adds counted as dense work.
    pub fn forward_dense<F: Real>(&self, g: &mut Graph<F>, b: &Bound, h: Var) -> Result<Var> {
        let (q, k, v, t_len, j) = self.project(g, b, h)?;
        let dh = self.dim / self.heads;
        instrument::add_dense_macs((2 * j * self.heads * t_len * t_len * dh) as u64);
        let scores = g.matmul_nt(q, k)?;
        let scores = g.reshape(scores, &[j, self.heads, t_len * t_len])?;
        let scale = self.logit_scale(g, b)?;
        let scores = g.mul_b(scores, scale)?;
        let scores = g.reshape(scores, &[j * self.heads, t_len, t_len])?;
        let p = g.softmax(scores, None)?;
        let mixed = g.matmul(p, v)?;
        self.finish(g, b, mixed)
    }

    /// Frozen evaluation of [`Self::forward`].
    pub fn evaluate<F: Real>(&self, store: &ParamStore<F>, h: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let x = g.constant(h.clone());
        let y = self.forward(&mut g, &b, x, &mut Dropout::off(), None)?;
        Ok(g.value(y).clone())
    }

    /// Frozen evaluation of [`Self::forward_dense`].
    pub fn evaluate_dense<F: Real>(&self, store: &ParamStore<F>, h: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let x = g.constant(h.clone());
        let y = self.forward_dense(&mut g, &b, x)?;
        Ok(g.value(y).clone())
    }
}

/// Multiply-adds of banded attention (scores plus weighted sum) for one
/// sequence of `t_len` frames with half-width `w`, per unit of head width.
pub fn band_macs(t_len: usize, w: usize) -> u64 {
    let w = w.min(t_len.saturating_sub(1));
    (0..t_len)
        .map(|t| {
            let (lo, hi) = (t.saturating_sub(w), (t + w + 1).min(t_len));
            2 * (hi - lo) as u64
        })
        .sum()
}

/// Multiply-adds of dense attention, same convention as [`band_macs`].
pub fn dense_macs(t_len: usize) -> u64 {
    2 * (t_len * t_len) as u64
}
