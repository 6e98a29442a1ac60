//! Confidence-gated phase-space embedding of 2D keypoint sequences into
//! the tangent space at the hyperboloid origin.

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::instrument::Site;
use crate::real::Real;

/// One clip: `inputs` are (x, y, confidence) per joint, `targets` are
/// pelvis-centred 3D coordinates in millimetres. Both are `[T, J, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence<F> {
    pub inputs: Tensor<F>,
    pub targets: Tensor<F>,
}

impl<F: Real> PoseSequence<F> {
    pub fn new(inputs: Tensor<F>, targets: Tensor<F>) -> Result<Self> {
        let s = Self { inputs, targets };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.inputs.shape();
        if shape.len() != 3 || shape[2] != 3 || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::shape("PoseSequence", format!("inputs must be [T,J,3], got {shape:?}")));
        }
        if self.targets.shape() != shape {
            return Err(Error::shape(
                "PoseSequence",
                format!("targets {:?} vs inputs {shape:?}", self.targets.shape()),
            ));
        }
        if !self.inputs.is_finite() || !self.targets.is_finite() {
            return Err(Error::Domain("pose sequence contains non-finite values".into()));
        }
        if let Some(c) = self
            .inputs
            .data()
            .chunks_exact(3)
            .map(|r| r[2])
            .find(|&c| c < F::zero() || c > F::one())
        {
            return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn cast<G: Real>(&self) -> PoseSequence<G> {
        PoseSequence {
            inputs: self.inputs.cast(),
            targets: self.targets.cast(),
        }
    }
}

/// 1 + tanh(α·c + β), always in (0, 2).
pub fn confidence_gate<F: Real>(c: F, alpha: F, beta: F) -> F {
    F::one() + (alpha * c + beta).tanh()
}

/// Per-frame 2D velocities `[T, J, 2]` from `[T, J, 3]` inputs: central
/// differences inside, one-sided at the ends, zero for a single frame.
/// The confidence channel is ignored.
pub fn keypoint_velocities<F: Real>(inputs: &Tensor<F>) -> Tensor<F> {
    let (t_len, j) = (inputs.shape()[0], inputs.shape()[1]);
    let x = inputs.data();
    let mut out = Tensor::zeros(&[t_len, j, 2]);
    if t_len < 2 {
        return out;
    }
    let half = F::c(0.5);
    let o = out.data_mut();
    for t in 0..t_len {
        let (a, b, s) = if t == 0 {
            (1, 0, F::one())
        } else if t == t_len - 1 {
            (t, t - 1, F::one())
        } else {
            (t + 1, t - 1, half)
        };
        for jj in 0..j {
            for c in 0..2 {
                o[(t * j + jj) * 2 + c] = (x[(a * j + jj) * 3 + c] - x[(b * j + jj) * 3 + c]) * s;
            }
        }
    }
    out
}

/// Parameter handles of the embedding layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedding {
    /// `[2, d]` position projection.
    pub w_p: ParamId,
    /// `[2, d]` velocity projection.
    pub w_v: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
    /// `[J, d]` joint signatures.
    pub joint: ParamId,
    pub dim: usize,
    pub joints: usize,
}

impl Embedding {
    pub fn init<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        dim: usize,
        joints: usize,
    ) -> Self {
        let bound_xy = 1.0 / 2f64.sqrt();
        let bound_e = 1.0 / (dim as f64).sqrt();
        Self {
            w_p: store.add("embed.w_p", Tensor::uniform(&[2, dim], bound_xy, rng), true),
            w_v: store.add("embed.w_v", Tensor::uniform(&[2, dim], bound_xy, rng), true),
            alpha: store.add("embed.alpha", Tensor::scalar(F::one()), false),
            beta: store.add("embed.beta", Tensor::scalar(F::zero()), false),
            joint: store.add("embed.joint", Tensor::uniform(&[joints, dim], bound_e, rng), true),
            dim,
            joints,
        }
    }

    /// Analytic parameter count: two projections, the gate and E.
    pub fn param_count(dim: usize, joints: usize) -> usize {
        2 * 2 * dim + 2 + joints * dim
    }

    fn check_inputs(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 3 || shape[1] != self.joints || shape[2] != 3 {
            return Err(Error::shape(
                "embedding",
                format!("expected [T,{},3], got {shape:?}", self.joints),
            ));
        }
        Ok((shape[0], shape[1]))
    }

    /// log_o(π(gate·W_p·(x,y))) per joint, `[T, J, d]`, without E.
    pub fn positions<F: Real>(&self, g: &mut Graph<F>, b: &Bound, inputs: Var) -> Result<Var> {
        let (t_len, j) = self.check_inputs(g.shape(inputs))?;
        let n = t_len * j;
        let xy = g.narrow(inputs, 2, 0, 2)?;
        let xy = g.reshape(xy, &[n, 2])?;
        let conf = g.narrow(inputs, 2, 2, 1)?;
        let conf = g.reshape(conf, &[n, 1])?;
        let alpha = g.reshape(b.var(self.alpha), &[1, 1])?;
        let beta = g.reshape(b.var(self.beta), &[1, 1])?;
        let ac = g.mul_b(conf, alpha)?;
        let pre = g.add_b(ac, beta)?;
        let th = g.tanh(pre);
        let gate = g.add_const(th, F::one());
        let proj = g.matmul(xy, b.var(self.w_p))?;
        let phi = g.mul_b(proj, gate)?;
        let lifted = g.project_hyperboloid(phi);
        let h = g.log_origin(lifted, Site::Embedding)?;
        g.reshape(h, &[t_len, j, self.dim])
    }

    /// W_v·Δ(x,y), `[T, J, d]`.
    pub fn velocities<F: Real>(&self, g: &mut Graph<F>, b: &Bound, inputs: &Tensor<F>) -> Result<Var> {
        let (t_len, j) = self.check_inputs(inputs.shape())?;
        let dv = keypoint_velocities(inputs).reshape(&[t_len * j, 2])?;
        let dv = g.constant(dv);
        let hv = g.matmul(dv, b.var(self.w_v))?;
        g.reshape(hv, &[t_len, j, self.dim])
    }

    /// h + E broadcast over frames.
    pub fn add_joint_identity<F: Real>(&self, g: &mut Graph<F>, b: &Bound, h: Var) -> Result<Var> {
        let e = g.reshape(b.var(self.joint), &[1, self.joints, self.dim])?;
        g.add_b(h, e)
    }

    /// Position stream (with joint identity) and velocity stream.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, inputs: &Tensor<F>) -> Result<(Var, Var)> {
        let x = g.constant(inputs.clone());
        let h = self.positions(g, b, x)?;
        let h = self.add_joint_identity(g, b, h)?;
        let hv = self.velocities(g, b, inputs)?;
        Ok((h, hv))
    }

    /// Evaluates [`Self::positions`] without recording gradients.
    pub fn embed_positions<F: Real>(&self, store: &ParamStore<F>, inputs: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let x = g.constant(inputs.clone());
        let h = self.positions(&mut g, &b, x)?;
        Ok(g.value(h).clone())
    }

    /// Evaluates [`Self::velocities`] without recording gradients.
    pub fn embed_velocities<F: Real>(&self, store: &ParamStore<F>, inputs: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let hv = self.velocities(&mut g, &b, inputs)?;
        Ok(g.value(hv).clone())
    }
}

/// h[t, j] + E[j] on plain tensors.
pub fn add_joint_identity<F: Real>(h: &Tensor<F>, e: &Tensor<F>) -> Result<Tensor<F>> {
    let s = h.shape();
    if s.len() != 3 || e.shape() != [s[1], s[2]] {
        return Err(Error::shape(
            "add_joint_identity",
            format!("h {s:?} vs E {:?}", e.shape()),
        ));
    }
    let per_frame = e.numel();
    let data = h
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + e.data()[i % per_frame])
        .collect();
    Tensor::new(s.to_vec(), data)
}
