//! Small building blocks shared by the attention blocks and the network:
//! affine maps, affine layer norm, dropout and head splitting.

use rand::{Rng, RngCore};

use crate::autodiff::{Bound, Graph, ParamStore, ParamId, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// softplus⁻¹(1) = ln(e − 1), the raw value giving a unit temperature.
pub const SOFTPLUS_INV_ONE: f64 = 0.541_324_854_612_918_1;

/// x·W (+ b) over the last axis with `W: [fan_in, fan_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn init<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng), true);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), false));
        Self { w, b, fan_in, fan_out }
    }

    pub fn param_count(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.fan_in) {
            return Err(Error::shape(
                "linear",
                format!("input {shape:?} vs fan-in {}", self.fan_in),
            ));
        }
        let rows = shape.iter().product::<usize>() / self.fan_in;
        let flat = g.reshape(x, &[rows, self.fan_in])?;
        let mut y = g.matmul(flat, b.var(self.w))?;
        if let Some(bias) = self.b {
            let bias = g.reshape(b.var(bias), &[1, self.fan_out])?;
            y = g.add_b(y, bias)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.fan_out;
        g.reshape(y, &out_shape)
    }
}

/// Layer norm over the last axis with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn init<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], F::one()), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
            dim,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        let rank = g.shape(x).len();
        let mut pshape = vec![1; rank];
        pshape[rank - 1] = self.dim;
        let n = g.layer_norm(x, F::c(Self::EPS));
        let gain = g.reshape(b.var(self.gain), &pshape)?;
        let bias = g.reshape(b.var(self.bias), &pshape)?;
        let y = g.mul_b(n, gain)?;
        g.add_b(y, bias)
    }
}

/// Inverted dropout; inactive without a random source or at p = 0.
pub struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn new(p: f64, rng: &'a mut dyn RngCore) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.p > 0.0 && self.rng.is_some()
    }

    pub fn apply<F: Real>(&mut self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let p = self.p;
        let Some(rng) = self.rng.as_deref_mut().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let keep = F::c(1.0 / (1.0 - p));
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

/// `[A, B, H·dh] -> [A·H, B, dh]`.
pub fn split_heads<F: Real>(g: &mut Graph<F>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] % heads != 0 {
        return Err(Error::shape("split_heads", format!("{s:?} with {heads} heads")));
    }
    let dh = s[2] / heads;
    let y = g.reshape(x, &[s[0], s[1], heads, dh])?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    g.reshape(y, &[s[0] * heads, s[1], dh])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<F: Real>(g: &mut Graph<F>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[0] % heads != 0 {
        return Err(Error::shape("merge_heads", format!("{s:?} with {heads} heads")));
    }
    let a = s[0] / heads;
    let y = g.reshape(x, &[a, heads, s[1], s[2]])?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    g.reshape(y, &[a, s[1], heads * s[2]])
}
