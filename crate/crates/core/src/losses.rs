//! Training objectives: MPJPE, geodesic velocity consistency, geodesic
//! bone length, and their uncertainty-weighted combination with an
//! epoch-dependent curriculum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::skeleton::Skeleton;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Multiplier applied to millimetre coordinates before the lift to ℍ³.
    pub lift_scale: f64,
    /// Derivative clamp of arccosh near 1.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lift_scale: 1e-3,
            eps: 1e-7,
        }
    }
}

/// Epoch ramp for the geodesic terms: 0 through `zero_until`, 1 from
/// `full_from`, linear between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub zero_until: usize,
    pub full_from: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            zero_until: 9,
            full_from: 20,
        }
    }
}

impl CurriculumSchedule {
    pub fn weight(&self, epoch: usize) -> f64 {
        if epoch <= self.zero_until {
            return 0.0;
        }
        let span = (self.full_from - self.zero_until) as f64;
        ((epoch - self.zero_until) as f64 / span).min(1.0)
    }
}

/// ω(e) = clamp((e − 9)/11, 0, 1).
pub fn curriculum_weight(epoch: usize) -> f64 {
    CurriculumSchedule::default().weight(epoch)
}

/// Index of each term inside the log σ² vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Mpjpe = 0,
    Velocity = 1,
    Bone = 2,
}

/// Learned log σ² for the three terms, stored as one `[3]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Uncertainty {
    pub log_sigma_sq: ParamId,
}

impl Uncertainty {
    pub const NAME: &'static str = "loss.log_sigma_sq";

    pub fn init<F: Real>(store: &mut ParamStore<F>) -> Self {
        Self {
            log_sigma_sq: store.add(Self::NAME, Tensor::zeros(&[3]), false),
        }
    }

    /// σ²ₖ = exp(log σ²ₖ) for (mpjpe, vel, bone).
    pub fn sigma_sq<F: Real>(&self, store: &ParamStore<F>) -> [f64; 3] {
        let v = store.get(self.log_sigma_sq).value.data();
        std::array::from_fn(|k| v[k].as_f64().exp())
    }
}

/// Graph handles (or plain values) of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub mpjpe: T,
    pub velocity: T,
    pub bone: T,
}

fn check_pair<F: Real>(g: &Graph<F>, pred: Var, gt: Var, op: &'static str) -> Result<Vec<usize>> {
    let s = g.shape(pred).to_vec();
    if s != g.shape(gt) || s.len() < 2 || s[s.len() - 1] != 3 {
        return Err(Error::shape(op, format!("pred {s:?} vs gt {:?}", g.shape(gt))));
    }
    Ok(s)
}

/// Mean Euclidean per-joint error over every leading index.
pub fn loss_mpjpe<F: Real>(g: &mut Graph<F>, pred: Var, gt: Var) -> Result<Var> {
    check_pair(g, pred, gt, "loss_mpjpe")?;
    let d = g.sub(pred, gt)?;
    let n = g.norm_last(d);
    Ok(g.mean(n))
}

/// π(s·y) row-wise, `[.., 3] -> [.., 4]`.
pub fn lift_to_hyperboloid<F: Real>(g: &mut Graph<F>, y: Var, scale: f64) -> Var {
    let s = g.scale(y, F::c(scale));
    g.project_hyperboloid(s)
}

/// Geodesic distances between consecutive frames, `[T, J, 4] -> [T−1, J]`.
fn frame_steps<F: Real>(g: &mut Graph<F>, lifted: Var, t_len: usize, eps: F) -> Result<Var> {
    let a = g.narrow(lifted, 0, 0, t_len - 1)?;
    let b = g.narrow(lifted, 0, 1, t_len - 1)?;
    g.geodesic_distance_rows(a, b, eps)
}

/// Mean over joints and frame pairs of |d_L(ŷₜ, ŷₜ₊₁) − d_L(yₜ, yₜ₊₁)|,
/// for `[T, J, 3]` sequences in millimetres.
pub fn loss_velocity<F: Real>(g: &mut Graph<F>, pred: Var, gt: Var, cfg: &LossConfig) -> Result<Var> {
    let s = check_pair(g, pred, gt, "loss_velocity")?;
    if s.len() != 3 {
        return Err(Error::shape("loss_velocity", format!("expected [T,J,3], got {s:?}")));
    }
    if s[0] < 2 {
        return Err(Error::Argument(format!("velocity loss needs T ≥ 2, got {}", s[0])));
    }
    let eps = F::c(cfg.eps);
    let lp = lift_to_hyperboloid(g, pred, cfg.lift_scale);
    let lg = lift_to_hyperboloid(g, gt, cfg.lift_scale);
    let dp = frame_steps(g, lp, s[0], eps)?;
    let dg = frame_steps(g, lg, s[0], eps)?;
    let diff = g.sub(dp, dg)?;
    let a = g.abs(diff);
    Ok(g.mean(a))
}

/// Mean over frames and bones of |d_L(ŷᵢ, ŷⱼ) − d_L(yᵢ, yⱼ)|.
pub fn loss_bone<F: Real>(
    g: &mut Graph<F>,
    pred: Var,
    gt: Var,
    skeleton: &Skeleton,
    cfg: &LossConfig,
) -> Result<Var> {
    let s = check_pair(g, pred, gt, "loss_bone")?;
    if s.len() != 3 || s[1] != skeleton.num_joints() {
        return Err(Error::shape(
            "loss_bone",
            format!("{s:?} against a {}-joint skeleton", skeleton.num_joints()),
        ));
    }
    let (child, parent): (Vec<usize>, Vec<usize>) = skeleton.bones().iter().copied().unzip();
    let eps = F::c(cfg.eps);
    let mut lengths = [pred; 2];
    for (slot, y) in lengths.iter_mut().zip([pred, gt]) {
        let lifted = lift_to_hyperboloid(g, y, cfg.lift_scale);
        let c = g.index_select(lifted, 1, &child)?;
        let p = g.index_select(lifted, 1, &parent)?;
        *slot = g.geodesic_distance_rows(c, p, eps)?;
    }
    let diff = g.sub(lengths[0], lengths[1])?;
    let a = g.abs(diff);
    Ok(g.mean(a))
}

/// All three terms for one `[T, J, 3]` sequence.
pub fn loss_terms<F: Real>(
    g: &mut Graph<F>,
    pred: Var,
    gt: Var,
    skeleton: &Skeleton,
    cfg: &LossConfig,
) -> Result<LossTerms<Var>> {
    Ok(LossTerms {
        mpjpe: loss_mpjpe(g, pred, gt)?,
        velocity: loss_velocity(g, pred, gt, cfg)?,
        bone: loss_bone(g, pred, gt, skeleton, cfg)?,
    })
}

/// ½·L_m·e^{−s_m} + ω·Σ_{k∈{v,b}} ½·L_k·e^{−s_k} + ½·Σ_k s_k, with
/// `log_sigma_sq = (s_m, s_v, s_b)`. At ω = 0 the geodesic terms are left
/// off the tape entirely, so nothing flows back through them.
pub fn total_loss<F: Real>(g: &mut Graph<F>, terms: &LossTerms<Var>, log_sigma_sq: Var, omega: f64) -> Result<Var> {
    if g.shape(log_sigma_sq) != [3] {
        return Err(Error::shape(
            "total_loss",
            format!("log σ² must be [3], got {:?}", g.shape(log_sigma_sq)),
        ));
    }
    let half = F::c(0.5);
    let weighted = |g: &mut Graph<F>, l: Var, k: Term| -> Result<Var> {
        let s = g.narrow(log_sigma_sq, 0, k as usize, 1)?;
        let ns = g.neg(s);
        let w = g.exp(ns);
        let lw = g.mul(l, w)?;
        Ok(g.scale(lw, half))
    };
    let mut total = weighted(g, terms.mpjpe, Term::Mpjpe)?;
    if omega != 0.0 {
        for (l, k) in [(terms.velocity, Term::Velocity), (terms.bone, Term::Bone)] {
            let t = weighted(g, l, k)?;
            let t = g.scale(t, F::c(omega));
            total = g.add(total, t)?;
        }
    }
    let reg = g.sum(log_sigma_sq);
    let reg = g.scale(reg, half);
    g.add(total, reg)
}

/// Loss values for plain `[T, J, 3]` tensors.
pub fn evaluate_terms<F: Real>(
    pred: &Tensor<F>,
    gt: &Tensor<F>,
    skeleton: &Skeleton,
    cfg: &LossConfig,
) -> Result<LossTerms<f64>> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let y = g.constant(gt.clone());
    let t = loss_terms(&mut g, p, y, skeleton, cfg)?;
    let v = |v: Var| g.value(v).item().as_f64();
    Ok(LossTerms {
        mpjpe: v(t.mpjpe),
        velocity: v(t.velocity),
        bone: v(t.bone),
    })
}
