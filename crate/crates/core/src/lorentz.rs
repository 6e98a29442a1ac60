//! Primitives of the Lorentz (hyperboloid) model of hyperbolic space with
//! curvature −1, plus the manifold-drift diagnostic.
//!
//! Points live in ℝ^{d+1} with coordinate 0 as the time axis. Everything is
//! computed in the caller's precision (`f32` or `f64`); the slice-level
//! `*_into` functions never allocate and are what the autodiff layer calls
//! per row. The typed wrappers [`LorentzPoint`] and [`TangentVector`] are the
//! convenient, validating surface.
//!
//! Functions come in an unchecked form (fast, used in the training loop) and
//! a `*_checked` form that validates manifold membership against
//! [`StabilityConfig::drift_tol`].

use crate::error::{Error, Result};
use crate::instrument;
use crate::real::Real;

/// Below this tangent norm the origin maps switch to their Taylor expansions.
pub const TAYLOR_CUTOFF: f64 = 1e-6;

/// Numerical guard rails for the Lorentz primitives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityConfig<F> {
    /// Clamp epsilon for arccosh derivatives and degenerate denominators.
    pub eps: F,
    /// Norm bound on query/key tangents before the lift.
    pub r_q: F,
    /// Global safety bound on hidden-state tangents.
    pub r_safety: F,
    /// Accepted |⟨x,x⟩_L + 1| for checked operations.
    pub drift_tol: F,
}

impl<F: Real> Default for StabilityConfig<F> {
    fn default() -> Self {
        let drift_tol = if F::NAME == "fp32" { 1e-4 } else { 1e-6 };
        Self {
            eps: F::c(1e-7),
            r_q: F::c(3.0),
            r_safety: F::c(15.0),
            drift_tol: F::c(drift_tol),
        }
    }
}

impl<F: Real> StabilityConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > F::zero() && self.eps < F::one()) {
            return Err(Error::Config(format!("eps must be in (0,1), got {}", self.eps)));
        }
        if !(self.r_q > F::zero() && self.r_q <= self.r_safety) {
            return Err(Error::Config(format!(
                "need 0 < r_q <= r_safety, got r_q={} r_safety={}",
                self.r_q, self.r_safety
            )));
        }
        if !(self.drift_tol > F::zero()) {
            return Err(Error::Config("drift_tol must be positive".into()));
        }
        Ok(())
    }
}

/// A point on the upper sheet of the hyperboloid ℍ^d, stored as d+1 coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint<F> {
    coords: Vec<F>,
}

impl<F: Real> LorentzPoint<F> {
    /// The origin o = (1, 0, …, 0) of ℍ^d.
    pub fn origin(d: usize) -> Self {
        let mut coords = vec![F::zero(); d + 1];
        coords[0] = F::one();
        Self { coords }
    }

    /// Wraps raw coordinates after checking ⟨x,x⟩_L = −1 and x₀ > 0.
    pub fn new(coords: Vec<F>, cfg: &StabilityConfig<F>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::Argument(format!(
                "a Lorentz point needs at least 2 coordinates, got {}",
                coords.len()
            )));
        }
        check_on_manifold(&coords, cfg)?;
        Ok(Self { coords })
    }

    /// Wraps raw coordinates without validation.
    pub fn from_coords_unchecked(coords: Vec<F>) -> Self {
        Self { coords }
    }

    /// Intrinsic dimension d.
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn coords(&self) -> &[F] {
        &self.coords
    }

    pub fn time(&self) -> F {
        self.coords[0]
    }

    pub fn spatial(&self) -> &[F] {
        &self.coords[1..]
    }

    pub fn into_coords(self) -> Vec<F> {
        self.coords
    }

    /// |⟨x,x⟩_L + 1|.
    pub fn drift(&self) -> F {
        (lorentz_inner_unchecked(&self.coords, &self.coords) + F::one()).abs()
    }
}

/// A tangent vector at the origin; the time coordinate is implicitly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector<F> {
    spatial: Vec<F>,
}

impl<F: Real> TangentVector<F> {
    pub fn new(spatial: Vec<F>) -> Self {
        Self { spatial }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            spatial: vec![F::zero(); d],
        }
    }

    pub fn dim(&self) -> usize {
        self.spatial.len()
    }

    pub fn spatial(&self) -> &[F] {
        &self.spatial
    }

    pub fn into_spatial(self) -> Vec<F> {
        self.spatial
    }

    pub fn norm(&self) -> F {
        norm(&self.spatial)
    }

    /// The (d+1)-vector (0, v).
    pub fn to_ambient(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.spatial.len() + 1);
        out.push(F::zero());
        out.extend_from_slice(&self.spatial);
        out
    }
}

#[inline]
pub(crate) fn norm<F: Real>(v: &[F]) -> F {
    v.iter().map(|&x| x * x).sum::<F>().sqrt()
}

/// −x₀y₀ + Σᵢ xᵢyᵢ without length checks.
#[inline]
pub fn lorentz_inner_unchecked<F: Real>(x: &[F], y: &[F]) -> F {
    let mut acc = -(x[0] * y[0]);
    for (&a, &b) in x[1..].iter().zip(&y[1..]) {
        acc += a * b;
    }
    acc
}

/// The Lorentzian inner product ⟨x,y⟩_L = −x₀y₀ + Σᵢ xᵢyᵢ.
pub fn lorentz_inner<F: Real>(x: &[F], y: &[F]) -> Result<F> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Argument(format!(
            "lorentz_inner needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(lorentz_inner_unchecked(x, y))
}

fn check_on_manifold<F: Real>(x: &[F], cfg: &StabilityConfig<F>) -> Result<()> {
    let q = lorentz_inner_unchecked(x, x);
    if !q.is_finite() || (q + F::one()).abs() > cfg.drift_tol || x[0] <= F::zero() {
        return Err(Error::Domain(format!(
            "point off the hyperboloid: <x,x>_L = {q}, x0 = {}",
            x[0]
        )));
    }
    Ok(())
}

/// arccosh clamped so that arguments below 1 (pure rounding) map to 0.
#[inline]
pub fn arccosh_clamped<F: Real>(z: F) -> F {
    z.max(F::one()).acosh()
}

/// Geodesic distance arccosh(−⟨x,y⟩_L).
///
/// Evaluated as 2·arcsinh(½‖x−y‖_L), which agrees on the hyperboloid and
/// stays accurate for nearby points; identical points give exactly 0.
pub fn geodesic_distance<F: Real>(x: &LorentzPoint<F>, y: &LorentzPoint<F>) -> F {
    geodesic_distance_slices(&x.coords, &y.coords)
}

/// Slice form of [`geodesic_distance`].
#[inline]
pub fn geodesic_distance_slices<F: Real>(x: &[F], y: &[F]) -> F {
    let dt = x[0] - y[0];
    let mut u = -dt * dt;
    for (a, b) in x[1..].iter().zip(&y[1..]) {
        let d = *a - *b;
        u += d * d;
    }
    let two = F::c(2.0);
    two * (u.max(F::zero()).sqrt() / two).asinh()
}

/// [`geodesic_distance`] with manifold-membership and dimension checks.
pub fn geodesic_distance_checked<F: Real>(
    x: &LorentzPoint<F>,
    y: &LorentzPoint<F>,
    cfg: &StabilityConfig<F>,
) -> Result<F> {
    if x.coords.len() != y.coords.len() {
        return Err(Error::Argument(format!(
            "dimension mismatch: {} vs {}",
            x.coords.len(),
            y.coords.len()
        )));
    }
    check_on_manifold(&x.coords, cfg)?;
    check_on_manifold(&y.coords, cfg)?;
    Ok(geodesic_distance(x, y))
}

/// sinh(n)/n, with its Taylor expansion near 0.
#[inline]
pub(crate) fn sinhc<F: Real>(n: F) -> F {
    if n < F::c(TAYLOR_CUTOFF) {
        F::one() + n * n / F::c(6.0)
    } else {
        n.sinh() / n
    }
}

/// exp_o(v) written into `out` (length d+1).
pub fn exp_origin_into<F: Real>(v: &[F], out: &mut [F]) {
    debug_assert_eq!(out.len(), v.len() + 1);
    instrument::record_exp();
    let n = norm(v);
    let s = sinhc(n);
    out[0] = n.cosh();
    for (o, &x) in out[1..].iter_mut().zip(v) {
        *o = s * x;
    }
}

/// Exponential map at the origin: (cosh‖v‖, sinh(‖v‖)/‖v‖ · v).
pub fn exp_origin<F: Real>(v: &TangentVector<F>) -> LorentzPoint<F> {
    let mut coords = vec![F::zero(); v.dim() + 1];
    exp_origin_into(&v.spatial, &mut coords);
    LorentzPoint { coords }
}

/// Distance from the origin to y, evaluated as ln(y₀ + ‖y_s‖).
///
/// On the hyperboloid this equals arccosh(y₀) = arcsinh(‖y_s‖) but keeps full
/// relative precision near the origin, where y₀ − 1 underflows.
#[inline]
pub(crate) fn origin_distance<F: Real>(y0: F, spatial_norm: F) -> F {
    ((y0 - F::one()) + spatial_norm).ln_1p()
}

/// log_o(y) written into `out` (length d).
pub fn log_origin_into<F: Real>(y: &[F], out: &mut [F]) {
    debug_assert_eq!(out.len() + 1, y.len());
    instrument::record_log();
    let ys = &y[1..];
    let n = norm(ys);
    let ratio = if n < F::c(TAYLOR_CUTOFF) {
        F::one() - n * n / F::c(6.0)
    } else {
        origin_distance(y[0], n) / n
    };
    for (o, &x) in out.iter_mut().zip(ys) {
        *o = ratio * x;
    }
}

/// Logarithmic map at the origin: (arccosh(y₀)/‖y_s‖) · y_s.
pub fn log_origin<F: Real>(y: &LorentzPoint<F>) -> TangentVector<F> {
    let mut spatial = vec![F::zero(); y.dim()];
    log_origin_into(&y.coords, &mut spatial);
    TangentVector { spatial }
}

/// [`log_origin`] rejecting points with y₀ < 1 beyond `eps` or off the manifold.
pub fn log_origin_checked<F: Real>(
    y: &LorentzPoint<F>,
    cfg: &StabilityConfig<F>,
) -> Result<TangentVector<F>> {
    if y.time() < F::one() - cfg.eps {
        return Err(Error::Domain(format!(
            "log_o needs y0 >= 1, got {}",
            y.time()
        )));
    }
    check_on_manifold(&y.coords, cfg)?;
    Ok(log_origin(y))
}

/// π(φ) written into `out` (length d+1).
pub fn project_into<F: Real>(phi: &[F], out: &mut [F]) {
    debug_assert_eq!(out.len(), phi.len() + 1);
    let sq: F = phi.iter().map(|&x| x * x).sum();
    out[0] = (F::one() + sq).sqrt();
    out[1..].copy_from_slice(phi);
}

/// π(φ) = (√(1+‖φ‖²), φ).
pub fn project_hyperboloid<F: Real>(phi: &[F]) -> LorentzPoint<F> {
    let mut coords = vec![F::zero(); phi.len() + 1];
    project_into(phi, &mut coords);
    LorentzPoint { coords }
}

/// Transports v ∈ T_xℍ^d to T_yℍ^d along the geodesic:
/// v + ⟨y,v⟩_L / (1 − ⟨x,y⟩_L) · (x + y).
pub fn parallel_transport<F: Real>(
    x: &LorentzPoint<F>,
    y: &LorentzPoint<F>,
    v: &[F],
    cfg: &StabilityConfig<F>,
) -> Result<Vec<F>> {
    let n = x.coords.len();
    if y.coords.len() != n || v.len() != n {
        return Err(Error::Argument(format!(
            "parallel_transport dimension mismatch: x={}, y={}, v={}",
            n,
            y.coords.len(),
            v.len()
        )));
    }
    let xv = lorentz_inner_unchecked(&x.coords, v);
    let vscale = norm(v).max(F::one());
    if xv.abs() > cfg.drift_tol * vscale * x.coords[0] {
        return Err(Error::Domain(format!(
            "vector is not tangent at x: <x,v>_L = {xv}"
        )));
    }
    let denom = F::one() - lorentz_inner_unchecked(&x.coords, &y.coords);
    if denom.abs() < cfg.eps {
        return Err(Error::Domain(
            "antipodal configuration: 1 - <x,y>_L vanishes".into(),
        ));
    }
    let coef = lorentz_inner_unchecked(&y.coords, v) / denom;
    Ok(v
        .iter()
        .zip(x.coords.iter().zip(&y.coords))
        .map(|(&vi, (&xi, &yi))| vi + coef * (xi + yi))
        .collect())
}

/// Rescales `v` in place to norm `r` when it exceeds `r`.
#[inline]
pub fn clip_norm_in_place<F: Real>(v: &mut [F], r: F) {
    let n = norm(v);
    if n > r {
        let s = r / n;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

/// v if ‖v‖ ≤ r, else v·r/‖v‖.
pub fn clip_tangent_norm<F: Real>(v: &TangentVector<F>, r: F) -> TangentVector<F> {
    let mut spatial = v.spatial.clone();
    clip_norm_in_place(&mut spatial, r);
    TangentVector { spatial }
}

/// Mean of |⟨x,x⟩_L + 1| over a batch; 0 for an empty batch.
pub fn manifold_drift<F: Real>(points: &[LorentzPoint<F>]) -> F {
    if points.is_empty() {
        return F::zero();
    }
    let total: F = points.iter().map(LorentzPoint::drift).sum();
    total / F::c(points.len() as f64)
}

/// [`manifold_drift`] over a flat row-major buffer of (d+1)-rows.
pub fn manifold_drift_rows<F: Real>(rows: &[F], width: usize) -> F {
    if rows.is_empty() || width == 0 {
        return F::zero();
    }
    let count = rows.len() / width;
    let total: F = rows
        .chunks_exact(width)
        .map(|x| (lorentz_inner_unchecked(x, x) + F::one()).abs())
        .sum();
    total / F::c(count as f64)
}

/// Worst-case fp drift of exp_o for tangent norms up to `r` in dimension `d`:
/// d · ε_m · cosh²(r), with unit constant.
pub fn drift_bound(d: usize, machine_eps: f64, r: f64) -> f64 {
    d as f64 * machine_eps * r.cosh().powi(2)
}

/// ‖aᵢ − bⱼ‖² for all row pairs via ‖a‖² + ‖b‖² − 2⟨a,b⟩, clamped at 0.
///
/// `a` is n×d and `b` is m×d, both row-major; the result is n×m. Only the
/// row norms and the Gram product are formed, never the n×m×d differences.
pub fn pairwise_sqdist_expanded<F: Real>(a: &[F], b: &[F], d: usize) -> Result<Vec<F>> {
    if d == 0 || a.len() % d != 0 || b.len() % d != 0 {
        return Err(Error::shape(
            "pairwise_sqdist_expanded",
            format!("row width {d} does not divide {} / {}", a.len(), b.len()),
        ));
    }
    let n = a.len() / d;
    let m = b.len() / d;
    let mut out = vec![F::zero(); n * m];
    pairwise_sqdist_into(a, b, n, m, d, &mut out);
    Ok(out)
}

pub(crate) fn pairwise_sqdist_into<F: Real>(
    a: &[F],
    b: &[F],
    n: usize,
    m: usize,
    d: usize,
    out: &mut [F],
) {
    let an: Vec<F> = a.chunks_exact(d).map(|r| r.iter().map(|&x| x * x).sum()).collect();
    let bn: Vec<F> = b.chunks_exact(d).map(|r| r.iter().map(|&x| x * x).sum()).collect();
    // out = -2 A Bᵀ
    unsafe {
        F::gemm(
            n,
            d,
            m,
            F::c(-2.0),
            a.as_ptr(),
            d as isize,
            1,
            b.as_ptr(),
            1,
            d as isize,
            F::zero(),
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
    for i in 0..n {
        for j in 0..m {
            let v = &mut out[i * m + j];
            *v = (*v + an[i] + bn[j]).max(F::zero());
        }
    }
}
