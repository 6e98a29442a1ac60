//! Central finite-difference verification of tape gradients.

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::real::Real;

/// Worst disagreement for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// max over elements of |g_ad − g_fd| / max(1, |g_fd|).
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_error > self.tolerance)
    }
}

fn eval<F: Real, L>(params: &ParamStore<F>, loss_fn: &L) -> Result<(Graph<F>, Bound, Var)>
where
    L: Fn(&mut Graph<F>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = loss_fn(&mut g, &bound)?;
    if let Some((node, op)) = g.first_non_finite() {
        return Err(Error::Diagnostic(format!(
            "non-finite value produced by `{op}` (node {node})"
        )));
    }
    Ok((g, bound, loss))
}

/// Compares tape gradients of `loss_fn` against central differences with
/// step `h`, perturbing every scalar of every parameter.
pub fn gradcheck<F: Real, L>(
    params: &ParamStore<F>,
    loss_fn: L,
    h: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    L: Fn(&mut Graph<F>, &Bound) -> Result<Var>,
{
    let (g, bound, loss) = eval(params, &loss_fn)?;
    let grads = g.backward(loss)?;
    let analytic = bound.collect(&grads);
    drop(g);

    let mut work = params.clone();
    let mut checks = Vec::with_capacity(params.len());
    for (id, ad) in params.ids().zip(&analytic) {
        let name = params.get(id).name.clone();
        let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
        for i in 0..ad.numel() {
            let orig = work.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + F::c(h);
            let (gp, _, lp) = eval(&work, &loss_fn)?;
            let fp = gp.value(lp).item().as_f64();
            work.get_mut(id).value.data_mut()[i] = orig - F::c(h);
            let (gm, _, lm) = eval(&work, &loss_fn)?;
            let fm = gm.value(lm).item().as_f64();
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = ad.data()[i].as_f64();
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if !rel.is_finite() {
                return Err(Error::Diagnostic(format!(
                    "non-finite gradient comparison for {name}[{i}]"
                )));
            }
            if rel > worst.0 || i == 0 {
                worst = (rel, i, a, numeric);
            }
        }
        checks.push(ParamCheck {
            name,
            numel: ad.numel(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            analytic: worst.2,
            numeric: worst.3,
        });
    }
    Ok(GradcheckReport {
        step: h,
        tolerance: tol,
        params: checks,
    })
}
