use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;
use crate::instrument::Site;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Gradchecks `sum(op(inputs) ⊙ w)` for a fixed random weighting `w`.
fn check<Op>(shapes: &[&[usize]], scale: f64, op: Op)
where
    Op: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("in{i}"), random(s, &mut rng, scale), false))
        .collect();
    // output shape probe for the weighting
    let mut probe = Graph::new();
    let b = store.bind(&mut probe);
    let vars: Vec<_> = ids.iter().map(|&id| b.var(id)).collect();
    let out = op(&mut probe, &vars).unwrap();
    let weights = random(probe.shape(out), &mut rng, 1.0);
    let report = gradcheck(
        &store,
        |g, bound| {
            let vars: Vec<_> = ids.iter().map(|&id| bound.var(id)).collect();
            let y = op(g, &vars)?;
            let w = g.constant(weights.clone());
            let p = g.mul(y, w)?;
            Ok(g.sum(p))
        },
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(
        report.passed(),
        "gradcheck failed: {:?}",
        report.failures().collect::<Vec<_>>()
    );
}

#[test]
fn elementwise_ops() {
    check(&[&[3, 4], &[3, 4]], 1.0, |g, v| g.add(v[0], v[1]));
    check(&[&[3, 4], &[3, 4]], 1.0, |g, v| g.sub(v[0], v[1]));
    check(&[&[3, 4], &[3, 4]], 1.0, |g, v| g.mul(v[0], v[1]));
    check(&[&[2, 3, 4], &[1, 3, 1]], 1.0, |g, v| g.add_b(v[0], v[1]));
    check(&[&[2, 3, 4], &[2, 1, 4]], 1.0, |g, v| g.mul_b(v[0], v[1]));
    check(&[&[5]], 1.0, |g, v| Ok(g.scale(v[0], 2.5)));
    check(&[&[5]], 1.0, |g, v| Ok(g.add_const(v[0], 2.5)));
}

#[test]
fn unary_ops() {
    check(&[&[7]], 1.5, |g, v| Ok(g.neg(v[0])));
    check(&[&[7]], 1.5, |g, v| Ok(g.tanh(v[0])));
    check(&[&[7]], 1.5, |g, v| Ok(g.cosh(v[0])));
    check(&[&[7]], 1.5, |g, v| Ok(g.sinh(v[0])));
    check(&[&[7]], 1.5, |g, v| Ok(g.exp(v[0])));
    check(&[&[7]], 1.5, |g, v| Ok(g.softplus(v[0])));
    check(&[&[7]], 2.5, |g, v| Ok(g.gelu(v[0])));
    check(&[&[7]], 1.5, |g, v| Ok(g.square(v[0])));
    check(&[&[7]], 1.5, |g, v| Ok(g.abs(v[0])));
    // positive-domain ops
    check(&[&[7]], 1.0, |g, v| {
        let s = g.square(v[0]);
        let p = g.add_const(s, 0.5);
        Ok(g.sqrt(p))
    });
    check(&[&[7]], 1.0, |g, v| {
        let s = g.square(v[0]);
        let p = g.add_const(s, 0.5);
        Ok(g.log(p))
    });
    check(&[&[7]], 1.0, |g, v| {
        let s = g.square(v[0]);
        let p = g.add_const(s, 0.5);
        Ok(g.recip(p))
    });
    check(&[&[7]], 1.0, |g, v| {
        let s = g.square(v[0]);
        let p = g.add_const(s, 1.2);
        Ok(g.arccosh(p, 1e-7))
    });
}

#[test]
fn reductions() {
    check(&[&[3, 4]], 1.0, |g, v| Ok(g.sum(v[0])));
    check(&[&[3, 4]], 1.0, |g, v| Ok(g.mean(v[0])));
    check(&[&[3, 4]], 1.0, |g, v| Ok(g.sum_last(v[0])));
    check(&[&[3, 4]], 1.0, |g, v| Ok(g.norm_last(v[0])));
}

#[test]
fn matmul_variants() {
    check(&[&[3, 4], &[4, 5]], 1.0, |g, v| g.matmul(v[0], v[1]));
    check(&[&[3, 4], &[5, 4]], 1.0, |g, v| g.matmul_nt(v[0], v[1]));
    check(&[&[2, 3, 4], &[2, 4, 5]], 1.0, |g, v| g.matmul(v[0], v[1]));
    check(&[&[2, 3, 4], &[2, 5, 4]], 1.0, |g, v| g.matmul_nt(v[0], v[1]));
}

#[test]
fn layout_ops() {
    check(&[&[2, 3, 4]], 1.0, |g, v| g.permute(v[0], &[2, 0, 1]));
    check(&[&[2, 3, 4, 5]], 1.0, |g, v| g.permute(v[0], &[0, 2, 1, 3]));
    check(&[&[2, 3, 4]], 1.0, |g, v| g.reshape(v[0], &[6, 4]));
    check(&[&[2, 5, 3]], 1.0, |g, v| g.narrow(v[0], 1, 1, 3));
    check(&[&[2, 2, 3], &[2, 4, 3]], 1.0, |g, v| g.concat(&[v[0], v[1]], 1));
    check(&[&[2, 4, 3]], 1.0, |g, v| g.index_select(v[0], 1, &[3, 0, 0, 2]));
}

#[test]
fn normalisation_ops() {
    check(&[&[3, 5]], 2.0, |g, v| g.softmax(v[0], None));
    let mask = band_mask::<f64>(4, 1);
    check(&[&[2, 4, 3]], 2.0, move |g, v| g.softmax(v[0], Some(&mask)));
    check(&[&[3, 6]], 2.0, |g, v| Ok(g.layer_norm(v[0], 1e-5)));
    // rows straddling the clip radius on both sides
    check(&[&[6, 3]], 2.0, |g, v| Ok(g.clip_norm(v[0], 1.5)));
}

#[test]
fn lorentz_ops() {
    check(&[&[4, 3]], 1.5, |g, v| Ok(g.exp_origin(v[0], Site::Unscoped)));
    check(&[&[4, 3]], 1.5, |g, v| Ok(g.project_hyperboloid(v[0])));
    check(&[&[4, 3]], 1.5, |g, v| {
        let p = g.project_hyperboloid(v[0]);
        g.log_origin(p, Site::Unscoped)
    });
    // log_o on its own, off-manifold perturbations included
    check(&[&[4, 3]], 1.5, |g, v| {
        let p = g.exp_origin(v[0], Site::Unscoped);
        let q = g.scale(p, 1.1);
        g.log_origin(q, Site::Unscoped)
    });
    check(&[&[5, 3], &[5, 3]], 1.0, |g, v| {
        let a = g.exp_origin(v[0], Site::Unscoped);
        let b = g.exp_origin(v[1], Site::Unscoped);
        g.geodesic_distance_rows(a, b, 1e-7)
    });
}

#[test]
fn attention_kernels() {
    check(&[&[2, 4, 3], &[2, 5, 3]], 1.0, |g, v| g.pairwise_sqdist(v[0], v[1]));
    check(&[&[2, 6, 3], &[2, 6, 3]], 1.0, |g, v| g.band_scores(v[0], v[1], 2));
    check(&[&[2, 6, 5], &[2, 6, 3]], 1.0, |g, v| g.band_apply(v[0], v[1], 2));
}

#[test]
fn forward_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[1, 3]));
    let s = g.softmax(z, None).unwrap();
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let zero = g.constant(Tensor::scalar(0.0));
    let ge = g.gelu(zero);
    assert_eq!(g.value(ge).item(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = g.constant(random(&[3, 4], &mut rng, 1.0));
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    let i3 = g.constant(eye);
    let y = g.matmul(i3, x).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn square_gradient_at_three() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.square(x);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::<f64>::new();
    let x = g.param(random(&[2, 5], &mut rng, 3.0));
    let s = g.softmax(x, None).unwrap();
    let l = g.sum(s);
    let grads = g.backward(l).unwrap();
    for &v in grads.get(x).unwrap() {
        assert!(v.abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn shape_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, b).is_err());
    assert!(g.matmul(a, a).is_err());
    assert!(g.permute(a, &[0, 0]).is_err());
    assert!(g.narrow(a, 1, 2, 2).is_err());
    let r = g.constant(Tensor::zeros(&[3]));
    assert!(g.add_b(a, r).is_err());
}

#[test]
fn untouched_leaves_get_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let unused = g.param(Tensor::zeros(&[4]));
    let y = g.square(x);
    let grads = g.backward(y).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.wrt(unused), Tensor::zeros(&[4]));
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = random(&[4, 3], &mut rng, 1.0);
    let grad_of = |a: f64, b: f64| {
        let mut g = Graph::<f64>::new();
        let x = g.param(x0.clone());
        let t = g.tanh(x);
        let f = g.sum(t);
        let e = g.exp_origin(x, Site::Unscoped);
        let gsum = g.sum(e);
        let fa = g.scale(f, a);
        let gb = g.scale(gsum, b);
        let l = g.add(fa, gb).unwrap();
        g.backward(l).unwrap().wrt(x)
    };
    let gf = grad_of(1.0, 0.0);
    let gg = grad_of(0.0, 1.0);
    let combo = grad_of(2.0, -3.0);
    for i in 0..combo.numel() {
        let expect = 2.0 * gf.data()[i] - 3.0 * gg.data()[i];
        assert!((combo.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn norm_squared_passes_tight_gradcheck() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let id = store.add("theta", random(&[6], &mut rng, 2.0), false);
    let report = gradcheck(
        &store,
        |g, b| {
            let s = g.square(b.var(id));
            Ok(g.sum(s))
        },
        1e-4,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.params);
}

#[test]
fn gradcheck_names_non_finite_op() {
    let mut store = ParamStore::new();
    let id = store.add("theta", Tensor::scalar(-1.0), false);
    let err = gradcheck(
        &store,
        |g, b| Ok(g.log(b.var(id))),
        1e-4,
        1e-6,
    )
    .unwrap_err();
    assert!(err.to_string().contains("log"), "{err}");
}

#[test]
fn distance_through_exp_gradchecks() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = store.add("a", random(&[3, 4], &mut rng, 1.0), false);
    let b = store.add("b", random(&[3, 4], &mut rng, 1.0), false);
    let report = gradcheck(
        &store,
        |g, bd| {
            let x = g.exp_origin(bd.var(a), Site::Unscoped);
            let y = g.exp_origin(bd.var(b), Site::Unscoped);
            let d = g.geodesic_distance_rows(x, y, 1e-7)?;
            Ok(g.sum(d))
        },
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.params);
}

#[test]
fn gradients_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = random(&[5, 4], &mut rng, 1.0);
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.param(x0.cast());
        let e = g.exp_origin(x, Site::Unscoped);
        let s = g.softmax(e, None).unwrap();
        let l = g.sum(s);
        let n = g.norm_last(x);
        let m = g.sum(n);
        let t = g.add(l, m).unwrap();
        g.backward(t).unwrap().wrt(x)
    };
    let a = run();
    let b = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
