//! Acceptance criteria 1–10. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line regardless of output capture.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hyperpose::attention::{lorentz_proximity_logit, TemporalAttention};
use hyperpose::autodiff::{Graph, ParamStore, Tensor};
use hyperpose::harness::{self, evaluate, generate, toy_gradcheck, Precision, SyntheticSpec, TrainConfig, TrainOutcome};
use hyperpose::instrument::{self, Site};
use hyperpose::lorentz::{
    drift_bound, exp_origin, geodesic_distance, log_origin, lorentz_inner_unchecked, parallel_transport,
    project_hyperboloid, LorentzPoint, StabilityConfig, TangentVector,
};
use hyperpose::losses::{curriculum_weight, loss_mpjpe, loss_terms, loss_velocity, total_loss, LossConfig};
use hyperpose::metrics::{mpjpe, n_mpjpe, p_mpjpe, procrustes, Similarity};
use hyperpose::network::{Model, ModelConfig};
use hyperpose::skeleton::Skeleton;

/// Outcome of one criterion.
struct Verdict {
    pass: bool,
    /// Failing only on a documented sub-check that cannot hold as stated.
    known: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            known: false,
            detail: detail.into(),
        }
    }

    fn known_if(mut self, known: bool) -> Self {
        self.known = !self.pass && known;
        self
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_dir(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm(&v);
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn random_point(rng: &mut ChaCha8Rng, d: usize, max_r: f64) -> LorentzPoint<f64> {
    let r = rng.random_range(0.0..max_r);
    let v: Vec<f64> = random_dir(rng, d).iter().map(|x| x * r).collect();
    exp_origin(&TangentVector::new(v))
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut roundtrip = 0.0f64;
    for i in 0..2000 {
        let d = [2, 3, 8, 64][i % 4];
        let r = if i % 10 == 0 { rng.random_range(0.0..1e-5) } else { rng.random_range(0.0..5.0) };
        let v: Vec<f64> = random_dir(&mut rng, d).iter().map(|x| x * r).collect();
        let back = log_origin(&exp_origin(&TangentVector::new(v.clone())));
        let err: Vec<f64> = back.spatial().iter().zip(&v).map(|(a, b)| a - b).collect();
        if r > 0.0 {
            roundtrip = roundtrip.max(norm(&err) / r);
        }
    }
    let mut closure = 0.0f64;
    for i in 0..2000 {
        let d = [3, 16, 64][i % 3];
        let r = rng.random_range(0.0..10.0);
        let phi: Vec<f64> = random_dir(&mut rng, d).iter().map(|x| x * r).collect();
        closure = closure.max(project_hyperboloid(&phi).drift());
    }
    let cfg = StabilityConfig::default();
    let (mut tangency, mut isometry) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let x = random_point(&mut rng, 4, 3.0);
        let y = random_point(&mut rng, 4, 3.0);
        let u: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c = lorentz_inner_unchecked(x.coords(), &u);
        let v: Vec<f64> = u.iter().zip(x.coords()).map(|(a, b)| a + c * b).collect();
        let pv = parallel_transport(&x, &y, &v, &cfg).expect("tangent input");
        let nv = lorentz_inner_unchecked(&v, &v).sqrt();
        tangency = tangency.max(lorentz_inner_unchecked(y.coords(), &pv).abs() / nv.max(1.0));
        let npv = lorentz_inner_unchecked(&pv, &pv).sqrt();
        isometry = isometry.max((npv - nv).abs() / nv.max(1.0));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = roundtrip <= 1e-9 && closure <= 1e-12 && tangency <= 1e-9 && isometry <= 1e-9 && secs < 5.0;
    Verdict::new(
        pass,
        format!(
            "roundtrip rel {roundtrip:.2e}, closure {closure:.2e}, transport tangency {tangency:.2e} isometry {isometry:.2e}, {secs:.2}s"
        ),
    )
}

fn criterion_2(train_drift: f64) -> Verdict {
    let c3 = 3f64.cosh();
    let c15 = 15f64.cosh();
    let ok3 = (10.0..=10.1).contains(&c3);
    let ok15 = (c15 / 1.6e6 - 1.0).abs() <= 0.02;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut drift32 = 0.0f64;
    for _ in 0..200 {
        let v: Vec<f32> = random_dir(&mut rng, 512).iter().map(|x| (x * 5.0) as f32).collect();
        drift32 = drift32.max(exp_origin(&TangentVector::new(v)).drift() as f64);
    }
    let bound = drift_bound(512, f32::EPSILON as f64, 5.0);
    let ok_drift = drift32 <= 3.4e-1;
    let ok_train = train_drift <= 1e-2;
    let verdict = Verdict::new(
        ok3 && ok15 && ok_drift && ok_train,
        format!(
            "cosh(3) = {c3:.4} [{}]; cosh(15) = {c15:.6e}, {:+.2}% from 1.6e6 [{}]; fp32 exp_o drift (R=5, d=512) {drift32:.2e} ≤ 3.4e-1 [{}] (d·ε·cosh²R = {bound:.2e}); desk training drift {train_drift:.2e} ≤ 1e-2 [{}]",
            ok(ok3),
            100.0 * (c15 / 1.6e6 - 1.0),
            ok(ok15),
            ok(ok_drift),
            ok(ok_train)
        ),
    );
    verdict.known_if(ok3 && ok_drift && ok_train)
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - (my + slope * (a - mx))).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // banded with W ≥ T − 1 against dense
    let mut max_diff = 0.0f64;
    for t_len in 1usize..=8 {
        for w in [t_len.saturating_sub(1).max(1), t_len + 3] {
            let mut store = ParamStore::<f64>::new();
            let attn = TemporalAttention::init(&mut store, &mut rng, "t", 8, 2, w).unwrap();
            let h = Tensor::<f64>::uniform(&[t_len, 3, 8], 1.5, &mut rng);
            let a = attn.evaluate(&store, &h).unwrap();
            let b = attn.evaluate_dense(&store, &h).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
    }
    // proximity logit ordering against geodesic distance ordering
    let mut agree = 0;
    for _ in 0..1000 {
        let q = random_point(&mut rng, 16, 3.0);
        let k1 = random_point(&mut rng, 16, 3.0);
        let k2 = random_point(&mut rng, 16, 3.0);
        let tau = rng.random_range(0.1..4.0);
        let by_logit = lorentz_proximity_logit(&q, &k1, tau) > lorentz_proximity_logit(&q, &k2, tau);
        let by_dist = geodesic_distance(&q, &k1) < geodesic_distance(&q, &k2);
        agree += usize::from(by_logit == by_dist);
    }
    // instrumented banded cost is linear in T
    let mut store = ParamStore::<f32>::new();
    let attn = TemporalAttention::init(&mut store, &mut rng, "t", 8, 2, 13).unwrap();
    let frames: Vec<usize> = (1..=9).map(|k| 27 * k).collect();
    let mut counts = Vec::new();
    for &t_len in &frames {
        let h = Tensor::<f32>::uniform(&[t_len, 1, 8], 1.0, &mut rng);
        instrument::reset();
        attn.evaluate(&store, &h).unwrap();
        counts.push(instrument::snapshot().band_macs as f64);
    }
    let xs: Vec<f64> = frames.iter().map(|&t| t as f64).collect();
    let r2 = linear_r2(&xs, &counts);
    let pass = max_diff <= 1e-6 && agree == 1000 && r2 >= 0.999;
    Verdict::new(
        pass,
        format!(
            "band vs dense max |Δ| {max_diff:.2e} (T ≤ 8); logit/distance ordering agreement {agree}/1000; banded MAC count vs T (W=13, T=27..243) R² = {r2:.6}"
        ),
    )
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let report = toy_gradcheck(4, 1e-6, 1e-3).expect("toy gradcheck runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = report
        .params
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("parameters exist");
    let scalars: usize = report.params.iter().map(|p| p.numel).sum();
    Verdict::new(
        report.passed() && secs < 60.0,
        format!(
            "{} tensors / {scalars} scalars, worst rel error {:.2e} ({}), {secs:.1}s",
            report.params.len(),
            worst.max_rel_error,
            worst.name
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = LossConfig::default();
    let vel = |pred: &Tensor<f64>, gt: &Tensor<f64>| -> f64 {
        let mut g = Graph::<f64>::new();
        let p = g.constant(pred.clone());
        let y = g.constant(gt.clone());
        let l = loss_velocity(&mut g, p, y, &cfg).unwrap();
        g.value(l).item()
    };
    let steps = |x: &Tensor<f64>, t_len: usize, j: usize| -> Vec<f64> {
        let lift = |t: usize, jj: usize| {
            let o = (t * j + jj) * 3;
            project_hyperboloid(&x.data()[o..o + 3].iter().map(|v| v * cfg.lift_scale).collect::<Vec<_>>())
        };
        (0..t_len - 1)
            .flat_map(|t| (0..j).map(move |jj| (t, jj)))
            .map(|(t, jj)| geodesic_distance(&lift(t, jj), &lift(t + 1, jj)))
            .collect()
    };
    let (mut zero_ok, mut pos_ok) = (0, 0);
    let mut worst_zero = 0.0f64;
    let mut min_pos = f64::INFINITY;
    for _ in 0..500 {
        let t_len = rng.random_range(2..12);
        let j = rng.random_range(1..18);
        let gt = Tensor::<f64>::uniform(&[t_len, j, 3], 800.0, &mut rng);
        // a per-joint sign-flip isometry preserves every displacement exactly
        let signs: Vec<[f64; 3]> = (0..j)
            .map(|_| std::array::from_fn(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }))
            .collect();
        let mut same = gt.clone();
        for (i, px) in same.data_mut().chunks_exact_mut(3).enumerate() {
            for k in 0..3 {
                px[k] *= signs[i % j][k];
            }
        }
        let l0 = vel(&same, &gt);
        worst_zero = worst_zero.max(l0);
        zero_ok += usize::from(l0 == 0.0);

        // move one joint in one frame until some displacement changes by ≥ 1e-3
        let mut moved = same.clone();
        let (t0, j0) = (rng.random_range(0..t_len), rng.random_range(0..j));
        let dir = random_dir(&mut rng, 3);
        let mut mag = 2.0;
        loop {
            let o = (t0 * j + j0) * 3;
            for k in 0..3 {
                moved.data_mut()[o + k] = same.data()[o + k] + mag * dir[k];
            }
            let dev = steps(&moved, t_len, j)
                .iter()
                .zip(steps(&gt, t_len, j))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if dev >= 1e-3 {
                break;
            }
            mag *= 1.5;
        }
        let l1 = vel(&moved, &gt);
        min_pos = min_pos.min(l1);
        pos_ok += usize::from(l1 > 1e-8);
    }
    Verdict::new(
        zero_ok == 500 && pos_ok == 500,
        format!(
            "equal displacements → L_vel = 0 in {zero_ok}/500 (max {worst_zero:.1e}); a displacement off by ≥ 1e-3 → L_vel > 1e-8 in {pos_ok}/500 (min {min_pos:.2e})"
        ),
    )
}

fn criterion_6() -> Verdict {
    let zero = (0..=9).all(|e| curriculum_weight(e) == 0.0);
    let full = curriculum_weight(20) == 1.0;

    let skel = Skeleton::h36m();
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pred0 = Tensor::<f64>::uniform(&[5, 17, 3], 700.0, &mut rng);
    let gt = Tensor::<f64>::uniform(&[5, 17, 3], 700.0, &mut rng);
    let sig0 = Tensor::<f64>::from_f64(&[3], &[0.2, -0.4, 0.7]).unwrap();

    // at ω(e) = 0 the full objective has the same pose gradient as the
    // MPJPE-only objective, and d/ds_v = d/ds_b = ½ from the regulariser alone
    let mut grads_zero = true;
    for e in 0..=9 {
        let omega = curriculum_weight(e);
        let mut g = Graph::<f64>::new();
        let p = g.param(pred0.clone());
        let s = g.param(sig0.clone());
        let y = g.constant(gt.clone());
        let terms = loss_terms(&mut g, p, y, &skel, &cfg).unwrap();
        let total = total_loss(&mut g, &terms, s, omega).unwrap();
        let gr = g.backward(total).unwrap();

        let mut h = Graph::<f64>::new();
        let p2 = h.param(pred0.clone());
        let y2 = h.constant(gt.clone());
        let lm = loss_mpjpe(&mut h, p2, y2).unwrap();
        let w = h.constant(Tensor::scalar((-0.2f64).exp() * 0.5));
        let only = h.mul(lm, w).unwrap();
        let gr2 = h.backward(only).unwrap();
        grads_zero &= gr.wrt(p).data() == gr2.wrt(p2).data();
        let ds = gr.wrt(s);
        grads_zero &= ds.data()[1] == 0.5 && ds.data()[2] == 0.5;
    }

    // Kendall stationarity: log σ²_k = log L_k makes d total / d log σ²_k vanish
    let mut g = Graph::<f64>::new();
    let p = g.constant(pred0.clone());
    let y = g.constant(gt.clone());
    let terms = loss_terms(&mut g, p, y, &skel, &cfg).unwrap();
    let ls: Vec<f64> = [terms.mpjpe, terms.velocity, terms.bone]
        .iter()
        .map(|&v| g.value(v).item().ln())
        .collect();
    let s = g.param(Tensor::from_f64(&[3], &ls).unwrap());
    let total = total_loss(&mut g, &terms, s, 1.0).unwrap();
    let gr = g.backward(total).unwrap();
    let stat = gr.wrt(s).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));

    Verdict::new(
        zero && full && grads_zero && stat <= 1e-6,
        format!(
            "ω(0..=9) = 0 [{}], ω(20) = 1 [{}]; geodesic-term gradients exactly zero for e ≤ 9 [{}]; max |∂total/∂log σ²| at σ² = L: {stat:.2e}",
            ok(zero),
            ok(full),
            ok(grads_zero)
        ),
    )
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q = random_dir(rng, 4);
    let [w, x, y, z] = [q[0], q[1], q[2], q[3]];
    [
        [1. - 2. * (y * y + z * z), 2. * (x * y - w * z), 2. * (x * z + w * y)],
        [2. * (x * y + w * z), 1. - 2. * (x * x + z * z), 2. * (y * z - w * x)],
        [2. * (x * z - w * y), 2. * (y * z + w * x), 1. - 2. * (x * x + y * y)],
    ]
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let base = generate(&SyntheticSpec {
        generator: harness::MotionGenerator::RandomSmoothSpline,
        sequences: 200,
        frames: 4,
        seed: 7,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let (mut ordered, mut sse_ordered) = (0, 0);
    let mut worst = 0.0f64;
    for s in &base.sequences {
        let gt = s.targets.cast::<f64>();
        let scale = rng.random_range(0.7..1.3);
        let sigma = rng.random_range(1.0..80.0);
        let mut pred = gt.clone();
        for v in pred.data_mut() {
            *v = *v * scale + sigma * rng.random_range(-1.0..1.0);
        }
        let m = mpjpe(&pred, &gt).unwrap();
        let n = n_mpjpe(&pred, &gt).unwrap().value;
        let p = p_mpjpe(&pred, &gt).unwrap().value;
        ordered += usize::from(p <= n && n <= m);
        worst = worst.max(p - n).max(n - m);
        sse_ordered += usize::from(squared_errors_ordered(&pred, &gt));
    }
    let mut planted = 0.0f64;
    let mut param_err = 0.0f64;
    for s in base.sequences.iter().take(50) {
        let gt = s.targets.cast::<f64>();
        let sim = Similarity {
            rotation: random_rotation(&mut rng),
            scale: rng.random_range(0.5..2.0),
            translation: std::array::from_fn(|_| rng.random_range(-500.0..500.0)),
        };
        let src: Vec<f64> = gt.data().chunks_exact(3).flat_map(|r| sim.apply([r[0], r[1], r[2]])).collect();
        let pred = Tensor::new(gt.shape().to_vec(), src).unwrap();
        planted = planted.max(p_mpjpe(&pred, &gt).unwrap().value);
        // the recovered transform inverts the planted one
        let frame = &pred.data()[..17 * 3];
        let back = procrustes(frame, &gt.data()[..17 * 3]).unwrap();
        param_err = param_err.max((back.scale * sim.scale - 1.0).abs());
    }
    let recovered = planted <= 1e-8 && param_err <= 1e-8;
    let verdict = Verdict::new(
        ordered == 200 && recovered,
        format!(
            "p ≤ n ≤ mpjpe on {ordered}/200 samples (worst violation {worst:.2e} mm); per-frame squared-error ordering on {sse_ordered}/200; planted similarity residual {planted:.2e} mm, scale recovery error {param_err:.2e}"
        ),
    );
    verdict.known_if(recovered && sse_ordered == 200)
}

/// Per frame, the least-squares objective each alignment minimises must
/// order as similarity ≤ scale ≤ identity.
fn squared_errors_ordered(pred: &Tensor<f64>, gt: &Tensor<f64>) -> bool {
    let sse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    pred.data().chunks_exact(17 * 3).zip(gt.data().chunks_exact(17 * 3)).all(|(pf, gf)| {
        let m = sse(pf, gf);
        let s = pf.iter().zip(gf).map(|(a, b)| a * b).sum::<f64>() / pf.iter().map(|a| a * a).sum::<f64>();
        let scaled: Vec<f64> = pf.iter().map(|v| v * s).collect();
        let n = sse(&scaled, gf);
        let sim = procrustes(pf, gf).unwrap();
        let aligned: Vec<f64> = pf.chunks_exact(3).flat_map(|r| sim.apply([r[0], r[1], r[2]])).collect();
        let p = sse(&aligned, gf);
        let tol = 1e-9 * m.max(1.0);
        p <= n + tol && n <= m + tol
    })
}

/// Overfit settings: four sequences, no augmentation, dropout or weight
/// decay, batches of two at a raised learning rate.
fn overfit_configs() -> (TrainConfig, ModelConfig, SyntheticSpec) {
    let train = TrainConfig {
        lr: 2e-3,
        batch_size: 2,
        epochs: 200,
        weight_decay: 0.0,
        hflip: false,
        confidence_dropout: 0.0,
        precision: Precision::F32,
        seed: 11,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::desk()
    };
    let data = SyntheticSpec {
        sequences: 4,
        frames: 27,
        seed: 11,
        ..SyntheticSpec::default()
    };
    (train, model, data)
}

fn criterion_8(out: &TrainOutcome<f32>, secs: f64, warmup: usize) -> Verdict {
    let curve: Vec<f64> = out.epochs.iter().map(|e| e.loss_mpjpe).collect();
    let final_mpjpe = out.epochs.last().map_or(f64::NAN, |e| e.train_mpjpe);
    // means over consecutive 10-epoch windows after warmup must decrease
    let windows: Vec<f64> = curve[warmup..]
        .chunks(10)
        .filter(|c| c.len() == 10)
        .map(|c| c.iter().sum::<f64>() / 10.0)
        .collect();
    let rises = windows.windows(2).filter(|w| w[1] > w[0]).count();
    Verdict::new(
        final_mpjpe < 5.0 && secs < 600.0 && rises == 0,
        format!(
            "training MPJPE after {} epochs {final_mpjpe:.3} mm (< 5), {secs:.0}s (< 600); 10-epoch window means after warmup: {} windows, {rises} increases",
            out.epochs.len(),
            windows.len()
        ),
    )
}

fn criterion_9() -> Verdict {
    let data = generate(&SyntheticSpec {
        sequences: 3,
        frames: 9,
        seed: 9,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 2,
        precision: Precision::F64,
        seed: 9,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        dim: 32,
        frames: 9,
        ..ModelConfig::desk()
    };
    let run = || -> String {
        let out = harness::train::<f64>(&cfg, &model, &data, None, None).unwrap();
        evaluate(&out.model, &data, true).unwrap().to_csv()
    };
    let (a, b) = (run(), run());
    Verdict::new(
        a.as_bytes() == b.as_bytes(),
        format!("two seeded fp64 train+eval runs → {} and {} CSV bytes, identical: {}", a.len(), b.len(), a == b),
    )
}

fn criterion_10() -> Verdict {
    let cfg = ModelConfig::desk();
    let model = Model::<f64>::new(cfg.clone(), &Skeleton::h36m(), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::<f64>::uniform(&[cfg.frames, cfg.joints, 3], 0.8, &mut rng);
    instrument::reset();
    model.predict(&x).unwrap();
    let c = instrument::snapshot();
    let lifts = (cfg.frames * cfg.joints * cfg.heads * cfg.spatial_blocks) as u64;
    let exp_only_qk = Site::ALL
        .iter()
        .filter(|s| !matches!(s, Site::HkpsaQuery | Site::HkpsaKey))
        .all(|&s| c.exp_at(s) == 0);
    let log_only_embed = Site::ALL
        .iter()
        .filter(|&&s| s != Site::Embedding)
        .all(|&s| c.log_at(s) == 0);
    let counts = c.exp_at(Site::HkpsaQuery) == lifts
        && c.exp_at(Site::HkpsaKey) == lifts
        && c.log_at(Site::Embedding) == (cfg.frames * cfg.joints) as u64;
    Verdict::new(
        exp_only_qk && log_only_embed && counts,
        format!(
            "exp_o calls: {} query + {} key lifts, {} elsewhere; log_o calls: {} in embedding, {} elsewhere",
            c.exp_at(Site::HkpsaQuery),
            c.exp_at(Site::HkpsaKey),
            c.total_exp() - c.exp_at(Site::HkpsaQuery) - c.exp_at(Site::HkpsaKey),
            c.log_at(Site::Embedding),
            c.total_log() - c.log_at(Site::Embedding)
        ),
    )
}

fn main() -> ExitCode {
    let (train_cfg, model_cfg, data_spec) = overfit_configs();
    let data = generate(&data_spec).expect("synthetic data");
    let t0 = Instant::now();
    let overfit = harness::train::<f32>(&train_cfg, &model_cfg, &data, None, None).expect("overfit run");
    let overfit_secs = t0.elapsed().as_secs_f64();
    let train_drift = overfit.epochs.iter().map(|e| e.drift).fold(0.0, f64::max);

    let results: Vec<(usize, Verdict)> = vec![
        (1, criterion_1()),
        (2, criterion_2(train_drift)),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
        (6, criterion_6()),
        (7, criterion_7()),
        (8, criterion_8(&overfit, overfit_secs, train_cfg.warmup_epochs)),
        (9, criterion_9()),
        (10, criterion_10()),
    ];
    let mut fatal = false;
    for (n, v) in &results {
        let status = if v.pass { "PASS" } else { "FAIL" };
        let note = if v.known { " (known, documented)" } else { "" };
        println!("criterion {n:>2}: {status}{note} - {}", v.detail);
        fatal |= !v.pass && !v.known;
    }
    if fatal {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
