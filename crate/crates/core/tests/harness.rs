use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hyperpose::harness::{bench_attention, driftwatch, generate, MotionGenerator, SyntheticSpec};
use hyperpose::lorentz::{exp_origin, TangentVector};
use hyperpose::metrics::{map_retrieval, procrustes};
use hyperpose::network::{Model, ModelConfig};
use hyperpose::skeleton::Skeleton;

#[test]
fn gait_autocorrelation_peaks_at_period() {
    let spec = SyntheticSpec {
        generator: MotionGenerator::GaitSine,
        frames: 120,
        sequences: 3,
        period: 24.0,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let ds = generate(&spec).unwrap();
    for seq in &ds.sequences {
        let y = seq.targets.cast::<f64>();
        let (t_len, width) = (spec.frames, y.data().len() / spec.frames);
        let mean: Vec<f64> = (0..width)
            .map(|c| (0..t_len).map(|t| y.data()[t * width + c]).sum::<f64>() / t_len as f64)
            .collect();
        let centred: Vec<f64> = y.data().iter().enumerate().map(|(i, v)| v - mean[i % width]).collect();
        let acf = |lag: usize| -> f64 {
            (0..t_len - lag)
                .map(|t| {
                    (0..width)
                        .map(|c| centred[t * width + c] * centred[(t + lag) * width + c])
                        .sum::<f64>()
                })
                .sum::<f64>()
                / (t_len - lag) as f64
        };
        let best = (6..=48).max_by(|&a, &b| acf(a).total_cmp(&acf(b))).unwrap();
        assert!(best == 24 || best == 48, "autocorrelation peak at lag {best}");
        assert!((acf(24) - acf(48)).abs() <= 1e-6 * acf(0));
        assert!(acf(12) < acf(24));
    }
}

#[test]
fn synthetic_files_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        generator: MotionGenerator::RandomSmoothSpline,
        seed: 42,
        pixel_noise: 2.0,
        ..SyntheticSpec::default()
    };
    let (a, b) = (dir.path().join("a.hpse"), dir.path().join("b.hpse"));
    generate(&spec).unwrap().save(&a).unwrap();
    generate(&spec).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let other = SyntheticSpec { seed: 43, ..spec };
    generate(&other).unwrap().save(&b).unwrap();
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

/// Umeyama alignment through nalgebra's SVD.
fn umeyama(src: &[f64], dst: &[f64]) -> (Matrix3<f64>, f64, Vector3<f64>) {
    let n = src.len() / 3;
    let p = |v: &[f64], i: usize| Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
    let mx = (0..n).map(|i| p(src, i)).sum::<Vector3<f64>>() / n as f64;
    let my = (0..n).map(|i| p(dst, i)).sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for i in 0..n {
        let (x, y) = (p(src, i) - mx, p(dst, i) - my);
        cov += y * x.transpose();
        var += x.norm_squared();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var;
    (r, scale, my - scale * r * mx)
}

#[test]
fn procrustes_matches_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let src: Vec<f64> = (0..17 * 3).map(|_| rng.random_range(-500.0..500.0)).collect();
        let dst: Vec<f64> = (0..17 * 3).map(|_| rng.random_range(-500.0..500.0)).collect();
        let ours = procrustes(&src, &dst).unwrap();
        let (r, s, t) = umeyama(&src, &dst);
        for i in 0..3 {
            for k in 0..3 {
                assert!((ours.rotation[i][k] - r[(i, k)]).abs() < 1e-9);
            }
            assert!((ours.translation[i] - t[i]).abs() < 1e-6);
        }
        assert!((ours.scale - s).abs() < 1e-9 * s.max(1.0));
    }
}

/// Average precision by explicit rank counting.
fn brute_force_map(points: &[f64], width: usize, labels: &[usize], groups: &[usize]) -> f64 {
    let n = labels.len();
    let dist = |a: usize, b: usize| {
        let (x, y) = (&points[a * width..(a + 1) * width], &points[b * width..(b + 1) * width]);
        let inner = -x[0] * y[0] + x[1..].iter().zip(&y[1..]).map(|(p, q)| p * q).sum::<f64>();
        (-inner).max(1.0).acosh()
    };
    let mut sum = 0.0;
    for q in 0..n {
        let ahead = |c: usize, o: usize| {
            let (dc, dd) = (dist(q, c), dist(q, o));
            dd < dc || (dd == dc && o < c)
        };
        let cands: Vec<usize> = (0..n).filter(|&i| groups[i] != groups[q]).collect();
        let relevant: Vec<usize> = cands.iter().copied().filter(|&i| labels[i] == labels[q]).collect();
        let mut ap = 0.0;
        for &r in &relevant {
            let rank = 1 + cands.iter().filter(|&&o| ahead(r, o)).count();
            let hits = 1 + relevant.iter().filter(|&&o| ahead(r, o)).count();
            ap += hits as f64 / rank as f64;
        }
        sum += ap / relevant.len() as f64;
    }
    100.0 * sum / n as f64
}

#[test]
fn random_embeddings_give_chance_retrieval() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (frames, joints, d) = (30, 17, 8);
    let mut points = Vec::new();
    let (mut labels, mut groups) = (Vec::new(), Vec::new());
    for f in 0..frames {
        for j in 0..joints {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            points.extend_from_slice(exp_origin(&TangentVector::new(v)).coords());
            labels.push(j);
            groups.push(f);
        }
    }
    let map = map_retrieval(&points, d + 1, &labels, &groups).unwrap();
    let oracle = brute_force_map(&points, d + 1, &labels, &groups);
    assert!((map - oracle).abs() < 1e-9, "{map} vs {oracle}");
    let chance = 100.0 / joints as f64;
    assert!((map - chance).abs() < 0.5 * chance, "MAP {map:.2}% vs chance {chance:.2}%");
}

#[test]
fn banded_count_grows_linearly_in_frames() {
    let rows = bench_attention(&[27, 54, 81, 108], &[9], 8, 2, 2, 0).unwrap();
    let c: Vec<u64> = rows.iter().map(|r| r.banded_macs).collect();
    assert_eq!(c[1] - c[0], c[2] - c[1]);
    assert_eq!(c[2] - c[1], c[3] - c[2]);
    // doubling T doubles the count up to the clipped band edges
    let ratio = c[3] as f64 / c[1] as f64;
    assert!(ratio > 2.0 && ratio < 2.1, "ratio {ratio}");
    let dense = rows[3].dense_macs as f64 / rows[1].dense_macs as f64;
    assert!((dense - 4.0).abs() < 1e-12);
}

#[test]
fn fp64_forward_drift_is_at_rounding_level() {
    let data = generate(&SyntheticSpec {
        sequences: 2,
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let model = Model::<f64>::new(ModelConfig::desk(), &Skeleton::h36m(), 5).unwrap();
    let drift = driftwatch(&model, &data).unwrap();
    assert!(drift.max() <= 1e-12, "fp64 drift {:.3e}", drift.max());
    let model32 = Model::<f32>::new(ModelConfig::desk(), &Skeleton::h36m(), 5).unwrap();
    assert!(driftwatch(&model32, &data).unwrap().max() <= 1e-2);
}
