//! Checkpoint evaluation, drift monitoring, the attention cost benchmark
//! and the toy-model gradient check.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_entropy, band_macs, dense_macs, TemporalAttention};
use crate::autodiff::{gradcheck, Graph, GradcheckReport, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::instrument;
use crate::layers::Dropout;
use crate::lorentz::exp_origin_into;
use crate::losses::{curriculum_weight, loss_terms, total_loss, LossConfig, Uncertainty};
use crate::metrics::{distortion_ratio, map_retrieval, sequence_metrics, Diagnostics, MetricReport};
use crate::network::{Model, ModelConfig};
use crate::real::Real;
use crate::skeleton::Skeleton;

fn check_compatible<F: Real>(model: &Model<F>, data: &Dataset) -> Result<()> {
    if model.config().joints != data.joints() {
        return Err(Error::Config(format!(
            "model expects {} joints, dataset has {}",
            model.config().joints,
            data.joints()
        )));
    }
    if model.skeleton().to_file().parents != data.skeleton.to_file().parents {
        return Err(Error::Config("model and dataset skeletons differ".into()));
    }
    Ok(())
}

/// Diagnostic columns for one sequence from a traced forward pass.
fn diagnostics<F: Real>(
    model: &Model<F>,
    inputs: &Tensor<F>,
    spatial: &[Tensor<F>],
    temporal: &[Tensor<F>],
) -> Result<Diagnostics> {
    let _site = instrument::enter(instrument::Site::Diagnostic);
    let skeleton = model.skeleton();
    let tangent = model.embedding().embed_positions(&model.params, inputs)?.to_f64_vec();
    let (t_len, j, d) = (inputs.shape()[0], skeleton.num_joints(), model.config().dim);
    let width = d + 1;
    let mut points = vec![0.0; t_len * j * width];
    for (v, p) in tangent.chunks_exact(d).zip(points.chunks_exact_mut(width)) {
        exp_origin_into(v, p);
    }
    let mut distortion = 0.0;
    for frame in points.chunks_exact(j * width) {
        distortion += distortion_ratio(frame, width, skeleton)?;
    }
    distortion /= t_len as f64;
    let labels: Vec<usize> = (0..t_len * j).map(|i| i % j).collect();
    let groups: Vec<usize> = (0..t_len * j).map(|i| i / j).collect();
    let map = if t_len > 1 {
        map_retrieval(&points, width, &labels, &groups)?
    } else {
        f64::NAN
    };
    let mean_entropy = |ws: &[Tensor<F>]| -> Result<f64> {
        let mut s = 0.0;
        for w in ws {
            let row = *w.shape().last().expect("rank ≥ 1");
            s += attention_entropy(w.data(), row)?;
        }
        Ok(s / ws.len().max(1) as f64)
    };
    Ok(Diagnostics {
        distortion,
        map,
        spatial_entropy: mean_entropy(spatial)?,
        temporal_entropy: mean_entropy(temporal)?,
    })
}

/// Per-sequence metrics of `model` on `data`, plus diagnostics when asked.
/// Sequences are named `seq000`, `seq001`, ….
pub fn evaluate<F: Real>(model: &Model<F>, data: &Dataset, with_diagnostics: bool) -> Result<MetricReport> {
    check_compatible(model, data)?;
    let mut rows = Vec::with_capacity(data.len());
    for (i, s) in data.sequences.iter().enumerate() {
        let s = s.cast::<F>();
        let (pred, trace) = model.predict_traced(&s.inputs)?;
        let mut row = sequence_metrics(&format!("seq{i:03}"), &pred.cast::<f64>(), &s.targets.cast::<f64>(), &data.skeleton)?;
        if with_diagnostics {
            row.diagnostics = Some(diagnostics(model, &s.inputs, &trace.spatial_weights, &trace.temporal_weights)?);
        }
        rows.push(row);
    }
    Ok(MetricReport { rows })
}

/// Metrics with the ground truth used as the prediction.
pub fn evaluate_identity(data: &Dataset) -> Result<MetricReport> {
    let rows = data
        .sequences
        .iter()
        .enumerate()
        .map(|(i, s)| sequence_metrics(&format!("seq{i:03}"), &s.targets.cast::<f64>(), &s.targets.cast::<f64>(), &data.skeleton))
        .collect::<Result<_>>()?;
    Ok(MetricReport { rows })
}

/// Largest lift drift of each spatial block, one entry per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSeries {
    pub per_sequence: Vec<Vec<f64>>,
}

impl DriftSeries {
    pub fn max(&self) -> f64 {
        self.per_sequence.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,block,drift\n");
        for (i, row) in self.per_sequence.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                s.push_str(&format!("{i},{b},{v:.6e}\n"));
            }
        }
        s
    }
}

/// Hyperboloid drift at every HKPSA lift for each sequence of `data`.
pub fn driftwatch<F: Real>(model: &Model<F>, data: &Dataset) -> Result<DriftSeries> {
    check_compatible(model, data)?;
    let per_sequence = data
        .sequences
        .iter()
        .map(|s| Ok(model.predict_traced(&s.inputs.cast::<F>())?.1.lift_drift))
        .collect::<Result<_>>()?;
    Ok(DriftSeries { per_sequence })
}

/// One row of the temporal attention cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub frames: usize,
    pub window: usize,
    pub effective_window: usize,
    /// Counted multiply-adds of the banded path.
    pub banded_macs: u64,
    /// Counted multiply-adds of the dense reference.
    pub dense_macs: u64,
    pub banded_ms: f64,
    pub dense_ms: f64,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        self.dense_macs as f64 / self.banded_macs as f64
    }
}

pub const BENCH_CSV_HEADER: &str = "frames,window,effective_window,banded_macs,dense_macs,ratio,banded_ms,dense_ms";

/// Renders bench rows; the multiply-add columns count QKᵀ plus P·V over
/// every joint, head and head channel.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.3},{:.3}\n",
            r.frames,
            r.window,
            r.effective_window,
            r.banded_macs,
            r.dense_macs,
            r.ratio(),
            r.banded_ms,
            r.dense_ms
        ));
    }
    s
}

/// Runs banded and dense temporal attention on random `[T, J, d]` input for
/// every (T, W) pair, counting multiply-adds and wall time.
pub fn bench_attention(
    frames: &[usize],
    windows: &[usize],
    dim: usize,
    heads: usize,
    joints: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &w in windows {
        let mut store = ParamStore::<f32>::new();
        let attn = TemporalAttention::init(&mut store, &mut rng, "bench", dim, heads, w)?;
        for &t_len in frames {
            let h = Tensor::<f32>::uniform(&[t_len, joints, dim], 1.0, &mut rng);
            instrument::reset();
            let t0 = Instant::now();
            attn.evaluate(&store, &h)?;
            let banded_ms = t0.elapsed().as_secs_f64() * 1e3;
            let t0 = Instant::now();
            attn.evaluate_dense(&store, &h)?;
            let dense_ms = t0.elapsed().as_secs_f64() * 1e3;
            let c = instrument::snapshot();
            let per = (joints * dim) as u64;
            debug_assert_eq!(c.band_macs, band_macs(t_len, w) * per);
            debug_assert_eq!(c.dense_macs, dense_macs(t_len) * per);
            rows.push(BenchRow {
                frames: t_len,
                window: w,
                effective_window: attn.effective_window(t_len),
                banded_macs: c.band_macs,
                dense_macs: c.dense_macs,
                banded_ms,
                dense_ms,
            });
        }
    }
    Ok(rows)
}

/// Configuration and data of the gradient-check toy problem: d = 16, H = 2,
/// a five-joint tree and four frames.
pub fn toy_problem(seed: u64) -> Result<(Model<f64>, Tensor<f64>, Tensor<f64>)> {
    let skeleton = Skeleton::from_parents(&[-1, 0, 1, 0, 3])?;
    let cfg = ModelConfig {
        dim: 16,
        heads: 2,
        spatial_blocks: 2,
        temporal_windows: vec![1, 3],
        mlp_ratio: 2,
        dropout: 0.0,
        joints: 5,
        frames: 4,
        output_scale: 1.0,
        ..ModelConfig::desk()
    };
    let model = Model::<f64>::new(cfg, &skeleton, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let mut inputs = Tensor::<f64>::uniform(&[4, 5, 3], 0.5, &mut rng);
    for px in inputs.data_mut().chunks_exact_mut(3) {
        px[2] = 0.5 + px[2].abs();
    }
    let targets = Tensor::<f64>::uniform(&[4, 5, 3], 300.0, &mut rng);
    Ok((model, inputs, targets))
}

/// Central-difference check of every toy-model parameter and the loss
/// weights through the full objective at ω = 1.
pub fn toy_gradcheck(seed: u64, h: f64, tol: f64) -> Result<GradcheckReport> {
    let (model, inputs, targets) = toy_problem(seed)?;
    let mut store = model.params.clone();
    let unc = Uncertainty::init(&mut store);
    {
        let ls = &mut store.get_mut(unc.log_sigma_sq).value;
        ls.data_mut().copy_from_slice(&[0.3, -0.2, 0.1]);
    }
    let cfg = LossConfig::default();
    let omega = curriculum_weight(20);
    gradcheck(
        &store,
        |g: &mut Graph<f64>, b| {
            let pred = model.forward(g, b, &inputs, &mut Dropout::off(), None)?;
            let gt = g.constant(targets.clone());
            let terms = loss_terms(g, pred, gt, model.skeleton(), &cfg)?;
            total_loss(g, &terms, b.var(unc.log_sigma_sq), omega)
        },
        h,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{generate, SyntheticSpec};

    #[test]
    fn identity_report_is_zero() {
        let ds = generate(&SyntheticSpec::default()).unwrap();
        let r = evaluate_identity(&ds).unwrap();
        assert_eq!(r.rows.len(), 4);
        for row in r.rows.iter().chain(std::iter::once(&r.average())) {
            for v in [row.mpjpe, row.p_mpjpe, row.n_mpjpe, row.mpjve, row.accel, row.blc] {
                assert!(v.abs() < 1e-9, "{v}");
            }
        }
        assert_eq!(r.to_csv().lines().count(), 1 + 4 + 1);
    }

    #[test]
    fn evaluate_rejects_other_skeleton() {
        let ds = generate(&SyntheticSpec::default()).unwrap();
        let (model, _, _) = toy_problem(0).unwrap();
        assert!(matches!(evaluate(&model, &ds, false), Err(Error::Config(_))));
    }

    #[test]
    fn evaluate_with_diagnostics() {
        let ds = generate(&SyntheticSpec {
            frames: 5,
            sequences: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let model = Model::<f64>::new(
            ModelConfig {
                dim: 16,
                spatial_blocks: 1,
                temporal_windows: vec![2],
                frames: 5,
                ..ModelConfig::desk()
            },
            &ds.skeleton,
            1,
        )
        .unwrap();
        let r = evaluate(&model, &ds, true).unwrap();
        let d = r.rows[0].diagnostics.unwrap();
        assert!(d.distortion >= 1.0);
        assert!((0.0..=100.0).contains(&d.map));
        assert!(d.spatial_entropy > 0.0 && d.spatial_entropy <= (17f64).ln() + 1e-9);
        assert!(r.to_csv().contains(crate::metrics::DIAGNOSTICS_DEFINITION_ID));
        let drift = driftwatch(&model, &ds).unwrap();
        assert_eq!(drift.per_sequence.len(), 2);
        assert!(drift.max() <= 1e-12);
    }

    #[test]
    fn bench_counts() {
        let rows = bench_attention(&[8, 16], &[2, 20], 8, 2, 3, 0).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[2].banded_macs, rows[2].dense_macs);
        assert!(rows[0].ratio() > 1.0);
    }
}
