//! The desk-scale training loop.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Trace;
use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::embedding::PoseSequence;
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::harness::optim::{clip_global_norm, global_norm, AdamW, LrSchedule};
use crate::layers::Dropout;
use crate::losses::{loss_terms, total_loss, CurriculumSchedule, LossConfig, Uncertainty};
use crate::metrics;
use crate::network::{Model, ModelConfig};
use crate::real::Real;

/// Floating-point type used for parameters and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "fp32" => Ok(Self::F32),
            "f64" | "fp64" => Ok(Self::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

/// Optimisation, schedule and augmentation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Mirror half of the samples left/right.
    pub hflip: bool,
    /// Probability of zeroing the confidence of 1–2 joints in a sample.
    pub confidence_dropout: f64,
    pub curriculum: CurriculumSchedule,
    pub loss: LossConfig,
    /// Record lift drift for the first sample of every step.
    pub drift_watch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            batch_size: 8,
            epochs: 60,
            warmup_epochs: 5,
            lr_floor: 0.01,
            clip_norm: 1.0,
            seed: 0,
            precision: Precision::F32,
            hflip: true,
            confidence_dropout: 0.2,
            curriculum: CurriculumSchedule::default(),
            loss: LossConfig::default(),
            drift_watch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return bad("learning rate and clip norm must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.lr_floor) {
            return bad("weight decay must be ≥ 0 and the floor in [0, 1]");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.confidence_dropout) {
            return bad("confidence dropout must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            warmup_epochs: self.warmup_epochs as f64,
            total_epochs: self.epochs as f64,
            floor: self.lr_floor,
        }
    }
}

/// Mirrors a sample: negates the horizontal image and world axes and
/// swaps left/right joints.
pub fn hflip<F: Real>(seq: &PoseSequence<F>, mirror: &[usize]) -> PoseSequence<F> {
    let flip = |x: &Tensor<F>| {
        let s = x.shape();
        let (t_len, j) = (s[0], s[1]);
        let src = x.data();
        let mut out = vec![F::zero(); src.len()];
        for t in 0..t_len {
            for (jj, &m) in mirror.iter().enumerate() {
                let (o, i) = ((t * j + jj) * 3, (t * j + m) * 3);
                out[o] = -src[i];
                out[o + 1] = src[i + 1];
                out[o + 2] = src[i + 2];
            }
        }
        Tensor::new(s.to_vec(), out).expect("shape preserved")
    };
    PoseSequence {
        inputs: flip(&seq.inputs),
        targets: flip(&seq.targets),
    }
}

/// Zeroes the confidence channel of `joints` in every frame.
pub fn drop_confidence<F: Real>(inputs: &mut Tensor<F>, joints: &[usize]) {
    let j = inputs.shape()[1];
    for (i, px) in inputs.data_mut().chunks_exact_mut(3).enumerate() {
        if joints.contains(&(i % j)) {
            px[2] = F::zero();
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub omega: f64,
    pub loss_total: f64,
    pub loss_mpjpe: f64,
    pub loss_velocity: f64,
    pub loss_bone: f64,
    pub sigma_sq: [f64; 3],
    pub grad_norm: f64,
    pub drift: f64,
    pub train_mpjpe: f64,
    pub val_mpjpe: f64,
    pub wall_time: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,lr,omega,loss_total,loss_mpjpe,loss_velocity,loss_bone,sigma2_mpjpe,sigma2_velocity,sigma2_bone,grad_norm,drift,drift_log10,train_mpjpe,val_mpjpe,wall_time";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.6},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6e},{:.4},{:.9},{:.9},{:.3}",
            self.epoch,
            self.lr,
            self.omega,
            self.loss_total,
            self.loss_mpjpe,
            self.loss_velocity,
            self.loss_bone,
            self.sigma_sq[0],
            self.sigma_sq[1],
            self.sigma_sq[2],
            self.grad_norm,
            self.drift,
            self.drift.max(f64::MIN_POSITIVE).log10(),
            self.train_mpjpe,
            self.val_mpjpe,
            self.wall_time,
        )
    }
}

/// Lift drift recorded at one step when drift watching is on.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSample {
    pub step: usize,
    pub epoch: usize,
    /// One value per spatial block.
    pub per_block: Vec<f64>,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub model: Model<F>,
    pub best: Model<F>,
    pub best_epoch: usize,
    pub sigma_sq: [f64; 3],
    pub epochs: Vec<EpochLog>,
    pub drift: Vec<DriftSample>,
    /// Largest post-clip gradient norm over all steps.
    pub max_clipped_norm: f64,
}

impl<F> TrainOutcome<F> {
    pub fn epoch_csv(&self) -> String {
        let mut s = String::from(EPOCH_CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&e.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn drift_csv(&self) -> String {
        let mut s = String::from("step,epoch,block,drift\n");
        for d in &self.drift {
            for (b, v) in d.per_block.iter().enumerate() {
                let _ = writeln!(s, "{},{},{b},{v:.6e}", d.step, d.epoch);
            }
        }
        s
    }
}

fn cast_sequences<F: Real>(ds: &Dataset) -> Vec<PoseSequence<F>> {
    ds.sequences.iter().map(|s| s.cast()).collect()
}

/// Mean per-sequence MPJPE of inference-mode predictions.
pub fn dataset_mpjpe<F: Real>(model: &Model<F>, data: &[PoseSequence<F>]) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let pred = model.predict(&s.inputs)?;
        total += metrics::mpjpe(&pred, &s.targets)?;
    }
    Ok(total / data.len() as f64)
}

fn non_finite(step: usize, tensor: impl Into<String>) -> Error {
    Error::NonFinite {
        step,
        tensor: tensor.into(),
    }
}

/// Trains a fresh model on `train_set`, selecting the best epoch on
/// `val_set` (the training set when `None`). Writes `train_log.csv`,
/// `best.ckpt`, `last.ckpt` and, with drift watching, `drift.csv` into
/// `out_dir` when given.
pub fn train<F: Real>(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    model_cfg.validate()?;
    let skeleton = &train_set.skeleton;
    if train_set.frames() < 2 {
        return Err(Error::Config("training needs at least two frames per sequence".into()));
    }
    if let Some(v) = val_set {
        if v.joints() != train_set.joints() {
            return Err(Error::Config("validation and training skeletons differ".into()));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut model = Model::<F>::new(model_cfg.clone(), skeleton, cfg.seed)?;
    let mut unc_store = ParamStore::<F>::new();
    let unc = Uncertainty::init(&mut unc_store);
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut opt_unc = AdamW::new(&unc_store, 0.0);
    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));

    let train_data = cast_sequences::<F>(train_set);
    let val_data = val_set.map(cast_sequences::<F>);
    let val_data = val_data.as_deref().unwrap_or(&train_data);
    let mirror = skeleton.mirror().to_vec();

    let n = train_data.len();
    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let mut order: Vec<usize> = (0..n).collect();
    let start = Instant::now();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut drift = Vec::new();
    let mut best: Option<(f64, usize, Model<F>)> = None;
    let mut max_clipped = 0.0f64;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let omega = cfg.curriculum.weight(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut lr = 0.0;
        for (k, chunk) in order.chunks(batch).enumerate() {
            lr = schedule.at(epoch as f64 + k as f64 / steps_per_epoch as f64);
            let inv_b = F::c(1.0 / chunk.len() as f64);
            let mut acc: Vec<Tensor<F>> = model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            let mut acc_u: Vec<Tensor<F>> = unc_store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            for (i, &idx) in chunk.iter().enumerate() {
                let mut sample = if cfg.hflip && rng.random::<bool>() {
                    hflip(&train_data[idx], &mirror)
                } else {
                    train_data[idx].clone()
                };
                if cfg.confidence_dropout > 0.0 && rng.random::<f64>() < cfg.confidence_dropout {
                    let count = rng.random_range(1..=2usize.min(sample.joints()));
                    let joints: Vec<usize> = rand::seq::index::sample(&mut rng, sample.joints(), count).into_vec();
                    drop_confidence(&mut sample.inputs, &joints);
                }

                let mut g = Graph::<F>::new();
                let bm = model.params.bind(&mut g);
                let bu = unc_store.bind(&mut g);
                let mut trace = Trace::default();
                let watch = cfg.drift_watch && i == 0;
                let pred = {
                    let mut drop = if model_cfg.dropout > 0.0 {
                        Dropout::new(model_cfg.dropout, &mut rng)
                    } else {
                        Dropout::off()
                    };
                    model.forward(&mut g, &bm, &sample.inputs, &mut drop, watch.then_some(&mut trace))?
                };
                let gt = g.constant(sample.targets);
                let terms = loss_terms(&mut g, pred, gt, skeleton, &cfg.loss)?;
                let total = total_loss(&mut g, &terms, bu.var(unc.log_sigma_sq), omega)?;
                let val = g.value(total).item().as_f64();
                if !val.is_finite() {
                    let what = g
                        .first_non_finite()
                        .map(|(node, op)| format!("{op} (node {node})"))
                        .unwrap_or_else(|| "loss".into());
                    return Err(non_finite(step, what));
                }
                let item = |v| g.value(v).item().as_f64();
                for (s, v) in sums.iter_mut().zip([
                    val,
                    item(terms.mpjpe),
                    item(terms.velocity),
                    item(terms.bone),
                ]) {
                    *s += v;
                }
                let scaled = g.scale(total, inv_b);
                let grads = g.backward(scaled)?;
                for (a, gr) in acc.iter_mut().zip(bm.collect(&grads)) {
                    for (x, y) in a.data_mut().iter_mut().zip(gr.data()) {
                        *x = *x + *y;
                    }
                }
                for (a, gr) in acc_u.iter_mut().zip(bu.collect(&grads)) {
                    for (x, y) in a.data_mut().iter_mut().zip(gr.data()) {
                        *x = *x + *y;
                    }
                }
                if watch {
                    drift.push(DriftSample {
                        step,
                        epoch,
                        per_block: trace.lift_drift,
                    });
                }
            }
            for (p, a) in model.params.iter().zip(&acc).chain(unc_store.iter().zip(&acc_u)) {
                if !a.is_finite() {
                    return Err(non_finite(step, format!("grad of {}", p.name)));
                }
            }
            let pre = clip_global_norm(&mut [&mut acc, &mut acc_u], cfg.clip_norm);
            max_clipped = max_clipped.max(global_norm(&[&acc, &acc_u]));
            sums[4] += pre;
            opt.step(&mut model.params, &acc, lr)?;
            opt_unc.step(&mut unc_store, &acc_u, lr)?;
            for p in model.params.iter().chain(unc_store.iter()) {
                if !p.value.is_finite() {
                    return Err(non_finite(step, p.name.clone()));
                }
            }
            step += 1;
        }

        let train_mpjpe = dataset_mpjpe(&model, &train_data)?;
        let val_mpjpe = if std::ptr::eq(val_data, train_data.as_slice()) {
            train_mpjpe
        } else {
            dataset_mpjpe(&model, val_data)?
        };
        let (_, tr) = model.predict_traced(&val_data[0].inputs)?;
        let epoch_drift = tr.lift_drift.iter().copied().fold(0.0, f64::max);
        let log = EpochLog {
            epoch,
            lr,
            omega,
            loss_total: sums[0] / n as f64,
            loss_mpjpe: sums[1] / n as f64,
            loss_velocity: sums[2] / n as f64,
            loss_bone: sums[3] / n as f64,
            sigma_sq: unc.sigma_sq(&unc_store),
            grad_norm: sums[4] / steps_per_epoch as f64,
            drift: epoch_drift,
            train_mpjpe,
            val_mpjpe,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch:>4} lr {:.2e} ω {omega:.2} L_m {:.3} train {train_mpjpe:.3} val {val_mpjpe:.3} drift {epoch_drift:.1e}",
            lr,
            log.loss_mpjpe
        );
        epochs.push(log);
        if best.as_ref().is_none_or(|b| val_mpjpe < b.0) {
            if let Some(dir) = out_dir {
                model.save(&dir.join("best.ckpt"))?;
            }
            best = Some((val_mpjpe, epoch, model.clone()));
        }
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    let outcome = TrainOutcome {
        sigma_sq: unc.sigma_sq(&unc_store),
        model,
        best: best_model,
        best_epoch,
        epochs,
        drift,
        max_clipped_norm: max_clipped,
    };
    if let Some(dir) = out_dir {
        outcome.model.save(&dir.join("last.ckpt"))?;
        let p = dir.join("train_log.csv");
        std::fs::write(&p, outcome.epoch_csv()).map_err(|e| Error::io(&p, e))?;
        if cfg.drift_watch {
            let p = dir.join("drift.csv");
            std::fs::write(&p, outcome.drift_csv()).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{generate, SyntheticSpec};
    use crate::skeleton::Skeleton;

    fn tiny() -> (ModelConfig, Dataset) {
        let skel = Skeleton::from_parents(&[-1, 0, 1, 0, 3]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        std::fs::write(&path, skel.to_json()).unwrap();
        let ds = generate(&SyntheticSpec {
            skeleton: path.to_string_lossy().into_owned(),
            frames: 6,
            sequences: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            spatial_blocks: 1,
            temporal_windows: vec![2],
            joints: 5,
            frames: 6,
            ..ModelConfig::desk()
        };
        (cfg, ds)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            batch_size: 2,
            lr: 1e-3,
            precision: Precision::F64,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let ds = generate(&SyntheticSpec::default()).unwrap();
        let s = &ds.sequences[0];
        let m = ds.skeleton.mirror();
        let once = hflip(s, m);
        assert_ne!(&once, s);
        assert_eq!(&hflip(&once, m), s);
    }

    #[test]
    fn confidence_dropout_touches_only_confidence() {
        let ds = generate(&SyntheticSpec::default()).unwrap();
        let mut x = ds.sequences[0].inputs.clone();
        drop_confidence(&mut x, &[3]);
        for (i, (a, b)) in x.data().chunks_exact(3).zip(ds.sequences[0].inputs.data().chunks_exact(3)).enumerate() {
            assert_eq!(&a[..2], &b[..2]);
            if i % 17 == 3 {
                assert_eq!(a[2], 0.0);
            } else {
                assert_eq!(a[2], b[2]);
            }
        }
    }

    #[test]
    fn short_run_is_deterministic_and_clipped() {
        let (mc, ds) = tiny();
        let a = train::<f64>(&quick(), &mc, &ds, None, None).unwrap();
        let b = train::<f64>(&quick(), &mc, &ds, None, None).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.epochs.len(), 3);
        assert!(a.max_clipped_norm <= 1.0 + 1e-6);
        assert_eq!(a.epochs[0].omega, 0.0);
    }

    #[test]
    fn drift_watch_does_not_change_parameters() {
        let (mc, ds) = tiny();
        let off = train::<f64>(&quick(), &mc, &ds, None, None).unwrap();
        let cfg = TrainConfig {
            drift_watch: true,
            ..quick()
        };
        let on = train::<f64>(&cfg, &mc, &ds, None, None).unwrap();
        assert_eq!(off.model.params, on.model.params);
        assert_eq!(on.drift.len(), 3 * 2);
        assert!(on.drift.iter().flat_map(|d| &d.per_block).all(|&v| v <= 1e-12));
    }

    #[test]
    fn writes_logs_and_checkpoints() {
        let (mc, ds) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let out = train::<f32>(&quick(), &mc, &ds, None, Some(dir.path())).unwrap();
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(log.starts_with(EPOCH_CSV_HEADER));
        let best = Model::<f32>::load(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(best.params, out.best.params);
    }

    #[test]
    fn rejects_bad_config() {
        let (mc, ds) = tiny();
        let cfg = TrainConfig {
            lr: 0.0,
            ..quick()
        };
        assert!(matches!(train::<f64>(&cfg, &mc, &ds, None, None), Err(Error::Config(_))));
    }
}
