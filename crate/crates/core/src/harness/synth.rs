//! Synthetic kinematic-tree motion: forward kinematics in millimetres,
//! orthographic projection and occlusion-style confidence.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::embedding::PoseSequence;
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::skeleton::{HopMode, Skeleton};

type Mat3 = [[f64; 3]; 3];

/// How joint angles evolve over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MotionGenerator {
    /// One fixed pose per sequence.
    Static,
    /// Sinusoidal joint angles sharing one period.
    #[default]
    GaitSine,
    /// Catmull-Rom interpolation through random angle knots.
    RandomSmoothSpline,
}

impl std::str::FromStr for MotionGenerator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "gait-sine" => Ok(Self::GaitSine),
            "random-smooth-spline" => Ok(Self::RandomSmoothSpline),
            other => Err(Error::Config(format!(
                "unknown generator {other:?} (static, gait-sine, random-smooth-spline)"
            ))),
        }
    }
}

/// Everything needed to regenerate a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// `"h36m"` or a path to a skeleton JSON file.
    pub skeleton: String,
    pub generator: MotionGenerator,
    pub frames: usize,
    pub sequences: usize,
    /// Gait period in frames.
    pub period: f64,
    /// Frames between spline knots.
    pub knot_spacing: usize,
    /// Image units per millimetre of the orthographic camera.
    pub projection_scale: f64,
    /// Standard deviation of Gaussian 2D noise in image units.
    pub pixel_noise: f64,
    /// Expected occlusion episodes per sequence.
    pub occlusion_rate: f64,
    /// Frames per occlusion episode.
    pub occlusion_length: usize,
    /// Baseline confidence is drawn from [1 − jitter, 1].
    pub confidence_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            skeleton: "h36m".into(),
            generator: MotionGenerator::GaitSine,
            frames: 27,
            sequences: 4,
            period: 24.0,
            knot_spacing: 9,
            projection_scale: 1e-3,
            pixel_noise: 0.0,
            occlusion_rate: 0.5,
            occlusion_length: 6,
            confidence_jitter: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames == 0 || self.sequences == 0 {
            return bad("frames and sequences must be positive");
        }
        if !(self.period > 0.0) || self.knot_spacing == 0 {
            return bad("period and knot spacing must be positive");
        }
        if !(self.projection_scale > 0.0) {
            return bad("projection scale must be positive");
        }
        if !(self.pixel_noise >= 0.0) || !(self.occlusion_rate >= 0.0) {
            return bad("noise and occlusion rate must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.confidence_jitter) {
            return bad("confidence jitter must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn resolve_skeleton(&self) -> Result<Skeleton> {
        resolve_skeleton(&self.skeleton)
    }
}

/// `"h36m"` or a skeleton JSON path.
pub fn resolve_skeleton(reference: &str) -> Result<Skeleton> {
    if reference.eq_ignore_ascii_case("h36m") {
        Ok(Skeleton::h36m())
    } else {
        Skeleton::load(std::path::Path::new(reference), HopMode::default())
    }
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| a[r][k] * b[k][c]).sum()))
}

fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|r| a[r][0] * v[0] + a[r][1] * v[1] + a[r][2] * v[2])
}

/// Rest-pose offset of each joint from its parent in mm (y up, subject's
/// left on +x). Zero for the root.
pub fn rest_offsets(skeleton: &Skeleton) -> Vec<[f64; 3]> {
    let j = skeleton.num_joints();
    if *skeleton == Skeleton::h36m().with_hop_mode(skeleton.hop_mode()) {
        return vec![
            [0.0, 0.0, 0.0],
            [-130.0, 0.0, 0.0],
            [0.0, -440.0, 0.0],
            [0.0, -430.0, 0.0],
            [130.0, 0.0, 0.0],
            [0.0, -440.0, 0.0],
            [0.0, -430.0, 0.0],
            [0.0, 230.0, 0.0],
            [0.0, 250.0, 0.0],
            [0.0, 110.0, 20.0],
            [0.0, 110.0, 0.0],
            [150.0, 0.0, 0.0],
            [0.0, -280.0, 0.0],
            [0.0, -250.0, 0.0],
            [-150.0, 0.0, 0.0],
            [0.0, -280.0, 0.0],
            [0.0, -250.0, 0.0],
        ];
    }
    // directions on a Fibonacci sphere, 200 mm bones
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..j)
        .map(|i| {
            if skeleton.parent(i).is_none() {
                return [0.0; 3];
            }
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / j as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            [200.0 * r * th.cos(), 200.0 * y, 200.0 * r * th.sin()]
        })
        .collect()
}

/// Joints ordered so every parent precedes its children.
fn topological_order(skeleton: &Skeleton) -> Vec<usize> {
    let root = skeleton.root();
    let mut order: Vec<usize> = (0..skeleton.num_joints()).collect();
    order.sort_by_key(|&j| (skeleton.tree_distance(root, j), j));
    order
}

/// Root-relative joint positions `[J][3]` given each joint's local
/// (flexion, abduction) angles and a global yaw.
pub fn forward_kinematics(
    skeleton: &Skeleton,
    offsets: &[[f64; 3]],
    angles: &[[f64; 2]],
    yaw: f64,
    bone_scale: f64,
) -> Vec<[f64; 3]> {
    let j = skeleton.num_joints();
    let mut pos = vec![[0.0; 3]; j];
    let mut frame: Vec<Mat3> = vec![[[0.0; 3]; 3]; j];
    for jj in topological_order(skeleton) {
        let local = mat_mul(&rot_z(angles[jj][1]), &rot_x(angles[jj][0]));
        match skeleton.parent(jj) {
            None => {
                frame[jj] = mat_mul(&rot_y(yaw), &local);
                pos[jj] = [0.0; 3];
            }
            Some(p) => {
                let off = offsets[jj].map(|v| v * bone_scale);
                let d = mat_vec(&frame[p], off);
                pos[jj] = [pos[p][0] + d[0], pos[p][1] + d[1], pos[p][2] + d[2]];
                frame[jj] = mat_mul(&frame[p], &local);
            }
        }
    }
    pos
}

fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, s: f64) -> f64 {
    0.5 * (2.0 * p1 + (p2 - p0) * s + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s * s + (3.0 * p1 - p0 - 3.0 * p2 + p3) * s * s * s)
}

/// Per-frame angle tracks `[T][J][2]` for one sequence.
fn angle_tracks(spec: &SyntheticSpec, skeleton: &Skeleton, rng: &mut ChaCha8Rng) -> Vec<Vec<[f64; 2]>> {
    let (t_len, j) = (spec.frames, skeleton.num_joints());
    match spec.generator {
        MotionGenerator::Static => {
            let pose: Vec<[f64; 2]> = (0..j)
                .map(|_| [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)])
                .collect();
            vec![pose; t_len]
        }
        MotionGenerator::GaitSine => {
            let mirror = skeleton.mirror();
            let mut amp = vec![[0.0; 2]; j];
            let mut phase = vec![[0.0; 2]; j];
            let mut base = vec![[0.0; 2]; j];
            for i in 0..j {
                let m = mirror[i];
                if m < i {
                    // antiphase copy of the mirrored partner
                    amp[i] = amp[m];
                    phase[i] = [phase[m][0] + PI, phase[m][1] + PI];
                    base[i] = base[m];
                    continue;
                }
                amp[i] = [rng.random_range(0.1..0.5), rng.random_range(0.0..0.15)];
                phase[i] = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
                base[i] = [rng.random_range(-0.2..0.2), rng.random_range(-0.1..0.1)];
            }
            let w = 2.0 * PI / spec.period;
            (0..t_len)
                .map(|t| {
                    (0..j)
                        .map(|i| {
                            std::array::from_fn(|a| base[i][a] + amp[i][a] * (w * t as f64 + phase[i][a]).sin())
                        })
                        .collect()
                })
                .collect()
        }
        MotionGenerator::RandomSmoothSpline => {
            let k = spec.knot_spacing;
            let knots = t_len.div_ceil(k) + 3;
            let track: Vec<Vec<[f64; 2]>> = (0..knots)
                .map(|_| {
                    (0..j)
                        .map(|_| [rng.random_range(-0.6..0.6), rng.random_range(-0.3..0.3)])
                        .collect()
                })
                .collect();
            (0..t_len)
                .map(|t| {
                    let seg = t / k + 1;
                    let s = (t % k) as f64 / k as f64;
                    (0..j)
                        .map(|i| {
                            std::array::from_fn(|a| {
                                catmull_rom(
                                    track[seg - 1][i][a],
                                    track[seg][i][a],
                                    track[seg + 1][i][a],
                                    track[seg + 2][i][a],
                                    s,
                                )
                            })
                        })
                        .collect()
                })
                .collect()
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Confidence map `[T][J]`: jittered near 1, dropping toward 0 during
/// occlusion episodes.
fn confidences(spec: &SyntheticSpec, j: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let t_len = spec.frames;
    let mut c: Vec<Vec<f64>> = (0..t_len)
        .map(|_| {
            (0..j)
                .map(|_| 1.0 - spec.confidence_jitter * rng.random::<f64>())
                .collect()
        })
        .collect();
    let whole = spec.occlusion_rate.floor() as usize;
    let extra = usize::from(rng.random::<f64>() < spec.occlusion_rate.fract());
    for _ in 0..whole + extra {
        let joint = rng.random_range(0..j);
        let start = rng.random_range(0..t_len);
        for row in c.iter_mut().skip(start).take(spec.occlusion_length) {
            row[joint] = 0.1 * rng.random::<f64>();
        }
    }
    c
}

/// Generates one `[T, J, 3]` input / target pair per sequence.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let skeleton = spec.resolve_skeleton()?;
    let offsets = rest_offsets(&skeleton);
    let j = skeleton.num_joints();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sequences = Vec::with_capacity(spec.sequences);
    for _ in 0..spec.sequences {
        let yaw = rng.random_range(-PI..PI);
        let bone_scale = rng.random_range(0.9..1.1);
        let tracks = angle_tracks(spec, &skeleton, &mut rng);
        let conf = confidences(spec, j, &mut rng);
        let mut inputs = Vec::with_capacity(spec.frames * j * 3);
        let mut targets = Vec::with_capacity(spec.frames * j * 3);
        for (angles, c) in tracks.iter().zip(&conf) {
            let pos = forward_kinematics(&skeleton, &offsets, angles, yaw, bone_scale);
            for (p, &cj) in pos.iter().zip(c) {
                let mut u = p[0] * spec.projection_scale;
                let mut v = p[1] * spec.projection_scale;
                if spec.pixel_noise > 0.0 {
                    u += spec.pixel_noise * standard_normal(&mut rng);
                    v += spec.pixel_noise * standard_normal(&mut rng);
                }
                inputs.extend([u as f32, v as f32, cj as f32]);
                targets.extend(p.map(|x| x as f32));
            }
        }
        let shape = [spec.frames, j, 3];
        sequences.push(PoseSequence::new(
            Tensor::new(shape.to_vec(), inputs)?,
            Tensor::new(shape.to_vec(), targets)?,
        )?);
    }
    Dataset::new(skeleton, sequences, Some(spec.clone()))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn spec(generator: MotionGenerator) -> SyntheticSpec {
        SyntheticSpec {
            generator,
            frames: 48,
            sequences: 2,
            seed: 7,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn rest_pose_bone_lengths() {
        let skel = Skeleton::h36m();
        let off = rest_offsets(&skel);
        let pos = forward_kinematics(&skel, &off, &vec![[0.3, -0.2]; 17], 1.0, 1.0);
        for &(c, p) in skel.bones() {
            let d: f64 = (0..3).map(|k| (pos[c][k] - pos[p][k]).powi(2)).sum::<f64>().sqrt();
            let rest: f64 = off[c].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_abs_diff_eq!(d, rest, epsilon = 1e-9);
        }
        assert_eq!(pos[0], [0.0; 3]);
    }

    #[test]
    fn static_sequences_do_not_move() {
        let ds = generate(&spec(MotionGenerator::Static)).unwrap();
        for s in &ds.sequences {
            let y = s.targets.data();
            let frame = 17 * 3;
            for t in 1..s.frames() {
                assert_eq!(&y[t * frame..(t + 1) * frame], &y[..frame]);
            }
        }
    }

    #[test]
    fn projection_is_exact() {
        let sp = spec(MotionGenerator::RandomSmoothSpline);
        let ds = generate(&sp).unwrap();
        for s in &ds.sequences {
            for (x, y) in s.inputs.data().chunks_exact(3).zip(s.targets.data().chunks_exact(3)) {
                assert_abs_diff_eq!(x[0] as f64, y[0] as f64 * sp.projection_scale, epsilon = 1e-7);
                assert_abs_diff_eq!(x[1] as f64, y[1] as f64 * sp.projection_scale, epsilon = 1e-7);
                assert!((0.0..=1.0).contains(&x[2]));
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&spec(MotionGenerator::GaitSine)).unwrap();
        let b = generate(&spec(MotionGenerator::GaitSine)).unwrap();
        assert_eq!(a.sequences, b.sequences);
        let mut other = spec(MotionGenerator::GaitSine);
        other.seed = 8;
        assert_ne!(generate(&other).unwrap().sequences, a.sequences);
    }

    #[test]
    fn spec_rejects_bad_values() {
        let mut s = SyntheticSpec::default();
        s.frames = 0;
        assert!(s.validate().is_err());
        let mut s = SyntheticSpec::default();
        s.confidence_jitter = 2.0;
        assert!(s.validate().is_err());
    }
}
