//! Evaluation metrics on `[T, J, 3]` pose sequences in millimetres.
//!
//! Position errors average over frames and joints. Procrustes alignment is
//! per frame. The embedding diagnostics (distortion, retrieval MAP and
//! attention entropy) use local definitions tagged with
//! [`DIAGNOSTICS_DEFINITION_ID`].

use std::fmt::Write as _;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::lorentz::geodesic_distance_slices;
use crate::real::Real;
use crate::skeleton::Skeleton;

/// Tag carried by every report containing diagnostic columns.
pub const DIAGNOSTICS_DEFINITION_ID: &str = "hp-diag-v1";

type Mat3 = [[f64; 3]; 3];

/// Flat f64 copy of a `[T, J, 3]` tensor with its frame/joint counts.
#[derive(Debug, Clone)]
struct Poses {
    data: Vec<f64>,
    frames: usize,
    joints: usize,
}

impl Poses {
    fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.joints * 3..(t + 1) * self.joints * 3]
    }

    fn joint(&self, t: usize, j: usize) -> [f64; 3] {
        let o = (t * self.joints + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

fn poses_pair<F: Real>(op: &'static str, pred: &Tensor<F>, gt: &Tensor<F>) -> Result<(Poses, Poses)> {
    let s = pred.shape();
    if s.len() != 3 || s[2] != 3 || s != gt.shape() {
        return Err(Error::shape(op, format!("pred {s:?} vs gt {:?}", gt.shape())));
    }
    let mk = |t: &Tensor<F>| Poses {
        data: t.to_f64_vec(),
        frames: s[0],
        joints: s[1],
    };
    Ok((mk(pred), mk(gt)))
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn frame_mpjpe(p: &[f64], g: &[f64]) -> f64 {
    let j = p.len() / 3;
    let s: f64 = p
        .chunks_exact(3)
        .zip(g.chunks_exact(3))
        .map(|(a, b)| dist3([a[0], a[1], a[2]], [b[0], b[1], b[2]]))
        .sum();
    s / j as f64
}

/// Mean per-joint position error.
pub fn mpjpe<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<f64> {
    let (p, g) = poses_pair("mpjpe", pred, gt)?;
    Ok(frame_mpjpe(&p.data, &g.data))
}

/// An error averaged over frames, with the number of frames whose
/// alignment had to be skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedError {
    pub value: f64,
    pub skipped_frames: usize,
}

/// Similarity transform x ↦ s·R·x + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Mat3,
    pub scale: f64,
    pub translation: [f64; 3],
}

impl Similarity {
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| {
            self.scale * (r[i][0] * x[0] + r[i][1] * x[1] + r[i][2] * x[2]) + self.translation[i]
        })
    }
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(a, a).sqrt();
    (n > 1e-300).then(|| a.map(|v| v / n))
}

/// Thin SVD of a 3×3 matrix by one-sided cyclic Jacobi: returns
/// (U, σ, V) with `m = U·diag(σ)·Vᵀ`, σ descending, U and V orthogonal.
pub fn svd3(m: &Mat3) -> (Mat3, [f64; 3], Mat3) {
    // columns of a are rotated until mutually orthogonal
    let mut a = *m;
    let mut v: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let col = |a: &Mat3, c: usize| [a[0][c], a[1][c], a[2][c]];
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let (cp, cq) = (col(&a, p), col(&a, q));
            let alpha = dot(cp, cp);
            let beta = dot(cq, cq);
            let gamma = dot(cp, cq);
            if gamma == 0.0 {
                continue;
            }
            off = off.max(gamma.abs() / (alpha * beta).sqrt().max(f64::MIN_POSITIVE));
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let t = if zeta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for row in a.iter_mut().chain(v.iter_mut()) {
                let (x, y) = (row[p], row[q]);
                row[p] = c * x - s * y;
                row[q] = s * x + c * y;
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sig = [0.0; 3];
    for (c, s) in sig.iter_mut().enumerate() {
        *s = dot(col(&a, c), col(&a, c)).sqrt();
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| sig[y].total_cmp(&sig[x]));
    let sigma = order.map(|i| sig[i]);
    let vs: Mat3 = std::array::from_fn(|r| order.map(|i| v[r][i]));
    let cols: [[f64; 3]; 3] = order.map(|i| col(&a, i));

    // U columns are the normalised rotated columns, completed to an
    // orthonormal basis where the rank drops
    let tol = sigma[0] * 1e-13;
    let u0 = if sigma[0] > tol && sigma[0] > 0.0 {
        cols[0].map(|x| x / sigma[0])
    } else {
        [1.0, 0.0, 0.0]
    };
    let u1 = if sigma[1] > tol {
        cols[1].map(|x| x / sigma[1])
    } else {
        let trial = if u0[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        normalize(cross(u0, trial)).expect("non-parallel trial vector")
    };
    let u2 = if sigma[2] > tol {
        cols[2].map(|x| x / sigma[2])
    } else {
        cross(u0, u1)
    };
    let u: Mat3 = std::array::from_fn(|r| [u0[r], u1[r], u2[r]]);
    (u, sigma, vs)
}

/// Least-squares similarity mapping `src` onto `dst` (both J×3, flat),
/// without reflections. `None` when `src` has no spread.
pub fn procrustes(src: &[f64], dst: &[f64]) -> Option<Similarity> {
    let n = src.len() / 3;
    let mean = |x: &[f64]| -> [f64; 3] {
        let mut m = [0.0; 3];
        for r in x.chunks_exact(3) {
            for k in 0..3 {
                m[k] += r[k];
            }
        }
        m.map(|v| v / n as f64)
    };
    let (mu_s, mu_d) = (mean(src), mean(dst));
    let mut h = [[0.0; 3]; 3];
    let mut var_s = 0.0;
    for (a, b) in src.chunks_exact(3).zip(dst.chunks_exact(3)) {
        let a = sub3([a[0], a[1], a[2]], mu_s);
        let b = sub3([b[0], b[1], b[2]], mu_d);
        var_s += dot(a, a);
        for r in 0..3 {
            for c in 0..3 {
                h[r][c] += a[r] * b[c];
            }
        }
    }
    let scale_ref = mu_s.iter().chain(&mu_d).fold(1.0f64, |m, v| m.max(v.abs()));
    if var_s <= 1e-24 * scale_ref * scale_ref * n as f64 {
        return None;
    }
    let (u, sigma, v) = svd3(&h);
    // R = V·D·Uᵀ with D = diag(1, 1, sign det(V Uᵀ))
    let vut: Mat3 = std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| v[r][k] * u[c][k]).sum()));
    let d = if det3(&vut) < 0.0 { -1.0 } else { 1.0 };
    let diag = [1.0, 1.0, d];
    let rotation: Mat3 =
        std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| v[r][k] * diag[k] * u[c][k]).sum()));
    let scale = (sigma[0] + sigma[1] + d * sigma[2]) / var_s;
    let rm = Similarity {
        rotation,
        scale,
        translation: [0.0; 3],
    }
    .apply(mu_s);
    Some(Similarity {
        rotation,
        scale,
        translation: sub3(mu_d, rm),
    })
}

/// MPJPE after per-frame similarity alignment of `pred` onto `gt`.
pub fn p_mpjpe<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<AlignedError> {
    let (p, g) = poses_pair("p_mpjpe", pred, gt)?;
    let mut total = 0.0;
    let mut skipped = 0;
    for t in 0..p.frames {
        let (pf, gf) = (p.frame(t), g.frame(t));
        match procrustes(pf, gf) {
            Some(sim) => {
                let aligned: Vec<f64> = pf
                    .chunks_exact(3)
                    .flat_map(|r| sim.apply([r[0], r[1], r[2]]))
                    .collect();
                total += frame_mpjpe(&aligned, gf);
            }
            None => {
                skipped += 1;
                total += frame_mpjpe(pf, gf);
            }
        }
    }
    if skipped > 0 {
        log::warn!("p_mpjpe: alignment skipped on {skipped} degenerate frame(s)");
    }
    Ok(AlignedError {
        value: total / p.frames as f64,
        skipped_frames: skipped,
    })
}

/// MPJPE after the per-frame optimal scale s* = ⟨p,g⟩/⟨p,p⟩.
pub fn n_mpjpe<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<AlignedError> {
    let (p, g) = poses_pair("n_mpjpe", pred, gt)?;
    let mut total = 0.0;
    let mut skipped = 0;
    for t in 0..p.frames {
        let (pf, gf) = (p.frame(t), g.frame(t));
        let pp: f64 = pf.iter().map(|v| v * v).sum();
        let pg: f64 = pf.iter().zip(gf).map(|(a, b)| a * b).sum();
        if pp <= f64::MIN_POSITIVE {
            skipped += 1;
            total += frame_mpjpe(pf, gf);
            continue;
        }
        let s = pg / pp;
        let scaled: Vec<f64> = pf.iter().map(|v| v * s).collect();
        total += frame_mpjpe(&scaled, gf);
    }
    if skipped > 0 {
        log::warn!("n_mpjpe: scale skipped on {skipped} zero-norm frame(s)");
    }
    Ok(AlignedError {
        value: total / p.frames as f64,
        skipped_frames: skipped,
    })
}

fn difference_error(p: &Poses, g: &Poses, order: usize) -> f64 {
    let diff = |x: &Poses, t: usize, j: usize| -> [f64; 3] {
        if order == 1 {
            sub3(x.joint(t + 1, j), x.joint(t, j))
        } else {
            let a = sub3(x.joint(t + 2, j), x.joint(t + 1, j));
            let b = sub3(x.joint(t + 1, j), x.joint(t, j));
            sub3(a, b)
        }
    };
    let steps = p.frames - order;
    let mut total = 0.0;
    for t in 0..steps {
        for j in 0..p.joints {
            total += dist3(diff(p, t, j), diff(g, t, j));
        }
    }
    total / (steps * p.joints) as f64
}

/// Mean velocity error in mm/frame.
pub fn mpjve<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<f64> {
    let (p, g) = poses_pair("mpjve", pred, gt)?;
    if p.frames < 2 {
        return Err(Error::Argument(format!("MPJVE needs T ≥ 2, got {}", p.frames)));
    }
    Ok(difference_error(&p, &g, 1))
}

/// Mean acceleration error in mm/frame².
pub fn accel_error<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<f64> {
    let (p, g) = poses_pair("accel_error", pred, gt)?;
    if p.frames < 3 {
        return Err(Error::Argument(format!("acceleration error needs T ≥ 3, got {}", p.frames)));
    }
    Ok(difference_error(&p, &g, 2))
}

/// Mean absolute Euclidean bone-length deviation.
pub fn blc<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>, skeleton: &Skeleton) -> Result<f64> {
    let (p, g) = poses_pair("blc", pred, gt)?;
    if p.joints != skeleton.num_joints() {
        return Err(Error::shape(
            "blc",
            format!("{} joints vs a {}-joint skeleton", p.joints, skeleton.num_joints()),
        ));
    }
    let bones = skeleton.bones();
    if bones.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for t in 0..p.frames {
        for &(c, par) in bones {
            let lp = dist3(p.joint(t, c), p.joint(t, par));
            let lg = dist3(g.joint(t, c), g.joint(t, par));
            total += (lp - lg).abs();
        }
    }
    Ok(total / (p.frames * bones.len()) as f64)
}

/// Spread of geodesic-to-tree distance ratios over all joint pairs of one
/// frame: max ratio / min ratio. `points` holds J rows of width `width`
/// on the hyperboloid. 1 means the tree metric is reproduced up to scale.
pub fn distortion_ratio(points: &[f64], width: usize, skeleton: &Skeleton) -> Result<f64> {
    let j = skeleton.num_joints();
    if points.len() != j * width || width < 2 {
        return Err(Error::shape(
            "distortion_ratio",
            format!("{} values for {j} joints of width {width}", points.len()),
        ));
    }
    if j < 2 {
        return Err(Error::Argument("distortion needs at least two joints".into()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for a in 0..j {
        for b in a + 1..j {
            let d = geodesic_distance_slices(&points[a * width..(a + 1) * width], &points[b * width..(b + 1) * width]);
            let r = d / skeleton.tree_distance(a, b) as f64;
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    Ok(if lo > 0.0 { hi / lo } else { f64::INFINITY })
}

/// Retrieval mean average precision in percent.
///
/// Each row is a query against every row of a different `group`; rows
/// sharing its `label` are relevant. Candidates are ranked by geodesic
/// distance (ties by index). Queries without relevant candidates are
/// skipped.
pub fn map_retrieval(points: &[f64], width: usize, labels: &[usize], groups: &[usize]) -> Result<f64> {
    let n = labels.len();
    if points.len() != n * width || groups.len() != n || width < 2 {
        return Err(Error::shape(
            "map_retrieval",
            format!("{} values, {n} labels, {} groups, width {width}", points.len(), groups.len()),
        ));
    }
    let row = |i: usize| &points[i * width..(i + 1) * width];
    let mut total = 0.0;
    let mut queries = 0usize;
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for q in 0..n {
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&i| groups[i] != groups[q])
                .map(|i| (geodesic_distance_slices(row(q), row(i)), i)),
        );
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &(_, i)) in cand.iter().enumerate() {
            if labels[i] == labels[q] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        if hits > 0 {
            total += ap / hits as f64;
            queries += 1;
        }
    }
    if queries == 0 {
        return Err(Error::Argument("no query has a relevant candidate".into()));
    }
    Ok(100.0 * total / queries as f64)
}

/// Embedding and attention diagnostics for one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    /// Mean over frames of [`distortion_ratio`].
    pub distortion: f64,
    /// [`map_retrieval`] with joints as labels and frames as groups.
    pub map: f64,
    /// Mean spatial attention entropy (nats).
    pub spatial_entropy: f64,
    /// Mean temporal attention entropy (nats).
    pub temporal_entropy: f64,
}

/// Metrics of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMetrics {
    pub name: String,
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub n_mpjpe: f64,
    pub mpjve: f64,
    pub accel: f64,
    pub blc: f64,
    pub diagnostics: Option<Diagnostics>,
}

/// Position, motion and bone metrics for one sequence; motion metrics
/// that need more frames than available are reported as NaN.
pub fn sequence_metrics<F: Real>(
    name: &str,
    pred: &Tensor<F>,
    gt: &Tensor<F>,
    skeleton: &Skeleton,
) -> Result<SequenceMetrics> {
    let frames = pred.shape().first().copied().unwrap_or(0);
    Ok(SequenceMetrics {
        name: name.to_string(),
        mpjpe: mpjpe(pred, gt)?,
        p_mpjpe: p_mpjpe(pred, gt)?.value,
        n_mpjpe: n_mpjpe(pred, gt)?.value,
        mpjve: if frames >= 2 { mpjve(pred, gt)? } else { f64::NAN },
        accel: if frames >= 3 { accel_error(pred, gt)? } else { f64::NAN },
        blc: blc(pred, gt, skeleton)?,
        diagnostics: None,
    })
}

/// Per-sequence rows plus their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<SequenceMetrics>,
}

impl MetricReport {
    pub fn average(&self) -> SequenceMetrics {
        let n = self.rows.len() as f64;
        let mean = |f: &dyn Fn(&SequenceMetrics) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        let diagnostics = if !self.rows.is_empty() && self.rows.iter().all(|r| r.diagnostics.is_some()) {
            let d = |f: &dyn Fn(&Diagnostics) -> f64| mean(&|r| f(r.diagnostics.as_ref().expect("checked")));
            Some(Diagnostics {
                distortion: d(&|x| x.distortion),
                map: d(&|x| x.map),
                spatial_entropy: d(&|x| x.spatial_entropy),
                temporal_entropy: d(&|x| x.temporal_entropy),
            })
        } else {
            None
        };
        SequenceMetrics {
            name: "AVG".into(),
            mpjpe: mean(&|r| r.mpjpe),
            p_mpjpe: mean(&|r| r.p_mpjpe),
            n_mpjpe: mean(&|r| r.n_mpjpe),
            mpjve: mean(&|r| r.mpjve),
            accel: mean(&|r| r.accel),
            blc: mean(&|r| r.blc),
            diagnostics,
        }
    }

    /// CSV with a header, one row per sequence and a trailing AVG row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "sequence,mpjpe,p_mpjpe,n_mpjpe,mpjve,accel,blc,distortion,map,entropy_spatial,entropy_temporal,definition_id\n",
        );
        let avg = self.average();
        for r in self.rows.iter().chain(std::iter::once(&avg)) {
            let _ = write!(
                out,
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
                r.name, r.mpjpe, r.p_mpjpe, r.n_mpjpe, r.mpjve, r.accel, r.blc
            );
            match &r.diagnostics {
                Some(d) => {
                    let _ = writeln!(
                        out,
                        ",{:.9},{:.9},{:.9},{:.9},{DIAGNOSTICS_DEFINITION_ID}",
                        d.distortion, d.map, d.spatial_entropy, d.temporal_entropy
                    );
                }
                None => out.push_str(",,,,,\n"),
            }
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let row = |r: &SequenceMetrics| {
            let mut v = serde_json::json!({
                "sequence": r.name,
                "mpjpe": r.mpjpe,
                "p_mpjpe": r.p_mpjpe,
                "n_mpjpe": r.n_mpjpe,
                "mpjve": r.mpjve,
                "accel": r.accel,
                "blc": r.blc,
            });
            if let Some(d) = &r.diagnostics {
                v["diagnostics"] = serde_json::json!({
                    "definition_id": DIAGNOSTICS_DEFINITION_ID,
                    "distortion": d.distortion,
                    "map": d.map,
                    "entropy_spatial": d.spatial_entropy,
                    "entropy_temporal": d.temporal_entropy,
                });
            }
            v
        };
        serde_json::json!({
            "rows": self.rows.iter().map(row).collect::<Vec<_>>(),
            "average": row(&self.average()),
        })
    }
}
