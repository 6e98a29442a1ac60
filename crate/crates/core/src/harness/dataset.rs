//! `HPSE` dataset files: a binary payload plus a JSON manifest at
//! `<path>.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::binio::{put_len, put_u32, read_file, write_file, Reader};
use crate::embedding::PoseSequence;
use crate::error::{Error, Result};
use crate::harness::synth::SyntheticSpec;
use crate::network::sidecar_path;
use crate::skeleton::{HopMode, Skeleton, SkeletonFile};

const MAGIC: &[u8; 4] = b"HPSE";
const VERSION: u32 = 1;

/// Structured-text description stored next to the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub sequences: usize,
    pub frames: usize,
    pub joints: usize,
    pub skeleton: SkeletonFile,
    /// Generator settings (including the seed) when synthetic.
    pub spec: Option<SyntheticSpec>,
    pub seed: Option<u64>,
}

/// Equal-length `[T, J, 3]` sequences on one skeleton, stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub sequences: Vec<PoseSequence<f32>>,
    pub spec: Option<SyntheticSpec>,
}

impl Dataset {
    pub fn new(skeleton: Skeleton, sequences: Vec<PoseSequence<f32>>, spec: Option<SyntheticSpec>) -> Result<Self> {
        let ds = Self {
            skeleton,
            sequences,
            spec,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let Some(first) = self.sequences.first() else {
            return Err(Error::Config("dataset has no sequences".into()));
        };
        let (t_len, j) = (first.frames(), first.joints());
        if j != self.skeleton.num_joints() {
            return Err(Error::Config(format!(
                "sequences have {j} joints, skeleton has {}",
                self.skeleton.num_joints()
            )));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            s.validate()?;
            if s.frames() != t_len || s.joints() != j {
                return Err(Error::Config(format!(
                    "sequence {i} is [{}, {}], expected [{t_len}, {j}]",
                    s.frames(),
                    s.joints()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.sequences[0].frames()
    }

    pub fn joints(&self) -> usize {
        self.skeleton.num_joints()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: VERSION,
            sequences: self.len(),
            frames: self.frames(),
            joints: self.joints(),
            skeleton: self.skeleton.to_file(),
            spec: self.spec.clone(),
            seed: self.spec.as_ref().map(|s| s.seed),
        }
    }

    /// Writes the payload to `path` and the manifest to `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (n, t_len, j) = (self.len(), self.frames(), self.joints());
        let mut out = Vec::with_capacity(28 + 2 * n * t_len * j * 3 * 4);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        for d in [n, t_len, j, 3, 3] {
            put_len(&mut out, d, path)?;
        }
        for s in &self.sequences {
            for v in s.inputs.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in &self.sequences {
            for v in s.targets.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_file(path, &out)?;
        let text = serde_json::to_string_pretty(&self.manifest())?;
        write_file(&sidecar_path(path), text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = String::from_utf8(read_file(&side)?).map_err(|e| Error::Format {
            path: side.clone(),
            reason: e.to_string(),
        })?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let skeleton = Skeleton::from_file(&manifest.skeleton, HopMode::default())?;

        let bytes = read_file(path)?;
        let mut r = Reader::new(&bytes, path);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let dims: Vec<usize> = (0..5).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let (n, t_len, j) = (dims[0], dims[1], dims[2]);
        if dims[3] != 3 || dims[4] != 3 {
            return Err(r.error(format!("channel counts {:?}, expected [3, 3]", &dims[3..])));
        }
        if (n, t_len, j) != (manifest.sequences, manifest.frames, manifest.joints) {
            return Err(r.error(format!(
                "payload is [{n}, {t_len}, {j}], manifest says [{}, {}, {}]",
                manifest.sequences, manifest.frames, manifest.joints
            )));
        }
        let per = t_len * j * 3;
        let block = |r: &mut Reader| -> Result<Vec<Tensor<f32>>> {
            (0..n)
                .map(|_| {
                    let raw = r.take(per * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect();
                    Tensor::new(vec![t_len, j, 3], data)
                })
                .collect()
        };
        let inputs = block(&mut r)?;
        let targets = block(&mut r)?;
        r.finish()?;
        let sequences = inputs
            .into_iter()
            .zip(targets)
            .map(|(x, y)| PoseSequence::new(x, y))
            .collect::<Result<_>>()?;
        Self::new(skeleton, sequences, manifest.spec)
    }

    /// Splits off the last `n` sequences.
    pub fn split_tail(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Argument(format!(
                "cannot hold out {n} of {} sequences",
                self.len()
            )));
        }
        let cut = self.len() - n;
        let part = |s: &[PoseSequence<f32>]| Dataset::new(self.skeleton.clone(), s.to_vec(), self.spec.clone());
        Ok((part(&self.sequences[..cut])?, part(&self.sequences[cut..])?))
    }
}
